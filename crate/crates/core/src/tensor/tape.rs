use super::kernels::{self, ConvGeometry};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Label value excluded from cross-entropy.
pub const IGNORE_INDEX: u32 = u32::MAX;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
        // Per-sample patch matrices, present only when the weight needs a gradient
        // and the convolution is not a plain pointwise one.
        cols: Option<Vec<f32>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    PowConst(Var, f32),
    MulChannel {
        x: Var,
        a: Var,
    },
    GlobalAvgPool(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    Reshape(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool2(Var),
    Blur {
        x: Var,
        kernel: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u32>,
        probs: Vec<f32>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert list of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Splits NCHW-like shapes into (N, C, product of the remaining dims).
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least rank 2, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// 2-D convolution, NCHW input and OIkk weight, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        assert_eq!(kh, kw, "only square kernels are supported");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (krows, p) = (geom.col_rows(), geom.col_cols());
        let pointwise = kh == 1 && stride == 1 && pad == 0;
        let keep_cols = self.nodes[w.0].needs_grad && !pointwise;
        let mut saved = keep_cols.then(|| vec![0.0f32; n * krows * p]);
        let mut scratch = if pointwise { Vec::new() } else { vec![0.0f32; krows * p] };
        let mut out = vec![0.0f32; n * o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            for s in 0..n {
                let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let cols: &[f32] = if pointwise {
                    xs
                } else {
                    let buf = match saved.as_mut() {
                        Some(all) => &mut all[s * krows * p..(s + 1) * krows * p],
                        None => &mut scratch[..],
                    };
                    kernels::im2col(xs, &geom, buf);
                    buf
                };
                let ys = &mut out[s * o * p..(s + 1) * o * p];
                kernels::gemm(o, krows, p, wv, false, cols, false, ys, false);
                if let Some(bias) = bias {
                    for (oc, row) in ys.chunks_mut(p).enumerate() {
                        let bv = bias[oc];
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.any_grad(&deps);
        self.push(
            Tensor::new([n, o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels: o,
                cols: saved,
            },
            needs,
        )
    }

    /// `x · wᵀ + b` with `x` of shape [N, I] and `w` of shape [O, I].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape();
        assert_eq!(xs.len(), 2, "linear expects [N, I] input, got {xs:?}");
        let (n, i) = (xs[0], xs[1]);
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], i, "linear input width {i} vs weight {ws:?}");
        let o = ws[0];
        let mut out = vec![0.0f32; n * o];
        kernels::gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bias).for_each(|(v, bv)| *v += bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.any_grad(&deps);
        self.push(Tensor::new([n, o], out), Op::Linear { x, w, b }, needs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = ncs(&shape);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        let cg = c / groups;
        let m = (cg * s) as f32;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0f32; xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let lo = (i * c + g * cg) * s;
                let chunk = &xv[lo..lo + cg * s];
                let mean = chunk.iter().map(|&v| f64::from(v)).sum::<f64>() / f64::from(m);
                let var = chunk
                    .iter()
                    .map(|&v| {
                        let d = f64::from(v) - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / f64::from(m);
                let mean = mean as f32;
                let rstd = 1.0 / (var as f32 + eps).sqrt();
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let base = lo + cc * s;
                    for j in 0..s {
                        out[base + j] = (xv[base + j] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let needs = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            needs,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(x).map(f);
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f32::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `x^p` for non-negative `x`; inputs are floored at a tiny positive value.
    pub fn pow_const(&mut self, x: Var, p: f32) -> Var {
        self.unary(x, |v| v.max(1e-12).powf(p), Op::PowConst(x, p))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        let needs = self.any_grad(&[a, b]);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Scales every channel of `x` ([N, C, ...]) by `a` ([N, C]).
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = ncs(&shape);
        assert_eq!(self.value(a).shape(), &[n, c], "mul_channel attention shape");
        let xv = self.value(x).data();
        let av = self.value(a).data();
        let mut out = xv.to_vec();
        for (i, plane) in out.chunks_mut(s).enumerate() {
            let f = av[i];
            plane.iter_mut().for_each(|v| *v *= f);
        }
        let needs = self.any_grad(&[x, a]);
        self.push(Tensor::new(shape, out), Op::MulChannel { x, a }, needs)
    }

    /// Mean over all trailing dims: [N, C, ...] → [N, C].
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, s) = ncs(self.value(x).shape());
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| p.iter().sum::<f32>() / s as f32)
            .collect();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::new([n, c], out), Op::GlobalAvgPool(x), needs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = ncs(&shape);
        assert!(start + len <= c, "channel slice {start}+{len} out of {c}");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * s);
        for i in 0..n {
            out.extend_from_slice(&xv[(i * c + start) * s..(i * c + start + len) * s]);
        }
        let mut new_shape = shape;
        new_shape[1] = len;
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::new(new_shape, out), Op::SliceChannels { x, start }, needs)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let (n, _, s) = ncs(&first);
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ps) = ncs(self.value(p).shape());
            assert!(pn == n && ps == s, "concat_channels shape mismatch");
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * s);
        for i in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[i * pc * s..(i + 1) * pc * s]);
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        let needs = self.any_grad(parts);
        self.push(Tensor::new(shape, out), Op::ConcatChannels(parts.to_vec()), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, Op::Reshape(x), needs)
    }

    /// Nearest-neighbour upsampling of NCHW data by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for (plane, src) in out.chunks_mut(ho * wo).zip(xv.chunks(h * w)) {
            for oy in 0..ho {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    plane[oy * wo + ox] = row[ox / factor];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::new([n, c, ho, wo], out), Op::Upsample { x, factor }, needs)
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for (plane, src) in out.chunks_mut(ho * wo).zip(xv.chunks(h * w)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, x0) = (2 * oy, 2 * ox);
                    plane[oy * wo + ox] = 0.25
                        * (src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0] + src[(y + 1) * w + x0 + 1]);
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::new([n, c, ho, wo], out), Op::AvgPool2(x), needs)
    }

    /// Per-channel separable filter in valid mode (no padding).
    pub fn blur(&mut self, x: Var, kernel: &[f32]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let k = kernel.len();
        assert!(h >= k && w >= k, "blur kernel {k} larger than {h}x{w} plane");
        let (ho, wo) = (h + 1 - k, w + 1 - k);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for (dst, src) in out.chunks_mut(ho * wo).zip(xv.chunks(h * w)) {
            kernels::blur_plane(src, h, w, kernel, dst);
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            Tensor::new([n, c, ho, wo], out),
            Op::Blur {
                x,
                kernel: kernel.to_vec(),
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| f64::from(v)).sum::<f64>();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(s as f32), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / t.numel() as f64;
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(s as f32), Op::Mean(x), needs)
    }

    /// Mean softmax cross-entropy over all non-ignored positions.
    ///
    /// `logits` is [N, K] or [N, K, ...]; `labels` holds one entry per
    /// (sample, position) in row-major order. Labels must be `< K` or
    /// [`IGNORE_INDEX`]; callers validate before recording.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Var {
        let (n, k, s) = ncs(self.value(logits).shape());
        assert_eq!(labels.len(), n * s, "cross_entropy label count");
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f32; lv.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for i in 0..n {
            for p in 0..s {
                let idx = |cls: usize| (i * k + cls) * s + p;
                let label = labels[i * s + p];
                let max = (0..k).map(|c| lv[idx(c)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for c in 0..k {
                    z += f64::from(lv[idx(c)] - max).exp();
                }
                for c in 0..k {
                    probs[idx(c)] = (f64::from(lv[idx(c)] - max).exp() / z) as f32;
                }
                if label != IGNORE_INDEX {
                    debug_assert!((label as usize) < k);
                    total += z.ln() - f64::from(lv[idx(label as usize)] - max);
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.nodes[logits.0].needs_grad;
        self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            needs,
        )
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        self.backward_with(root, Tensor::new(self.shape(root).to_vec(), vec![1.0]))
    }

    /// Backpropagates a given output gradient (vector-Jacobian product).
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(root), "seed shape must match root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes[..];
        let gd = g.data();
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
                cols,
            } => {
                let (n, c, h, wd) = val(*x).dims4();
                let o = *out_channels;
                let (krows, p) = (geom.col_rows(), geom.col_cols());
                let pointwise = geom.kernel == 1 && geom.stride == 1 && geom.pad == 0;
                let wv = val(*w).data();
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = vec![0.0f32; o];
                    for s in 0..n {
                        for (oc, row) in gd[s * o * p..(s + 1) * o * p].chunks(p).enumerate() {
                            db[oc] += row.iter().sum::<f32>();
                        }
                    }
                    accumulate(grads, nodes, b, Tensor::new([o], db));
                }
                if wants(*w) {
                    let mut dw = vec![0.0f32; o * krows];
                    let xv = val(*x).data();
                    for s in 0..n {
                        let dy = &gd[s * o * p..(s + 1) * o * p];
                        let cs: &[f32] = if pointwise {
                            &xv[s * c * h * wd..(s + 1) * c * h * wd]
                        } else {
                            let all = cols.as_ref().expect("conv cols saved when weight needs grad");
                            &all[s * krows * p..(s + 1) * krows * p]
                        };
                        kernels::gemm(o, p, krows, dy, false, cs, true, &mut dw, true);
                    }
                    accumulate(grads, nodes, *w, Tensor::new(val(*w).shape().to_vec(), dw));
                }
                if wants(*x) {
                    let mut dx = vec![0.0f32; n * c * h * wd];
                    let mut dcols = vec![0.0f32; krows * p];
                    for s in 0..n {
                        let dy = &gd[s * o * p..(s + 1) * o * p];
                        let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                        if pointwise {
                            kernels::gemm(krows, o, p, wv, true, dy, false, dxs, false);
                        } else {
                            kernels::gemm(krows, o, p, wv, true, dy, false, &mut dcols, false);
                            kernels::col2im_add(&dcols, geom, dxs);
                        }
                    }
                    accumulate(grads, nodes, *x, Tensor::new([n, c, h, wd], dx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = val(*x).shape();
                let (n, i) = (xs[0], xs[1]);
                let o = val(*w).shape()[0];
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = vec![0.0f32; o];
                    for row in gd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, nodes, b, Tensor::new([o], db));
                }
                if wants(*w) {
                    let mut dw = vec![0.0f32; o * i];
                    kernels::gemm(o, n, i, gd, true, val(*x).data(), false, &mut dw, false);
                    accumulate(grads, nodes, *w, Tensor::new([o, i], dw));
                }
                if wants(*x) {
                    let mut dx = vec![0.0f32; n * i];
                    kernels::gemm(n, o, i, gd, false, val(*w).data(), false, &mut dx, false);
                    accumulate(grads, nodes, *x, Tensor::new([n, i], dx));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let shape = val(*x).shape().to_vec();
                let (n, c, s) = ncs(&shape);
                let cg = c / groups;
                let m = (cg * s) as f32;
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = wants(*x).then(|| vec![0.0f32; xv.len()]);
                for i in 0..n {
                    for gi in 0..*groups {
                        let (mu, rs) = (mean[i * groups + gi], rstd[i * groups + gi]);
                        let lo = (i * c + gi * cg) * s;
                        let mut sum1 = 0.0f32;
                        let mut sum2 = 0.0f32;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..s {
                                let idx = lo + cc * s + j;
                                let xhat = (xv[idx] - mu) * rs;
                                dgamma[ch] += gd[idx] * xhat;
                                dbeta[ch] += gd[idx];
                                let dxhat = gd[idx] * gv[ch];
                                sum1 += dxhat;
                                sum2 += dxhat * xhat;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let (mean1, mean2) = (sum1 / m, sum2 / m);
                            for cc in 0..cg {
                                let ch = gi * cg + cc;
                                for j in 0..s {
                                    let idx = lo + cc * s + j;
                                    let xhat = (xv[idx] - mu) * rs;
                                    dx[idx] = rs * (gd[idx] * gv[ch] - mean1 - xhat * mean2);
                                }
                            }
                        }
                    }
                }
                accumulate(grads, nodes, *gamma, Tensor::new([c], dgamma));
                accumulate(grads, nodes, *beta, Tensor::new([c], dbeta));
                if let Some(dx) = dx {
                    accumulate(grads, nodes, *x, Tensor::new(shape, dx));
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, nodes, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let d = gd.iter().zip(yv).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                accumulate(grads, nodes, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, nodes, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, g.clone());
                accumulate(grads, nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, g.clone());
                if wants(*b) {
                    accumulate(grads, nodes, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, nodes, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if wants(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, nodes, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if wants(*a) {
                    let d = gd.iter().zip(bv).map(|(g, y)| g / y).collect();
                    accumulate(grads, nodes, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if wants(*b) {
                    let yv = node.value.data();
                    let d = gd
                        .iter()
                        .zip(bv)
                        .zip(yv)
                        .map(|((g, d), q)| -g * q / d)
                        .collect();
                    accumulate(grads, nodes, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(x, s) => accumulate(grads, nodes, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => accumulate(grads, nodes, *x, g.clone()),
            Op::PowConst(x, p) => {
                let xv = val(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| g * p * v.max(1e-12).powf(p - 1.0))
                    .collect();
                accumulate(grads, nodes, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::MulChannel { x, a } => {
                let shape = val(*x).shape().to_vec();
                let (_, _, s) = ncs(&shape);
                let xv = val(*x).data();
                let av = val(*a).data();
                if wants(*x) {
                    let mut dx = gd.to_vec();
                    for (i, plane) in dx.chunks_mut(s).enumerate() {
                        plane.iter_mut().for_each(|v| *v *= av[i]);
                    }
                    accumulate(grads, nodes, *x, Tensor::new(shape.clone(), dx));
                }
                if wants(*a) {
                    let da = gd
                        .chunks(s)
                        .zip(xv.chunks(s))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(g, x)| g * x).sum())
                        .collect();
                    accumulate(grads, nodes, *a, Tensor::new(val(*a).shape().to_vec(), da));
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = val(*x).shape().to_vec();
                let (_, _, s) = ncs(&shape);
                let mut dx = Vec::with_capacity(shape.iter().product());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv / s as f32, s));
                }
                accumulate(grads, nodes, *x, Tensor::new(shape, dx));
            }
            Op::SliceChannels { x, start } => {
                let shape = val(*x).shape().to_vec();
                let (n, c, s) = ncs(&shape);
                let len = g.shape()[1];
                let mut dx = vec![0.0f32; n * c * s];
                for i in 0..n {
                    dx[(i * c + start) * s..(i * c + start + len) * s]
                        .copy_from_slice(&gd[i * len * s..(i + 1) * len * s]);
                }
                accumulate(grads, nodes, *x, Tensor::new(shape, dx));
            }
            Op::ConcatChannels(parts) => {
                let (n, total_c, s) = ncs(g.shape());
                let mut offset = 0;
                for &p in parts {
                    let pshape = val(p).shape().to_vec();
                    let pc = pshape[1];
                    if wants(p) {
                        let mut dp = Vec::with_capacity(n * pc * s);
                        for i in 0..n {
                            dp.extend_from_slice(&gd[(i * total_c + offset) * s..(i * total_c + offset + pc) * s]);
                        }
                        accumulate(grads, nodes, p, Tensor::new(pshape, dp));
                    }
                    offset += pc;
                }
            }
            Op::Reshape(x) => {
                accumulate(grads, nodes, *x, g.clone().reshape(val(*x).shape().to_vec()));
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = val(*x).dims4();
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0f32; n * c * h * w];
                for (dst, src) in dx.chunks_mut(h * w).zip(gd.chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[(oy / factor) * w + ox / factor] += src[oy * wo + ox];
                        }
                    }
                }
                accumulate(grads, nodes, *x, Tensor::new([n, c, h, w], dx));
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = val(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; n * c * h * w];
                for (dst, src) in dx.chunks_mut(h * w).zip(gd.chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = 0.25 * src[oy * wo + ox];
                            let (y, x0) = (2 * oy, 2 * ox);
                            dst[y * w + x0] += v;
                            dst[y * w + x0 + 1] += v;
                            dst[(y + 1) * w + x0] += v;
                            dst[(y + 1) * w + x0 + 1] += v;
                        }
                    }
                }
                accumulate(grads, nodes, *x, Tensor::new([n, c, h, w], dx));
            }
            Op::Blur { x, kernel } => {
                let (n, c, h, w) = val(*x).dims4();
                let k = kernel.len();
                let (ho, wo) = (h + 1 - k, w + 1 - k);
                let mut dx = vec![0.0f32; n * c * h * w];
                for (dst, src) in dx.chunks_mut(h * w).zip(gd.chunks(ho * wo)) {
                    kernels::blur_plane_backward(src, h, w, kernel, dst);
                }
                accumulate(grads, nodes, *x, Tensor::new([n, c, h, w], dx));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                accumulate(grads, nodes, *x, Tensor::full(val(*x).shape().to_vec(), gv));
            }
            Op::Mean(x) => {
                let t = val(*x);
                let gv = gd[0] / t.numel() as f32;
                accumulate(grads, nodes, *x, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let shape = val(*logits).shape().to_vec();
                let (n, k, s) = ncs(&shape);
                let mut d = vec![0.0f32; probs.len()];
                if *count > 0 {
                    let scale = gd[0] / *count as f32;
                    for i in 0..n {
                        for p in 0..s {
                            let label = labels[i * s + p];
                            if label == IGNORE_INDEX {
                                continue;
                            }
                            for c in 0..k {
                                let idx = (i * k + c) * s + p;
                                let onehot = if c as u32 == label { 1.0 } else { 0.0 };
                                d[idx] = (probs[idx] - onehot) * scale;
                            }
                        }
                    }
                }
                accumulate(grads, nodes, *logits, Tensor::new(shape, d));
            }
        }
    }
}
