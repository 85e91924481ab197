//! Structural similarity (single- and multi-scale) on the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    Ssim,
    MsSsim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityMeasure {
    pub kind: SimilarityKind,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_sigma")]
    pub gaussian_sigma: f64,
    #[serde(default = "default_k")]
    pub stability_constants: (f64, f64),
}

fn default_window() -> usize {
    11
}
fn default_sigma() -> f64 {
    1.5
}
fn default_k() -> (f64, f64) {
    (0.01, 0.03)
}

impl Default for SimilarityMeasure {
    fn default() -> Self {
        Self::ssim()
    }
}

/// Standard multi-scale weights for the first three scales.
const MS_WEIGHTS: [f64; 3] = [0.0448, 0.2856, 0.3001];

impl SimilarityMeasure {
    pub fn ssim() -> Self {
        Self {
            kind: SimilarityKind::Ssim,
            window_size: default_window(),
            gaussian_sigma: default_sigma(),
            stability_constants: default_k(),
        }
    }

    pub fn ms_ssim() -> Self {
        Self {
            kind: SimilarityKind::MsSsim,
            ..Self::ssim()
        }
    }

    pub fn with_window(mut self, window_size: usize) -> Self {
        self.window_size = window_size;
        self
    }

    pub fn scales(&self) -> usize {
        match self.kind {
            SimilarityKind::Ssim => 1,
            SimilarityKind::MsSsim => MS_WEIGHTS.len(),
        }
    }

    /// Smallest spatial side the measure accepts.
    pub fn min_size(&self) -> usize {
        self.window_size << (self.scales() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!(
                "similarity window_size = {} must be odd",
                self.window_size
            )));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config("similarity gaussian_sigma must be > 0".into()));
        }
        let (k1, k2) = self.stability_constants;
        if !(k1 > 0.0 && k2 > 0.0) {
            return Err(Error::Config("similarity stability constants must be > 0".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian window.
    pub fn window(&self) -> Vec<f32> {
        let half = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| (v / total) as f32).collect()
    }

    fn check_shapes(&self, a: &[usize], b: &[usize]) -> Result<()> {
        if a != b {
            return Err(Error::Config(format!("similarity inputs differ in shape: {a:?} vs {b:?}")));
        }
        if a.len() != 4 {
            return Err(Error::Config(format!("similarity expects NCHW input, got {a:?}")));
        }
        let need = self.min_size();
        if a[2] < need || a[3] < need {
            return Err(Error::Config(format!(
                "similarity needs spatial size ≥ {need} but got {}×{}; reduce window_size (currently {})",
                a[2], a[3], self.window_size
            )));
        }
        Ok(())
    }
}

/// Dynamic range of a pair: max − min over both tensors, or 1 if both are
/// the same constant.
pub fn dynamic_range(a: &Tensor, b: &Tensor) -> f64 {
    let (lo, hi) = a
        .data()
        .iter()
        .chain(b.data())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = f64::from(hi) - f64::from(lo);
    if range > 0.0 {
        range
    } else {
        1.0
    }
}

struct Maps {
    /// Luminance term times contrast-structure term.
    ssim: Var,
    /// Contrast-structure term alone.
    cs: Var,
}

fn ssim_maps(tape: &mut Tape, a: Var, b: Var, window: &[f32], c1: f32, c2: f32) -> Maps {
    let mu_a = tape.blur(a, window);
    let mu_b = tape.blur(b, window);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_aa = tape.blur(aa, window);
    let e_bb = tape.blur(bb, window);
    let e_ab = tape.blur(ab, window);
    let mu_aa = tape.mul(mu_a, mu_a);
    let mu_bb = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_aa);
    let var_b = tape.sub(e_bb, mu_bb);
    let cov = tape.sub(e_ab, mu_ab);

    let lum_num = tape.scale(mu_ab, 2.0);
    let lum_num = tape.add_scalar(lum_num, c1);
    let lum_den = tape.add(mu_aa, mu_bb);
    let lum_den = tape.add_scalar(lum_den, c1);
    let cs_num = tape.scale(cov, 2.0);
    let cs_num = tape.add_scalar(cs_num, c2);
    let cs_den = tape.add(var_a, var_b);
    let cs_den = tape.add_scalar(cs_den, c2);

    let lum = tape.div(lum_num, lum_den);
    let cs = tape.div(cs_num, cs_den);
    let ssim = tape.mul(lum, cs);
    Maps { ssim, cs }
}

/// Differentiable similarity of two NCHW tensors, averaged over samples and
/// channels. The dynamic range is taken from the current values and treated
/// as a constant.
pub fn similarity(tape: &mut Tape, a: Var, b: Var, m: &SimilarityMeasure) -> Result<Var> {
    m.validate()?;
    m.check_shapes(tape.shape(a), tape.shape(b))?;
    let range = dynamic_range(tape.value(a), tape.value(b));
    let (k1, k2) = m.stability_constants;
    let c1 = ((k1 * range).powi(2)) as f32;
    let c2 = ((k2 * range).powi(2)) as f32;
    let window = m.window();
    match m.kind {
        SimilarityKind::Ssim => {
            let maps = ssim_maps(tape, a, b, &window, c1, c2);
            Ok(tape.mean(maps.ssim))
        }
        SimilarityKind::MsSsim => {
            let total: f64 = MS_WEIGHTS.iter().sum();
            let (mut a, mut b) = (a, b);
            let mut product: Option<Var> = None;
            for (s, &w) in MS_WEIGHTS.iter().enumerate() {
                let maps = ssim_maps(tape, a, b, &window, c1, c2);
                let last = s + 1 == MS_WEIGHTS.len();
                let term = if last { maps.ssim } else { maps.cs };
                let pooled = tape.global_avg_pool(term);
                let pooled = tape.relu(pooled);
                let powered = tape.pow_const(pooled, (w / total) as f32);
                product = Some(match product {
                    Some(p) => tape.mul(p, powered),
                    None => powered,
                });
                if !last {
                    a = tape.avg_pool2(a);
                    b = tape.avg_pool2(b);
                }
            }
            let product = product.expect("at least one scale");
            Ok(tape.mean(product))
        }
    }
}

/// Valid-mode separable blur of one h×w plane.
fn blur_plane64(x: &[f64], h: usize, w: usize, window: &[f64]) -> Vec<f64> {
    let k = window.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for ox in 0..wo {
            rows[y * wo + ox] = window.iter().enumerate().map(|(i, v)| v * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            out[oy * wo + ox] = window.iter().enumerate().map(|(i, v)| v * rows[(oy + i) * wo + ox]).sum();
        }
    }
    out
}

fn pool_plane64(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        for ox in 0..wo {
            let (y, x0) = (2 * oy, 2 * ox);
            out.push(0.25 * (x[y * w + x0] + x[y * w + x0 + 1] + x[(y + 1) * w + x0] + x[(y + 1) * w + x0 + 1]));
        }
    }
    out
}

/// SSIM and contrast-structure maps of one plane pair, in f64.
fn ssim_maps64(a: &[f64], b: &[f64], h: usize, w: usize, window: &[f64], c1: f64, c2: f64) -> (Vec<f64>, Vec<f64>) {
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = blur_plane64(a, h, w, window);
    let mu_b = blur_plane64(b, h, w, window);
    let e_aa = blur_plane64(&prod(a, a), h, w, window);
    let e_bb = blur_plane64(&prod(b, b), h, w, window);
    let e_ab = blur_plane64(&prod(a, b), h, w, window);
    let mut ssim = Vec::with_capacity(mu_a.len());
    let mut cs = Vec::with_capacity(mu_a.len());
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (va, vb, cov) = (e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb);
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let c = (2.0 * cov + c2) / (va + vb + c2);
        ssim.push(lum * c);
        cs.push(c);
    }
    (ssim, cs)
}

/// Similarity value without gradients, evaluated in f64. Agrees with
/// [`similarity`] up to the latter's f32 rounding.
pub fn similarity_value(a: &Tensor, b: &Tensor, m: &SimilarityMeasure) -> Result<f64> {
    m.validate()?;
    m.check_shapes(a.shape(), b.shape())?;
    let range = dynamic_range(a, b);
    let (k1, k2) = m.stability_constants;
    let (c1, c2) = ((k1 * range).powi(2), (k2 * range).powi(2));
    let half = (m.window_size / 2) as f64;
    let raw: Vec<f64> = (0..m.window_size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * m.gaussian_sigma * m.gaussian_sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let window: Vec<f64> = raw.into_iter().map(|v| v / total).collect();
    let (_, _, h, w) = a.dims4();
    let planes = a.data().chunks(h * w).zip(b.data().chunks(h * w));
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pa, pb) in planes {
        let mut pa: Vec<f64> = pa.iter().map(|&v| f64::from(v)).collect();
        let mut pb: Vec<f64> = pb.iter().map(|&v| f64::from(v)).collect();
        match m.kind {
            SimilarityKind::Ssim => {
                let (map, _) = ssim_maps64(&pa, &pb, h, w, &window, c1, c2);
                sum += map.iter().sum::<f64>();
                count += map.len();
            }
            SimilarityKind::MsSsim => {
                let weights: f64 = MS_WEIGHTS.iter().sum();
                let (mut hh, mut ww) = (h, w);
                let mut product = 1.0;
                for (s, &wt) in MS_WEIGHTS.iter().enumerate() {
                    let (ssim, cs) = ssim_maps64(&pa, &pb, hh, ww, &window, c1, c2);
                    let last = s + 1 == MS_WEIGHTS.len();
                    let term = if last { ssim } else { cs };
                    let pooled = term.iter().sum::<f64>() / term.len() as f64;
                    product *= pooled.max(0.0).powf(wt / weights);
                    if !last {
                        pa = pool_plane64(&pa, hh, ww);
                        pb = pool_plane64(&pb, hh, ww);
                        (hh, ww) = (hh / 2, ww / 2);
                    }
                }
                sum += product;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// One similarity score per sample of an NCHW batch.
pub fn similarity_per_sample(a: &Tensor, b: &Tensor, m: &SimilarityMeasure) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.ndim() != 4 {
        return Err(Error::Config(format!(
            "similarity inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    (0..a.shape()[0])
        .map(|i| similarity_value(&a.sample(i), &b.sample(i), m))
        .collect()
}
