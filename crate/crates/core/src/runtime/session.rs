//! Producer and consumer session loops.
//!
//! Exchange for one session (one task):
//! 1. consumer → HELLO (task, dtype preference, head input shape);
//!    producer → HELLO (feature shape, negotiated dtype, schedule, key check);
//!    consumer → CONTROL ready, or CONTROL abort when the key check fails.
//! 2. per epoch, producer → LABELS_ENC with the encrypted labels of every batch
//!    in the epoch's order.
//! 3. per batch, producer → FORWARD_FEATURES; consumer → BACKWARD_GRADS with
//!    the loss gradient at the feature boundary, both carrying the same global
//!    batch index.
//! 4. producer → BYE; consumer → METRICS with its per-batch losses.

use std::time::{Duration, Instant};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::model::{DType, FeatureTensor, Head, Metamorph, Stage};
use crate::nn::{flatten, AdamW, AdamWConfig, Bound};
use crate::privacy::{clip_in_place, noisy_aggregate, DpConfig, PrivacyLedger};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::{task_loss, TaskSpec};

use super::codec::{MsgType, SplitMessage};
use super::crypto::{decode_labels, encode_labels, LabelCipher};
use super::rtt::RttRecord;
use super::transport::{Control, Transport};

fn default_dtype() -> DType {
    DType::F32
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Settings shared by both parties of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub session_id: u64,
    pub task_id: String,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: usize,
    /// Stop after this many batches in total (producer side).
    #[serde(default)]
    pub max_batches: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Wire dtype preference; f16 is used only when both parties ask for it.
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl SessionConfig {
    pub fn new(session_id: u64, task_id: impl Into<String>, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            session_id,
            task_id: task_id.into(),
            epochs,
            batch_size,
            max_batches: None,
            seed,
            optimizer: AdamWConfig::default(),
            dtype: DType::F32,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn timeout(&self) -> Option<Duration> {
        (self.timeout_ms > 0).then(|| Duration::from_millis(self.timeout_ms))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SessionStatus {
    Completed,
    /// The next DP step would have exceeded the target ε.
    BudgetExhausted { epsilon: f64 },
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProducerOutcome {
    pub status: SessionStatus,
    pub batches: u64,
    pub rtt: Vec<RttRecord>,
    pub ledger: Option<PrivacyLedger>,
    /// Per-batch losses reported by the consumer at shutdown.
    pub consumer_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumerOutcome {
    pub status: SessionStatus,
    pub batches: u64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case")]
enum Hello {
    Consumer {
        task_id: String,
        dtype: DType,
        input_shape: [usize; 3],
    },
    Producer {
        task_id: String,
        dtype: DType,
        feature_shape: [usize; 3],
        epochs: usize,
        batches_per_epoch: usize,
        key_check: String,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Metrics {
    batches: u64,
    losses: Vec<f64>,
}

fn json_message<T: Serialize>(t: MsgType, session_id: u64, batch_index: u64, value: &T) -> SplitMessage {
    let bytes = serde_json::to_vec(value).expect("plain records serialize");
    SplitMessage::new(t, session_id, batch_index, vec![FeatureTensor::from_bytes(bytes)])
}

fn parse_json<T: for<'de> Deserialize<'de>>(m: &SplitMessage) -> Result<T> {
    let bytes = m
        .tensors
        .first()
        .filter(|t| t.dtype() == DType::U8)
        .ok_or_else(|| Error::Protocol(format!("{:?} without a record", m.msg_type)))?;
    serde_json::from_slice(bytes.bytes()).map_err(|e| Error::Protocol(format!("{:?} record: {e}", m.msg_type)))
}

fn negotiate(a: DType, b: DType) -> DType {
    if a == DType::F16 && b == DType::F16 {
        DType::F16
    } else {
        DType::F32
    }
}

/// Internal result of a session loop before it is folded into an outcome.
enum Stop {
    Done,
    Budget(f64),
    Aborted(String),
}

/// Session errors (timeouts, closed sockets) become aborts; protocol and
/// local errors propagate.
fn fold(result: Result<Stop>) -> Result<SessionStatus> {
    match result {
        Ok(Stop::Done) => Ok(SessionStatus::Completed),
        Ok(Stop::Budget(epsilon)) => Ok(SessionStatus::BudgetExhausted { epsilon }),
        Ok(Stop::Aborted(reason)) => Ok(SessionStatus::Aborted { reason }),
        Err(Error::Session(reason)) => Ok(SessionStatus::Aborted { reason }),
        Err(e) => Err(e),
    }
}

/// Producer side: owns the encoder, the task's metamorph module and the data.
/// Producer parameters get DP updates when `dp` is given.
#[allow(clippy::too_many_arguments)]
pub fn run_producer(
    transport: &mut Transport,
    encoder: &mut Stage,
    metamorph: &mut Metamorph,
    data: &Dataset,
    label_set: &str,
    dp: Option<&DpConfig>,
    cipher: &LabelCipher,
    cfg: &SessionConfig,
) -> Result<ProducerOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("runtime.batch_size must be ≥ 1".into()));
    }
    if let Some(dp) = dp {
        dp.validate()?;
    }
    let labels = data
        .task(label_set)
        .ok_or_else(|| Error::Data(format!("dataset has no label set `{label_set}`")))?;
    let mut out = ProducerOutcome {
        status: SessionStatus::Completed,
        batches: 0,
        rtt: Vec::new(),
        ledger: dp.map(|d| PrivacyLedger::new(*d)),
        consumer_losses: Vec::new(),
    };
    let mut p = Producer {
        t: transport,
        encoder,
        metamorph,
        data,
        labels,
        dp,
        cipher,
        cfg,
        start: Instant::now(),
    };
    let result = p.run(&mut out);
    if let Err(e) = &result {
        if !matches!(e, Error::Session(_)) {
            let _ = p.t.send(&Control::Abort(e.to_string()).to_message(cfg.session_id, out.batches));
        }
    }
    out.status = fold(result)?;
    info!("producer session {}: {:?} after {} batches", cfg.session_id, out.status, out.batches);
    Ok(out)
}

struct Producer<'a> {
    t: &'a mut Transport,
    encoder: &'a mut Stage,
    metamorph: &'a mut Metamorph,
    data: &'a Dataset,
    labels: &'a Labels,
    dp: Option<&'a DpConfig>,
    cipher: &'a LabelCipher,
    cfg: &'a SessionConfig,
    start: Instant,
}

/// Forward state of one batch kept until its boundary gradient arrives.
enum Pending {
    Batch { tape: Tape, enc: Bound, meta: Bound, out: Var },
    PerSample(Vec<(Tape, Bound, Bound, Var)>),
}

impl Producer<'_> {
    fn micros(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn run(&mut self, out: &mut ProducerOutcome) -> Result<Stop> {
        let sid = self.cfg.session_id;
        let hello = self.t.recv()?;
        let (dtype, input_shape) = match (hello.msg_type, parse_json::<Hello>(&hello)) {
            (MsgType::Hello, Ok(Hello::Consumer { task_id, dtype, input_shape })) => {
                if task_id != self.cfg.task_id {
                    return Err(Error::Protocol(format!(
                        "consumer asked for task `{task_id}`, this session serves `{}`",
                        self.cfg.task_id
                    )));
                }
                (negotiate(dtype, self.cfg.dtype), input_shape)
            }
            (MsgType::Control, _) => return Ok(Stop::Aborted(abort_reason(&hello))),
            _ => return Err(Error::Protocol(format!("expected consumer HELLO, got {:?}", hello.msg_type))),
        };
        let feature_shape = self.encoder.output_shape();
        if input_shape != feature_shape {
            return Err(Error::Protocol(format!(
                "consumer head expects features {input_shape:?}, producer emits {feature_shape:?}"
            )));
        }
        let batches_per_epoch = self.data.len().div_ceil(self.cfg.batch_size);
        self.t.send(&json_message(
            MsgType::Hello,
            sid,
            0,
            &Hello::Producer {
                task_id: self.cfg.task_id.clone(),
                dtype,
                feature_shape,
                epochs: self.cfg.epochs,
                batches_per_epoch,
                key_check: hex::encode(self.cipher.key_check(sid)),
            },
        ))?;
        let ready = self.t.recv()?;
        match (ready.msg_type, Control::from_message(&ready)) {
            (MsgType::Control, Ok(Control::Ready)) => {}
            (MsgType::Control, _) => return Ok(Stop::Aborted(abort_reason(&ready))),
            (other, _) => return Err(Error::Protocol(format!("expected CONTROL ready, got {other:?}"))),
        }

        let mut opt_enc = AdamW::new(self.cfg.optimizer, &self.encoder.params);
        let mut opt_meta = AdamW::new(self.cfg.optimizer, &self.metamorph.params);
        let mut order = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut noise = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(1));
        let mut stop = Stop::Done;
        'epochs: for epoch in 0..self.cfg.epochs {
            let batches = self.data.epoch_batches(self.cfg.batch_size, &mut order);
            let epoch_labels: Vec<Labels> = batches.iter().map(|b| self.labels.select(b)).collect();
            let epoch_tag = u32::try_from(epoch).map_err(|_| Error::Config("too many epochs".into()))?;
            let sealed = self.cipher.seal(sid, epoch_tag, &encode_labels(&epoch_labels)?);
            self.t.send(&SplitMessage::new(
                MsgType::LabelsEnc,
                sid,
                epoch as u64,
                vec![FeatureTensor::from_bytes(sealed)],
            ))?;
            for indices in &batches {
                if self.cfg.max_batches.is_some_and(|m| out.batches >= m) {
                    break 'epochs;
                }
                if let Some(ledger) = out.ledger.as_mut() {
                    if !ledger.can_step() {
                        let eps = ledger.projected_epsilon(1);
                        warn!("producer: stopping at batch {}; the next step would reach ε = {eps:.4}", out.batches);
                        stop = Stop::Budget(eps);
                        break 'epochs;
                    }
                }
                let images = self.data.batch(indices).images;
                let (pending, features) = self.forward(&images);
                let b = out.batches;
                let frame = SplitMessage::new(
                    MsgType::ForwardFeatures,
                    sid,
                    b,
                    vec![FeatureTensor::from_tensor(&features, dtype)],
                );
                let payload_bytes = frame.payload_bytes();
                let send_timestamp = self.micros();
                let sent = Instant::now();
                self.t.send(&frame)?;
                let reply = self.t.recv()?;
                let rtt_ms = sent.elapsed().as_secs_f64() * 1e3;
                let ack_timestamp = self.micros();
                let grad = match reply.msg_type {
                    MsgType::BackwardGrads if reply.batch_index == b => reply
                        .tensors
                        .first()
                        .ok_or_else(|| Error::Protocol("BACKWARD_GRADS without a tensor".into()))?
                        .to_tensor()?,
                    MsgType::BackwardGrads => {
                        return Err(Error::Protocol(format!(
                            "batch clock mismatch: sent {b}, gradient for {}",
                            reply.batch_index
                        )))
                    }
                    MsgType::Control => return Ok(Stop::Aborted(abort_reason(&reply))),
                    other => return Err(Error::Protocol(format!("expected BACKWARD_GRADS, got {other:?}"))),
                };
                if grad.shape() != features.shape() {
                    return Err(Error::Protocol(format!(
                        "gradient shape {:?} does not match features {:?}",
                        grad.shape(),
                        features.shape()
                    )));
                }
                out.rtt.push(RttRecord {
                    batch_index: b,
                    payload_bytes,
                    send_timestamp,
                    ack_timestamp,
                    rtt_ms,
                });
                self.update(pending, &grad, &mut opt_enc, &mut opt_meta, &mut noise)?;
                if let Some(ledger) = out.ledger.as_mut() {
                    ledger.record_step();
                }
                out.batches += 1;
            }
        }
        self.t.send(&SplitMessage::new(MsgType::Bye, sid, out.batches, vec![]))?;
        match self.t.recv() {
            Ok(m) if m.msg_type == MsgType::Metrics => {
                let metrics: Metrics = parse_json(&m)?;
                out.consumer_losses = metrics.losses;
            }
            Ok(m) => warn!("expected METRICS after BYE, got {:?}", m.msg_type),
            Err(e) => warn!("no METRICS after BYE: {e}"),
        }
        Ok(stop)
    }

    fn forward(&self, images: &Tensor) -> (Pending, Tensor) {
        let one = |images: Tensor| {
            let mut tape = Tape::new();
            let enc = self.encoder.params.bind(&mut tape, true);
            let meta = self.metamorph.params.bind(&mut tape, true);
            let x = tape.constant(images);
            let z = self.encoder.forward(&mut tape, &enc, x);
            let out = self.metamorph.forward(&mut tape, &meta, z);
            (tape, enc, meta, out)
        };
        if self.dp.is_some() {
            let n = images.shape()[0];
            let parts: Vec<_> = (0..n).map(|i| one(images.sample(i))).collect();
            let features = Tensor::cat_batch(&parts.iter().map(|(t, _, _, v)| t.value(*v).clone()).collect::<Vec<_>>());
            (Pending::PerSample(parts), features)
        } else {
            let (tape, enc, meta, out) = one(images.clone());
            let features = tape.value(out).clone();
            (Pending::Batch { tape, enc, meta, out }, features)
        }
    }

    fn update(
        &mut self,
        pending: Pending,
        grad: &Tensor,
        opt_enc: &mut AdamW,
        opt_meta: &mut AdamW,
        noise: &mut ChaCha8Rng,
    ) -> Result<()> {
        if !grad.is_finite() {
            return Err(Error::Numeric("consumer returned a non-finite gradient".into()));
        }
        match pending {
            Pending::Batch { tape, enc, meta, out } => {
                let grads = tape.backward_with(out, grad.clone());
                let g_enc = self.encoder.params.grads(&enc, &grads);
                let g_meta = self.metamorph.params.grads(&meta, &grads);
                opt_enc.step(&mut self.encoder.params, &g_enc);
                opt_meta.step(&mut self.metamorph.params, &g_meta);
            }
            Pending::PerSample(parts) => {
                let dp = self.dp.expect("per-sample state only under DP");
                let n = parts.len();
                // The consumer's gradient is of the batch-mean loss; n·g_i is sample i's own.
                let per_sample = parts
                    .into_iter()
                    .enumerate()
                    .map(|(i, (tape, enc, meta, out))| {
                        let seed = grad.sample(i).map(|v| v * n as f32);
                        let grads = tape.backward_with(out, seed);
                        let mut flat = flatten(&self.encoder.params.grads(&enc, &grads));
                        flat.extend(flatten(&self.metamorph.params.grads(&meta, &grads)));
                        clip_in_place(&mut flat, dp.clip_threshold)?;
                        Ok(flat)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let noisy = noisy_aggregate(&per_sample, dp.noise_multiplier, dp.clip_threshold, noise)?;
                let split = self.encoder.params.num_scalars();
                let g_enc = self.encoder.params.unflatten(&noisy[..split]);
                let g_meta = self.metamorph.params.unflatten(&noisy[split..]);
                opt_enc.step(&mut self.encoder.params, &g_enc);
                opt_meta.step(&mut self.metamorph.params, &g_meta);
            }
        }
        Ok(())
    }
}

fn abort_reason(m: &SplitMessage) -> String {
    match Control::from_message(m) {
        Ok(Control::Abort(r)) => format!("peer aborted: {r}"),
        Ok(c) => format!("unexpected control record {c:?}"),
        Err(e) => e.to_string(),
    }
}

/// One consumer step: head forward, task loss, backward to the feature
/// boundary. Returns the loss, the boundary gradient and the head gradients.
pub fn consumer_step(head: &Head, spec: &TaskSpec, features: Tensor, labels: &Labels) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = head.params.bind(&mut tape, true);
    let f = tape.param(features);
    let out = head.forward(&mut tape, &p, f);
    match task_loss(&mut tape, spec, out, labels)? {
        Some(loss) => {
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                return Err(Error::Numeric(format!("task `{}`: loss became {value}", spec.task_id)));
            }
            let mut grads = tape.backward(loss);
            let g_head = head.params.grads(&p, &grads);
            let g_f = grads
                .take(f)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(f).to_vec()));
            Ok((value, g_f, g_head))
        }
        None => Ok((0.0, Tensor::zeros(tape.shape(f).to_vec()), head.params.zero_grads())),
    }
}

/// Consumer side: owns the head of `spec`'s task.
pub fn run_consumer(
    transport: &mut Transport,
    head: &mut Head,
    spec: &TaskSpec,
    cipher: &LabelCipher,
    cfg: &SessionConfig,
) -> Result<ConsumerOutcome> {
    let mut out = ConsumerOutcome {
        status: SessionStatus::Completed,
        batches: 0,
        losses: Vec::new(),
    };
    let result = consume(transport, head, spec, cipher, cfg, &mut out);
    match &result {
        Ok(Stop::Aborted(reason)) if !reason.starts_with("peer aborted") => {
            let _ = transport.send(&Control::Abort(reason.clone()).to_message(cfg.session_id, out.batches));
        }
        Err(e) if !matches!(e, Error::Session(_)) => {
            let _ = transport.send(&Control::Abort(e.to_string()).to_message(cfg.session_id, out.batches));
        }
        _ => {}
    }
    out.status = fold(result)?;
    info!("consumer session {}: {:?} after {} batches", cfg.session_id, out.status, out.batches);
    Ok(out)
}

fn consume(
    t: &mut Transport,
    head: &mut Head,
    spec: &TaskSpec,
    cipher: &LabelCipher,
    cfg: &SessionConfig,
    out: &mut ConsumerOutcome,
) -> Result<Stop> {
    let sid = cfg.session_id;
    t.send(&json_message(
        MsgType::Hello,
        sid,
        0,
        &Hello::Consumer {
            task_id: spec.task_id.clone(),
            dtype: cfg.dtype,
            input_shape: head.input_shape(),
        },
    ))?;
    let hello = t.recv()?;
    let dtype = match (hello.msg_type, parse_json::<Hello>(&hello)) {
        (MsgType::Hello, Ok(Hello::Producer { dtype, key_check, .. })) => {
            let token = hex::decode(&key_check).unwrap_or_default();
            if hello.session_id != sid || !cipher.verify_key_check(sid, &token) {
                return Ok(Stop::Aborted("label key mismatch".into()));
            }
            t.send(&Control::Ready.to_message(sid, 0))?;
            dtype
        }
        (MsgType::Control, _) => return Ok(Stop::Aborted(abort_reason(&hello))),
        _ => return Err(Error::Protocol(format!("expected producer HELLO, got {:?}", hello.msg_type))),
    };

    let mut opt = AdamW::new(cfg.optimizer, &head.params);
    let mut epoch_labels: Vec<Labels> = Vec::new();
    let mut epoch_start = 0u64;
    loop {
        let m = t.recv()?;
        match m.msg_type {
            MsgType::LabelsEnc => {
                let epoch = u32::try_from(m.batch_index).map_err(|_| Error::Protocol("epoch out of range".into()))?;
                let ct = m
                    .tensors
                    .first()
                    .ok_or_else(|| Error::Protocol("LABELS_ENC without ciphertext".into()))?;
                let plain = match cipher.open(sid, epoch, ct.bytes()) {
                    Ok(p) => p,
                    Err(e) => return Ok(Stop::Aborted(e.to_string())),
                };
                epoch_labels = decode_labels(&plain)?;
                epoch_start = out.batches;
            }
            MsgType::ForwardFeatures => {
                if m.batch_index != out.batches {
                    return Err(Error::Protocol(format!(
                        "batch clock mismatch: expected {}, received {}",
                        out.batches, m.batch_index
                    )));
                }
                let labels = epoch_labels
                    .get((m.batch_index - epoch_start) as usize)
                    .ok_or_else(|| Error::Protocol(format!("no labels for batch {}", m.batch_index)))?;
                let features = m
                    .tensors
                    .first()
                    .ok_or_else(|| Error::Protocol("FORWARD_FEATURES without a tensor".into()))?
                    .to_tensor()?;
                let s = features.shape();
                if s.len() != 4 || s[1..] != head.input_shape() || s[0] != labels.len() {
                    return Err(Error::Protocol(format!(
                        "features {s:?} do not fit head input {:?} with {} labels",
                        head.input_shape(),
                        labels.len()
                    )));
                }
                let (loss, g_f, g_head) = consumer_step(head, spec, features, labels)?;
                t.send(&SplitMessage::new(
                    MsgType::BackwardGrads,
                    sid,
                    m.batch_index,
                    vec![FeatureTensor::from_tensor(&g_f, dtype)],
                ))?;
                opt.step(&mut head.params, &g_head);
                out.losses.push(loss);
                out.batches += 1;
            }
            MsgType::Bye => {
                let metrics = Metrics {
                    batches: out.batches,
                    losses: out.losses.clone(),
                };
                t.send(&json_message(MsgType::Metrics, sid, out.batches, &metrics))?;
                return Ok(Stop::Done);
            }
            MsgType::Control => return Ok(Stop::Aborted(abort_reason(&m))),
            other => return Err(Error::Protocol(format!("unexpected {other:?} from the producer"))),
        }
    }
}
