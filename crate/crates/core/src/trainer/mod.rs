//! Training regimes: DP input obfuscation, task privacy, and their two-phase
//! combination, plus incremental task addition.

mod checkpoint;
mod eval;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use eval::{evaluate_task, TaskMetric};
pub use model::{task_loss, LossKind, MultiTaskModel, TaskModule, TaskSpec};
pub(crate) use model::Trainable;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Labels};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig};
use crate::nn::{flatten, ParamStore};
use crate::objectives::{similarity, LossWeights, SimilarityMeasure};
use crate::privacy::{calibrate_sigma, clip_in_place, noisy_aggregate, DpConfig, PrivacyLedger};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegimeKind {
    InputObfuscationOnly,
    TaskPrivacyOnly,
    TwoPhase,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRegime {
    pub kind: RegimeKind,
    #[serde(default)]
    pub phase1_epochs: usize,
    #[serde(default)]
    pub phase2_epochs: usize,
    #[serde(default = "default_true")]
    pub freeze_encoder_phase2: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl TrainingRegime {
    pub fn new(kind: RegimeKind, phase1_epochs: usize, phase2_epochs: usize, seed: u64) -> Self {
        Self {
            kind,
            phase1_epochs,
            phase2_epochs,
            freeze_encoder_phase2: true,
            seed,
        }
    }

    /// Checks the private-task declaration against the regime.
    pub fn validate(&self, specs: &[TaskSpec]) -> Result<()> {
        let private = specs.iter().filter(|s| s.is_private).count();
        match self.kind {
            RegimeKind::TwoPhase if private != 1 => Err(Error::Config(format!(
                "regime TWO_PHASE needs exactly one task with is_private = true, found {private}"
            ))),
            RegimeKind::InputObfuscationOnly | RegimeKind::TaskPrivacyOnly if private != 0 => Err(Error::Config(
                format!("is_private is only meaningful for regime TWO_PHASE, found {private} private task(s)"),
            )),
            _ => Ok(()),
        }
    }
}

/// Multiplies the learning rate by `factor` once, at the start of epoch `at_epoch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub at_epoch: usize,
    pub factor: f64,
}

/// Differential-privacy settings before the sampling rate is known.
/// Without a noise multiplier, σ is calibrated to the target ε.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSettings {
    pub clip_threshold: f64,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    pub target_epsilon: f64,
    pub target_delta: f64,
}

impl DpSettings {
    /// Fixes q = batch_size / dataset_size and σ for a run of `epochs` epochs.
    pub fn resolve(&self, dataset_len: usize, batch_size: usize, epochs: usize) -> Result<DpConfig> {
        if dataset_len == 0 {
            return Err(Error::Data("DP training needs a non-empty dataset".into()));
        }
        let q = (batch_size as f64 / dataset_len as f64).min(1.0);
        let mut cfg = DpConfig {
            clip_threshold: self.clip_threshold,
            noise_multiplier: self.noise_multiplier.unwrap_or(0.0),
            sample_rate: q,
            target_epsilon: self.target_epsilon,
            target_delta: self.target_delta,
        };
        if self.noise_multiplier.is_none() {
            let steps = (epochs * dataset_len.div_ceil(batch_size.max(1))) as u64;
            cfg.noise_multiplier = if steps == 0 { 1.0 } else { calibrate_sigma(&cfg, steps)? };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimization settings shared by every regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: TrainingRegime,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    #[serde(default = "SimilarityMeasure::ssim")]
    pub similarity: SimilarityMeasure,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    #[serde(default)]
    pub augment_hflip: bool,
    /// Keep the parameters of the epoch with the smallest mean training loss
    /// (phases without DP only).
    #[serde(default = "default_true")]
    pub select_best: bool,
}

impl TrainConfig {
    pub fn new(regime: TrainingRegime, batch_size: usize, omega: f64) -> Self {
        Self {
            regime,
            batch_size,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::new(omega),
            similarity: SimilarityMeasure::ssim(),
            lr_decay: None,
            augment_hflip: false,
            select_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.learning_rate = {lr} must be finite and > 0")));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor.is_finite()) {
                return Err(Error::Config(format!("lr_decay.factor = {} must be finite and > 0", d.factor)));
            }
        }
        self.weights.validate()?;
        self.similarity.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TrainStatus {
    Completed,
    /// Stopped before the DP step that would have exceeded the target ε.
    BudgetExhausted { phase: String, epoch: usize, batch: usize, epsilon: f64 },
}

/// Mean training losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub task_losses: Vec<(String, f64)>,
    pub task_privacy: Option<f64>,
    pub total: f64,
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub status: TrainStatus,
    pub ledger: Option<PrivacyLedger>,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    fn new(ledger: Option<PrivacyLedger>) -> Self {
        Self {
            status: TrainStatus::Completed,
            ledger,
            history: Vec::new(),
        }
    }

    pub fn completed(&self) -> bool {
        self.status == TrainStatus::Completed
    }
}

/// What one phase trains and optimizes.
#[derive(Clone, Debug)]
struct PhasePlan {
    name: &'static str,
    /// Tasks whose supervised loss enters the objective.
    loss_tasks: Vec<usize>,
    /// Unordered task pairs of the task-privacy term, each counted twice.
    tp_pairs: Vec<(usize, usize)>,
    trainable: Trainable,
    dp: bool,
}

impl PhasePlan {
    fn module_tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.loss_tasks.clone();
        t.extend(self.tp_pairs.iter().flat_map(|&(i, j)| [i, j]));
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Per-sample clipped and noised updates for producer parameters (encoder and
/// metamorph modules); plain updates for the heads.
pub fn train_input_obfuscation(
    model: &mut MultiTaskModel,
    data: &Dataset,
    dp: &DpConfig,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dp.validate()?;
    let n = model.tasks.len();
    let plan = PhasePlan {
        name: "input-obfuscation",
        loss_tasks: (0..n).collect(),
        tp_pairs: Vec::new(),
        trainable: Trainable {
            encoder: true,
            metamorphs: vec![true; n],
            heads: vec![true; n],
        },
        dp: true,
    };
    let mut out = TrainOutcome::new(Some(PrivacyLedger::new(*dp)));
    let mut rngs = Rngs::new(cfg.regime.seed);
    run_phase(model, data, &plan, epochs, cfg, &mut rngs, Some(dp), &mut out)?;
    Ok(out)
}

/// Joint non-private training of the encoder, every metamorph module and every
/// head against Σ L_i + ω·Σ_{i≠j} similarity(g_i(z), g_j(z)).
pub fn train_task_privacy(
    model: &mut MultiTaskModel,
    data: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = model.tasks.len();
    if n < 2 && cfg.weights.omega > 0.0 {
        warn!("a single task has no task-privacy pairs; the ω term is 0");
    }
    let plan = PhasePlan {
        name: "task-privacy",
        loss_tasks: (0..n).collect(),
        tp_pairs: all_pairs(&(0..n).collect::<Vec<_>>()),
        trainable: Trainable {
            encoder: true,
            metamorphs: vec![true; n],
            heads: vec![true; n],
        },
        dp: false,
    };
    let mut out = TrainOutcome::new(None);
    let mut rngs = Rngs::new(cfg.regime.seed);
    run_phase(model, data, &plan, epochs, cfg, &mut rngs, None, &mut out)?;
    Ok(out)
}

/// Phase 1 trains the encoder with the private task under DP. Phase 2 trains
/// the public modules and heads with the task-privacy term against the frozen
/// private feature path.
pub fn train_two_phase(
    model: &mut MultiTaskModel,
    data: &Dataset,
    dp: &DpConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dp.validate()?;
    let specs: Vec<TaskSpec> = model.tasks.iter().map(|t| t.spec.clone()).collect();
    TrainingRegime {
        kind: RegimeKind::TwoPhase,
        ..cfg.regime
    }
    .validate(&specs)?;
    let p = model
        .private_task()
        .ok_or_else(|| Error::Config("regime TWO_PHASE needs a private task".into()))?;
    let n = model.tasks.len();
    let mut rngs = Rngs::new(cfg.regime.seed);
    let mut out = TrainOutcome::new(Some(PrivacyLedger::new(*dp)));

    let mut phase1 = Trainable::frozen(n);
    phase1.encoder = true;
    phase1.metamorphs[p] = true;
    phase1.heads[p] = true;
    let plan1 = PhasePlan {
        name: "phase-1",
        loss_tasks: vec![p],
        tp_pairs: Vec::new(),
        trainable: phase1,
        dp: true,
    };
    run_phase(model, data, &plan1, cfg.regime.phase1_epochs, cfg, &mut rngs, Some(dp), &mut out)?;
    if !out.completed() {
        return Ok(out);
    }

    let public: Vec<usize> = (0..n).filter(|&i| i != p).collect();
    let mut phase2 = Trainable::frozen(n);
    phase2.encoder = !cfg.regime.freeze_encoder_phase2;
    for &i in &public {
        phase2.metamorphs[i] = true;
        phase2.heads[i] = true;
    }
    let plan2 = PhasePlan {
        name: "phase-2",
        tp_pairs: all_pairs(&(0..n).collect::<Vec<_>>()),
        loss_tasks: public,
        trainable: phase2,
        dp: false,
    };
    run_phase(model, data, &plan2, cfg.regime.phase2_epochs, cfg, &mut rngs, None, &mut out)?;
    Ok(out)
}

/// Adds `spec` to a trained model and trains only its module and head, with
/// the task-privacy term against every existing (frozen) task.
pub fn add_task(
    model: &mut MultiTaskModel,
    spec: TaskSpec,
    data: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(cfg.regime.seed ^ 0x00ad_d7a5);
    let new = model.push_task(spec, &mut init)?;
    let plan = add_task_plan(new);
    let mut out = TrainOutcome::new(None);
    let mut rngs = Rngs::new(cfg.regime.seed);
    run_phase(model, data, &plan, epochs, cfg, &mut rngs, None, &mut out)?;
    Ok(out)
}

/// Plan for a new task at index `new` after `new` frozen tasks.
fn add_task_plan(new: usize) -> PhasePlan {
    let mut trainable = Trainable::frozen(new + 1);
    trainable.metamorphs[new] = true;
    trainable.heads[new] = true;
    PhasePlan {
        name: "add-task",
        loss_tasks: vec![new],
        tp_pairs: (0..new).map(|i| (i, new)).collect(),
        trainable,
        dp: false,
    }
}

/// Runs the configured regime. `dp` is required by the DP regimes.
pub fn train(model: &mut MultiTaskModel, data: &Dataset, dp: Option<&DpConfig>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let specs: Vec<TaskSpec> = model.tasks.iter().map(|t| t.spec.clone()).collect();
    cfg.regime.validate(&specs)?;
    let need_dp = || dp.ok_or_else(|| Error::Config(format!("regime {:?} needs a dp block", cfg.regime.kind)));
    match cfg.regime.kind {
        RegimeKind::InputObfuscationOnly => {
            train_input_obfuscation(model, data, need_dp()?, cfg.regime.phase1_epochs, cfg)
        }
        RegimeKind::TaskPrivacyOnly => train_task_privacy(model, data, cfg.regime.phase1_epochs, cfg),
        RegimeKind::TwoPhase => train_two_phase(model, data, need_dp()?, cfg),
    }
}

/// Number of optimizer steps in `epochs` epochs.
pub fn steps_per_run(dataset_len: usize, batch_size: usize, epochs: usize) -> u64 {
    (epochs * dataset_len.div_ceil(batch_size.max(1))) as u64
}

fn all_pairs(tasks: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (a, &i) in tasks.iter().enumerate() {
        for &j in &tasks[a + 1..] {
            out.push((i, j));
        }
    }
    out
}

struct Rngs {
    order: ChaCha8Rng,
    noise: ChaCha8Rng,
    augment: ChaCha8Rng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Self {
            order: ChaCha8Rng::seed_from_u64(seed),
            noise: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            augment: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
        }
    }
}

/// Dataset label index of every model task.
fn label_indices(model: &MultiTaskModel, data: &Dataset, tasks: &[usize]) -> Result<Vec<Option<usize>>> {
    let mut out = vec![None; model.tasks.len()];
    for &i in tasks {
        let spec = &model.tasks[i].spec;
        let idx = data.task_index(spec.label_set()).ok_or_else(|| {
            Error::Data(format!(
                "dataset has no label set `{}` for task `{}` (available: {:?})",
                spec.label_set(),
                spec.task_id,
                data.tasks.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
            ))
        })?;
        out[i] = Some(idx);
    }
    Ok(out)
}

struct StepLosses {
    total: Option<Var>,
    tasks: Vec<(usize, f64)>,
    tp: Option<f64>,
}

/// Forward pass of `plan` on one (micro)batch.
fn forward(
    model: &MultiTaskModel,
    tape: &mut Tape,
    plan: &PhasePlan,
    images: Tensor,
    labels: &[Labels],
    label_idx: &[Option<usize>],
    cfg: &TrainConfig,
) -> Result<(StepLosses, model::Bindings)> {
    let modules = plan.module_tasks();
    let b = model.bind(tape, &modules, &plan.loss_tasks, &plan.trainable);
    let x = tape.constant(images);
    let z = model.encoder.forward(tape, &b.encoder, x);
    let mut features: Vec<Option<Var>> = vec![None; model.tasks.len()];
    for &i in &modules {
        let p = b.metamorphs[i].as_ref().expect("bound module");
        features[i] = Some(model.tasks[i].metamorph.forward(tape, p, z));
    }
    let mut total: Option<Var> = None;
    let mut acc = |tape: &mut Tape, v: Var| {
        total = Some(match total {
            Some(t) => tape.add(t, v),
            None => v,
        });
    };
    let mut task_values = Vec::new();
    for &i in &plan.loss_tasks {
        let t = &model.tasks[i];
        let out = t.head.forward(tape, b.heads[i].as_ref().expect("bound head"), features[i].unwrap());
        let l = &labels[label_idx[i].expect("label index")];
        if let Some(loss) = task_loss(tape, &t.spec, out, l)? {
            task_values.push((i, f64::from(tape.value(loss).item())));
            let w = cfg.weights.task(i);
            let weighted = if w == 1.0 { loss } else { tape.scale(loss, w as f32) };
            acc(tape, weighted);
        }
    }
    let mut tp_value = None;
    if cfg.weights.omega != 0.0 && !plan.tp_pairs.is_empty() {
        let mut tp: Option<Var> = None;
        for &(i, j) in &plan.tp_pairs {
            let s = similarity(tape, features[i].unwrap(), features[j].unwrap(), &cfg.similarity)?;
            tp = Some(match tp {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
        let tp = tape.scale(tp.unwrap(), 2.0);
        tp_value = Some(f64::from(tape.value(tp).item()));
        let weighted = tape.scale(tp, cfg.weights.omega as f32);
        acc(tape, weighted);
    }
    Ok((
        StepLosses {
            total,
            tasks: task_values,
            tp: tp_value,
        },
        b,
    ))
}

/// Optimizers for the trainable stores of a plan, in `stores_of` order.
struct Optimizers(Vec<Option<AdamW>>);

/// Stores of a model in a fixed order: encoder, then (module, head) per task.
fn stores_of(model: &mut MultiTaskModel) -> Vec<&mut ParamStore> {
    let mut out = vec![&mut model.encoder.params];
    for t in &mut model.tasks {
        out.push(&mut t.metamorph.params);
        out.push(&mut t.head.params);
    }
    out
}

fn trainable_flags(t: &Trainable) -> Vec<bool> {
    let mut out = vec![t.encoder];
    for (m, h) in t.metamorphs.iter().zip(&t.heads) {
        out.push(*m);
        out.push(*h);
    }
    out
}

/// Producer stores (encoder and modules) are the ones that receive DP updates.
fn is_producer(slot: usize) -> bool {
    slot == 0 || slot % 2 == 1
}

#[derive(Default)]
struct EpochAcc {
    tasks: Vec<(usize, f64, usize)>,
    tp: (f64, usize),
}

impl EpochAcc {
    fn add(&mut self, l: &StepLosses, weight: usize) {
        for &(i, v) in &l.tasks {
            match self.tasks.iter_mut().find(|e| e.0 == i) {
                Some(e) => {
                    e.1 += v * weight as f64;
                    e.2 += weight;
                }
                None => self.tasks.push((i, v * weight as f64, weight)),
            }
        }
        if let Some(tp) = l.tp {
            self.tp.0 += tp * weight as f64;
            self.tp.1 += weight;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut MultiTaskModel,
    data: &Dataset,
    plan: &PhasePlan,
    epochs: usize,
    cfg: &TrainConfig,
    rngs: &mut Rngs,
    dp: Option<&DpConfig>,
    out: &mut TrainOutcome,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let label_idx = label_indices(model, data, &plan.loss_tasks)?;
    let flags = trainable_flags(&plan.trainable);
    let mut opts = Optimizers(
        stores_of(model)
            .into_iter()
            .zip(&flags)
            .map(|(s, &f)| f.then(|| AdamW::new(cfg.optimizer, s)))
            .collect(),
    );
    let keep_best = cfg.select_best && !plan.dp;
    let mut best: Option<(f64, Vec<ParamStore>)> = None;

    for epoch in 0..epochs {
        if let Some(d) = cfg.lr_decay {
            if epoch == d.at_epoch {
                let lr = cfg.optimizer.learning_rate * d.factor;
                opts.0.iter_mut().flatten().for_each(|o| o.set_learning_rate(lr));
            }
        }
        let mut acc = EpochAcc::default();
        for (bi, indices) in data.epoch_batches(cfg.batch_size, &mut rngs.order).into_iter().enumerate() {
            let mut batch = data.batch(&indices);
            if cfg.augment_hflip {
                batch = batch.random_hflip(&mut rngs.augment);
            }
            if plan.dp {
                let ledger = out.ledger.as_mut().expect("DP phase has a ledger");
                if !ledger.can_step() {
                    let epsilon = ledger.projected_epsilon(1);
                    warn!(
                        "{}: stopping at epoch {epoch} batch {bi}; the next step would reach ε = {epsilon:.4}",
                        plan.name
                    );
                    out.status = TrainStatus::BudgetExhausted {
                        phase: plan.name.into(),
                        epoch,
                        batch: bi,
                        epsilon,
                    };
                    return Ok(());
                }
                dp_step(model, plan, &batch, &label_idx, cfg, dp.expect("dp config"), &mut opts, &flags, rngs, &mut acc)?;
                ledger.record_step();
            } else {
                plain_step(model, plan, &batch, &label_idx, cfg, &mut opts, &flags, &mut acc)?;
            }
        }
        let record = epoch_record(model, plan, epoch, &acc, cfg, out.ledger.as_ref());
        info!(
            "{} epoch {epoch}: total {:.5}{}",
            plan.name,
            record.total,
            record.epsilon.map(|e| format!(", ε = {e:.4}")).unwrap_or_default()
        );
        if keep_best && best.as_ref().is_none_or(|(b, _)| record.total < *b) {
            best = Some((record.total, stores_of(model).into_iter().map(|s| s.clone()).collect()));
        }
        out.history.push(record);
    }
    if let Some((_, snapshot)) = best {
        for ((s, saved), &f) in stores_of(model).into_iter().zip(snapshot).zip(&flags) {
            if f {
                *s = saved;
            }
        }
    }
    Ok(())
}

fn epoch_record(
    model: &MultiTaskModel,
    plan: &PhasePlan,
    epoch: usize,
    acc: &EpochAcc,
    cfg: &TrainConfig,
    ledger: Option<&PrivacyLedger>,
) -> EpochRecord {
    let task_losses: Vec<(String, f64)> = acc
        .tasks
        .iter()
        .map(|&(i, s, n)| (model.tasks[i].spec.task_id.clone(), s / n.max(1) as f64))
        .collect();
    let tp = (acc.tp.1 > 0).then(|| acc.tp.0 / acc.tp.1 as f64);
    let mean_task = if task_losses.is_empty() {
        0.0
    } else {
        task_losses.iter().map(|(_, l)| l).sum::<f64>() / task_losses.len() as f64
    };
    EpochRecord {
        phase: plan.name.into(),
        epoch,
        task_losses,
        task_privacy: tp,
        total: mean_task + cfg.weights.omega * tp.unwrap_or(0.0),
        epsilon: plan.dp.then(|| ledger.map(PrivacyLedger::epsilon)).flatten(),
    }
}

#[allow(clippy::too_many_arguments)]
fn plain_step(
    model: &mut MultiTaskModel,
    plan: &PhasePlan,
    batch: &Batch,
    label_idx: &[Option<usize>],
    cfg: &TrainConfig,
    opts: &mut Optimizers,
    flags: &[bool],
    acc: &mut EpochAcc,
) -> Result<()> {
    let mut tape = Tape::new();
    let (losses, b) = forward(model, &mut tape, plan, batch.images.clone(), &batch.labels, label_idx, cfg)?;
    acc.add(&losses, batch.len());
    let Some(total) = losses.total else {
        return Ok(());
    };
    check_finite(&tape, total, plan)?;
    let grads = tape.backward(total);
    let bound = bound_slots(b);
    for (slot, store) in stores_of(model).into_iter().enumerate() {
        if !flags[slot] {
            continue;
        }
        let g = store.grads(bound[slot].as_ref().expect("trainable store is bound"), &grads);
        opts.0[slot].as_mut().expect("optimizer").step(store, &g);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dp_step(
    model: &mut MultiTaskModel,
    plan: &PhasePlan,
    batch: &Batch,
    label_idx: &[Option<usize>],
    cfg: &TrainConfig,
    dp: &DpConfig,
    opts: &mut Optimizers,
    flags: &[bool],
    rngs: &mut Rngs,
    acc: &mut EpochAcc,
) -> Result<()> {
    let n = batch.len();
    let slots: Vec<usize> = (0..flags.len()).filter(|&s| flags[s]).collect();
    let producer: Vec<usize> = slots.iter().copied().filter(|&s| is_producer(s)).collect();
    let consumer: Vec<usize> = slots.iter().copied().filter(|&s| !is_producer(s)).collect();
    let mut per_sample: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut head_sums: Vec<Option<Vec<Tensor>>> = vec![None; flags.len()];
    for i in 0..n {
        let one = [i];
        let images = batch.images.sample(i);
        let labels: Vec<Labels> = batch.labels.iter().map(|l| l.select(&one)).collect();
        let mut tape = Tape::new();
        let (losses, b) = forward(model, &mut tape, plan, images, &labels, label_idx, cfg)?;
        acc.add(&losses, 1);
        let bound = bound_slots(b);
        let stores = stores_of(model);
        let grads = match losses.total {
            Some(total) => {
                check_finite(&tape, total, plan)?;
                Some(tape.backward(total))
            }
            None => None,
        };
        let grads_of = |slot: usize| match &grads {
            Some(g) => stores[slot].grads(bound[slot].as_ref().expect("bound"), g),
            None => stores[slot].zero_grads(),
        };
        let mut flat = Vec::new();
        for &s in &producer {
            flat.extend(flatten(&grads_of(s)));
        }
        clip_in_place(&mut flat, dp.clip_threshold)
            .map_err(|e| Error::Numeric(format!("{}: sample {}: {e}", plan.name, batch.indices[i])))?;
        per_sample.push(flat);
        for &s in &consumer {
            let g = grads_of(s);
            match &mut head_sums[s] {
                Some(sum) => {
                    for (a, b) in sum.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }
    let noisy = if producer.is_empty() {
        Vec::new()
    } else {
        noisy_aggregate(&per_sample, dp.noise_multiplier, dp.clip_threshold, &mut rngs.noise)?
    };
    let mut offset = 0;
    for (s, store) in stores_of(model).into_iter().enumerate() {
        let g = if producer.contains(&s) {
            let len = store.num_scalars();
            offset += len;
            store.unflatten(&noisy[offset - len..offset])
        } else if consumer.contains(&s) {
            let mut g = head_sums[s].take().expect("head gradients");
            let inv = 1.0 / n as f32;
            g.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
            g
        } else {
            continue;
        };
        opts.0[s].as_mut().expect("optimizer").step(store, &g);
    }
    Ok(())
}

/// Bindings indexed like [`stores_of`].
fn bound_slots(b: model::Bindings) -> Vec<Option<crate::nn::Bound>> {
    let mut out = vec![Some(b.encoder)];
    for (m, h) in b.metamorphs.into_iter().zip(b.heads) {
        out.push(m);
        out.push(h);
    }
    out
}

fn check_finite(tape: &Tape, total: Var, plan: &PhasePlan) -> Result<()> {
    let v = tape.value(total).item();
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{}: training loss became {v}", plan.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_classification_pair, SyntheticSceneConfig};
    use crate::model::{BackboneSpec, MetamorphConfig, TaskKind};

    fn data(n: usize) -> Dataset {
        generate_classification_pair(&SyntheticSceneConfig {
            num_samples: n,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn model(specs: &[TaskSpec]) -> MultiTaskModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        MultiTaskModel::new(BackboneSpec::desk_default(), MetamorphConfig::default(), specs, &mut rng).unwrap()
    }

    fn shape_task() -> TaskSpec {
        TaskSpec::new("shape", TaskKind::Classification { classes: 2 })
    }

    fn color_task() -> TaskSpec {
        TaskSpec::new("color", TaskKind::Classification { classes: 2 })
    }

    fn config(kind: RegimeKind, p1: usize, p2: usize, omega: f64) -> TrainConfig {
        let mut c = TrainConfig::new(TrainingRegime::new(kind, p1, p2, 7), 8, omega);
        c.optimizer = AdamWConfig::with_lr(1e-3);
        c.select_best = false;
        c
    }

    fn fingerprints(m: &MultiTaskModel) -> Vec<(String, String)> {
        m.named_stores().into_iter().map(|(n, s)| (n, s.fingerprint())).collect()
    }

    fn max_param_diff(a: &MultiTaskModel, b: &MultiTaskModel) -> f32 {
        a.named_stores()
            .iter()
            .zip(b.named_stores())
            .flat_map(|((_, x), (_, y))| {
                x.iter().zip(y.iter()).map(|((_, p), (_, q))| p.max_abs_diff(q)).collect::<Vec<_>>()
            })
            .fold(0.0, f32::max)
    }

    #[test]
    fn degenerate_dp_matches_plain_training() {
        let d = data(32);
        let init = model(&[shape_task()]);
        let cfg = config(RegimeKind::TaskPrivacyOnly, 1, 0, 0.0);
        let mut plain = init.clone();
        train_task_privacy(&mut plain, &d, 2, &cfg).unwrap();
        let mut private = init.clone();
        let dp = DpConfig::disabled(8.0 / 32.0);
        let out = train_input_obfuscation(&mut private, &d, &dp, 2, &cfg).unwrap();
        assert!(out.completed());
        assert_eq!(out.ledger.unwrap().steps(), 8);
        let diff = max_param_diff(&plain, &private);
        assert!(diff < 1e-6, "max parameter difference {diff}");
        assert!(max_param_diff(&plain, &init) > 1e-4);
    }

    #[test]
    fn zero_epochs_leave_models_and_ledger_untouched() {
        let d = data(16);
        let mut m = model(&[shape_task()]);
        let before = fingerprints(&m);
        let dp = DpSettings {
            clip_threshold: 1.2,
            noise_multiplier: None,
            target_epsilon: 4.0,
            target_delta: 1e-5,
        }
        .resolve(d.len(), 8, 0)
        .unwrap();
        let cfg = config(RegimeKind::InputObfuscationOnly, 0, 0, 0.0);
        let out = train_input_obfuscation(&mut m, &d, &dp, 0, &cfg).unwrap();
        let ledger = out.ledger.unwrap();
        assert_eq!(ledger.steps(), 0);
        assert_eq!(ledger.epsilon(), 0.0);
        assert_eq!(before, fingerprints(&m));
    }

    #[test]
    fn calibrated_run_stays_within_target_epsilon() {
        let d = data(64);
        let settings = DpSettings {
            clip_threshold: 1.2,
            noise_multiplier: None,
            target_epsilon: 4.0,
            target_delta: 1e-5,
        };
        let dp = settings.resolve(d.len(), 16, 2).unwrap();
        let mut m = model(&[shape_task()]);
        let mut cfg = config(RegimeKind::InputObfuscationOnly, 2, 0, 0.0);
        cfg.batch_size = 16;
        let out = train_input_obfuscation(&mut m, &d, &dp, 2, &cfg).unwrap();
        assert!(out.completed());
        let ledger = out.ledger.unwrap();
        assert_eq!(ledger.steps(), 8);
        assert!(ledger.epsilon() <= 4.0, "ε = {}", ledger.epsilon());
    }

    #[test]
    fn budget_exhaustion_stops_before_overspending() {
        let d = data(32);
        let dp = DpConfig {
            clip_threshold: 1.0,
            noise_multiplier: 2.0,
            sample_rate: 0.25,
            target_epsilon: 3.0,
            target_delta: 1e-5,
        };
        let mut m = model(&[shape_task()]);
        let cfg = config(RegimeKind::InputObfuscationOnly, 20, 0, 0.0);
        let out = train_input_obfuscation(&mut m, &d, &dp, 20, &cfg).unwrap();
        let TrainStatus::BudgetExhausted { epsilon, .. } = out.status else {
            panic!("expected exhaustion, got {:?}", out.status);
        };
        let mut ledger = out.ledger.unwrap();
        assert!(epsilon > 3.0);
        assert!(ledger.epsilon() <= 3.0);
        assert!(ledger.steps() > 0);
        assert!(!ledger.can_step());
    }

    #[test]
    fn two_phase_requires_exactly_one_private_task() {
        let d = data(16);
        let mut m = model(&[shape_task(), color_task()]);
        let cfg = config(RegimeKind::TwoPhase, 1, 1, 0.001);
        let err = train_two_phase(&mut m, &d, &DpConfig::disabled(0.5), &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(train(&mut m, &d, None, &cfg).is_err());
    }

    #[test]
    fn phase_two_keeps_frozen_parameters_bit_identical() {
        let d = data(16);
        let mut m = model(&[shape_task().private(), color_task()]);
        let dp = DpConfig::disabled(0.5);
        let cfg = config(RegimeKind::TwoPhase, 1, 0, 0.001);
        train_two_phase(&mut m, &d, &dp, &cfg).unwrap();
        let after_phase1 = fingerprints(&m);
        let init = fingerprints(&model(&[shape_task().private(), color_task()]));
        // Public module and head untouched by phase 1 alone.
        assert_eq!(after_phase1[3..], init[3..]);
        assert_ne!(after_phase1[..3], init[..3]);

        let mut m2 = m.clone();
        let cfg = config(RegimeKind::TwoPhase, 0, 1, 0.001);
        train_two_phase(&mut m2, &d, &dp, &cfg).unwrap();
        let after_phase2 = fingerprints(&m2);
        assert_eq!(after_phase2[..3], after_phase1[..3]);
        assert_ne!(after_phase2[3..], after_phase1[3..]);
    }

    #[test]
    fn add_task_touches_only_the_new_task() {
        let d = data(16);
        let mut m = model(&[shape_task()]);
        let cfg = config(RegimeKind::TaskPrivacyOnly, 1, 0, 0.01);
        train_task_privacy(&mut m, &d, 1, &cfg).unwrap();
        let before = fingerprints(&m);
        let metric = evaluate_task(&m, 0, 0, &d, 8).unwrap();
        let out = add_task(&mut m, color_task(), &d, 1, &cfg).unwrap();
        assert!(out.history[0].task_privacy.is_some());
        assert_eq!(fingerprints(&m)[..3], before[..]);
        assert_eq!(evaluate_task(&m, 0, 0, &d, 8).unwrap(), metric);
        assert!(add_task(&mut m, color_task(), &d, 1, &cfg).is_err());
    }

    #[test]
    fn add_task_pairs_new_task_with_every_existing_one() {
        let plan = add_task_plan(1);
        assert_eq!(plan.tp_pairs, vec![(0, 1)]);
        let plan = add_task_plan(3);
        assert_eq!(plan.tp_pairs.len() * 2, 6);
        assert!(plan.tp_pairs.iter().all(|&(_, j)| j == 3));
    }

    #[test]
    fn same_seed_reproduces_losses_bit_for_bit() {
        let d = data(16);
        let cfg = config(RegimeKind::TaskPrivacyOnly, 1, 0, 0.01);
        let run = || {
            let mut m = model(&[shape_task(), color_task()]);
            train_task_privacy(&mut m, &d, 1, &cfg).unwrap().history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_label_set_is_reported() {
        let d = data(16);
        let mut m = model(&[TaskSpec::new("age", TaskKind::Classification { classes: 2 })]);
        let cfg = config(RegimeKind::TaskPrivacyOnly, 1, 0, 0.0);
        let err = train_task_privacy(&mut m, &d, 1, &cfg).unwrap_err();
        assert!(err.to_string().contains("age"), "{err}");
    }
}
