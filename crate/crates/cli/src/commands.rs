//! Subcommand implementations. Each writes a machine-readable record and a
//! human-readable rendering of its report under `output.dir`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use metamorph_core::attacks::{reconstruct_images, EncoderPrivacy};
use metamorph_core::data::{generate_classification_pair, generate_dense_pair};
use metamorph_core::privacy::calibrate_sigma;
use metamorph_core::runtime::{
    loopback_rtt, measure_rtt, rtt_table, run_consumer, run_producer, write_capture, LabelCipher, RttSummary,
    SessionStatus, Transport,
};
use metamorph_core::trainer::{evaluate_task, load_checkpoint, save_checkpoint, EpochRecord, TaskMetric};
use metamorph_core::{
    compute_epsilon, evaluate_interchange, train as run_training, AttackConfig, Checkpoint, Dataset, DpConfig, Error,
    Labels, MultiTaskModel, ReconstructionReport, RttRecord, SyntheticSceneConfig, TrainStatus,
};

use crate::config::ExperimentConfig;
use crate::{images, CliError};

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(path, s)
}

/// Writes `<stem>.json` and `<stem>.txt` and echoes the text to stdout.
fn emit<T: Serialize>(dir: &Path, stem: &str, value: &T, text: &str) -> Result<(), CliError> {
    write_json(&dir.join(format!("{stem}.json")), value)?;
    write_file(&dir.join(format!("{stem}.txt")), text)?;
    print!("{text}");
    Ok(())
}

fn fresh_model(cfg: &ExperimentConfig) -> Result<MultiTaskModel, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(MultiTaskModel::new(cfg.backbone.clone(), cfg.metamorph, &cfg.tasks, &mut rng)?)
}

fn check_input_shape(model: &MultiTaskModel, data: &Dataset) -> Result<(), CliError> {
    let expected = model.backbone.input_shape;
    if data.image_shape() != expected {
        return Err(CliError::Config(format!(
            "field `backbone.input_shape`: {expected:?} does not match dataset images {:?}",
            data.image_shape()
        )));
    }
    Ok(())
}

fn task_position(model: &MultiTaskModel, id: &str) -> Result<usize, CliError> {
    model
        .task_index(id)
        .ok_or_else(|| CliError::Config(format!("task `{id}` is not one of {:?}", model.task_ids())))
}

#[derive(Debug, Serialize)]
struct TaskResult {
    task_id: String,
    #[serde(flatten)]
    metric: TaskMetric,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    seed: u64,
    regime: String,
    status: TrainStatus,
    tasks: Vec<TaskResult>,
    final_task_privacy: Option<f64>,
    epsilon: Option<f64>,
    delta: Option<f64>,
    noise_multiplier: Option<f64>,
    dp_steps: Option<u64>,
    epochs_run: usize,
}

impl TrainReport {
    fn to_text(&self) -> String {
        let mut s = format!("regime={} seed={} status={:?}\n", self.regime, self.seed, self.status);
        for t in &self.tasks {
            let _ = writeln!(s, "task={} {}={:.6}", t.task_id, t.metric.name(), t.metric.value());
        }
        if let Some(tp) = self.final_task_privacy {
            let _ = writeln!(s, "final_task_privacy_loss={tp:.6}");
        }
        match (self.epsilon, self.delta, self.noise_multiplier, self.dp_steps) {
            (Some(e), Some(d), Some(sigma), Some(steps)) => {
                let _ = writeln!(s, "epsilon={e:.6} delta={d:e} noise_multiplier={sigma:.4} dp_steps={steps}");
            }
            _ => s.push_str("epsilon=none (no differentially private phase)\n"),
        }
        s
    }
}

fn history_text(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in history {
        let _ = write!(s, "phase={} epoch={} total={:.6}", r.phase, r.epoch, r.total);
        for (t, l) in &r.task_losses {
            let _ = write!(s, " loss[{t}]={l:.6}");
        }
        if let Some(tp) = r.task_privacy {
            let _ = write!(s, " task_privacy={tp:.6}");
        }
        if let Some(e) = r.epsilon {
            let _ = write!(s, " epsilon={e:.6}");
        }
        s.push('\n');
    }
    s
}

pub fn train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cfg.output.dir;
    prepare_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let (train_set, test_set) = cfg.load_data()?;
    let mut model = fresh_model(cfg)?;
    check_input_shape(&model, &train_set)?;
    let tcfg = cfg.training();
    tcfg.validate()?;
    let dp = match (cfg.dp, cfg.dp_epochs()) {
        (Some(d), epochs) if epochs > 0 => Some(d.resolve(train_set.len(), tcfg.batch_size, epochs)?),
        _ => None,
    };
    info!(
        "training {:?} on {} samples ({} held out)",
        cfg.regime.kind,
        train_set.len(),
        test_set.len()
    );
    let outcome = run_training(&mut model, &train_set, dp.as_ref(), &tcfg)?;

    let mut jsonl = String::new();
    for r in &outcome.history {
        jsonl.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
        jsonl.push('\n');
    }
    write_file(&out.join("metrics.jsonl"), jsonl)?;
    write_file(&out.join("metrics.txt"), history_text(&outcome.history))?;

    let tasks = (0..model.tasks.len())
        .map(|i| {
            Ok(TaskResult {
                task_id: model.tasks[i].spec.task_id.clone(),
                metric: evaluate_task(&model, i, i, &test_set, tcfg.batch_size)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let ledger = outcome.ledger.clone();
    let report = TrainReport {
        seed: cfg.seed,
        regime: format!("{:?}", cfg.regime.kind),
        status: outcome.status.clone(),
        tasks,
        final_task_privacy: outcome.history.iter().rev().find_map(|r| r.task_privacy),
        epsilon: ledger.as_ref().map(|l| l.epsilon()),
        delta: ledger.as_ref().map(|l| l.config.target_delta),
        noise_multiplier: ledger.as_ref().map(|l| l.config.noise_multiplier),
        dp_steps: ledger.as_ref().map(|l| l.steps()),
        epochs_run: outcome.history.len(),
    };

    let mut checkpoint = Checkpoint::new(model, outcome.status.clone(), outcome.ledger);
    checkpoint.meta.history = outcome.history;
    checkpoint.meta.config = serde_json::to_value(cfg).expect("configuration serializes");
    save_checkpoint(&out.join("model.mmck"), &checkpoint)?;
    emit(out, "report", &report, &report.to_text())?;
    match outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::BudgetExhausted { epsilon, .. } => Err(CliError::BudgetExhausted(epsilon)),
    }
}

pub fn eval_interchange(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let (_, test_set) = cfg.load_data()?;
    check_input_shape(&ck.model, &test_set)?;
    let report = evaluate_interchange(&ck.model, &test_set, cfg.train.batch_size)?;
    prepare_dir(&cfg.output.dir)?;
    emit(&cfg.output.dir, "interchange", &report, &report.to_text())
}

#[derive(Debug, Serialize)]
struct AttackSummary {
    task: String,
    private: ReconstructionReport,
    non_private: ReconstructionReport,
    private_untrained: ReconstructionReport,
}

pub fn attack_reconstruct(
    cfg: &ExperimentConfig,
    private: &Path,
    non_private: &Path,
    task: Option<&str>,
) -> Result<(), CliError> {
    let p = load_checkpoint(private)?;
    let np = load_checkpoint(non_private)?;
    let (train_set, test_set) = cfg.load_data()?;
    check_input_shape(&p.model, &train_set)?;
    check_input_shape(&np.model, &train_set)?;
    let task = task.map(str::to_string).unwrap_or_else(|| p.model.tasks[0].spec.task_id.clone());
    let (pi, npi) = (task_position(&p.model, &task)?, task_position(&np.model, &task)?);
    let attack = &cfg.attack;
    let untrained_cfg = AttackConfig {
        epochs: 0,
        ..attack.clone()
    };
    let run = |ck: &Checkpoint, module: usize, privacy, a: &AttackConfig| {
        info!("attacking {privacy:?} features of `{task}` for {} epochs", a.epochs);
        reconstruct_images(|x| ck.model.features(module, x), &train_set.images, &test_set.images, privacy, a)
    };
    let (untrained, untrained_img) = run(&p, pi, EncoderPrivacy::Private, &untrained_cfg)?;
    let (priv_report, priv_img) = run(&p, pi, EncoderPrivacy::Private, attack)?;
    let (np_report, np_img) = run(&np, npi, EncoderPrivacy::NonPrivate, attack)?;

    let out = &cfg.output.dir;
    prepare_dir(out)?;
    let grid = images::panel_grid([&test_set.images, &np_img, &untrained_img, &priv_img], 4);
    images::save(&grid, &out.join("attack_grid.png"))?;
    let text = format!(
        "task={task}\nnon_private mean_ssim={:.6}\nprivate_untrained mean_ssim={:.6}\nprivate mean_ssim={:.6}\n\n{}{}",
        np_report.mean,
        untrained.mean,
        priv_report.mean,
        np_report.to_text(),
        priv_report.to_text()
    );
    let summary = AttackSummary {
        task,
        private: priv_report,
        non_private: np_report,
        private_untrained: untrained,
    };
    emit(out, "attack", &summary, &text)
}

fn write_rtt(dir: &Path, records: &[RttRecord]) -> Result<Vec<RttSummary>, CliError> {
    let path = dir.join("rtt.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e.into()))?;
    for r in records {
        w.serialize(r).map_err(|e| CliError::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let summary = measure_rtt(records);
    emit(dir, "rtt_summary", &summary, &rtt_table(&summary))?;
    Ok(summary)
}

fn session_result(status: &SessionStatus) -> Result<(), CliError> {
    match status {
        SessionStatus::Completed => Ok(()),
        SessionStatus::BudgetExhausted { epsilon } => Err(CliError::BudgetExhausted(*epsilon)),
        SessionStatus::Aborted { reason } => Err(CliError::Aborted(reason.clone())),
    }
}

fn starting_model(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<MultiTaskModel, CliError> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint(p)?.model),
        None => fresh_model(cfg),
    }
}

pub fn serve(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let rt = cfg.runtime()?;
    let addr = rt
        .listen
        .as_deref()
        .ok_or_else(|| CliError::Config("field `runtime.listen`: required by serve".into()))?;
    let cipher = LabelCipher::from_hex(&rt.key)?;
    let session = &rt.session;
    let mut model = starting_model(cfg, checkpoint)?;
    let ti = task_position(&model, &session.task_id)?;
    let (train_set, _) = cfg.load_data()?;
    check_input_shape(&model, &train_set)?;
    let dp: Option<DpConfig> = cfg
        .dp
        .map(|d| d.resolve(train_set.len(), session.batch_size, session.epochs))
        .transpose()?;
    let out = &cfg.output.dir;
    prepare_dir(out)?;

    let listener = TcpListener::bind(addr).map_err(|e| Error::Session(format!("bind {addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| Error::Session(e.to_string()))?;
    println!("listening on {local}");
    std::io::stdout().flush().ok();
    let (stream, peer) = listener.accept().map_err(|e| Error::Session(format!("accept: {e}")))?;
    info!("consumer connected from {peer}");
    let mut transport = Transport::new(stream, session.timeout())?;
    if rt.capture {
        transport.enable_capture();
    }
    let label_set = model.tasks[ti].spec.label_set().to_string();
    let model_ref = &mut model;
    let outcome = {
        let (encoder, tasks) = (&mut model_ref.encoder, &mut model_ref.tasks);
        run_producer(
            &mut transport,
            encoder,
            &mut tasks[ti].metamorph,
            &train_set,
            &label_set,
            dp.as_ref(),
            &cipher,
            session,
        )?
    };
    if rt.capture {
        write_capture(&out.join("capture.bin"), &transport.take_capture())?;
    }
    write_rtt(out, &outcome.rtt)?;
    let text = format!(
        "role=producer status={:?} batches={} bytes_sent={} epsilon={}\n",
        outcome.status,
        outcome.batches,
        transport.bytes_sent(),
        outcome
            .ledger
            .as_ref()
            .map_or_else(|| "none".to_string(), |l| format!("{:.6}", l.epsilon()))
    );
    emit(out, "producer", &outcome, &text)?;
    let status = outcome.status.clone();
    save_checkpoint(
        &out.join("producer.mmck"),
        &Checkpoint::new(model, TrainStatus::Completed, outcome.ledger),
    )?;
    session_result(&status)
}

fn connect(addr: &str, retry: Duration) -> Result<TcpStream, CliError> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if start.elapsed() >= retry => {
                return Err(Error::Session(format!("connect {addr}: {e}")).into());
            }
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

pub fn consume(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let rt = cfg.runtime()?;
    let addr = rt
        .connect
        .as_deref()
        .ok_or_else(|| CliError::Config("field `runtime.connect`: required by consume".into()))?;
    let cipher = LabelCipher::from_hex(&rt.key)?;
    let session = &rt.session;
    let mut model = starting_model(cfg, checkpoint)?;
    let ti = task_position(&model, &session.task_id)?;
    let out = &cfg.output.dir;
    prepare_dir(out)?;
    let stream = connect(addr, Duration::from_millis(rt.connect_retry_ms))?;
    let mut transport = Transport::new(stream, session.timeout())?;
    if rt.capture {
        transport.enable_capture();
    }
    let spec = model.tasks[ti].spec.clone();
    let outcome = run_consumer(&mut transport, &mut model.tasks[ti].head, &spec, &cipher, session)?;
    if rt.capture {
        write_capture(&out.join("consumer_capture.bin"), &transport.take_capture())?;
    }
    let mean = if outcome.losses.is_empty() {
        f64::NAN
    } else {
        outcome.losses.iter().sum::<f64>() / outcome.losses.len() as f64
    };
    let text = format!(
        "role=consumer status={:?} batches={} mean_loss={mean:.6}\n",
        outcome.status, outcome.batches
    );
    emit(out, "consumer", &outcome, &text)?;
    save_checkpoint(&out.join("consumer.mmck"), &Checkpoint::new(model, TrainStatus::Completed, None))?;
    session_result(&outcome.status)
}

pub fn loopback_bench(cfg: &ExperimentConfig, sizes: &[usize], rounds: usize) -> Result<(), CliError> {
    if rounds == 0 || sizes.contains(&0) {
        return Err(CliError::Config("loopback benchmark needs rounds ≥ 1 and positive payload sizes".into()));
    }
    let out = &cfg.output.dir;
    prepare_dir(out)?;
    let records = loopback_rtt(sizes, rounds, 5)?;
    write_rtt(out, &records)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AccountantArgs {
    /// Sampling rate q = batch size / dataset size.
    #[arg(long)]
    pub q: f64,
    /// Noise multiplier σ; omit to calibrate it from --epsilon.
    #[arg(long, required_unless_present = "epsilon", conflicts_with = "epsilon")]
    pub sigma: Option<f64>,
    /// Target ε to calibrate σ for.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Number of noisy steps T.
    #[arg(long)]
    pub steps: u64,
    #[arg(long)]
    pub delta: f64,
    /// Print a JSON record instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Serialize)]
struct AccountantReport {
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    epsilon: f64,
}

pub fn accountant(a: &AccountantArgs) -> Result<(), CliError> {
    if !(a.q > 0.0 && a.q <= 1.0) {
        return Err(CliError::Config(format!("--q = {} must lie in (0, 1]", a.q)));
    }
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(CliError::Config(format!("--delta = {} must lie in (0, 1)", a.delta)));
    }
    let sigma = match (a.sigma, a.epsilon) {
        (Some(s), _) if s > 0.0 && s.is_finite() => s,
        (Some(s), _) => return Err(CliError::Config(format!("--sigma = {s} must be finite and > 0"))),
        (None, Some(eps)) => calibrate_sigma(
            &DpConfig {
                clip_threshold: 1.0,
                noise_multiplier: 1.0,
                sample_rate: a.q,
                target_epsilon: eps,
                target_delta: a.delta,
            },
            a.steps,
        )?,
        (None, None) => unreachable!("clap requires one of --sigma and --epsilon"),
    };
    let report = AccountantReport {
        q: a.q,
        sigma,
        steps: a.steps,
        delta: a.delta,
        epsilon: compute_epsilon(a.q, sigma, a.steps, a.delta),
    };
    if a.json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        println!(
            "q={} sigma={:.4} steps={} delta={:e} epsilon={:.6}",
            report.q, report.sigma, report.steps, report.delta, report.epsilon
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenKind {
    ClassificationPair,
    DensePair,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "classification-pair")]
    pub kind: GenKind,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// `images/NNNNN.png` plus `labels.csv` (`filename,<task>...`) for class
/// labels; dense pairs add `masks/NNNNN.png` (class index per pixel) and
/// `depth/NNNNN.f32` (little-endian f32, row-major).
pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let cfg = SyntheticSceneConfig {
        image_size: (a.size, a.size),
        num_samples: a.samples,
        seed: a.seed,
        ..SyntheticSceneConfig::default()
    };
    let data = match a.kind {
        GenKind::ClassificationPair => generate_classification_pair(&cfg)?,
        GenKind::DensePair => generate_dense_pair(&cfg)?,
    };
    for sub in ["images", "masks", "depth"] {
        if sub == "images" || matches!(a.kind, GenKind::DensePair) {
            prepare_dir(&a.out.join(sub))?;
        }
    }
    let class_tasks: Vec<(&str, &[u32])> = data
        .tasks
        .iter()
        .filter_map(|(name, l)| l.as_class().map(|c| (name.as_str(), c)))
        .collect();
    let csv_path = a.out.join("labels.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e.into()))?;
    let header: Vec<&str> = std::iter::once("filename").chain(class_tasks.iter().map(|t| t.0)).collect();
    w.write_record(&header).map_err(|e| CliError::io(&csv_path, e.into()))?;
    for i in 0..data.len() {
        let name = format!("images/{i:05}.png");
        images::save(&images::rgb(&data.images, i), &a.out.join(&name))?;
        let mut row = vec![name];
        row.extend(class_tasks.iter().map(|t| t.1[i].to_string()));
        w.write_record(&row).map_err(|e| CliError::io(&csv_path, e.into()))?;
        for (_, labels) in &data.tasks {
            match labels {
                Labels::Mask { labels, height, width } => {
                    let plane = height * width;
                    let path = a.out.join(format!("masks/{i:05}.png"));
                    images::mask(&labels[i * plane..(i + 1) * plane], *width, *height)
                        .save(&path)
                        .map_err(|e| CliError::io(&path, std::io::Error::other(e.to_string())))?;
                }
                Labels::Dense(t) => {
                    let path = a.out.join(format!("depth/{i:05}.f32"));
                    let bytes: Vec<u8> = t.sample(i).data().iter().flat_map(|v| v.to_le_bytes()).collect();
                    write_file(&path, bytes)?;
                }
                Labels::Class(_) => {}
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}
