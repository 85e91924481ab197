use std::net::{TcpListener, TcpStream};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_classification_pair, Dataset, Labels, SyntheticSceneConfig};
use crate::model::{BackboneSpec, Head, Metamorph, MetamorphConfig, Stage, TaskKind};
use crate::nn::{AdamWConfig, ParamStore};
use crate::privacy::DpConfig;
use crate::trainer::{train_task_privacy, MultiTaskModel, RegimeKind, TaskSpec, TrainConfig, TrainingRegime};

const KEY: [u8; KEY_LEN] = [7; KEY_LEN];

fn data(n: usize) -> Dataset {
    generate_classification_pair(&SyntheticSceneConfig {
        num_samples: n,
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

fn model() -> MultiTaskModel {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = TaskSpec::new("shape", TaskKind::Classification { classes: 2 });
    MultiTaskModel::new(BackboneSpec::desk_default(), MetamorphConfig::default(), &[spec], &mut rng).unwrap()
}

fn session(epochs: usize, batch: usize) -> SessionConfig {
    let mut c = SessionConfig::new(77, "shape", epochs, batch, 3);
    c.optimizer = AdamWConfig::with_lr(1e-3);
    c.timeout_ms = 20_000;
    c
}

struct ProducerSide {
    outcome: crate::error::Result<ProducerOutcome>,
    encoder: Stage,
    metamorph: Metamorph,
    frames: Vec<Vec<u8>>,
}

/// Runs a producer thread on a loopback listener and a consumer in this thread.
fn run_pair(
    m: &MultiTaskModel,
    d: &Dataset,
    dp: Option<DpConfig>,
    pcfg: SessionConfig,
    ccfg: SessionConfig,
    ckey: [u8; KEY_LEN],
) -> (ProducerSide, crate::error::Result<ConsumerOutcome>, Head) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let mut encoder = m.encoder.clone();
    let mut metamorph = m.tasks[0].metamorph.clone();
    let d = d.clone();
    let producer = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut t = Transport::new(stream, pcfg.timeout()).unwrap();
        t.enable_capture();
        let outcome = run_producer(
            &mut t,
            &mut encoder,
            &mut metamorph,
            &d,
            "shape",
            dp.as_ref(),
            &LabelCipher::new(KEY),
            &pcfg,
        );
        ProducerSide {
            outcome,
            encoder,
            metamorph,
            frames: t.take_capture(),
        }
    });
    let mut head = m.tasks[0].head.clone();
    let mut t = Transport::new(TcpStream::connect(addr).unwrap(), ccfg.timeout()).unwrap();
    let consumer = run_consumer(&mut t, &mut head, &m.tasks[0].spec, &LabelCipher::new(ckey), &ccfg);
    (producer.join().unwrap(), consumer, head)
}

fn max_relative_diff(a: &ParamStore, b: &ParamStore) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|((_, x), (_, y))| {
            let scale = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
            x.max_abs_diff(y) / scale
        })
        .fold(0.0, f32::max)
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn loopback_session_records_one_rtt_per_batch() {
    let m = model();
    let d = data(40);
    let (p, c, _) = run_pair(&m, &d, None, session(1, 4), session(1, 4), KEY);
    let p = p.outcome.unwrap();
    let c = c.unwrap();
    assert_eq!(p.status, SessionStatus::Completed);
    assert_eq!(c.status, SessionStatus::Completed);
    assert_eq!(p.batches, 10);
    assert_eq!(c.batches, 10);
    assert_eq!(p.rtt.len(), 10);
    assert!(p.rtt.iter().all(|r| r.rtt_ms > 0.0 && r.ack_timestamp >= r.send_timestamp));
    assert_eq!(p.consumer_losses.len(), c.losses.len());
    for (a, b) in p.consumer_losses.iter().zip(&c.losses) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    // 4 samples of the desk feature map in f32.
    assert_eq!(p.rtt[0].payload_bytes, 4 * m.encoder.output_shape().iter().product::<usize>() * 4);
}

#[test]
fn split_training_matches_monolithic_training() {
    let m = model();
    let d = data(320);
    let mut cfg = TrainConfig::new(TrainingRegime::new(RegimeKind::TaskPrivacyOnly, 1, 0, 3), 16, 0.0);
    cfg.optimizer = AdamWConfig::with_lr(1e-3);
    cfg.select_best = false;
    let mut mono = m.clone();
    let history = train_task_privacy(&mut mono, &d, 1, &cfg).unwrap().history;

    let (p, c, head) = run_pair(&m, &d, None, session(1, 16), session(1, 16), KEY);
    let c = c.unwrap();
    assert_eq!(c.batches, 20);
    let tol = 1e-5;
    let enc = max_relative_diff(&mono.encoder.params, &p.encoder.params);
    let meta = max_relative_diff(&mono.tasks[0].metamorph.params, &p.metamorph.params);
    let hd = max_relative_diff(&mono.tasks[0].head.params, &head.params);
    assert!(enc <= tol && meta <= tol && hd <= tol, "relative diffs {enc} {meta} {hd}");
    assert!(max_relative_diff(&m.encoder.params, &p.encoder.params) > 1e-3);
    let split_mean = c.losses.iter().sum::<f64>() / c.losses.len() as f64;
    let mono_mean = history[0].task_losses[0].1;
    assert!((split_mean - mono_mean).abs() <= 1e-5 * mono_mean.abs().max(1.0));
}

#[test]
fn mismatched_keys_abort_before_any_features() {
    let m = model();
    let d = data(16);
    let (p, c, _) = run_pair(&m, &d, None, session(1, 4), session(1, 4), [9; KEY_LEN]);
    let c = c.unwrap();
    assert!(matches!(&c.status, SessionStatus::Aborted { reason } if reason.contains("key")), "{:?}", c.status);
    assert_eq!(c.batches, 0);
    let p = p.outcome.unwrap();
    assert!(matches!(p.status, SessionStatus::Aborted { .. }), "{:?}", p.status);
}

fn p_frames(frames: &[Vec<u8>]) -> impl Iterator<Item = SplitMessage> + '_ {
    frames
        .iter()
        .map(|f| decode_message(f).unwrap().0)
        .filter(|m| m.msg_type == MsgType::ForwardFeatures)
}

#[test]
fn key_mismatch_capture_has_no_feature_frames() {
    let m = model();
    let d = data(16);
    let (p, _, _) = run_pair(&m, &d, None, session(1, 4), session(1, 4), [9; KEY_LEN]);
    assert_eq!(p_frames(&p.frames).count(), 0);
    assert!(!p.frames.is_empty());
}

#[test]
fn labels_never_appear_in_feature_or_gradient_frames() {
    let m = model();
    let d = data(48);
    let (p, c, _) = run_pair(&m, &d, None, session(2, 8), session(2, 8), KEY);
    assert_eq!(c.unwrap().batches, 12);
    let frames = p.frames;
    // Rebuild each epoch's plaintext label record from the producer's batch order.
    let mut order = ChaCha8Rng::seed_from_u64(3);
    let labels = d.task("shape").unwrap();
    let mut plaintexts = Vec::new();
    for _ in 0..2 {
        let batches = d.epoch_batches(8, &mut order);
        let per_batch: Vec<Labels> = batches.iter().map(|b| labels.select(b)).collect();
        plaintexts.push(encode_labels(&per_batch).unwrap());
    }
    let mut data_frames = 0;
    for f in &frames {
        let msg = decode_message(f).unwrap().0;
        if matches!(msg.msg_type, MsgType::ForwardFeatures | MsgType::BackwardGrads) {
            data_frames += 1;
            for p in &plaintexts {
                assert!(!contains(f, p));
            }
        }
        if msg.msg_type == MsgType::LabelsEnc {
            for p in &plaintexts {
                assert!(!contains(f, &p[HEADER_LEN..]));
            }
        }
    }
    assert_eq!(data_frames, 24);
}

#[test]
fn bye_mid_epoch_shuts_down_cleanly_with_partial_metrics() {
    let m = model();
    let d = data(40);
    let mut pcfg = session(1, 4);
    pcfg.max_batches = Some(3);
    let (p, c, _) = run_pair(&m, &d, None, pcfg, session(1, 4), KEY);
    let c = c.unwrap();
    assert_eq!(c.status, SessionStatus::Completed);
    assert_eq!(c.losses.len(), 3);
    assert_eq!(p.outcome.unwrap().consumer_losses.len(), 3);
}

#[test]
fn f16_is_used_only_when_both_sides_ask() {
    let m = model();
    let d = data(8);
    let mut half = session(1, 4);
    half.dtype = DType::F16;
    let (p, c, _) = run_pair(&m, &d, None, half.clone(), half.clone(), KEY);
    assert_eq!(c.unwrap().batches, 2);
    let f: Vec<_> = p_frames(&p.frames).collect();
    assert!(f.iter().all(|m| m.tensors[0].dtype() == DType::F16));
    let (p, _, _) = run_pair(&m, &d, None, session(1, 4), half, KEY);
    assert!(p_frames(&p.frames).all(|m| m.tensors[0].dtype() == DType::F32));
}

#[test]
fn dp_session_advances_the_ledger_per_batch() {
    let m = model();
    let d = data(32);
    let dp = DpConfig {
        clip_threshold: 1.0,
        noise_multiplier: 1.1,
        sample_rate: 0.25,
        target_epsilon: 50.0,
        target_delta: 1e-5,
    };
    let (p, c, _) = run_pair(&m, &d, Some(dp), session(1, 8), session(1, 8), KEY);
    assert_eq!(c.unwrap().batches, 4);
    assert!(max_relative_diff(&m.encoder.params, &p.encoder.params) > 0.0);
    let out = p.outcome.unwrap();
    assert_eq!(out.ledger.unwrap().steps(), 4);
}

#[test]
fn zero_features_give_finite_gradients() {
    let m = model();
    let shape = m.encoder.output_shape();
    let z = Tensor::zeros(vec![3, shape[0], shape[1], shape[2]]);
    let (loss, g, head) = consumer_step(&m.tasks[0].head, &m.tasks[0].spec, z, &Labels::Class(vec![0, 1, 1])).unwrap();
    assert!(loss.is_finite());
    assert!(g.is_finite());
    assert!(head.iter().all(Tensor::is_finite));
}

#[test]
fn boundary_gradient_matches_in_process_gradient_bit_for_bit() {
    let m = model();
    let d = data(6);
    let b = d.batch(&[0, 1, 2, 3, 4, 5]);
    let features = m.features(0, &b.images);
    let (_, g, _) = consumer_step(&m.tasks[0].head, &m.tasks[0].spec, features.clone(), &b.labels[0]).unwrap();
    let wire = FeatureTensor::from_tensor(&g, DType::F32);
    let frame = encode_message(&SplitMessage::new(MsgType::BackwardGrads, 1, 0, vec![wire]));
    let back = decode_message(&frame).unwrap().0.tensors[0].to_tensor().unwrap();
    assert_eq!(back.data(), g.data());
}

/// Consumer side of the handshake with the shared key; returns after CONTROL ready.
fn fake_handshake(t: &mut Transport, shape: [usize; 3]) {
    let hello = serde_json::json!({"role": "consumer", "task_id": "shape", "dtype": "f32", "input_shape": shape});
    t.send(&SplitMessage::new(
        MsgType::Hello,
        77,
        0,
        vec![FeatureTensor::from_bytes(serde_json::to_vec(&hello).unwrap())],
    ))
    .unwrap();
    assert_eq!(t.recv().unwrap().msg_type, MsgType::Hello);
    t.send(&Control::Ready.to_message(77, 0)).unwrap();
}

#[test]
fn unresponsive_consumer_times_out_with_partial_records() {
    let m = model();
    let d = data(8);
    let shape = m.encoder.output_shape();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let fake = thread::spawn(move || {
        let mut t = Transport::new(TcpStream::connect(addr).unwrap(), Some(std::time::Duration::from_secs(20))).unwrap();
        fake_handshake(&mut t, shape);
        // LABELS_ENC and the first FORWARD_FEATURES; never answer.
        for _ in 0..2 {
            t.recv().unwrap();
        }
        thread::sleep(std::time::Duration::from_millis(600));
    });
    let (stream, _) = listener.accept().unwrap();
    let mut cfg = session(1, 4);
    cfg.timeout_ms = 200;
    let mut t = Transport::new(stream, cfg.timeout()).unwrap();
    let mut enc = m.encoder.clone();
    let mut meta = m.tasks[0].metamorph.clone();
    let out = run_producer(&mut t, &mut enc, &mut meta, &d, "shape", None, &LabelCipher::new(KEY), &cfg).unwrap();
    assert!(matches!(&out.status, SessionStatus::Aborted { reason } if reason.contains("timed out")), "{:?}", out.status);
    assert!(out.rtt.is_empty());
    fake.join().unwrap();
}

#[test]
fn wrong_gradient_shape_is_a_protocol_error() {
    let m = model();
    let d = data(8);
    let shape = m.encoder.output_shape();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let fake = thread::spawn(move || {
        let mut t = Transport::new(TcpStream::connect(addr).unwrap(), Some(std::time::Duration::from_secs(20))).unwrap();
        fake_handshake(&mut t, shape);
        for _ in 0..2 {
            t.recv().unwrap();
        }
        let g = Tensor::zeros(vec![1, 2]);
        t.send(&SplitMessage::new(MsgType::BackwardGrads, 77, 0, vec![FeatureTensor::from_tensor(&g, DType::F32)]))
            .unwrap();
        let abort = t.recv().unwrap();
        assert_eq!(abort.msg_type, MsgType::Control);
    });
    let (stream, _) = listener.accept().unwrap();
    let cfg = session(1, 4);
    let mut t = Transport::new(stream, cfg.timeout()).unwrap();
    let mut enc = m.encoder.clone();
    let mut meta = m.tasks[0].metamorph.clone();
    let err = run_producer(&mut t, &mut enc, &mut meta, &d, "shape", None, &LabelCipher::new(KEY), &cfg).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    fake.join().unwrap();
}

#[test]
fn capture_dump_round_trips() {
    let frames = vec![
        encode_message(&SplitMessage::new(MsgType::Hello, 1, 0, vec![])),
        encode_message(&SplitMessage::new(MsgType::Bye, 1, 5, vec![])),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("capture.bin");
    write_capture(&path, &frames).unwrap();
    let back = read_capture(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].batch_index, 5);
}

#[test]
fn loopback_benchmark_returns_records_per_size() {
    let recs = loopback_rtt(&[2048, 16384], 5, 1).unwrap();
    assert_eq!(recs.len(), 10);
    let s = measure_rtt(&recs);
    assert_eq!(s.iter().map(|s| s.payload_bytes).collect::<Vec<_>>(), vec![2048, 16384]);
}
