use std::sync::{Arc, Mutex};

use super::*;
use crate::data::{Dataset, Transform};
use crate::netdef::{parse_netdef, LrPolicy};

const NET: &str = r#"
layer {
  name: "digits" kind: data top: "data" top: "label"
  data { source: "unused" label_source: "unused" batch_size: 8 test_batch_size: 10 channels: 1 height: 4 width: 4 }
}
layer { name: "ip1" kind: inner_product bottom: "data" top: "ip1" inner_product { num_output: 12 } }
layer { name: "relu1" kind: relu bottom: "ip1" top: "ip1" }
layer { name: "ip2" kind: inner_product bottom: "ip1" top: "ip2" inner_product { num_output: 10 } }
layer { name: "loss" kind: softmax_loss bottom: "ip2" bottom: "label" top: "loss" }
"#;

/// Images whose brightest pixel encodes the label.
fn dataset(n: usize, seed: u64) -> Arc<Dataset> {
    let mut images = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    let mut s = seed;
    for i in 0..n {
        let label = (i * 7 + seed as usize) % 10;
        for p in 0..16 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let noise = (s >> 59) as u8;
            images.push(if p == label { 200 + noise } else { noise * 4 });
        }
        labels.push(label as u8);
    }
    Arc::new(Dataset::new(4, 4, images, labels).unwrap())
}

fn solver_def() -> SolverDef {
    SolverDef {
        lr_policy: LrPolicy::Inv { gamma: 1e-3, power: 0.75 },
        momentum: 0.9,
        weight_decay: 5e-4,
        display: 10,
        test_interval: 25,
        test_iter: 3,
        seed: 5,
        ..SolverDef::new("unused", 0.05, 100)
    }
}

fn solver(def: SolverDef, dir: &Path, prefetch: bool) -> Solver {
    let transform = Transform { scale: 1.0 / 255.0, mean: None };
    let train = BatchSource::new(dataset(50, 1), 8, true, def.seed, transform.clone()).unwrap();
    let test = BatchSource::new(dataset(30, 2), 10, false, 0, transform).unwrap();
    let netdef = parse_netdef(NET).unwrap();
    Solver::new(
        def,
        &netdef,
        Sources {
            train,
            test: Some(test),
            prefetch,
        },
        dir.to_path_buf(),
    )
    .unwrap()
}

#[derive(Clone, Default)]
struct Log(Arc<Mutex<Vec<u8>>>);

impl Write for Log {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl Log {
    fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

#[test]
fn update_rule_examples() {
    let (mut w, mut v) = ([1.0f32], [0.0f32]);
    sgd_update(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.0);
    assert!((v[0] + 0.05).abs() < 1e-7 && (w[0] - 0.95).abs() < 1e-7);

    let (mut w, mut v) = ([1.0f32], [-0.05f32]);
    sgd_update(&mut w, &[0.5], &mut v, 0.1, 0.9, 0.0);
    assert!((v[0] + 0.095).abs() < 1e-7 && (w[0] - 0.905).abs() < 1e-7);

    let (mut w, mut v) = ([1.0f32], [0.0f32]);
    sgd_update(&mut w, &[0.0], &mut v, 0.1, 0.0, 0.01);
    assert!(w[0] < 1.0 && w[0] > 0.99);
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = solver(SolverDef { base_lr: 0.0, ..solver_def() }, dir.path(), false);
    let before = s.net().weights();
    s.step(20).unwrap();
    assert_eq!(s.net().weights(), before);
}

#[test]
fn plain_step_is_gradient_descent() {
    let dir = tempfile::tempdir().unwrap();
    let def = SolverDef {
        momentum: 0.0,
        weight_decay: 0.0,
        lr_policy: LrPolicy::Fixed,
        ..solver_def()
    };
    let mut s = solver(def, dir.path(), false);
    s.step(3).unwrap();
    let mut probe = solver(SolverDef { base_lr: 0.0, ..s.def().clone() }, dir.path(), false);
    probe.restore(&s.to_snapshot()).unwrap();
    probe.sgd_step().unwrap();
    let grads: Vec<Vec<f32>> = probe.net().params().iter().map(|p| p.diff().to_vec()).collect();
    let before: Vec<Vec<f32>> = s.net().params().iter().map(|p| p.data().to_vec()).collect();
    s.sgd_step().unwrap();
    for ((p, w0), g) in s.net().params().iter().zip(&before).zip(&grads) {
        for ((&w1, &w0), &g) in p.data().iter().zip(w0).zip(g) {
            assert_eq!(w1, w0 - 0.05 * g);
        }
    }
}

#[test]
fn log_lines_and_loss_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = solver(solver_def(), dir.path(), true);
    let log = Log::default();
    s.set_log(Box::new(log.clone()));
    let losses = s.step(100).unwrap();
    s.train().unwrap();
    let text = log.text();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("I0 test loss="), "{text}");
    assert!(lines[1].starts_with("I0 lr=0.05 loss="), "{text}");
    assert_eq!(lines.iter().filter(|l| l.contains(" lr=")).count(), 10);
    assert_eq!(lines.iter().filter(|l| l.contains("test")).count(), 4);
    assert_eq!(lines.last().unwrap(), &"I100 snapshot snapshot_iter_100.snapshot");
    let early: f32 = losses[..20].iter().sum();
    let late: f32 = losses[80..].iter().sum();
    assert!(late < early, "{early} {late}");
    let (_, acc) = s.test().unwrap().unwrap();
    assert!(acc > 0.5, "{acc}");
}

#[test]
fn stepping_in_pieces_equals_one_call() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = solver(solver_def(), dir.path(), true);
    let mut b = solver(solver_def(), dir.path(), false);
    let whole = a.step(30).unwrap();
    let mut pieces = Vec::new();
    for _ in 0..30 {
        pieces.extend(b.step(1).unwrap());
    }
    assert_eq!(whole, pieces);
    assert_eq!(a.to_snapshot(), b.to_snapshot());
}

#[test]
fn resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut straight = solver(solver_def(), dir.path(), true);
    let trace = straight.step(60).unwrap();

    let mut first = solver(solver_def(), dir.path(), true);
    first.step(23).unwrap();
    let path = first.snapshot().unwrap();
    drop(first);
    let snap = Snapshot::load(&path).unwrap();
    let mut resumed = solver(solver_def(), dir.path(), true);
    resumed.restore(&snap).unwrap();
    assert_eq!(resumed.iter(), 23);
    let rest = resumed.step(37).unwrap();
    assert_eq!(rest, trace[23..]);
    assert_eq!(resumed.to_snapshot(), straight.to_snapshot());

    // snapshot -> restore -> snapshot reproduces the bytes.
    let bytes = std::fs::read(&path).unwrap();
    let mut again = solver(solver_def(), dir.path(), false);
    again.restore(&snap).unwrap();
    assert_eq!(again.to_snapshot().encode().unwrap(), bytes);
}

#[test]
fn snapshot_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = solver(solver_def(), dir.path(), false);
    s.step(2).unwrap();
    let bytes = s.to_snapshot().encode().unwrap();
    assert_eq!(Snapshot::decode(&bytes).unwrap(), s.to_snapshot());
    for cut in [bytes.len() - 1, bytes.len() - 30, s.net().weights().encode().unwrap().len() + 3] {
        assert!(Snapshot::decode(&bytes[..cut]).is_err(), "{cut}");
    }
    assert!(Snapshot::decode(&s.net().weights().encode().unwrap()).is_err());
    let at = s.net().weights().encode().unwrap().len() + 8;
    let mut bad = bytes.clone();
    bad[at] = 9;
    assert!(Snapshot::decode(&bad).unwrap_err().to_string().contains("version"));
    let mut long = bytes;
    long.push(0);
    assert!(Snapshot::decode(&long).is_err());
}

#[test]
fn restore_into_a_different_net_names_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let s = solver(solver_def(), dir.path(), false);
    let snap = s.to_snapshot();
    let other = NET.replace("num_output: 12", "num_output: 13");
    let transform = Transform::default();
    let mut t = Solver::new(
        solver_def(),
        &parse_netdef(&other).unwrap(),
        Sources {
            train: BatchSource::new(dataset(50, 1), 8, true, 5, transform).unwrap(),
            test: None,
            prefetch: false,
        },
        dir.path().to_path_buf(),
    )
    .unwrap();
    let err = t.restore(&snap).unwrap_err().to_string();
    assert!(err.contains("ip1"), "{err}");
    assert_eq!(t.iter(), 0);
}

#[test]
fn zero_iterations_snapshot_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = solver(SolverDef { max_iter: 0, ..solver_def() }, dir.path(), true);
    let log = Log::default();
    s.set_log(Box::new(log.clone()));
    let path = s.train().unwrap();
    assert_eq!(path, dir.path().join("snapshot_iter_0.snapshot"));
    assert_eq!(Snapshot::load(&path).unwrap().state.iter, 0);
    assert_eq!(log.text(), "I0 snapshot snapshot_iter_0.snapshot\n");
}

#[test]
fn periodic_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let def = SolverDef {
        max_iter: 30,
        snapshot_interval: Some(10),
        snapshot_prefix: "out/run".into(),
        ..solver_def()
    };
    let mut s = solver(def, dir.path(), true);
    s.train().unwrap();
    let names: Vec<String> = s
        .snapshots()
        .iter()
        .map(|p| p.strip_prefix(dir.path()).unwrap().display().to_string())
        .collect();
    assert_eq!(names, ["out/run_iter_10.snapshot", "out/run_iter_20.snapshot", "out/run_iter_30.snapshot"]);
}

#[test]
fn evaluation_with_zero_parameters_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = solver(solver_def(), dir.path(), false);
    for p in s.net_mut().params_mut() {
        p.data_mut().fill(0.0);
    }
    let (loss, acc) = s.test().unwrap().unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-6, "{loss}");
    assert!((acc - 0.1).abs() < 1e-9, "{acc}");
    assert_eq!(s.test().unwrap(), Some((loss, acc)));
}

#[test]
fn accuracy_matches_a_recount() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = solver(solver_def(), dir.path(), false);
    s.step(40).unwrap();
    let (_, acc) = s.test().unwrap().unwrap();

    let netdef = parse_netdef(NET).unwrap();
    let mut net = Net::build(&netdef, &BuildOptions { batch: Some(10), seed: 0 }).unwrap();
    net.load_weights(&s.net().weights()).unwrap();
    let mut src = BatchSource::new(dataset(30, 2), 10, false, 0, Transform { scale: 1.0 / 255.0, mean: None }).unwrap();
    let mut right = 0;
    for _ in 0..3 {
        let b = src.next_batch();
        net.feed_data(&b.images, &b.labels).unwrap();
        net.forward().unwrap();
        let scores = net.blob("ip2").unwrap().data();
        for (n, &label) in b.labels.iter().enumerate() {
            let row = &scores[n * 10..n * 10 + 10];
            let best = (0..10).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            right += (best == label as usize) as usize;
        }
    }
    assert_eq!(acc, right as f64 / 30.0);
}

#[test]
fn divergence_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = solver(SolverDef { base_lr: 1e30, lr_policy: LrPolicy::Fixed, ..solver_def() }, dir.path(), false);
    let err = s.step(50).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}
