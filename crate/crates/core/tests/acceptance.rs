//! Acceptance gate: runs each criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits nonzero if any fails.
//!
//! The MNIST criteria read the four IDX files from `MGRIND_MNIST_DIR`
//! (default `data/mnist` in the workspace) and fail when they are missing.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use common::{lenet_run_dir, mnist_available, mnist_dir, model_with_data, SharedLog};
use mgrind::data::{BatchSource, Dataset, Transform};
use mgrind::layers::{
    Activation, ActivationKind, ConvParam, Convolution, Eltwise, EltwiseOp, EltwiseParam, HingeLoss, InnerProduct,
    InnerProductParam, Layer, Lrn, LrnParam, PoolMethod, PoolParam, Pooling, SoftmaxLoss,
};
use mgrind::net::gradcheck::{check_layer, LayerCheck};
use mgrind::net::{BuildOptions, Net, WeightsFile};
use mgrind::netdef::{parse_netdef, parse_netdef_bytes, parse_solverdef, NetDef};
use mgrind::solver::{Snapshot, Solver};
use mgrind::{Error, Shape4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOLERANCE: f64 = 1e-2;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const SHAPES_PER_LAYER: usize = 5;
const MNIST_ACCURACY: f64 = 0.985;
const MNIST_BUDGET: Duration = Duration::from_secs(45 * 60);
const THROUGHPUT_MB_S: f64 = 150.0;
const FUZZ_CASES: usize = 10_000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn run(name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (passed, detail) = match result {
        Ok(Ok(o)) => (o.passed, o.detail),
        Ok(Err(e)) => (false, format!("error: {e:#}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!("{} {name}: {detail} ({secs:.1}s)", if passed { "PASS" } else { "FAIL" });
    passed
}

// ---------------------------------------------------------------------------
// Gradient soundness

type MakeCase = fn(&mut ChaCha8Rng, u64) -> Result<(Box<dyn Layer<f64>>, Vec<Shape4>, LayerCheck)>;

fn shape(rng: &mut ChaCha8Rng, n: (usize, usize), c: (usize, usize), hw: (usize, usize)) -> Shape4 {
    Shape4::new(
        rng.random_range(n.0..=n.1),
        rng.random_range(c.0..=c.1),
        rng.random_range(hw.0..=hw.1),
        rng.random_range(hw.0..=hw.1),
    )
}

fn conv_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<(Box<dyn Layer<f64>>, Vec<Shape4>, LayerCheck)> {
    let s = shape(rng, (1, 2), (1, 3), (3, 7));
    let kernel = rng.random_range(1..=3.min(s.height.min(s.width)));
    let mut p = ConvParam::square(rng.random_range(1..=4), kernel, rng.random_range(1..=2), rng.random_range(0..=1));
    p.kernel_w = rng.random_range(1..=3.min(s.width));
    Ok((Box::new(Convolution::new(p, seed)?), vec![s], LayerCheck::default()))
}

fn pool_case(rng: &mut ChaCha8Rng, method: PoolMethod) -> Result<(Box<dyn Layer<f64>>, Vec<Shape4>, LayerCheck)> {
    let s = shape(rng, (1, 2), (1, 3), (3, 8));
    let kernel = rng.random_range(2..=3);
    let p = PoolParam::square(method, kernel, rng.random_range(1..=2), rng.random_range(0..kernel));
    Ok((Box::new(Pooling::new(p)?), vec![s], LayerCheck::default()))
}

fn layer_cases() -> Vec<(&'static str, MakeCase)> {
    vec![
        ("conv", conv_case),
        ("pool-max", |rng, _| pool_case(rng, PoolMethod::Max)),
        ("pool-avg", |rng, _| pool_case(rng, PoolMethod::Average)),
        ("inner_product", |rng, seed| {
            let s = shape(rng, (1, 3), (1, 4), (1, 3));
            let layer = InnerProduct::new(InnerProductParam::new(rng.random_range(1..=6)), seed)?;
            Ok((Box::new(layer), vec![s], LayerCheck::default()))
        }),
        ("relu", |rng, _| {
            let check = LayerCheck {
                kink_margin: 1e-2,
                ..LayerCheck::default()
            };
            Ok((Box::new(Activation::new(ActivationKind::ReLU)), vec![shape(rng, (1, 3), (1, 4), (1, 6))], check))
        }),
        ("sigmoid", |rng, _| {
            let s = shape(rng, (1, 3), (1, 4), (1, 6));
            Ok((Box::new(Activation::new(ActivationKind::Sigmoid)), vec![s], LayerCheck::default()))
        }),
        ("lrn", |rng, _| {
            let p = LrnParam {
                local_size: [1, 3, 5][rng.random_range(0..3)],
                alpha: [1e-4, 0.1, 1.0][rng.random_range(0..3)],
                beta: 0.75,
                k: [1.0, 2.0][rng.random_range(0..2)],
            };
            Ok((Box::new(Lrn::new(p)?), vec![shape(rng, (1, 2), (1, 7), (1, 4))], LayerCheck::default()))
        }),
        ("eltwise-sum", |rng, _| {
            let s = shape(rng, (1, 2), (1, 3), (1, 5));
            let k = rng.random_range(2..=3);
            let coeffs = if rng.random_bool(0.5) {
                (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()
            } else {
                Vec::new()
            };
            let layer = Eltwise::new(EltwiseParam { op: EltwiseOp::Sum, coeffs });
            Ok((Box::new(layer), vec![s; k], LayerCheck::default()))
        }),
        ("eltwise-product", |rng, _| {
            let s = shape(rng, (1, 2), (1, 3), (1, 5));
            let k = rng.random_range(2..=3);
            let layer = Eltwise::new(EltwiseParam {
                op: EltwiseOp::Product,
                coeffs: Vec::new(),
            });
            Ok((Box::new(layer), vec![s; k], LayerCheck::default()))
        }),
        ("eltwise-max", |rng, _| {
            let s = shape(rng, (1, 2), (1, 3), (1, 5));
            let k = rng.random_range(2..=3);
            let layer = Eltwise::new(EltwiseParam {
                op: EltwiseOp::Max,
                coeffs: Vec::new(),
            });
            Ok((Box::new(layer), vec![s; k], LayerCheck::default()))
        }),
        ("softmax_loss", |rng, _| {
            let (n, classes) = (rng.random_range(1..=8), rng.random_range(2..=10));
            let check = LayerCheck {
                label_classes: Some(classes),
                ..LayerCheck::default()
            };
            let shapes = vec![Shape4::new(n, classes, 1, 1), Shape4::new(n, 1, 1, 1)];
            Ok((Box::new(SoftmaxLoss::new()), shapes, check))
        }),
        ("hinge_loss", |rng, _| {
            let (n, classes) = (rng.random_range(1..=8), rng.random_range(2..=10));
            let check = LayerCheck {
                label_classes: Some(classes),
                ..LayerCheck::default()
            };
            let shapes = vec![Shape4::new(n, classes, 1, 1), Shape4::new(n, 1, 1, 1)];
            Ok((Box::new(HingeLoss::new()), shapes, check))
        }),
    ]
}

fn gradient_soundness() -> Result<Outcome> {
    let start = Instant::now();
    let mut failures = Vec::new();
    let (mut checked, mut skipped) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for (k, (name, make)) in layer_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED + k as u64);
        for case in 0..SHAPES_PER_LAYER {
            let seed = rng.random();
            let (mut layer, shapes, mut check) = make(&mut rng, seed)?;
            check.seed = rng.random();
            let report = check_layer::<f64>(layer.as_mut(), &shapes, &check)
                .with_context(|| format!("{name} case {case} on {shapes:?}"))?;
            checked += report.checked;
            skipped += report.skipped;
            worst = worst.max(report.worst);
            if report.checked == 0 || !report.passed(GRAD_TOLERANCE) {
                failures.push(format!(
                    "{name} {shapes:?}: rel err {:.2e} at {} (checked {})",
                    report.worst, report.worst_at, report.checked
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    let layers = layer_cases().len();
    let summary = format!(
        "{layers} layers x {SHAPES_PER_LAYER} shapes, {checked} coordinates checked, {skipped} excluded near kinks, \
         worst rel err {worst:.2e} (< {GRAD_TOLERANCE:.0e}), {:.1}s of {}s",
        elapsed.as_secs_f64(),
        GRAD_BUDGET.as_secs()
    );
    if !failures.is_empty() {
        return outcome(false, format!("{summary}; failing: {}", failures.join("; ")));
    }
    outcome(elapsed < GRAD_BUDGET, summary)
}

// ---------------------------------------------------------------------------
// MNIST training: end-to-end accuracy and determinism share the first run.

struct FullRun {
    log: String,
    snapshots: Vec<(String, Vec<u8>)>,
    accuracy: f64,
    elapsed: Duration,
}

fn full_run(mnist: &Path) -> Result<FullRun> {
    let dir = tempfile::tempdir()?;
    let solver_path = lenet_run_dir(dir.path(), mnist, &[]);
    let start = Instant::now();
    let mut solver = Solver::from_file(&solver_path, None)?;
    let log = SharedLog::default();
    solver.set_log(Box::new(log.clone()));
    solver.train()?;
    let elapsed = start.elapsed();
    let text = log.text();
    let (_, accuracy) = solver.test()?.ok_or_else(|| anyhow!("the training net has no test source"))?;
    let mut snapshots = Vec::new();
    for p in solver.snapshots() {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        snapshots.push((name, std::fs::read(p)?));
    }
    Ok(FullRun {
        log: text,
        snapshots,
        accuracy,
        elapsed,
    })
}

fn require_mnist() -> Result<PathBuf> {
    mnist_available().ok_or_else(|| anyhow!("MNIST files not found in {}", mnist_dir().display()))
}

fn mnist_end_to_end(first: &Result<FullRun>) -> Result<Outcome> {
    let run = first.as_ref().map_err(|e| anyhow!("{e:#}"))?;
    let mins = run.elapsed.as_secs_f64() / 60.0;
    outcome(
        run.accuracy >= MNIST_ACCURACY && run.elapsed <= MNIST_BUDGET,
        format!(
            "test accuracy {:.4} on 10000 images after 10000 iterations (>= {MNIST_ACCURACY}), \
             wall clock {mins:.1} min on {} core(s) (<= 45 min)",
            run.accuracy,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    )
}

fn determinism(first: &Result<FullRun>, mnist: &Path) -> Result<Outcome> {
    let a = first.as_ref().map_err(|e| anyhow!("{e:#}"))?;
    let b = full_run(mnist)?;
    let names: Vec<&str> = a.snapshots.iter().map(|(n, _)| n.as_str()).collect();
    if a.log != b.log {
        let line = a.log.lines().zip(b.log.lines()).position(|(x, y)| x != y);
        return outcome(false, format!("logs differ (first differing line {line:?})"));
    }
    if a.snapshots != b.snapshots {
        return outcome(false, format!("snapshots differ among {names:?}"));
    }
    outcome(
        true,
        format!(
            "two seeded runs: {} log lines and {} snapshots ({}) byte-identical",
            a.log.lines().count(),
            names.len(),
            names.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// Data throughput

fn throughput() -> Result<Outcome> {
    let mnist = require_mnist()?;
    let images = mnist.join("train-images-idx3-ubyte");
    let labels = mnist.join("train-labels-idx1-ubyte");
    let bytes = std::fs::metadata(&images)?.len() + std::fs::metadata(&labels)?.len();
    // warm the page cache
    std::fs::read(&images)?;
    std::fs::read(&labels)?;

    let batch = 64;
    let mut rates = Vec::new();
    for _ in 0..3 {
        let start = Instant::now();
        let ds = Dataset::load(&images, &labels)?;
        let len = ds.len();
        let transform = Transform {
            scale: 1.0 / 256.0,
            mean: None,
        };
        let mut source = BatchSource::new(Arc::new(ds), batch, true, 1, transform)?;
        let shape = source.batch_shape();
        let mut x = vec![0.0f32; shape.count()];
        let mut y = vec![0.0f32; batch];
        let mut checksum = 0.0f64;
        for _ in 0..len.div_ceil(batch) {
            source.next_into(&mut x, &mut y);
            checksum += x[0] as f64;
        }
        let secs = start.elapsed().as_secs_f64();
        std::hint::black_box(checksum);
        rates.push(bytes as f64 / 1e6 / secs);
    }
    rates.sort_by(f64::total_cmp);
    let median = rates[1];
    outcome(
        median >= THROUGHPUT_MB_S,
        format!(
            "read + parse + shuffle + scale of the 60000-image epoch: median {median:.0} MB/s over 3 runs \
             (>= {THROUGHPUT_MB_S})"
        ),
    )
}

// ---------------------------------------------------------------------------
// Snapshot/resume

fn open(solver_path: &Path) -> Result<(Solver, SharedLog)> {
    let mut solver = Solver::from_file(solver_path, None)?;
    let log = SharedLog::default();
    solver.set_log(Box::new(log.clone()));
    Ok((solver, log))
}

fn snapshot_resume() -> Result<Outcome> {
    let mnist = require_mnist()?;
    let overrides = [
        ("max_iter", "200"),
        ("display", "1"),
        ("test_interval", "50"),
        ("test_iter", "10"),
        ("snapshot_interval", "100"),
    ];
    let whole_dir = tempfile::tempdir()?;
    let (mut whole, whole_log) = open(&lenet_run_dir(whole_dir.path(), &mnist, &overrides))?;
    whole.train()?;

    let cut_dir = tempfile::tempdir()?;
    let cut_solver = lenet_run_dir(cut_dir.path(), &mnist, &overrides);
    let (mut first, first_log) = open(&cut_solver)?;
    first.step(100)?;
    let at_100 = first.snapshots().to_vec();
    ensure!(at_100.len() == 1, "expected one snapshot at iteration 100, got {at_100:?}");
    drop(first);

    let (mut second, second_log) = open(&cut_solver)?;
    second.restore(&Snapshot::load(&at_100[0])?)?;
    let last = second.train()?;

    let whole_text = whole_log.text();
    let resumed_text = first_log.text() + &second_log.text();
    let losses = whole_text.lines().filter(|l| l.contains(" lr=")).count();
    if whole_text != resumed_text {
        let line = whole_text.lines().zip(resumed_text.lines()).position(|(x, y)| x != y);
        return outcome(false, format!("loss traces differ (first differing log line {line:?})"));
    }
    let read = |p: &PathBuf| std::fs::read(p).with_context(|| p.display().to_string());
    let whole_snaps = whole.snapshots().to_vec();
    ensure!(whole_snaps.len() == 2, "expected snapshots at 100 and 200, got {whole_snaps:?}");
    let same_100 = read(&whole_snaps[0])? == read(&at_100[0])?;
    let same_200 = read(&whole_snaps[1])? == read(&last)?;
    outcome(
        same_100 && same_200,
        format!(
            "{losses} per-iteration losses and all test lines identical; snapshot at 100 identical: {same_100}; \
             final snapshot at 200 identical: {same_200}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Finetuning

fn entries_equal(a: &WeightsFile, b: &WeightsFile, layer: &str) -> Result<bool> {
    let pick = |w: &WeightsFile| -> Vec<(u16, Shape4, Vec<u32>)> {
        w.entries
            .iter()
            .filter(|e| e.layer == layer)
            .map(|e| (e.index, e.shape, e.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    let (x, y) = (pick(a), pick(b));
    ensure!(!x.is_empty(), "no parameters for layer `{layer}`");
    Ok(x == y)
}

fn finetuning() -> Result<Outcome> {
    let dir = mnist_dir();
    let train_def = parse_netdef(&model_with_data("lenet_train.net", &dir))?;
    let head_def = parse_netdef(&model_with_data("lenet_finetune.net", &dir))?;
    let mut source: Net = Net::build(&train_def, &BuildOptions::seed(7))?;
    // move the source away from its own initialization
    for p in source.params_mut() {
        for v in p.data_mut() {
            *v = *v * 1.5f32 + 0.25;
        }
    }
    let trained = source.weights();

    let mut net: Net = Net::build(&head_def, &BuildOptions::seed(11))?;
    let fresh = Net::<f32>::build(&head_def, &BuildOptions::seed(11))?.weights();
    let report = net.copy_trained_layers(&trained, false)?;
    let after = net.weights();
    let mut problems = Vec::new();
    if report.copied != ["conv1", "conv2", "ip1"] || report.initialized != ["ip2_new"] || !report.skipped.is_empty() {
        problems.push(format!("unexpected transfer report {report:?}"));
    }
    for layer in ["conv1", "conv2", "ip1"] {
        if !entries_equal(&after, &trained, layer)? {
            problems.push(format!("`{layer}` not copied bit-exactly"));
        }
    }
    if !entries_equal(&after, &fresh, "ip2_new")? {
        problems.push("`ip2_new` differs from its filler initialization".into());
    }

    let conflict_def = parse_netdef(&model_with_data("lenet_train.net", &dir).replace("num_output: 10", "num_output: 5"))?;
    let mut strict: Net = Net::build(&conflict_def, &BuildOptions::seed(11))?;
    let before = strict.weights();
    match strict.copy_trained_layers(&trained, false) {
        Ok(r) => problems.push(format!("strict mode accepted a shape conflict: {r:?}")),
        Err(e) if !e.to_string().contains("ip2") => problems.push(format!("strict error does not name ip2: {e}")),
        Err(_) => {}
    }
    if strict.weights() != before {
        problems.push("a rejected transfer modified the net".into());
    }
    let mut permissive: Net = Net::build(&conflict_def, &BuildOptions::seed(11))?;
    let r = permissive.copy_trained_layers(&trained, true)?;
    if r.skipped != ["ip2"] || r.copied != ["conv1", "conv2", "ip1"] {
        problems.push(format!("permissive transfer report {r:?}"));
    }
    if !entries_equal(&permissive.weights(), &before, "ip2")? {
        problems.push("a skipped layer lost its initialization".into());
    }

    if problems.is_empty() {
        outcome(
            true,
            "conv1, conv2, ip1 copied bit-exactly; ip2_new equals its fresh filler init; \
             strict mode rejects the ip2 shape conflict without side effects; permissive mode skips it",
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

// ---------------------------------------------------------------------------
// Parser

fn golden_files() -> Result<Vec<(String, String)>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "net") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, std::fs::read_to_string(&path)?));
        }
    }
    out.sort();
    Ok(out)
}

fn parse_position(src: &str) -> Result<(usize, String)> {
    match parse_netdef(src) {
        Err(Error::Parse(d)) => Ok((d.pos.line, d.message)),
        Err(e) => bail!("expected a positioned parse error, got {e}"),
        Ok(_) => bail!("expected a parse error"),
    }
}

const TOKENS: &[&str] = &[
    "{", "}", "\"", ":", "layer", "input", "name", "bottom", "top", "kind", "shape", "conv", "pool", "0", "-1",
    "99999999999999999999", "1e308", "nan", "\n", " ", "#", "\\", "relu", "eltwise", "data", "\u{feff}", "é",
];

fn mutate(rng: &mut ChaCha8Rng, text: &[u8]) -> Vec<u8> {
    let mut bytes = text.to_vec();
    for _ in 0..rng.random_range(1..=8) {
        let at = rng.random_range(0..=bytes.len());
        match rng.random_range(0..5) {
            0 if at < bytes.len() => bytes[at] = rng.random(),
            1 if at < bytes.len() => {
                let end = (at + rng.random_range(1..=16)).min(bytes.len());
                bytes.drain(at..end);
            }
            2 => {
                let t = TOKENS[rng.random_range(0..TOKENS.len())];
                bytes.splice(at..at, t.bytes());
            }
            3 if at < bytes.len() => {
                let end = (at + rng.random_range(1..=64)).min(bytes.len());
                let chunk = bytes[at..end].to_vec();
                bytes.splice(at..at, chunk);
            }
            _ => bytes.truncate(at),
        }
    }
    bytes
}

fn fuzz_one(input: &[u8]) -> std::result::Result<bool, String> {
    catch_unwind(|| {
        let parsed = parse_netdef_bytes(input);
        if let Ok(text) = std::str::from_utf8(input) {
            let _ = parse_solverdef(text);
        }
        match parsed {
            Ok(def) => parse_netdef(&def.serialize()).map(|d| d == def).unwrap_or(false),
            Err(_) => true,
        }
    })
    .map_err(|p| {
        p.downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default()
    })
}

fn parser() -> Result<Outcome> {
    let mut problems = Vec::new();

    let goldens = golden_files()?;
    for (name, text) in &goldens {
        let def = parse_netdef(text).with_context(|| name.clone())?;
        if def.serialize() != *text {
            problems.push(format!("{name} does not serialize back to itself"));
        }
        if parse_netdef(&def.serialize())? != def {
            problems.push(format!("{name} does not reparse to the same definition"));
        }
    }
    let sources: [(&str, fn() -> String); 2] = [
        ("lenet.net", || common::model_text("lenet.net")),
        ("lenet_train.net", || common::model_text("lenet_train.net")),
    ];
    for (name, src) in sources {
        let golden = &goldens.iter().find(|(n, _)| n == name).ok_or_else(|| anyhow!("missing golden {name}"))?.1;
        let def: NetDef = parse_netdef(&src())?;
        if def.serialize() != *golden {
            problems.push(format!("models/lenet/{name} does not match its golden serialization"));
        }
    }
    ensure!(goldens.len() >= 5, "only {} golden files", goldens.len());

    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let (mut crashes, mut unstable, mut accepted) = (Vec::new(), 0usize, 0usize);
    for case in 0..FUZZ_CASES {
        let input: Vec<u8> = if case % 2 == 0 {
            let len = rng.random_range(0..512);
            (0..len).map(|_| rng.random()).collect()
        } else {
            let (_, base) = &goldens[rng.random_range(0..goldens.len())];
            mutate(&mut rng, base.as_bytes())
        };
        match fuzz_one(&input) {
            Ok(true) => accepted += parse_netdef_bytes(&input).is_ok() as usize,
            Ok(false) => unstable += 1,
            Err(msg) => crashes.push(format!("case {case}: {msg}")),
        }
    }
    std::panic::set_hook(default_hook);
    if !crashes.is_empty() {
        problems.push(format!("{} crashes, first {}", crashes.len(), crashes[0]));
    }
    if unstable > 0 {
        problems.push(format!("{unstable} accepted inputs did not survive a serialize round trip"));
    }

    let cycle = "input { name: \"x\" shape: 1 1 1 1 }\n\
                 layer { name: \"a\" kind: relu bottom: \"x\" top: \"a\" }\n\
                 layer { name: \"b\" kind: eltwise bottom: \"a\" bottom: \"c\" top: \"b\" }\n\
                 layer { name: \"c\" kind: sigmoid bottom: \"b\" top: \"c\" }\n";
    let (line, message) = parse_position(cycle)?;
    if line != 3 || !message.contains("cycle") {
        problems.push(format!("cycle reported at line {line}: {message}"));
    }
    let dangling = "input { name: \"x\" shape: 1 1 1 1 }\n\
                    layer { name: \"a\" kind: relu bottom: \"x\" top: \"a\" }\n\
                    layer {\n  name: \"b\"\n  kind: sigmoid\n  bottom: \"ghost\"\n  top: \"b\"\n}\n";
    let (dline, dmessage) = parse_position(dangling)?;
    if dline != 6 || !dmessage.contains("ghost") {
        problems.push(format!("dangling reference reported at line {dline}: {dmessage}"));
    }

    if problems.is_empty() {
        outcome(
            true,
            format!(
                "{} golden files round-trip (including LeNet); {FUZZ_CASES} fuzz cases, 0 crashes, \
                 {accepted} accepted inputs stable under reserialization; cycle at line {line}, \
                 dangling reference at line {dline}",
                goldens.len()
            ),
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

/// Criteria whose names contain any command-line argument, or all of them.
fn selected(name: &str) -> bool {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))
}

fn main() {
    let quick: [(&str, fn() -> Result<Outcome>); 5] = [
        ("parser", parser),
        ("gradient soundness", gradient_soundness),
        ("finetuning semantics", finetuning),
        ("data throughput", throughput),
        ("snapshot/resume bit-exactness", snapshot_resume),
    ];
    let mut results = Vec::new();
    for (name, f) in quick {
        if selected(name) {
            results.push(run(name, f));
        }
    }

    let (e2e, det) = ("MNIST end-to-end", "determinism");
    if selected(e2e) || selected(det) {
        let mnist = mnist_available();
        let missing = || anyhow!("MNIST files not found in {}", mnist_dir().display());
        let train = || mnist.as_deref().map_or_else(|| Err(missing()), full_run);
        let mut first = None;
        if selected(e2e) {
            results.push(run(e2e, || mnist_end_to_end(first.insert(train()))));
        }
        if selected(det) {
            results.push(run(det, || {
                let first = first.get_or_insert_with(train);
                determinism(first, mnist.as_deref().ok_or_else(missing)?)
            }));
        }
    }

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
