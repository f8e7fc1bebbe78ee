use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use mgrind::data::{load_mean, open_source, read_idx, Phase, IDX_IMAGES_MAGIC};
use mgrind::layers::LayerKind;
use mgrind::net::{BuildOptions, Net, WeightEntry, WeightsFile};
use mgrind::netdef::{load_netdef, NetDef};
use mgrind::solver::{evaluate, Snapshot, Solver};
use mgrind::{Filler, Shape4};

/// `--seed` wins over `MGRIND_SEED`, which wins over the solver file.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MGRIND_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| anyhow!("MGRIND_SEED must be an unsigned integer, got `{v}`")),
        Err(_) => Ok(None),
    }
}

fn env_seed() -> Result<u64> {
    Ok(seed_override(None)?.unwrap_or(0))
}

fn load_model(path: &Path) -> Result<NetDef> {
    load_netdef(path).with_context(|| path.display().to_string())
}

fn load_weights(path: &Path) -> Result<WeightsFile> {
    WeightsFile::load(path).with_context(|| path.display().to_string())
}

fn dir_of(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn open_solver(path: &Path, seed: Option<u64>) -> Result<Solver> {
    let mut solver = Solver::from_file(path, seed_override(seed)?).with_context(|| path.display().to_string())?;
    solver.set_log(Box::new(std::io::stdout()));
    Ok(solver)
}

pub fn train(solver: &Path, resume: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut s = open_solver(solver, seed)?;
    if let Some(r) = resume {
        let snap = Snapshot::load(r).with_context(|| r.display().to_string())?;
        s.restore(&snap).with_context(|| format!("resuming from {}", r.display()))?;
    }
    s.train()?;
    Ok(())
}

pub fn finetune(solver: &Path, weights: &Path, permissive: bool, seed: Option<u64>) -> Result<()> {
    let mut s = open_solver(solver, seed)?;
    let w = load_weights(weights)?;
    let report = s
        .net_mut()
        .copy_trained_layers(&w, permissive)
        .with_context(|| format!("initializing from {}", weights.display()))?;
    println!("copied: {}", report.copied.join(" "));
    println!("initialized: {}", report.initialized.join(" "));
    println!("skipped: {}", report.skipped.join(" "));
    for name in &report.skipped {
        eprintln!("warning: layer `{name}` does not match the weights file and keeps its initialization");
    }
    s.train()?;
    Ok(())
}

pub fn test(model: &Path, weights: &Path, iterations: u64) -> Result<()> {
    let def = load_model(model)?;
    let param = def
        .data_param()
        .ok_or_else(|| anyhow!("{}: the model has no data layer to read test batches from", model.display()))?;
    let mut source = if param.test_source.is_some() {
        open_source(param, dir_of(model), Phase::Test, 0)?
    } else {
        let mut p = param.clone();
        p.shuffle = false;
        p.batch_size = p.test_batch_size;
        open_source(&p, dir_of(model), Phase::Train, 0)?
    };
    let batch = source.cursor().batch_size();
    let mut net = Net::build(&def, &BuildOptions { batch: Some(batch), seed: 0 })?;
    net.load_weights(&load_weights(weights)?)
        .with_context(|| weights.display().to_string())?;
    if iterations == 0 {
        return Ok(());
    }
    let (loss, accuracy) = evaluate(&mut net, iterations, || {
        let b = source.next_batch();
        (b.images, b.labels)
    })?;
    println!("loss={loss} accuracy={accuracy}");
    Ok(())
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn millis(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Fills every caller-populated blob: class 0 for label blobs, uniform
/// noise elsewhere.
fn feed_dummy(net: &mut Net, def: &NetDef, seed: u64) -> Result<()> {
    let labels: Vec<&str> = def
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::SoftmaxLoss | LayerKind::HingeLoss | LayerKind::Accuracy))
        .filter_map(|l| l.bottoms.get(1).map(String::as_str))
        .chain(def.layers.iter().filter(|l| l.kind == LayerKind::Data).filter_map(|l| l.tops.get(1).map(String::as_str)))
        .collect();
    let names: Vec<String> = net.input_names().iter().map(|s| s.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let blob = net.input_mut(name)?;
        if labels.contains(&name.as_str()) {
            blob.data_mut().fill(0.0);
        } else {
            Filler::Uniform { min: 0.0, max: 1.0 }.fill(blob, seed.wrapping_add(k as u64))?;
        }
    }
    Ok(())
}

pub fn time(model: &Path, iterations: u64, machine: bool) -> Result<()> {
    let def = load_model(model)?;
    let seed = env_seed()?;
    let mut net = Net::build(&def, &BuildOptions::seed(seed))?;
    feed_dummy(&mut net, &def, seed)?;
    let backward = net.has_loss();
    net.forward()?;
    if backward {
        net.backward()?;
    }

    let layers = net.num_layers();
    let mut fwd = vec![Vec::with_capacity(iterations as usize); layers];
    let mut bwd = vec![Vec::with_capacity(iterations as usize); layers];
    let (mut fwd_total, mut bwd_total) = (Vec::new(), Vec::new());
    for _ in 0..iterations {
        let pass = Instant::now();
        for (i, t) in fwd.iter_mut().enumerate() {
            let start = Instant::now();
            net.forward_layer(i)?;
            t.push(millis(start));
        }
        fwd_total.push(millis(pass));
        if backward {
            let pass = Instant::now();
            net.prepare_backward()?;
            for i in (0..layers).rev() {
                let start = Instant::now();
                net.backward_layer(i)?;
                bwd[i].push(millis(start));
            }
            bwd_total.push(millis(pass));
        }
    }

    let mut out = std::io::stdout().lock();
    let fmt = |v: &[f64]| {
        if v.is_empty() {
            ("-".to_string(), "-".to_string())
        } else {
            let (m, s) = mean_std(v);
            (format!("{m:.4}"), format!("{s:.4}"))
        }
    };
    if !machine {
        writeln!(
            out,
            "{:<16} {:<14} {:>12} {:>10} {:>12} {:>10}",
            "layer", "kind", "forward_ms", "stddev", "backward_ms", "stddev"
        )?;
    }
    for i in 0..layers {
        if net.layer_kind(i) == LayerKind::Data {
            continue;
        }
        let (fm, fs) = fmt(&fwd[i]);
        let (bm, bs) = fmt(&bwd[i]);
        let (name, kind) = (net.layer_name(i), net.layer_kind(i).keyword());
        if machine {
            writeln!(
                out,
                "layer={name} kind={kind} forward_ms={fm} forward_std={fs} backward_ms={bm} backward_std={bs}"
            )?;
        } else {
            writeln!(out, "{name:<16} {kind:<14} {fm:>12} {fs:>10} {bm:>12} {bs:>10}")?;
        }
    }
    let (fm, fs) = fmt(&fwd_total);
    let (bm, bs) = fmt(&bwd_total);
    if machine {
        writeln!(
            out,
            "total forward_ms={fm} forward_std={fs} backward_ms={bm} backward_std={bs} iterations={iterations}"
        )?;
    } else {
        writeln!(out, "{:<16} {:<14} {fm:>12} {fs:>10} {bm:>12} {bs:>10}", "total", "")?;
    }
    Ok(())
}

pub fn extract(model: &Path, weights: &Path, blob: &str, input: &Path, out: &Path) -> Result<()> {
    let def = load_model(model)?;
    let mut net = Net::build(&def, &BuildOptions::seed(env_seed()?))?;
    net.load_weights(&load_weights(weights)?)
        .with_context(|| weights.display().to_string())?;
    net.blob(blob)?;

    let image_name = net
        .input_names()
        .first()
        .map(|s| s.to_string())
        .ok_or_else(|| anyhow!("the model has no inputs to feed"))?;
    let (scale, mean) = match def.inputs.iter().find(|i| i.name == image_name) {
        Some(decl) => (decl.scale as f32, None),
        None => {
            let p = def.data_param().expect("data-layer tops are the only other inputs");
            let mean = match &p.mean_file {
                Some(m) => Some(load_mean(&dir_of(model).join(m))?.1),
                None => None,
            };
            (p.scale as f32, mean)
        }
    };
    let shape = net.blob(&image_name)?.shape();

    let idx = read_idx(input, IDX_IMAGES_MAGIC)?;
    let (count, rows, cols) = match idx.dims[..] {
        [n, r, c] => (n, r, c),
        _ => bail!("{}: expected a 3-dimensional image file", input.display()),
    };
    if (shape.channels, shape.height, shape.width) != (1, rows, cols) {
        bail!(
            "input `{image_name}` takes 1x{}x{} images but {} holds {}x{} ones",
            shape.height,
            shape.width,
            input.display(),
            rows,
            cols
        );
    }
    let names: Vec<String> = net.input_names().iter().map(|s| s.to_string()).collect();
    for name in &names {
        net.input_mut(name)?.data_mut().fill(0.0);
    }

    let batch = shape.num;
    let per_image = rows * cols;
    let feature = net.blob(blob)?.shape();
    if feature.num != batch {
        bail!("blob `{blob}` has {} items per batch of {batch} images; it is not a per-image blob", feature.num);
    }
    let mut entries = Vec::new();
    for (b, start) in (0..count).step_by(batch).enumerate() {
        let k = batch.min(count - start);
        let images = net.input_mut(&image_name)?.data_mut();
        images.fill(0.0);
        for (j, (o, &p)) in images.iter_mut().zip(&idx.bytes[start * per_image..(start + k) * per_image]).enumerate() {
            let m = mean.as_ref().map_or(0.0, |m| m[j % per_image]);
            *o = scale * (p as f32 - m);
        }
        net.forward()?;
        let values = net.blob(blob)?.data()[..k * feature.item_count()].to_vec();
        entries.push(WeightEntry {
            layer: blob.to_string(),
            index: u16::try_from(b).map_err(|_| anyhow!("more than 65536 batches"))?,
            shape: Shape4::new(k, feature.channels, feature.height, feature.width),
            data: values,
        });
    }
    WeightsFile { entries }.save(out)?;
    let header = format!("{count} {} {} {}", feature.channels, feature.height, feature.width);
    let mut shape_path = out.as_os_str().to_owned();
    shape_path.push(".shape");
    std::fs::write(&shape_path, format!("{header}\n"))
        .with_context(|| format!("writing {}", Path::new(&shape_path).display()))?;
    println!("shape: {header}");
    Ok(())
}
