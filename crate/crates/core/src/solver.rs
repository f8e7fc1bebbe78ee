//! Stochastic gradient descent with momentum, learning-rate schedules,
//! periodic testing and snapshots.
//!
//! One iteration zeroes the parameter diffs, runs forward and backward on
//! the next batch, then updates every parameter `w` with gradient `g`:
//!
//! ```text
//! g' = g + weight_decay * w
//! v  = momentum * v - lr * g'
//! w  = w + v
//! ```
//!
//! A snapshot is a weights file followed by a solver section: `MGRNDSLV`,
//! version u32, iteration u64, momentum blob count u32 and per blob four u32
//! dims plus f32 values, then the data cursor (seed, epoch, position as u64).
//! Restoring one and training on is bit-identical to never having stopped.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{open_source, BatchSource, CursorState, Phase, Prefetcher};
use crate::net::{BuildOptions, Net, Reader, WeightsFile, SOLVER_MAGIC};
use crate::netdef::{load_netdef, NetDef, SolverDef};
use crate::tensor::Shape4;
use crate::{Error, Result};

pub const SOLVER_VERSION: u32 = 1;
/// Batches the producer thread may run ahead.
pub const PREFETCH_CAPACITY: usize = 4;

/// Applies one heavy-ball update to a parameter vector.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + weight_decay * *w;
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}

/// The solver part of a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub iter: u64,
    /// One buffer per parameter blob, in parameter order.
    pub momentum: Vec<(Shape4, Vec<f32>)>,
    pub data_seed: u64,
    pub cursor: CursorState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub weights: WeightsFile,
    pub state: SolverState,
}

impl Snapshot {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = self.weights.encode()?;
        let s = &self.state;
        out.extend_from_slice(SOLVER_MAGIC);
        out.extend_from_slice(&SOLVER_VERSION.to_le_bytes());
        out.extend_from_slice(&s.iter.to_le_bytes());
        let n = u32::try_from(s.momentum.len()).map_err(|_| Error::Format("too many momentum blobs".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        for (shape, values) in &s.momentum {
            for d in shape.dims() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&s.data_seed.to_le_bytes());
        out.extend_from_slice(&s.cursor.epoch.to_le_bytes());
        out.extend_from_slice(&s.cursor.position.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Snapshot> {
        let (weights, used) = WeightsFile::decode_prefix(bytes)?;
        let mut r = Reader { bytes, at: used };
        if r.bytes.len() == used {
            return Err(Error::Format("weights file has no solver section".into()));
        }
        if r.take(8, "solver magic")? != SOLVER_MAGIC {
            return Err(Error::Format("bad solver section magic".into()));
        }
        let version = r.u32("solver version")?;
        if version != SOLVER_VERSION {
            return Err(Error::Format(format!(
                "unsupported solver section version {version} (expected {SOLVER_VERSION})"
            )));
        }
        let iter = r.u64("iteration")?;
        let n = r.u32("momentum count")?;
        let mut momentum = Vec::new();
        for k in 0..n {
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("momentum shape")? as usize;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
            let count = shape
                .checked_count()
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("momentum blob {k} shape {shape} overflows")))?;
            let raw = r.take(count, "momentum values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            momentum.push((shape, values));
        }
        let data_seed = r.u64("data seed")?;
        let cursor = CursorState {
            epoch: r.u64("cursor epoch")?,
            position: r.u64("cursor position")?,
        };
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the solver section", bytes.len() - r.at)));
        }
        Ok(Snapshot {
            weights,
            state: SolverState {
                iter,
                momentum,
                data_seed,
                cursor,
            },
        })
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Snapshot::decode(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

enum Feed {
    Sync(BatchSource),
    Prefetch { source: BatchSource, queue: Option<Prefetcher> },
}

impl Feed {
    fn next(&mut self) -> Result<(Vec<f32>, Vec<f32>, CursorState)> {
        match self {
            Feed::Sync(s) => {
                let b = s.next_batch();
                Ok((b.images, b.labels, b.after))
            }
            Feed::Prefetch { source, queue } => {
                if queue.is_none() {
                    *queue = Some(Prefetcher::spawn(source.clone(), PREFETCH_CAPACITY)?);
                }
                let b = queue.as_mut().expect("spawned above").next_batch()?;
                Ok((b.images, b.labels, b.after))
            }
        }
    }

    /// Repositions the stream; a running producer is discarded.
    fn restore(&mut self, state: CursorState) -> Result<()> {
        match self {
            Feed::Sync(s) => s.cursor_mut().restore(state),
            Feed::Prefetch { source, queue } => {
                *queue = None;
                source.cursor_mut().restore(state)
            }
        }
    }
}

/// Where a solver's batches come from.
pub struct Sources {
    pub train: BatchSource,
    pub test: Option<BatchSource>,
    /// Produce training batches on a background thread.
    pub prefetch: bool,
}

pub struct Solver {
    def: SolverDef,
    net: Net,
    test_net: Option<Net>,
    momentum: Vec<Vec<f32>>,
    iter: u64,
    train: Feed,
    test: Option<BatchSource>,
    data_seed: u64,
    cursor: CursorState,
    snapshot_dir: PathBuf,
    log: Option<Box<dyn Write + Send>>,
    snapshots: Vec<PathBuf>,
}

impl Solver {
    /// Loads the solver file, its net and the data the net's data layer
    /// names. `seed` replaces the file's seed when given.
    pub fn from_file(path: &Path, seed: Option<u64>) -> Result<Solver> {
        let mut def = SolverDef::load(path)?;
        if let Some(s) = seed {
            def.seed = s;
        }
        let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let net_path = dir.join(&def.net_path);
        let netdef = load_netdef(&net_path)?;
        let net_dir = net_path.parent().unwrap_or(Path::new("")).to_path_buf();
        let param = netdef
            .data_param()
            .ok_or_else(|| Error::Config("the training net needs a data layer".into()))?;
        let train = open_source(param, &net_dir, Phase::Train, def.seed)?;
        let test = match (&param.test_source, def.test_interval) {
            (Some(_), 1..) => Some(open_source(param, &net_dir, Phase::Test, def.seed)?),
            _ => None,
        };
        Solver::new(
            def,
            &netdef,
            Sources {
                train,
                test,
                prefetch: true,
            },
            dir,
        )
    }

    /// `snapshot_dir` anchors a relative `snapshot_prefix`.
    pub fn new(def: SolverDef, netdef: &NetDef, sources: Sources, snapshot_dir: PathBuf) -> Result<Solver> {
        let net = Net::build(netdef, &BuildOptions::seed(def.seed))?;
        if !net.has_loss() {
            return Err(Error::Config("the training net has no loss layer".into()));
        }
        check_source(&net, &sources.train)?;
        let test_net = match &sources.test {
            Some(t) => {
                let n = Net::build(
                    netdef,
                    &BuildOptions {
                        batch: Some(t.cursor().batch_size()),
                        seed: def.seed,
                    },
                )?;
                check_source(&n, t)?;
                Some(n)
            }
            None => None,
        };
        let momentum = net.params().iter().map(|p| vec![0.0; p.count()]).collect();
        let cursor = sources.train.cursor().state();
        let data_seed = def.seed;
        let train = if sources.prefetch {
            Feed::Prefetch {
                source: sources.train,
                queue: None,
            }
        } else {
            Feed::Sync(sources.train)
        };
        Ok(Solver {
            def,
            net,
            test_net,
            momentum,
            iter: 0,
            train,
            test: sources.test,
            data_seed,
            cursor,
            snapshot_dir,
            log: None,
            snapshots: Vec::new(),
        })
    }

    /// Sends progress lines to `sink`.
    pub fn set_log(&mut self, sink: Box<dyn Write + Send>) {
        self.log = Some(sink);
    }

    pub fn def(&self) -> &SolverDef {
        &self.def
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Net {
        &mut self.net
    }

    /// Snapshot files written so far, oldest first.
    pub fn snapshots(&self) -> &[PathBuf] {
        &self.snapshots
    }

    fn log(&mut self, line: &str) -> Result<()> {
        if let Some(w) = &mut self.log {
            writeln!(w, "{line}").map_err(|e| Error::io("writing the log", e))?;
            w.flush().map_err(|e| Error::io("writing the log", e))?;
        }
        Ok(())
    }

    /// One SGD iteration on the next batch, without logging, testing or
    /// snapshotting. Returns the batch loss.
    pub fn sgd_step(&mut self) -> Result<f32> {
        let (images, labels, after) = self.train.next()?;
        self.net.feed_data(&images, &labels)?;
        self.cursor = after;
        self.net.zero_param_diffs();
        let loss = self.net.forward()?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iter: self.iter, loss });
        }
        self.net.backward()?;
        let lr = self.def.lr_at(self.iter) as f32;
        let (mu, wd) = (self.def.momentum as f32, self.def.weight_decay as f32);
        for (p, v) in self.net.params_mut().into_iter().zip(&mut self.momentum) {
            let (w, g) = p.data_mut_and_diff();
            sgd_update(w, g, v, lr, mu, wd);
        }
        self.iter += 1;
        Ok(loss)
    }

    /// Runs `k` iterations with the same logging, testing and snapshot
    /// cadence as [`Solver::train`]. Returns each iteration's loss.
    pub fn step(&mut self, k: u64) -> Result<Vec<f32>> {
        let mut losses = Vec::with_capacity(k as usize);
        for _ in 0..k {
            let it = self.iter;
            if self.def.test_interval > 0 && it % self.def.test_interval == 0 {
                self.test_and_log()?;
            }
            let loss = self.sgd_step()?;
            losses.push(loss);
            if self.def.display > 0 && it % self.def.display == 0 {
                let line = format!("I{it} lr={} loss={loss}", self.def.lr_at(it));
                self.log(&line)?;
            }
            if let Some(si) = self.def.snapshot_interval {
                if self.iter % si == 0 && self.iter < self.def.max_iter {
                    self.snapshot()?;
                }
            }
        }
        Ok(losses)
    }

    /// Trains until `max_iter`, then tests and writes the final snapshot.
    pub fn train(&mut self) -> Result<PathBuf> {
        if self.iter < self.def.max_iter {
            self.step(self.def.max_iter - self.iter)?;
            if self.def.test_interval > 0 {
                self.test_and_log()?;
            }
        }
        self.snapshot()
    }

    fn test_and_log(&mut self) -> Result<()> {
        if let Some((loss, acc)) = self.test()? {
            let line = format!("I{} test loss={loss} accuracy={acc}", self.iter);
            self.log(&line)?;
        }
        Ok(())
    }

    /// Mean loss and accuracy of the current parameters over `test_iter`
    /// batches from the start of the test set, or `None` without test data.
    pub fn test(&mut self) -> Result<Option<(f64, f64)>> {
        let (Some(net), Some(source)) = (&mut self.test_net, &mut self.test) else {
            return Ok(None);
        };
        for (d, s) in net.params_mut().into_iter().zip(self.net.params()) {
            d.data_mut().copy_from_slice(s.data());
        }
        source.cursor_mut().restore(CursorState::default())?;
        evaluate(net, self.def.test_iter, || {
            let b = source.next_batch();
            (b.images, b.labels)
        })
        .map(Some)
    }

    pub fn state(&self) -> SolverState {
        SolverState {
            iter: self.iter,
            momentum: self
                .net
                .params()
                .iter()
                .zip(&self.momentum)
                .map(|(p, v)| (p.shape(), v.clone()))
                .collect(),
            data_seed: self.data_seed,
            cursor: self.cursor,
        }
    }

    pub fn to_snapshot(&self) -> Snapshot {
        Snapshot {
            weights: self.net.weights(),
            state: self.state(),
        }
    }

    pub fn snapshot_path(&self, iter: u64) -> PathBuf {
        self.snapshot_dir
            .join(format!("{}_iter_{iter}.snapshot", self.def.snapshot_prefix))
    }

    /// Writes `<prefix>_iter_<n>.snapshot` and logs its file name.
    pub fn snapshot(&mut self) -> Result<PathBuf> {
        let path = self.snapshot_path(self.iter);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
            }
        }
        self.to_snapshot().save(&path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.log(&format!("I{} snapshot {name}", self.iter))?;
        self.snapshots.push(path.clone());
        Ok(path)
    }

    /// Continues from a snapshot: weights, momentum, iteration and data
    /// position. On error the solver is unchanged.
    pub fn restore(&mut self, snap: &Snapshot) -> Result<()> {
        let s = &snap.state;
        if s.data_seed != self.data_seed {
            return Err(Error::State(format!(
                "snapshot was taken with data seed {}, this solver uses {}",
                s.data_seed, self.data_seed
            )));
        }
        let ids = self.net.param_ids();
        if s.momentum.len() != ids.len() {
            return Err(Error::State(format!(
                "snapshot has {} momentum blobs, the net has {} parameters",
                s.momentum.len(),
                ids.len()
            )));
        }
        for ((shape, values), (p, (layer, k))) in s.momentum.iter().zip(self.net.params().iter().zip(&ids)) {
            if *shape != p.shape() || values.len() != p.count() {
                return Err(Error::layer(
                    *layer,
                    format!("momentum {k} has shape {shape}, the parameter has {}", p.shape()),
                ));
            }
        }
        let mut probe = self.train_source().cursor().clone();
        probe.restore(s.cursor)?;
        self.net.load_weights(&snap.weights)?;
        self.momentum = s.momentum.iter().map(|(_, v)| v.clone()).collect();
        self.iter = s.iter;
        self.cursor = s.cursor;
        self.train.restore(s.cursor)
    }

    fn train_source(&self) -> &BatchSource {
        match &self.train {
            Feed::Sync(s) => s,
            Feed::Prefetch { source, .. } => source,
        }
    }
}

fn check_source(net: &Net, source: &BatchSource) -> Result<()> {
    let (images, _) = net
        .data_shapes()
        .ok_or_else(|| Error::Config("the net has no data layer to feed".into()))?;
    if images != source.batch_shape() {
        return Err(Error::Config(format!(
            "data layer produces {images} but the source yields {}",
            source.batch_shape()
        )));
    }
    Ok(())
}

/// Mean loss and accuracy over `batches` forward passes of `net`, feeding
/// each from `next`. Parameters are not touched.
pub fn evaluate(
    net: &mut Net,
    batches: u64,
    mut next: impl FnMut() -> (Vec<f32>, Vec<f32>),
) -> Result<(f64, f64)> {
    if batches == 0 {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut correct, mut seen) = (0.0, 0u64, 0u64);
    for _ in 0..batches {
        let (images, labels) = next();
        net.feed_data(&images, &labels)?;
        loss += net.forward()? as f64;
        let acc = net
            .accuracy()
            .ok_or_else(|| Error::Config("the net has no scores to measure accuracy on".into()))??;
        correct += (acc * labels.len() as f64).round() as u64;
        seen += labels.len() as u64;
    }
    Ok((loss / batches as f64, correct as f64 / seen as f64))
}

#[cfg(test)]
mod tests;
