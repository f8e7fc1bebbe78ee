//! Central finite-difference gradient checking.
//!
//! The checked objective is `sum_t <top_t, r_t>` for fixed random projections
//! `r_t`, so that every top element contributes. A coordinate is compared only
//! when nudging it by `±step` keeps every non-smooth branch decision (ReLU
//! masks, max selections, active hinge margins) unchanged; see
//! [`Layer::fingerprint`].

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{Backend, Mode};
use crate::layers::Layer;
use crate::net::Net;
use crate::tensor::{Blob, Filler, Shape4};
use crate::{Real, Result};

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub step: f64,
    pub seed: u64,
    /// Random inputs closer than this to zero are pushed away from it, so
    /// kinks at the origin (ReLU) are not straddled.
    pub kink_margin: f64,
    /// When set, bottom 1 holds integral labels in `[0, classes)` and is not
    /// differentiated.
    pub label_classes: Option<usize>,
    /// Coordinates sampled per blob; larger blobs are subsampled.
    pub max_coords: usize,
}

impl Default for LayerCheck {
    fn default() -> Self {
        LayerCheck {
            step: 1e-3,
            seed: 1701,
            kink_margin: 0.0,
            label_classes: None,
            max_coords: 10_000,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: usize,
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` seen.
    pub worst: f64,
    pub worst_at: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.worst < threshold
    }

    pub(crate) fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.worst || self.checked == 1 {
            self.worst = err;
            self.worst_at = at();
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked {} skipped {} worst {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
            self.checked, self.skipped, self.worst, self.worst_at, self.worst_analytic, self.worst_numeric
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Indices to check in a blob of `count` elements.
pub(crate) fn coordinates(count: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if count <= max {
        (0..count).collect()
    } else {
        let mut idx = sample(rng, count, max).into_vec();
        idx.sort_unstable();
        idx
    }
}

pub(crate) fn push_from_zero<T: Real>(values: &mut [T], margin: f64) {
    if margin <= 0.0 {
        return;
    }
    for v in values {
        let x = v.to_f64();
        if x.abs() < margin {
            *v = T::from_f64(if x < 0.0 { x - margin } else { x + margin });
        }
    }
}

enum Coord {
    Bottom(usize, usize),
    Param(usize, usize),
}

struct Probe<'a, T: Real> {
    layer: &'a mut dyn Layer<T>,
    backend: &'static dyn Backend<T>,
    bottoms: Vec<Blob<T>>,
    tops: Vec<Blob<T>>,
    projections: Vec<Vec<T>>,
}

impl<T: Real> Probe<'_, T> {
    fn objective(&mut self) -> Result<(f64, u64)> {
        let bottoms: Vec<&Blob<T>> = self.bottoms.iter().collect();
        let mut tops: Vec<&mut Blob<T>> = self.tops.iter_mut().collect();
        self.layer.forward(self.backend, &bottoms, &mut tops)?;
        let mut value = 0.0;
        for (top, r) in self.tops.iter().zip(&self.projections) {
            value += top.data().iter().zip(r).map(|(&a, &b)| a.to_f64() * b.to_f64()).sum::<f64>();
        }
        let mut h = DefaultHasher::new();
        self.layer.fingerprint(&mut h);
        Ok((value, h.finish()))
    }

    fn slot(&mut self, c: &Coord) -> &mut T {
        match *c {
            Coord::Bottom(b, i) => &mut self.bottoms[b].data_mut()[i],
            Coord::Param(p, i) => &mut self.layer.params_mut()[p].data_mut()[i],
        }
    }

    /// Central difference at `c`, or `None` if either side crosses a kink.
    fn numeric(&mut self, c: &Coord, step: f64, base_fp: u64) -> Result<Option<f64>> {
        let orig = *self.slot(c);
        *self.slot(c) = T::from_f64(orig.to_f64() + step);
        let plus = self.objective();
        *self.slot(c) = T::from_f64(orig.to_f64() - step);
        let minus = self.objective();
        *self.slot(c) = orig;
        let ((lp, fp), (lm, fm)) = (plus?, minus?);
        if fp != base_fp || fm != base_fp {
            return Ok(None);
        }
        Ok(Some((lp - lm) / (2.0 * step)))
    }
}

/// Checks the analytic gradients of `layer` for every bottom (except labels)
/// and every parameter on random inputs of the given shapes.
pub fn check_layer<T: Real>(
    layer: &mut dyn Layer<T>,
    bottom_shapes: &[Shape4],
    check: &LayerCheck,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let top_shapes = layer.setup(bottom_shapes)?;
    let label_slot = check.label_classes.map(|_| 1usize);

    let mut bottoms = Vec::with_capacity(bottom_shapes.len());
    for (i, &shape) in bottom_shapes.iter().enumerate() {
        let mut blob = Blob::new(shape)?;
        if Some(i) == label_slot {
            let classes = check.label_classes.unwrap_or(1);
            for v in blob.data_mut() {
                *v = T::from_f64(rng.random_range(0..classes) as f64);
            }
        } else {
            Filler::Gaussian { mean: 0.0, std: 1.0 }.fill(&mut blob, rng.random())?;
            push_from_zero(blob.data_mut(), check.kink_margin);
        }
        bottoms.push(blob);
    }
    let tops = top_shapes.iter().map(|&s| Blob::new(s)).collect::<Result<Vec<_>>>()?;
    let mut projections = Vec::with_capacity(tops.len());
    for &shape in &top_shapes {
        let mut r = Blob::<T>::new(shape)?;
        Filler::Gaussian { mean: 0.0, std: 1.0 }.fill(&mut r, rng.random())?;
        projections.push(r.data().to_vec());
    }

    let mut probe = Probe {
        layer,
        backend: Mode::Cpu.backend(),
        bottoms,
        tops,
        projections,
    };
    let (_, base_fp) = probe.objective()?;

    for (top, r) in probe.tops.iter_mut().zip(&probe.projections) {
        top.diff_mut().copy_from_slice(r);
    }
    for b in &mut probe.bottoms {
        b.zero_diff();
    }
    for p in probe.layer.params_mut() {
        p.zero_diff();
    }
    let propagate: Vec<bool> = (0..probe.bottoms.len()).map(|i| Some(i) != label_slot).collect();
    {
        let tops: Vec<&Blob<T>> = probe.tops.iter().collect();
        let mut bottoms: Vec<&mut Blob<T>> = probe.bottoms.iter_mut().collect();
        probe.layer.backward(probe.backend, &tops, &propagate, &mut bottoms)?;
    }

    let mut coords = Vec::new();
    for (b, blob) in probe.bottoms.iter().enumerate() {
        if propagate[b] {
            for i in coordinates(blob.count(), check.max_coords, &mut rng) {
                coords.push((Coord::Bottom(b, i), blob.diff()[i].to_f64()));
            }
        }
    }
    for (p, blob) in probe.layer.params().iter().enumerate() {
        for i in coordinates(blob.count(), check.max_coords, &mut rng) {
            coords.push((Coord::Param(p, i), blob.diff()[i].to_f64()));
        }
    }

    let mut report = GradReport::default();
    for (c, analytic) in coords {
        match probe.numeric(&c, check.step, base_fp)? {
            Some(numeric) => report.record(
                || match c {
                    Coord::Bottom(b, i) => format!("bottom {b} [{i}]"),
                    Coord::Param(p, i) => format!("param {p} [{i}]"),
                },
                analytic,
                numeric,
            ),
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

/// Checks every parameter gradient of a net with a loss against central
/// differences of the loss itself. Inputs must already be populated.
pub fn check_net<T: Real>(net: &mut Net<T>, check: &LayerCheck) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let fingerprint = |net: &Net<T>| {
        let mut h = DefaultHasher::new();
        net.fingerprint(&mut h);
        h.finish()
    };
    net.forward()?;
    let base_fp = fingerprint(net);
    net.zero_param_diffs();
    net.backward()?;

    let ids: Vec<(String, usize)> = net.param_ids().into_iter().map(|(l, k)| (l.to_string(), k)).collect();
    let mut coords = Vec::new();
    for (p, blob) in net.params().iter().enumerate() {
        for i in coordinates(blob.count(), check.max_coords, &mut rng) {
            coords.push((p, i, blob.diff()[i].to_f64()));
        }
    }

    let mut report = GradReport::default();
    let step = check.step;
    for (p, i, analytic) in coords {
        let orig = net.params()[p].data()[i];
        let side = |net: &mut Net<T>, delta: f64| -> Result<(f64, u64)> {
            net.params_mut()[p].data_mut()[i] = T::from_f64(orig.to_f64() + delta);
            let loss = net.forward()?.to_f64();
            Ok((loss, fingerprint(net)))
        };
        let plus = side(net, step);
        let minus = side(net, -step);
        net.params_mut()[p].data_mut()[i] = orig;
        let ((lp, fp), (lm, fm)) = (plus?, minus?);
        if fp != base_fp || fm != base_fp {
            report.skipped += 1;
            continue;
        }
        let (layer, k) = &ids[p];
        report.record(|| format!("{layer} param {k} [{i}]"), analytic, (lp - lm) / (2.0 * step));
    }
    net.forward()?;
    Ok(report)
}
