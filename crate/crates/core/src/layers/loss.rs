use std::hash::Hasher;

use crate::backend::Backend;
use crate::layers::{class_of, Layer, LayerKind};
use crate::tensor::{alloc_zeroed, Blob, Shape4};
use crate::{Error, Real, Result};

/// Shared bottom validation for layers taking `(scores, labels)`. Scores are
/// viewed as `(num, classes)`; labels hold one class id per item.
fn score_label_shapes(kind: LayerKind, bottoms: &[Shape4]) -> Result<(usize, usize)> {
    if bottoms.len() != 2 {
        return Err(Error::Shape(format!(
            "{kind} expects scores and labels, got {} bottom(s)",
            bottoms.len()
        )));
    }
    let (scores, labels) = (bottoms[0], bottoms[1]);
    if labels.count() != scores.num || labels.num != scores.num {
        return Err(Error::Shape(format!(
            "{kind}: labels {labels} do not hold one id per item of scores {scores}"
        )));
    }
    let classes = scores.item_count();
    if classes == 0 {
        return Err(Error::Shape(format!("{kind}: scores {scores} have no classes")));
    }
    Ok((scores.num, classes))
}

/// Index of the largest score, lowest index on ties.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `scores` (viewed `(num, classes)`) whose arg-max
/// equals the label.
pub fn accuracy<T: Real>(scores: &Blob<T>, labels: &Blob<T>) -> Result<f64> {
    let (num, classes) = score_label_shapes(LayerKind::Accuracy, &[scores.shape(), labels.shape()])?;
    let mut correct = 0usize;
    for (row, &label) in scores.data().chunks_exact(classes).zip(labels.data()) {
        if argmax(row) == class_of(label, classes)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / num as f64)
}

/// Multinomial logistic loss of the softmax of the scores, averaged over the
/// batch.
pub struct SoftmaxLoss<T: Real> {
    num: usize,
    classes: usize,
    prob: Vec<T>,
}

impl<T: Real> SoftmaxLoss<T> {
    pub fn new() -> Self {
        SoftmaxLoss {
            num: 0,
            classes: 0,
            prob: Vec::new(),
        }
    }

    /// Class probabilities from the last forward pass.
    pub fn probabilities(&self) -> &[T] {
        &self.prob
    }
}

impl<T: Real> Default for SoftmaxLoss<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Layer<T> for SoftmaxLoss<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::SoftmaxLoss
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        let (num, classes) = score_label_shapes(LayerKind::SoftmaxLoss, bottoms)?;
        self.num = num;
        self.classes = classes;
        self.prob = alloc_zeroed(num * classes);
        Ok(vec![Shape4::new(1, 1, 1, 1)])
    }

    fn forward(
        &mut self,
        _backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let k = self.classes;
        let labels = bottoms[1].data();
        let mut loss = T::zero();
        for ((row, prob), &label) in bottoms[0]
            .data()
            .chunks_exact(k)
            .zip(self.prob.chunks_exact_mut(k))
            .zip(labels)
        {
            let y = class_of(label, k)?;
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &x) in prob.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in prob.iter_mut() {
                *p /= sum;
            }
            // -log softmax via log-sum-exp, so tiny probabilities do not underflow.
            loss += max + sum.ln() - row[y];
        }
        tops[0].data_mut()[0] = loss / T::from_f64(self.num as f64);
        Ok(())
    }

    fn backward(
        &mut self,
        _backend: &dyn Backend<T>,
        tops: &[&Blob<T>],
        propagate_down: &[bool],
        bottoms: &mut [&mut Blob<T>],
    ) -> Result<()> {
        if propagate_down.get(1).copied().unwrap_or(false) {
            return Err(Error::State("softmax_loss cannot propagate into labels".into()));
        }
        if !propagate_down.first().copied().unwrap_or(false) {
            return Ok(());
        }
        let k = self.classes;
        let scale = tops[0].diff()[0] / T::from_f64(self.num as f64);
        let (scores, labels) = bottoms.split_at_mut(1);
        let labels = labels[0].data();
        for ((diff, prob), &label) in scores[0]
            .diff_mut()
            .chunks_exact_mut(k)
            .zip(self.prob.chunks_exact(k))
            .zip(labels)
        {
            let y = class_of(label, k)?;
            for (c, (d, &p)) in diff.iter_mut().zip(prob).enumerate() {
                let target = if c == y { T::one() } else { T::zero() };
                *d += scale * (p - target);
            }
        }
        Ok(())
    }
}

/// One-vs-all L1 hinge loss: for each item and class, `max(0, 1 - s*x)` where
/// `s` is +1 for the true class and -1 otherwise, summed over classes and
/// averaged over the batch.
pub struct HingeLoss {
    num: usize,
    classes: usize,
    active: Vec<bool>,
}

impl HingeLoss {
    pub fn new() -> Self {
        HingeLoss {
            num: 0,
            classes: 0,
            active: Vec::new(),
        }
    }
}

impl Default for HingeLoss {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Layer<T> for HingeLoss {
    fn kind(&self) -> LayerKind {
        LayerKind::HingeLoss
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        let (num, classes) = score_label_shapes(LayerKind::HingeLoss, bottoms)?;
        self.num = num;
        self.classes = classes;
        self.active = vec![false; num * classes];
        Ok(vec![Shape4::new(1, 1, 1, 1)])
    }

    fn forward(
        &mut self,
        _backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let k = self.classes;
        let mut loss = T::zero();
        for (n, (row, &label)) in bottoms[0].data().chunks_exact(k).zip(bottoms[1].data()).enumerate() {
            let y = class_of(label, k)?;
            for (c, &x) in row.iter().enumerate() {
                let margin = if c == y { T::one() - x } else { T::one() + x };
                self.active[n * k + c] = margin > T::zero();
                if margin > T::zero() {
                    loss += margin;
                }
            }
        }
        tops[0].data_mut()[0] = loss / T::from_f64(self.num as f64);
        Ok(())
    }

    fn backward(
        &mut self,
        _backend: &dyn Backend<T>,
        tops: &[&Blob<T>],
        propagate_down: &[bool],
        bottoms: &mut [&mut Blob<T>],
    ) -> Result<()> {
        if propagate_down.get(1).copied().unwrap_or(false) {
            return Err(Error::State("hinge_loss cannot propagate into labels".into()));
        }
        if !propagate_down.first().copied().unwrap_or(false) {
            return Ok(());
        }
        let k = self.classes;
        let scale = tops[0].diff()[0] / T::from_f64(self.num as f64);
        let (scores, labels) = bottoms.split_at_mut(1);
        let labels = labels[0].data();
        for (n, (diff, &label)) in scores[0].diff_mut().chunks_exact_mut(k).zip(labels).enumerate() {
            let y = class_of(label, k)?;
            for (c, d) in diff.iter_mut().enumerate() {
                if self.active[n * k + c] {
                    *d += if c == y { -scale } else { scale };
                }
            }
        }
        Ok(())
    }

    fn fingerprint(&self, state: &mut dyn Hasher) {
        for &a in &self.active {
            state.write_u8(a as u8);
        }
    }
}

/// Classification accuracy as a layer. Has no gradient.
pub struct Accuracy;

impl Accuracy {
    pub fn new() -> Self {
        Accuracy
    }
}

impl Default for Accuracy {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Layer<T> for Accuracy {
    fn kind(&self) -> LayerKind {
        LayerKind::Accuracy
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        score_label_shapes(LayerKind::Accuracy, bottoms)?;
        Ok(vec![Shape4::new(1, 1, 1, 1)])
    }

    fn forward(
        &mut self,
        _backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        tops[0].data_mut()[0] = T::from_f64(accuracy(bottoms[0], bottoms[1])?);
        Ok(())
    }

    fn backward(
        &mut self,
        _backend: &dyn Backend<T>,
        _tops: &[&Blob<T>],
        _propagate_down: &[bool],
        _bottoms: &mut [&mut Blob<T>],
    ) -> Result<()> {
        Ok(())
    }
}
