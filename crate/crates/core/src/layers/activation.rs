use std::hash::Hasher;

use crate::backend::Backend;
use crate::layers::{expect_bottoms, Layer, LayerKind};
use crate::tensor::{Blob, Shape4};
use crate::{Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    ReLU,
    Sigmoid,
}

/// Elementwise nonlinearity. ReLU keeps the sign mask of its input so that
/// it can run in place; sigmoid differentiates through its own output.
pub struct Activation {
    kind: ActivationKind,
    mask: Vec<bool>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation {
            kind,
            mask: Vec::new(),
        }
    }

    fn apply<T: Real>(&mut self, input: &[T], output: &mut [T]) {
        match self.kind {
            ActivationKind::ReLU => {
                for ((o, &x), m) in output.iter_mut().zip(input).zip(self.mask.iter_mut()) {
                    *m = x > T::zero();
                    *o = if *m { x } else { T::zero() };
                }
            }
            ActivationKind::Sigmoid => {
                for (o, &x) in output.iter_mut().zip(input) {
                    *o = T::one() / (T::one() + (-x).exp());
                }
            }
        }
    }

    /// Local derivative at element `i` given the forward output `out`.
    #[inline]
    fn derivative<T: Real>(&self, i: usize, out: T) -> T {
        match self.kind {
            ActivationKind::ReLU => {
                if self.mask[i] {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Sigmoid => out * (T::one() - out),
        }
    }
}

impl<T: Real> Layer<T> for Activation {
    fn kind(&self) -> LayerKind {
        match self.kind {
            ActivationKind::ReLU => LayerKind::ReLU,
            ActivationKind::Sigmoid => LayerKind::Sigmoid,
        }
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        expect_bottoms(<Self as Layer<T>>::kind(self), bottoms, 1)?;
        if self.kind == ActivationKind::ReLU {
            self.mask = vec![false; bottoms[0].count()];
        }
        Ok(vec![bottoms[0]])
    }

    fn forward(
        &mut self,
        _backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        self.apply(bottoms[0].data(), tops[0].data_mut());
        Ok(())
    }

    fn backward(
        &mut self,
        _backend: &dyn Backend<T>,
        tops: &[&Blob<T>],
        propagate_down: &[bool],
        bottoms: &mut [&mut Blob<T>],
    ) -> Result<()> {
        if !propagate_down.first().copied().unwrap_or(false) {
            return Ok(());
        }
        let (out, top_diff) = (tops[0].data(), tops[0].diff());
        for (i, d) in bottoms[0].diff_mut().iter_mut().enumerate() {
            *d += top_diff[i] * self.derivative(i, out[i]);
        }
        Ok(())
    }

    fn forward_in_place(&mut self, _backend: &dyn Backend<T>, blob: &mut Blob<T>) -> Result<()> {
        let data = blob.data_mut();
        match self.kind {
            ActivationKind::ReLU => {
                for (x, m) in data.iter_mut().zip(self.mask.iter_mut()) {
                    *m = *x > T::zero();
                    if !*m {
                        *x = T::zero();
                    }
                }
            }
            ActivationKind::Sigmoid => {
                for x in data.iter_mut() {
                    *x = T::one() / (T::one() + (-*x).exp());
                }
            }
        }
        Ok(())
    }

    fn backward_in_place(&mut self, _backend: &dyn Backend<T>, blob: &mut Blob<T>) -> Result<()> {
        let (out, diff) = blob.data_and_diff_mut();
        for (i, d) in diff.iter_mut().enumerate() {
            *d *= self.derivative(i, out[i]);
        }
        Ok(())
    }

    fn fingerprint(&self, state: &mut dyn Hasher) {
        for &m in &self.mask {
            state.write_u8(m as u8);
        }
    }
}
