use std::hash::Hasher;

use crate::backend::Backend;
use crate::layers::{EltwiseOp, EltwiseParam, Layer, LayerKind};
use crate::tensor::{Blob, Shape4};
use crate::{Error, Real, Result};

/// Combines two or more equally shaped bottoms elementwise.
pub struct Eltwise {
    param: EltwiseParam,
    inputs: usize,
    /// For `max`: which bottom won at each element (lowest index on ties).
    argmax: Vec<u32>,
}

impl Eltwise {
    pub fn new(param: EltwiseParam) -> Self {
        Eltwise {
            param,
            inputs: 0,
            argmax: Vec::new(),
        }
    }

    fn coeff<T: Real>(&self, i: usize) -> T {
        self.param.coeffs.get(i).map_or(T::one(), |&c| T::from_f64(c))
    }
}

impl<T: Real> Layer<T> for Eltwise {
    fn kind(&self) -> LayerKind {
        LayerKind::Eltwise
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        if bottoms.len() < 2 {
            return Err(Error::Shape(format!("eltwise expects at least 2 bottoms, got {}", bottoms.len())));
        }
        if let Some(bad) = bottoms.iter().find(|s| **s != bottoms[0]) {
            return Err(Error::Shape(format!("eltwise bottoms differ: {} vs {bad}", bottoms[0])));
        }
        if !self.param.coeffs.is_empty() {
            if self.param.op != EltwiseOp::Sum {
                return Err(Error::Config("eltwise coefficients only apply to sum".into()));
            }
            if self.param.coeffs.len() != bottoms.len() {
                return Err(Error::Config(format!(
                    "eltwise has {} coefficients for {} bottoms",
                    self.param.coeffs.len(),
                    bottoms.len()
                )));
            }
        }
        self.inputs = bottoms.len();
        if self.param.op == EltwiseOp::Max {
            self.argmax = vec![0; bottoms[0].count()];
        }
        Ok(vec![bottoms[0]])
    }

    fn forward(
        &mut self,
        _backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let out = tops[0].data_mut();
        match self.param.op {
            EltwiseOp::Sum => {
                out.fill(T::zero());
                for (b, bottom) in bottoms.iter().enumerate() {
                    let c: T = self.coeff(b);
                    for (o, &x) in out.iter_mut().zip(bottom.data()) {
                        *o += c * x;
                    }
                }
            }
            EltwiseOp::Product => {
                out.copy_from_slice(bottoms[0].data());
                for bottom in &bottoms[1..] {
                    for (o, &x) in out.iter_mut().zip(bottom.data()) {
                        *o *= x;
                    }
                }
            }
            EltwiseOp::Max => {
                out.copy_from_slice(bottoms[0].data());
                self.argmax.fill(0);
                for (b, bottom) in bottoms.iter().enumerate().skip(1) {
                    for (i, &x) in bottom.data().iter().enumerate() {
                        if x > out[i] {
                            out[i] = x;
                            self.argmax[i] = b as u32;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backward(
        &mut self,
        _backend: &dyn Backend<T>,
        tops: &[&Blob<T>],
        propagate_down: &[bool],
        bottoms: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let top_diff = tops[0].diff();
        for b in 0..self.inputs {
            if !propagate_down.get(b).copied().unwrap_or(false) {
                continue;
            }
            match self.param.op {
                EltwiseOp::Sum => {
                    let c: T = self.coeff(b);
                    for (d, &t) in bottoms[b].diff_mut().iter_mut().zip(top_diff) {
                        *d += c * t;
                    }
                }
                EltwiseOp::Product => {
                    // Product of the other bottoms, recomputed so zeros are safe.
                    for i in 0..top_diff.len() {
                        let mut others = T::one();
                        for (j, other) in bottoms.iter().enumerate() {
                            if j != b {
                                others *= other.data()[i];
                            }
                        }
                        bottoms[b].diff_mut()[i] += top_diff[i] * others;
                    }
                }
                EltwiseOp::Max => {
                    let diff = bottoms[b].diff_mut();
                    for (i, &winner) in self.argmax.iter().enumerate() {
                        if winner as usize == b {
                            diff[i] += top_diff[i];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn fingerprint(&self, state: &mut dyn Hasher) {
        for &a in &self.argmax {
            state.write_u32(a);
        }
    }
}
