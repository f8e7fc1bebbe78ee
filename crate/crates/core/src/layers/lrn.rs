use crate::backend::Backend;
use crate::layers::{expect_bottoms, Layer, LayerKind, LrnParam};
use crate::tensor::{alloc_zeroed, Blob, Shape4};
use crate::{Error, Real, Result};

/// Cross-channel local response normalization:
///
/// `out[c] = in[c] / (k + alpha / n * sum_{c' in window(c)} in[c']^2)^beta`
///
/// with a centered window of `n` channels clipped at the channel boundaries.
pub struct Lrn<T: Real> {
    param: LrnParam,
    shape: Shape4,
    /// The bracketed denominator base for each element, kept for backward.
    scale: Vec<T>,
}

impl<T: Real> Lrn<T> {
    pub fn new(param: LrnParam) -> Result<Self> {
        if param.local_size == 0 || param.local_size % 2 == 0 {
            return Err(Error::Config(format!(
                "lrn local_size must be odd and positive, got {}",
                param.local_size
            )));
        }
        if !(param.alpha >= 0.0 && param.beta > 0.0 && param.k > 0.0) {
            return Err(Error::Config(format!(
                "lrn needs alpha >= 0, beta > 0, k > 0 (got alpha={} beta={} k={})",
                param.alpha, param.beta, param.k
            )));
        }
        Ok(Lrn {
            param,
            shape: Shape4::default(),
            scale: Vec::new(),
        })
    }

    fn window(&self, c: usize) -> std::ops::Range<usize> {
        let half = self.param.local_size / 2;
        c.saturating_sub(half)..(c + half + 1).min(self.shape.channels)
    }
}

impl<T: Real> Layer<T> for Lrn<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::LRN
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        expect_bottoms(LayerKind::LRN, bottoms, 1)?;
        self.shape = bottoms[0];
        self.scale = alloc_zeroed(self.shape.count());
        Ok(vec![self.shape])
    }

    fn forward(
        &mut self,
        _backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let s = self.shape;
        let plane = s.height * s.width;
        let k = T::from_f64(self.param.k);
        let alpha_n = T::from_f64(self.param.alpha / self.param.local_size as f64);
        let neg_beta = T::from_f64(-self.param.beta);
        let input = bottoms[0].data();
        let out = tops[0].data_mut();
        for n in 0..s.num {
            let base = n * s.channels * plane;
            for p in 0..plane {
                for c in 0..s.channels {
                    let mut sum = T::zero();
                    for cc in self.window(c) {
                        let v = input[base + cc * plane + p];
                        sum += v * v;
                    }
                    let i = base + c * plane + p;
                    self.scale[i] = k + alpha_n * sum;
                    out[i] = input[i] * self.scale[i].powf(neg_beta);
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
        if !propagate_down.first().copied().unwrap_or(false) {
            return Ok(());
        }
        let s = self.shape;
        let plane = s.height * s.width;
        let neg_beta = T::from_f64(-self.param.beta);
        let coeff = T::from_f64(2.0 * self.param.alpha * self.param.beta / self.param.local_size as f64);
        let (out, top_diff) = (tops[0].data(), tops[0].diff());
        let (input, bottom_diff) = bottoms[0].data_and_diff_mut();
        for n in 0..s.num {
            let base = n * s.channels * plane;
            for p in 0..plane {
                for c in 0..s.channels {
                    let i = base + c * plane + p;
                    // The window relation is symmetric, so the channels whose
                    // windows contain `c` are exactly `window(c)`.
                    let mut cross = T::zero();
                    for cc in self.window(c) {
                        let j = base + cc * plane + p;
                        cross += top_diff[j] * out[j] / self.scale[j];
                    }
                    bottom_diff[i] += top_diff[i] * self.scale[i].powf(neg_beta) - coeff * input[i] * cross;
                }
            }
        }
        Ok(())
    }
}
