use std::hash::Hasher;

use crate::backend::Backend;
use crate::layers::{add_into, expect_bottoms, Layer, LayerKind, PoolMethod, PoolParam};
use crate::tensor::{alloc_zeroed, Blob, Shape4};
use crate::{Error, Real, Result};

/// Pooled extent: `ceil((input + 2 * pad - kernel) / stride) + 1`, dropping
/// the last window when it would start in the trailing padding.
pub fn pool_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    let mut out = (padded - kernel).div_ceil(stride) + 1;
    if (out - 1) * stride >= input + pad {
        out -= 1;
    }
    Some(out)
}

pub struct Pooling<T: Real> {
    param: PoolParam,
    input: Shape4,
    output: Shape4,
    /// Flat input offset selected by each max-pooled output.
    argmax: Vec<usize>,
    scratch: Vec<T>,
}

impl<T: Real> Pooling<T> {
    pub fn new(param: PoolParam) -> Result<Self> {
        if param.kernel_h == 0 || param.kernel_w == 0 {
            return Err(Error::Config("pooling window must be non-empty".into()));
        }
        if param.stride_h == 0 || param.stride_w == 0 {
            return Err(Error::Config("pooling stride must be at least 1".into()));
        }
        if param.pad_h >= param.kernel_h || param.pad_w >= param.kernel_w {
            return Err(Error::Config("pooling pad must be smaller than the window".into()));
        }
        Ok(Pooling {
            param,
            input: Shape4::default(),
            output: Shape4::default(),
            argmax: Vec::new(),
            scratch: Vec::new(),
        })
    }

    /// Index of the max-pool selection map; `None` for average pooling.
    pub fn argmax(&self) -> Option<&[usize]> {
        (self.param.method == PoolMethod::Max).then_some(&self.argmax[..])
    }

    /// Window `[start, end)` of output position `o` along one axis, clipped
    /// to the input, plus the window's extent inside the padded input (the
    /// average-pool divisor factor).
    #[inline]
    fn window(o: usize, stride: usize, pad: usize, kernel: usize, extent: usize) -> (usize, usize, usize) {
        let start = (o * stride) as isize - pad as isize;
        let padded_end = (start + kernel as isize).min((extent + pad) as isize);
        let end = padded_end.min(extent as isize);
        let span = (padded_end - start) as usize;
        (start.max(0) as usize, end.max(0) as usize, span)
    }
}

impl<T: Real> Layer<T> for Pooling<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Pooling
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        expect_bottoms(LayerKind::Pooling, bottoms, 1)?;
        let input = bottoms[0];
        let p = &self.param;
        let out_h = pool_output_size(input.height, p.kernel_h, p.stride_h, p.pad_h);
        let out_w = pool_output_size(input.width, p.kernel_w, p.stride_w, p.pad_w);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Shape(format!(
                "window {}x{} (pad {}x{}) does not fit input {}",
                p.kernel_h, p.kernel_w, p.pad_h, p.pad_w, input
            )));
        };
        self.input = input;
        self.output = Shape4::new(input.num, input.channels, out_h, out_w);
        if p.method == PoolMethod::Max {
            self.argmax = vec![0; self.output.count()];
        }
        self.scratch = alloc_zeroed(input.count());
        Ok(vec![self.output])
    }

    fn forward(
        &mut self,
        _backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let (input, output, p) = (self.input, self.output, &self.param);
        let src = bottoms[0].data();
        let dst = tops[0].data_mut();
        let plane = input.height * input.width;
        let mut out_idx = 0;
        for nc in 0..input.num * input.channels {
            let base = nc * plane;
            for oy in 0..output.height {
                let (h0, h1, span_h) = Self::window(oy, p.stride_h, p.pad_h, p.kernel_h, input.height);
                for ox in 0..output.width {
                    let (w0, w1, span_w) = Self::window(ox, p.stride_w, p.pad_w, p.kernel_w, input.width);
                    match p.method {
                        PoolMethod::Max => {
                            let mut best = base + h0 * input.width + w0;
                            for y in h0..h1 {
                                for x in w0..w1 {
                                    let i = base + y * input.width + x;
                                    if src[i] > src[best] {
                                        best = i;
                                    }
                                }
                            }
                            dst[out_idx] = src[best];
                            self.argmax[out_idx] = best;
                        }
                        PoolMethod::Average => {
                            let mut sum = T::zero();
                            for y in h0..h1 {
                                for x in w0..w1 {
                                    sum += src[base + y * input.width + x];
                                }
                            }
                            dst[out_idx] = sum / T::from_f64((span_h * span_w) as f64);
                        }
                    }
                    out_idx += 1;
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
        let (input, output, p) = (self.input, self.output, &self.param);
        let top_diff = tops[0].diff();
        self.scratch.fill(T::zero());
        match p.method {
            PoolMethod::Max => {
                for (&src, &g) in self.argmax.iter().zip(top_diff) {
                    self.scratch[src] += g;
                }
            }
            PoolMethod::Average => {
                let plane = input.height * input.width;
                let mut out_idx = 0;
                for nc in 0..input.num * input.channels {
                    let base = nc * plane;
                    for oy in 0..output.height {
                        let (h0, h1, span_h) =
                            Self::window(oy, p.stride_h, p.pad_h, p.kernel_h, input.height);
                        for ox in 0..output.width {
                            let (w0, w1, span_w) =
                                Self::window(ox, p.stride_w, p.pad_w, p.kernel_w, input.width);
                            let g = top_diff[out_idx] / T::from_f64((span_h * span_w) as f64);
                            for y in h0..h1 {
                                for x in w0..w1 {
                                    self.scratch[base + y * input.width + x] += g;
                                }
                            }
                            out_idx += 1;
                        }
                    }
                }
            }
        }
        add_into(bottoms[0].diff_mut(), &self.scratch);
        Ok(())
    }

    fn fingerprint(&self, state: &mut dyn Hasher) {
        for &i in &self.argmax {
            state.write_usize(i);
        }
    }
}

/// Routes `top_diff` back to the input positions recorded in `argmax` (max
/// pooling) or spreads it over each window (average pooling).
pub fn pool_backward<T: Real>(
    top_diff: &Blob<T>,
    argmax: Option<&[usize]>,
    param: &PoolParam,
    in_shape: Shape4,
) -> Result<Blob<T>> {
    let mut layer = Pooling::<T>::new(param.clone())?;
    let out_shape = layer.setup(&[in_shape])?[0];
    if out_shape != top_diff.shape() {
        return Err(Error::Shape(format!(
            "top diff {} does not match pooled shape {out_shape}",
            top_diff.shape()
        )));
    }
    if param.method == PoolMethod::Max {
        let map = argmax.ok_or_else(|| Error::State("max pooling backward needs an argmax map".into()))?;
        if map.len() != out_shape.count() || map.iter().any(|&i| i >= in_shape.count()) {
            return Err(Error::Shape("argmax map does not match the pooled shape".into()));
        }
        layer.argmax.copy_from_slice(map);
    }
    let mut top = Blob::new(out_shape)?;
    top.diff_mut().copy_from_slice(top_diff.diff());
    let mut bottom = Blob::new(in_shape)?;
    layer.backward(crate::backend::Mode::Cpu.backend(), &[&top], &[true], &mut [&mut bottom])?;
    Ok(bottom)
}
