//! Convolution lowered to GEMM.
//!
//! Each image is unfolded into a patch matrix (`im2col`) of shape
//! `(channels * kernel_h * kernel_w) x (out_h * out_w)`, multiplied by the
//! `num_output x (channels * kernel_h * kernel_w)` filter matrix. Backward
//! folds patch gradients back with `col2im`.

use crate::backend::Backend;
use crate::layers::{add_into, expect_bottoms, ConvParam, Layer, LayerKind};
use crate::real::Transpose;
use crate::tensor::{alloc_zeroed, Blob, Shape4};
use crate::{Error, Real, Result};

/// `(input + 2 * pad - kernel) / stride + 1` with floor division, or `None`
/// if the kernel does not fit the padded input.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one image's patch matrix.
#[derive(Debug, Clone, Copy, Default)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride_h: usize,
    stride_w: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row (or column) touched by output position `o` at kernel tap
    /// `k`, if it lies inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    fn im2col<T: Real>(&self, image: &[T], col: &mut [T]) {
        let (h, w) = (self.height, self.width);
        let cols = self.col_cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &image[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for y in 0..self.out_h {
                        let out_row = &mut dst[y * self.out_w..(y + 1) * self.out_w];
                        match Self::source(y, ki, self.stride_h, self.pad_h, h) {
                            None => out_row.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * w..(iy + 1) * w];
                                for (x, v) in out_row.iter_mut().enumerate() {
                                    *v = match Self::source(x, kj, self.stride_w, self.pad_w, w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adds each patch-matrix entry back onto the input pixel it came from.
    /// `image` must be zeroed by the caller.
    fn col2im<T: Real>(&self, col: &[T], image: &mut [T]) {
        let (h, w) = (self.height, self.width);
        let cols = self.col_cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut image[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &col[row * cols..(row + 1) * cols];
                    for y in 0..self.out_h {
                        let Some(iy) = Self::source(y, ki, self.stride_h, self.pad_h, h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for x in 0..self.out_w {
                            if let Some(ix) = Self::source(x, kj, self.stride_w, self.pad_w, w) {
                                dst[ix] += src[y * self.out_w + x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub struct Convolution<T: Real> {
    param: ConvParam,
    seed: u64,
    params: Vec<Blob<T>>,
    geom: Geometry,
    num: usize,
    col: Vec<T>,
    col_diff: Vec<T>,
    weight_scratch: Vec<T>,
    bias_scratch: Vec<T>,
    image_scratch: Vec<T>,
}

impl<T: Real> Convolution<T> {
    pub fn new(param: ConvParam, seed: u64) -> Result<Self> {
        if param.num_output == 0 {
            return Err(Error::Config("convolution num_output must be positive".into()));
        }
        if param.kernel_h == 0 || param.kernel_w == 0 {
            return Err(Error::Config("convolution kernel must be positive".into()));
        }
        if param.stride_h == 0 || param.stride_w == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        param.weight_filler.validate()?;
        param.bias_filler.validate()?;
        Ok(Convolution {
            param,
            seed,
            params: Vec::new(),
            geom: Geometry::default(),
            num: 0,
            col: Vec::new(),
            col_diff: Vec::new(),
            weight_scratch: Vec::new(),
            bias_scratch: Vec::new(),
            image_scratch: Vec::new(),
        })
    }

    fn weight_shape(&self, channels: usize) -> Shape4 {
        Shape4::new(self.param.num_output, channels, self.param.kernel_h, self.param.kernel_w)
    }
}

impl<T: Real> Layer<T> for Convolution<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Convolution
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        expect_bottoms(LayerKind::Convolution, bottoms, 1)?;
        let input = bottoms[0];
        let p = &self.param;
        let out_h = conv_output_size(input.height, p.kernel_h, p.stride_h, p.pad_h);
        let out_w = conv_output_size(input.width, p.kernel_w, p.stride_w, p.pad_w);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Shape(format!(
                "kernel {}x{} (pad {}x{}) does not fit input {}",
                p.kernel_h, p.kernel_w, p.pad_h, p.pad_w, input
            )));
        };

        let weight_shape = self.weight_shape(input.channels);
        if self.params.is_empty() {
            let mut weights = Blob::new(weight_shape)?;
            self.param.weight_filler.fill(&mut weights, self.seed)?;
            self.params.push(weights);
            if self.param.bias_term {
                let mut bias = Blob::new(Shape4::new(self.param.num_output, 1, 1, 1))?;
                self.param.bias_filler.fill(&mut bias, self.seed.wrapping_add(1))?;
                self.params.push(bias);
            }
        } else if self.params[0].shape() != weight_shape {
            return Err(Error::Shape(format!(
                "input has {} channels but weights are {}",
                input.channels,
                self.params[0].shape()
            )));
        }

        self.geom = Geometry {
            channels: input.channels,
            height: input.height,
            width: input.width,
            kernel_h: self.param.kernel_h,
            kernel_w: self.param.kernel_w,
            stride_h: self.param.stride_h,
            stride_w: self.param.stride_w,
            pad_h: self.param.pad_h,
            pad_w: self.param.pad_w,
            out_h,
            out_w,
        };
        self.num = input.num;
        let col_len = self.geom.col_rows() * self.geom.col_cols();
        self.col = alloc_zeroed(col_len);
        self.col_diff = alloc_zeroed(col_len);
        self.weight_scratch = alloc_zeroed(weight_shape.count());
        self.bias_scratch = alloc_zeroed(self.param.num_output);
        self.image_scratch = alloc_zeroed(input.item_count());
        Ok(vec![Shape4::new(input.num, self.param.num_output, out_h, out_w)])
    }

    fn params(&self) -> &[Blob<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Blob<T>] {
        &mut self.params
    }

    fn forward(
        &mut self,
        backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let g = self.geom;
        let (k, cols, outs) = (g.col_rows(), g.col_cols(), self.param.num_output);
        let input = bottoms[0].data();
        let in_len = g.channels * g.height * g.width;
        let weights = self.params[0].data();
        let bias = self.params.get(1).map(|b| b.data());
        let out = tops[0].data_mut();
        for n in 0..self.num {
            g.im2col(&input[n * in_len..(n + 1) * in_len], &mut self.col);
            let out_n = &mut out[n * outs * cols..(n + 1) * outs * cols];
            backend.gemm(
                Transpose::No,
                Transpose::No,
                outs,
                cols,
                k,
                T::one(),
                weights,
                &self.col,
                T::zero(),
                out_n,
            );
            if let Some(bias) = bias {
                for (o, row) in out_n.chunks_exact_mut(cols).enumerate() {
                    for v in row {
                        *v += bias[o];
                    }
                }
            }
        }
        Ok(())
    }

    fn backward(
        &mut self,
        backend: &dyn Backend<T>,
        tops: &[&Blob<T>],
        propagate_down: &[bool],
        bottoms: &mut [&mut Blob<T>],
    ) -> Result<()> {
        let g = self.geom;
        let (k, cols, outs) = (g.col_rows(), g.col_cols(), self.param.num_output);
        let in_len = g.channels * g.height * g.width;
        let top_diff = tops[0].diff();

        let (weights, rest) = self.params.split_at_mut(1);
        let weights = &mut weights[0];

        if let Some(bias) = rest.first_mut() {
            self.bias_scratch.fill(T::zero());
            for n in 0..self.num {
                let top_n = &top_diff[n * outs * cols..(n + 1) * outs * cols];
                for (o, row) in top_n.chunks_exact(cols).enumerate() {
                    self.bias_scratch[o] += row.iter().copied().sum::<T>();
                }
            }
            add_into(bias.diff_mut(), &self.bias_scratch);
        }

        let input = bottoms[0].data();
        for n in 0..self.num {
            g.im2col(&input[n * in_len..(n + 1) * in_len], &mut self.col);
            let top_n = &top_diff[n * outs * cols..(n + 1) * outs * cols];
            let beta = if n == 0 { T::zero() } else { T::one() };
            backend.gemm(
                Transpose::No,
                Transpose::Yes,
                outs,
                k,
                cols,
                T::one(),
                top_n,
                &self.col,
                beta,
                &mut self.weight_scratch,
            );
        }
        if self.num > 0 {
            add_into(weights.diff_mut(), &self.weight_scratch);
        }

        if propagate_down.first().copied().unwrap_or(false) {
            let w = weights.data();
            let bottom_diff = bottoms[0].diff_mut();
            for n in 0..self.num {
                let top_n = &top_diff[n * outs * cols..(n + 1) * outs * cols];
                backend.gemm(
                    Transpose::Yes,
                    Transpose::No,
                    k,
                    cols,
                    outs,
                    T::one(),
                    w,
                    top_n,
                    T::zero(),
                    &mut self.col_diff,
                );
                self.image_scratch.fill(T::zero());
                g.col2im(&self.col_diff, &mut self.image_scratch);
                add_into(&mut bottom_diff[n * in_len..(n + 1) * in_len], &self.image_scratch);
            }
        }
        Ok(())
    }
}
