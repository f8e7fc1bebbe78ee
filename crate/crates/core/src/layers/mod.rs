//! The layer catalog.
//!
//! A layer consumes bottom blobs and produces top blobs. `forward` computes
//! tops from bottoms; `backward` reads top diffs and ACCUMULATES gradients
//! into bottom diffs and parameter diffs. Callers zero those diffs between
//! iterations. Running `backward` twice without zeroing therefore yields
//! exactly twice the gradients.
//!
//! ReLU and Sigmoid may also run in place (top and bottom are one blob). In
//! that mode `backward_in_place` rewrites the shared diff instead of adding to
//! it.

mod activation;
mod conv;
mod data;
mod eltwise;
mod inner_product;
mod loss;
mod lrn;
mod pool;
pub mod spec;
mod split;

use std::hash::Hasher;

pub use activation::{Activation, ActivationKind};
pub use conv::{conv_output_size, Convolution};
pub use data::Data;
pub use eltwise::Eltwise;
pub use inner_product::InnerProduct;
pub use loss::{accuracy, Accuracy, HingeLoss, SoftmaxLoss};
pub use lrn::Lrn;
pub use pool::{pool_backward, pool_output_size, Pooling};
pub use spec::*;
pub use split::Split;

use crate::backend::{Backend, Mode};
use crate::tensor::{Blob, Shape4};
use crate::{Error, Real, Result};

pub trait Layer<T: Real>: Send {
    fn kind(&self) -> LayerKind;

    /// Validates bottom shapes and returns top shapes. Allocates parameters
    /// on first call and (re)allocates internal scratch buffers, so that
    /// `forward` and `backward` never allocate.
    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>>;

    /// Learnable parameters, weights before bias.
    fn params(&self) -> &[Blob<T>] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [Blob<T>] {
        &mut []
    }

    fn forward(
        &mut self,
        backend: &dyn Backend<T>,
        bottoms: &[&Blob<T>],
        tops: &mut [&mut Blob<T>],
    ) -> Result<()>;

    fn backward(
        &mut self,
        backend: &dyn Backend<T>,
        tops: &[&Blob<T>],
        propagate_down: &[bool],
        bottoms: &mut [&mut Blob<T>],
    ) -> Result<()>;

    fn forward_in_place(&mut self, _backend: &dyn Backend<T>, _blob: &mut Blob<T>) -> Result<()> {
        Err(Error::State(format!("{} cannot run in place", self.kind())))
    }

    fn backward_in_place(&mut self, _backend: &dyn Backend<T>, _blob: &mut Blob<T>) -> Result<()> {
        Err(Error::State(format!("{} cannot run in place", self.kind())))
    }

    /// Feeds the branch decisions of the last forward pass (ReLU masks, max
    /// selections, active hinge margins) into `state`. Two passes with the
    /// same fingerprint took the same smooth piece of the function.
    fn fingerprint(&self, _state: &mut dyn Hasher) {}
}

/// Instantiates the layer described by `spec`. `seed` drives parameter
/// fillers: the weights use `seed`, the bias `seed + 1`.
pub fn create_layer<T: Real>(spec: &LayerSpec, seed: u64) -> Result<Box<dyn Layer<T>>> {
    let wrong_params = || {
        Error::layer(
            &spec.name,
            format!("parameters do not match kind {}", spec.kind),
        )
    };
    let layer: Box<dyn Layer<T>> = match (spec.kind, &spec.params) {
        (LayerKind::Data, LayerParams::Data(p)) => Box::new(Data::new(p.clone())),
        (LayerKind::Convolution, LayerParams::Conv(p)) => Box::new(Convolution::new(p.clone(), seed)?),
        (LayerKind::Pooling, LayerParams::Pool(p)) => Box::new(Pooling::new(p.clone())?),
        (LayerKind::InnerProduct, LayerParams::InnerProduct(p)) => {
            Box::new(InnerProduct::new(p.clone(), seed)?)
        }
        (LayerKind::ReLU, LayerParams::None) => Box::new(Activation::new(ActivationKind::ReLU)),
        (LayerKind::Sigmoid, LayerParams::None) => Box::new(Activation::new(ActivationKind::Sigmoid)),
        (LayerKind::LRN, LayerParams::Lrn(p)) => Box::new(Lrn::new(p.clone())?),
        (LayerKind::LRN, LayerParams::None) => Box::new(Lrn::new(LrnParam::default())?),
        (LayerKind::Eltwise, LayerParams::Eltwise(p)) => Box::new(Eltwise::new(p.clone())),
        (LayerKind::Eltwise, LayerParams::None) => Box::new(Eltwise::new(EltwiseParam::default())),
        (LayerKind::SoftmaxLoss, LayerParams::None) => Box::new(SoftmaxLoss::new()),
        (LayerKind::HingeLoss, LayerParams::None) => Box::new(HingeLoss::new()),
        (LayerKind::Accuracy, LayerParams::None) => Box::new(Accuracy::new()),
        (LayerKind::Split, LayerParams::None) => Box::new(Split::new(spec.tops.len())),
        _ => return Err(wrong_params()),
    };
    Ok(layer)
}

/// Runs `setup` and `forward` on freshly allocated tops. For exercising a
/// layer outside a net.
pub fn run_forward<T: Real>(layer: &mut dyn Layer<T>, bottoms: &[&Blob<T>]) -> Result<Vec<Blob<T>>> {
    let shapes: Vec<Shape4> = bottoms.iter().map(|b| b.shape()).collect();
    let mut tops = layer
        .setup(&shapes)?
        .into_iter()
        .map(Blob::new)
        .collect::<Result<Vec<_>>>()?;
    let mut refs: Vec<&mut Blob<T>> = tops.iter_mut().collect();
    layer.forward(Mode::Cpu.backend(), bottoms, &mut refs)?;
    Ok(tops)
}

/// Runs `backward` with every bottom propagated. Bottom diffs accumulate.
pub fn run_backward<T: Real>(layer: &mut dyn Layer<T>, tops: &[Blob<T>], bottoms: &mut [Blob<T>]) -> Result<()> {
    let top_refs: Vec<&Blob<T>> = tops.iter().collect();
    let propagate = vec![true; bottoms.len()];
    let mut bottom_refs: Vec<&mut Blob<T>> = bottoms.iter_mut().collect();
    layer.backward(Mode::Cpu.backend(), &top_refs, &propagate, &mut bottom_refs)
}

pub(crate) fn expect_bottoms(kind: LayerKind, bottoms: &[Shape4], n: usize) -> Result<()> {
    if bottoms.len() != n {
        return Err(Error::Shape(format!(
            "{kind} expects {n} bottom(s), got {}",
            bottoms.len()
        )));
    }
    Ok(())
}

/// `dst[i] += src[i]`.
#[inline]
pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Validates that `label` is an integral class id in `[0, classes)`.
pub(crate) fn class_of<T: Real>(label: T, classes: usize) -> Result<usize> {
    let l = label.to_f64();
    if !(l >= 0.0 && l < classes as f64 && l.fract() == 0.0) {
        return Err(Error::Data(format!(
            "label {l} is not a class id in [0, {classes})"
        )));
    }
    Ok(l as usize)
}
