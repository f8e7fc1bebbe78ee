use crate::backend::Backend;
use crate::layers::{add_into, expect_bottoms, Layer, LayerKind};
use crate::tensor::{Blob, Shape4};
use crate::{Real, Result};

/// Copies one bottom to several tops and sums their gradients on the way
/// back. Inserted by the net builder wherever a blob has several consumers.
pub struct Split {
    outputs: usize,
}

impl Split {
    pub fn new(outputs: usize) -> Self {
        Split { outputs }
    }
}

impl<T: Real> Layer<T> for Split {
    fn kind(&self) -> LayerKind {
        LayerKind::Split
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        expect_bottoms(LayerKind::Split, bottoms, 1)?;
        Ok(vec![bottoms[0]; self.outputs])
    }

    fn forward(&mut self, _: &dyn Backend<T>, bottoms: &[&Blob<T>], tops: &mut [&mut Blob<T>]) -> Result<()> {
        for top in tops.iter_mut() {
            top.data_mut().copy_from_slice(bottoms[0].data());
        }
        Ok(())
    }

    fn backward(
        &mut self,
        _: &dyn Backend<T>,
        tops: &[&Blob<T>],
        propagate_down: &[bool],
        bottoms: &mut [&mut Blob<T>],
    ) -> Result<()> {
        if propagate_down.first().copied().unwrap_or(false) {
            let diff = bottoms[0].diff_mut();
            for top in tops {
                add_into(diff, top.diff());
            }
        }
        Ok(())
    }
}
