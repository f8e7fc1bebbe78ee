use crate::backend::Backend;
use crate::layers::{expect_bottoms, DataParam, Layer, LayerKind};
use crate::tensor::{Blob, Shape4};
use crate::{Error, Real, Result};

/// Entry point of a training or test net. Produces `(images, labels)` tops;
/// the batches themselves are written into those tops by whoever drives the
/// net (see `Net::feed`), so forward and backward do nothing.
pub struct Data {
    param: DataParam,
}

impl Data {
    pub fn new(param: DataParam) -> Self {
        Data { param }
    }

    pub fn param(&self) -> &DataParam {
        &self.param
    }
}

impl<T: Real> Layer<T> for Data {
    fn kind(&self) -> LayerKind {
        LayerKind::Data
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        expect_bottoms(LayerKind::Data, bottoms, 0)?;
        let p = &self.param;
        let images = Shape4::new(p.batch_size, p.channels, p.height, p.width);
        if images.is_empty() {
            return Err(Error::Config(format!("data layer has an empty batch shape {images}")));
        }
        Ok(vec![images, Shape4::new(p.batch_size, 1, 1, 1)])
    }

    fn forward(&mut self, _: &dyn Backend<T>, _: &[&Blob<T>], _: &mut [&mut Blob<T>]) -> Result<()> {
        Ok(())
    }

    fn backward(&mut self, _: &dyn Backend<T>, _: &[&Blob<T>], _: &[bool], _: &mut [&mut Blob<T>]) -> Result<()> {
        Ok(())
    }
}
