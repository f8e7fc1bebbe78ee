use crate::backend::Backend;
use crate::layers::{add_into, expect_bottoms, InnerProductParam, Layer, LayerKind};
use crate::real::Transpose;
use crate::tensor::{alloc_zeroed, Blob, Shape4};
use crate::{Error, Real, Result};

/// Fully connected layer. The input is viewed as `(num, channels*height*width)`
/// and the weights as `(num_output, fan_in)`.
pub struct InnerProduct<T: Real> {
    param: InnerProductParam,
    seed: u64,
    params: Vec<Blob<T>>,
    num: usize,
    fan_in: usize,
    weight_scratch: Vec<T>,
    bias_scratch: Vec<T>,
    input_scratch: Vec<T>,
}

impl<T: Real> InnerProduct<T> {
    pub fn new(param: InnerProductParam, seed: u64) -> Result<Self> {
        if param.num_output == 0 {
            return Err(Error::Config("inner_product num_output must be positive".into()));
        }
        param.weight_filler.validate()?;
        param.bias_filler.validate()?;
        Ok(InnerProduct {
            param,
            seed,
            params: Vec::new(),
            num: 0,
            fan_in: 0,
            weight_scratch: Vec::new(),
            bias_scratch: Vec::new(),
            input_scratch: Vec::new(),
        })
    }
}

impl<T: Real> Layer<T> for InnerProduct<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::InnerProduct
    }

    fn setup(&mut self, bottoms: &[Shape4]) -> Result<Vec<Shape4>> {
        expect_bottoms(LayerKind::InnerProduct, bottoms, 1)?;
        let input = bottoms[0];
        let fan_in = input.item_count();
        let outs = self.param.num_output;
        let weight_shape = Shape4::new(outs, fan_in, 1, 1);
        if self.params.is_empty() {
            let mut weights = Blob::new(weight_shape)?;
            self.param.weight_filler.fill(&mut weights, self.seed)?;
            self.params.push(weights);
            if self.param.bias_term {
                let mut bias = Blob::new(Shape4::new(outs, 1, 1, 1))?;
                self.param.bias_filler.fill(&mut bias, self.seed.wrapping_add(1))?;
                self.params.push(bias);
            }
        } else if self.params[0].shape() != weight_shape {
            return Err(Error::Shape(format!(
                "fan-in {fan_in} does not match weights {}",
                self.params[0].shape()
            )));
        }
        self.num = input.num;
        self.fan_in = fan_in;
        self.weight_scratch = alloc_zeroed(weight_shape.count());
        self.bias_scratch = alloc_zeroed(outs);
        self.input_scratch = alloc_zeroed(input.count());
        Ok(vec![Shape4::new(input.num, outs, 1, 1)])
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
        let outs = self.param.num_output;
        let out = tops[0].data_mut();
        backend.gemm(
            Transpose::No,
            Transpose::Yes,
            self.num,
            outs,
            self.fan_in,
            T::one(),
            bottoms[0].data(),
            self.params[0].data(),
            T::zero(),
            out,
        );
        if let Some(bias) = self.params.get(1) {
            let bias = bias.data();
            for row in out.chunks_exact_mut(outs) {
                add_into(row, bias);
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
        let outs = self.param.num_output;
        let top_diff = tops[0].diff();
        let (weights, rest) = self.params.split_at_mut(1);
        let weights = &mut weights[0];

        backend.gemm(
            Transpose::Yes,
            Transpose::No,
            outs,
            self.fan_in,
            self.num,
            T::one(),
            top_diff,
            bottoms[0].data(),
            T::zero(),
            &mut self.weight_scratch,
        );
        add_into(weights.diff_mut(), &self.weight_scratch);

        if let Some(bias) = rest.first_mut() {
            self.bias_scratch.fill(T::zero());
            for row in top_diff.chunks_exact(outs) {
                add_into(&mut self.bias_scratch, row);
            }
            add_into(bias.diff_mut(), &self.bias_scratch);
        }

        if propagate_down.first().copied().unwrap_or(false) {
            backend.gemm(
                Transpose::No,
                Transpose::No,
                self.num,
                self.fan_in,
                outs,
                T::one(),
                top_diff,
                weights.data(),
                T::zero(),
                &mut self.input_scratch,
            );
            add_into(bottoms[0].diff_mut(), &self.input_scratch);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{run_backward, run_forward};
    use crate::net::gradcheck::{check_layer, LayerCheck};
    use crate::tensor::Filler;
    use proptest::prelude::*;

    fn with_weights(outs: usize, weights: &[f32], bias: Option<&[f32]>) -> InnerProduct<f32> {
        let param = InnerProductParam {
            bias_term: bias.is_some(),
            ..InnerProductParam::new(outs)
        };
        let mut layer = InnerProduct::new(param, 0).unwrap();
        let fan_in = weights.len() / outs;
        layer
            .params
            .push(Blob::from_data(Shape4::new(outs, fan_in, 1, 1), weights).unwrap());
        if let Some(b) = bias {
            layer.params.push(Blob::from_data(Shape4::new(outs, 1, 1, 1), b).unwrap());
        }
        layer
    }

    fn row(v: &[f32]) -> Blob<f32> {
        Blob::from_data(Shape4::new(1, v.len(), 1, 1), v).unwrap()
    }

    #[test]
    fn forward_examples() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut layer = with_weights(3, &eye, None);
        let out = run_forward(&mut layer, &[&row(&[1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(out[0].shape(), Shape4::new(1, 3, 1, 1));
        assert_eq!(out[0].data(), &[1.0, 2.0, 3.0]);

        let mut ones = with_weights(1, &[1.0; 3], None);
        assert_eq!(run_forward(&mut ones, &[&row(&[1.0, 2.0, 3.0])]).unwrap()[0].data(), &[6.0]);

        let mut bias_only = with_weights(1, &[0.0; 3], Some(&[7.0]));
        assert_eq!(run_forward(&mut bias_only, &[&row(&[4.0, -2.0, 9.0])]).unwrap()[0].data(), &[7.0]);
    }

    #[test]
    fn fan_in_mismatch_fails() {
        let mut layer = with_weights(1, &[1.0; 3], None);
        assert!(layer.setup(&[Shape4::new(1, 4, 1, 1)]).is_err());
    }

    #[test]
    fn weight_gradient_is_outer_product() {
        let mut layer = with_weights(1, &[0.5, -0.5], Some(&[0.0]));
        let mut tops = run_forward(&mut layer, &[&row(&[1.0, 2.0])]).unwrap();
        tops[0].diff_mut()[0] = 3.0;
        let mut bottoms = vec![row(&[1.0, 2.0])];
        run_backward(&mut layer, &tops, &mut bottoms).unwrap();
        assert_eq!(layer.params()[0].diff(), &[3.0, 6.0]);
        assert_eq!(layer.params()[1].diff(), &[3.0]);
        assert_eq!(bottoms[0].diff(), &[1.5, -1.5]);
    }

    #[test]
    fn zero_top_diff_gives_zero_gradients() {
        let mut layer = InnerProduct::<f32>::new(InnerProductParam::new(4), 1).unwrap();
        let mut x = Blob::new(Shape4::new(3, 5, 1, 1)).unwrap();
        Filler::Gaussian { mean: 0.0, std: 1.0 }.fill(&mut x, 2).unwrap();
        let tops = run_forward(&mut layer, &[&x]).unwrap();
        let mut bottoms = vec![x];
        run_backward(&mut layer, &tops, &mut bottoms).unwrap();
        assert!(bottoms[0].diff().iter().all(|&v| v == 0.0));
        assert!(layer.params().iter().all(|p| p.diff().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let param = InnerProductParam {
            bias_filler: Filler::Gaussian { mean: 0.0, std: 1.0 },
            ..InnerProductParam::new(10)
        };
        let mut layer = InnerProduct::<f64>::new(param, 4).unwrap();
        let report = check_layer(&mut layer, &[Shape4::new(4, 10, 1, 1)], &LayerCheck::default()).unwrap();
        assert!(report.passed(1e-2), "{report:?}");
    }

    proptest! {
        #[test]
        fn forward_is_linear_without_bias(seed in any::<u64>(), a in -4.0f64..4.0) {
            let param = InnerProductParam { bias_term: false, ..InnerProductParam::new(3) };
            let mut layer = InnerProduct::<f64>::new(param, seed).unwrap();
            let shape = Shape4::new(2, 2, 2, 1);
            let mut x = Blob::<f64>::new(shape).unwrap();
            let mut y = Blob::<f64>::new(shape).unwrap();
            Filler::Gaussian { mean: 0.0, std: 1.0 }.fill(&mut x, seed ^ 1).unwrap();
            Filler::Gaussian { mean: 0.0, std: 1.0 }.fill(&mut y, seed ^ 2).unwrap();
            let ax: Vec<f64> = x.data().iter().map(|v| v * a).collect();
            let xy: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
            let fx = run_forward(&mut layer, &[&x]).unwrap().remove(0);
            let fy = run_forward(&mut layer, &[&y]).unwrap().remove(0);
            let fax = run_forward(&mut layer, &[&Blob::from_data(shape, &ax).unwrap()]).unwrap().remove(0);
            let fxy = run_forward(&mut layer, &[&Blob::from_data(shape, &xy).unwrap()]).unwrap().remove(0);
            for i in 0..fx.count() {
                prop_assert!((fax.data()[i] - a * fx.data()[i]).abs() < 1e-9);
                prop_assert!((fxy.data()[i] - fx.data()[i] - fy.data()[i]).abs() < 1e-9);
            }
        }
    }
}
