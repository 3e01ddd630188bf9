//! Layer building blocks shared by the generator and discriminator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use uagan_autograd::{ConvGeom, Param, ParamRef, Shape, Tensor, Var};

use crate::error::Result;

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// 2D convolution with optional bias. Weights use a uniform fan-in init.
pub struct Conv2d {
    pub weight: ParamRef,
    pub bias: Option<ParamRef>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f32;
        let bound = (1.0 / fan_in).sqrt();
        let shape = Shape::new(cout, cin, kernel, kernel);
        let w: Vec<f32> = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = Param::new(format!("{name}.weight"), Tensor::from_vec(shape, w).expect("sized"));
        let bias = bias.then(|| {
            let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
            Param::new(format!("{name}.bias"), Tensor::from_vec(Shape::new(1, cout, 1, 1), b).expect("sized"))
        });
        Conv2d { weight, bias, geom }
    }

    /// 1×1 convolution with bias.
    pub fn pointwise(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d::new(name, cin, cout, 1, ConvGeom::new(1, 0), true, rng)
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        let y = x.conv2d(&self.weight.var(), self.geom)?;
        Ok(match &self.bias {
            Some(b) => y.add(&b.var())?,
            None => y,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape().c()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape().n()
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = vec![self.weight.clone()];
        p.extend(self.bias.clone());
        p
    }
}

/// Per-sample, per-channel normalization with a learned affine transform.
pub struct InstanceNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        InstanceNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(s)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(s)),
        }
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        Ok(x.instance_norm(&self.gamma.var(), &self.beta.var(), INSTANCE_NORM_EPS)?)
    }

    pub fn params(&self) -> Vec<ParamRef> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Two rounds of 3×3 convolution → instance norm → leaky ReLU.
pub struct ConvBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
    slope: f32,
}

impl ConvBlock {
    pub fn new(name: &str, cin: usize, cout: usize, slope: f32, rng: &mut ChaCha8Rng) -> Self {
        let g = ConvGeom::new(1, 1);
        // Bias would be cancelled by the following instance norm.
        ConvBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, g, false, rng),
            norm1: InstanceNorm::new(&format!("{name}.norm1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, g, false, rng),
            norm2: InstanceNorm::new(&format!("{name}.norm2"), cout),
            slope,
        }
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.leaky_relu(self.slope)?;
        Ok(self.norm2.forward(&self.conv2.forward(&h)?)?.leaky_relu(self.slope)?)
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.conv1.params();
        p.extend(self.norm1.params());
        p.extend(self.conv2.params());
        p.extend(self.norm2.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn instance_norm_standardizes_each_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let x = Var::constant(Tensor::from_vec(Shape::new(2, 3, 4, 4), data).unwrap());
        let y = InstanceNorm::new("n", 3).forward(&x).unwrap();
        for plane in y.value().data().chunks(16) {
            let m: f32 = plane.iter().sum::<f32>() / 16.0;
            let v: f32 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / 16.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn conv_block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ConvBlock::new("b", 2, 5, 0.2, &mut rng);
        let x = Var::constant(Tensor::zeros(Shape::new(1, 2, 8, 8)));
        assert_eq!(b.forward(&x).unwrap().shape(), Shape::new(1, 5, 8, 8));
        assert_eq!(b.params().len(), 6);
    }
}
