//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Shape, Tensor};
use crate::var::{BackwardArgs, Var};

fn unary(x: &Var, value: Tensor, name: &'static str, f: impl Fn(&BackwardArgs<'_>) -> Result<Var> + 'static) -> Var {
    Var::from_op(value, name, vec![x.clone()], Box::new(move |a| Ok(vec![Some(f(a)?)])))
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(), other.value(), |a, b| a + b)?;
        let (sa, sb) = (self.shape(), other.shape());
        Ok(Var::from_op(
            value,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(move |a| {
                Ok(vec![
                    a.needs[0].then(|| a.grad.sum_to(sa)).transpose()?,
                    a.needs[1].then(|| a.grad.sum_to(sb)).transpose()?,
                ])
            }),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(), other.value(), |a, b| a - b)?;
        let (sa, sb) = (self.shape(), other.shape());
        Ok(Var::from_op(
            value,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(move |a| {
                Ok(vec![
                    a.needs[0].then(|| a.grad.sum_to(sa)).transpose()?,
                    a.needs[1].then(|| a.grad.sum_to(sb)?.neg()).transpose()?,
                ])
            }),
        ))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(), other.value(), |a, b| a * b)?;
        let (sa, sb) = (self.shape(), other.shape());
        Ok(Var::from_op(
            value,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(move |a| {
                let (x, y) = (&a.inputs[0], &a.inputs[1]);
                Ok(vec![
                    a.needs[0].then(|| a.grad.mul(y)?.sum_to(sa)).transpose()?,
                    a.needs[1].then(|| a.grad.mul(x)?.sum_to(sb)).transpose()?,
                ])
            }),
        ))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(), other.value(), |a, b| a / b)?;
        let (sa, sb) = (self.shape(), other.shape());
        Ok(Var::from_op(
            value,
            "div",
            vec![self.clone(), other.clone()],
            Box::new(move |a| {
                let y = &a.inputs[1];
                Ok(vec![
                    a.needs[0].then(|| a.grad.div(y)?.sum_to(sa)).transpose()?,
                    a.needs[1].then(|| a.grad.mul(a.out)?.div(y)?.neg()?.sum_to(sb)).transpose()?,
                ])
            }),
        ))
    }

    pub fn neg(&self) -> Result<Var> {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(&self, s: f32) -> Result<Var> {
        Ok(unary(self, self.value().map(|x| x * s), "mul_scalar", move |a| a.grad.mul_scalar(s)))
    }

    pub fn add_scalar(&self, s: f32) -> Result<Var> {
        Ok(unary(self, self.value().map(|x| x + s), "add_scalar", |a| Ok(a.grad.clone())))
    }

    pub fn exp(&self) -> Result<Var> {
        Ok(unary(self, self.value().map(f32::exp), "exp", |a| a.grad.mul(a.out)))
    }

    pub fn log(&self) -> Result<Var> {
        Ok(unary(self, self.value().map(f32::ln), "log", |a| a.grad.div(&a.inputs[0])))
    }

    pub fn sqrt(&self) -> Result<Var> {
        Ok(unary(self, self.value().map(f32::sqrt), "sqrt", |a| a.grad.div(a.out)?.mul_scalar(0.5)))
    }

    pub fn square(&self) -> Result<Var> {
        Ok(unary(self, self.value().map(|x| x * x), "square", |a| a.grad.mul(&a.inputs[0])?.mul_scalar(2.0)))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let value = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        Ok(unary(self, value, "sigmoid", |a| {
            let s = a.out;
            a.grad.mul(&s.sub(&s.mul(s)?)?)
        }))
    }

    /// Piecewise-linear; the local slope is treated as a constant.
    pub fn leaky_relu(&self, slope: f32) -> Result<Var> {
        let value = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        Ok(unary(self, value, "leaky_relu", move |a| {
            let mask = a.inputs[0].value().map(|x| if x > 0.0 { 1.0 } else { slope });
            a.grad.mul(&Var::constant(mask))
        }))
    }

    pub fn abs(&self) -> Result<Var> {
        Ok(unary(self, self.value().map(f32::abs), "abs", |a| {
            let sign = a.inputs[0].value().map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            a.grad.mul(&Var::constant(sign))
        }))
    }

    /// Sums over the dimensions where `shape` has extent 1.
    pub fn sum_to(&self, shape: Shape) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let in_shape = self.shape();
        let value = kernels::sum_to(self.value(), shape)?;
        Ok(unary(self, value, "sum_to", move |a| a.grad.expand(in_shape)))
    }

    /// Broadcasts along unit dimensions up to `shape`.
    pub fn expand(&self, shape: Shape) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let in_shape = self.shape();
        let value = kernels::expand(self.value(), shape)?;
        Ok(unary(self, value, "expand", move |a| a.grad.sum_to(in_shape)))
    }

    pub fn sum_all(&self) -> Result<Var> {
        self.sum_to(Shape::SCALAR)
    }

    pub fn mean_all(&self) -> Result<Var> {
        let n = self.value().numel() as f32;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: Shape) -> Result<Var> {
        let in_shape = self.shape();
        let value = self.value().reshape(shape)?;
        Ok(unary(self, value, "reshape", move |a| a.grad.reshape(in_shape)))
    }

    /// Cross-correlation with weight `w: [Cout, Cin, kh, kw]`, no bias.
    pub fn conv2d(&self, w: &Var, geom: ConvGeom) -> Result<Var> {
        let value = kernels::conv2d(self.value(), w.value(), geom)?;
        let (xs, ws) = (self.shape(), w.shape());
        Ok(Var::from_op(
            value,
            "conv2d",
            vec![self.clone(), w.clone()],
            Box::new(move |a| {
                let (x, w) = (&a.inputs[0], &a.inputs[1]);
                Ok(vec![
                    a.needs[0].then(|| conv_input_grad(a.grad, w, xs, geom)).transpose()?,
                    a.needs[1].then(|| conv_weight_grad(x, a.grad, ws, geom)).transpose()?,
                ])
            }),
        ))
    }

    /// 2×2 stride-2 max pooling.
    pub fn max_pool2(&self) -> Result<Var> {
        let (value, idx) = kernels::max_pool2(self.value())?;
        let idx = Rc::new(idx);
        let in_shape = self.shape();
        Ok(unary(self, value, "max_pool2", move |a| scatter(a.grad, idx.clone(), in_shape)))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&self) -> Result<Var> {
        Ok(unary(self, kernels::upsample2(self.value()), "upsample2", |a| a.grad.sum_pool2()))
    }

    pub fn sum_pool2(&self) -> Result<Var> {
        let value = kernels::sum_pool2(self.value())?;
        Ok(unary(self, value, "sum_pool2", |a| a.grad.upsample2()))
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var> {
        let total = self.shape().c();
        let value = kernels::narrow_channels(self.value(), start, len)?;
        Ok(unary(self, value, "narrow_channels", move |a| a.grad.pad_channels(start, total)))
    }

    pub fn pad_channels(&self, start: usize, total: usize) -> Result<Var> {
        let len = self.shape().c();
        let value = kernels::pad_channels(self.value(), start, total)?;
        Ok(unary(self, value, "pad_channels", move |a| a.grad.narrow_channels(start, len)))
    }

    /// Instance normalization with affine `gamma`, `beta` of shape `[1, C, 1, 1]`.
    ///
    /// Uses fused kernels. Its backward is first-order only: differentiating
    /// through the gradient of this op is reported as an error.
    pub fn instance_norm(&self, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
        let (value, xhat, inv_std) = kernels::instance_norm(self.value(), gamma.value(), beta.value(), eps)?;
        Ok(Var::from_op(
            value,
            "instance_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |a| {
                if crate::var::is_grad_enabled() {
                    return Err(Error::Graph("instance_norm does not support higher-order gradients".into()));
                }
                let (dx, dg, db) =
                    kernels::instance_norm_backward(a.grad.value(), &xhat, &inv_std, a.inputs[1].value());
                Ok(vec![
                    a.needs[0].then(|| Var::constant(dx)),
                    a.needs[1].then(|| Var::constant(dg)),
                    a.needs[2].then(|| Var::constant(db)),
                ])
            }),
        ))
    }

    /// Log-softmax over the channel axis.
    pub fn log_softmax_channels(&self) -> Result<Var> {
        let [n, _, h, w] = self.shape().0;
        let reduced = Shape::new(n, 1, h, w);
        // The shift is a constant; log-softmax is invariant to it.
        let max = channel_max(self.value(), reduced);
        let z = self.sub(&Var::constant(max))?;
        let lse = z.exp()?.sum_to(reduced)?.log()?;
        z.sub(&lse)
    }
}

fn channel_max(x: &Tensor, reduced: Shape) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let hw = h * w;
    let mut out = vec![f32::NEG_INFINITY; reduced.numel()];
    for i in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            for (o, &v) in out[i * hw..(i + 1) * hw].iter_mut().zip(plane) {
                *o = o.max(v);
            }
        }
    }
    Tensor::from_vec(reduced, out).expect("reduced shape matches buffer")
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
    let value = kernels::concat_channels(&values)?;
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape().c()).collect();
    Ok(Var::from_op(
        value,
        "concat_channels",
        parts.to_vec(),
        Box::new(move |a| {
            let mut start = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for (i, &len) in sizes.iter().enumerate() {
                out.push(a.needs[i].then(|| a.grad.narrow_channels(start, len)).transpose()?);
                start += len;
            }
            Ok(out)
        }),
    ))
}

/// Transposed convolution: the gradient of `<grad, conv2d(x, w)>` with respect to `x`.
pub fn conv_input_grad(grad: &Var, w: &Var, x_shape: Shape, geom: ConvGeom) -> Result<Var> {
    let value = kernels::conv2d_input_grad(grad.value(), w.value(), x_shape, geom)?;
    let (gs, ws) = (grad.shape(), w.shape());
    Ok(Var::from_op(
        value,
        "conv_input_grad",
        vec![grad.clone(), w.clone()],
        Box::new(move |a| {
            let (g, w) = (&a.inputs[0], &a.inputs[1]);
            let h = a.grad;
            let dg = a.needs[0].then(|| h.conv2d(w, geom)).transpose()?;
            let dw = a.needs[1].then(|| conv_weight_grad(h, g, ws, geom)).transpose()?;
            debug_assert!(dg.as_ref().is_none_or(|d| d.shape() == gs));
            Ok(vec![dg, dw])
        }),
    ))
}

/// The gradient of `<grad, conv2d(x, w)>` with respect to `w`.
pub fn conv_weight_grad(x: &Var, grad: &Var, w_shape: Shape, geom: ConvGeom) -> Result<Var> {
    let value = kernels::conv2d_weight_grad(x.value(), grad.value(), w_shape, geom)?;
    let xs = x.shape();
    Ok(Var::from_op(
        value,
        "conv_weight_grad",
        vec![x.clone(), grad.clone()],
        Box::new(move |a| {
            let (x, g) = (&a.inputs[0], &a.inputs[1]);
            let k = a.grad;
            Ok(vec![
                a.needs[0].then(|| conv_input_grad(g, k, xs, geom)).transpose()?,
                a.needs[1].then(|| x.conv2d(k, geom)).transpose()?,
            ])
        }),
    ))
}

fn scatter(src: &Var, idx: Rc<Vec<u32>>, shape: Shape) -> Result<Var> {
    let value = kernels::scatter_add(src.value(), &idx, shape);
    let src_shape = src.shape();
    Ok(unary(src, value, "scatter", move |a| gather(a.grad, idx.clone(), src_shape)))
}

fn gather(src: &Var, idx: Rc<Vec<u32>>, shape: Shape) -> Result<Var> {
    let value = kernels::gather(src.value(), &idx, shape);
    let src_shape = src.shape();
    Ok(unary(src, value, "gather", move |a| scatter(a.grad, idx.clone(), src_shape)))
}
