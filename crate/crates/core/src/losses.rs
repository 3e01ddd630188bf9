//! Training objective terms and the λ_shape / learning-rate schedules.

use serde::{Deserialize, Serialize};
use uagan_autograd::{grad, Shape, Tensor, Var};

use crate::error::{Result, UaganError};

/// Added under the square root of the gradient norm so its derivative stays finite at 0.
pub const GP_NORM_EPS: f32 = 1e-16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_shape_max: f64,
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_gp: f64,
    pub n_critic: usize,
    /// Epoch at which λ_shape reaches its maximum.
    pub shape_ramp_end: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_seg: 100.0,
            lambda_shape_max: 100.0,
            lambda_cls: 1.0,
            lambda_rec: 10.0,
            lambda_gp: 10.0,
            n_critic: 5,
            shape_ramp_end: 60,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_seg, self.lambda_shape_max, self.lambda_cls, self.lambda_rec, self.lambda_gp];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(UaganError::Config("loss weights must be finite and ≥ 0".into()));
        }
        if self.n_critic == 0 {
            return Err(UaganError::Config("n_critic must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Learning-rate schedule parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_end: f64,
    pub hold: usize,
    pub total: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { lr0: 1e-4, lr_end: 1e-6, hold: 60, total: 100 }
    }
}

impl LrSchedule {
    /// `lr0` before `hold`, then linear down to `lr_end` at `total`.
    pub fn at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total {
            return Err(UaganError::Argument(format!("epoch {epoch} beyond schedule end {}", self.total)));
        }
        if epoch < self.hold || self.total == self.hold {
            return Ok(self.lr0);
        }
        let t = (epoch - self.hold) as f64 / (self.total - self.hold) as f64;
        Ok(self.lr0 * (1.0 - t) + self.lr_end * t)
    }
}

pub fn lr_schedule(epoch: usize) -> Result<f64> {
    LrSchedule::default().at(epoch)
}

/// `lambda_shape_max · min(epoch / ramp_end, 1)`.
pub fn lambda_shape_schedule(epoch: usize, weights: &LossWeights) -> f64 {
    if weights.shape_ramp_end == 0 || epoch >= weights.shape_ramp_end {
        return weights.lambda_shape_max;
    }
    weights.lambda_shape_max * epoch as f64 / weights.shape_ramp_end as f64
}

/// Per-step values of every loss term. Terms a variant does not compute are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: u64,
    pub d_adv: f64,
    pub d_cls: f64,
    pub d_gp: f64,
    pub g_adv: f64,
    pub g_cls: f64,
    pub g_rec: f64,
    pub l_seg: f64,
    pub l_shape: f64,
    #[serde(rename = "total_G")]
    pub total_g: f64,
    #[serde(rename = "total_D")]
    pub total_d: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 10] {
        [
            ("d_adv", self.d_adv),
            ("d_cls", self.d_cls),
            ("d_gp", self.d_gp),
            ("g_adv", self.g_adv),
            ("g_cls", self.g_cls),
            ("g_rec", self.g_rec),
            ("l_seg", self.l_seg),
            ("l_shape", self.l_shape),
            ("total_G", self.total_g),
            ("total_D", self.total_d),
        ]
    }

    pub fn generator_terms(&self) -> GeneratorTerms<f64> {
        GeneratorTerms {
            g_adv: self.g_adv,
            g_cls: self.g_cls,
            g_rec: self.g_rec,
            l_seg: self.l_seg,
            l_shape: self.l_shape,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (term, value) in self.terms() {
            check_finite(term, value, self.epoch, self.step)?;
        }
        Ok(())
    }
}

pub fn check_finite(term: &str, value: f64, epoch: usize, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(UaganError::TrainingFault { term: term.into(), value, epoch, step })
    }
}

/// The five generator-side terms, as values or as graph nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratorTerms<T> {
    pub g_adv: T,
    pub g_cls: T,
    pub g_rec: T,
    pub l_seg: T,
    pub l_shape: T,
}

/// Coefficients of `(g_adv, g_cls, g_rec, l_seg, l_shape)` in the generator objective.
pub fn generator_coefficients(weights: &LossWeights, epoch: usize) -> [f64; 5] {
    [1.0, weights.lambda_cls, weights.lambda_rec, weights.lambda_seg, lambda_shape_schedule(epoch, weights)]
}

/// `g_adv + λ_cls·g_cls + λ_rec·g_rec + λ_seg·l_seg + λ_shape(epoch)·l_shape`.
pub fn total_generator_loss(terms: &GeneratorTerms<f64>, weights: &LossWeights, epoch: usize) -> Result<f64> {
    let values = [terms.g_adv, terms.g_cls, terms.g_rec, terms.l_seg, terms.l_shape];
    let names = ["g_adv", "g_cls", "g_rec", "l_seg", "l_shape"];
    for (n, v) in names.iter().zip(values) {
        check_finite(n, v, epoch, 0)?;
    }
    let total: f64 = generator_coefficients(weights, epoch).iter().zip(values).map(|(c, v)| c * v).sum();
    check_finite("total_G", total, epoch, 0)?;
    Ok(total)
}

/// Graph counterpart of [`total_generator_loss`]; zero-weighted terms are left out.
pub fn compose_generator_loss(terms: &GeneratorTerms<Var>, weights: &LossWeights, epoch: usize) -> Result<Var> {
    let parts = [&terms.g_adv, &terms.g_cls, &terms.g_rec, &terms.l_seg, &terms.l_shape];
    let mut total = Var::scalar(0.0);
    for (c, v) in generator_coefficients(weights, epoch).into_iter().zip(parts) {
        if c != 0.0 {
            total = total.add(&v.mul_scalar(c as f32)?)?;
        }
    }
    Ok(total)
}

/// One-hot planes `[N, C, H, W]` for integer class maps.
fn one_hot_planes(classes: &[usize], n: usize, c: usize, hw: usize) -> Tensor {
    let mut data = vec![0.0f32; n * c * hw];
    for (p, &k) in classes.iter().enumerate() {
        let (i, j) = (p / hw, p % hw);
        data[(i * c + k) * hw + j] = 1.0;
    }
    Tensor::from_vec(Shape::new(n, c, 1, hw), data).expect("sized by construction")
}

/// Mean negative log-likelihood of `classes` under channel-softmax of `logits`.
fn channel_nll(logits: &Var, classes: &[usize]) -> Result<Var> {
    let [n, c, h, w] = logits.shape().0;
    let hw = h * w;
    let onehot = one_hot_planes(classes, n, c, hw).reshape(Shape::new(n, c, h, w))?;
    let picked = logits.log_softmax_channels()?.mul(&Var::constant(onehot))?;
    Ok(picked.sum_all()?.mul_scalar(-1.0 / (n * hw) as f32)?)
}

/// Pixel-mean cross entropy of 2-class `logits [N, 2, H, W]` against a `{0, 1}` mask `[N, 1, H, W]`.
pub fn seg_cross_entropy(logits: &Var, mask: &Tensor) -> Result<Var> {
    let [n, c, h, w] = logits.shape().0;
    if c != 2 || mask.shape() != Shape::new(n, 1, h, w) {
        return Err(UaganError::Shape(format!("logits {} and mask {} do not match", logits.shape(), mask.shape())));
    }
    let mut classes = Vec::with_capacity(mask.numel());
    for &v in mask.data() {
        classes.push(match v {
            0.0 => 0,
            1.0 => 1,
            _ => return Err(UaganError::Argument(format!("mask value {v} is not binary"))),
        });
    }
    channel_nll(logits, &classes)
}

/// Cross entropy between the segmentation of a translated image and the source annotation.
pub fn shape_consistency_loss(seg_of_fake: &Var, mask: &Tensor) -> Result<Var> {
    seg_cross_entropy(seg_of_fake, mask)
}

/// Mean absolute error.
pub fn cycle_loss(recovered: &Var, original: &Var) -> Result<Var> {
    if recovered.shape() != original.shape() {
        return Err(UaganError::Shape(format!("{} vs {}", recovered.shape(), original.shape())));
    }
    Ok(recovered.sub(original)?.abs()?.mean_all()?)
}

/// Modality classification cross entropy for logits `[N, M, 1, 1]`.
pub fn classification_loss(logits: &Var, labels: &[usize]) -> Result<Var> {
    let [n, m, h, w] = logits.shape().0;
    if (h, w) != (1, 1) || labels.len() != n {
        return Err(UaganError::Shape(format!("{} logits for {} labels", logits.shape(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(UaganError::Argument(format!("label {bad} out of range 0..{m}")));
    }
    channel_nll(logits, labels)
}

/// `mean_i (‖∇_x̂ Σ critic(x̂)‖₂ − 1)²` over interpolates `x̂_i = α_i·real_i + (1−α_i)·fake_i`.
/// The result stays differentiable with respect to the critic's parameters.
pub fn gradient_penalty(
    critic: impl Fn(&Var) -> Result<Var>,
    real: &Tensor,
    fake: &Tensor,
    alpha: &[f32],
) -> Result<Var> {
    let s = real.shape();
    if fake.shape() != s || alpha.len() != s.n() {
        return Err(UaganError::Shape(format!("real {s}, fake {}, {} alphas", fake.shape(), alpha.len())));
    }
    let per = s.numel() / s.n().max(1);
    let mixed: Vec<f32> = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let a = alpha[i / per];
            a * r + (1.0 - a) * f
        })
        .collect();
    let x_hat = Var::leaf(Tensor::from_vec(s, mixed)?);
    let out = critic(&x_hat)?;
    let g = grad(&out.sum_all()?, std::slice::from_ref(&x_hat), true)?.remove(0);
    let norms = g.square()?.sum_to(Shape::new(s.n(), 1, 1, 1))?.add_scalar(GP_NORM_EPS)?.sqrt()?;
    Ok(norms.add_scalar(-1.0)?.square()?.mean_all()?)
}

/// Discriminator-side graph terms.
pub struct DiscriminatorTerms {
    pub d_adv: Var,
    pub d_cls: Var,
    pub d_gp: Var,
}

impl DiscriminatorTerms {
    pub fn total(&self, weights: &LossWeights) -> Result<Var> {
        Ok(self
            .d_adv
            .add(&self.d_cls.mul_scalar(weights.lambda_cls as f32)?)?
            .add(&self.d_gp.mul_scalar(weights.lambda_gp as f32)?)?)
    }
}

/// Wasserstein critic terms: `mean src(fake) − mean src(real)`, classification of real
/// images against their true modality, and the gradient penalty.
pub fn discriminator_terms(
    critic: impl Fn(&Var) -> Result<(Var, Var)>,
    real: &Tensor,
    fake: &Tensor,
    real_labels: &[usize],
    alpha: &[f32],
) -> Result<DiscriminatorTerms> {
    let (src_real, cls_real) = critic(&Var::constant(real.clone()))?;
    let (src_fake, _) = critic(&Var::constant(fake.clone()))?;
    let d_adv = src_fake.mean_all()?.sub(&src_real.mean_all()?)?;
    let d_cls = classification_loss(&cls_real, real_labels)?;
    let d_gp = gradient_penalty(|x| Ok(critic(x)?.0), real, fake, alpha)?;
    Ok(DiscriminatorTerms { d_adv, d_cls, d_gp })
}

/// Generator adversarial terms: `−mean src(fake)` and classification of fakes against the target modality.
pub fn generator_adversarial_terms(
    critic: impl Fn(&Var) -> Result<(Var, Var)>,
    fake: &Var,
    target_labels: &[usize],
) -> Result<(Var, Var)> {
    let (src, cls) = critic(fake)?;
    Ok((src.mean_all()?.neg()?, classification_loss(&cls, target_labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(vals: &[f32], h: usize, w: usize) -> Var {
        Var::constant(Tensor::from_vec(Shape::new(1, 2, h, w), vals.to_vec()).unwrap())
    }

    fn mask(vals: &[f32], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w), vals.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = seg_cross_entropy(&logits(&[0.3; 8], 2, 2), &mask(&[0., 1., 1., 0.], 2, 2)).unwrap();
        assert!((uniform.item() - std::f32::consts::LN_2).abs() < 1e-6);
        let m = [0., 1., 1., 0.];
        let sat: Vec<f32> = m
            .iter()
            .map(|&v| if v == 0.0 { 50.0 } else { -50.0 })
            .chain(m.iter().map(|&v| if v == 1.0 { 50.0 } else { -50.0 }))
            .collect();
        assert!(seg_cross_entropy(&logits(&sat, 2, 2), &mask(&m, 2, 2)).unwrap().item() < 1e-6);
        let one = seg_cross_entropy(&logits(&[0.0, 1.0], 1, 1), &mask(&[1.0], 1, 1)).unwrap();
        let oracle = -(1f64.exp() / (1.0 + 1f64.exp())).ln();
        assert!((one.item() as f64 - oracle).abs() < 1e-6);
        assert!(matches!(
            seg_cross_entropy(&logits(&[0.0, 1.0], 1, 1), &mask(&[0.5], 1, 1)),
            Err(UaganError::Argument(_))
        ));
    }

    #[test]
    fn cycle_examples() {
        let a = Var::constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap());
        let b = Var::constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap());
        assert_eq!(cycle_loss(&b, &a).unwrap().item(), 1.0);
        assert_eq!(cycle_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(cycle_loss(&a, &a.add_scalar(0.5).unwrap()).unwrap().item(), 0.5);
    }

    #[test]
    fn classification_uniform() {
        let l = Var::constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let ce = classification_loss(&l, &[0]).unwrap().item() as f64;
        assert!((ce - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn constant_critic_penalty_is_one() {
        let real = Tensor::full(Shape::new(2, 1, 4, 4), 0.5);
        let fake = Tensor::full(Shape::new(2, 1, 4, 4), -0.5);
        let critic = |x: &Var| x.mul_scalar(0.0)?.add_scalar(3.0).map_err(Into::into);
        let gp = gradient_penalty(critic, &real, &fake, &[0.3, 0.7]).unwrap();
        assert!((gp.item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wasserstein_symmetric_on_equal_batches() {
        let real = Tensor::full(Shape::new(2, 1, 4, 4), 0.25);
        let critic = |x: &Var| -> Result<(Var, Var)> {
            let cls = x.sum_to(Shape::new(2, 1, 1, 1))?;
            Ok((x.square()?, concat3(&cls)?))
        };
        let t = discriminator_terms(critic, &real, &real, &[0, 1], &[0.5, 0.5]).unwrap();
        assert_eq!(t.d_adv.item(), 0.0);
    }

    fn concat3(x: &Var) -> Result<Var> {
        Ok(uagan_autograd::concat_channels(&[x.clone(), x.mul_scalar(2.0)?, x.neg()?])?)
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(10).unwrap(), 1e-4);
        assert_eq!(lr_schedule(100).unwrap(), 1e-6);
        assert_eq!(lr_schedule(80).unwrap(), 5.05e-5);
        assert!(matches!(lr_schedule(101), Err(UaganError::Argument(_))));
        let w = LossWeights::default();
        assert_eq!(lambda_shape_schedule(0, &w), 0.0);
        assert_eq!(lambda_shape_schedule(30, &w), 50.0);
        assert_eq!(lambda_shape_schedule(60, &w), 100.0);
        assert_eq!(lambda_shape_schedule(90, &w), 100.0);
    }

    #[test]
    fn total_generator_examples() {
        let w = LossWeights::default();
        let zero = GeneratorTerms::default();
        assert_eq!(total_generator_loss(&zero, &w, 5).unwrap(), 0.0);
        let seg = GeneratorTerms { l_seg: 0.5, ..Default::default() };
        assert_eq!(total_generator_loss(&seg, &w, 0).unwrap(), 50.0);
        let both = GeneratorTerms { l_seg: 0.5, l_shape: 0.2, ..Default::default() };
        assert!((total_generator_loss(&both, &w, 30).unwrap() - 60.0).abs() < 1e-12);
        let bad = GeneratorTerms { g_rec: f64::NAN, ..Default::default() };
        assert!(matches!(total_generator_loss(&bad, &w, 0), Err(UaganError::TrainingFault { .. })));
    }
}
