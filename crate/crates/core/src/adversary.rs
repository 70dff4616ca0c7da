//! Discriminator and the loss suite.

use serde::{Deserialize, Serialize};

use tch::{nn, Kind, Tensor};

use crate::config::{Activation, TrainConfig, MASS_EPS};
use crate::error::{Error, Result};
use crate::nn_util::{activate, all_finite};

/// Strided convolutional stack ending in a linear map to one logit per image.
#[derive(Debug)]
pub struct Discriminator {
    stages: Vec<(nn::Conv2D, nn::Conv2D)>,
    pub head: nn::Linear,
    activation: Activation,
}

impl Discriminator {
    pub fn new(vs: nn::Path, cfg: &TrainConfig) -> Self {
        let mut c_in = 3i64;
        let mut side = cfg.image_size() as i64;
        let mut stages = Vec::new();
        for (i, &c) in cfg.disc_widths.iter().enumerate() {
            let c = c as i64;
            let same = nn::ConvConfig { padding: 1, ..Default::default() };
            let down = nn::ConvConfig { padding: 1, stride: 2, ..Default::default() };
            let p = &vs / format!("stage{i}");
            stages.push((nn::conv2d(&p / "conv", c_in, c, 3, same), nn::conv2d(&p / "down", c, c, 4, down)));
            c_in = c;
            side /= 2;
        }
        let head = nn::linear(&vs / "head", c_in * side * side, 1, Default::default());
        Self { stages, head, activation: Activation::LeakyRelu }
    }

    /// Raw logits `[B]`. Does not check finiteness; see [`Discriminator::score`].
    pub fn logits(&self, images: &Tensor) -> Tensor {
        let mut h = images.shallow_clone();
        for (conv, down) in &self.stages {
            h = activate(&h.apply(conv), self.activation);
            h = activate(&h.apply(down), self.activation);
        }
        h.flatten(1, -1).apply(&self.head).squeeze_dim(-1)
    }

    pub fn score(&self, images: &Tensor) -> Result<Tensor> {
        let size = images.size();
        if size.len() != 4 || size[1] != 3 {
            return Err(Error::Shape(format!("discriminator expects [B, 3, H, W], got {size:?}")));
        }
        if !all_finite(images) {
            return Err(Error::NonFinite("discriminator input".into()));
        }
        Ok(self.logits(images))
    }
}

/// Non-saturating generator loss, `mean softplus(-s_fake)`.
pub fn generator_gan_loss(fake_scores: &Tensor) -> Tensor {
    (-fake_scores).softplus().mean(fake_scores.kind())
}

/// Logistic discriminator loss, `mean softplus(s_fake) + mean softplus(-s_real)`.
pub fn discriminator_gan_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Tensor {
    fake_scores.softplus().mean(fake_scores.kind()) + (-real_scores).softplus().mean(real_scores.kind())
}

/// R1 penalty: batch mean of `|grad_x D(x)|^2` at real samples. The result
/// stays differentiable with respect to the discriminator parameters.
pub fn r1_gradient_penalty(score: impl Fn(&Tensor) -> Result<Tensor>, real: &Tensor) -> Result<Tensor> {
    let x = real.detach().set_requires_grad(true);
    let s = score(&x)?;
    if !s.requires_grad() {
        return Ok(Tensor::zeros([], (real.kind(), real.device())));
    }
    let grads = Tensor::f_run_backward(&[s.sum(s.kind())], &[&x], true, true)?;
    let g = &grads[0];
    if !g.defined() {
        return Ok(Tensor::zeros([], (real.kind(), real.device())));
    }
    let b = g.size()[0];
    Ok(g.square().reshape([b, -1]).sum_dim_intlist(1, false, g.kind()).mean(g.kind()))
}

/// `sum_k sum_p (M_k(p) / sum_p' M_k(p')) |p - x_k|^2`, averaged over the batch.
///
/// `part_masks` `[B, K, H, W]` excludes the background, `centers` is `[B, K, 2]`
/// and `coords` `[H, W, 2]` holds the `(x, y)` of every mask pixel.
pub fn concentration_loss(part_masks: &Tensor, centers: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (ms, cs, gs) = (part_masks.size(), centers.size(), coords.size());
    if ms.len() != 4 || cs != [ms[0], ms[1], 2] || gs != [ms[2], ms[3], 2] {
        return Err(Error::Shape(format!("concentration masks {ms:?}, centers {cs:?}, coords {gs:?}")));
    }
    let kind = part_masks.kind();
    let diff = coords.view([1, 1, gs[0], gs[1], 2]) - centers.view([cs[0], cs[1], 1, 1, 2]);
    let dist2 = diff.square().sum_dim_intlist(-1, false, kind);
    let mass = part_masks.sum_dim_intlist(&[2i64, 3][..], true, kind) + MASS_EPS;
    let per_part = (part_masks / mass * dist2).sum_dim_intlist(&[2i64, 3][..], false, kind);
    Ok(per_part.sum_dim_intlist(1, false, kind).mean(kind))
}

/// `sum_k max(0, sum_p H_k(p) - sum_p M_k(p))`, averaged over the batch.
pub fn area_loss(heatmaps: &Tensor, part_masks: &Tensor) -> Result<Tensor> {
    if heatmaps.size() != part_masks.size() || heatmaps.dim() != 4 {
        return Err(Error::Shape(format!("area heatmaps {:?} vs masks {:?}", heatmaps.size(), part_masks.size())));
    }
    let kind = part_masks.kind();
    let gap = heatmaps.sum_dim_intlist(&[2i64, 3][..], false, kind) - part_masks.sum_dim_intlist(&[2i64, 3][..], false, kind);
    Ok(gap.relu().sum_dim_intlist(1, false, kind).mean(kind))
}

/// Effective weights of the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gp: f64,
    pub con: f64,
    pub area: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { gp: cfg.effective_lambda_gp(), con: cfg.effective_lambda_con(), area: cfg.effective_lambda_area() }
    }
}

/// One record per training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub g_gan: f64,
    pub d_gan: f64,
    pub gp: f64,
    pub con: f64,
    pub area: f64,
    pub g_total: f64,
    pub d_total: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }

    pub fn is_finite(&self) -> bool {
        [self.g_gan, self.d_gan, self.gp, self.con, self.area, self.g_total, self.d_total].iter().all(|v| v.is_finite())
    }
}

/// Raw loss terms as tensors, so the totals stay differentiable.
#[derive(Debug)]
pub struct LossTerms {
    pub g_gan: Tensor,
    pub d_gan: Tensor,
    pub gp: Tensor,
    pub con: Tensor,
    pub area: Tensor,
}

/// `g_total = g_gan + l_con con + l_area area`, `d_total = d_gan + l_gp gp`.
pub fn compose_losses(terms: &LossTerms, weights: LossWeights, step: u64) -> (Tensor, Tensor, LossReport) {
    let g_total = &terms.g_gan + &terms.con * weights.con + &terms.area * weights.area;
    let d_total = &terms.d_gan + &terms.gp * weights.gp;
    let v = |t: &Tensor| t.double_value(&[]);
    let report = LossReport {
        step,
        g_gan: v(&terms.g_gan),
        d_gan: v(&terms.d_gan),
        gp: v(&terms.gp),
        con: v(&terms.con),
        area: v(&terms.area),
        g_total: v(&g_total),
        d_total: v(&d_total),
    };
    (g_total, d_total, report)
}

/// Scalar-only version of [`compose_losses`].
pub fn compose_values(g_gan: f64, d_gan: f64, gp: f64, con: f64, area: f64, w: LossWeights) -> (f64, f64) {
    (g_gan + w.con * con + w.area * area, d_gan + w.gp * gp)
}

/// Double-precision scalar tensor.
pub fn scalar(value: f64) -> Tensor {
    Tensor::from(value).to_kind(Kind::Double)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_util::{init_var_store, to_vec_f64};
    use tch::Device;

    const D: (Kind, Device) = (Kind::Double, Device::Cpu);

    fn v(t: &Tensor) -> f64 {
        t.double_value(&[])
    }

    #[test]
    fn gan_loss_values() {
        assert!((v(&generator_gan_loss(&Tensor::zeros([3], D))) - 2f64.ln()).abs() < 1e-15);
        assert!(v(&generator_gan_loss(&Tensor::from_slice(&[1e4f64]))) < 1e-300);
        let s = Tensor::from_slice(&[1.0f64, -1.0]);
        let expected = ((1.0 + (-1f64).exp()).ln() + (1.0 + 1f64.exp()).ln()) / 2.0;
        assert!((v(&generator_gan_loss(&s)) - expected).abs() < 1e-15);
        assert!((expected - 0.813262).abs() < 1e-6);
        assert!((v(&discriminator_gan_loss(&Tensor::zeros([2], D), &Tensor::zeros([2], D))) - 4f64.ln()).abs() < 1e-15);
        let perfect = discriminator_gan_loss(&Tensor::from_slice(&[1e4f64]), &Tensor::from_slice(&[-1e4f64]));
        assert!(v(&perfect) < 1e-300);
    }

    #[test]
    fn r1_on_linear_and_constant_critics() {
        let a = Tensor::randn([1, 3, 4, 4], D);
        let real = Tensor::randn([5, 3, 4, 4], D);
        let linear = |x: &Tensor| Ok((x * &a).sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Double));
        let gp = v(&r1_gradient_penalty(linear, &real).unwrap());
        let norm2 = v(&a.square().sum(Kind::Double));
        assert!((gp - norm2).abs() <= 1e-12 * norm2);
        let constant = |x: &Tensor| Ok(x.zeros_like().sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Double) + 3.0);
        assert_eq!(v(&r1_gradient_penalty(constant, &real).unwrap()), 0.0);
    }

    #[test]
    fn concentration_four_pixel_example() {
        let masks = Tensor::full([1, 1, 2, 2], 0.25, D);
        let coords = Tensor::from_slice(&[-0.5f64, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5, 0.5]).view([2, 2, 2]);
        let centers = Tensor::zeros([1, 1, 2], D);
        let loss = v(&concentration_loss(&masks, &centers, &coords).unwrap());
        assert!((loss - 0.5).abs() < 1e-8);
        let scaled = v(&concentration_loss(&(&masks * 7.0), &centers, &coords).unwrap());
        assert!((scaled - loss).abs() < 1e-8);
        let mut delta = Tensor::zeros([1, 1, 2, 2], D);
        let _ = delta.get(0).get(0).get(1).get(1).fill_(1.0);
        let at = Tensor::from_slice(&[0.5f64, 0.5]).view([1, 1, 2]);
        assert!(v(&concentration_loss(&delta, &at, &coords).unwrap()) < 1e-12);
        delta = delta.view([1, 1, 4]);
        assert!(concentration_loss(&delta, &at, &coords).is_err());
    }

    #[test]
    fn area_hinge() {
        let mut h = Tensor::zeros([1, 2, 1, 5], D);
        let _ = h.get(0).get(0).fill_(1.0);
        let m = Tensor::zeros([1, 2, 1, 5], D);
        let _ = m.get(0).get(0).narrow(1, 0, 3).fill_(1.0);
        let _ = m.get(0).get(1).fill_(0.1);
        assert!((v(&area_loss(&h, &m).unwrap()) - 2.0).abs() < 1e-15);
        assert_eq!(v(&area_loss(&(&m * 0.0), &m).unwrap()), 0.0);
        h = h.narrow(1, 0, 1);
        assert!(area_loss(&h, &m).is_err());
    }

    #[test]
    fn area_gradient_is_minus_one_on_active_part() {
        let h = Tensor::ones([1, 2, 2, 2], D) * Tensor::from_slice(&[1.0f64, 0.0]).view([1, 2, 1, 1]);
        let m = (Tensor::ones([1, 2, 2, 2], D) * 0.5).set_requires_grad(true);
        let loss = area_loss(&h, &m).unwrap();
        let g = Tensor::run_backward(&[loss], &[&m], false, false);
        let gv = to_vec_f64(&g[0]);
        assert!(gv[..4].iter().all(|&x| x == -1.0));
        assert!(gv[4..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn composition_arithmetic() {
        let one = || scalar(1.0);
        let terms = LossTerms { g_gan: one(), d_gan: one(), gp: scalar(0.2), con: one(), area: one() };
        let (g, d, r) = compose_losses(&terms, LossWeights { gp: 10.0, con: 10.0, area: 1.0 }, 3);
        assert_eq!(v(&g), 12.0);
        assert!((v(&d) - 3.0).abs() < 1e-15);
        assert_eq!(r.step, 3);
        let (g0, d0, _) = compose_losses(&terms, LossWeights { gp: 0.0, con: 0.0, area: 0.0 }, 0);
        assert_eq!((v(&g0), v(&d0)), (1.0, 1.0));
        let line = r.to_json_line();
        let back: LossReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn discriminator_contract() {
        let cfg = TrainConfig::tiny();
        let vs = nn::VarStore::new(Device::Cpu);
        let disc = Discriminator::new(vs.root(), &cfg);
        init_var_store(&vs, 9);
        let s = cfg.image_size() as i64;
        let x = Tensor::randn([2, 3, s, s], (Kind::Float, Device::Cpu));
        let a = disc.score(&x).unwrap();
        assert_eq!(a.size(), vec![2]);
        assert!(a.equal(&disc.score(&x).unwrap()));
        let bad = x.copy();
        let _ = bad.get(0).get(0).get(0).get(0).fill_(f64::NAN);
        assert!(matches!(disc.score(&bad), Err(Error::NonFinite(_))));
        tch::no_grad(|| {
            for (_, mut t) in vs.variables() {
                let _ = t.zero_();
            }
        });
        assert_eq!(disc.score(&x).unwrap().abs().max().double_value(&[]), 0.0);
    }
}
