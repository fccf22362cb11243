//! Diagonal Gaussian latents and their closed-form divergences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor used whenever σ² appears in a divergence.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Shape(format!(
                "latent mean has {} dims, log-variance {}",
                mean.len(),
                log_var.len()
            )));
        }
        Ok(GaussianLatent { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianLatent {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_var).all(|v| v.is_finite())
    }

    /// `mean + temperature · σ ⊙ noise`.
    pub fn sample(&self, noise: &[f64], temperature: f64) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((m, lv), n)| m + temperature * (0.5 * lv).exp() * n)
            .collect()
    }

    pub fn on<'t>(&self, tape: &'t Tape) -> LatentVar<'t> {
        LatentVar {
            mean: tape.constant(Tensor::row(&self.mean)),
            log_var: tape.constant(Tensor::row(&self.log_var)),
        }
    }
}

/// A latent whose parameters are `[1, D]` tape values.
#[derive(Debug, Clone, Copy)]
pub struct LatentVar<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl LatentVar<'_> {
    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn value(&self) -> GaussianLatent {
        GaussianLatent {
            mean: self.mean.value().into_data(),
            log_var: self.log_var.value().into_data(),
        }
    }
}

/// `z = μ + exp(½·logσ²) ⊙ noise`, noise supplied by the caller.
pub fn reparameterize<'t>(latent: LatentVar<'t>, noise: &Tensor) -> Result<Var<'t>> {
    let tape = latent.mean.tape();
    if noise.len() != latent.dim() {
        return Err(Error::Shape(format!(
            "noise has {} values for a {}-dim latent",
            noise.len(),
            latent.dim()
        )));
    }
    let eps = tape.constant(Tensor::row(noise.data()));
    let std = latent.log_var.scale(0.5).exp();
    latent.mean.add(std.mul(eps)?)
}

/// Which argument order of the matching divergence to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(pred ‖ target)`.
    #[default]
    PredToTarget,
    /// `KL(target ‖ pred)`.
    TargetToPred,
}

/// `KL(pred ‖ target)` for diagonal Gaussians:
/// `½ (Σᵢ [log σ²_tᵢ − log σ²_pᵢ + σ²_pᵢ/σ²_tᵢ + (μ_tᵢ − μ_pᵢ)²/σ²_tᵢ] − D)`,
/// with both variances floored at [`VARIANCE_FLOOR`].
pub fn kl_divergence(pred: &GaussianLatent, target: &GaussianLatent) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "kl between {}-dim and {}-dim latents",
            pred.dim(),
            target.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..pred.dim() {
        let vp = pred.log_var[i].exp().max(VARIANCE_FLOOR);
        let vt = target.log_var[i].exp().max(VARIANCE_FLOOR);
        let dm = target.mean[i] - pred.mean[i];
        acc += vt.ln() - vp.ln() + vp / vt + dm * dm / vt - 1.0;
    }
    Ok(0.5 * acc)
}

/// [`kl_divergence`] with the argument order picked by `direction`.
pub fn kl_divergence_in(pred: &GaussianLatent, target: &GaussianLatent, direction: KlDirection) -> Result<f64> {
    match direction {
        KlDirection::PredToTarget => kl_divergence(pred, target),
        KlDirection::TargetToPred => kl_divergence(target, pred),
    }
}

/// Tape version of [`kl_divergence`]; gradients reach both arguments.
pub fn kl_divergence_var<'t>(pred: LatentVar<'t>, target: LatentVar<'t>) -> Result<Var<'t>> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "kl between {}-dim and {}-dim latents",
            pred.dim(),
            target.dim()
        )));
    }
    let d = pred.dim() as f64;
    let vp = pred.log_var.exp().clamp_min(VARIANCE_FLOOR);
    let vt = target.log_var.exp().clamp_min(VARIANCE_FLOOR);
    let dm = target.mean.sub(pred.mean)?;
    let terms = vt
        .log()
        .sub(vp.log())?
        .add(vp.div(vt)?)?
        .add(dm.square().div(vt)?)?;
    Ok(terms.sum().offset(-d).scale(0.5))
}

pub fn kl_divergence_directed<'t>(
    pred: LatentVar<'t>,
    target: LatentVar<'t>,
    direction: KlDirection,
) -> Result<Var<'t>> {
    match direction {
        KlDirection::PredToTarget => kl_divergence_var(pred, target),
        KlDirection::TargetToPred => kl_divergence_var(target, pred),
    }
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_to_standard_normal<'t>(latent: LatentVar<'t>) -> Result<Var<'t>> {
    let d = latent.dim() as f64;
    let terms = latent
        .mean
        .square()
        .add(latent.log_var.exp())?
        .sub(latent.log_var)?;
    Ok(terms.sum().offset(-d).scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::ParamStore;

    #[test]
    fn identical_distributions_have_zero_kl() {
        let p = GaussianLatent::new(vec![0.3, -1.0], vec![0.2, -0.7]).unwrap();
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn unit_mean_shift() {
        let p = GaussianLatent::new(vec![1.0], vec![0.0]).unwrap();
        let q = GaussianLatent::standard(1);
        assert!((kl_divergence(&p, &q).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn half_variance_against_standard() {
        let p = GaussianLatent::new(vec![0.0; 2], vec![0.5f64.ln(); 2]).unwrap();
        let q = GaussianLatent::standard(2);
        // 2 · ½(−ln ½ + ½ − 1) = ln 2 − ½
        let want = std::f64::consts::LN_2 - 0.5;
        assert!((kl_divergence(&p, &q).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.19315).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch() {
        let p = GaussianLatent::standard(2);
        let q = GaussianLatent::standard(3);
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn tape_kl_matches_scalar() {
        let p = GaussianLatent::new(vec![0.3, -1.0, 2.0], vec![0.2, -0.7, 1.1]).unwrap();
        let q = GaussianLatent::new(vec![-0.5, 0.1, 1.0], vec![-0.3, 0.4, 0.0]).unwrap();
        let tape = Tape::new();
        let v = kl_divergence_var(p.on(&tape), q.on(&tape)).unwrap().item();
        assert!((v - kl_divergence(&p, &q).unwrap()).abs() < 1e-12);
        let prior = kl_to_standard_normal(p.on(&tape)).unwrap().item();
        let eq3 = kl_divergence(&p, &GaussianLatent::standard(3)).unwrap();
        assert!((prior - eq3).abs() < 1e-6);
    }

    #[test]
    fn reparameterize_cases() {
        let tape = Tape::new();
        let l = GaussianLatent::new(vec![1.0, 2.0], vec![0.4, -0.4]).unwrap();
        let z = reparameterize(l.on(&tape), &Tensor::row(&[0.0, 0.0])).unwrap();
        assert_eq!(z.value().data(), &[1.0, 2.0]);
        let s = GaussianLatent::standard(2);
        let z = reparameterize(s.on(&tape), &Tensor::row(&[0.7, -1.1])).unwrap();
        assert_eq!(z.value().data(), &[0.7, -1.1]);
    }

    #[test]
    fn reparameterize_log_var_gradient_is_half() {
        let mut store = ParamStore::new();
        store.insert("mu", Tensor::row(&[0.2, -0.1, 0.0])).unwrap();
        store.insert("lv", Tensor::row(&[0.0, 0.0, 0.0])).unwrap();
        let tape = Tape::new();
        let lat = LatentVar {
            mean: tape.param(&store, "mu"),
            log_var: tape.param(&store, "lv"),
        };
        let g = reparameterize(lat, &Tensor::row(&[1.0; 3])).unwrap().sum().backward();
        assert_eq!(g.get(&store, "lv").unwrap().data(), &[0.5, 0.5, 0.5]);
        assert_eq!(g.get(&store, "mu").unwrap().data(), &[1.0, 1.0, 1.0]);

        let err = grad_check(&mut store, 1e-5, |tape, s| {
            let lat = LatentVar {
                mean: tape.param(s, "mu"),
                log_var: tape.param(s, "lv"),
            };
            Ok(reparameterize(lat, &Tensor::row(&[1.0, -0.4, 2.0]))?.square().sum())
        })
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn kl_gradients() {
        let mut store = ParamStore::new();
        store.insert("pm", Tensor::row(&[0.3, -1.0])).unwrap();
        store.insert("pv", Tensor::row(&[0.2, -0.7])).unwrap();
        store.insert("tm", Tensor::row(&[-0.5, 0.1])).unwrap();
        store.insert("tv", Tensor::row(&[-0.3, 0.4])).unwrap();
        let err = grad_check(&mut store, 1e-5, |tape, s| {
            let p = LatentVar {
                mean: tape.param(s, "pm"),
                log_var: tape.param(s, "pv"),
            };
            let t = LatentVar {
                mean: tape.param(s, "tm"),
                log_var: tape.param(s, "tv"),
            };
            kl_divergence_var(p, t)?.add(kl_to_standard_normal(p)?)
        })
        .unwrap();
        assert!(err < 1e-4);
    }
}
