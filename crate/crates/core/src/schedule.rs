//! Noise schedule, forward noising, DDIM reverse steps and guidance.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear-β discrete diffusion schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

/// Build a schedule with `steps` linearly spaced betas in `[beta_start, beta_end]`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Parameter(format!("schedule needs T >= 2, got {steps}")));
    }
    let valid = beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
    if !valid || !beta_start.is_finite() || !beta_end.is_finite() {
        return Err(Error::Parameter(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let span = (steps - 1) as f64;
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    let mut acc = 1.0;
    let alphas_cumprod = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(DiffusionSchedule {
        betas,
        alphas_cumprod,
    })
}

impl DiffusionSchedule {
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("timestep {t} outside [0, {})", self.num_steps())))
    }

    /// `n` evenly spaced sampling timesteps in descending order, ending at 0.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.num_steps();
        if n == 0 || n > total {
            return Err(Error::Parameter(format!(
                "DDIM step count {n} must lie in [1, {total}]"
            )));
        }
        let stride = total / n;
        Ok((0..n).rev().map(|i| i * stride).collect())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·noise`
pub fn add_noise<S: Real>(
    x0: &Tensor<S>,
    noise: &Tensor<S>,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<S>> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    x0.zip_map(noise, |x, n| a * x + b * n)
}

/// One DDIM update from timestep `t` to `t_prev`; `None` denotes the clean
/// endpoint (ᾱ = 1). `draw` supplies the Gaussian draw when `eta > 0`.
pub fn ddim_step<S: Real>(
    x_t: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    t_prev: Option<usize>,
    schedule: &DiffusionSchedule,
    eta: f64,
    draw: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if x_t.shape() != eps.shape() {
        return Err(shape_err("ddim_step", x_t.shape(), eps.shape()));
    }
    if !(eta >= 0.0) {
        return Err(Error::Parameter(format!("eta must be >= 0, got {eta}")));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) if p >= t => {
            return Err(Error::Parameter(format!("t_prev {p} must be below t {t}")));
        }
        Some(p) => schedule.alpha_bar(p)?,
        None => 1.0,
    };
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let draw = match (eta > 0.0, draw) {
        (true, Some(d)) if d.shape() == x_t.shape() => Some(d),
        (true, Some(d)) => return Err(shape_err("ddim_step draw", d.shape(), x_t.shape())),
        (true, None) => {
            return Err(Error::Parameter("eta > 0 requires a noise draw".into()));
        }
        (false, _) => None,
    };
    let sqrt_ab_t = S::lit(ab_t.sqrt());
    let sqrt_1m_ab_t = S::lit((1.0 - ab_t).sqrt());
    let sqrt_ab_prev = S::lit(ab_prev.sqrt());
    let dir_coef = S::lit((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
    let sigma_s = S::lit(sigma);
    let (lo, hi) = (-S::one(), S::one());
    let mut out = x_t.zip_map(eps, |x, e| {
        let x0 = ((x - sqrt_1m_ab_t * e) / sqrt_ab_t).max(lo).min(hi);
        // Noise consistent with the clamped x0.
        let e = (x - sqrt_ab_t * x0) / sqrt_1m_ab_t;
        sqrt_ab_prev * x0 + dir_coef * e
    })?;
    if let Some(d) = draw {
        for (o, &z) in out.data_mut().iter_mut().zip(d.data()) {
            *o += sigma_s * z;
        }
    }
    Ok(out)
}

/// Classifier-free guidance: `uncond + scale·(cond − uncond)`.
///
/// A scale of exactly 1 returns `cond` unchanged.
pub fn cfg_combine<S: Real>(
    uncond: &Tensor<S>,
    cond: &Tensor<S>,
    scale: f64,
) -> Result<Tensor<S>> {
    if scale == 1.0 {
        if uncond.shape() != cond.shape() {
            return Err(shape_err("cfg_combine", uncond.shape(), cond.shape()));
        }
        return Ok(cond.clone());
    }
    let s = S::lit(scale);
    uncond.zip_map(cond, |u, c| u + s * (c - u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_beta_product() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas_cumprod(), &[0.5, 0.25]);
    }

    #[test]
    fn default_schedule_matches_running_product() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // Independent oracle: explicit product of (1 - beta_i) per index.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            prod *= 1.0 - beta;
            assert!((s.alphas_cumprod()[i] - prod).abs() < 1e-12);
        }
        let last = s.alphas_cumprod()[999];
        assert!((last - 4.035e-5).abs() < 1e-7, "ᾱ_999 = {last}");
        assert!(s.alphas_cumprod().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn add_noise_closed_form() {
        let s = make_schedule(2, 0.75, 0.75).unwrap();
        let x = Tensor::<f64>::ones([2, 2]);
        let out = add_noise(&x, &x, 0, &s).unwrap();
        for v in out.data() {
            assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        }
        let zero = Tensor::zeros([2, 2]);
        let out = add_noise(&x, &zero, 1, &s).unwrap();
        assert_eq!(out.data()[0], s.alpha_bar(1).unwrap().sqrt());
        assert!(add_noise(&x, &x, 2, &s).is_err());
    }

    #[test]
    fn ddim_inverts_perfect_prediction() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.3).sin());
        let n = Tensor::from_fn([3, 4], |i| (i as f64 * 1.7).cos());
        let xt = add_noise(&x0, &n, 500, &s).unwrap();
        let rec = ddim_step(&xt, &n, 500, None, &s, 0.0, None).unwrap();
        for (a, b) in rec.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ddim_matches_scalar_formula() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x = Tensor::<f64>::new([3], vec![0.3, -1.2, 2.5]).unwrap();
        // The last entry drives x0 past the clamp.
        let e = Tensor::new([3], vec![0.1, 0.4, -0.7]).unwrap();
        let out = ddim_step(&x, &e, 600, Some(580), &s, 0.0, None).unwrap();
        let (at, ap) = (s.alphas_cumprod()[600], s.alphas_cumprod()[580]);
        for i in 0..3 {
            let (xv, ev) = (x.data()[i], e.data()[i]);
            let x0 = ((xv - (1.0 - at).sqrt() * ev) / at.sqrt()).clamp(-1.0, 1.0);
            let e0 = (xv - at.sqrt() * x0) / (1.0 - at).sqrt();
            let want = ap.sqrt() * x0 + (1.0 - ap).sqrt() * e0;
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
        let again = ddim_step(&x, &e, 600, Some(580), &s, 0.0, None).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn ddim_rejects_bad_arguments() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let x = Tensor::<f32>::zeros([2]);
        assert!(ddim_step(&x, &x, 5, Some(5), &s, 0.0, None).is_err());
        assert!(ddim_step(&x, &x, 5, Some(7), &s, 0.0, None).is_err());
        assert!(ddim_step(&x, &x, 5, Some(2), &s, 0.5, None).is_err());
        assert!(ddim_step(&x, &x, 5, Some(2), &s, 0.5, Some(&x)).is_ok());
    }

    #[test]
    fn timesteps_are_evenly_spaced() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (980, 0));
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
    }

    #[test]
    fn cfg_special_scales() {
        let u = Tensor::<f32>::from_fn([4], |i| 0.1 * i as f32 + 0.03);
        let c = Tensor::from_fn([4], |i| -0.7 * i as f32 + 0.11);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let z = Tensor::zeros([4]);
        let five = cfg_combine(&z, &c, 5.0).unwrap();
        assert_eq!(five, c.map(|v| 5.0 * v));
    }

    proptest! {
        #[test]
        fn add_noise_is_linear(
            xs in prop::collection::vec(-1.0f64..1.0, 8),
            ns in prop::collection::vec(-3.0f64..3.0, 8),
            t in 0usize..1000,
            k in -2.0f64..2.0,
        ) {
            let s = make_schedule(1000, 1e-4, 0.02).unwrap();
            let x = Tensor::new([8], xs).unwrap();
            let n = Tensor::new([8], ns).unwrap();
            let base = add_noise(&x, &n, t, &s).unwrap();
            let scaled = add_noise(&x.map(|v| k * v), &n.map(|v| k * v), t, &s).unwrap();
            for (a, b) in base.data().iter().zip(scaled.data()) {
                prop_assert!((k * a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn ddim_recovers_clamped_x0(
            xs in prop::collection::vec(-1.5f64..1.5, 6),
            ns in prop::collection::vec(-3.0f64..3.0, 6),
            t in 0usize..1000,
        ) {
            let s = make_schedule(1000, 1e-4, 0.02).unwrap();
            let x = Tensor::new([6], xs).unwrap();
            let n = Tensor::new([6], ns).unwrap();
            let xt = add_noise(&x, &n, t, &s).unwrap();
            let rec = ddim_step(&xt, &n, t, None, &s, 0.0, None).unwrap();
            for (r, v) in rec.data().iter().zip(x.data()) {
                prop_assert!((r - v.clamp(-1.0, 1.0)).abs() < 1e-5);
            }
        }

        #[test]
        fn cfg_of_equal_inputs_is_identity(
            xs in prop::collection::vec(-10.0f32..10.0, 5),
            scale in -10.0f64..10.0,
        ) {
            let a = Tensor::new([5], xs).unwrap();
            prop_assert_eq!(cfg_combine(&a, &a, scale).unwrap(), a);
        }
    }
}
