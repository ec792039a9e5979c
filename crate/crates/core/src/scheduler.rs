//! Noise schedules, closed-form forward diffusion and DDIM stepping.
//!
//! `alpha_bar[t]` is the cumulative signal fraction at train timestep `t`,
//! with `alpha_bar[0] = 1` (clean data). Inference runs over a decreasing
//! subset of timesteps given by a [`TimestepMap`]; sampling progress is
//! `(i + 1) / N` after step `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    ScaledLinear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    num_train_steps: usize,
    alpha_bar: Vec<f64>,
    kind: ScheduleKind,
}

impl NoiseSchedule {
    /// Builds a schedule with `num_train_steps` noising steps.
    ///
    /// `scaled_linear` interpolates `sqrt(beta)` linearly between the two
    /// endpoints and squares it. `cosine` uses the squared-cosine signal
    /// profile (offset 0.008, betas capped at 0.999) and ignores the beta range.
    pub fn new(
        num_train_steps: usize,
        kind: ScheduleKind,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self> {
        if num_train_steps < 10 {
            return Err(Error::config(format!(
                "schedule needs at least 10 train steps, got {num_train_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let t_max = num_train_steps;
        let betas: Vec<f64> = match kind {
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (0..t_max)
                    .map(|i| {
                        let s = a + (b - a) * i as f64 / (t_max - 1) as f64;
                        s * s
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let x = (t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=t_max)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for beta in betas {
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let sched = Self {
            num_train_steps,
            alpha_bar,
            kind,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab[0] != 1.0 {
            return Err(Error::config("alpha_bar[0] must be exactly 1"));
        }
        for t in 1..ab.len() {
            if !(ab[t].is_finite() && ab[t] > 0.0 && ab[t] < ab[t - 1]) {
                return Err(Error::config(format!(
                    "alpha_bar must be finite, positive and strictly decreasing (t = {t})"
                )));
            }
        }
        Ok(())
    }

    /// The default 1000-step scaled-linear schedule over `[0.00085, 0.012]`.
    pub fn default_scaled_linear() -> Self {
        Self::new(1000, ScheduleKind::ScaledLinear, 0.00085, 0.012).expect("valid defaults")
    }

    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.num_train_steps {
            return Err(Error::contract(format!(
                "timestep {t} exceeds schedule length {}",
                self.num_train_steps
            )));
        }
        Ok(())
    }

    /// `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        x0.ensure_same_shape(eps, "forward_diffuse noise")?;
        let ab = self.alpha_bar[t];
        Ok(affine(x0, eps, ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Clean-image estimate `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
    pub fn predict_x0(&self, x_t: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if t == 0 {
            return Err(Error::contract("predict_x0 is undefined at t = 0"));
        }
        x_t.ensure_same_shape(eps_pred, "predict_x0 noise")?;
        let ab = self.alpha_bar[t];
        let inv = 1.0 / ab.sqrt();
        Ok(affine(x_t, eps_pred, inv, -(1.0 - ab).sqrt() * inv))
    }

    /// Standard deviation of the fresh noise added by an eta-DDIM step.
    pub fn ddim_sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        let (ab_t, ab_p) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt()
    }

    /// One eta-parameterised DDIM update from `t` to `t_prev`.
    ///
    /// With `eta = 0` this is deterministic and `noise` is not read.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_pred: &Tensor,
        t: usize,
        t_prev: usize,
        eta: f64,
        noise: &Tensor,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::contract(format!(
                "ddim_step needs t_prev < t, got t = {t}, t_prev = {t_prev}"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::contract(format!("eta must lie in [0, 1], got {eta}")));
        }
        x_t.ensure_same_shape(eps_pred, "ddim_step noise prediction")?;
        let ab_p = self.alpha_bar[t_prev];
        let sigma = self.ddim_sigma(t, t_prev, eta);
        let dir_var = 1.0 - ab_p - sigma * sigma;
        if dir_var < -1e-12 {
            return Err(Error::contract(format!(
                "internal invariant failed: sigma^2 exceeds 1 - alpha_bar[t_prev] ({dir_var})"
            )));
        }
        // x0_hat folded in: a x0_hat + b eps = (a / sqrt(ab_t)) x_t + (b - a sqrt((1 - ab_t) / ab_t)) eps
        let ab_t = self.alpha_bar[t];
        let (a, b) = (ab_p.sqrt(), dir_var.max(0.0).sqrt());
        let cx = a / ab_t.sqrt();
        let ce = b - cx * (1.0 - ab_t).sqrt();
        if sigma == 0.0 {
            return Ok(affine(x_t, eps_pred, cx, ce));
        }
        noise.ensure_same_shape(x_t, "ddim_step noise")?;
        let data = x_t
            .data()
            .iter()
            .zip(eps_pred.data())
            .zip(noise.data())
            .map(|((&x, &e), &n)| (cx * x as f64 + ce * e as f64 + sigma * n as f64) as f32)
            .collect();
        Ok(Tensor::new(x_t.shape(), data).expect("same shape"))
    }

    /// Re-noises `x_prev` (at `t_prev`) forward to `t`:
    /// `sqrt(ab_t / ab_prev) x_prev + sqrt(1 - ab_t / ab_prev) noise`.
    pub fn renoise(&self, x_prev: &Tensor, t_prev: usize, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if t_prev > t {
            return Err(Error::contract(format!(
                "renoise needs t_prev <= t, got t_prev = {t_prev}, t = {t}"
            )));
        }
        x_prev.ensure_same_shape(noise, "renoise noise")?;
        let ratio = self.alpha_bar[t] / self.alpha_bar[t_prev];
        Ok(affine(x_prev, noise, ratio.sqrt(), (1.0 - ratio).sqrt()))
    }
}

/// `a x + b y` elementwise, evaluated in f64 and rounded once.
fn affine(x: &Tensor, y: &Tensor, a: f64, b: f64) -> Tensor {
    x.zip_map(y, |u, v| (a * u as f64 + b * v as f64) as f32)
}

/// Decreasing train-timestep indices visited during sampling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TimestepMap {
    steps: Vec<usize>,
    /// Integer spacing between consecutive steps; `steps[0] = (N - 1) * stride + 1`.
    stride: usize,
}

impl TimestepMap {
    /// Evenly spaced "leading" timesteps with offset 1: for `T = 1000, N = 50`
    /// this yields `981, 961, ..., 1`.
    pub fn new(sched: &NoiseSchedule, num_inference_steps: usize) -> Result<Self> {
        let t_max = sched.num_train_steps();
        if num_inference_steps == 0 || num_inference_steps > t_max {
            return Err(Error::config(format!(
                "inference steps must lie in [1, {t_max}], got {num_inference_steps}"
            )));
        }
        let stride = t_max / num_inference_steps;
        let steps = (0..num_inference_steps)
            .map(|i| (num_inference_steps - 1 - i) * stride + 1)
            .collect();
        Ok(Self { steps, stride })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn t(&self, i: usize) -> usize {
        self.steps[i]
    }

    /// The timestep reached after step `i` (0 after the last step).
    pub fn t_prev(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }

    /// Fraction of sampling completed once step `i` finishes.
    pub fn progress(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.steps.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default_scaled_linear()
    }

    #[test]
    fn alpha_bar_starts_at_one() {
        assert_eq!(sched().alpha_bar(0), 1.0);
    }

    #[test]
    fn constant_beta_closed_form() {
        let s = NoiseSchedule::new(10, ScheduleKind::ScaledLinear, 0.1, 0.1).unwrap();
        for t in 0..=10 {
            let want = 0.9f64.powi(t as i32);
            assert!((s.alpha_bar(t) - want).abs() < 1e-12);
        }
        assert!((s.alpha_bar(10) - 0.34868).abs() < 1e-5);
    }

    #[test]
    fn cosine_is_strictly_decreasing() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Cosine, 0.0001, 0.02).unwrap();
        let ab = s.alpha_bars();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab[1000] > 0.0 && ab[1000] < 1.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::new(5, ScheduleKind::ScaledLinear, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(100, ScheduleKind::ScaledLinear, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(100, ScheduleKind::ScaledLinear, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(100, ScheduleKind::ScaledLinear, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_edge_cases() {
        let s = sched();
        let mut rng = stream(1);
        let x0 = normal(&mut rng, &[3, 4, 4]);
        let eps = normal(&mut rng, &[3, 4, 4]);
        assert_eq!(s.forward_diffuse(&x0, 0, &eps).unwrap(), x0);
        let zero = Tensor::zeros(&[3, 4, 4]);
        let got = s.forward_diffuse(&x0, 400, &zero).unwrap();
        let k = s.alpha_bar(400).sqrt();
        assert_eq!(got, x0.map(|v| (k * v as f64) as f32));
        assert!(s.forward_diffuse(&x0, 400, &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn predict_x0_inverts_forward() {
        let s = sched();
        let mut rng = stream(2);
        let x0 = normal(&mut rng, &[3, 8, 8]);
        let eps = normal(&mut rng, &[3, 8, 8]);
        for t in [1, 10, 500, 999, 1000] {
            let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
            let back = s.predict_x0(&xt, &eps, t).unwrap();
            assert!(back.max_abs_diff(&x0) <= 1e-5, "t = {t}");
        }
        assert!(s.predict_x0(&x0, &eps, 0).is_err());
    }

    #[test]
    fn predict_x0_of_pure_noise_component_is_zero() {
        let s = sched();
        let mut rng = stream(3);
        let eps = normal(&mut rng, &[3, 4, 4]);
        let xt = eps.scale((1.0 - s.alpha_bar(300)).sqrt() as f32);
        let x0 = s.predict_x0(&xt, &eps, 300).unwrap();
        assert!(x0.data().iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn predict_x0_matches_f64_loop() {
        let s = sched();
        let mut rng = stream(4);
        let xt = normal(&mut rng, &[3, 8, 8]);
        let e = normal(&mut rng, &[3, 8, 8]);
        let got = s.predict_x0(&xt, &e, 500).unwrap();
        let ab = s.alpha_bar(500);
        for i in 0..xt.len() {
            let want = (xt.data()[i] as f64 - (1.0 - ab).sqrt() * e.data()[i] as f64) / ab.sqrt();
            let rel = (got.data()[i] as f64 - want).abs() / want.abs().max(1e-3);
            assert!(rel < 1e-6, "index {i}: {} vs {want}", got.data()[i]);
        }
    }

    #[test]
    fn deterministic_ddim_reaches_forward_marginal() {
        let s = sched();
        let mut rng = stream(5);
        let x0 = normal(&mut rng, &[3, 8, 8]);
        let eps = normal(&mut rng, &[3, 8, 8]);
        let noise = normal(&mut rng, &[3, 8, 8]);
        for (t, tp) in [(981, 961), (501, 481), (21, 1), (1, 0)] {
            let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
            let a = s.ddim_step(&xt, &eps, t, tp, 0.0, &noise).unwrap();
            let want = s.forward_diffuse(&x0, tp, &eps).unwrap();
            assert!(a.max_abs_diff(&want) <= 1e-5);
            let b = s.ddim_step(&xt, &eps, t, tp, 0.0, &noise).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ddim_to_zero_returns_x0_hat() {
        let s = sched();
        let mut rng = stream(6);
        let xt = normal(&mut rng, &[3, 4, 4]);
        let e = normal(&mut rng, &[3, 4, 4]);
        let noise = normal(&mut rng, &[3, 4, 4]);
        let x0 = s.predict_x0(&xt, &e, 21).unwrap();
        for eta in [0.0, 1.0] {
            let got = s.ddim_step(&xt, &e, 21, 0, eta, &noise).unwrap();
            assert!(got.max_abs_diff(&x0) < 1e-6);
        }
    }

    #[test]
    fn ddim_rejects_bad_arguments() {
        let s = sched();
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(s.ddim_step(&x, &x, 10, 10, 0.0, &x).is_err());
        assert!(s.ddim_step(&x, &x, 10, 5, 1.5, &x).is_err());
    }

    #[test]
    fn renoise_identity_and_zero_noise() {
        let s = sched();
        let mut rng = stream(7);
        let x = normal(&mut rng, &[3, 4, 4]);
        let n = normal(&mut rng, &[3, 4, 4]);
        assert_eq!(s.renoise(&x, 300, 300, &n).unwrap(), x);
        let got = s.renoise(&x, 300, 320, &Tensor::zeros(&[3, 4, 4])).unwrap();
        let k = (s.alpha_bar(320) / s.alpha_bar(300)).sqrt();
        assert_eq!(got, x.map(|v| (k * v as f64) as f32));
    }

    #[test]
    fn timestep_map_conventions() {
        let s = sched();
        let m = TimestepMap::new(&s, 50).unwrap();
        assert_eq!(m.len(), 50);
        assert!(m.steps().windows(2).all(|w| w[1] < w[0]));
        assert!(m.t(0) >= 951);
        assert_eq!(&m.steps()[1..6], &[961, 941, 921, 901, 881]);
        assert_eq!(m.t(49), 1);
        assert_eq!(m.progress(49), 1.0);
        assert!((m.progress(0) - 0.02).abs() < 1e-12);

        let small = NoiseSchedule::new(10, ScheduleKind::ScaledLinear, 0.1, 0.1).unwrap();
        let m = TimestepMap::new(&small, 10).unwrap();
        assert_eq!(m.steps(), &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert!(TimestepMap::new(&small, 11).is_err());
        assert!(TimestepMap::new(&small, 0).is_err());
    }
}
