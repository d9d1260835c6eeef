//! Noise schedules, forward noising, and ancestral sampling for a denoiser
//! that predicts the clean sample directly.
//!
//! Steps are 1-based: `t = 1` is the least noisy step and `t = steps` the
//! most noisy. `alpha_bar(0)` is taken as 1 so the last sampling step
//! returns the predicted clean sample.

use std::fmt;
use std::str::FromStr;

use hoi_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown schedule kind `{other}` (expected cosine or linear)"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Largest per-step noise variance allowed by the cosine schedule.
const COSINE_MAX_BETA: f64 = 0.999;
/// Cap on the first cosine step so that `alpha_bar(1) > 0.99` also for
/// short schedules.
const COSINE_FIRST_BETA: f64 = 0.005;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Posterior `q(x_{t-1} | x_t, x_0)`:
/// mean `x0_coef · x0 + xt_coef · x_t`, variance `variance`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub x0_coef: f64,
    pub xt_coef: f64,
    pub variance: f64,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let start = (0.1 / steps as f64).min(1e-3);
            let end = (20.0 / steps as f64).min(0.999);
            (0..steps).map(|i| start + (end - start) * i as f64 / (steps - 1) as f64).collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps)
                .map(|i| {
                    let b = (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(COSINE_MAX_BETA);
                    if i == 0 {
                        b.min(COSINE_FIRST_BETA)
                    } else {
                        b
                    }
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Per-step variances, index `t - 1`.
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Cumulative signal fractions, index `t - 1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range { what: "diffusion step", value: t, valid: format!("1..={}", self.steps()) });
        }
        Ok(())
    }

    /// `alpha_bar(t)` for `0 <= t <= steps`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn posterior(&self, t: usize) -> Result<Posterior> {
        self.check_step(t)?;
        if t == 1 {
            return Ok(Posterior { x0_coef: 1.0, xt_coef: 0.0, variance: 0.0 });
        }
        let (ab, ab_prev, b) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        Ok(Posterior {
            x0_coef: ab_prev.sqrt() * b / (1.0 - ab),
            xt_coef: (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            variance: b * (1.0 - ab_prev) / (1.0 - ab),
        })
    }
}

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) eps`
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("q_sample", x0, eps)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + s * e))
}

/// One ancestral step from `x_t` given the predicted clean sample. At
/// `t = 1` the posterior variance is zero and `noise` is ignored.
pub fn ddpm_step(x_t: &Tensor, x0_hat: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    same_shape("ddpm_step x0_hat", x_t, x0_hat)?;
    same_shape("ddpm_step noise", x_t, noise)?;
    let p = sched.posterior(t)?;
    let mut out = x0_hat.zip_map(x_t, |a, b| p.x0_coef * a + p.xt_coef * b);
    if t > 1 {
        let sd = p.variance.sqrt();
        out = out.zip_map(noise, |m, n| m + sd * n);
    }
    Ok(out)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

/// Runs `t = steps, …, 1` from Gaussian noise. `denoiser(x_t, t)` returns
/// the predicted clean sample; the prediction at `t = 1` is returned.
pub fn sample_loop<F>(mut denoiser: F, shape: (usize, usize), sched: &NoiseSchedule, seed: u64) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(shape.0, shape.1, &mut rng);
    for t in (1..=sched.steps()).rev() {
        let x0_hat = denoiser(&x, t)?;
        same_shape("denoiser output", &x, &x0_hat)?;
        if t == 1 {
            return Ok(x0_hat);
        }
        let noise = gaussian(shape.0, shape.1, &mut rng);
        x = ddpm_step(&x, &x0_hat, t, sched, &noise)?;
    }
    unreachable!("schedules have at least two steps")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_satisfy_invariants() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in [2, 3, 10, 100, 1000] {
                let s = make_schedule(steps, kind).unwrap();
                let ab = s.alpha_bars();
                assert!(ab[0] > 0.99, "{kind} {steps}: first alpha_bar {}", ab[0]);
                assert!(ab.windows(2).all(|w| w[1] < w[0]), "{kind} {steps} not decreasing");
                assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
                assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
            }
        }
        let c = make_schedule(100, ScheduleKind::Cosine).unwrap();
        assert!(c.alpha_bar(100) < 1e-3);
    }

    #[test]
    fn alpha_bar_is_product_of_one_minus_beta() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = make_schedule(100, kind).unwrap();
            for t in 1..=100 {
                let prod: f64 = s.betas()[..t].iter().map(|b| 1.0 - b).product();
                assert!((prod - s.alpha_bar(t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
        assert_eq!("cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
    }

    #[test]
    fn q_sample_without_noise_scales_signal() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let x0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let xt = q_sample(&x0, 4, &Tensor::zeros(2, 2), &s).unwrap();
        assert_eq!(xt, x0.map(|v| s.alpha_bar(4).sqrt() * v));
        let eps = Tensor::filled(2, 2, 1.0);
        let near = q_sample(&x0, 1, &eps, &s).unwrap();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * 2.0 + (1.0 - s.alpha_bar(1).sqrt()) * 3.0;
        assert!(near.zip_map(&x0, |a, b| (a - b).abs()).max_abs() <= bound);
        assert!(q_sample(&x0, 1, &Tensor::zeros(1, 2), &s).is_err());
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
    }

    #[test]
    fn posterior_matches_gaussian_product_formula() {
        // Posterior of x_{t-1} from the Gaussian product of
        // q(x_t | x_{t-1}) and q(x_{t-1} | x_0).
        let s = make_schedule(50, ScheduleKind::Linear).unwrap();
        for t in 2..=50 {
            let (a_t, ab_prev) = (1.0 - s.betas()[t - 1], s.alpha_bars()[t - 2]);
            let prec = a_t / (1.0 - a_t) + 1.0 / (1.0 - ab_prev);
            let var = 1.0 / prec;
            let xt_coef = var * a_t.sqrt() / (1.0 - a_t);
            let x0_coef = var * ab_prev.sqrt() / (1.0 - ab_prev);
            let p = s.posterior(t).unwrap();
            assert!((p.variance - var).abs() < 1e-10);
            assert!((p.xt_coef - xt_coef).abs() < 1e-10);
            assert!((p.x0_coef - x0_coef).abs() < 1e-10);
        }
        let p1 = s.posterior(1).unwrap();
        assert_eq!((p1.x0_coef, p1.xt_coef, p1.variance), (1.0, 0.0, 0.0));
    }

    #[test]
    fn last_step_is_deterministic() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7]]);
        let x0 = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let a = ddpm_step(&x, &x0, 1, &s, &Tensor::filled(1, 2, 5.0)).unwrap();
        let b = ddpm_step(&x, &x0, 1, &s, &Tensor::filled(1, 2, -5.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, x0);
    }

    #[test]
    fn constant_denoiser_fixes_output() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let c = Tensor::from_rows(&[vec![0.25, -1.5, 4.0]]);
        let out = sample_loop(|_, _| Ok(c.clone()), (1, 3), &s, 9).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn sampling_is_seeded() {
        let s = make_schedule(20, ScheduleKind::Linear).unwrap();
        let den = |x: &Tensor, _| Ok(x.scale(0.5));
        let a = sample_loop(den, (3, 2), &s, 1).unwrap();
        let b = sample_loop(den, (3, 2), &s, 1).unwrap();
        let c = sample_loop(den, (3, 2), &s, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
