//! Noise schedule, forward noising, score/`x0` prediction and the ξ-mixed
//! reverse step.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// `beta[t-1]` is `β_t`.
    pub beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        let beta: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    /// Linear β from 1e-4 to 0.02 over 1000 steps.
    pub fn reference() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::param("every beta must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule { beta, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::param(format!("time step {t} outside [1, {}]", self.t_max())));
        }
        Ok(())
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `σ̄_t = sqrt((1 − ᾱ_t)/ᾱ_t)`.
    pub fn sigma_bar(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        ((1.0 - a) / a).sqrt()
    }
}

pub fn forward_noise(x0: &ArrayView2<f64>, t: usize, eps: &ArrayView2<f64>, sched: &DiffusionSchedule) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    same_shape(x0, eps)?;
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| sa * x + sn * e))
}

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Noise prediction `ε(x_t, t)` in normalised image units.
pub trait NoisePredictor: Sync {
    /// `last_estimate` is the most recent data-consistent `x̂0` (normalised),
    /// if any. Learned networks ignore it.
    fn predict_eps(&self, x_t: &ArrayView2<f64>, t: usize, last_estimate: Option<&Array2<f64>>) -> Result<Array2<f64>>;
}

/// `s(x_t) = −ε(x_t, t)/sqrt(1 − ᾱ_t)`.
pub fn score_eval(
    net: &dyn NoisePredictor,
    x_t: &ArrayView2<f64>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    let eps = net.predict_eps(x_t, t, None)?;
    Ok(score_from_eps(&eps.view(), t, sched))
}

pub fn score_from_eps(eps: &ArrayView2<f64>, t: usize, sched: &DiffusionSchedule) -> Array2<f64> {
    let sn = (1.0 - sched.alpha_bar(t)).sqrt();
    eps.mapv(|e| -e / sn)
}

/// `z0 = (x_t + (1 − ᾱ_t) s)/sqrt(ᾱ_t)`.
pub fn predict_x0_from_score(x_t: &ArrayView2<f64>, score: &ArrayView2<f64>, t: usize, sched: &DiffusionSchedule) -> Array2<f64> {
    let a = sched.alpha_bar(t);
    let sa = a.sqrt();
    Zip::from(x_t).and(score).map_collect(|&x, &s| (x + (1.0 - a) * s) / sa)
}

pub fn predict_x0(net: &dyn NoisePredictor, x_t: &ArrayView2<f64>, t: usize, sched: &DiffusionSchedule) -> Result<Array2<f64>> {
    let s = score_eval(net, x_t, t, sched)?;
    Ok(predict_x0_from_score(x_t, &s.view(), t, sched))
}

/// `x_{t'} = sqrt(ᾱ_{t'}) x̂0 + sqrt(1 − ᾱ_{t'}) (sqrt(1 − ξ) ε̂ + sqrt(ξ) ε)` with
/// `ε̂ = (x_t − sqrt(ᾱ_t) x̂0)/sqrt(1 − ᾱ_t)`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_mix_step(
    x_t: &ArrayView2<f64>,
    x0_hat: &ArrayView2<f64>,
    t: usize,
    t_prev: usize,
    xi: f64,
    eps_rand: &ArrayView2<f64>,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::param(format!("reverse step must decrease t ({t} -> {t_prev})")));
    }
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::param("xi must lie in [0, 1]"));
    }
    same_shape(x_t, x0_hat)?;
    same_shape(x_t, eps_rand)?;
    let a = sched.alpha_bar(t);
    let ap = sched.alpha_bar(t_prev);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let (sap, snp) = (ap.sqrt(), (1.0 - ap).sqrt());
    let (wd, wr) = ((1.0 - xi).sqrt(), xi.sqrt());
    Ok(Zip::from(x_t).and(x0_hat).and(eps_rand).map_collect(|&x, &x0, &e| {
        let eps_hat = (x - sa * x0) / sn;
        sap * x0 + snp * (wd * eps_hat + wr * e)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub lambda: f64,
    pub xi: f64,
    pub t_sample: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            lambda: 1e-3,
            xi: 1.0,
            t_sample: 100,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::param("lambda must be positive"));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::param("xi must lie in [0, 1]"));
        }
        if self.t_sample == 0 || self.t_sample > sched.t_max() {
            return Err(Error::param(format!(
                "T_sample {} outside [1, {}]",
                self.t_sample,
                sched.t_max()
            )));
        }
        Ok(())
    }

    /// Schedule indices visited by the sampler, descending, uniformly spaced
    /// from `T` down to 1.
    pub fn timesteps(&self, t_max: usize) -> Vec<usize> {
        let n = self.t_sample.min(t_max);
        let mut ts: Vec<usize> = if n <= 1 {
            vec![t_max]
        } else {
            (0..n)
                .map(|i| (1.0 + i as f64 * (t_max - 1) as f64 / (n - 1) as f64).round() as usize)
                .collect()
        };
        ts.dedup();
        ts.reverse();
        ts
    }
}

/// Returns the exact noise of a known clean image: `z0` reproduces `x0`.
pub struct TrueX0Oracle {
    pub x0: Array2<f64>,
    pub sched: DiffusionSchedule,
}

impl NoisePredictor for TrueX0Oracle {
    fn predict_eps(&self, x_t: &ArrayView2<f64>, t: usize, _: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        eps_toward(x_t, &self.x0.view(), t, &self.sched)
    }
}

/// Predicts the noise that makes `z0` equal to the latest data-consistent
/// estimate (or `init` before the first one), turning the sampler into a
/// proximal-point iteration on the data term.
pub struct CurrentEstimateOracle {
    pub init: Array2<f64>,
    pub sched: DiffusionSchedule,
}

impl NoisePredictor for CurrentEstimateOracle {
    fn predict_eps(&self, x_t: &ArrayView2<f64>, t: usize, last: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let target = last.unwrap_or(&self.init);
        eps_toward(x_t, &target.view(), t, &self.sched)
    }
}

fn eps_toward(x_t: &ArrayView2<f64>, x0: &ArrayView2<f64>, t: usize, sched: &DiffusionSchedule) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    same_shape(x_t, x0)?;
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Zip::from(x_t).and(x0).map_collect(|&x, &z| (x - sa * z) / sn))
}

/// Always predicts zero noise.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_eps(&self, x_t: &ArrayView2<f64>, _: usize, _: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x_t.raw_dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
    }

    fn unit_image(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::reference();
        let mut prod = 1.0;
        for t in 1..=s.t_max() {
            prod *= 1.0 - s.beta[t - 1];
            assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma_bar(t) > s.sigma_bar(t - 1));
        }
        assert!(s.alpha_bar(1) > 0.999 && s.alpha_bar(1000) < 1e-4);
        assert!(DiffusionSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = DiffusionSchedule::reference();
        let x0 = unit_image(16);
        let zero = Array2::zeros((16, 16));
        let xt = forward_noise(&x0.view(), 400, &zero.view(), &s).unwrap();
        let sa = s.alpha_bar(400).sqrt();
        assert!(xt.iter().zip(x0.iter()).all(|(a, b)| *a == sa * b));
        assert!(forward_noise(&x0.view(), 0, &zero.view(), &s).is_err());
        assert!(forward_noise(&x0.view(), 1001, &zero.view(), &s).is_err());

        // at t = T the signal is buried
        let eps = normal((16, 16), 1);
        let xt = forward_noise(&x0.view(), 1000, &eps.view(), &s).unwrap();
        let sig = (x0.mapv(|v| v * v).sum()).sqrt() * s.alpha_bar(1000).sqrt();
        let tot = xt.mapv(|v| v * v).sum().sqrt();
        assert!(sig / tot < 0.05);
    }

    #[test]
    fn forward_noise_variance() {
        let s = DiffusionSchedule::reference();
        let t = 300;
        let x0 = unit_image(100);
        let eps = normal((100, 100), 2);
        let xt = forward_noise(&x0.view(), t, &eps.view(), &s).unwrap();
        let sa = s.alpha_bar(t).sqrt();
        let r: Vec<f64> = xt.iter().zip(x0.iter()).map(|(a, b)| a - sa * b).collect();
        let n = r.len() as f64;
        let m = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = 1.0 - s.alpha_bar(t);
        // standard error of a sample variance of Gaussians: σ² sqrt(2/(n-1))
        assert!((var - expect).abs() < 3.0 * expect * (2.0 / (n - 1.0)).sqrt());
    }

    #[test]
    fn predict_x0_inverts_forward_noise() {
        let s = DiffusionSchedule::reference();
        let x0 = unit_image(12);
        let eps = normal((12, 12), 3);
        for &t in &[1, 250, 500, 750, 1000] {
            let xt = forward_noise(&x0.view(), t, &eps.view(), &s).unwrap();
            let oracle = TrueX0Oracle {
                x0: x0.clone(),
                sched: s.clone(),
            };
            let z = predict_x0(&oracle, &xt.view(), t, &s).unwrap();
            let err = z.iter().zip(x0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "t={t} err={err}");
            let z0 = predict_x0(&ZeroPredictor, &xt.view(), t, &s).unwrap();
            let sa = s.alpha_bar(t).sqrt();
            assert!(z0.iter().zip(xt.iter()).all(|(a, b)| (a - b / sa).abs() <= 1e-12 * (b / sa).abs().max(1.0)));
        }
    }

    #[test]
    fn ddim_step_trivial_cases() {
        let s = DiffusionSchedule::reference();
        let x0 = unit_image(10);
        let eps = normal((10, 10), 4);
        let rnd = normal((10, 10), 5);
        let (t, tp) = (600, 540);
        let xt = forward_noise(&x0.view(), t, &eps.view(), &s).unwrap();
        let out = ddim_mix_step(&xt.view(), &x0.view(), t, tp, 0.0, &rnd.view(), &s).unwrap();
        let expect = forward_noise(&x0.view(), tp, &eps.view(), &s).unwrap();
        assert!(out.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let again = ddim_mix_step(&xt.view(), &x0.view(), t, tp, 0.0, &rnd.view(), &s).unwrap();
        assert_eq!(out, again);

        let out = ddim_mix_step(&xt.view(), &x0.view(), t, tp, 1.0, &rnd.view(), &s).unwrap();
        let ap = s.alpha_bar(tp);
        let expect = Zip::from(&x0).and(&rnd).map_collect(|&a, &e| ap.sqrt() * a + (1.0 - ap).sqrt() * e);
        assert_eq!(out, expect);
        let other_xt = xt.mapv(|v| v + 3.0);
        let out2 = ddim_mix_step(&other_xt.view(), &x0.view(), t, tp, 1.0, &rnd.view(), &s).unwrap();
        assert_eq!(out, out2);

        assert!(ddim_mix_step(&xt.view(), &x0.view(), t, t, 0.5, &rnd.view(), &s).is_err());
        assert!(ddim_mix_step(&xt.view(), &x0.view(), t, tp, 1.5, &rnd.view(), &s).is_err());
    }

    #[test]
    fn ddim_half_mixing_variance() {
        let s = DiffusionSchedule::reference();
        let n = 100;
        let x0 = unit_image(n);
        let xt = forward_noise(&x0.view(), 500, &normal((n, n), 6).view(), &s).unwrap();
        let zero = Array2::zeros((n, n));
        let det = ddim_mix_step(&xt.view(), &x0.view(), 500, 400, 0.5, &zero.view(), &s).unwrap();
        let rnd = normal((n, n), 7);
        let out = ddim_mix_step(&xt.view(), &x0.view(), 500, 400, 0.5, &rnd.view(), &s).unwrap();
        let r: Vec<f64> = out.iter().zip(det.iter()).map(|(a, b)| a - b).collect();
        let cnt = r.len() as f64;
        let m = r.iter().sum::<f64>() / cnt;
        let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (cnt - 1.0);
        let expect = (1.0 - s.alpha_bar(400)) * 0.5;
        assert!((var - expect).abs() < 3.0 * expect * (2.0 / (cnt - 1.0)).sqrt());
    }

    #[test]
    fn sampler_timesteps() {
        let p = SamplerParams {
            t_sample: 100,
            ..SamplerParams::default()
        };
        let ts = p.timesteps(1000);
        assert_eq!(ts.len(), 100);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let full = SamplerParams {
            t_sample: 1000,
            ..p
        };
        assert_eq!(full.timesteps(1000), (1..=1000).rev().collect::<Vec<_>>());
        let one = SamplerParams { t_sample: 1, ..p };
        assert_eq!(one.timesteps(1000), vec![1000]);
        let s = DiffusionSchedule::reference();
        assert!(SamplerParams { t_sample: 1001, ..p }.validate(&s).is_err());
        assert!(SamplerParams { lambda: 0.0, ..p }.validate(&s).is_err());
    }
}
