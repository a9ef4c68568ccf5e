//! Weighted CG data consistency coupled to the diffusion prior.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decomp::{cov_weights, decomp_apply, CovWeights, SinogramDecomposer};
use crate::denoiser::{Denoiser, Material};
use crate::diffusion::{ddim_mix_step, predict_x0_from_score, score_from_eps, DiffusionSchedule, NoisePredictor, SamplerParams};
use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, MaterialSinogram, SystemMatrix};
use crate::spectral::{EnergySinogram, StatWeights};

/// A linear map from images to data with its exact adjoint.
pub trait LinearOperator: Sync {
    fn image_shape(&self) -> (usize, usize);
    fn data_shape(&self) -> (usize, usize);
    fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>>;
    fn adjoint(&self, p: &ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl LinearOperator for FanBeamGeometry {
    fn image_shape(&self) -> (usize, usize) {
        FanBeamGeometry::image_shape(self)
    }
    fn data_shape(&self) -> (usize, usize) {
        self.sino_shape()
    }
    fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(x)
    }
    fn adjoint(&self, p: &ArrayView2<f64>) -> Result<Array2<f64>> {
        FanBeamGeometry::adjoint(self, p)
    }
}

impl LinearOperator for SystemMatrix {
    fn image_shape(&self) -> (usize, usize) {
        self.geometry().image_shape()
    }
    fn data_shape(&self) -> (usize, usize) {
        self.geometry().sino_shape()
    }
    fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(x)
    }
    fn adjoint(&self, p: &ArrayView2<f64>) -> Result<Array2<f64>> {
        SystemMatrix::adjoint(self, p)
    }
}

/// `A = I` on images of a fixed shape.
#[derive(Debug, Clone, Copy)]
pub struct IdentityOperator(pub (usize, usize));

impl LinearOperator for IdentityOperator {
    fn image_shape(&self) -> (usize, usize) {
        self.0
    }
    fn data_shape(&self) -> (usize, usize) {
        self.0
    }
    fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        check_shape(x, self.0)?;
        Ok(x.to_owned())
    }
    fn adjoint(&self, p: &ArrayView2<f64>) -> Result<Array2<f64>> {
        check_shape(p, self.0)?;
        Ok(p.to_owned())
    }
}

fn check_shape(a: &ArrayView2<f64>, shape: (usize, usize)) -> Result<()> {
    if a.dim() != shape {
        return Err(Error::DimensionMismatch {
            expected: vec![shape.0, shape.1],
            actual: a.shape().to_vec(),
        });
    }
    Ok(())
}

/// `½ Σ_n b_n (p̂_n − [Ax]_n)²` for one channel.
pub fn nll_datafit(x: &ArrayView2<f64>, p_hat: &ArrayView2<f64>, b: &ArrayView2<f64>, op: &dyn LinearOperator) -> Result<f64> {
    check_shape(p_hat, op.data_shape())?;
    check_shape(b, op.data_shape())?;
    let ax = op.apply(x)?;
    Ok(0.5 * Zip::from(&ax).and(p_hat).and(b).fold(0.0, |acc, &a, &p, &w| acc + w * (p - a) * (p - a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonNegMode {
    Clamp,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub iters: usize,
    pub tol: f64,
    pub nonneg: NonNegMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Array2<f64>,
    /// `‖rhs − Gx‖/‖rhs‖` at exit, before any clamping.
    pub residual: f64,
    pub iterations: usize,
    /// Every iterate including the start, when requested.
    pub iterates: Vec<Array2<f64>>,
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + x * y)
}

/// `G x = Aᵀ(b ⊙ A x) + μ x`.
pub fn normal_apply(op: &dyn LinearOperator, b: &ArrayView2<f64>, mu: f64, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut ax = op.apply(x)?;
    ax *= b;
    let mut g = op.adjoint(&ax.view())?;
    g.scaled_add(mu, x);
    Ok(g)
}

/// Conjugate gradients on `G x = rhs`, `G = Aᵀ diag(b) A + μ I`.
pub fn cg_normal(
    op: &dyn LinearOperator,
    b: &ArrayView2<f64>,
    mu: f64,
    rhs: &ArrayView2<f64>,
    x_init: &ArrayView2<f64>,
    opts: CgOptions,
    keep_iterates: bool,
) -> Result<CgResult> {
    if opts.iters == 0 {
        return Err(Error::param("CG needs at least one iteration"));
    }
    if !(mu > 0.0) {
        return Err(Error::param("proximal weight must be positive"));
    }
    if b.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::param("data weights must be positive"));
    }
    check_shape(rhs, op.image_shape())?;
    check_shape(x_init, op.image_shape())?;
    let mut x = x_init.to_owned();
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut iterates = vec![];
    if keep_iterates {
        iterates.push(x.clone());
    }
    let mut r = rhs.to_owned() - normal_apply(op, b, mu, &x.view())?;
    let mut rr = dot(&r, &r);
    let denom = if rhs_norm > 0.0 { rhs_norm } else { 1.0 };
    let mut residual = rr.sqrt() / denom;
    if !residual.is_finite() {
        return Err(Error::CgBreakdown("non-finite initial residual".into()));
    }
    let mut d = r.clone();
    let mut it = 0;
    while it < opts.iters && residual >= opts.tol {
        let gd = normal_apply(op, b, mu, &d.view())?;
        let dgd = dot(&d, &gd);
        if !dgd.is_finite() || dgd <= 0.0 {
            if rr == 0.0 {
                break;
            }
            return Err(Error::CgBreakdown(format!("curvature {dgd} at iteration {it}")));
        }
        let alpha = rr / dgd;
        x.scaled_add(alpha, &d);
        r.scaled_add(-alpha, &gd);
        let rr_new = dot(&r, &r);
        residual = rr_new.sqrt() / denom;
        if !residual.is_finite() {
            return Err(Error::CgBreakdown(format!("residual became {residual} at iteration {it}")));
        }
        let beta = rr_new / rr;
        d *= beta;
        d += &r;
        rr = rr_new;
        it += 1;
        if keep_iterates {
            iterates.push(x.clone());
        }
    }
    if opts.nonneg == NonNegMode::Clamp {
        x.mapv_inplace(|v| v.max(0.0));
    }
    Ok(CgResult {
        x,
        residual,
        iterations: it,
        iterates,
    })
}

/// Solves `(Aᵀ B A + μ I) x = Aᵀ(B ⊙ p̂) + μ z` for one channel, starting at `x_init`.
#[allow(clippy::too_many_arguments)]
pub fn weighted_cg_solve(
    op: &dyn LinearOperator,
    p_hat: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    z: &ArrayView2<f64>,
    mu: f64,
    x_init: &ArrayView2<f64>,
    opts: CgOptions,
) -> Result<CgResult> {
    check_shape(p_hat, op.data_shape())?;
    check_shape(b, op.data_shape())?;
    let mut rhs = op.adjoint(&(p_hat.to_owned() * b).view())?;
    rhs.scaled_add(mu, z);
    cg_normal(op, b, mu, &rhs.view(), x_init, opts, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda: f64,
    pub xi: f64,
    pub t_sample: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub nonneg: NonNegMode,
    pub seed: u64,
    pub materials: Vec<Material>,
    /// Evaluate the data term before and after every CG solve.
    pub trace_datafit: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 1e-3,
            xi: 1.0,
            t_sample: 100,
            cg_iters: 10,
            cg_tol: 1e-10,
            nonneg: NonNegMode::Clamp,
            seed: 0,
            materials: Material::both().to_vec(),
            trace_datafit: true,
        }
    }
}

impl SolverConfig {
    pub fn sampler(&self) -> SamplerParams {
        SamplerParams {
            lambda: self.lambda,
            xi: self.xi,
            t_sample: self.t_sample,
        }
    }

    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.cg_iters == 0 {
            return Err(Error::param("cg_iters must be at least 1"));
        }
        self.sampler().validate(sched)
    }

    fn cg(&self) -> CgOptions {
        CgOptions {
            iters: self.cg_iters,
            tol: self.cg_tol,
            nonneg: self.nonneg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub mu: f64,
    pub cg_residual: f64,
    pub cg_iterations: usize,
    /// Data term at the prior prediction `z0` and at the CG output.
    pub datafit_prior: f64,
    pub datafit: f64,
    /// `‖x̂0 − z0‖ / ‖z0‖` in density units.
    pub change: f64,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub steps: Vec<StepRecord>,
    pub final_image: Array2<f64>,
    pub wall_time: f64,
}

impl SolveTrace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,t,mu,residual,datafit_prior,datafit,change,time")?;
        for s in &self.steps {
            writeln!(
                f,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:.6}",
                s.step, s.t, s.mu, s.cg_residual, s.datafit_prior, s.datafit, s.change, s.elapsed
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Everything the reverse loop needs from the measurement, computed once:
/// `p̂ = P(y)`, the weights `B` and `x_c = Aᵀ(B ⊙ p̂)`.
#[derive(Debug, Clone)]
pub struct DataTerm {
    pub p_hat: MaterialSinogram,
    pub weights: CovWeights,
    pub x_c: Array3<f64>,
}

impl DataTerm {
    pub fn new(p_hat: MaterialSinogram, weights: CovWeights, op: &dyn LinearOperator) -> Result<Self> {
        if p_hat.data.shape() != weights.b.shape() {
            return Err(Error::DimensionMismatch {
                expected: p_hat.data.shape().to_vec(),
                actual: weights.b.shape().to_vec(),
            });
        }
        let (h, w) = op.image_shape();
        let mut x_c = Array3::zeros((2, h, w));
        for s in 0..2 {
            let wp = p_hat.channel(s).to_owned() * weights.channel(s);
            x_c.index_axis_mut(Axis(0), s).assign(&op.adjoint(&wp.view())?);
        }
        Ok(DataTerm { p_hat, weights, x_c })
    }

    /// Decomposes `y`, propagates its statistical weights and back-projects.
    pub fn from_measurement(
        y: &EnergySinogram,
        decomp: &dyn SinogramDecomposer,
        w: &StatWeights,
        op: &dyn LinearOperator,
    ) -> Result<Self> {
        let p_hat = decomp_apply(decomp, y)?;
        let weights = cov_weights(decomp, y, w)?;
        Self::new(p_hat, weights, op)
    }
}

/// Prior plus the density window it works in.
pub struct Prior<'a> {
    pub net: &'a dyn NoisePredictor,
    pub range: (f64, f64),
    pub schedule: &'a DiffusionSchedule,
}

impl<'a> Prior<'a> {
    pub fn from_denoiser(d: &'a Denoiser) -> Self {
        Prior {
            net: d,
            range: d.range,
            schedule: &d.schedule,
        }
    }

    fn to_norm(&self, x: &Array2<f64>) -> Array2<f64> {
        let (lo, hi) = self.range;
        x.mapv(|v| 2.0 * (v - lo) / (hi - lo) - 1.0)
    }

    fn to_density(&self, x: &Array2<f64>) -> Array2<f64> {
        let (lo, hi) = self.range;
        x.mapv(|v| lo + (v + 1.0) * 0.5 * (hi - lo))
    }
}

fn norm2(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Reverse diffusion with a weighted-CG proximal step at every visited `t`:
/// `z0` from the prior, `x̂0 = argmin ½‖p̂ − Ax‖²_B + μ_t/2 ‖x − z0‖²` with
/// `μ_t = λ/σ̄_t²`, then the ξ-mixed DDIM update.
pub fn reconstruct_channel(
    data: &DataTerm,
    material: Material,
    prior: &Prior,
    cfg: &SolverConfig,
    op: &dyn LinearOperator,
) -> Result<SolveTrace> {
    let sched = prior.schedule;
    cfg.validate(sched)?;
    let start = Instant::now();
    let s = material.index();
    let (h, w) = op.image_shape();
    let b = data.weights.channel(s);
    let p_hat = data.p_hat.channel(s);
    let x_c = data.x_c.index_axis(Axis(0), s);
    if x_c.dim() != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: vec![h, w],
            actual: x_c.shape().to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(s as u64);
    let normal = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal));
    let mut x = normal(&mut rng);
    let ts = cfg.sampler().timesteps(sched.t_max());
    let mut last: Option<Array2<f64>> = None;
    let mut steps = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = prior.net.predict_eps(&x.view(), t, last.as_ref())?;
        let score = score_from_eps(&eps.view(), t, sched);
        let z0 = prior.to_density(&predict_x0_from_score(&x.view(), &score.view(), t, sched));
        let mu = cfg.lambda / sched.sigma_bar(t).powi(2);
        let mut rhs = x_c.to_owned();
        rhs.scaled_add(mu, &z0);
        let sol = cg_normal(op, &b, mu, &rhs.view(), &z0.view(), cfg.cg(), false)?;
        let (datafit_prior, datafit) = if cfg.trace_datafit {
            (nll_datafit(&z0.view(), &p_hat, &b, op)?, nll_datafit(&sol.x.view(), &p_hat, &b, op)?)
        } else {
            (f64::NAN, f64::NAN)
        };
        let change = norm2(&(&sol.x - &z0)) / norm2(&z0).max(1e-300);
        let x0n = prior.to_norm(&sol.x);
        let eps_rand = normal(&mut rng);
        x = ddim_mix_step(&x.view(), &x0n.view(), t, t_prev, cfg.xi, &eps_rand.view(), sched)?;
        last = Some(x0n);
        steps.push(StepRecord {
            step: i + 1,
            t,
            mu,
            cg_residual: sol.residual,
            cg_iterations: sol.iterations,
            datafit_prior,
            datafit,
            change,
            elapsed: start.elapsed().as_secs_f64(),
        });
    }
    let final_image = prior.to_density(&x).mapv(|v| v.max(0.0));
    Ok(SolveTrace {
        steps,
        final_image,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Full per-channel reconstruction from an energy sinogram with a learned
/// denoiser. Requires the denoiser to match the requested material.
pub fn decomp_mod_reconstruct(
    y: &EnergySinogram,
    decomp: &dyn SinogramDecomposer,
    denoiser: &Denoiser,
    cfg: &SolverConfig,
    op: &dyn LinearOperator,
) -> Result<(Array2<f64>, SolveTrace)> {
    let w = crate::spectral::stat_weights(y)?;
    let data = DataTerm::from_measurement(y, decomp, &w, op)?;
    let material = denoiser.material;
    let trace = reconstruct_channel(&data, material, &Prior::from_denoiser(denoiser), cfg, op)?;
    Ok((trace.final_image.clone(), trace))
}
