//! Learned per-ray decomposition `p̂ = P_θ(y)`, its Jacobian and the
//! propagated covariance weights.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MaterialSinogram;
use crate::nn::{param_checksum, round_to_f32, Adam, AdamConfig, Checkpoint, NetKind, TrainReport};
use crate::spectral::{inv2, EnergySinogram, Mat2, NewtonOptions, SpectralModel, StatWeights, Vec2};

/// Anything that maps an energy pair to a material pair ray by ray.
pub trait SinogramDecomposer: Sync {
    fn decompose(&self, y: &[Vec2]) -> Result<Vec<Vec2>>;

    /// `J[s][k] = ∂p_s/∂y_k` at `y`.
    fn jacobian(&self, y: Vec2) -> Result<Mat2>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Per-channel affine maps to and from the network's working units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub y_mean: Vec2,
    pub y_std: Vec2,
    pub p_mean: Vec2,
    pub p_std: Vec2,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            y_mean: [0.0; 2],
            y_std: [1.0; 2],
            p_mean: [0.0; 2],
            p_std: [1.0; 2],
        }
    }

    fn fit(data: &DecompDataset) -> Self {
        let (y_mean, y_std) = mean_std(&data.y);
        let (p_mean, p_std) = mean_std(&data.p);
        Normalization {
            y_mean,
            y_std,
            p_mean,
            p_std,
        }
    }
}

fn mean_std(v: &[Vec2]) -> (Vec2, Vec2) {
    let n = v.len().max(1) as f64;
    let mut m = [0.0; 2];
    for r in v {
        m[0] += r[0] / n;
        m[1] += r[1] / n;
    }
    let mut var = [0.0; 2];
    for r in v {
        var[0] += (r[0] - m[0]).powi(2) / n;
        var[1] += (r[1] - m[1]).powi(2) / n;
    }
    let sd = |x: f64| if x > 1e-24 { x.sqrt() } else { 1.0 };
    (m, [sd(var[0]), sd(var[1])])
}

/// Fully connected network `2 → hidden… → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompNet {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    /// `None` until fitted on training data; the net refuses to run without it.
    pub norm: Option<Normalization>,
}

impl DecompNet {
    pub fn new(hidden: &[usize], activation: Activation, seed: u64) -> Self {
        let mut widths = vec![2];
        widths.extend_from_slice(hidden);
        widths.push(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        DecompNet {
            widths,
            activation,
            params,
            norm: None,
        }
    }

    /// Linear `2 → 2` net with identity weights, zero bias and unit scaling.
    pub fn identity() -> Self {
        DecompNet {
            widths: vec![2, 2],
            activation: Activation::Identity,
            params: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            norm: Some(Normalization::identity()),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            out.push((off, off + i * o));
            off += i * o + o;
        }
        out
    }

    fn weight(&self, l: usize, offs: &[(usize, usize)]) -> ArrayView2<'_, f64> {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        ArrayView2::from_shape((o, i), &self.params[offs[l].0..offs[l].0 + i * o]).unwrap()
    }

    fn bias<'a>(&'a self, l: usize, offs: &[(usize, usize)]) -> &'a [f64] {
        let o = self.widths[l + 1];
        &self.params[offs[l].1..offs[l].1 + o]
    }

    fn act(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn act_grad_from_output(&self, a: f64) -> f64 {
        match self.activation {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    /// Batched forward pass in normalised units; returns the activations of
    /// every layer (input first, output last).
    fn forward_batch(&self, u: Array2<f64>) -> Vec<Array2<f64>> {
        let offs = self.layer_offsets();
        let mut acts = vec![u];
        for l in 0..self.n_layers() {
            let w = self.weight(l, &offs);
            let b = self.bias(l, &offs);
            let mut z = acts[l].dot(&w.t());
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if l + 1 < self.n_layers() {
                z.mapv_inplace(|v| self.act(v));
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulates the gradient of `Σ ½‖out − target‖²/(batch·2)` and returns
    /// the loss.
    fn loss_and_grad(&self, u: Array2<f64>, target: &Array2<f64>, grad: &mut [f64]) -> f64 {
        let offs = self.layer_offsets();
        let acts = self.forward_batch(u);
        let n = target.nrows() as f64;
        let out = acts.last().unwrap();
        let diff = out - target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / (n * 2.0);
        let mut delta = diff * (2.0 / (n * 2.0));
        for l in (0..self.n_layers()).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let gw = delta.t().dot(&acts[l]);
            for (g, v) in grad[offs[l].0..offs[l].0 + i * o].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grad[offs[l].1..offs[l].1 + o].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            if l > 0 {
                let mut back = delta.dot(&self.weight(l, &offs));
                let a = &acts[l];
                back.zip_mut_with(a, |d, &av| *d *= self.act_grad_from_output(av));
                delta = back;
            }
        }
        loss
    }

    fn normalization(&self) -> Result<&Normalization> {
        self.norm.as_ref().ok_or(Error::NotTrained)
    }

    fn apply_chunk(&self, norm: &Normalization, y: &[Vec2]) -> Vec<Vec2> {
        let u = Array2::from_shape_fn((y.len(), 2), |(r, k)| (y[r][k] - norm.y_mean[k]) / norm.y_std[k]);
        let out = self.forward_batch(u).pop().unwrap();
        out.rows()
            .into_iter()
            .map(|r| [norm.p_mean[0] + norm.p_std[0] * r[0], norm.p_mean[1] + norm.p_std[1] * r[1]])
            .collect()
    }

    /// Reverse-mode Jacobian of the normalised network, `∂out_s/∂u_k`.
    fn net_jacobian(&self, u: Vec2) -> Mat2 {
        let offs = self.layer_offsets();
        let mut acts: Vec<Vec<f64>> = vec![u.to_vec()];
        for l in 0..self.n_layers() {
            let w = self.weight(l, &offs);
            let b = self.bias(l, &offs);
            let prev = &acts[l];
            let hidden = l + 1 < self.n_layers();
            let z: Vec<f64> = (0..self.widths[l + 1])
                .map(|j| {
                    let v = b[j] + w.row(j).iter().zip(prev).map(|(a, x)| a * x).sum::<f64>();
                    if hidden {
                        self.act(v)
                    } else {
                        v
                    }
                })
                .collect();
            acts.push(z);
        }
        let mut jac = [[0.0; 2]; 2];
        for (s, row) in jac.iter_mut().enumerate() {
            let mut g = vec![0.0; 2];
            g[s] = 1.0;
            for l in (0..self.n_layers()).rev() {
                if l + 1 < self.n_layers() {
                    for (gj, a) in g.iter_mut().zip(&acts[l + 1]) {
                        *gj *= self.act_grad_from_output(*a);
                    }
                }
                let w = self.weight(l, &offs);
                g = (0..self.widths[l]).map(|i| w.column(i).iter().zip(&g).map(|(a, b)| a * b).sum()).collect();
            }
            row.copy_from_slice(&g);
        }
        jac
    }

    pub fn checksum(&self) -> String {
        param_checksum(&self.params)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let n = self.normalization()?;
        let mut arch = vec![match self.activation {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }];
        arch.extend(self.widths.iter().map(|&w| w as u32));
        let constants = [n.y_mean, n.y_std, n.p_mean, n.p_std].iter().flatten().copied().collect();
        Ok(Checkpoint {
            kind: NetKind::Decomposer,
            arch,
            constants,
            params: self.params.iter().map(|&p| p as f32).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("decomposer checkpoint: {m}"));
        if ck.kind != NetKind::Decomposer {
            return Err(bad("not a decomposer network"));
        }
        if ck.arch.len() < 3 || ck.constants.len() != 8 {
            return Err(bad("malformed architecture descriptor"));
        }
        let activation = match ck.arch[0] {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            _ => return Err(bad("unknown activation")),
        };
        let widths: Vec<usize> = ck.arch[1..].iter().map(|&w| w as usize).collect();
        if widths[0] != 2 || *widths.last().unwrap() != 2 {
            return Err(bad("network must map 2 -> 2"));
        }
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if expected != ck.params.len() {
            return Err(bad("parameter count does not match architecture"));
        }
        let c = &ck.constants;
        Ok(DecompNet {
            widths,
            activation,
            params: ck.params.iter().map(|&p| p as f64).collect(),
            norm: Some(Normalization {
                y_mean: [c[0], c[1]],
                y_std: [c[2], c[3]],
                p_mean: [c[4], c[5]],
                p_std: [c[6], c[7]],
            }),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const APPLY_CHUNK: usize = 4096;

impl SinogramDecomposer for DecompNet {
    fn decompose(&self, y: &[Vec2]) -> Result<Vec<Vec2>> {
        let norm = self.normalization()?;
        if y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("energy pair"));
        }
        let chunks: Vec<Vec<Vec2>> = y.par_chunks(APPLY_CHUNK).map(|c| self.apply_chunk(norm, c)).collect();
        Ok(chunks.into_iter().flatten().collect())
    }

    fn jacobian(&self, y: Vec2) -> Result<Mat2> {
        let n = self.normalization()?;
        let u = [(y[0] - n.y_mean[0]) / n.y_std[0], (y[1] - n.y_mean[1]) / n.y_std[1]];
        let j = self.net_jacobian(u);
        let mut out = [[0.0; 2]; 2];
        for s in 0..2 {
            for k in 0..2 {
                out[s][k] = n.p_std[s] * j[s][k] / n.y_std[k];
            }
        }
        Ok(out)
    }
}

/// Exact inverse of the spectral forward model by Newton iteration.
#[derive(Debug, Clone)]
pub struct NewtonDecomposer {
    pub model: SpectralModel,
    pub opts: NewtonOptions,
}

impl NewtonDecomposer {
    pub fn new(model: SpectralModel) -> Self {
        NewtonDecomposer {
            model,
            opts: NewtonOptions::default(),
        }
    }
}

impl SinogramDecomposer for NewtonDecomposer {
    fn decompose(&self, y: &[Vec2]) -> Result<Vec<Vec2>> {
        y.par_iter().map(|&r| self.model.h_inverse_newton(r, self.opts)).collect()
    }

    fn jacobian(&self, y: Vec2) -> Result<Mat2> {
        let p = self.model.h_inverse_newton(y, self.opts)?;
        inv2(&self.model.h_jacobian(p)).ok_or_else(|| Error::param("singular spectral Jacobian"))
    }
}

fn rays_of(y: &EnergySinogram) -> Vec<Vec2> {
    let (nv, nd) = (y.y.shape()[1], y.y.shape()[2]);
    (0..nv * nd).map(|r| y.ray(r / nd, r % nd)).collect()
}

/// Decomposes every ray of an energy sinogram.
pub fn decomp_apply(dec: &dyn SinogramDecomposer, y: &EnergySinogram) -> Result<MaterialSinogram> {
    let (nv, nd) = (y.y.shape()[1], y.y.shape()[2]);
    let p = dec.decompose(&rays_of(y))?;
    let mut out = Array3::zeros((2, nv, nd));
    for (r, pr) in p.iter().enumerate() {
        out[[0, r / nd, r % nd]] = pr[0];
        out[[1, r / nd, r % nd]] = pr[1];
    }
    MaterialSinogram::new(out)
}

pub fn decomp_jacobian(dec: &dyn SinogramDecomposer, y_ray: Vec2) -> Result<Mat2> {
    dec.jacobian(y_ray)
}

/// Diagonal data-fit weights `diag(B_n)` with `B_n = J⁻ᵀ W_n J⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovWeights {
    /// `[2, views, detectors]`, strictly positive.
    pub b: Array3<f64>,
    /// Full per-ray blocks in ray order, for diagnostics.
    pub blocks: Vec<Mat2>,
    /// Rays whose Jacobian was singular or whose weight fell below the floor.
    pub floored: usize,
}

impl CovWeights {
    pub fn uniform(shape: (usize, usize), value: f64) -> Self {
        let n = shape.0 * shape.1;
        CovWeights {
            b: Array3::from_elem((2, shape.0, shape.1), value),
            blocks: vec![[[value, 0.0], [0.0, value]]; n],
            floored: 0,
        }
    }

    pub fn channel(&self, s: usize) -> ArrayView2<'_, f64> {
        self.b.index_axis(Axis(0), s)
    }
}

pub const COV_FLOOR_FRACTION: f64 = 1e-6;

/// Propagates the measurement precision `W_n = diag(w_low, w_high)` through the
/// decomposition. With `J = ∂p/∂y`, the precision of `p̂` is
/// `J⁻ᵀ W J⁻¹`.
pub fn cov_weights(dec: &dyn SinogramDecomposer, y: &EnergySinogram, w: &StatWeights) -> Result<CovWeights> {
    if w.w.shape() != y.y.shape() {
        return Err(Error::DimensionMismatch {
            expected: y.y.shape().to_vec(),
            actual: w.w.shape().to_vec(),
        });
    }
    let (nv, nd) = (y.y.shape()[1], y.y.shape()[2]);
    let blocks: Vec<Option<Mat2>> = (0..nv * nd)
        .into_par_iter()
        .map(|r| {
            let (v, d) = (r / nd, r % nd);
            let j = dec.jacobian(y.ray(v, d)).ok()?;
            let ji = inv2(&j)?;
            let wk = [w.w[[0, v, d]], w.w[[1, v, d]]];
            let mut b = [[0.0; 2]; 2];
            for s in 0..2 {
                for t in 0..2 {
                    b[s][t] = (0..2).map(|k| ji[k][s] * wk[k] * ji[k][t]).sum();
                }
            }
            b.iter().flatten().all(|x| x.is_finite()).then_some(b)
        })
        .collect();
    let mut floor = [0.0; 2];
    for (s, f) in floor.iter_mut().enumerate() {
        let mut diag: Vec<f64> = blocks.iter().flatten().map(|b| b[s][s]).filter(|&x| x > 0.0).collect();
        if diag.is_empty() {
            return Err(Error::param("no ray has an invertible decomposition Jacobian"));
        }
        diag.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *f = COV_FLOOR_FRACTION * diag[diag.len() / 2];
    }
    let mut out = Array3::zeros((2, nv, nd));
    let mut floored = 0;
    let mut kept = Vec::with_capacity(blocks.len());
    for (r, blk) in blocks.into_iter().enumerate() {
        let (v, d) = (r / nd, r % nd);
        let mut hit = false;
        let b = blk.unwrap_or_else(|| {
            hit = true;
            [[floor[0], 0.0], [0.0, floor[1]]]
        });
        for s in 0..2 {
            let val = if b[s][s] >= floor[s] {
                b[s][s]
            } else {
                hit = true;
                floor[s]
            };
            out[[s, v, d]] = val;
        }
        floored += hit as usize;
        kept.push(b);
    }
    Ok(CovWeights {
        b: out,
        blocks: kept,
        floored,
    })
}

/// Training pairs `(y, p*)`, one per ray.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecompDataset {
    pub y: Vec<Vec2>,
    pub p: Vec<Vec2>,
}

impl DecompDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Adds every `stride`-th ray of a sinogram pair.
    pub fn push_sinograms(&mut self, y: &EnergySinogram, p: &MaterialSinogram, stride: usize) -> Result<()> {
        if y.y.shape() != p.data.shape() {
            return Err(Error::DimensionMismatch {
                expected: y.y.shape().to_vec(),
                actual: p.data.shape().to_vec(),
            });
        }
        let nd = y.y.shape()[2];
        for r in (0..y.n_rays()).step_by(stride.max(1)) {
            let (v, d) = (r / nd, r % nd);
            self.y.push(y.ray(v, d));
            self.p.push([p.data[[0, v, d]], p.data[[1, v, d]]]);
        }
        Ok(())
    }

    /// Pairs built from labels alone: every `stride`-th ray of `p` is measured
    /// again on the same line integral for both energies, `y = h(p)` or with
    /// Poisson counts of `photons` incident quanta. Pairing the two energies
    /// of a switching scan by index mixes neighbouring rays, which teaches the
    /// net to discount the energy difference; these pairs avoid that.
    pub fn push_label_rays(
        &mut self,
        model: &SpectralModel,
        p: &MaterialSinogram,
        photons: Option<f64>,
        seed: u64,
        stride: usize,
    ) -> Result<()> {
        if let Some(i0) = photons {
            if !(i0 > 0.0) {
                return Err(Error::param("incident photon count must be positive"));
            }
        }
        let nd = p.data.shape()[2];
        let n = p.data.shape()[1] * nd;
        let rays: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
        let pairs: Vec<(Vec2, Vec2)> = rays
            .par_iter()
            .map(|&r| {
                let (v, d) = (r / nd, r % nd);
                let pr = [p.data[[0, v, d]], p.data[[1, v, d]]];
                let mut y = model.h_forward(pr);
                if let Some(i0) = photons {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(r as u64);
                    for k in 0..2 {
                        let mean = i0 * (-y[k]).exp();
                        let c: f64 = rng.sample(Poisson::new(mean).expect("positive mean"));
                        y[k] = -(c.max(1.0) / i0).ln();
                    }
                }
                (y, pr)
            })
            .collect();
        for (y, pr) in pairs {
            self.y.push(y);
            self.p.push(pr);
        }
        Ok(())
    }

    /// Uniform samples of `p` over `[0, p_max[0]] × [0, p_max[1]]` with
    /// noiseless `y = h(p)`.
    pub fn calibration_box(model: &SpectralModel, p_max: Vec2, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = DecompDataset::default();
        for _ in 0..n {
            let p = [rng.random::<f64>() * p_max[0], rng.random::<f64>() * p_max[1]];
            ds.y.push(model.h_forward(p));
            ds.p.push(p);
        }
        ds
    }

    /// Deterministic split; the last `fraction` of a seeded permutation is
    /// held out.
    pub fn split(&self, fraction: f64, seed: u64) -> (DecompDataset, DecompDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let n_val = n_val.min(self.len().saturating_sub(1));
        let pick = |ids: &[usize]| DecompDataset {
            y: ids.iter().map(|&i| self.y[i]).collect(),
            p: ids.iter().map(|&i| self.p[i]).collect(),
        };
        let (train, val) = idx.split_at(self.len() - n_val);
        (pick(train), pick(val))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for DecompTrainConfig {
    fn default() -> Self {
        DecompTrainConfig {
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
            epochs: 20,
            batch_size: 256,
            validation_fraction: 0.1,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// Relative validation RMSE: per-channel RMSE over label dynamic range, worst
/// channel.
pub fn relative_rmse(net: &DecompNet, data: &DecompDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = net.decompose(&data.y)?;
    let mut worst: f64 = 0.0;
    for s in 0..2 {
        let lo = data.p.iter().map(|p| p[s]).fold(f64::INFINITY, f64::min);
        let hi = data.p.iter().map(|p| p[s]).fold(f64::NEG_INFINITY, f64::max);
        let mse = pred.iter().zip(&data.p).map(|(a, b)| (a[s] - b[s]).powi(2)).sum::<f64>() / data.len() as f64;
        worst = worst.max(mse.sqrt() / (hi - lo).max(1e-12));
    }
    Ok(worst)
}

/// Minimises the mean squared error between `P_θ(y)` and `p*` in normalised
/// units. Deterministic for a given seed.
pub fn train_decomp(data: &DecompDataset, cfg: &DecompTrainConfig, seed: u64) -> Result<(DecompNet, TrainReport)> {
    if data.len() < 2 {
        return Err(Error::param("decomposition dataset needs at least two pairs"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let (train, val) = data.split(cfg.validation_fraction, seed);
    let mut net = DecompNet::new(&cfg.hidden, cfg.activation, seed);
    let norm = Normalization::fit(&train);
    net.norm = Some(norm);
    let initial_validation = relative_rmse(&net, &val)?;
    let u: Vec<Vec2> = train
        .y
        .iter()
        .map(|y| [(y[0] - norm.y_mean[0]) / norm.y_std[0], (y[1] - norm.y_mean[1]) / norm.y_std[1]])
        .collect();
    let t: Vec<Vec2> = train
        .p
        .iter()
        .map(|p| [(p[0] - norm.p_mean[0]) / norm.p_std[0], (p[1] - norm.p_mean[1]) / norm.p_std[1]])
        .collect();
    let mut opt = Adam::new(cfg.adam, net.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; net.params.len()];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let ub = Array2::from_shape_fn((chunk.len(), 2), |(r, k)| u[chunk[r]][k]);
            let tb = Array2::from_shape_fn((chunk.len(), 2), |(r, k)| t[chunk[r]][k]);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = net.loss_and_grad(ub, &tb, &mut grad);
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            opt.step(&mut net.params, &grad);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        trace.push(epoch_loss / batches as f64);
    }
    round_to_f32(&mut net.params);
    let final_validation = relative_rmse(&net, &val)?;
    let report = TrainReport {
        loss_trace: trace,
        initial_validation,
        final_validation,
        param_checksum: net.checksum(),
    };
    Ok((net, report))
}

/// Worst relative error `max|P(h(p)) − p| / max|p|` per channel over a set of
/// material pairs, against the exact forward model.
pub fn left_inverse_error(dec: &dyn SinogramDecomposer, model: &SpectralModel, ps: &[Vec2]) -> Result<f64> {
    let ys: Vec<Vec2> = ps.iter().map(|&p| model.h_forward(p)).collect();
    let est = dec.decompose(&ys)?;
    let mut worst: f64 = 0.0;
    for s in 0..2 {
        let scale = ps.iter().map(|p| p[s].abs()).fold(0.0, f64::max).max(1e-12);
        let err = est.iter().zip(ps).map(|(a, b)| (a[s] - b[s]).abs()).fold(0.0, f64::max);
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

/// Channel-major copy of a batch of ray pairs, mostly for tests.
pub fn rays_to_array(v: &[Vec2]) -> Array2<f64> {
    let mut a = Array2::zeros((v.len(), 2));
    for (i, r) in v.iter().enumerate() {
        a.slice_mut(s![i, ..]).assign(&ndarray::arr1(r));
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::mat_vec;

    fn fd_jacobian(net: &DecompNet, y: Vec2) -> Mat2 {
        let mut j = [[0.0; 2]; 2];
        for k in 0..2 {
            let h = 1e-6 * y[k].abs().max(1.0);
            let mut a = y;
            let mut b = y;
            a[k] += h;
            b[k] -= h;
            let pa = net.decompose(&[a]).unwrap()[0];
            let pb = net.decompose(&[b]).unwrap()[0];
            for s in 0..2 {
                j[s][k] = (pa[s] - pb[s]) / (2.0 * h);
            }
        }
        j
    }

    fn random_net(seed: u64) -> DecompNet {
        let mut net = DecompNet::new(&[64, 64, 64], Activation::Tanh, seed);
        net.norm = Some(Normalization {
            y_mean: [1.0, 0.5],
            y_std: [0.8, 0.4],
            p_mean: [300.0, 2000.0],
            p_std: [200.0, 900.0],
        });
        net
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = random_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let y = [rng.random::<f64>() * 3.0, rng.random::<f64>() * 1.5];
            let j = net.jacobian(y).unwrap();
            let fd = fd_jacobian(&net, y);
            let scale = j.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
            for s in 0..2 {
                for k in 0..2 {
                    assert!((j[s][k] - fd[s][k]).abs() < 1e-4 * scale, "{j:?} vs {fd:?}");
                }
            }
        }
    }

    #[test]
    fn identity_net_properties() {
        let net = DecompNet::identity();
        assert_eq!(net.jacobian([0.3, -2.0]).unwrap(), [[1.0, 0.0], [0.0, 1.0]]);
        let y = EnergySinogram::new(Array3::from_elem((2, 2, 3), 0.5), Some(Array3::from_elem((2, 2, 3), 7.0))).unwrap();
        let w = StatWeights::uniform((2, 3), 1.0);
        let cw = cov_weights(&net, &y, &w).unwrap();
        assert!(cw.b.iter().all(|&v| v == 1.0));
        assert_eq!(cw.blocks[0], [[1.0, 0.0], [0.0, 1.0]]);

        let mut w = StatWeights::uniform((2, 3), 0.0);
        w.w.index_axis_mut(Axis(0), 0).fill(4.0);
        w.w.index_axis_mut(Axis(0), 1).fill(9.0);
        let cw = cov_weights(&net, &y, &w).unwrap();
        assert!(cw.channel(0).iter().all(|&v| v == 4.0));
        assert!(cw.channel(1).iter().all(|&v| v == 9.0));
        assert_eq!(cw.floored, 0);
    }

    #[test]
    fn untrained_net_is_rejected() {
        let net = DecompNet::new(&[8], Activation::Tanh, 0);
        assert!(matches!(net.decompose(&[[0.0, 0.0]]), Err(Error::NotTrained)));
        assert!(matches!(net.to_checkpoint(), Err(Error::NotTrained)));
    }

    #[test]
    fn batch_equals_per_ray_and_permutes() {
        let net = random_net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ys: Vec<Vec2> = (0..5000).map(|_| [rng.random::<f64>() * 3.0, rng.random::<f64>()]).collect();
        let batch = net.decompose(&ys).unwrap();
        for i in (0..ys.len()).step_by(97) {
            let single = net.decompose(&[ys[i]]).unwrap()[0];
            for s in 0..2 {
                assert!((single[s] - batch[i][s]).abs() <= 1e-9 * single[s].abs().max(1.0));
            }
        }
        let rev: Vec<Vec2> = ys.iter().rev().copied().collect();
        let out_rev = net.decompose(&rev).unwrap();
        for (a, b) in out_rev.iter().rev().zip(&batch) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = random_net(9);
        round_to_f32(&mut net.params);
        let back = DecompNet::from_checkpoint(&net.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn zero_epoch_training_and_determinism() {
        let model = SpectralModel::reference();
        let ds = DecompDataset::calibration_box(&model, [2000.0, 4000.0], 400, 1);
        let cfg = DecompTrainConfig {
            epochs: 0,
            ..DecompTrainConfig::default()
        };
        let (net, rep) = train_decomp(&ds, &cfg, 4).unwrap();
        assert!(rep.loss_trace.is_empty());
        assert!(net.norm.is_some());
        let cfg = DecompTrainConfig {
            epochs: 2,
            ..DecompTrainConfig::default()
        };
        let (_, a) = train_decomp(&ds, &cfg, 4).unwrap();
        let (_, b) = train_decomp(&ds, &cfg, 4).unwrap();
        assert_eq!(a.param_checksum, b.param_checksum);
        assert_eq!(a.loss_trace.len(), 2);
        assert!(a.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn newton_decomposer_inverts_forward_model() {
        let model = SpectralModel::reference();
        let dec = NewtonDecomposer::new(model.clone());
        let ps = vec![[0.0, 0.0], [150.0, 2500.0], [900.0, 100.0]];
        assert!(left_inverse_error(&dec, &model, &ps).unwrap() < 1e-9);
        // Jacobian of the inverse times the forward Jacobian is the identity
        let p = [400.0, 1800.0];
        let j = dec.jacobian(model.h_forward(p)).unwrap();
        let hj = model.h_jacobian(p);
        let e = mat_vec(j, mat_vec(hj, [1.0, 0.0]));
        assert!((e[0] - 1.0).abs() < 1e-8 && e[1].abs() < 1e-8);
    }
}
