//! Small residual convolutional noise predictor with time-step conditioning.
//!
//! Layout: `conv(1→C)`, then `layers − 2` residual blocks `h + SiLU(conv(h))`,
//! then `conv(C→1)`. Every hidden layer receives a per-channel bias computed
//! from a sinusoidal embedding of `t` through a one-layer SiLU MLP. The output
//! convolution starts at zero, so an untrained net predicts `ε = 0`.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::{param_checksum, round_to_f32, silu, silu_grad, Adam, AdamConfig, Checkpoint, NetKind, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Bone,
    Water,
}

impl Material {
    pub fn index(self) -> usize {
        match self {
            Material::Bone => 0,
            Material::Water => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Material::Bone => "bone",
            Material::Water => "water",
        }
    }

    pub fn both() -> [Material; 2] {
        [Material::Bone, Material::Water]
    }

    /// Fixed density window (mg/cm³) mapped onto [−1, 1].
    pub fn default_range(self) -> (f64, f64) {
        match self {
            Material::Bone => (0.0, 2000.0),
            Material::Water => (0.0, 1200.0),
        }
    }
}

impl std::str::FromStr for Material {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bone" => Ok(Material::Bone),
            "water" => Ok(Material::Water),
            other => Err(Error::param(format!("unknown material `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserArch {
    pub channels: usize,
    /// Dilation of each 3×3 convolution; its length is the layer count.
    pub dilations: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            channels: 16,
            dilations: vec![1, 2, 4, 8, 2, 1],
            embed_dim: 32,
        }
    }
}

impl DenoiserArch {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dilations.len() < 2 || self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::param("denoiser needs channels > 0, at least two layers and an even embedding"));
        }
        if self.dilations.contains(&0) {
            return Err(Error::param("dilations must be positive"));
        }
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.dilations.len()
    }

    fn io(&self, l: usize) -> (usize, usize) {
        let c = self.channels;
        if l == 0 {
            (1, c)
        } else if l + 1 == self.n_layers() {
            (c, 1)
        } else {
            (c, c)
        }
    }
}

/// Parameter block offsets inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    emb_w: usize,
    emb_b: usize,
    conv_w: Vec<usize>,
    conv_b: Vec<usize>,
    /// time projection, hidden layers only
    time_u: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(a: &DenoiserArch) -> Self {
        let c = a.channels;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let emb_w = take(c * a.embed_dim);
        let emb_b = take(c);
        let mut conv_w = vec![];
        let mut conv_b = vec![];
        let mut time_u = vec![];
        for l in 0..a.n_layers() {
            let (ci, co) = a.io(l);
            conv_w.push(take(co * ci * 9));
            conv_b.push(take(co));
            if l + 1 < a.n_layers() {
                time_u.push(take(co * c));
            }
        }
        Layout {
            emb_w,
            emb_b,
            conv_w,
            conv_b,
            time_u,
            total: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub material: Material,
    /// Density window mapped onto [−1, 1].
    pub range: (f64, f64),
    /// Schedule the network was trained for.
    pub schedule: DiffusionSchedule,
    pub params: Vec<f64>,
}

/// `in` is `[C_in, H·W]`; returns `[C_in·9, H·W]`.
fn im2col(inp: &ArrayView2<f64>, h: usize, w: usize, dil: usize) -> Array2<f64> {
    let cin = inp.nrows();
    let mut col = Array2::zeros((cin * 9, h * w));
    let d = dil as isize;
    for c in 0..cin {
        let src = inp.row(c);
        let src = src.as_slice().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let dy = (ky as isize - 1) * d;
                let dx = (kx as isize - 1) * d;
                let mut dst = col.row_mut(c * 9 + ky * 3 + kx);
                let dst = dst.as_slice_mut().expect("contiguous rows");
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx.max(0)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src[srow + sx0..srow + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates `[C_in·9, H·W]` back into `[C_in, H·W]`.
fn col2im(col: &ArrayView2<f64>, out: &mut ArrayViewMut2<f64>, h: usize, w: usize, dil: usize) {
    let cin = out.nrows();
    let d = dil as isize;
    for c in 0..cin {
        let mut dst = out.row_mut(c);
        let dst = dst.as_slice_mut().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let dy = (ky as isize - 1) * d;
                let dx = (kx as isize - 1) * d;
                let srcr = col.row(c * 9 + ky * 3 + kx);
                let src = srcr.as_slice().expect("contiguous rows");
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx.max(0)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    for (o, v) in dst[srow + sx0..srow + sx0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e.push((t as f64 * freq).cos());
    }
    e
}

struct Tape {
    emb: Vec<f64>,
    emb_pre: Vec<f64>,
    emb_act: Vec<f64>,
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, material: Material, range: (f64, f64), schedule: DiffusionSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(range.1 > range.0) {
            return Err(Error::param("normalisation range must be increasing"));
        }
        let lay = Layout::new(&arch);
        let mut params = vec![0.0; lay.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |p: &mut [f64], std: f64| {
            for v in p {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        };
        let c = arch.channels;
        fill(&mut params[lay.emb_w..lay.emb_w + c * arch.embed_dim], (1.0 / arch.embed_dim as f64).sqrt());
        let n = arch.n_layers();
        for l in 0..n - 1 {
            let (ci, co) = arch.io(l);
            // residual branches start small so the stack is near-identity
            let gain = if l == 0 { 1.0 } else { 0.5 };
            fill(&mut params[lay.conv_w[l]..lay.conv_w[l] + co * ci * 9], gain * (2.0 / (ci * 9) as f64).sqrt());
            fill(&mut params[lay.time_u[l]..lay.time_u[l] + co * c], (1.0 / c as f64).sqrt() * 0.5);
        }
        Ok(Denoiser {
            arch,
            material,
            range,
            schedule,
            params,
        })
    }

    pub fn normalize(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (lo, hi) = self.range;
        x.mapv(|v| 2.0 * (v - lo) / (hi - lo) - 1.0)
    }

    pub fn denormalize(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (lo, hi) = self.range;
        x.mapv(|v| lo + (v + 1.0) * 0.5 * (hi - lo))
    }

    /// Normalised-unit difference corresponding to a density difference.
    pub fn density_scale(&self) -> f64 {
        2.0 / (self.range.1 - self.range.0)
    }

    fn view<'a>(&'a self, off: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols]).unwrap()
    }

    fn forward(&self, x: &ArrayView2<f64>, t: usize, keep: bool) -> Tape {
        let (h, w) = x.dim();
        let a = &self.arch;
        let lay = Layout::new(a);
        let c = a.channels;
        let emb = time_embedding(t, a.embed_dim);
        let we = self.view(lay.emb_w, c, a.embed_dim);
        let emb_pre: Vec<f64> = (0..c)
            .map(|j| self.params[lay.emb_b + j] + we.row(j).iter().zip(&emb).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        let emb_act: Vec<f64> = emb_pre.iter().map(|&v| silu(v)).collect();

        let mut cols = vec![];
        let mut pres = vec![];
        let mut hcur = x.to_shape((1, h * w)).unwrap().to_owned();
        let n = a.n_layers();
        let mut out = Array2::zeros((1, h * w));
        for l in 0..n {
            let (ci, co) = a.io(l);
            let col = im2col(&hcur.view(), h, w, a.dilations[l]);
            let wl = self.view(lay.conv_w[l], co, ci * 9);
            let mut pre = wl.dot(&col);
            let mut bias: Vec<f64> = self.params[lay.conv_b[l]..lay.conv_b[l] + co].to_vec();
            if l + 1 < n {
                let u = self.view(lay.time_u[l], co, c);
                for (j, b) in bias.iter_mut().enumerate() {
                    *b += u.row(j).iter().zip(&emb_act).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            for (j, mut row) in pre.rows_mut().into_iter().enumerate() {
                row += bias[j];
            }
            if l + 1 == n {
                out = pre;
                if keep {
                    cols.push(col);
                }
                break;
            }
            let act = pre.mapv(silu);
            hcur = if l == 0 { act } else { hcur + &act };
            if keep {
                cols.push(col);
                pres.push(pre);
            }
        }
        Tape {
            emb,
            emb_pre,
            emb_act,
            cols,
            pre: pres,
            out,
        }
    }

    /// Predicted noise for a normalised image.
    pub fn eps(&self, x_t: &ArrayView2<f64>, t: usize) -> Array2<f64> {
        let (h, w) = x_t.dim();
        self.forward(x_t, t, false).out.into_shape_with_order((h, w)).unwrap()
    }

    /// Adds the gradient of `scale · ‖ε̂ − eps‖²` to `grad`; returns the
    /// squared error sum.
    fn accumulate_grad(&self, x: &ArrayView2<f64>, t: usize, eps: &ArrayView2<f64>, scale: f64, grad: &mut [f64]) -> f64 {
        let (h, w) = x.dim();
        let hw = h * w;
        let a = &self.arch;
        let lay = Layout::new(a);
        let c = a.channels;
        let n = a.n_layers();
        let tape = self.forward(x, t, true);
        let target = eps.to_shape((1, hw)).unwrap();
        let diff = &tape.out - &target;
        let sq = diff.iter().map(|d| d * d).sum::<f64>();
        let mut d_out = diff * (2.0 * scale);
        let mut d_emb_act = vec![0.0; c];

        let mut dh: Option<Array2<f64>> = None;
        for l in (0..n).rev() {
            let (ci, co) = a.io(l);
            let dpre = if l + 1 == n {
                std::mem::take(&mut d_out)
            } else {
                let dhl = dh.as_ref().expect("set by the layer above");
                let mut dp = tape.pre[l].mapv(silu_grad);
                dp *= dhl;
                dp
            };
            let gw = dpre.dot(&tape.cols[l].t());
            for (g, v) in grad[lay.conv_w[l]..lay.conv_w[l] + co * ci * 9].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let rowsum: Vec<f64> = dpre.rows().into_iter().map(|r| r.sum()).collect();
            for (g, v) in grad[lay.conv_b[l]..lay.conv_b[l] + co].iter_mut().zip(&rowsum) {
                *g += v;
            }
            if l + 1 < n {
                let u = self.view(lay.time_u[l], co, c);
                for j in 0..co {
                    for k in 0..c {
                        grad[lay.time_u[l] + j * c + k] += rowsum[j] * tape.emb_act[k];
                        d_emb_act[k] += u[[j, k]] * rowsum[j];
                    }
                }
            }
            if l == 0 {
                break;
            }
            let wl = self.view(lay.conv_w[l], co, ci * 9);
            let dcol = wl.t().dot(&dpre);
            let mut din = match (l + 1 == n, dh.take()) {
                // residual block: gradient flows straight through the skip
                (false, Some(prev)) if l >= 1 => prev,
                _ => Array2::zeros((ci, hw)),
            };
            col2im(&dcol.view(), &mut din.view_mut(), h, w, a.dilations[l]);
            dh = Some(din);
        }
        for j in 0..c {
            let da = d_emb_act[j] * silu_grad(tape.emb_pre[j]);
            grad[lay.emb_b + j] += da;
            for k in 0..a.embed_dim {
                grad[lay.emb_w + j * a.embed_dim + k] += da * tape.emb[k];
            }
        }
        sq
    }

    pub fn checksum(&self) -> String {
        param_checksum(&self.params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arch = vec![
            self.material.index() as u32,
            self.arch.channels as u32,
            self.arch.embed_dim as u32,
            self.schedule.t_max() as u32,
        ];
        arch.extend(self.arch.dilations.iter().map(|&d| d as u32));
        let mut constants = vec![self.range.0, self.range.1];
        constants.extend_from_slice(&self.schedule.beta);
        Checkpoint {
            kind: NetKind::Denoiser,
            arch,
            constants,
            params: self.params.iter().map(|&p| p as f32).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("denoiser checkpoint: {m}"));
        if ck.kind != NetKind::Denoiser {
            return Err(bad("not a denoiser network"));
        }
        if ck.arch.len() < 6 {
            return Err(bad("malformed architecture descriptor"));
        }
        let material = match ck.arch[0] {
            0 => Material::Bone,
            1 => Material::Water,
            _ => return Err(bad("unknown material tag")),
        };
        let arch = DenoiserArch {
            channels: ck.arch[1] as usize,
            embed_dim: ck.arch[2] as usize,
            dilations: ck.arch[4..].iter().map(|&d| d as usize).collect(),
        };
        arch.validate()?;
        let t_max = ck.arch[3] as usize;
        if ck.constants.len() != 2 + t_max {
            return Err(bad("schedule length does not match"));
        }
        let schedule = DiffusionSchedule::from_betas(ck.constants[2..].to_vec())?;
        if Layout::new(&arch).total != ck.params.len() {
            return Err(bad("parameter count does not match architecture"));
        }
        Ok(Denoiser {
            arch,
            material,
            range: (ck.constants[0], ck.constants[1]),
            schedule,
            params: ck.params.iter().map(|&p| p as f64).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_eps(&self, x_t: &ArrayView2<f64>, t: usize, _: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        self.schedule.check_t(t)?;
        Ok(self.eps(x_t, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub arch: DenoiserArch,
    pub steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    /// Held-out images, at least one when more than one image is given.
    pub validation_fraction: f64,
    pub validation_samples: usize,
    /// Density window; `None` uses the material default.
    pub range: Option<(f64, f64)>,
    pub adam: AdamConfig,
    pub log_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            arch: DenoiserArch::default(),
            steps: 2000,
            batch_size: 8,
            crop: 32,
            validation_fraction: 0.1,
            validation_samples: 64,
            range: None,
            adam: AdamConfig {
                lr: 1e-3,
                decay: 0.9,
                decay_every: 200,
                ..AdamConfig::default()
            },
            log_every: 100,
        }
    }
}

struct Sample {
    img: usize,
    oy: usize,
    ox: usize,
    flip_y: bool,
    flip_x: bool,
    t: usize,
    eps: Array2<f64>,
}

fn draw_sample(rng: &mut ChaCha8Rng, n_img: usize, shapes: &[(usize, usize)], crop: usize, t_max: usize) -> Sample {
    let img = rng.random_range(0..n_img);
    let (h, w) = shapes[img];
    let oy = rng.random_range(0..=h - crop);
    let ox = rng.random_range(0..=w - crop);
    let flip_y = rng.random::<bool>();
    let flip_x = rng.random::<bool>();
    let t = rng.random_range(1..=t_max);
    let eps = Array2::from_shape_fn((crop, crop), |_| rng.sample(StandardNormal));
    Sample {
        img,
        oy,
        ox,
        flip_y,
        flip_x,
        t,
        eps,
    }
}

fn crop_of(images: &[Array2<f64>], s: &Sample, crop: usize) -> Array2<f64> {
    let mut c = images[s.img].slice(s![s.oy..s.oy + crop, s.ox..s.ox + crop]).to_owned();
    if s.flip_y {
        c.invert_axis(ndarray::Axis(0));
    }
    if s.flip_x {
        c.invert_axis(ndarray::Axis(1));
    }
    c.as_standard_layout().to_owned()
}

fn noisy(x0: &Array2<f64>, s: &Sample, sched: &DiffusionSchedule) -> Array2<f64> {
    let a = sched.alpha_bar(s.t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    ndarray::Zip::from(x0).and(&s.eps).map_collect(|&x, &e| sa * x + sn * e)
}

fn validation_loss(net: &Denoiser, images: &[Array2<f64>], samples: &[Sample], crop: usize) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let total: f64 = samples
        .par_iter()
        .map(|s| {
            let x0 = crop_of(images, s, crop);
            let xt = noisy(&x0, s, &net.schedule);
            let e = net.eps(&xt.view(), s.t);
            e.iter().zip(s.eps.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / (samples.len() * crop * crop) as f64
}

/// Trains a noise predictor on clean density images of one material with the
/// loss `E‖ε − ε_ρ(sqrt(ᾱ_t) x0 + sqrt(1 − ᾱ_t) ε, t)‖²`. Batches are drawn
/// from a per-step counter-based stream, so results depend only on `seed`.
pub fn train_denoiser(
    images: &[Array2<f64>],
    material: Material,
    sched: &DiffusionSchedule,
    cfg: &DenoiserTrainConfig,
    seed: u64,
) -> Result<(Denoiser, TrainReport)> {
    if images.is_empty() {
        return Err(Error::param("denoiser dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.crop == 0 {
        return Err(Error::param("batch size and crop must be positive"));
    }
    if images.iter().any(|im| im.nrows() < cfg.crop || im.ncols() < cfg.crop) {
        return Err(Error::param("crop larger than a training image"));
    }
    let range = cfg.range.unwrap_or(material.default_range());
    let mut net = Denoiser::new(cfg.arch.clone(), material, range, sched.clone(), seed)?;
    let normed: Vec<Array2<f64>> = images.iter().map(|im| net.normalize(&im.view())).collect();
    let n_val = if images.len() > 1 {
        ((images.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, images.len() - 1)
    } else {
        0
    };
    let (train_imgs, val_imgs) = normed.split_at(images.len() - n_val);
    let val_src = if val_imgs.is_empty() { train_imgs } else { val_imgs };
    let shapes = |v: &[Array2<f64>]| v.iter().map(|a| a.dim()).collect::<Vec<_>>();
    let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e);
    let val_shapes = shapes(val_src);
    let val_samples: Vec<Sample> = (0..cfg.validation_samples)
        .map(|_| draw_sample(&mut vrng, val_src.len(), &val_shapes, cfg.crop, sched.t_max()))
        .collect();
    let initial_validation = validation_loss(&net, val_src, &val_samples, cfg.crop);

    let train_shapes = shapes(train_imgs);
    let mut opt = Adam::new(cfg.adam, net.params.len());
    let mut trace = vec![];
    let mut running = 0.0;
    let mut running_n = 0;
    let scale = 1.0 / (cfg.batch_size * cfg.crop * cfg.crop) as f64;
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64 + 1);
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| draw_sample(&mut rng, train_imgs.len(), &train_shapes, cfg.crop, sched.t_max()))
            .collect();
        let parts: Vec<(Vec<f64>, f64)> = batch
            .par_iter()
            .map(|s| {
                let x0 = crop_of(train_imgs, s, cfg.crop);
                let xt = noisy(&x0, s, sched);
                let mut g = vec![0.0; net.params.len()];
                let sq = net.accumulate_grad(&xt.view(), s.t, &s.eps.view(), scale, &mut g);
                (g, sq)
            })
            .collect();
        let mut grad = vec![0.0; net.params.len()];
        let mut loss = 0.0;
        for (g, sq) in &parts {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
            loss += sq * scale;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(&mut net.params, &grad);
        running += loss;
        running_n += 1;
        if running_n == cfg.log_every.max(1) || step + 1 == cfg.steps {
            trace.push(running / running_n as f64);
            log::debug!("denoiser {} step {} loss {:.4}", material.name(), step + 1, running / running_n as f64);
            running = 0.0;
            running_n = 0;
        }
    }
    round_to_f32(&mut net.params);
    let final_validation = validation_loss(&net, val_src, &val_samples, cfg.crop);
    let report = TrainReport {
        loss_trace: trace,
        initial_validation,
        final_validation,
        param_checksum: net.checksum(),
    };
    Ok((net, report))
}
