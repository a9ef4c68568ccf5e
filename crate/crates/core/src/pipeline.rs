//! Experiment driver: simulate a dataset, train both networks, reconstruct the
//! test split with every method and score it. Sweeps reuse trained networks.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PairSource};
use crate::dataset::{simulate_dataset, simulate_record, write_dataset, DatasetManifest, DatasetRecord, RecordData, Split};
use crate::decomp::{train_decomp, DecompDataset, DecompNet, NewtonDecomposer, SinogramDecomposer};
use crate::denoiser::{train_denoiser, Denoiser, Material};
use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, SystemMatrix};
use crate::io::{to_storage_precision, write_array_f64};
use crate::metrics::{psnr, ssim};
use crate::nn::TrainReport;
use crate::solver::{reconstruct_channel, DataTerm, Prior, SolverConfig};
use crate::spectral::{stat_weights, SpectralModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FBP", alias = "fbp")]
    Fbp,
    #[serde(rename = "DEcomp-MoD", alias = "decomp_mod")]
    DecompMod,
    /// Newton decomposition of the same scan with the learned prior.
    #[serde(rename = "oracle")]
    Oracle,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Fbp => "FBP",
            Method::DecompMod => "DEcomp-MoD",
            Method::Oracle => "oracle",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::DecompMod => "decomp_mod",
            Method::Oracle => "oracle",
        }
    }
}

/// One row of a metrics CSV. Sampler parameters are empty for FBP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: Method,
    pub material: Material,
    pub angles: usize,
    pub lambda: Option<f64>,
    pub xi: Option<f64>,
    #[serde(rename = "T")]
    pub t_sample: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
    /// Seconds.
    pub runtime: f64,
    /// Seed of the scored record.
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "method,material,angles,lambda,xi,T,psnr,ssim,runtime,seed";

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Canonical row order, independent of scheduling.
pub fn sort_records(rows: &mut [MetricRecord]) {
    rows.sort_by(|a, b| {
        let key = |r: &MetricRecord| (r.method, r.material.index(), r.angles, r.t_sample, r.seed);
        key(a)
            .cmp(&key(b))
            .then(a.lambda.unwrap_or(-1.0).total_cmp(&b.lambda.unwrap_or(-1.0)))
            .then(a.xi.unwrap_or(-1.0).total_cmp(&b.xi.unwrap_or(-1.0)))
            .then(a.seed.cmp(&b.seed))
    });
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(',')).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::format(path.as_ref(), format!("unexpected header `{}`", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Mean and sample standard deviation over rows sharing every column except
/// the scores, runtime and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub material: Material,
    pub angles: usize,
    pub lambda: Option<f64>,
    pub xi: Option<f64>,
    #[serde(rename = "T")]
    pub t_sample: Option<usize>,
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn summarize(rows: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut sorted = rows.to_vec();
    sort_records(&mut sorted);
    let same = |a: &MetricRecord, b: &MetricRecord| {
        (a.method, a.material, a.angles, a.lambda, a.xi, a.t_sample) == (b.method, b.material, b.angles, b.lambda, b.xi, b.t_sample)
    };
    let mut out: Vec<SummaryRow> = vec![];
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && same(&sorted[start], &sorted[end]) {
            end += 1;
        }
        let g = &sorted[start..end];
        let (pm, ps) = mean_std(&g.iter().map(|r| r.psnr).collect::<Vec<_>>());
        let (sm, ss) = mean_std(&g.iter().map(|r| r.ssim).collect::<Vec<_>>());
        let r = &g[0];
        out.push(SummaryRow {
            method: r.method,
            material: r.material,
            angles: r.angles,
            lambda: r.lambda,
            xi: r.xi,
            t_sample: r.t_sample,
            n: g.len(),
            psnr_mean: pm,
            psnr_std: ps,
            ssim_mean: sm,
            ssim_std: ss,
        });
        start = end;
    }
    out
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// PSNR/SSIM data range per material: the largest ground-truth density in the
/// training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataRange {
    pub bone: f64,
    pub water: f64,
}

impl DataRange {
    pub fn from_truth<'a>(images: impl IntoIterator<Item = &'a RecordData>) -> Result<Self> {
        let mut m = [0.0f64; 2];
        for d in images {
            for (s, v) in m.iter_mut().enumerate() {
                *v = d.x.channel(s).iter().fold(*v, |a, &b| a.max(b));
            }
        }
        if !(m[0] > 0.0 && m[1] > 0.0) {
            return Err(Error::param("ground truth has an empty material channel"));
        }
        Ok(DataRange { bone: m[0], water: m[1] })
    }

    pub fn get(&self, m: Material) -> f64 {
        match m {
            Material::Bone => self.bone,
            Material::Water => self.water,
        }
    }
}

pub struct Networks {
    pub decomp: DecompNet,
    pub bone: Denoiser,
    pub water: Denoiser,
}

impl Networks {
    pub fn denoiser(&self, m: Material) -> &Denoiser {
        match m {
            Material::Bone => &self.bone,
            Material::Water => &self.water,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.decomp.save(dir.join("decomp.sdnw"))?;
        self.bone.save(dir.join("denoiser_bone.sdnw"))?;
        self.water.save(dir.join("denoiser_water.sdnw"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Networks {
            decomp: DecompNet::load(dir.join("decomp.sdnw"))?,
            bone: load_denoiser(&dir.join("denoiser_bone.sdnw"), Material::Bone)?,
            water: load_denoiser(&dir.join("denoiser_water.sdnw"), Material::Water)?,
        })
    }
}

pub fn load_denoiser(path: &Path, material: Material) -> Result<Denoiser> {
    let d = Denoiser::load(path)?;
    if d.material != material {
        return Err(Error::Config(format!(
            "{} holds a {} prior, expected {}",
            path.display(),
            d.material.name(),
            material.name()
        )));
    }
    Ok(d)
}

const DECOMP_SEED_SALT: u64 = 0xdec0_0001;
const DENOISER_SEED_SALT: u64 = 0xd1ff_0001;
const PAIR_NOISE_SALT: u64 = 0x1abe_1000;
/// Seed spacing between sweep repetitions, far beyond any dataset size.
const SWEEP_SEED_STRIDE: u64 = 1_000_003;

fn train_records<'a>(manifest: &'a DatasetManifest, data: &'a [RecordData]) -> impl Iterator<Item = (&'a DatasetRecord, &'a RecordData)> {
    manifest.records.iter().zip(data).filter(|(r, _)| r.split == Split::Train)
}

pub fn simulate(cfg: &ExperimentConfig, model: &SpectralModel) -> Result<(DatasetManifest, Vec<RecordData>)> {
    let manifest = cfg.manifest();
    log::info!("simulating {} records", manifest.records.len());
    let data = simulate_dataset(&manifest, model).map_err(|e| e.at_stage("simulate"))?;
    Ok((manifest, data))
}

pub fn decomp_pairs(cfg: &ExperimentConfig, model: &SpectralModel, manifest: &DatasetManifest, data: &[RecordData]) -> Result<DecompDataset> {
    let mut ds = DecompDataset::default();
    let stride = cfg.decomp.stride;
    for (rec, d) in train_records(manifest, data) {
        match cfg.decomp.pairs {
            PairSource::Measured => ds.push_sinograms(&d.y, &d.p, stride)?,
            PairSource::Labels => ds.push_label_rays(model, &d.p, None, rec.seed ^ PAIR_NOISE_SALT, stride)?,
            PairSource::NoisyLabels => {
                let photons = (!manifest.acquisition.noiseless).then_some(manifest.acquisition.photons);
                ds.push_label_rays(model, &d.p, photons, rec.seed ^ PAIR_NOISE_SALT, stride)?
            }
        }
    }
    if ds.is_empty() {
        return Err(Error::Config("no training records for the decomposer".into()));
    }
    Ok(ds)
}

pub fn train_decomposer(
    cfg: &ExperimentConfig,
    model: &SpectralModel,
    manifest: &DatasetManifest,
    data: &[RecordData],
) -> Result<(DecompNet, TrainReport)> {
    let run = || {
        let ds = decomp_pairs(cfg, model, manifest, data)?;
        log::info!("training the decomposer on {} ray pairs", ds.len());
        train_decomp(&ds, &cfg.decomp.train, cfg.seed ^ DECOMP_SEED_SALT)
    };
    run().map_err(|e| e.at_stage("train-decomp"))
}

pub fn train_prior(cfg: &ExperimentConfig, material: Material, manifest: &DatasetManifest, data: &[RecordData]) -> Result<(Denoiser, TrainReport)> {
    let run = || {
        let images: Vec<Array2<f64>> = train_records(manifest, data).map(|(_, d)| d.x.channel(material.index()).to_owned()).collect();
        let sched = cfg.schedule()?;
        log::info!("training the {} prior on {} images", material.name(), images.len());
        let seed = cfg.seed ^ DENOISER_SEED_SALT ^ material.index() as u64;
        train_denoiser(&images, material, &sched, &cfg.denoiser.train, seed)
    };
    run().map_err(|e| e.at_stage("train-denoiser"))
}

fn write_loss_trace(path: &Path, report: &TrainReport) -> Result<()> {
    let mut text = String::from("interval,loss\n");
    for (i, l) in report.loss_trace.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    text.push_str(&format!(
        "# validation {} -> {}, checksum {}\n",
        report.initial_validation, report.final_validation, report.param_checksum
    ));
    fs::write(path, text)?;
    Ok(())
}

/// Loads configured checkpoints and trains whatever is missing; trained
/// networks and their loss traces go to `models_dir`.
pub fn obtain_networks(
    cfg: &ExperimentConfig,
    model: &SpectralModel,
    manifest: &DatasetManifest,
    data: &[RecordData],
    models_dir: &Path,
) -> Result<Networks> {
    fs::create_dir_all(models_dir)?;
    let ck = &cfg.checkpoints;
    let decomp = match &ck.decomp {
        Some(p) => DecompNet::load(p)?,
        None => {
            let (net, rep) = train_decomposer(cfg, model, manifest, data)?;
            net.save(models_dir.join("decomp.sdnw"))?;
            write_loss_trace(&models_dir.join("decomp_loss.csv"), &rep)?;
            net
        }
    };
    let mut priors = vec![];
    for (m, path) in [(Material::Bone, &ck.bone), (Material::Water, &ck.water)] {
        priors.push(match path {
            Some(p) => load_denoiser(p, m)?,
            None => {
                let (net, rep) = train_prior(cfg, m, manifest, data)?;
                net.save(models_dir.join(format!("denoiser_{}.sdnw", m.name())))?;
                write_loss_trace(&models_dir.join(format!("denoiser_{}_loss.csv", m.name())), &rep)?;
                net
            }
        });
    }
    let water = priors.pop().unwrap();
    let bone = priors.pop().unwrap();
    Ok(Networks { decomp, bone, water })
}

/// One reconstructed image with its score.
pub struct Reconstruction {
    pub method: Method,
    pub material: Material,
    pub image: Array2<f64>,
    pub metric: MetricRecord,
    pub trace: Option<crate::solver::SolveTrace>,
}

pub struct RecordResult {
    pub id: String,
    pub truth: [Array2<f64>; 2],
    pub recons: Vec<Reconstruction>,
}

/// Sampler settings for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub lambda: f64,
    pub xi: f64,
    pub t_sample: usize,
}

impl SamplePoint {
    pub fn of(cfg: &SolverConfig) -> Self {
        SamplePoint {
            lambda: cfg.lambda,
            xi: cfg.xi,
            t_sample: cfg.t_sample,
        }
    }
}

/// Everything fixed across the records of one evaluation.
pub struct EvalContext<'a> {
    pub nets: &'a Networks,
    pub newton: &'a NewtonDecomposer,
    pub geometry: &'a FanBeamGeometry,
    pub op: &'a SystemMatrix,
    pub solver: &'a SolverConfig,
    pub range: DataRange,
}

/// Reconstructs one record with `methods` at each sampler point. FBP is run
/// once; its output is clamped at zero like the sampler's.
pub fn evaluate_record(
    ctx: &EvalContext,
    rec: &DatasetRecord,
    d: &RecordData,
    methods: &[Method],
    points: &[SamplePoint],
) -> Result<RecordResult> {
    let w = stat_weights(&d.y)?;
    let angles = ctx.geometry.n_views();
    let needs_dm = methods.iter().any(|m| matches!(m, Method::Fbp | Method::DecompMod));
    let learned = if needs_dm {
        Some(DataTerm::from_measurement(&d.y, &ctx.nets.decomp, &w, ctx.op)?)
    } else {
        None
    };
    let oracle = if methods.contains(&Method::Oracle) {
        Some(DataTerm::from_measurement(&d.y, ctx.newton as &dyn SinogramDecomposer, &w, ctx.op)?)
    } else {
        None
    };
    let truth = [d.x.channel(0).to_owned(), d.x.channel(1).to_owned()];
    let mut recons = vec![];
    for material in ctx.solver.materials.iter().copied() {
        let s = material.index();
        let range = ctx.range.get(material);
        let score = |img: &Array2<f64>| -> Result<(f64, f64)> { Ok((psnr(&img.view(), &truth[s].view(), range)?, ssim(&img.view(), &truth[s].view(), range)?)) };
        for &method in methods {
            if method == Method::Fbp {
                let start = std::time::Instant::now();
                let img = ctx.geometry.fbp(&learned.as_ref().unwrap().p_hat.channel(s))?.mapv(|v| v.max(0.0));
                let runtime = start.elapsed().as_secs_f64();
                let (p, q) = score(&img)?;
                recons.push(Reconstruction {
                    method,
                    material,
                    metric: MetricRecord {
                        method,
                        material,
                        angles,
                        lambda: None,
                        xi: None,
                        t_sample: None,
                        psnr: p,
                        ssim: q,
                        runtime,
                        seed: rec.seed,
                    },
                    image: img,
                    trace: None,
                });
                continue;
            }
            let data = if method == Method::Oracle { oracle.as_ref() } else { learned.as_ref() }.unwrap();
            for pt in points {
                let cfg = SolverConfig {
                    lambda: pt.lambda,
                    xi: pt.xi,
                    t_sample: pt.t_sample,
                    seed: ctx.solver.seed.wrapping_add(rec.seed),
                    ..ctx.solver.clone()
                };
                let trace = reconstruct_channel(data, material, &Prior::from_denoiser(ctx.nets.denoiser(material)), &cfg, ctx.op)?;
                let (p, q) = score(&trace.final_image)?;
                recons.push(Reconstruction {
                    method,
                    material,
                    image: trace.final_image.clone(),
                    metric: MetricRecord {
                        method,
                        material,
                        angles,
                        lambda: Some(pt.lambda),
                        xi: Some(pt.xi),
                        t_sample: Some(pt.t_sample),
                        psnr: p,
                        ssim: q,
                        runtime: trace.wall_time,
                        seed: rec.seed,
                    },
                    trace: Some(trace),
                });
            }
        }
    }
    Ok(RecordResult {
        id: rec.id.clone(),
        truth,
        recons,
    })
}

/// Display window from the 1st and 99th percentiles of `img`, widened to
/// `[0, max]` when those coincide (sparse bone images).
pub fn percentile_window(img: &ArrayView2<f64>) -> (f64, f64) {
    let mut v: Vec<f64> = img.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
    let (lo, hi) = (at(0.01), at(0.99));
    if hi > lo {
        return (lo, hi);
    }
    let max = *v.last().unwrap();
    if max > lo {
        (lo, max)
    } else {
        (lo, lo + 1.0)
    }
}

const MONTAGE_GAP: usize = 2;

/// Grid of 8-bit tiles: one row per material, ground truth first. Every tile
/// of a row shares the ground truth's window.
pub fn write_montage(path: &Path, rows: &[Vec<ArrayView2<f64>>]) -> Result<()> {
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (th, tw) = rows.first().and_then(|r| r.first()).map(|a| a.dim()).ok_or_else(|| Error::param("empty montage"))?;
    let height = rows.len() * th + (rows.len() - 1) * MONTAGE_GAP;
    let width = n_cols * tw + (n_cols - 1) * MONTAGE_GAP;
    let mut buf = vec![0u8; height * width];
    for (r, row) in rows.iter().enumerate() {
        let (lo, hi) = percentile_window(&row[0]);
        for (c, tile) in row.iter().enumerate() {
            if tile.dim() != (th, tw) {
                return Err(Error::DimensionMismatch {
                    expected: vec![th, tw],
                    actual: tile.shape().to_vec(),
                });
            }
            for ((i, j), &v) in tile.indexed_iter() {
                let g = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                buf[(r * (th + MONTAGE_GAP) + i) * width + c * (tw + MONTAGE_GAP) + j] = (g * 255.0).round() as u8;
            }
        }
    }
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&buf).map_err(png_err)?;
    w.finish().map_err(png_err)
}

fn save_outputs(dir: &Path, res: &RecordResult, montage: bool) -> Result<()> {
    let (img_dir, trace_dir) = (dir.join("images"), dir.join("traces"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&trace_dir)?;
    for r in &res.recons {
        let stem = format!("{}_{}_{}", res.id, r.material.name(), r.method.file_stem());
        let mut img = r.image.clone();
        to_storage_precision(&mut img);
        write_array_f64(img_dir.join(format!("{stem}.sdmp")), &img.view().into_dyn())?;
        if let Some(t) = &r.trace {
            t.write_csv(trace_dir.join(format!("{stem}.csv")))?;
        }
    }
    if montage {
        let mdir = dir.join("montages");
        fs::create_dir_all(&mdir)?;
        let mut rows = vec![];
        for m in Material::both() {
            let mut row = vec![res.truth[m.index()].view()];
            row.extend(res.recons.iter().filter(|r| r.material == m).map(|r| r.image.view()));
            if row.len() > 1 {
                rows.push(row);
            }
        }
        if !rows.is_empty() {
            write_montage(&mdir.join(format!("{}.png", res.id)), &rows)?;
        }
    }
    Ok(())
}

/// Run-level facts needed to interpret the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub data_range: DataRange,
    pub decomp_checksum: String,
    pub bone_checksum: String,
    pub water_checksum: String,
}

impl RunInfo {
    fn new(cfg: &ExperimentConfig, range: DataRange, nets: &Networks) -> Self {
        RunInfo {
            seed: cfg.seed,
            data_range: range,
            decomp_checksum: nets.decomp.checksum(),
            bone_checksum: nets.bone.checksum(),
            water_checksum: nets.water.checksum(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUN_INFO_FILE: &str = "run_info.toml";
pub const ANGLE_SWEEP_FILE: &str = "angle_sweep.csv";
pub const PARAM_STUDY_FILE: &str = "param_study.csv";

/// A simulated dataset with trained networks, ready for evaluation.
pub struct Prepared {
    pub model: SpectralModel,
    pub manifest: DatasetManifest,
    pub data: Vec<RecordData>,
    pub nets: Networks,
    pub range: DataRange,
}

/// Simulates (and writes) the dataset, then loads or trains the networks.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    cfg.init_threads();
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let model = cfg.spectral_model()?;
    let (manifest, data) = simulate(cfg, &model)?;
    write_dataset(&manifest, &data, &out.join("dataset")).map_err(|e| e.at_stage("simulate"))?;
    let nets = obtain_networks(cfg, &model, &manifest, &data, &out.join("models"))?;
    let range = DataRange::from_truth(train_records(&manifest, &data).map(|(_, d)| d))?;
    RunInfo::new(cfg, range, &nets).write(&out.join(RUN_INFO_FILE))?;
    Ok(Prepared {
        model,
        manifest,
        data,
        nets,
        range,
    })
}

fn eval_jobs(
    ctx: &EvalContext,
    jobs: &[(&DatasetRecord, &RecordData)],
    methods: &[Method],
    points: &[SamplePoint],
    save_to: Option<(&Path, bool)>,
) -> Result<Vec<MetricRecord>> {
    let per_record: Vec<Vec<MetricRecord>> = jobs
        .par_iter()
        .map(|(rec, d)| {
            let res = evaluate_record(ctx, rec, d, methods, points)?;
            log::info!("reconstructed {} at {} views", rec.id, ctx.geometry.n_views());
            if let Some((dir, montage)) = save_to {
                save_outputs(dir, &res, montage)?;
            }
            Ok(res.recons.into_iter().map(|r| r.metric).collect())
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.at_stage("reconstruct"))?;
    let mut rows: Vec<MetricRecord> = per_record.into_iter().flatten().collect();
    sort_records(&mut rows);
    Ok(rows)
}

/// Full run: dataset, networks, reconstructions of the test split with the
/// configured methods, `metrics.csv`, `summary.csv` and montages.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(Prepared, Vec<MetricRecord>)> {
    let prep = prepare(cfg)?;
    let rows = evaluate_test_split(cfg, &prep)?;
    Ok((prep, rows))
}

pub fn evaluate_test_split(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<MetricRecord>> {
    let scan = prep.manifest.acquisition.scan()?;
    let g = scan.material_geometry();
    let op = SystemMatrix::new(g)?;
    let newton = NewtonDecomposer::new(prep.model.clone());
    let ctx = EvalContext {
        nets: &prep.nets,
        newton: &newton,
        geometry: g,
        op: &op,
        solver: &cfg.solver,
        range: prep.range,
    };
    let jobs: Vec<_> = prep.manifest.records.iter().zip(&prep.data).filter(|(r, _)| r.split == Split::Test).collect();
    let rows = eval_jobs(&ctx, &jobs, &cfg.methods, &[SamplePoint::of(&cfg.solver)], Some((&cfg.output_dir, cfg.montages)))?;
    write_metrics_csv(cfg.output_dir.join(METRICS_FILE), &rows)?;
    write_summary_csv(cfg.output_dir.join(SUMMARY_FILE), &summarize(&rows))?;
    Ok(rows)
}

/// Fresh test phantoms and noise for sweep repetition `rep`, acquired with
/// `views` views per channel.
pub fn sweep_test_set(cfg: &ExperimentConfig, rep: u64, views: usize) -> DatasetManifest {
    let mut acq = cfg.acquisition();
    acq.views_per_channel = views;
    let base = cfg.dataset.base_seed.wrapping_add(cfg.seed).wrapping_add(SWEEP_SEED_STRIDE.wrapping_mul(rep + 1));
    let mut m = DatasetManifest::torso(acq, 0, cfg.sweep.n_records, base);
    for r in &mut m.records {
        r.id = format!("rep{rep}_{}", r.id);
    }
    m
}

fn simulate_set(m: &DatasetManifest, model: &SpectralModel) -> Result<Vec<RecordData>> {
    m.records
        .iter()
        .map(|r| simulate_record(r, &m.acquisition, &m.threshold, model))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("simulate"))
}

/// FBP and DEcomp-MoD at every view count of the sweep, with networks trained
/// at the configured view count. Writes `angle_sweep.csv`.
pub fn run_angle_sweep(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<MetricRecord>> {
    let newton = NewtonDecomposer::new(prep.model.clone());
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| *m != Method::Oracle).collect();
    let mut rows = vec![];
    for &views in &cfg.sweep.angles {
        let m0 = sweep_test_set(cfg, cfg.sweep.seeds[0], views);
        let scan = m0.acquisition.scan()?;
        let g = scan.material_geometry().clone();
        let op = SystemMatrix::new(&g)?;
        let ctx = EvalContext {
            nets: &prep.nets,
            newton: &newton,
            geometry: &g,
            op: &op,
            solver: &cfg.solver,
            range: prep.range,
        };
        for &rep in &cfg.sweep.seeds {
            let m = sweep_test_set(cfg, rep, views);
            let data = simulate_set(&m, &prep.model)?;
            let jobs: Vec<_> = m.records.iter().zip(&data).collect();
            rows.extend(eval_jobs(&ctx, &jobs, &methods, &[SamplePoint::of(&cfg.solver)], None)?);
        }
    }
    sort_records(&mut rows);
    write_metrics_csv(cfg.output_dir.join(ANGLE_SWEEP_FILE), &rows)?;
    Ok(rows)
}

/// Sampler points of the parameter study: the λ × ξ grid at the configured
/// `T`, plus every `T` at the configured λ and ξ.
pub fn param_points(cfg: &ExperimentConfig) -> Vec<SamplePoint> {
    let mut seen = BTreeSet::new();
    let mut pts = vec![];
    let mut add = |p: SamplePoint| {
        if seen.insert((p.lambda.to_bits(), p.xi.to_bits(), p.t_sample)) {
            pts.push(p);
        }
    };
    for &lambda in &cfg.sweep.lambdas {
        for &xi in &cfg.sweep.xis {
            add(SamplePoint {
                lambda,
                xi,
                t_sample: cfg.solver.t_sample,
            });
        }
    }
    for &t_sample in &cfg.sweep.t_samples {
        add(SamplePoint {
            t_sample,
            ..SamplePoint::of(&cfg.solver)
        });
    }
    pts
}

/// DEcomp-MoD over [`param_points`] at the configured view count, with an FBP
/// reference per record. Writes `param_study.csv`.
pub fn run_param_study(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<MetricRecord>> {
    let newton = NewtonDecomposer::new(prep.model.clone());
    let scan = prep.manifest.acquisition.scan()?;
    let g = scan.material_geometry();
    let op = SystemMatrix::new(g)?;
    let ctx = EvalContext {
        nets: &prep.nets,
        newton: &newton,
        geometry: g,
        op: &op,
        solver: &cfg.solver,
        range: prep.range,
    };
    let points = param_points(cfg);
    let mut rows = vec![];
    for &rep in &cfg.sweep.seeds {
        let m = sweep_test_set(cfg, rep, cfg.acquisition.views);
        let data = simulate_set(&m, &prep.model)?;
        let jobs: Vec<_> = m.records.iter().zip(&data).collect();
        rows.extend(eval_jobs(&ctx, &jobs, &[Method::Fbp, Method::DecompMod], &points, None)?);
    }
    sort_records(&mut rows);
    write_metrics_csv(cfg.output_dir.join(PARAM_STUDY_FILE), &rows)?;
    Ok(rows)
}

/// Path of a reconstructed image written by [`run_pipeline`].
pub fn image_path(dir: &Path, id: &str, material: Material, method: Method) -> PathBuf {
    dir.join("images").join(format!("{id}_{}_{}.sdmp", material.name(), method.file_stem()))
}
