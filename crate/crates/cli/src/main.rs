use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ndarray::{Array3, Ix3};

use sdmp_core::config::ExperimentConfig;
use sdmp_core::dataset::{read_dataset, write_dataset, DatasetManifest, RecordData};
use sdmp_core::decomp::DecompNet;
use sdmp_core::denoiser::{Denoiser, Material};
use sdmp_core::geometry::SystemMatrix;
use sdmp_core::io::{read_array_f64, write_array_f64};
use sdmp_core::pipeline::{self, summarize, Method, SummaryRow};
use sdmp_core::solver::{reconstruct_channel, DataTerm, Prior};
use sdmp_core::spectral::{stat_weights, EnergySinogram};

#[derive(Parser)]
#[command(name = "sdmp", version, about = "Dual-energy material decomposition with a diffusion prior")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML, may `include` others).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the dataset and write it with its index and manifest.
    Simulate(Common),
    /// Train the sinogram decomposer.
    TrainDecomp {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from `simulate`; simulated afresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the diffusion prior of one material.
    TrainDenoiser {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        material: Material,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct material images from one energy sinogram.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Log-attenuation sinogram, shape [2, views, detectors].
        #[arg(long)]
        sino: PathBuf,
        /// Detected counts of the same scan; mean counts are assumed otherwise.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        decomp: PathBuf,
        /// One checkpoint per material to reconstruct.
        #[arg(long, required = true)]
        denoiser: Vec<PathBuf>,
    },
    /// Simulate, train (or load checkpoints) and score the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Score FBP and DEcomp-MoD across view counts.
    SweepAngles {
        #[command(flatten)]
        common: Common,
        /// Directory holding decomp.sdnw and denoiser_{bone,water}.sdnw.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Score DEcomp-MoD across λ, ξ and T.
    SweepParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.init_threads();
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg)
}

fn use_models(cfg: &mut ExperimentConfig, dir: &Option<PathBuf>) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let ck = &mut cfg.checkpoints;
    for (slot, name) in [(&mut ck.decomp, "decomp.sdnw"), (&mut ck.bone, "denoiser_bone.sdnw"), (&mut ck.water, "denoiser_water.sdnw")] {
        let p = dir.join(name);
        if !p.is_file() {
            bail!("{} is missing", p.display());
        }
        *slot = Some(p);
    }
    Ok(())
}

fn dataset(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> Result<(DatasetManifest, Vec<RecordData>)> {
    match data {
        Some(dir) => Ok(read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?),
        None => Ok(pipeline::simulate(cfg, &cfg.spectral_model()?)?),
    }
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<11} {:<6} {:>6} {:>8} {:>5} {:>5} {:>3} {:>13} {:>13}", "method", "mat", "angles", "lambda", "xi", "T", "n", "psnr", "ssim");
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "-".into());
    for r in rows {
        println!(
            "{:<11} {:<6} {:>6} {:>8} {:>5} {:>5} {:>3} {:>6.2}±{:<6.2} {:>6.3}±{:<6.3}",
            r.method.tag(),
            r.material.name(),
            r.angles,
            opt(r.lambda),
            opt(r.xi),
            r.t_sample.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            r.n,
            r.psnr_mean,
            r.psnr_std,
            r.ssim_mean,
            r.ssim_std
        );
    }
}

fn read3(path: &Path) -> Result<Array3<f64>> {
    Ok(read_array_f64(path)?
        .into_dimensionality::<Ix3>()
        .with_context(|| format!("{} is not a 3-d array", path.display()))?)
}

fn reconstruct(cfg: &ExperimentConfig, sino: &Path, counts: &Option<PathBuf>, decomp: &Path, denoisers: &[PathBuf]) -> Result<()> {
    let y = read3(sino)?;
    let counts = match counts {
        Some(p) => read3(p)?,
        None => {
            log::warn!("no counts given; weighting with the mean counts of {} photons", cfg.acquisition.photons);
            y.mapv(|v| cfg.acquisition.photons * (-v).exp())
        }
    };
    let views = y.shape()[1];
    let sino = EnergySinogram::new(y, Some(counts))?;
    let scan = cfg.acquisition().scan_with_views(views)?;
    let g = scan.material_geometry();
    let op = SystemMatrix::new(g)?;
    let net = DecompNet::load(decomp)?;
    let w = stat_weights(&sino)?;
    let data = DataTerm::from_measurement(&sino, &net, &w, &op)?;
    let out = &cfg.output_dir;
    for path in denoisers {
        let d = Denoiser::load(path).with_context(|| format!("loading {}", path.display()))?;
        let m = d.material;
        let fbp = g.fbp(&data.p_hat.channel(m.index()))?.mapv(|v| v.max(0.0));
        write_array_f64(out.join(format!("{}_fbp.sdmp", m.name())), &fbp.view().into_dyn())?;
        let trace = reconstruct_channel(&data, m, &Prior::from_denoiser(&d), &cfg.solver, &op)?;
        write_array_f64(out.join(format!("{}.sdmp", m.name())), &trace.final_image.view().into_dyn())?;
        trace.write_csv(out.join(format!("{}_trace.csv", m.name())))?;
        println!("{}: {} steps in {:.1} s", m.name(), trace.steps.len(), trace.wall_time);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate(c) => {
            let cfg = load_config(&c)?;
            let (manifest, data) = pipeline::simulate(&cfg, &cfg.spectral_model()?)?;
            let dir = cfg.output_dir.join("dataset");
            let index = write_dataset(&manifest, &data, &dir)?;
            println!("wrote {} records ({} files) to {}", data.len(), index.len(), dir.display());
        }
        Cmd::TrainDecomp { common, data } => {
            let cfg = load_config(&common)?;
            let (manifest, records) = dataset(&cfg, &data)?;
            let (net, rep) = pipeline::train_decomposer(&cfg, &cfg.spectral_model()?, &manifest, &records)?;
            let path = cfg.output_dir.join("decomp.sdnw");
            net.save(&path)?;
            println!("validation {:.4e} -> {:.4e}, saved {}", rep.initial_validation, rep.final_validation, path.display());
        }
        Cmd::TrainDenoiser { common, material, data } => {
            let cfg = load_config(&common)?;
            let (manifest, records) = dataset(&cfg, &data)?;
            let (net, rep) = pipeline::train_prior(&cfg, material, &manifest, &records)?;
            let path = cfg.output_dir.join(format!("denoiser_{}.sdnw", material.name()));
            net.save(&path)?;
            println!("validation {:.4e} -> {:.4e}, saved {}", rep.initial_validation, rep.final_validation, path.display());
        }
        Cmd::Reconstruct {
            common,
            sino,
            counts,
            decomp,
            denoiser,
        } => {
            let cfg = load_config(&common)?;
            reconstruct(&cfg, &sino, &counts, &decomp, &denoiser)?;
        }
        Cmd::Evaluate { common, models } => {
            let mut cfg = load_config(&common)?;
            use_models(&mut cfg, &models)?;
            let (_, rows) = pipeline::run_pipeline(&cfg)?;
            print_summary(&summarize(&rows));
        }
        Cmd::SweepAngles { common, models } => {
            let mut cfg = load_config(&common)?;
            use_models(&mut cfg, &models)?;
            cfg.methods.retain(|m| *m != Method::Oracle);
            let prep = pipeline::prepare(&cfg)?;
            print_summary(&summarize(&pipeline::run_angle_sweep(&cfg, &prep)?));
        }
        Cmd::SweepParams { common, models } => {
            let mut cfg = load_config(&common)?;
            use_models(&mut cfg, &models)?;
            let prep = pipeline::prepare(&cfg)?;
            print_summary(&summarize(&pipeline::run_param_study(&cfg, &prep)?));
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
