//! `cfsnet`: train, restore, sweep and serve.
//!
//! Usage errors exit with 2, runtime failures with 1.

mod config;

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use cfsnet::checkpoint::{load_checkpoint, save_checkpoint, Provenance};
use cfsnet::degrade::{DatasetSource, DegradationSpec};
use cfsnet::eval::{
    compare_methods, fidelity, sweep_alpha, Adaptive, AlphaGrid, MainOnly, Restorer, SharedAlpha, SweepReport,
};
use cfsnet::image::{self, Format, Image};
use cfsnet::model::{CfsModel, Task};
use cfsnet::train::{train_step1_observed, train_step2_observed, JsonLinesLog, StepRecord};
use cfsnet::wire::{decode_image, encode_image, Control, GridSpec, RestoreRequest, SweepRequest};
use clap::{Parser, Subcommand, ValueEnum};
use config::TrainConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cfsnet", version, about = "Controllable image restoration with coupled feature branches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Denoise,
    Deblock,
    Sr,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Denoise => Task::Denoise,
            TaskArg::Deblock => Task::Deblock,
            TaskArg::Sr => Task::Sr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Coefficients from the control mapper.
    Cfsnet,
    /// Every coefficient equals alpha.
    CfsnetSa,
    /// Main branch only.
    MainOnly,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Cfsnet => "cfsnet",
            Method::CfsnetSa => "cfsnet-sa",
            Method::MainOnly => "main-only",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one training step and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        step: u8,
        /// Training configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Step-1 checkpoint to continue from (required for step 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print progress every N steps (0 disables).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Restore one image at a control value.
    Restore {
        #[arg(long, required_unless_present = "server")]
        ckpt: Option<PathBuf>,
        /// Use a running service instead of a local checkpoint.
        #[arg(long, conflicts_with = "ckpt")]
        server: Option<String>,
        #[arg(long, value_parser = finite_f64, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Ground truth for PSNR/RMSE.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cfsnet")]
        method: Method,
    },
    /// Mean PSNR over a dataset at every control value of a grid.
    Sweep {
        #[arg(long, required_unless_present = "server")]
        ckpt: Option<PathBuf>,
        #[arg(long, conflicts_with = "ckpt")]
        server: Option<String>,
        /// `start:stop:step` or a comma list.
        #[arg(long, allow_hyphen_values = true)]
        alphas: String,
        /// Directory of clean images or a JSON manifest.
        #[arg(long)]
        dataset: PathBuf,
        /// Degradation spec as inline JSON or a path to a JSON file.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write `alpha,mean_psnr,mean_rmse`.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the per-image long-form CSV.
        #[arg(long)]
        long_csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cfsnet")]
        method: Method,
    },
    /// Sweep CFSNet, its shared-coefficient ablation and optionally a DNI pair.
    Compare {
        /// Adaptive checkpoint.
        #[arg(long)]
        cfs: PathBuf,
        /// Checkpoint trained with the shared-coefficient variant.
        #[arg(long)]
        sa: PathBuf,
        /// DNI network at alpha 0.
        #[arg(long, requires = "dni_b")]
        dni_a: Option<PathBuf>,
        /// DNI network at alpha 1.
        #[arg(long, requires = "dni_a")]
        dni_b: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        alphas: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Coupling coefficients over a grid, as CSV (`.csv`) or JSON.
    ExportCoeffs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        alphas: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API (log level from CFS_LOG).
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = cfsnet_server::DEFAULT_MAX_PIXELS)]
        max_pixels: usize,
        /// Static UI bundle served under /ui.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

fn finite_f64(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be finite, got {v}")),
        Err(_) => Err(format!("not a number: {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { task, step, config, init, out, log, progress } => {
            train(task.into(), step, &config, init.as_deref(), &out, log.as_deref(), progress)
        }
        Command::Restore { ckpt, server, alpha, input, output, gt, method } => match server {
            Some(url) => restore_remote(&url, alpha, &input, &output, gt.as_deref(), method),
            None => restore_local(
                ckpt.as_deref().expect("clap enforces ckpt"),
                alpha,
                &input,
                &output,
                gt.as_deref(),
                method,
            ),
        },
        Command::Sweep { ckpt, server, alphas, dataset, spec, out, csv, long_csv, method } => {
            let spec = parse_spec(&spec)?;
            let report = match server {
                Some(url) => sweep_remote(&url, &alphas, &dataset, spec, method)?,
                None => {
                    let (model, _) = load(ckpt.as_deref().expect("clap enforces ckpt"))?;
                    let grid = AlphaGrid::parse(&alphas)?;
                    let data = DatasetSource::Path { path: dataset }.load(model.config().image_channels)?;
                    let r = restorer(&model, method);
                    let report = sweep_alpha(r.as_ref(), &data, &spec, &grid)?;
                    report
                }
            };
            write_json(&out, &report)?;
            if let Some(p) = csv {
                write_text(&p, &report.to_csv())?;
            }
            if let Some(p) = long_csv {
                write_text(&p, &report.to_long_csv())?;
            }
            println!(
                "{}",
                serde_json::to_string(
                    &json!({ "best_alpha": report.best_alpha, "best_psnr": report.best_psnr, "points": report.grid.len() })
                )?
            );
            Ok(())
        }
        Command::Compare { cfs, sa, dni_a, dni_b, alphas, dataset, spec, out, csv } => {
            let spec = parse_spec(&spec)?;
            let grid = AlphaGrid::parse(&alphas)?;
            let (cfs, _) = load(&cfs)?;
            let (sa, _) = load(&sa)?;
            let dni = match (dni_a, dni_b) {
                (Some(a), Some(b)) => Some((load(&a)?.0, load(&b)?.0)),
                _ => None,
            };
            let data = DatasetSource::Path { path: dataset }.load(cfs.config().image_channels)?;
            let cmp = compare_methods(&cfs, &sa, dni.as_ref().map(|(a, b)| (a, b)), &data, &spec, &grid)?;
            write_json(&out, &cmp)?;
            if let Some(p) = csv {
                write_text(&p, &cmp.to_csv())?;
            }
            for r in &cmp.reports {
                println!(
                    "{}",
                    serde_json::to_string(
                        &json!({ "method": r.method, "best_alpha": r.best_alpha, "best_psnr": r.best_psnr })
                    )?
                );
            }
            Ok(())
        }
        Command::ExportCoeffs { ckpt, alphas, out } => {
            let (model, _) = load(&ckpt)?;
            let grid = AlphaGrid::parse(&alphas)?;
            let table = model.export_coefficients(grid.values())?;
            if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                write_text(&out, &table.to_csv())
            } else {
                write_json(&out, &table)
            }
        }
        Command::Serve { ckpt, port, host, max_pixels, ui_dir } => {
            cfsnet_server::init_logging();
            let (model, provenance) = load(&ckpt)?;
            if let Some(dir) = &ui_dir {
                if !dir.is_dir() {
                    bail!("UI directory {} does not exist", dir.display());
                }
            }
            let state =
                cfsnet_server::AppState::new(model, provenance, cfsnet_server::ServerConfig { max_pixels, ui_dir });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cfsnet_server::serve(state, SocketAddr::new(host, port)))?;
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<(CfsModel, Provenance)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// Inline JSON, or the path of a JSON file.
fn parse_spec(text: &str) -> Result<DegradationSpec> {
    let body = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        fs::read_to_string(text).with_context(|| format!("reading spec {text}"))?
    };
    let spec: DegradationSpec = serde_json::from_str(&body).context("parsing degradation spec")?;
    spec.validate()?;
    Ok(spec)
}

fn restorer(model: &CfsModel, method: Method) -> Box<dyn Restorer + '_> {
    match method {
        Method::Cfsnet => Box::new(Adaptive(model)),
        Method::CfsnetSa => Box::new(SharedAlpha(model)),
        Method::MainOnly => Box::new(MainOnly(model)),
    }
}

fn load_image_as(path: &Path, channels: usize) -> Result<Image> {
    let img = image::load(path).with_context(|| format!("reading image {}", path.display()))?;
    if img.channels() != channels {
        eprintln!("note: converting {} from {} to {channels} channel(s)", path.display(), img.channels());
    }
    Ok(img.with_channels(channels)?)
}

fn restore_local(
    ckpt: &Path,
    alpha: f64,
    input: &Path,
    output: &Path,
    gt: Option<&Path>,
    method: Method,
) -> Result<()> {
    let (model, _) = load(ckpt)?;
    let channels = model.config().image_channels;
    let img = load_image_as(input, channels)?;
    let restored = restorer(&model, method).restore(&img, alpha)?.clipped();
    image::save(&restored, output).with_context(|| format!("writing {}", output.display()))?;
    let metrics = gt.map(|p| load_image_as(p, channels).and_then(|t| Ok(fidelity(&restored, &t)?))).transpose()?;
    println!(
        "{}",
        serde_json::to_string(&json!({
            "alpha": alpha,
            "method": method.name(),
            "model_id": model.model_id(),
            "psnr": metrics.map(|m| m.psnr),
            "rmse": metrics.map(|m| m.rmse),
        }))?
    );
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_current_thread().enable_all().build()?)
}

fn restore_remote(url: &str, alpha: f64, input: &Path, output: &Path, gt: Option<&Path>, method: Method) -> Result<()> {
    if method != Method::Cfsnet {
        bail!("the service restores with the adaptive method only");
    }
    let client = cfsnet_client::Client::new(url);
    let rt = runtime()?;
    let channels = rt.block_on(client.model())?.config.image_channels;
    let encode = |p: &Path| -> Result<String> { Ok(encode_image(&load_image_as(p, channels)?, Format::Png)?) };
    let req =
        RestoreRequest { image: encode(input)?, alpha: Control(alpha), ground_truth: gt.map(encode).transpose()? };
    let resp = rt.block_on(client.restore(&req))?;
    let (restored, _) = decode_image(&resp.image).map_err(|e| anyhow!("service returned a bad image: {e}"))?;
    image::save(&restored, output).with_context(|| format!("writing {}", output.display()))?;
    println!(
        "{}",
        serde_json::to_string(&json!({
            "alpha": resp.alpha,
            "method": method.name(),
            "model_id": resp.model_id,
            "psnr": resp.psnr,
            "rmse": resp.rmse,
            "timing_ms": resp.timing_ms,
        }))?
    );
    Ok(())
}

fn sweep_remote(url: &str, alphas: &str, dataset: &Path, spec: DegradationSpec, method: Method) -> Result<SweepReport> {
    let path = dataset.canonicalize().with_context(|| format!("resolving {}", dataset.display()))?;
    let req = SweepRequest {
        dataset: DatasetSource::Path { path },
        spec,
        alphas: GridSpec::Text(alphas.to_string()),
        method: Some(method.name().to_string()),
    };
    let client = cfsnet_client::Client::new(url);
    Ok(runtime()?.block_on(client.sweep(&req))?)
}

fn train(
    task: Task,
    step: u8,
    config_path: &Path,
    init: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    progress: usize,
) -> Result<()> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let mut cfg: TrainConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    let (mut model, mut provenance) = match (step, init) {
        (1, None) => {
            cfg.model.task = task;
            let model = CfsModel::build(cfg.model.clone(), cfg.init_seed)?;
            let prov = Provenance { init_seed: Some(cfg.init_seed), ..Provenance::default() };
            (model, prov)
        }
        (1, Some(_)) => bail!("step 1 starts from fresh weights; drop --init"),
        (_, None) => bail!("step 2 needs --init with a step-1 checkpoint"),
        (_, Some(path)) => {
            let (model, prov) = load(path)?;
            if model.config().task != task {
                bail!("checkpoint task is {:?}, not {:?}", model.config().task, task);
            }
            if prov.steps_completed < 1 {
                bail!("checkpoint has not completed step 1");
            }
            (model, prov)
        }
    };
    let data = cfg.patches(step, model.config().image_channels)?;
    let mut run = cfg.run(step);
    eprintln!("step {step}: {} patches, {} iterations, batch {}", data.len(), run.iterations, run.batch_size);

    let mut log = log
        .map(|p| fs::File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()?
        .map(|f| JsonLinesLog::new(std::io::BufWriter::new(f)));
    let total = run.iterations;
    let mut observer = |r: &StepRecord| -> std::io::Result<()> {
        if let Some(l) = log.as_mut() {
            l.write(r)?;
        }
        if progress > 0 && ((r.step + 1).is_multiple_of(progress) || r.step + 1 == total) {
            let mut err = std::io::stderr().lock();
            write!(err, "step {}/{total} lr {:.2e} loss {:.5}", r.step + 1, r.lr, r.loss)?;
            if let Some(c) = r.critic_loss {
                write!(err, " critic {c:.5}")?;
            }
            writeln!(err)?;
        }
        Ok(())
    };
    let result = if step == 1 {
        train_step1_observed(&mut model, &data, &cfg.losses, &mut run, &mut observer)
    } else {
        train_step2_observed(&mut model, &data, &cfg.losses, &mut run, &mut observer)
    };
    if let Some(l) = log {
        l.into_inner().flush()?;
    }
    result?;

    provenance.steps_completed = step;
    provenance.endpoint_a = Some(cfg.losses.endpoint_a.clone());
    provenance.endpoint_b = Some(cfg.losses.endpoint_b.clone());
    provenance.train_seeds.push(cfg.seed);
    if step == 1 {
        provenance.step1_iterations = total;
    } else {
        provenance.step2_iterations = total;
        provenance.step2_variant = Some(cfg.variant);
    }
    save_checkpoint(&model, &provenance, out).with_context(|| format!("writing {}", out.display()))?;
    let last = run.history.last().map(|r| r.loss);
    println!(
        "{}",
        serde_json::to_string(&json!({ "step": step, "model_id": model.model_id(), "final_loss": last, "out": out }))?
    );
    Ok(())
}
