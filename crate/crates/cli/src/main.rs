use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use timealign::gradsuite;
use timealign::train_eval::config::{config_hash, read_json, write_json};
use timealign::train_eval::{
    checkpoint_meta, evaluate, load_checkpoint, load_partial_checkpoint, report_table, save_checkpoint, train, APReport, Dataset,
    EpochLog, EvalProtocol, Model, ReportMeta, RunConfig, TableFormat,
};
use timealign::{exit_code, Error, Result};

#[derive(Parser)]
#[command(name = "timealign", version, about = "Lag-robust LiDAR-camera BEV detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and the loss curve to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Warm start: parameters with matching name and shape are loaded.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under a fixed LiDAR lag.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
        lag: u8,
        /// Where the report JSON goes; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks on desk shapes.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Tabulate every `report_*.json` in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Txt)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Txt,
    Csv,
}

/// Stored as the checkpoint note so evaluation can fill report metadata.
#[derive(Serialize, Deserialize, Default)]
struct RunMeta {
    seed: u64,
    config_hash: String,
    optimizer: String,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    meta: &'a RunMeta,
    best_epoch: usize,
    runtime_s: f64,
    log: &'a [EpochLog],
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {}", dir.display(), e)))
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg: RunConfig = read_json(config)?;
    cfg.data.validate()?;
    let data = Dataset::simulate(&cfg.data)?;
    create_dir(out)?;
    data.save(out)?;
    eprintln!("wrote {} scenes to {}", data.scenes.len(), out.display());
    Ok(())
}

fn run_train(config: &Path, data_dir: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: RunConfig = read_json(config)?;
    cfg.validate()?;
    let data = Dataset::load(data_dir)?;
    if data.bev != cfg.model.bev || data.camera_channels != cfg.model.camera_channels {
        return Err(Error::Config("dataset grid or camera channels differ from the model config".into()));
    }
    let samples = data.prepare_all(cfg.train.first_frame)?;
    let model = Model::new(cfg.model.clone())?;
    let mut store = model.init(cfg.train.seed)?;
    if let Some(path) = init {
        let report = load_partial_checkpoint(&mut store, path)?;
        eprintln!("init: loaded {}, skipped {}", report.loaded.len(), report.skipped.len());
        for (name, reason) in &report.skipped {
            eprintln!("  skipped {}: {}", name, reason);
        }
    }
    let meta = RunMeta {
        seed: cfg.train.seed,
        config_hash: config_hash(&cfg)?,
        optimizer: format!(
            "adam lr={} decay={} batch={} clip={}",
            cfg.train.learning_rate, cfg.train.lr_decay, cfg.train.batch_size, cfg.train.grad_clip
        ),
    };
    let outcome = train(&model, store, &samples, &cfg.train, |e| {
        eprintln!(
            "epoch {:>3} stage {} lambda {:<6} loss {:.5} det {:.5} pred {:.5}",
            e.epoch, e.stage, e.lambda_pred, e.loss, e.det_loss, e.pred_loss
        )
    })?;
    create_dir(out)?;
    let note = serde_json::to_string(&meta)?;
    save_checkpoint(out.join("final.ckpt"), &outcome.store, &model.cfg, &note)?;
    save_checkpoint(out.join("best.ckpt"), &outcome.best, &model.cfg, &note)?;
    write_json(out.join("config.json"), &cfg)?;
    write_json(
        out.join("train_log.json"),
        &TrainSummary {
            meta: &meta,
            best_epoch: outcome.best_epoch,
            runtime_s: outcome.runtime_s,
            log: &outcome.log,
        },
    )?;
    eprintln!("checkpoints in {} ({:.1}s)", out.display(), outcome.runtime_s);
    Ok(())
}

fn run_eval(ckpt: &Path, data_dir: &Path, lag: usize, out: Option<&Path>) -> Result<()> {
    let (store, model_cfg) = load_checkpoint(ckpt)?;
    // runs not written by `train` have a free-form note
    let run: RunMeta = serde_json::from_str(&checkpoint_meta(ckpt)?.note).unwrap_or_default();
    let model = Model::new(model_cfg)?;
    let data = Dataset::load(data_dir)?;
    let protocol = EvalProtocol::single(lag);
    let samples = data.prepare_all(protocol.first_frame)?;
    let started = std::time::Instant::now();
    let label = format!("{:?}", model.cfg.variant);
    let mut reports = evaluate(
        &model,
        &store,
        &samples,
        &protocol,
        &label,
        ReportMeta {
            seed: run.seed,
            config_hash: run.config_hash,
            runtime_s: 0.0,
        },
    )?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&dir)?;
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    for r in &mut reports {
        r.meta.runtime_s = started.elapsed().as_secs_f64();
        write_json(dir.join(format!("report_{}_{}_lag{}.json", label, stem, lag)), &*r)?;
    }
    print!("{}", report_table(&reports, TableFormat::Text)?);
    Ok(())
}

/// Returns whether every check passed.
fn run_gradcheck(module: Option<&str>, seeds: u64) -> Result<bool> {
    let modules: Vec<&str> = match module {
        Some(m) => vec![m],
        None => gradsuite::MODULES.to_vec(),
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let mut ok = true;
    for m in &modules {
        for &seed in &seeds {
            let report = gradsuite::check_module(m, seed)?;
            println!("{:<26} seed {} {}", m, seed, report);
            ok &= report.passed;
        }
    }
    Ok(ok)
}

fn run_report(dir: &Path, format: Format) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {}", dir.display(), e)))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("report_") && name.ends_with(".json")
        })
        .collect();
    paths.sort();
    let reports = paths
        .iter()
        .map(|p| read_json::<APReport>(p).map_err(|e| Error::Data(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let format = match format {
        Format::Txt => TableFormat::Text,
        Format::Csv => TableFormat::Csv,
    };
    print!("{}", report_table(&reports, format)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out } => simulate(config, out),
        Command::Train {
            config,
            data,
            init,
            out,
        } => run_train(config, data, init.as_deref(), out),
        Command::Eval { ckpt, data, lag, out } => run_eval(ckpt, data, *lag as usize, out.as_deref()),
        Command::Gradcheck { module, seeds } => match run_gradcheck(module.as_deref(), *seeds) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(exit_code::DIVERGENCE as u8);
            }
            Err(e) => Err(e),
        },
        Command::Report { input, format } => run_report(input, *format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
