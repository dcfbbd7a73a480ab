use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kanseg::config::RunConfig;
use kanseg::dataset::{colorize, Dataset, Split};
use kanseg::model::{Model, Variant};
use kanseg::trainer::{evaluate_tiles, train_loop, TrainOptions};
use kanseg::{ablation, checkpoint, checks, Error};

#[derive(Parser, Debug)]
#[command(name = "kanseg", version, about = "KAN-based semantic segmentation on synthetic aerial tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model variant; overrides the DeepKAN and decoder FFN toggles.
    #[arg(long)]
    variant: Option<Variant>,
    /// Sliding-window stride used for evaluation and prediction.
    #[arg(long)]
    stride: Option<usize>,
    /// Patch side for training samples and evaluation windows.
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tile set with its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of tiles (overrides the config).
        #[arg(long)]
        tiles: Option<usize>,
        /// Tile side in pixels (overrides the config).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model; writes train.log, throughput.log, best.ckpt and last.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; synthesized in memory from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write stitched class-index PGMs and color PPMs for the test tiles.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predict every tile instead of only the test split.
        #[arg(long)]
        all: bool,
    },
    /// Finite-difference gradient checks for every layer family.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and score all four DeepKAN / KAN-decoder combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = c.variant {
        cfg.model = cfg.model.with_variant(v);
    }
    if let Some(p) = c.patch {
        cfg.data.patch = p;
    }
    if let Some(s) = c.stride {
        cfg.data.test_stride = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(c: &Common) -> Result<&Path, Failure> {
    c.out.as_deref().ok_or_else(|| Failure::Config("--out is required for this command".into()))
}

/// Loads a dataset directory, applying `--patch` / `--stride` overrides to its sampling.
fn load_data(dir: &Path, c: &Common) -> Result<Dataset, Failure> {
    let mut data = Dataset::load(dir)?;
    if let Some(p) = c.patch {
        data.manifest.patch = p;
    }
    if let Some(s) = c.stride {
        data.manifest.test_stride = s;
    }
    data.manifest.validate()?;
    Ok(data)
}

fn dataset_for(c: &Common, cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset, Failure> {
    match dir {
        Some(d) => load_data(d, c),
        None => Ok(Dataset::synthesize(&cfg.data, cfg.seed)?),
    }
}

fn load_model(path: &Path, c: &Common) -> Result<Model, Failure> {
    let (model, info) = checkpoint::load(path)?;
    if let Some(v) = c.variant {
        if v != model.config().variant() {
            return Err(Failure::Config(format!("checkpoint holds variant {}, not {v}", model.config().variant())));
        }
    }
    eprintln!("loaded {} (epoch {}, {} parameters)", path.display(), info.epoch, model.num_params());
    Ok(model)
}

fn synth(c: &Common, tiles: Option<usize>, size: Option<usize>) -> Outcome {
    let mut cfg = load_config(c)?;
    let out = require_out(c)?;
    if let Some(t) = tiles {
        cfg.data.tiles = t;
        cfg.data.test_tiles = cfg.data.test_tiles.min(t.saturating_sub(1));
    }
    if let Some(s) = size {
        cfg.data.tile_size = s;
        cfg.data.patch = cfg.data.patch.min(s);
    }
    cfg.validate()?;
    let data = Dataset::synthesize(&cfg.data, cfg.seed)?;
    data.save(out)?;
    println!("wrote {} tiles to {}", data.tiles.len(), out.display());
    Ok(())
}

fn train(c: &Common, data_dir: Option<&Path>) -> Outcome {
    let cfg = load_config(c)?;
    let out = require_out(c)?;
    let data = dataset_for(c, &cfg, data_dir)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    eprintln!("variant {} with {} parameters", cfg.model.variant(), model.num_params());
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join("config.toml");
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), verbose: true };
    let outcome = train_loop(&mut model, &data, &cfg.train, cfg.seed, &opts)?;
    if let Some(last) = outcome.epochs.last() {
        println!("{}", last.log_line());
    }
    if let Some((epoch, miou)) = outcome.best {
        println!("best test_miou={miou:.6} at epoch={epoch}");
    }
    Ok(())
}

fn eval(c: &Common, ckpt: &Path, data_dir: &Path) -> Outcome {
    let model = load_model(ckpt, c)?;
    let data = load_data(data_dir, c)?;
    let test = data.split(Split::Test);
    let ev = evaluate_tiles(&model, &test, data.manifest.patch, data.manifest.test_stride)?;
    let report = ev.report().to_string();
    print!("{report}");
    if let Some(out) = &c.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("report.txt");
        fs::write(&p, &report).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn predict(c: &Common, ckpt: &Path, data_dir: &Path, all: bool) -> Outcome {
    let out = require_out(c)?;
    let model = load_model(ckpt, c)?;
    let data = load_data(data_dir, c)?;
    let tiles = if all { data.tiles.iter().collect() } else { data.split(Split::Test) };
    let ev = evaluate_tiles(&model, &tiles, data.manifest.patch, data.manifest.test_stride)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (tile, pred) in tiles.iter().zip(&ev.predictions) {
        pred.save(&out.join(format!("{}_pred.pgm", tile.record.name)))?;
        colorize(pred).save(&out.join(format!("{}_pred.ppm", tile.record.name)))?;
    }
    println!("wrote {} predictions to {}", tiles.len(), out.display());
    Ok(())
}

fn gradcheck(c: &Common) -> Outcome {
    let seed = c.seed.unwrap_or(7);
    let reports = checks::run_all(seed)?;
    let mut failed = 0;
    for r in &reports {
        println!("{r}");
        if !r.passed() {
            failed += 1;
            println!("{}", r.report);
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} families failed", reports.len())));
    }
    Ok(())
}

fn ablate(c: &Common, data_dir: Option<&Path>) -> Outcome {
    if c.variant.is_some() {
        return Err(Failure::Config("ablate runs every variant; drop --variant".into()));
    }
    let cfg = load_config(c)?;
    let data = dataset_for(c, &cfg, data_dir)?;
    let result = ablation::run(&cfg.model, &data, &cfg.train, cfg.seed, c.out.clone(), true)?;
    let table = result.to_string();
    println!("{table}");
    if let Some(out) = &c.out {
        let p = out.join("ablation.txt");
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        fs::write(&p, format!("{table}\n")).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { common, tiles, size } => synth(&common, tiles, size),
        Command::Train { common, data } => train(&common, data.as_deref()),
        Command::Eval { common, checkpoint, data } => eval(&common, &checkpoint, &data),
        Command::Predict { common, checkpoint, data, all } => predict(&common, &checkpoint, &data, all),
        Command::Gradcheck { common } => gradcheck(&common),
        Command::Ablate { common, data } => ablate(&common, data.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
