use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use roma::checkpoint::Checkpoint;
use roma::config::ExperimentConfig;
use roma::data::{self, Dataset};
use roma::encoder::EncoderParams;
use roma::eval::{self, EvalReport, ProbeConfig};
use roma::experiment::{self, Axis, Variant, ABLATION_HEADER};
use roma::trainer::{self, TrainError, TrainOutcome};
use roma::{Precision, Scalar};

const SEED_ENV: &str = "ROMA_SEED";

#[derive(Parser)]
#[command(name = "roma", version, about = "Self-supervised training with random PSD similarity maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write checkpoint, metrics and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Root seed; overrides ROMA_SEED and the config value.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on frozen backbone features.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RMDS or CIFAR binary file.
        #[arg(long)]
        data: PathBuf,
        /// Separate test file; otherwise `--data` is split.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config whose `eval` section sets probe and kNN settings; defaults
        /// to `config.resolved.json` beside the checkpoint when present.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Sweep one ablation axis, one seeded run per variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run variants on separate threads (each in its own directory).
        #[arg(long)]
        parallel: bool,
    },
    /// Run the gradient, PSD, identity, closed-form and monotonicity suites.
    Selftest {
        /// Use the reversed hinge `[s+ - s- + gamma]+`.
        #[arg(long)]
        faithful_eq1: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Linear,
    Knn,
    Export,
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse().map_err(|e: roma::Error| e.to_string())
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<roma::Error> for Failure {
    fn from(e: roma::Error) -> Self {
        let code = match e {
            roma::Error::Config(_) | roma::Error::Format(_) | roma::Error::Generation(_) => 2,
            _ => 1,
        };
        Failure::new(code, e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::new(1, e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            test_data,
            mode,
            out,
            config,
            test_fraction,
        } => cmd_eval(&checkpoint, &data, test_data.as_deref(), mode, out, config.as_deref(), test_fraction),
        Command::Ablate {
            config,
            axis,
            out,
            seed,
            parallel,
        } => cmd_ablate(&config, axis, &out, seed, parallel),
        Command::Selftest { faithful_eq1 } => cmd_selftest(faithful_eq1),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| Failure::new(2, e))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| Failure::new(2, e))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    } else if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.train.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::new(2, anyhow!("{} must be an unsigned integer, got '{}'", SEED_ENV, v)))?;
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::from)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::from)
}

/// Trains and writes `checkpoint.roma`, `metrics.csv` and any periodic
/// checkpoints into `out`.
fn train_into<T: Scalar>(cfg: &ExperimentConfig, train: &Dataset, out: &Path) -> Result<TrainOutcome<T>, Failure> {
    let every = cfg.train.checkpoint_every;
    let result = trainer::train_with::<T>(cfg, train, |rec, params| {
        if every > 0 && rec.epoch % every == 0 && rec.epoch < cfg.train.epochs {
            Checkpoint::from_params(params).save(&out.join(format!("checkpoint_epoch{:04}.roma", rec.epoch)))?;
        }
        Ok(())
    });
    match result {
        Ok(outcome) => {
            Checkpoint::from_params(&outcome.params).save(&out.join("checkpoint.roma"))?;
            write(&out.join("metrics.csv"), trainer::metrics_csv(&outcome.log))?;
            Ok(outcome)
        }
        Err(TrainError::NonFinite { epoch, batch, step, log }) => {
            write(&out.join("metrics.csv"), trainer::metrics_csv(&log))?;
            let msg = format!("non-finite loss at epoch {}, batch {} (step {})", epoch, batch, step);
            write(&out.join("abort.txt"), format!("{}\n", msg))?;
            Err(Failure::new(3, anyhow!(msg)))
        }
        Err(TrainError::Failed(e)) => Err(e.into()),
    }
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    create_dir(out)?;
    let sets = experiment::load_datasets(&cfg)?;
    write(&out.join("config.resolved.json"), cfg.to_json())?;
    if let Some(full) = &sets.full {
        write(&out.join("dataset.rmds"), data::encode_rmds(full))?;
    }
    let (steps, log) = match cfg.train.precision {
        Precision::F32 => {
            let o = train_into::<f32>(&cfg, &sets.train, out)?;
            (o.steps, o.log)
        }
        Precision::F64 => {
            let o = train_into::<f64>(&cfg, &sets.train, out)?;
            (o.steps, o.log)
        }
    };
    match log.last() {
        Some(last) => println!(
            "trained {} epochs ({} steps): loss {:.6} -> {:.6}, emb_std {:.4}, mean_offdiag_cos {:.4}, maps drawn {}",
            last.epoch, steps, log[0].loss, last.loss, last.emb_std, last.mean_offdiag_cos, last.regen_count
        ),
        None => println!("0 epochs: wrote initial parameters"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::new(2, e))?;
    let ds = if data::is_rmds(&bytes) {
        data::decode_rmds(&bytes)?
    } else {
        data::parse_cifar_binary(&bytes)?
    };
    Ok(ds)
}

fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    test_path: Option<&Path>,
    mode: EvalMode,
    out: Option<PathBuf>,
    config: Option<&Path>,
    test_fraction: f64,
) -> CmdResult {
    let beside = checkpoint.with_file_name("config.resolved.json");
    let cfg = match config {
        Some(p) => load_config(p, None)?,
        None if beside.is_file() => load_config(&beside, None)?,
        None => ExperimentConfig::default(),
    };
    let ck = Checkpoint::load(checkpoint).map_err(|e| match e {
        roma::Error::Io(io) => Failure::new(2, anyhow!("reading checkpoint {}: {}", checkpoint.display(), io)),
        other => Failure::from(other),
    })?;
    let all = load_dataset(data_path)?;
    let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    let mode_name = match mode {
        EvalMode::Linear => "linear",
        EvalMode::Knn => "knn",
        EvalMode::Export => "export",
    };
    let report = match ck.dtype_tag() {
        Some(1) => eval_with::<f64>(&ck, &all, test_path, mode, &out, &cfg, test_fraction)?,
        _ => eval_with::<f32>(&ck, &all, test_path, mode, &out, &cfg, test_fraction)?,
    };
    let mut report = report;
    report.config.push(("mode".into(), mode_name.into()));
    report.config.push(("checkpoint".into(), checkpoint.display().to_string()));
    print!("{}", report.to_kv());
    write(&out.join(format!("eval_{}.txt", mode_name)), report.to_kv())?;
    write(
        &out.join(format!("eval_{}.csv", mode_name)),
        format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )?;
    Ok(())
}

fn eval_with<T: Scalar>(
    ck: &Checkpoint,
    all: &Dataset,
    test_path: Option<&Path>,
    mode: EvalMode,
    out: &Path,
    cfg: &ExperimentConfig,
    test_fraction: f64,
) -> Result<EvalReport, Failure> {
    let params: EncoderParams<T> = ck.to_params()?;
    if params.input_dim() != all.samples.dim() {
        return Err(Failure::new(
            2,
            anyhow!(
                "checkpoint expects {}-dimensional samples, data has {}",
                params.input_dim(),
                all.samples.dim()
            ),
        ));
    }
    let (train, test) = match test_path {
        Some(p) => (all.clone(), load_dataset(p)?),
        None => all.split(test_fraction)?,
    };
    let mut report = EvalReport::default();
    match mode {
        EvalMode::Linear => {
            let probe = ProbeConfig::from_eval(&cfg.eval, cfg.probe_seed());
            report.probe_top1 = Some(eval::linear_probe(&params, &train, &test, &probe)?);
        }
        EvalMode::Knn => {
            report.knn_top1 = Some(eval::knn_eval(&params, &train, &test, cfg.eval.knn_k)?);
            report.config.push(("knn_k".into(), cfg.eval.knn_k.to_string()));
        }
        EvalMode::Export => {
            let path = out.join("embeddings.csv");
            eval::export_embeddings(&params, all, &path)?;
            report.config.push(("rows".into(), all.len().to_string()));
            report.config.push(("embeddings".into(), path.display().to_string()));
        }
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    if test.len() >= 2 {
        let z = params.embeddings(&test.samples.matrix(&idx).cast::<T>())?;
        let (s, c) = eval::collapse_diagnostics(&z)?;
        report.emb_std = s;
        report.mean_offdiag_cos = c;
    }
    report.config.push(("n_train".into(), train.len().to_string()));
    report.config.push(("n_test".into(), test.len().to_string()));
    Ok(report)
}

struct RunRow {
    variant: Variant,
    row: Result<String, String>,
}

fn run_variant<T: Scalar>(v: &Variant, dir: &Path) -> Result<String, Failure> {
    create_dir(dir)?;
    write(&dir.join("config.resolved.json"), v.config.to_json())?;
    let sets = experiment::load_datasets(&v.config)?;
    let outcome = train_into::<T>(&v.config, &sets.train, dir)?;
    let report = experiment::evaluate(&outcome.params, &sets.train, &sets.test, &v.config)?;
    write(&dir.join("eval.txt"), report.to_kv())?;
    let final_loss = outcome.log.last().map_or(f64::NAN, |r| r.loss);
    Ok(format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
        report.probe_top1.unwrap_or(f64::NAN),
        report.knn_top1.unwrap_or(f64::NAN),
        final_loss,
        report.emb_std,
        report.mean_offdiag_cos,
        outcome.generations,
        outcome.steps
    ))
}

fn run_one(v: &Variant, dir: &Path) -> RunRow {
    let row = match v.config.train.precision {
        Precision::F32 => run_variant::<f32>(v, dir),
        Precision::F64 => run_variant::<f64>(v, dir),
    };
    RunRow {
        variant: v.clone(),
        row: row.map_err(|f| format!("{:#}", f.error)),
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            '+' => 'p',
            '/' => '_',
            c if c.is_ascii_alphanumeric() => c,
            _ => '-',
        })
        .collect()
}

fn cmd_ablate(config: &Path, axis: Axis, out: &Path, seed: Option<u64>, parallel: bool) -> CmdResult {
    let base = load_config(config, seed)?;
    let variants = experiment::variants(&base, axis);
    for v in &variants {
        v.config.validate().map_err(|e| Failure::new(2, e))?;
    }
    let root = out.join(axis.name());
    create_dir(&root)?;
    let dirs: Vec<PathBuf> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| root.join(format!("{:02}_{}", i, slug(&v.label))))
        .collect();
    let rows: Vec<RunRow> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = variants
                .iter()
                .zip(&dirs)
                .map(|(v, d)| s.spawn(move || run_one(v, d)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        })
    } else {
        variants.iter().zip(&dirs).map(|(v, d)| run_one(v, d)).collect()
    };

    let mut table = format!("{}\n", ABLATION_HEADER);
    let mut failed = Vec::new();
    for r in &rows {
        let cells = match &r.row {
            Ok(cells) => cells.clone(),
            Err(e) => {
                failed.push(format!("{}: {}", r.variant.label, e));
                "nan,nan,nan,nan,nan,nan,nan".to_string()
            }
        };
        table.push_str(&format!("{},{},{},{}\n", axis, r.variant.label, r.variant.setting, cells));
    }
    let path = out.join(format!("ablation_{}.csv", axis));
    write(&path, &table)?;
    print!("{}", table);
    println!("wrote {}", path.display());
    if !failed.is_empty() {
        return Err(Failure::new(1, anyhow!("{} run(s) failed: {}", failed.len(), failed.join("; "))));
    }
    Ok(())
}

fn cmd_selftest(faithful_eq1: bool) -> CmdResult {
    let results = roma::selftest::run_all(faithful_eq1);
    for r in &results {
        println!("{}", r);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{}/{} properties passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, anyhow!("failing properties: {}", failed.join(", "))))
    }
}
