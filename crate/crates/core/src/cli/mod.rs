//! Experiment runner behind the `advgame` binary.

mod config;

pub use config::{AttackKind, ExperimentConfig, Profile, OUT_DIR_ENV, RESOLVED_NAME};

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::{export_ppm, PerturbationSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, adv_accuracy, default_sample_size, evaluate_checkpoint_series, list_checkpoints, target_rate,
    write_metrics_csv, EvalOptions,
};
use crate::model::{load_checkpoint, Params};
use crate::train::{at_train, fp_matrix_game, fp_train, sgd_train, stream, MatrixGame, TrainReport};

/// Stream of the `attack` subcommand, clear of training and eval streams.
const STREAM_CLI_ATTACK: u64 = 1 << 40;

pub const TRAIN_LOG_HEADER: &str = "iter,loss,batch_acc,lr,pool_size,seconds";

#[derive(Debug, Parser)]
#[command(name = "advgame", version, about = "Fictitious-play robust training toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `desk` or `cifar10`.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one key, `KEY=VALUE`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plain SGD.
    TrainSgd,
    /// Adversarial training with PGD examples.
    TrainAt,
    /// Fictitious play against universal perturbations or patches.
    TrainFp,
    /// Craft a perturbation against one checkpoint.
    Attack {
        /// Defaults to the last checkpoint under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `universal` or `patch`; defaults to the `attack` key.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        target_class: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Output file; defaults to `attack_<kind>.pert` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Clean and adversarial accuracy of every checkpoint.
    Eval {
        #[arg(long)]
        kind: Option<String>,
    },
    /// Convert a perturbation file to a binary PPM image.
    ExportPpm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fictitious play on a built-in matrix game.
    MatrixDemo {
        /// `rps`, `pennies` or `dominant`.
        #[arg(long, default_value = "rps")]
        game: String,
        #[arg(long, default_value_t = 50_000)]
        iters: usize,
    },
}

/// Resolves the config: profile defaults, then the file, then the
/// `ADVGAME_OUT_DIR` variable, then flags.
pub fn resolve_config(args: &GlobalArgs, env_out_dir: Option<OsString>) -> Result<ExperimentConfig> {
    let mut pairs = match &args.config {
        Some(path) => ExperimentConfig::parse_pairs(&std::fs::read_to_string(path)?)?,
        None => Vec::new(),
    };
    if let Some(dir) = env_out_dir.filter(|d| !d.is_empty()) {
        pairs.push(("out_dir".into(), dir.to_string_lossy().into_owned()));
    }
    if let Some(p) = &args.profile {
        pairs.push(("profile".into(), p.clone()));
    }
    if let Some(dir) = &args.out_dir {
        pairs.push(("out_dir".into(), dir.display().to_string()));
    }
    if let Some(seed) = args.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    ExperimentConfig::from_pairs(&pairs)
}

/// 2 for configuration problems, 3 for files, 4 for numeric failures.
pub fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::InvalidArgument(_) | Error::ModelConfig(_) | Error::OutOfRange(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::NonFinite(_) | Error::Shape(_) | Error::Budget(_) | Error::EmptyPool => 4,
        Error::OuterIteration { .. } => 4,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::ExportPpm { input, output } => {
            let spec = PerturbationSpec::load(input)?;
            export_ppm(&spec, output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::MatrixDemo { game, iters } => matrix_demo(game, *iters),
        command => {
            let cfg = resolve_config(&cli.global, std::env::var_os(OUT_DIR_ENV))?;
            cfg.echo()?;
            match command {
                Command::TrainSgd => train(&cfg, Trainer::Sgd),
                Command::TrainAt => train(&cfg, Trainer::At),
                Command::TrainFp => train(&cfg, Trainer::Fp),
                Command::Attack {
                    checkpoint,
                    kind,
                    target_class,
                    lambda,
                    output,
                } => attack(&cfg, checkpoint.as_deref(), kind.as_deref(), *target_class, *lambda, output.as_deref()),
                Command::Eval { kind } => eval(&cfg, kind.as_deref()),
                Command::ExportPpm { .. } | Command::MatrixDemo { .. } => unreachable!(),
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Trainer {
    Sgd,
    At,
    Fp,
}

/// Training-log CSV; `seconds` stays zero unless `record_time` is set.
pub fn train_log_csv(report: &TrainReport, record_time: bool) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in &report.rows {
        let secs = if record_time { r.seconds } else { 0.0 };
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:e},{},{:.6}",
            r.iteration, r.loss, r.batch_accuracy, r.lr, r.pool_size, secs
        );
    }
    out
}

fn train(cfg: &ExperimentConfig, trainer: Trainer) -> Result<()> {
    let splits = cfg.load_splits()?;
    let model = cfg.model_config()?;
    let report = match trainer {
        Trainer::Sgd => sgd_train(&splits.train, &model, &cfg.train_config())?.1,
        Trainer::At => at_train(&splits.train, &model, &cfg.train_config(), &cfg.pgd())?.1,
        Trainer::Fp => {
            let out = fp_train(&splits.train, &model, &cfg.fp_config())?;
            let dir = cfg.out_dir.join("perturbations");
            std::fs::create_dir_all(&dir)?;
            for (i, xi) in out.perturbations.iter().enumerate() {
                xi.save(dir.join(format!("xi_{:04}.pert", i + 1)))?;
            }
            out.report
        }
    };
    std::fs::write(cfg.out_dir.join("train_log.csv"), train_log_csv(&report, cfg.record_time))?;
    if let Some(last) = report.rows.last() {
        println!(
            "trained {} outer iterations, last loss {:.4}, batch accuracy {:.4}",
            last.iteration, last.loss, last.batch_accuracy
        );
    }
    Ok(())
}

fn last_checkpoint(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.checkpoint_dir();
    let found = list_checkpoints(&dir)?;
    found
        .into_iter()
        .last()
        .map(|c| c.1)
        .ok_or_else(|| Error::invalid(format!("no checkpoints in {}", dir.display())))
}

fn attack(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    kind: Option<&str>,
    target_class: Option<usize>,
    lambda: Option<f64>,
    output: Option<&Path>,
) -> Result<()> {
    let kind = match kind {
        Some(k) => k.parse()?,
        None => cfg.attack,
    };
    let mut cfg = cfg.clone();
    if target_class.is_some() {
        cfg.target_class = target_class;
    }
    if let Some(l) = lambda {
        cfg.patch_lambda = l;
    }
    cfg.validate()?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => last_checkpoint(&cfg)?,
    };
    let params: Params = load_checkpoint(&path)?;
    let splits = cfg.load_splits()?;
    let test = splits.get(Split::Test);
    let size = cfg.eval_samples.unwrap_or_else(|| default_sample_size(test.len()));
    let attack = cfg.eval_attack(kind);
    let clean = accuracy(&params, test, size, &mut stream(cfg.seed, STREAM_CLI_ATTACK))?;
    let (adv, spec) = adv_accuracy(&params, &splits.train, test, &attack, size, &mut stream(cfg.seed, STREAM_CLI_ATTACK))?;
    let out = output.map_or_else(|| cfg.out_dir.join(format!("attack_{kind}.pert")), Path::to_path_buf);
    spec.save(&out)?;
    print!("clean_acc={clean:.4} adv_acc={adv:.4}");
    if let Some(t) = cfg.target_class {
        let rate = target_rate(&params, test, &spec, t, size, &mut stream(cfg.seed, STREAM_CLI_ATTACK + 1))?;
        print!(" target_class={t} target_rate={rate:.4}");
    }
    println!(" saved={}", out.display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, kind: Option<&str>) -> Result<()> {
    let kind = match kind {
        Some(k) => k.parse()?,
        None => cfg.attack,
    };
    let splits = cfg.load_splits()?;
    let options = EvalOptions {
        seed: cfg.seed,
        sample_size: cfg.eval_samples,
        record_time: cfg.record_time,
    };
    let rows = evaluate_checkpoint_series(&cfg.checkpoint_dir(), &splits, &cfg.eval_attack(kind), &options)?;
    let path = cfg.out_dir.join("metrics.csv");
    write_metrics_csv(&path, &rows)?;
    for r in rows.iter().filter(|r| r.split == Split::Test) {
        println!("iter {} test clean {:.4} adv {:.4}", r.iteration, r.clean_accuracy, r.adv_accuracy);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn matrix_demo(game: &str, iters: usize) -> Result<()> {
    let g = MatrixGame::named(game)?;
    let r = fp_matrix_game(&g, iters)?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    println!("row_strategy {}", fmt(&r.row_strategy));
    println!("col_strategy {}", fmt(&r.col_strategy));
    println!("value {:.4}", g.value(&r.row_strategy, &r.col_strategy));
    println!("exploitability {:.4}", r.exploitability.last().copied().unwrap_or(0.0));
    Ok(())
}
