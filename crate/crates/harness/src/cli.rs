//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use asdfd_core::corpus::SplitName;
use asdfd_core::distill::Method;
use asdfd_core::teacher::evaluate_accuracy;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{split_overrides, Precision, RunConfig};
use crate::experiments::{self, Session, TEACHER_CKPT};
use crate::{audit, data, export, ConfigError};

/// Adversarial self-supervised data-free distillation for small BERT-style classifiers.
///
/// Any config field can be overridden with a dotted flag, e.g.
/// `--forge.sigma 0.2` or `--distill.epochs=50`.
#[derive(Debug, Parser)]
#[command(name = "asdfd", version)]
pub struct Cli {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the corpus and vocabulary and fine-tune the teacher.
    TeacherTrain,
    /// Distill a student from a teacher checkpoint without any dataset.
    Distill(DistillArgs),
    /// Accuracy of a checkpoint on a stored split.
    Eval(EvalArgs),
    /// The six-row ablation table.
    Ablate(TeacherArg),
    /// Accuracy across Gaussian initialization scales.
    SigmaSweep(SigmaArgs),
    /// AS-DFD vs Modified-ZSKD under different student layer choices.
    InitCompare(InitArgs),
    /// Write last-layer [CLS] vectors of real and pseudo samples as CSV.
    ExportHidden(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Asdfd,
    RandomText,
    Zskd,
    RandomNoise,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Asdfd => Method::Asdfd,
            MethodArg::RandomText => Method::RandomText,
            MethodArg::Zskd => Method::Zskd,
            MethodArg::RandomNoise => Method::RandomNoise,
        }
    }
}

#[derive(Debug, Args)]
pub struct TeacherArg {
    /// Teacher checkpoint; `base.ckpt`, `vocab.tsv` and `data/` are read from its directory.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Teacher checkpoint (`base.ckpt` is read from the same directory).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Vocabulary file, used by `random-text` only.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding `vocab.tsv` and `data/` (defaults to the checkpoint's teacher directory, `--out`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Reject a checkpoint whose config hash differs from the current config.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct SigmaArgs {
    #[command(flatten)]
    pub teacher: TeacherArg,
    /// Comma-separated standard deviations.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub teacher: TeacherArg,
    /// Student layer choices, `;`-separated lists of 1-based indices.
    #[arg(long, default_value = "1,4;2,3")]
    pub layers: String,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub teacher: TeacherArg,
    /// Model to read hidden states from (default: the teacher).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_real: usize,
    #[arg(long, default_value_t = 100)]
    pub n_synthetic: usize,
}

/// Parses `argv` (without the program name) and runs it; returns the exit status.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let (rest, overrides) = match split_overrides(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let argv = std::iter::once(OsString::from("asdfd")).chain(rest.into_iter().map(OsString::from));
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn teacher_path(cli: &Cli, arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().unwrap_or_else(|| cli.out.join(TEACHER_CKPT))
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn print_json<T: Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: &Cli, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let mut cfg = resolve_config(cli, overrides)?;
    let out = &cli.out;
    match &cli.command {
        Command::TeacherTrain => {
            let s = experiments::train_teacher(&cfg, out)?;
            eprintln!("teacher test accuracy {:.4}", s.test_acc);
            print_json(&s)
        }
        Command::Distill(a) => {
            if let Some(m) = a.method {
                cfg.distill.method = m.into();
            }
            cfg.validate()?;
            let tp = teacher_path(cli, &a.teacher);
            let mut session = Session::open(&tp)?;
            if cfg.distill.method == Method::RandomText {
                let vp = a.vocab.clone().unwrap_or_else(|| dir_of(&tp).join(data::VOCAB_FILE));
                session = session.with_vocab(&vp)?;
            }
            let r = session.run(&cfg, Some(out))?;
            print_json(&r)
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
            if a.strict {
                ckpt.check_hash(&cfg.hash()).map_err(|e| ConfigError(e.to_string()))?;
            }
            let dir = a.data.clone().unwrap_or_else(|| out.clone());
            let vocab = data::read_vocab(&dir.join(data::VOCAB_FILE))?;
            let split = match a.split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Valid => SplitName::Valid,
                SplitArg::Test => SplitName::Test,
            };
            let ds = data::load_split(&dir, split, &vocab, ckpt.model.config().num_classes)?;
            let precision = RunConfig::from_value(ckpt.meta.config.clone()).map(|c| c.precision).unwrap_or(Precision::F32);
            let acc = match precision {
                Precision::F32 => evaluate_accuracy(&ckpt.model_as::<f32>(), &ds)?,
                Precision::F64 => evaluate_accuracy(&ckpt.model_as::<f64>(), &ds)?,
            };
            print_json(&serde_json::json!({
                "acc": acc,
                "saved_acc": ckpt.meta.acc,
                "seed": ckpt.meta.seed,
                "config_hash": ckpt.meta.config_hash,
            }))
        }
        Command::Ablate(t) => {
            let session = open_with_data(cli, t)?;
            let arms = experiments::ablation_arms(&cfg);
            let report = experiments::run_table(&session, "ablation", &cfg, &arms, out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::SigmaSweep(a) => {
            let session = open_with_data(cli, &a.teacher)?;
            let grid = a.sigmas.clone().unwrap_or_else(|| experiments::SIGMA_GRID.to_vec());
            let arms = experiments::sigma_arms(&cfg, &grid);
            for arm in &arms {
                arm.config.validate()?;
            }
            let report = experiments::run_table(&session, "sigma-sweep", &cfg, &arms, out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::InitCompare(a) => {
            let session = open_with_data(cli, &a.teacher)?;
            let sets = parse_layer_sets(&a.layers)?;
            if cfg.eval_every == 0 {
                cfg.eval_every = (cfg.distill.epochs / 10).max(1);
            }
            let arms = experiments::init_compare_arms(&cfg, &sets);
            for arm in &arms {
                arm.config.validate()?;
            }
            let report = experiments::run_table(&session, "init-compare", &cfg, &arms, out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::ExportHidden(a) => {
            let session = open_with_data(cli, &a.teacher)?;
            let ckpt = match &a.checkpoint {
                Some(p) => Checkpoint::load(p)?,
                None => session.teacher.clone(),
            };
            let path = out.join("hidden.csv");
            with_model(&cfg, &ckpt, &session, a, &path)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn with_model(cfg: &RunConfig, ckpt: &Checkpoint, session: &Session, a: &ExportArgs, path: &Path) -> anyhow::Result<()> {
    fn go<F: asdfd_core::Real>(cfg: &RunConfig, ckpt: &Checkpoint, session: &Session, a: &ExportArgs, path: &Path) -> anyhow::Result<()> {
        let model = ckpt.model_as::<F>();
        let test = session.test.as_ref().context("no test split loaded")?;
        let mut rows = export::real_rows(&model, test, a.n_real)?;
        rows.extend(export::synthetic_rows(&model, session, cfg, a.n_synthetic)?);
        export::write_hidden_csv(path, model.config().hidden_dim, &rows)
    }
    match cfg.precision {
        Precision::F32 => go::<f32>(cfg, ckpt, session, a, path),
        Precision::F64 => go::<f64>(cfg, ckpt, session, a, path),
    }
}

fn open_with_data(cli: &Cli, t: &TeacherArg) -> anyhow::Result<Session> {
    let tp = teacher_path(cli, &t.teacher);
    Session::open(&tp)?.with_test_split(&dir_of(&tp))
}

fn parse_layer_sets(s: &str) -> Result<Vec<Vec<usize>>, ConfigError> {
    s.split(';')
        .map(|set| {
            set.split(',')
                .map(|i| i.trim().parse::<usize>().map_err(|_| ConfigError(format!("bad layer index {i:?} in {s:?}"))))
                .collect()
        })
        .collect()
}

/// Dumps the audit log as JSON when `ASDFD_AUDIT_LOG` names a file.
pub fn write_audit_log_from_env() {
    if let Some(path) = std::env::var_os("ASDFD_AUDIT_LOG") {
        let json = serde_json::to_string_pretty(&audit::accesses()).expect("accesses serialize");
        if let Err(e) = std::fs::write(&path, json) {
            eprintln!("could not write audit log {}: {e}", PathBuf::from(path).display());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_sets_parse() {
        assert_eq!(parse_layer_sets("1,4;2,3").unwrap(), vec![vec![1, 4], vec![2, 3]]);
        assert!(parse_layer_sets("1,x").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(vec!["bogus".into()]), 2);
        assert_eq!(main_with_args(vec!["distill".into(), "--nope".into()]), 2);
        assert_eq!(main_with_args(vec!["distill".into(), "--forge.nope".into(), "1".into()]), 2);
        assert_eq!(main_with_args(vec!["distill".into(), "--forge.sigma".into(), "-1".into()]), 2);
    }
}
