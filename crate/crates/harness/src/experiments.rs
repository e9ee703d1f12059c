//! Teacher training, single distillation runs and the scripted tables
//! (ablation, σ sweep, initialization comparison).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use asdfd_core::corpus::{DatasetSplit, SplitName, Vocab};
use asdfd_core::distill::{self, DistillOutcome, LossRecord, Method, Monitor};
use asdfd_core::forge::ForgeConfig;
use asdfd_core::model::{init_student, MiniLm};
use asdfd_core::teacher::{evaluate_accuracy, finetune_teacher, FinetuneReport};
use asdfd_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit;
use crate::checkpoint::{Checkpoint, Meta, Role};
use crate::config::{Precision, RunConfig};
use crate::data;
use crate::metrics::MetricsWriter;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const BASE_CKPT: &str = "base.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Runs `$body` with `$f` bound to the configured float type.
macro_rules! with_precision {
    ($p:expr, $f:ident => $body:expr) => {
        match $p {
            Precision::F32 => {
                type $f = f32;
                $body
            }
            Precision::F64 => {
                type $f = f64;
                $body
            }
        }
    };
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    audit::write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub test_acc: f64,
    pub vocab_size: usize,
    pub finetune: FinetuneReport,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize)]
struct FinetuneLine<'a> {
    epoch: usize,
    train_loss: f64,
    valid_acc: f64,
    seed: u64,
    config_hash: &'a str,
}

/// Builds the corpus and vocabulary, fine-tunes the teacher and writes the
/// splits, `vocab.tsv`, `teacher.ckpt`, `base.ckpt` (the weights before
/// fine-tuning, which students start from) and the fine-tuning metrics.
pub fn train_teacher(cfg: &RunConfig, out: &Path) -> anyhow::Result<TeacherSummary> {
    cfg.validate()?;
    let corpus = data::load_corpus(cfg)?;
    let vocab = corpus.build_vocab(cfg.vocab_cap)?;
    data::write_corpus(out, &corpus)?;
    data::write_vocab(&out.join(data::VOCAB_FILE), &vocab)?;
    let [train, valid, test] = corpus.encode(&vocab);
    let mc = cfg.teacher.model_config(vocab.len(), data::num_classes(cfg));
    let hash = cfg.hash();
    let meta = |role, epoch, acc| Meta {
        role,
        seed: cfg.seed,
        epoch,
        config_hash: hash.clone(),
        method: None,
        acc,
        config: cfg.to_value(),
    };

    let (report, test_acc) = with_precision!(cfg.precision, F => {
        let mut teacher = MiniLm::<F>::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Checkpoint::new(&teacher, None, meta(Role::Base, 0, None)).save(&out.join(BASE_CKPT))?;
        let report = finetune_teacher(&mut teacher, &train, &valid, &cfg.finetune)?;
        let saved = Checkpoint::new(&teacher, None, meta(Role::Teacher, 0, None));
        let test_acc = evaluate_accuracy(&saved.model_as::<F>(), &test)?;
        Checkpoint { meta: meta(Role::Teacher, report.best_epoch.unwrap_or(0), Some(test_acc)), ..saved }
            .save(&out.join(TEACHER_CKPT))?;
        (report, test_acc)
    });

    let mut lines = String::new();
    for (i, (loss, acc)) in report.train_loss.iter().zip(&report.valid_acc).enumerate() {
        let line = FinetuneLine { epoch: i + 1, train_loss: *loss, valid_acc: *acc, seed: cfg.seed, config_hash: &hash };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    audit::write(&out.join("teacher_metrics.jsonl"), lines.as_bytes())?;
    let summary = TeacherSummary { test_acc, vocab_size: vocab.len(), finetune: report, seed: cfg.seed, config_hash: hash };
    write_json(&out.join("teacher_report.json"), &summary)?;
    Ok(summary)
}

/// The frozen teacher and the weights students are initialized from.
#[derive(Clone, Debug)]
pub struct Session {
    pub teacher: Checkpoint,
    pub base: Checkpoint,
    /// Needed only by the random-text baseline.
    pub vocab: Option<Vocab>,
    /// Evaluation split; absent for data-free command-line runs.
    pub test: Option<DatasetSplit>,
}

impl Session {
    /// Loads `teacher.ckpt`, and `base.ckpt` from the same directory.
    pub fn open(teacher_path: &Path) -> anyhow::Result<Self> {
        let teacher = Checkpoint::load(teacher_path).with_context(|| format!("loading {}", teacher_path.display()))?;
        let base_path = sibling(teacher_path, BASE_CKPT);
        let base = Checkpoint::load(&base_path).with_context(|| format!("loading {}", base_path.display()))?;
        Ok(Self { teacher, base, vocab: None, test: None })
    }

    pub fn with_vocab(mut self, path: &Path) -> anyhow::Result<Self> {
        let vocab = data::read_vocab(path)?;
        if vocab.len() > self.teacher.model.config().vocab_size {
            bail!("vocabulary has {} entries but the teacher embeds {}", vocab.len(), self.teacher.model.config().vocab_size);
        }
        self.vocab = Some(vocab);
        Ok(self)
    }

    /// Attaches the test split written by `teacher-train` into `dir`.
    pub fn with_test_split(mut self, dir: &Path) -> anyhow::Result<Self> {
        let vocab = match &self.vocab {
            Some(v) => v.clone(),
            None => data::read_vocab(&dir.join(data::VOCAB_FILE))?,
        };
        let classes = self.teacher.model.config().num_classes;
        self.test = Some(data::load_split(dir, SplitName::Test, &vocab, classes)?);
        self.vocab = Some(vocab);
        Ok(self)
    }

    /// Runs one distillation as configured. With `out`, writes the metrics
    /// stream, the student checkpoint and the resolved config there.
    pub fn run(&self, cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<RunResult> {
        cfg.validate()?;
        with_precision!(cfg.precision, F => self.run_as::<F>(cfg, out))
    }

    fn run_as<F: Real>(&self, cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<RunResult> {
        let teacher = self.teacher.model_as::<F>();
        let base = self.base.model_as::<F>();
        let student = init_student(&teacher, &base, &cfg.student_layers)?;
        let hash = cfg.hash();
        let writer = match out {
            Some(dir) => Some(MetricsWriter::create(&dir.join(METRICS_FILE), cfg.seed, &hash)?),
            None => None,
        };
        let mut monitor = Recorder { test: self.test.as_ref(), every: cfg.eval_every, epochs: cfg.distill.epochs, writer };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (forge, dc) = (&cfg.forge, &cfg.distill);
        let outcome: DistillOutcome<F> = match dc.method {
            Method::Asdfd => distill::run_asdfd(&teacher, student, forge, dc, &mut rng, &mut monitor)?,
            Method::RandomText => {
                let vocab = self.vocab.as_ref().context("the random_text method needs a vocabulary")?;
                distill::run_random_text(&teacher, student, forge, dc, vocab.len(), &mut rng, &mut monitor)?
            }
            Method::Zskd => distill::run_zskd(&teacher, student, forge, &cfg.dirichlet, dc, &mut rng, &mut monitor)?,
            Method::RandomNoise => distill::run_random_noise(&teacher, student, forge, dc, &mut rng, &mut monitor)?,
        };

        let keep_predictor = dc.method == Method::Asdfd && forge.n_s > 0;
        let mut ckpt = Checkpoint::new(
            &outcome.student,
            keep_predictor.then_some(&outcome.predictor),
            Meta {
                role: Role::Student,
                seed: cfg.seed,
                epoch: dc.epochs,
                config_hash: hash.clone(),
                method: Some(dc.method.name().to_string()),
                acc: None,
                config: cfg.to_value(),
            },
        );
        // Scored through the stored f32 weights so `eval` reproduces it.
        let acc = match &self.test {
            Some(test) => Some(evaluate_accuracy(&ckpt.model_as::<F>(), test)?),
            None => None,
        };
        ckpt.meta.acc = acc;
        if let Some(dir) = out {
            ckpt.save(&dir.join(STUDENT_CKPT))?;
            write_json(&dir.join("config.json"), &cfg.to_value())?;
        }
        Ok(RunResult::new(cfg, acc, &outcome.records))
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

struct Recorder<'a> {
    test: Option<&'a DatasetSplit>,
    every: usize,
    epochs: usize,
    writer: Option<MetricsWriter>,
}

impl<F: Real> Monitor<F> for Recorder<'_> {
    fn evaluate(&mut self, epoch: usize, student: &MiniLm<F>) -> asdfd_core::Result<Option<f64>> {
        let due = epoch == self.epochs || (self.every > 0 && epoch % self.every == 0);
        match self.test {
            Some(test) if due => evaluate_accuracy(student, test).map(Some),
            _ => Ok(None),
        }
    }

    fn record(&mut self, record: &LossRecord) -> asdfd_core::Result<()> {
        if let Some(w) = &mut self.writer {
            w.write(record)?;
        }
        Ok(())
    }
}

/// Summary of one distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    /// Test accuracy of the saved student, when a test split was attached.
    pub acc: Option<f64>,
    /// Mean end-of-construction L_MASK over all epochs.
    pub mean_l_mask: Option<f64>,
    pub mean_l_input: Option<f64>,
    pub last: Option<LossRecord>,
    /// `(epoch, acc)` for every evaluated epoch.
    pub curve: Vec<(usize, f64)>,
}

impl RunResult {
    fn new(cfg: &RunConfig, acc: Option<f64>, records: &[LossRecord]) -> Self {
        let mean = |f: fn(&LossRecord) -> Option<f64>| {
            let v: Vec<f64> = records.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            method: cfg.distill.method,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            acc,
            mean_l_mask: mean(|r| r.l_mask),
            mean_l_input: mean(|r| r.l_input),
            last: records.last().cloned(),
            curve: records.iter().filter_map(|r| r.acc.map(|a| (r.epoch, a))).collect(),
        }
    }
}

/// One named configuration in a scripted table.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
    /// Full-scale figure for the same row.
    pub reference: Option<f64>,
}

/// The six ablation rows, in order.
pub fn ablation_arms(base: &RunConfig) -> Vec<Arm> {
    let tuned = base.forge.clone();
    let raw = ForgeConfig { cls_sep: false, variable_length: false, sigma: 1.0, n_s: 0, ..tuned.clone() };
    let rows: [(&str, Method, ForgeConfig, f64); 6] = [
        ("random_noise", Method::RandomNoise, raw.clone(), 25.1),
        ("+embedding_guessing", Method::Asdfd, raw.clone(), 44.2),
        ("+cls_sep", Method::Asdfd, ForgeConfig { cls_sep: true, ..raw.clone() }, 80.3),
        ("+variable_length", Method::Asdfd, ForgeConfig { cls_sep: true, variable_length: true, ..raw }, 82.2),
        ("+sigma_tuned", Method::Asdfd, ForgeConfig { n_s: 0, ..tuned.clone() }, 87.4),
        ("+adversarial", Method::Asdfd, tuned, 88.2),
    ];
    rows.into_iter()
        .map(|(name, method, forge, reference)| {
            let mut config = base.clone();
            config.forge = forge;
            config.distill.method = method;
            Arm { name: name.to_string(), config, reference: Some(reference) }
        })
        .collect()
}

pub const SIGMA_GRID: [f64; 9] = [0.05, 0.1, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 1.0];

fn reference_sigma(sigma: f64) -> Option<f64> {
    [(0.05, 83.2), (0.2, 85.3), (0.35, 88.2), (1.0, 83.2)].iter().find(|(s, _)| (s - sigma).abs() < 1e-12).map(|&(_, a)| a)
}

/// Full AS-DFD per σ, everything else (seed included) held fixed.
pub fn sigma_arms(base: &RunConfig, grid: &[f64]) -> Vec<Arm> {
    grid.iter()
        .map(|&sigma| {
            let mut config = base.clone();
            config.distill.method = Method::Asdfd;
            config.forge.sigma = sigma;
            Arm { name: format!("sigma={sigma}"), config, reference: reference_sigma(sigma) }
        })
        .collect()
}

/// AS-DFD and Modified-ZSKD for each student layer choice.
pub fn init_compare_arms(base: &RunConfig, layer_sets: &[Vec<usize>]) -> Vec<Arm> {
    let mut arms = Vec::new();
    for layers in layer_sets {
        for method in [Method::Asdfd, Method::Zskd] {
            let mut config = base.clone();
            config.student_layers = layers.clone();
            config.distill.method = method;
            let tag: Vec<String> = layers.iter().map(usize::to_string).collect();
            arms.push(Arm { name: format!("{}@{}", method.name(), tag.join("-")), config, reference: None });
        }
    }
    arms
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub acc: Option<f64>,
    pub reference: Option<f64>,
    pub result: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# {} seed={} config_hash={}\nname\tacc\tpaper\n", self.kind, self.seed, self.config_hash);
        for r in &self.rows {
            let acc = r.acc.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_else(|| "-".into());
            let reference = r.reference.map(|p| format!("{p:.1}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{}\t{acc}\t{reference}\n", r.name));
        }
        s
    }
}

/// Runs every arm (each into `out/<n>_<name>/`) and writes `report.json`
/// and `report.tsv`.
pub fn run_table(session: &Session, kind: &str, base: &RunConfig, arms: &[Arm], out: &Path) -> anyhow::Result<Report> {
    let mut rows = Vec::new();
    for (i, arm) in arms.iter().enumerate() {
        let dir = out.join(format!("{}_{}", i + 1, arm.name.replace(['+', '='], "")));
        let result = session.run(&arm.config, Some(&dir))?;
        rows.push(ReportRow { name: arm.name.clone(), acc: result.acc, reference: arm.reference, result });
    }
    let report = Report { kind: kind.to_string(), seed: base.seed, config_hash: base.hash(), rows };
    write_json(&out.join("report.json"), &report)?;
    audit::write(&out.join("report.tsv"), report.to_tsv().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_follow_table_order() {
        let arms = ablation_arms(&RunConfig::default());
        let names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["random_noise", "+embedding_guessing", "+cls_sep", "+variable_length", "+sigma_tuned", "+adversarial"]);
        assert_eq!(arms[0].config.distill.method, Method::RandomNoise);
        assert!(!arms[1].config.forge.cls_sep && arms[2].config.forge.cls_sep && !arms[2].config.forge.variable_length);
        assert_eq!(arms[3].config.forge.sigma, 1.0);
        assert_eq!(arms[4].config.forge.n_s, 0);
        assert_eq!(arms[5].config.forge, RunConfig::default().forge);
        for a in &arms {
            a.config.validate().unwrap();
        }
    }

    #[test]
    fn sigma_arms_hold_seed() {
        let base = RunConfig { seed: 42, ..RunConfig::default() };
        let arms = sigma_arms(&base, &[0.35]);
        assert_eq!(arms.len(), 1);
        assert_eq!(arms[0].reference, Some(88.2));
        assert!(sigma_arms(&base, &SIGMA_GRID).iter().all(|a| a.config.seed == 42));
    }
}
