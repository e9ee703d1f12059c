//! Run configuration: one JSON document, dotted-path overrides, a stable hash.

use std::path::{Path, PathBuf};

use asdfd_core::corpus::SyntheticSpec;
use asdfd_core::distill::{DirichletTargetSpec, DistillConfig};
use asdfd_core::forge::ForgeConfig;
use asdfd_core::model::ModelConfig;
use asdfd_core::teacher::FinetuneConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::ConfigError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Teacher shape; vocabulary size and class count come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherArch {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for TeacherArch {
    fn default() -> Self {
        let m = ModelConfig::desk_teacher(0, 0);
        Self { num_layers: m.num_layers, hidden_dim: m.hidden_dim, num_heads: m.num_heads, ff_dim: m.ff_dim, max_len: m.max_len }
    }
}

impl TeacherArch {
    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            vocab_size,
            max_len: self.max_len,
            num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub num_classes: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        let s = SyntheticSpec::desk(4, 0);
        Self {
            num_classes: s.num_classes,
            train: s.train,
            valid: s.valid,
            test: s.test,
            min_words: s.min_words,
            max_words: s.max_words,
            distractor_prob: s.distractor_prob,
            seed: 0,
        }
    }
}

impl SyntheticSource {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            train: self.train,
            valid: self.valid,
            test: self.test,
            min_words: self.min_words,
            max_words: self.max_words,
            distractor_prob: self.distractor_prob,
            ..SyntheticSpec::desk(self.num_classes, self.seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub test: PathBuf,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub corpus: CorpusSource,
    pub vocab_cap: usize,
    pub teacher: TeacherArch,
    pub finetune: FinetuneConfig,
    /// 1-based teacher layers copied into the student.
    pub student_layers: Vec<usize>,
    pub forge: ForgeConfig,
    pub distill: DistillConfig,
    pub dirichlet: DirichletTargetSpec,
    /// Evaluate every this many epochs in experiment commands (0: final only).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            corpus: CorpusSource::Synthetic(SyntheticSource::default()),
            vocab_cap: 1000,
            teacher: TeacherArch::default(),
            finetune: FinetuneConfig::desk(),
            student_layers: vec![1, 4],
            forge: ForgeConfig::default(),
            distill: DistillConfig::default(),
            dirichlet: DirichletTargetSpec::default(),
            eval_every: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = crate::audit::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        serde_json::from_value(value).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `(dotted.path, raw value)` pairs. Dashes in keys read as
    /// underscores; values parse as JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut v = self.to_value();
        for (path, raw) in overrides {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut v, path, parsed)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |e: asdfd_core::Error| ConfigError(e.to_string());
        let classes = match &self.corpus {
            CorpusSource::Synthetic(s) => {
                s.spec().validate().map_err(err)?;
                s.num_classes
            }
            CorpusSource::Csv(c) => c.num_classes,
        };
        if classes < 2 {
            return Err(ConfigError("distillation needs at least two classes".into()));
        }
        if self.vocab_cap <= asdfd_core::model::NUM_RESERVED {
            return Err(ConfigError("vocab_cap must exceed the reserved ids".into()));
        }
        let mc = self.teacher.model_config(self.vocab_cap, classes);
        mc.validate().map_err(err)?;
        if self.student_layers.is_empty() || self.student_layers.iter().any(|&i| i == 0 || i > mc.num_layers) {
            return Err(ConfigError(format!("student_layers must be 1-based indices into {} teacher layers", mc.num_layers)));
        }
        self.forge.validate(mc.max_len).map_err(err)?;
        self.distill.validate().map_err(err)?;
        self.dirichlet.validate().map_err(err)?;
        if self.finetune.batch == 0 {
            return Err(ConfigError("finetune.batch must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 (first 16 chars) of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_value()).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let keys: Vec<String> = path.split('.').map(|k| k.replace('-', "_")).collect();
    if keys.iter().any(String::is_empty) {
        return Err(ConfigError(format!("malformed override path {path:?}")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError(format!("override {path:?}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(key) {
                return Err(ConfigError(format!("unknown config key {path:?}")));
            }
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.get_mut(key).ok_or_else(|| ConfigError(format!("unknown config key {path:?}")))?;
    }
    Ok(())
}

/// Splits `--a.b value` / `--a.b=value` pairs out of an argument list.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), ConfigError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a.clone());
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| ConfigError(format!("override --{flag} needs a value")))?;
                overrides.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), RunConfig::default().hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::default();
        let o = c
            .with_overrides(&[("forge.sigma".into(), "0.2".into()), ("forge.n-s".into(), "0".into())])
            .unwrap();
        assert_eq!(o.forge.sigma, 0.2);
        assert_eq!(o.forge.n_s, 0);
        assert_ne!(o.hash(), c.hash());
        assert!(c.with_overrides(&[("forge.nope".into(), "1".into())]).is_err());
        assert!(c.with_overrides(&[("forge.sigma".into(), "\"x\"".into())]).is_err());
        let m = c.with_overrides(&[("distill.method".into(), "zskd".into())]).unwrap();
        assert_eq!(m.distill.method, asdfd_core::distill::Method::Zskd);
    }

    #[test]
    fn override_splitting() {
        let args: Vec<String> = ["distill", "--forge.sigma", "0.2", "--method", "asdfd", "--distill.epochs=5"].map(String::from).to_vec();
        let (rest, ov) = split_overrides(&args).unwrap();
        assert_eq!(rest, vec!["distill", "--method", "asdfd"]);
        assert_eq!(ov, vec![("forge.sigma".into(), "0.2".into()), ("distill.epochs".into(), "5".into())]);
        assert!(split_overrides(&["--forge.sigma".to_string()]).is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let c = RunConfig { student_layers: vec![0], ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig::default().with_overrides(&[("forge.sigma".into(), "0".into())]).unwrap();
        assert!(c.validate().is_err());
    }
}
