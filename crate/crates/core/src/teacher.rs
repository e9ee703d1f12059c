//! Supervised fine-tuning of the teacher and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batch, DatasetSplit, Example};
use crate::error::{ensure, Result};
use crate::exec;
use crate::functional::Targets;
use crate::graph::Graph;
use crate::model::{MiniLm, ModelOptimizer};
use crate::optim::LrSchedule;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup: f64,
    pub seed: u64,
}

impl FinetuneConfig {
    /// 4 epochs, lr 1e-3, batch 32, warmup 0.1.
    pub fn desk() -> Self {
        Self { epochs: 4, lr: 1e-3, batch: 32, warmup: 0.1, seed: 0 }
    }

    /// 4 epochs, lr 2e-5, batch 32, warmup 0.1.
    pub fn full_scale() -> Self {
        Self { lr: 2e-5, ..Self::desk() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub valid_acc: Vec<f64>,
    /// 1-based epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_valid_acc: Option<f64>,
}

/// Cross-entropy fine-tuning with warmup-linear decay. The model is left at
/// the epoch with the best validation accuracy (earliest on ties).
pub fn finetune_teacher<F: Real>(
    teacher: &mut MiniLm<F>,
    train: &DatasetSplit,
    valid: &DatasetSplit,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    ensure!(!train.is_empty() && !valid.is_empty(), InvalidArgument, "fine-tuning needs non-empty train and valid splits");
    ensure!(cfg.batch >= 1, Config, "batch must be >= 1");
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let sched = LrSchedule::warmup_linear(cfg.lr, cfg.warmup, steps_per_epoch * cfg.epochs);
    sched.validate()?;
    let mut opt = ModelOptimizer::new(teacher);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let max_len = teacher.config().max_len;
    let mut report = FinetuneReport { train_loss: vec![], valid_acc: vec![], best_epoch: None, best_valid_acc: None };
    let mut best: Option<MiniLm<F>> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let labels = examples.iter().map(|e| e.label).collect();
            let (tokens, mask) = make_batch(&examples, max_len)?;
            let mut g = Graph::new();
            let bound = teacher.bind(&mut g, true, true);
            let e = bound.embed(&mut g, &tokens, teacher.config().vocab_size)?;
            let out = bound.forward_embeddings(&mut g, e, &mask)?;
            let loss = g.cross_entropy(out.logits, Targets::Hard(labels))?;
            loss_sum += g.scalar(loss).to_f64().unwrap_or(f64::NAN);
            g.backward(loss)?;
            teacher.absorb_grads(&g, &bound)?;
            opt.step(teacher, F::lit(sched.lr(step)))?;
            step += 1;
        }
        report.train_loss.push(loss_sum / steps_per_epoch as f64);
        let acc = evaluate_accuracy(teacher, valid)?;
        report.valid_acc.push(acc);
        if report.best_valid_acc.map_or(true, |b| acc > b) {
            report.best_valid_acc = Some(acc);
            report.best_epoch = Some(epoch);
            best = Some(teacher.clone());
        }
    }
    if let Some(b) = best {
        *teacher = b;
    }
    Ok(report)
}

const EVAL_BATCH: usize = 64;

/// Argmax class per example, in split order.
pub fn predict<F: Real>(model: &MiniLm<F>, examples: &[Example]) -> Result<Vec<usize>> {
    let chunks: Vec<&[Example]> = examples.chunks(EVAL_BATCH).collect();
    let max_len = model.config().max_len;
    let per_chunk = exec::map_indexed(chunks.len(), |i| -> Result<Vec<usize>> {
        let refs: Vec<&Example> = chunks[i].iter().collect();
        let (tokens, _) = make_batch(&refs, max_len)?;
        let logits = model.forward(&tokens)?;
        let c = model.config().num_classes;
        Ok(logits.values().chunks(c).map(argmax).collect())
    });
    let mut out = Vec::with_capacity(examples.len());
    for p in per_chunk {
        out.extend(p?);
    }
    Ok(out)
}

pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn evaluate_accuracy<F: Real>(model: &MiniLm<F>, split: &DatasetSplit) -> Result<f64> {
    ensure!(!split.is_empty(), InvalidArgument, "cannot evaluate on an empty split");
    let preds = predict(model, &split.examples)?;
    Ok(accuracy(&preds, &split.labels()))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}
