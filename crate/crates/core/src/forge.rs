//! Pseudo-embedding synthesis: Gaussian blocks aligned with the embedding
//! layer's output, pushed towards a target class by the frozen teacher and
//! made harder for the student by ascending its mask loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::functional::Targets;
use crate::graph::{Graph, Var};
use crate::model::{AttentionMask, Bound, EmbeddingTable, MiniLm, CLS, PAD, SEP};
use crate::optim::AdamState;
use crate::selfsup::{choose_mask_positions, mask_loss_graph, mask_rows, MaskPredictor};
use crate::teacher::argmax;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPolicy {
    Uniform,
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    pub mu: f64,
    pub sigma: f64,
    /// Embedding learning rate.
    pub eta: f64,
    pub n_iter: usize,
    pub n_t: usize,
    pub n_s: usize,
    pub l_min: usize,
    /// Longest sampled length; `None` means the model's `max_len`.
    pub l_max: Option<usize>,
    pub target_policy: TargetPolicy,
    /// Pin `[CLS]` at the start and `[SEP]` at the end of every sample.
    pub cls_sep: bool,
    /// Sample lengths in `[l_min, l_max]` and mask the tail; otherwise every
    /// sample spans `l_max`.
    pub variable_length: bool,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            sigma: 0.35,
            eta: 1e-2,
            n_iter: 5,
            n_t: 5,
            n_s: 1,
            l_min: 5,
            l_max: Some(16),
            target_policy: TargetPolicy::Balanced,
            cls_sep: true,
            variable_length: true,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        ensure!(self.sigma > 0.0 && self.sigma.is_finite(), Config, "sigma must be > 0, got {}", self.sigma);
        ensure!(self.mu.is_finite(), Config, "mu must be finite");
        ensure!(self.eta >= 0.0 && self.eta.is_finite(), Config, "eta must be finite and >= 0");
        ensure!(self.n_iter >= 1 && self.n_t >= 1, Config, "n_iter and n_t must be >= 1");
        let l_max = self.l_max(max_len);
        ensure!(
            3 <= self.l_min && self.l_min <= l_max && l_max <= max_len,
            Config,
            "need 3 <= l_min ({}) <= l_max ({l_max}) <= max_len ({max_len})",
            self.l_min
        );
        Ok(())
    }

    pub fn l_max(&self, max_len: usize) -> usize {
        self.l_max.unwrap_or(max_len)
    }
}

/// End-of-construction telemetry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgeStats {
    pub l_input_initial: f64,
    pub l_input: f64,
    /// L_MASK at fresh positions once construction finished.
    pub l_mask: f64,
    /// Mean L_MASK measured before each adversarial step.
    pub l_mask_adversarial: Option<f64>,
    /// Fraction of samples the teacher assigns to their target class.
    pub agreement: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBatch<F> {
    /// `[batch, seq, d]` with `seq` the longest sampled length.
    pub e: Tensor<F>,
    pub targets: Vec<usize>,
    /// Soft crafting targets `[batch, classes]`; replaces `targets` in the input loss.
    pub soft_targets: Option<Vec<F>>,
    pub lengths: Vec<usize>,
    /// Per position (`batch·seq`): excluded from every update.
    pub frozen: Vec<bool>,
    pub attention: AttentionMask,
    pub mask_positions: Option<Vec<usize>>,
    pub stats: ForgeStats,
}

impl<F: Real> PseudoBatch<F> {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq(&self) -> usize {
        self.attention.seq
    }

    pub fn width(&self) -> usize {
        self.e.shape()[2]
    }

    /// Checksum over the frozen rows only.
    pub fn frozen_checksum(&self) -> u64 {
        let d = self.width();
        let vals: Vec<F> = self
            .frozen
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .flat_map(|(r, _)| self.e.values()[r * d..(r + 1) * d].iter().copied())
            .collect();
        Tensor::new(&[vals.len()], vals).map(|t| t.checksum()).unwrap_or(0)
    }

    fn crafting_targets(&self) -> Targets<F> {
        match &self.soft_targets {
            Some(p) => Targets::Soft(p.clone()),
            None => Targets::Hard(self.targets.clone()),
        }
    }
}

pub fn sample_targets<R: Rng + ?Sized>(policy: TargetPolicy, batch: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    match policy {
        TargetPolicy::Uniform => (0..batch).map(|_| rng.gen_range(0..classes)).collect(),
        TargetPolicy::Balanced => {
            let offset = rng.gen_range(0..classes);
            (0..batch).map(|b| (b + offset) % classes).collect()
        }
    }
}

/// Samples lengths and targets and fills the whole block with N(μ, σ²).
pub fn init_batch<F: Real, R: Rng + ?Sized>(
    cfg: &ForgeConfig,
    teacher: &MiniLm<F>,
    batch: usize,
    rng: &mut R,
) -> Result<PseudoBatch<F>> {
    let mc = teacher.config();
    cfg.validate(mc.max_len)?;
    ensure!(batch >= 1, InvalidArgument, "batch must be >= 1");
    let l_max = cfg.l_max(mc.max_len);
    let lengths: Vec<usize> =
        (0..batch).map(|_| if cfg.variable_length { rng.gen_range(cfg.l_min..=l_max) } else { l_max }).collect();
    let targets = sample_targets(cfg.target_policy, batch, mc.num_classes, rng);
    let seq = *lengths.iter().max().expect("batch >= 1");
    let normal = Normal::new(cfg.mu, cfg.sigma).expect("validated sigma");
    let values = (0..batch * seq * mc.hidden_dim).map(|_| F::lit(normal.sample(rng))).collect();
    Ok(PseudoBatch {
        e: Tensor::new(&[batch, seq, mc.hidden_dim], values)?,
        targets,
        soft_targets: None,
        attention: AttentionMask::from_lengths(&lengths, seq)?,
        frozen: vec![false; batch * seq],
        lengths,
        mask_positions: None,
        stats: ForgeStats::default(),
    })
}

/// Pins `[CLS]`/`[SEP]` rows (when enabled) and the `[PAD]` tail, marking them frozen.
pub fn apply_alignment<F: Real>(cfg: &ForgeConfig, batch: &mut PseudoBatch<F>, table: &EmbeddingTable<F>) -> Result<()> {
    let (seq, d) = (batch.seq(), batch.width());
    for b in 0..batch.batch() {
        let len = batch.lengths[b];
        let mut pin = |pos: usize, token: usize| -> Result<()> {
            let r = b * seq + pos;
            batch.e.values_mut()[r * d..(r + 1) * d].copy_from_slice(&table.output_row(token, pos)?);
            batch.frozen[r] = true;
            Ok(())
        };
        if cfg.cls_sep {
            pin(0, CLS)?;
            pin(len - 1, SEP)?;
        }
        for pos in len..seq {
            pin(pos, PAD)?;
        }
    }
    Ok(())
}

fn block_var<F: Real>(g: &mut Graph<F>, batch: &PseudoBatch<F>, requires_grad: bool) -> Result<Var> {
    g.leaf(&[batch.batch() * batch.seq(), batch.width()], batch.e.values().to_vec(), requires_grad)
}

/// Teacher cross-entropy of the block against its crafting targets.
pub fn input_loss_graph<F: Real>(g: &mut Graph<F>, e: Var, batch: &PseudoBatch<F>, teacher: &Bound) -> Result<(Var, Var)> {
    let out = teacher.forward_embeddings(g, e, &batch.attention)?;
    Ok((g.cross_entropy(out.logits, batch.crafting_targets())?, out.logits))
}

pub fn input_loss<F: Real>(batch: &PseudoBatch<F>, teacher: &MiniLm<F>) -> Result<F> {
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false, false);
    let e = block_var(&mut g, batch, false)?;
    let (loss, _) = input_loss_graph(&mut g, e, batch, &bound)?;
    Ok(g.scalar(loss))
}

/// Fraction of samples whose teacher argmax equals the target class.
pub fn teacher_agreement<F: Real>(batch: &PseudoBatch<F>, teacher: &MiniLm<F>) -> Result<f64> {
    let out = teacher.forward_from_embeddings(&batch.e, &batch.attention)?;
    let c = teacher.config().num_classes;
    let hits = out.logits.values().chunks(c).zip(&batch.targets).filter(|(row, &t)| argmax(row) == t).count();
    Ok(hits as f64 / batch.batch() as f64)
}

fn masked_update<F: Real>(batch: &mut PseudoBatch<F>, mut grad: Vec<F>, negate: bool, state: &mut AdamState<F>, eta: f64) -> Result<()> {
    let d = batch.width();
    for (r, &frozen) in batch.frozen.iter().enumerate() {
        let row = &mut grad[r * d..(r + 1) * d];
        if frozen {
            row.iter_mut().for_each(|g| *g = F::zero());
        } else if negate {
            row.iter_mut().for_each(|g| *g = -*g);
        }
    }
    state.update(batch.e.values_mut(), &grad, F::lit(eta))
}

/// One Adam descent step on the free rows against L_INPUT; returns the pre-step loss.
pub fn guess_step<F: Real>(batch: &mut PseudoBatch<F>, teacher: &MiniLm<F>, eta: f64, state: &mut AdamState<F>) -> Result<F> {
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false, false);
    let e = block_var(&mut g, batch, true)?;
    let (loss, _) = input_loss_graph(&mut g, e, batch, &bound)?;
    g.backward(loss)?;
    let grad = g.grad(e).expect("block requires grad").to_vec();
    masked_update(batch, grad, false, state, eta)?;
    Ok(g.scalar(loss))
}

/// One Adam ascent step on the free rows against L_MASK at the batch's
/// current mask positions; returns the pre-step loss.
pub fn adversarial_step<F: Real>(
    batch: &mut PseudoBatch<F>,
    student: &MiniLm<F>,
    predictor: &MaskPredictor<F>,
    eta: f64,
    state: &mut AdamState<F>,
) -> Result<F> {
    let positions = batch
        .mask_positions
        .clone()
        .ok_or_else(|| crate::Error::Precondition("adversarial step needs mask positions".into()))?;
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false, false);
    let w = g.constant(&predictor.w);
    let e = block_var(&mut g, batch, true)?;
    let replacement = mask_rows(student.embeddings(), &positions)?;
    let loss = mask_loss_graph(&mut g, e, &positions, &replacement, &batch.attention, &bound, w)?;
    g.backward(loss)?;
    let grad = g.grad(e).expect("block requires grad").to_vec();
    masked_update(batch, grad, true, state, eta)?;
    Ok(g.scalar(loss))
}

/// L_MASK of the batch at its current mask positions.
pub fn batch_mask_loss<F: Real>(batch: &PseudoBatch<F>, student: &MiniLm<F>, predictor: &MaskPredictor<F>) -> Result<F> {
    let positions = batch
        .mask_positions
        .clone()
        .ok_or_else(|| crate::Error::Precondition("mask loss needs mask positions".into()))?;
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false, false);
    let w = g.constant(&predictor.w);
    let e = block_var(&mut g, batch, false)?;
    let replacement = mask_rows(student.embeddings(), &positions)?;
    let loss = mask_loss_graph(&mut g, e, &positions, &replacement, &batch.attention, &bound, w)?;
    Ok(g.scalar(loss))
}

/// Runs the guess/adversarial schedule on an initialized, aligned batch and
/// fills its telemetry. Leaves fresh mask positions on the batch.
pub fn refine<F: Real, R: Rng + ?Sized>(
    cfg: &ForgeConfig,
    batch: &mut PseudoBatch<F>,
    teacher: &MiniLm<F>,
    student: &MiniLm<F>,
    predictor: &MaskPredictor<F>,
    rng: &mut R,
) -> Result<()> {
    let mut guess_state = AdamState::for_tensor(&batch.e);
    let mut adv_state = AdamState::for_tensor(&batch.e);
    let mut first = None;
    let mut adv_losses = Vec::new();
    for _ in 0..cfg.n_iter {
        for _ in 0..cfg.n_t {
            let l = guess_step(batch, teacher, cfg.eta, &mut guess_state)?;
            first.get_or_insert(l);
        }
        if cfg.n_s > 0 {
            batch.mask_positions = Some(choose_mask_positions(&batch.lengths, rng)?);
            for _ in 0..cfg.n_s {
                adv_losses.push(adversarial_step(batch, student, predictor, cfg.eta, &mut adv_state)?);
            }
        }
    }
    batch.mask_positions = Some(choose_mask_positions(&batch.lengths, rng)?);
    let to64 = |x: F| x.to_f64().unwrap_or(f64::NAN);
    batch.stats = ForgeStats {
        l_input_initial: first.map(to64).unwrap_or(f64::NAN),
        l_input: to64(input_loss(batch, teacher)?),
        l_mask: to64(batch_mask_loss(batch, student, predictor)?),
        l_mask_adversarial: (!adv_losses.is_empty())
            .then(|| adv_losses.iter().map(|&l| to64(l)).sum::<f64>() / adv_losses.len() as f64),
        agreement: teacher_agreement(batch, teacher)?,
    };
    Ok(())
}

/// Initialize, align, then refine a fresh batch. Teacher, student and
/// predictor are only read.
pub fn construct<F: Real, R: Rng + ?Sized>(
    cfg: &ForgeConfig,
    teacher: &MiniLm<F>,
    student: &MiniLm<F>,
    predictor: &MaskPredictor<F>,
    batch_size: usize,
    rng: &mut R,
) -> Result<PseudoBatch<F>> {
    let mut batch = init_batch(cfg, teacher, batch_size, rng)?;
    apply_alignment(cfg, &mut batch, teacher.embeddings())?;
    refine(cfg, &mut batch, teacher, student, predictor, rng)?;
    Ok(batch)
}
