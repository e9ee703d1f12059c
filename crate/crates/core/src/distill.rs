//! Knowledge-distillation losses, the per-batch student update, and the
//! data-free training loops (AS-DFD and its baselines).

use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::forge::{self, ForgeConfig, PseudoBatch};
use crate::graph::{Graph, Var};
use crate::model::{AttentionMask, Bound, MiniLm, ModelOptimizer, TokenBatch, CLS, NUM_RESERVED, PAD, SEP};
use crate::optim::{LrSchedule, ScheduleMode};
use crate::selfsup::{apply_mask, predictor_step, MaskPredictor};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Asdfd,
    RandomText,
    Zskd,
    RandomNoise,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Asdfd => "asdfd",
            Method::RandomText => "random_text",
            Method::Zskd => "zskd",
            Method::RandomNoise => "random_noise",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asdfd" => Ok(Method::Asdfd),
            "random_text" => Ok(Method::RandomText),
            "zskd" => Ok(Method::Zskd),
            "random_noise" => Ok(Method::RandomNoise),
            other => Err(crate::Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Student (and predictor) learning rate.
    pub xi: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup: f64,
    pub schedule: ScheduleMode,
    pub method: Method,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 250.0,
            tau: 1.0,
            xi: 1e-4,
            epochs: 300,
            batch: 16,
            warmup: 0.1,
            schedule: ScheduleMode::WarmupLinearDecay,
            method: Method::Asdfd,
        }
    }
}

impl DistillConfig {
    /// α 250, τ 1, ξ 1e-5, batch 48, 2500 epochs.
    pub fn full_scale() -> Self {
        Self { xi: 1e-5, batch: 48, epochs: 2500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha >= 0.0 && self.alpha.is_finite(), Config, "alpha must be >= 0");
        ensure!(self.tau > 0.0 && self.tau.is_finite(), Config, "tau must be > 0");
        ensure!(self.xi >= 0.0 && self.xi.is_finite(), Config, "xi must be >= 0");
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch >= 1, Config, "batch must be >= 1");
        self.lr_schedule().validate()
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleMode::Fixed => LrSchedule::fixed(self.xi),
            ScheduleMode::WarmupLinearDecay => LrSchedule::warmup_linear(self.xi, self.warmup, self.epochs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletTargetSpec {
    /// Concentration of every non-target class.
    pub beta: f64,
    /// Multiplier on the target class concentration.
    pub target_scale: f64,
}

impl Default for DirichletTargetSpec {
    fn default() -> Self {
        Self { beta: 1.0, target_scale: 10.0 }
    }
}

impl DirichletTargetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.beta > 0.0 && self.target_scale > 0.0, Config, "Dirichlet concentrations must be positive");
        Ok(())
    }

    pub fn concentration(&self, target: usize, classes: usize) -> Vec<f64> {
        (0..classes).map(|k| if k == target { self.beta * self.target_scale } else { self.beta }).collect()
    }

    /// One probability row per target, concatenated.
    pub fn sample<F: Real, R: Rng + ?Sized>(&self, targets: &[usize], classes: usize, rng: &mut R) -> Result<Vec<F>> {
        self.validate()?;
        ensure!(classes >= 2, Config, "Dirichlet targets need at least two classes");
        let mut out = Vec::with_capacity(targets.len() * classes);
        for &t in targets {
            let dist = Dirichlet::new(&self.concentration(t, classes)).map_err(|e| crate::Error::Config(e.to_string()))?;
            let row: Vec<f64> = dist.sample(rng);
            // guard against underflow to exact zero in very peaked draws
            let row: Vec<f64> = row.iter().map(|&p| p.max(1e-12)).collect();
            let s: f64 = row.iter().sum();
            out.extend(row.into_iter().map(|p| F::lit(p / s)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_input: Option<f64>,
    pub l_mask: Option<f64>,
    pub l_kl: f64,
    pub l_pt: f64,
    pub l_kd: f64,
    pub acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdVars {
    pub kl: Var,
    pub pt: Var,
    pub kd: Var,
}

/// L_KL, L_PT and `L_KD = L_KL + α·L_PT` on a graph. The teacher should be
/// bound as constants.
pub fn kd_losses_graph<F: Real>(
    g: &mut Graph<F>,
    e: Var,
    attention: &AttentionMask,
    teacher: &Bound,
    student: &Bound,
    alpha: F,
    tau: F,
) -> Result<KdVars> {
    let t = teacher.forward_embeddings(g, e, attention)?;
    let s = student.forward_embeddings(g, e, attention)?;
    let kl = g.kl_div(t.logits, s.logits, tau)?;
    let pt = g.normalized_sqdist(t.h_cls, s.h_cls)?;
    let weighted = g.scale(pt, alpha);
    let kd = g.add(kl, weighted)?;
    Ok(KdVars { kl, pt, kd })
}

fn check_pair<F: Real>(teacher: &MiniLm<F>, student: &MiniLm<F>) -> Result<()> {
    let (t, s) = (teacher.config(), student.config());
    ensure!(t.hidden_dim == s.hidden_dim, Config, "teacher width {} vs student width {}", t.hidden_dim, s.hidden_dim);
    ensure!(t.num_classes == s.num_classes, Config, "teacher has {} classes, student {}", t.num_classes, s.num_classes);
    Ok(())
}

fn block_leaf<F: Real>(g: &mut Graph<F>, e: &Tensor<F>) -> Result<Var> {
    let s = e.shape();
    ensure!(s.len() == 3, Shape, "expected a [batch, seq, d] block, got {s:?}");
    g.leaf(&[s[0] * s[1], s[2]], e.values().to_vec(), false)
}

/// `(L_KL, L_PT)` for an embedding block.
pub fn kd_components<F: Real>(
    e: &Tensor<F>,
    attention: &AttentionMask,
    teacher: &MiniLm<F>,
    student: &MiniLm<F>,
    tau: F,
) -> Result<(F, F)> {
    check_pair(teacher, student)?;
    let mut g = Graph::new();
    let tb = teacher.bind(&mut g, false, false);
    let sb = student.bind(&mut g, false, false);
    let x = block_leaf(&mut g, e)?;
    let v = kd_losses_graph(&mut g, x, attention, &tb, &sb, F::zero(), tau)?;
    Ok((g.scalar(v.kl), g.scalar(v.pt)))
}

pub fn kd_kl_loss<F: Real>(e: &Tensor<F>, attention: &AttentionMask, teacher: &MiniLm<F>, student: &MiniLm<F>, tau: F) -> Result<F> {
    Ok(kd_components(e, attention, teacher, student, tau)?.0)
}

pub fn pt_loss<F: Real>(e: &Tensor<F>, attention: &AttentionMask, teacher: &MiniLm<F>, student: &MiniLm<F>) -> Result<F> {
    Ok(kd_components(e, attention, teacher, student, F::one())?.1)
}

pub fn kd_loss<F: Real>(
    e: &Tensor<F>,
    attention: &AttentionMask,
    teacher: &MiniLm<F>,
    student: &MiniLm<F>,
    alpha: F,
    tau: F,
) -> Result<F> {
    let (kl, pt) = kd_components(e, attention, teacher, student, tau)?;
    Ok(kl + alpha * pt)
}

/// Losses measured by one distillation step (before its updates).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_kl: f64,
    pub l_pt: f64,
    pub l_kd: f64,
    pub l_mask: Option<f64>,
}

/// One Adam step on the student trunk and head from L_KD at learning rate
/// `lr`, then, when `mask_positions` is given, one predictor step on `W`
/// from L_MASK. Teacher and embedding table are only read.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<F: Real>(
    e: &Tensor<F>,
    attention: &AttentionMask,
    mask_positions: Option<&[usize]>,
    teacher: &MiniLm<F>,
    student: &mut MiniLm<F>,
    optimizer: &mut ModelOptimizer<F>,
    predictor: Option<&mut MaskPredictor<F>>,
    cfg: &DistillConfig,
    lr: f64,
) -> Result<StepLosses> {
    check_pair(teacher, student)?;
    ensure!(student.embeddings_frozen(), Precondition, "student embedding table must be frozen during distillation");
    let mut g = Graph::new();
    let tb = teacher.bind(&mut g, false, false);
    let sb = student.bind(&mut g, true, false);
    let x = block_leaf(&mut g, e)?;
    let v = kd_losses_graph(&mut g, x, attention, &tb, &sb, F::lit(cfg.alpha), F::lit(cfg.tau))?;
    g.backward(v.kd)?;
    student.absorb_grads(&g, &sb)?;
    optimizer.step(student, F::lit(lr))?;
    let to64 = |x: F| x.to_f64().unwrap_or(f64::NAN);
    let l_mask = match (mask_positions, predictor) {
        (Some(pos), Some(pred)) => {
            let view = apply_mask(e, pos, attention, student.embeddings())?;
            Some(to64(predictor_step(&view, student, pred)?))
        }
        _ => None,
    };
    Ok(StepLosses { l_kl: to64(g.scalar(v.kl)), l_pt: to64(g.scalar(v.pt)), l_kd: to64(g.scalar(v.kd)), l_mask })
}

/// Observes a run: evaluation and per-record streaming happen here, so the
/// training loops themselves never touch data.
pub trait Monitor<F> {
    /// Accuracy to attach to this epoch's record, if any.
    fn evaluate(&mut self, _epoch: usize, _student: &MiniLm<F>) -> Result<Option<f64>> {
        Ok(None)
    }

    fn record(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    fn batch(&mut self, _epoch: usize, _batch: &PseudoBatch<F>) {}
}

pub struct NoMonitor;

impl<F> Monitor<F> for NoMonitor {}

#[derive(Clone, Debug)]
pub struct DistillOutcome<F> {
    pub student: MiniLm<F>,
    pub predictor: MaskPredictor<F>,
    pub records: Vec<LossRecord>,
}

/// A fresh student must also share the teacher's frozen embedding table.
fn check_student<F: Real>(teacher: &MiniLm<F>, student: &MiniLm<F>) -> Result<()> {
    check_pair(teacher, student)?;
    ensure!(student.embeddings_frozen(), Precondition, "student embeddings must be frozen");
    ensure!(
        std::sync::Arc::ptr_eq(teacher.embeddings(), student.embeddings())
            || teacher.embeddings().checksum() == student.embeddings().checksum(),
        Config,
        "student does not share the teacher's embedding table"
    );
    Ok(())
}

struct Run<F> {
    student: MiniLm<F>,
    predictor: MaskPredictor<F>,
    optimizer: ModelOptimizer<F>,
    schedule: LrSchedule,
    records: Vec<LossRecord>,
}

impl<F: Real> Run<F> {
    fn start<R: Rng + ?Sized>(teacher: &MiniLm<F>, mut student: MiniLm<F>, cfg: &DistillConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        check_student(teacher, &student)?;
        let predictor = MaskPredictor::new(student.config().hidden_dim, cfg.xi, rng);
        let optimizer = ModelOptimizer::new(&mut student);
        Ok(Self { student, predictor, optimizer, schedule: cfg.lr_schedule(), records: Vec::new() })
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        epoch: usize,
        e: &Tensor<F>,
        attention: &AttentionMask,
        mask_positions: Option<&[usize]>,
        l_input: Option<f64>,
        l_mask: Option<f64>,
        teacher: &MiniLm<F>,
        cfg: &DistillConfig,
        monitor: &mut dyn Monitor<F>,
    ) -> Result<()> {
        let lr = self.schedule.lr(epoch - 1);
        let pred = mask_positions.map(|_| &mut self.predictor);
        let s = distill_step(e, attention, mask_positions, teacher, &mut self.student, &mut self.optimizer, pred, cfg, lr)?;
        let acc = monitor.evaluate(epoch, &self.student)?;
        let rec = LossRecord { epoch, l_input, l_mask, l_kl: s.l_kl, l_pt: s.l_pt, l_kd: s.l_kd, acc };
        monitor.record(&rec)?;
        self.records.push(rec);
        Ok(())
    }

    fn finish(self) -> DistillOutcome<F> {
        DistillOutcome { student: self.student, predictor: self.predictor, records: self.records }
    }
}

/// Two-stage data-free distillation: every epoch constructs one pseudo
/// batch against the frozen networks, then takes one distillation step on it.
pub fn run_asdfd<F: Real, R: Rng + ?Sized>(
    teacher: &MiniLm<F>,
    student: MiniLm<F>,
    forge_cfg: &ForgeConfig,
    cfg: &DistillConfig,
    rng: &mut R,
    monitor: &mut dyn Monitor<F>,
) -> Result<DistillOutcome<F>> {
    forge_cfg.validate(teacher.config().max_len)?;
    let mut run = Run::start(teacher, student, cfg, rng)?;
    for epoch in 1..=cfg.epochs {
        let batch = forge::construct(forge_cfg, teacher, &run.student, &run.predictor, cfg.batch, rng)?;
        monitor.batch(epoch, &batch);
        let st = &batch.stats;
        run.step(
            epoch,
            &batch.e,
            &batch.attention,
            batch.mask_positions.as_deref(),
            Some(st.l_input),
            Some(st.l_mask),
            teacher,
            cfg,
            monitor,
        )?;
    }
    Ok(run.finish())
}

/// Random content ids in `[NUM_RESERVED, vocab_size)`, wrapped with
/// `[CLS]`/`[SEP]` and padded to the longest sampled length.
pub fn random_token_batch<R: Rng + ?Sized>(
    vocab_size: usize,
    batch: usize,
    l_min: usize,
    l_max: usize,
    rng: &mut R,
) -> Result<TokenBatch> {
    ensure!(vocab_size > NUM_RESERVED, InvalidArgument, "vocabulary has no content tokens");
    ensure!(3 <= l_min && l_min <= l_max, InvalidArgument, "need 3 <= l_min <= l_max");
    let lengths: Vec<usize> = (0..batch).map(|_| rng.gen_range(l_min..=l_max)).collect();
    let seq = lengths.iter().copied().max().unwrap_or(3);
    let mut ids = Vec::with_capacity(batch * seq);
    for &len in &lengths {
        ids.push(CLS);
        ids.extend((0..len - 2).map(|_| rng.gen_range(NUM_RESERVED..vocab_size)));
        ids.push(SEP);
        ids.extend(std::iter::repeat(PAD).take(seq - len));
    }
    TokenBatch::new(batch, seq, ids)
}

/// Distillation on sentences of uniformly random vocabulary words, embedded
/// through the shared frozen table. Lengths follow the forge's length range.
pub fn run_random_text<F: Real, R: Rng + ?Sized>(
    teacher: &MiniLm<F>,
    student: MiniLm<F>,
    forge_cfg: &ForgeConfig,
    cfg: &DistillConfig,
    vocab_size: usize,
    rng: &mut R,
    monitor: &mut dyn Monitor<F>,
) -> Result<DistillOutcome<F>> {
    let max_len = teacher.config().max_len;
    forge_cfg.validate(max_len)?;
    ensure!(vocab_size <= teacher.config().vocab_size, Config, "vocabulary larger than the teacher's embedding table");
    let mut run = Run::start(teacher, student, cfg, rng)?;
    for epoch in 1..=cfg.epochs {
        let tokens = random_token_batch(vocab_size, cfg.batch, forge_cfg.l_min, forge_cfg.l_max(max_len), rng)?;
        let attention = tokens.attention_mask()?;
        let e = teacher.embed(&tokens)?;
        run.step(epoch, &e, &attention, None, None, None, teacher, cfg, monitor)?;
    }
    Ok(run.finish())
}

/// Modified-ZSKD: inputs crafted towards Dirichlet-sampled soft targets with
/// the same alignment constraints and no adversarial steps.
#[allow(clippy::too_many_arguments)]
pub fn run_zskd<F: Real, R: Rng + ?Sized>(
    teacher: &MiniLm<F>,
    student: MiniLm<F>,
    forge_cfg: &ForgeConfig,
    dirichlet: &DirichletTargetSpec,
    cfg: &DistillConfig,
    rng: &mut R,
    monitor: &mut dyn Monitor<F>,
) -> Result<DistillOutcome<F>> {
    dirichlet.validate()?;
    let craft = ForgeConfig { n_s: 0, ..forge_cfg.clone() };
    craft.validate(teacher.config().max_len)?;
    let classes = teacher.config().num_classes;
    let mut run = Run::start(teacher, student, cfg, rng)?;
    for epoch in 1..=cfg.epochs {
        let mut batch = forge::init_batch(&craft, teacher, cfg.batch, rng)?;
        forge::apply_alignment(&craft, &mut batch, teacher.embeddings())?;
        batch.soft_targets = Some(dirichlet.sample(&batch.targets, classes, rng)?);
        forge::refine(&craft, &mut batch, teacher, &run.student, &run.predictor, rng)?;
        monitor.batch(epoch, &batch);
        let l_input = Some(batch.stats.l_input);
        run.step(epoch, &batch.e, &batch.attention, None, l_input, None, teacher, cfg, monitor)?;
    }
    Ok(run.finish())
}

/// Distillation on the untouched Gaussian blocks (alignment per `forge_cfg`
/// flags, no guessing).
pub fn run_random_noise<F: Real, R: Rng + ?Sized>(
    teacher: &MiniLm<F>,
    student: MiniLm<F>,
    forge_cfg: &ForgeConfig,
    cfg: &DistillConfig,
    rng: &mut R,
    monitor: &mut dyn Monitor<F>,
) -> Result<DistillOutcome<F>> {
    forge_cfg.validate(teacher.config().max_len)?;
    let mut run = Run::start(teacher, student, cfg, rng)?;
    for epoch in 1..=cfg.epochs {
        let mut batch = forge::init_batch(forge_cfg, teacher, cfg.batch, rng)?;
        forge::apply_alignment(forge_cfg, &mut batch, teacher.embeddings())?;
        monitor.batch(epoch, &batch);
        let l_input = forge::input_loss(&batch, teacher)?.to_f64();
        run.step(epoch, &batch.e, &batch.attention, None, l_input, None, teacher, cfg, monitor)?;
    }
    Ok(run.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_student_from_teacher, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn teacher() -> MiniLm<f64> {
        let cfg = ModelConfig { num_layers: 2, hidden_dim: 8, num_heads: 2, ff_dim: 16, vocab_size: 12, max_len: 8, num_classes: 3 };
        MiniLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn small_cfg() -> DistillConfig {
        DistillConfig { epochs: 3, batch: 3, xi: 1e-3, ..DistillConfig::default() }
    }

    fn small_forge() -> ForgeConfig {
        ForgeConfig { l_min: 4, l_max: Some(8), n_iter: 2, n_t: 2, ..ForgeConfig::default() }
    }

    #[test]
    fn identical_student_has_zero_kd() {
        let t = teacher();
        let s = init_student_from_teacher(&t, &[1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Tensor::<f64>::randn(&[2, 5, 8], 0.0, 1.0, &mut rng);
        let attn = AttentionMask::from_lengths(&[5, 3], 5).unwrap();
        assert!(kd_loss(&e, &attn, &t, &s, 250.0, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kd_is_affine_in_alpha() {
        let t = teacher();
        let s = init_student_from_teacher(&t, &[2]).unwrap();
        let e = Tensor::<f64>::randn(&[2, 5, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let attn = AttentionMask::all(2, 5);
        let pt = pt_loss(&e, &attn, &t, &s).unwrap();
        let a = kd_loss(&e, &attn, &t, &s, 3.0, 1.0).unwrap();
        let b = kd_loss(&e, &attn, &t, &s, 6.0, 1.0).unwrap();
        assert!((b - a - 3.0 * pt).abs() < 1e-10);
        assert_eq!(kd_loss(&e, &attn, &t, &s, 0.0, 1.0).unwrap(), kd_kl_loss(&e, &attn, &t, &s, 1.0).unwrap());
    }

    #[test]
    fn dirichlet_rows_are_distributions() {
        let spec = DirichletTargetSpec::default();
        let rows: Vec<f64> = spec.sample(&[0, 1, 2, 2], 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for r in rows.chunks(3) {
            assert!(r.iter().all(|&p| p > 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(DirichletTargetSpec { beta: 0.0, target_scale: 1.0 }.validate().is_err());
    }

    #[test]
    fn random_tokens_avoid_reserved_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_token_batch(20, 32, 3, 8, &mut rng).unwrap();
        let lengths = b.attention_mask().unwrap().lengths();
        for s in 0..32 {
            let row = b.row(s);
            assert_eq!(row[0], CLS);
            assert_eq!(row[lengths[s] - 1], SEP);
            assert!(row[1..lengths[s] - 1].iter().all(|&t| t >= NUM_RESERVED));
            assert!(lengths[s] >= 3);
        }
    }

    #[test]
    fn runs_leave_teacher_alone_and_repeat_exactly() {
        let t = teacher();
        let before = (t.checksum(), t.embeddings().checksum());
        let go = |seed| run_asdfd(&t, init_student_from_teacher(&t, &[1]).unwrap(), &small_forge(), &small_cfg(), &mut ChaCha8Rng::seed_from_u64(seed), &mut NoMonitor).unwrap();
        let a = go(7);
        let b = go(7);
        assert_eq!(a.records, b.records);
        assert_eq!(a.student.checksum(), b.student.checksum());
        assert_eq!(before, (t.checksum(), t.embeddings().checksum()));
        assert_eq!(a.records.len(), 3);
        assert!(a.records.iter().all(|r| r.l_mask.is_some() && r.l_kd >= 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rt = run_random_text(&t, init_student_from_teacher(&t, &[1]).unwrap(), &small_forge(), &small_cfg(), 12, &mut rng, &mut NoMonitor).unwrap();
        assert!(rt.records.iter().all(|r| r.l_input.is_none()));
        let z = run_zskd(&t, init_student_from_teacher(&t, &[1]).unwrap(), &small_forge(), &DirichletTargetSpec::default(), &small_cfg(), &mut rng, &mut NoMonitor).unwrap();
        assert_eq!(z.records.len(), 3);
        let n = run_random_noise(&t, init_student_from_teacher(&t, &[1]).unwrap(), &small_forge(), &small_cfg(), &mut rng, &mut NoMonitor).unwrap();
        assert_eq!(n.records.len(), 3);
        assert_eq!(before, (t.checksum(), t.embeddings().checksum()));
    }
}
