//! A small BERT-style classifier split into its three stages: embedding
//! layer, post-LN transformer encoder, and pooler + classifier head.
//!
//! Everything downstream of the embedding layer can be driven directly from
//! an embedding block, which is how pseudo samples enter the teacher and the
//! student.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::AdamState;
use crate::tensor::{combine_checksums, Real, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Desk-scale teacher: 4 layers, d=64, 4 heads, ff=256, max_len=64.
    pub fn desk_teacher(vocab_size: usize, num_classes: usize) -> Self {
        Self { num_layers: 4, hidden_dim: 64, num_heads: 4, ff_dim: 256, vocab_size, max_len: 64, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 1, Config, "num_layers must be >= 1");
        ensure!(self.hidden_dim >= 1 && self.num_heads >= 1, Config, "hidden_dim and num_heads must be positive");
        ensure!(
            self.hidden_dim % self.num_heads == 0,
            Config,
            "hidden_dim {} not divisible by num_heads {}",
            self.hidden_dim,
            self.num_heads
        );
        ensure!(self.max_len >= 3, Config, "max_len must be >= 3, got {}", self.max_len);
        ensure!(self.vocab_size > NUM_RESERVED, Config, "vocab_size must exceed the {NUM_RESERVED} reserved ids");
        ensure!(self.num_classes >= 1 && self.ff_dim >= 1, Config, "num_classes and ff_dim must be positive");
        Ok(())
    }
}

/// Per-sample attendable flags, flattened `[batch · seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub batch: usize,
    pub seq: usize,
    pub flags: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, seq: usize, flags: Vec<bool>) -> Result<Self> {
        ensure!(flags.len() == batch * seq, Shape, "mask holds {} flags for {batch}x{seq}", flags.len());
        for b in 0..batch {
            ensure!(seq > 0 && flags[b * seq], InvalidArgument, "position 0 of sample {b} must be attendable");
        }
        Ok(Self { batch, seq, flags })
    }

    /// Positions `< lengths[b]` attendable.
    pub fn from_lengths(lengths: &[usize], seq: usize) -> Result<Self> {
        let flags = lengths.iter().flat_map(|&len| (0..seq).map(move |t| t < len)).collect();
        Self::new(lengths.len(), seq, flags)
    }

    pub fn all(batch: usize, seq: usize) -> Self {
        Self { batch, seq, flags: vec![true; batch * seq] }
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.flags[b * self.seq..(b + 1) * self.seq]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch).map(|b| self.row(b).iter().filter(|&&f| f).count()).collect()
    }

    /// Smallest prefix length covering every attendable position in the batch.
    pub fn span(&self) -> usize {
        (0..self.batch)
            .map(|b| self.row(b).iter().rposition(|&f| f).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1)
    }

    pub fn truncated(&self, seq: usize) -> Self {
        let flags = (0..self.batch).flat_map(|b| self.row(b)[..seq].to_vec()).collect();
        Self { batch: self.batch, seq, flags }
    }
}

/// Token ids, flattened `[batch · seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        ensure!(ids.len() == batch * seq, Shape, "{} ids for {batch}x{seq}", ids.len());
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == seq), Shape, "ragged token rows");
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Attendable exactly where the id is not `[PAD]`.
    pub fn attention_mask(&self) -> Result<AttentionMask> {
        AttentionMask::new(self.batch, self.seq, self.ids.iter().map(|&t| t != PAD).collect())
    }

    pub fn truncated(&self, seq: usize) -> Self {
        let ids = (0..self.batch).flat_map(|b| self.row(b)[..seq].to_vec()).collect();
        Self { batch: self.batch, seq, ids }
    }
}

/// Token and position tables plus the embedding layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<F> {
    pub token: Tensor<F>,
    pub position: Tensor<F>,
    pub ln_gain: Tensor<F>,
    pub ln_bias: Tensor<F>,
}

impl<F: Real> EmbeddingTable<F> {
    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        Self {
            token: Tensor::randn(&[cfg.vocab_size, d], 0.0, INIT_STD, rng),
            position: Tensor::randn(&[cfg.max_len, d], 0.0, INIT_STD, rng),
            ln_gain: Tensor::filled(&[d], F::one()),
            ln_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<F>; 4] {
        [&self.token, &self.position, &self.ln_gain, &self.ln_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [&mut self.token, &mut self.position, &mut self.ln_gain, &mut self.ln_bias]
    }

    pub const NAMES: [&'static str; 4] = ["token", "position", "ln_gain", "ln_bias"];

    pub fn width(&self) -> usize {
        self.token.shape()[1]
    }

    /// Embedding-layer output row for `token` at `position`.
    pub fn output_row(&self, token: usize, position: usize) -> Result<Vec<F>> {
        let (vocab, max_len) = (self.token.shape()[0], self.position.shape()[0]);
        ensure!(token < vocab, InvalidArgument, "token id {token} out of range for vocab {vocab}");
        ensure!(position < max_len, InvalidArgument, "position {position} beyond max_len {max_len}");
        let sum: Vec<F> = self.token.row(token).iter().zip(self.position.row(position)).map(|(&a, &b)| a + b).collect();
        let mut out = vec![F::zero(); sum.len()];
        crate::functional::layer_norm_row(&sum, self.ln_gain.values(), self.ln_bias.values(), F::lit(LN_EPS), &mut out);
        Ok(out)
    }

    pub fn checksum(&self) -> u64 {
        combine_checksums(self.tensors().iter().map(|t| t.checksum()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<F> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub w_in: Tensor<F>,
    pub b_in: Tensor<F>,
    pub w_out: Tensor<F>,
    pub b_out: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
}

impl<F: Real> EncoderLayer<F> {
    pub const NAMES: [&'static str; 16] = [
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w_in", "b_in", "w_out", "b_out",
        "ln2_gain", "ln2_bias",
    ];

    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, ff) = (cfg.hidden_dim, cfg.ff_dim);
        let mut w = |r, c| Tensor::randn(&[r, c], 0.0, INIT_STD, rng);
        let (wq, wk, wv, wo, w_in, w_out) = (w(d, d), w(d, d), w(d, d), w(d, d), w(d, ff), w(ff, d));
        Self {
            wq,
            bq: Tensor::zeros(&[d]),
            wk,
            bk: Tensor::zeros(&[d]),
            wv,
            bv: Tensor::zeros(&[d]),
            wo,
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::filled(&[d], F::one()),
            ln1_bias: Tensor::zeros(&[d]),
            w_in,
            b_in: Tensor::zeros(&[ff]),
            w_out,
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], F::one()),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<F>; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_gain,
            &self.ln1_bias, &self.w_in, &self.b_in, &self.w_out, &self.b_out, &self.ln2_gain, &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Pooler (`tanh(W·h + b)`) followed by the linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<F> {
    pub pooler_w: Tensor<F>,
    pub pooler_b: Tensor<F>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

impl<F: Real> ClassifierHead<F> {
    pub const NAMES: [&'static str; 4] = ["pooler_w", "pooler_b", "out_w", "out_b"];

    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        Self {
            pooler_w: Tensor::randn(&[d, d], 0.0, INIT_STD, rng),
            pooler_b: Tensor::zeros(&[d]),
            out_w: Tensor::randn(&[d, cfg.num_classes], 0.0, INIT_STD, rng),
            out_b: Tensor::zeros(&[cfg.num_classes]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<F>; 4] {
        [&self.pooler_w, &self.pooler_b, &self.out_w, &self.out_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [&mut self.pooler_w, &mut self.pooler_b, &mut self.out_w, &mut self.out_b]
    }
}

#[derive(Clone, Debug)]
pub struct MiniLm<F> {
    config: ModelConfig,
    embeddings: Arc<EmbeddingTable<F>>,
    embeddings_frozen: bool,
    pub layers: Vec<EncoderLayer<F>>,
    pub head: ClassifierHead<F>,
}

/// Graph handles for one model's parameters.
pub struct Bound {
    emb: Option<[Var; 4]>,
    layers: Vec<[Var; 16]>,
    head: [Var; 4],
    heads: usize,
    trainable: bool,
}

/// Outputs of the encoder + head path.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub h_cls: Var,
    pub h_all: Var,
}

/// Plain-value outputs of [`MiniLm::forward_from_embeddings`].
#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub logits: Tensor<F>,
    pub h_cls: Tensor<F>,
    pub h_all: Tensor<F>,
}

impl<F: Real> MiniLm<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embeddings = Arc::new(EmbeddingTable::init(&config, rng));
        let layers = (0..config.num_layers).map(|_| EncoderLayer::init(&config, rng)).collect();
        let head = ClassifierHead::init(&config, rng);
        Ok(Self { config, embeddings, embeddings_frozen: false, layers, head })
    }

    /// Assembles a model from parts; shapes are checked against `config`.
    pub fn from_parts(
        config: ModelConfig,
        embeddings: Arc<EmbeddingTable<F>>,
        embeddings_frozen: bool,
        layers: Vec<EncoderLayer<F>>,
        head: ClassifierHead<F>,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(layers.len() == config.num_layers, Shape, "{} layers for config with {}", layers.len(), config.num_layers);
        let (d, ff, v, l, c) = (config.hidden_dim, config.ff_dim, config.vocab_size, config.max_len, config.num_classes);
        let check = |ts: &[&Tensor<F>], want: &[&[usize]], what: &str| -> Result<()> {
            for (t, w) in ts.iter().zip(want) {
                ensure!(t.shape() == *w, Shape, "{what}: expected {w:?}, got {:?}", t.shape());
            }
            Ok(())
        };
        check(&embeddings.tensors(), &[&[v, d], &[l, d], &[d], &[d]], "embedding table")?;
        let layer_shapes: [&[usize]; 16] =
            [&[d, d], &[d], &[d, d], &[d], &[d, d], &[d], &[d, d], &[d], &[d], &[d], &[d, ff], &[ff], &[ff, d], &[d], &[d], &[d]];
        for layer in &layers {
            check(&layer.tensors(), &layer_shapes, "encoder layer")?;
        }
        check(&head.tensors(), &[&[d, d], &[d], &[d, c], &[c]], "classifier head")?;
        Ok(Self { config, embeddings, embeddings_frozen, layers, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Arc<EmbeddingTable<F>> {
        &self.embeddings
    }

    pub fn embeddings_frozen(&self) -> bool {
        self.embeddings_frozen
    }

    /// Mutable access to the embedding table; rejected once frozen.
    pub fn embeddings_mut(&mut self) -> Result<&mut EmbeddingTable<F>> {
        if self.embeddings_frozen {
            return Err(Error::Frozen);
        }
        Ok(Arc::make_mut(&mut self.embeddings))
    }

    pub fn freeze_embeddings(&mut self) {
        self.embeddings_frozen = true;
    }

    /// Named parameters in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (n, t) in EmbeddingTable::<F>::NAMES.iter().zip(self.embeddings.tensors()) {
            out.push((format!("embeddings.{n}"), t));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in EncoderLayer::<F>::NAMES.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        for (n, t) in ClassifierHead::<F>::NAMES.iter().zip(self.head.tensors()) {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Mutable access to every parameter, in [`Self::named_params`] order.
    /// Fails when the embedding table is frozen.
    pub fn all_params_mut(&mut self) -> Result<Vec<&mut Tensor<F>>> {
        if self.embeddings_frozen {
            return Err(Error::Frozen);
        }
        let mut out: Vec<&mut Tensor<F>> = Arc::make_mut(&mut self.embeddings).tensors_mut().into_iter().collect();
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        Ok(out)
    }

    /// Parameters updated by training: embeddings (unless frozen), encoder, head.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = Vec::new();
        if !self.embeddings_frozen {
            out.extend(Arc::make_mut(&mut self.embeddings).tensors_mut());
        }
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        combine_checksums(self.named_params().iter().map(|(_, t)| t.checksum()))
    }

    /// Checksum of the encoder layers and head only.
    pub fn trunk_checksum(&self) -> u64 {
        combine_checksums(
            self.layers.iter().flat_map(|l| l.tensors().map(|t| t.checksum())).chain(self.head.tensors().map(|t| t.checksum())),
        )
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.tensors_mut().into_iter().for_each(|t| t.zero_grad());
        }
        self.head.tensors_mut().into_iter().for_each(|t| t.zero_grad());
        if !self.embeddings_frozen {
            Arc::make_mut(&mut self.embeddings).tensors_mut().into_iter().for_each(|t| t.zero_grad());
        }
    }

    pub fn cast<G: Real>(&self) -> MiniLm<G> {
        let emb = &self.embeddings;
        MiniLm {
            config: self.config.clone(),
            embeddings: Arc::new(EmbeddingTable {
                token: emb.token.cast(),
                position: emb.position.cast(),
                ln_gain: emb.ln_gain.cast(),
                ln_bias: emb.ln_bias.cast(),
            }),
            embeddings_frozen: self.embeddings_frozen,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let t = l.tensors();
                    EncoderLayer {
                        wq: t[0].cast(),
                        bq: t[1].cast(),
                        wk: t[2].cast(),
                        bk: t[3].cast(),
                        wv: t[4].cast(),
                        bv: t[5].cast(),
                        wo: t[6].cast(),
                        bo: t[7].cast(),
                        ln1_gain: t[8].cast(),
                        ln1_bias: t[9].cast(),
                        w_in: t[10].cast(),
                        b_in: t[11].cast(),
                        w_out: t[12].cast(),
                        b_out: t[13].cast(),
                        ln2_gain: t[14].cast(),
                        ln2_bias: t[15].cast(),
                    }
                })
                .collect(),
            head: ClassifierHead {
                pooler_w: self.head.pooler_w.cast(),
                pooler_b: self.head.pooler_b.cast(),
                out_w: self.head.out_w.cast(),
                out_b: self.head.out_b.cast(),
            },
        }
    }

    // ---- graph construction ----------------------------------------------

    /// Registers parameters on `g`. With `trainable`, encoder and head (and
    /// the embedding table, unless frozen) become gradient leaves; otherwise
    /// everything is a constant. The embedding table is only registered when
    /// `with_embeddings` is set.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool, with_embeddings: bool) -> Bound {
        let reg = |g: &mut Graph<F>, t: &Tensor<F>, train: bool| if train { g.param(t) } else { g.constant(t) };
        let emb = with_embeddings.then(|| {
            let train = trainable && !self.embeddings_frozen;
            self.embeddings.tensors().map(|t| reg(g, t, train))
        });
        let layers = self.layers.iter().map(|l| l.tensors().map(|t| reg(g, t, trainable))).collect();
        let head = self.head.tensors().map(|t| reg(g, t, trainable));
        Bound { emb, layers, head, heads: self.config.num_heads, trainable }
    }

    /// Adds graph gradients of the bound trainable parameters into their
    /// tensors' gradient buffers.
    pub fn absorb_grads(&mut self, g: &Graph<F>, bound: &Bound) -> Result<()> {
        if !bound.trainable {
            return Ok(());
        }
        let frozen = self.embeddings_frozen;
        let mut pairs: Vec<(&mut Tensor<F>, Var)> = Vec::new();
        if let (Some(vars), false) = (bound.emb, frozen) {
            pairs.extend(Arc::make_mut(&mut self.embeddings).tensors_mut().into_iter().zip(vars));
        }
        for (l, vars) in self.layers.iter_mut().zip(&bound.layers) {
            pairs.extend(l.tensors_mut().into_iter().zip(vars.iter().copied()));
        }
        pairs.extend(self.head.tensors_mut().into_iter().zip(bound.head));
        for (t, v) in pairs {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    // ---- plain-value API -------------------------------------------------

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        ensure!(tokens.seq <= self.config.max_len, Shape, "sequence length {} exceeds max_len {}", tokens.seq, self.config.max_len);
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of range for vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Embedding-layer output `[batch, seq, d]`.
    pub fn embed(&self, tokens: &TokenBatch) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, true);
        let e = bound.embed(&mut g, tokens, self.config.vocab_size)?;
        let d = self.config.hidden_dim;
        Tensor::new(&[tokens.batch, tokens.seq, d], g.value(e).to_vec())
    }

    /// Encoder stack output for an embedding block `[batch, seq, d]`.
    pub fn encode(&self, e: &Tensor<F>, mask: &AttentionMask) -> Result<Tensor<F>> {
        let (batch, seq) = self.check_block(e, mask)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false);
        let x = g.leaf(&[batch * seq, self.config.hidden_dim], e.values().to_vec(), false)?;
        let h = bound.encode(&mut g, x, mask)?;
        Tensor::new(e.shape(), g.value(h).to_vec())
    }

    /// Head output for `[batch, d]` [CLS] hidden states.
    pub fn classify(&self, h_cls: &Tensor<F>) -> Result<Tensor<F>> {
        ensure!(
            h_cls.shape().len() == 2 && h_cls.shape()[1] == self.config.hidden_dim,
            Shape,
            "h_cls shape {:?} for width {}",
            h_cls.shape(),
            self.config.hidden_dim
        );
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false);
        let x = g.constant(h_cls);
        let logits = bound.classify(&mut g, x)?;
        Ok(g.to_tensor(logits))
    }

    fn check_block(&self, e: &Tensor<F>, mask: &AttentionMask) -> Result<(usize, usize)> {
        let s = e.shape();
        ensure!(s.len() == 3 && s[2] == self.config.hidden_dim, Shape, "embedding block {s:?} for width {}", self.config.hidden_dim);
        ensure!(s[0] == mask.batch && s[1] == mask.seq, Shape, "mask {}x{} for block {s:?}", mask.batch, mask.seq);
        ensure!(s[1] <= self.config.max_len, Shape, "sequence length {} exceeds max_len {}", s[1], self.config.max_len);
        Ok((s[0], s[1]))
    }

    /// Logits, [CLS] hiddens and all last-layer hiddens for an embedding block.
    /// Trailing positions that no sample attends to are dropped before the
    /// encoder runs; `h_all` covers the full input length with those rows zero.
    pub fn forward_from_embeddings(&self, e: &Tensor<F>, mask: &AttentionMask) -> Result<ForwardOutput<F>> {
        let (batch, seq) = self.check_block(e, mask)?;
        let d = self.config.hidden_dim;
        let span = mask.span();
        let trimmed_mask = mask.truncated(span);
        let mut values = Vec::with_capacity(batch * span * d);
        for b in 0..batch {
            values.extend_from_slice(&e.values()[b * seq * d..(b * seq + span) * d]);
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false);
        let x = g.leaf(&[batch * span, d], values, false)?;
        let out = bound.forward_embeddings(&mut g, x, &trimmed_mask)?;
        let mut h_all = vec![F::zero(); batch * seq * d];
        let hv = g.value(out.h_all);
        for b in 0..batch {
            h_all[b * seq * d..(b * seq + span) * d].copy_from_slice(&hv[b * span * d..(b + 1) * span * d]);
        }
        Ok(ForwardOutput {
            logits: g.to_tensor(out.logits),
            h_cls: g.to_tensor(out.h_cls),
            h_all: Tensor::new(&[batch, seq, d], h_all)?,
        })
    }

    /// Full classification path from token ids; `[PAD]` positions are masked.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor<F>> {
        self.check_tokens(tokens)?;
        let mask = tokens.attention_mask()?;
        let span = mask.span();
        let tokens = tokens.truncated(span);
        let mask = mask.truncated(span);
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, true);
        let e = bound.embed(&mut g, &tokens, self.config.vocab_size)?;
        let out = bound.forward_embeddings(&mut g, e, &mask)?;
        Ok(g.to_tensor(out.logits))
    }
}

impl Bound {
    /// Token lookup + position lookup + layer norm, as graph ops.
    pub fn embed<F: Real>(&self, g: &mut Graph<F>, tokens: &TokenBatch, vocab: usize) -> Result<Var> {
        let [tok, pos, gain, bias] = self.emb.ok_or_else(|| Error::Precondition("embedding table not bound".into()))?;
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of range for vocab {vocab}")));
        }
        let max_len = g.shape(pos)[0];
        ensure!(tokens.seq <= max_len, Shape, "sequence length {} exceeds max_len {max_len}", tokens.seq);
        let t = g.gather_rows(tok, &tokens.ids)?;
        let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.seq).collect();
        let p = g.gather_rows(pos, &positions)?;
        let s = g.add(t, p)?;
        g.layer_norm(s, gain, bias, F::lit(LN_EPS))
    }

    /// Post-LN encoder stack on a `[batch·seq, d]` block.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, e: Var, mask: &AttentionMask) -> Result<Var> {
        ensure!(g.shape(e)[0] == mask.batch * mask.seq, Shape, "block rows {} vs mask {}x{}", g.shape(e)[0], mask.batch, mask.seq);
        let eps = F::lit(LN_EPS);
        let mut x = e;
        for p in &self.layers {
            let q = g.linear(x, p[0], p[1])?;
            let k = g.linear(x, p[2], p[3])?;
            let v = g.linear(x, p[4], p[5])?;
            let a = g.attention(q, k, v, mask.batch, mask.seq, self.heads, &mask.flags)?;
            let o = g.linear(a, p[6], p[7])?;
            let r1 = g.add(x, o)?;
            let x1 = g.layer_norm(r1, p[8], p[9], eps)?;
            let f = g.linear(x1, p[10], p[11])?;
            let f = g.gelu(f);
            let f = g.linear(f, p[12], p[13])?;
            let r2 = g.add(x1, f)?;
            x = g.layer_norm(r2, p[14], p[15], eps)?;
        }
        Ok(x)
    }

    pub fn classify<F: Real>(&self, g: &mut Graph<F>, h_cls: Var) -> Result<Var> {
        let [pw, pb, ow, ob] = self.head;
        let pooled = g.linear(h_cls, pw, pb)?;
        let pooled = g.tanh(pooled);
        g.linear(pooled, ow, ob)
    }

    pub fn forward_embeddings<F: Real>(&self, g: &mut Graph<F>, e: Var, mask: &AttentionMask) -> Result<ForwardVars> {
        let h_all = self.encode(g, e, mask)?;
        let cls_rows: Vec<usize> = (0..mask.batch).map(|b| b * mask.seq).collect();
        let h_cls = g.gather_rows(h_all, &cls_rows)?;
        let logits = self.classify(g, h_cls)?;
        Ok(ForwardVars { logits, h_cls, h_all })
    }
}

/// Builds a student whose layer `k` copies teacher layer `layer_indices[k]`
/// (1-based). The head is copied; the embedding table is shared with the
/// teacher and frozen.
pub fn init_student_from_teacher<F: Real>(teacher: &MiniLm<F>, layer_indices: &[usize]) -> Result<MiniLm<F>> {
    init_student(teacher, teacher, layer_indices)
}

/// Student sharing `teacher`'s frozen embedding table, with trunk layers and
/// head copied from `base` (any model of the teacher's shape, e.g. its
/// weights before fine-tuning). Indices are 1-based.
pub fn init_student<F: Real>(teacher: &MiniLm<F>, base: &MiniLm<F>, layer_indices: &[usize]) -> Result<MiniLm<F>> {
    ensure!(!layer_indices.is_empty(), InvalidArgument, "student needs at least one layer");
    let (tc, bc) = (&teacher.config, &base.config);
    ensure!(
        tc.hidden_dim == bc.hidden_dim && tc.ff_dim == bc.ff_dim && tc.num_heads == bc.num_heads && tc.num_classes == bc.num_classes,
        Config,
        "base model shape differs from the teacher"
    );
    let n = base.layers.len();
    if let Some(&bad) = layer_indices.iter().find(|&&i| i == 0 || i > n) {
        return Err(Error::InvalidArgument(format!("layer index {bad} outside 1..={n}")));
    }
    let mut config = teacher.config.clone();
    config.num_layers = layer_indices.len();
    Ok(MiniLm {
        config,
        embeddings: Arc::clone(&teacher.embeddings),
        embeddings_frozen: true,
        layers: layer_indices.iter().map(|&i| base.layers[i - 1].clone()).collect(),
        head: base.head.clone(),
    })
}

/// Adam states for a model's trainable parameters.
pub struct ModelOptimizer<F> {
    states: Vec<AdamState<F>>,
}

impl<F: Real> ModelOptimizer<F> {
    pub fn new(model: &mut MiniLm<F>) -> Self {
        Self { states: model.trainable_params_mut().iter().map(|t| AdamState::for_tensor(t)).collect() }
    }

    /// Adam step on every trainable parameter that carries a gradient, then
    /// clears the gradients.
    pub fn step(&mut self, model: &mut MiniLm<F>, lr: F) -> Result<()> {
        let params = model.trainable_params_mut();
        ensure!(params.len() == self.states.len(), Precondition, "optimizer built for a different parameter set");
        for (p, st) in params.into_iter().zip(&mut self.states) {
            if p.grad().is_some() {
                crate::optim::adam_step(p, st, lr)?;
                p.zero_grad();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(layers: usize) -> MiniLm<f64> {
        let cfg = ModelConfig { num_layers: layers, hidden_dim: 8, num_heads: 2, ff_dim: 16, vocab_size: 12, max_len: 6, num_classes: 3 };
        MiniLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk_teacher(100, 4);
        assert!(cfg.validate().is_ok());
        cfg.num_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.num_heads = 4;
        cfg.max_len = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embed_is_deterministic_and_position_aware() {
        let m = toy(1);
        let tokens = TokenBatch::from_rows(&[vec![CLS, 7, 7, SEP, PAD, PAD], vec![CLS, 7, 7, SEP, PAD, PAD]]).unwrap();
        let e = m.embed(&tokens).unwrap();
        let d = 8;
        assert_eq!(&e.values()[..6 * d], &e.values()[6 * d..]);
        assert_ne!(&e.values()[d..2 * d], &e.values()[2 * d..3 * d]);
        let other = TokenBatch::from_rows(&[vec![CLS, 9, SEP, PAD, PAD, PAD]]).unwrap();
        let e2 = m.embed(&other).unwrap();
        assert_eq!(&e.values()[..d], &e2.values()[..d]);
        assert_eq!(m.embeddings().output_row(CLS, 0).unwrap(), e.values()[..d].to_vec());
    }

    #[test]
    fn embed_rejects_bad_ids() {
        let m = toy(1);
        let tokens = TokenBatch::from_rows(&[vec![CLS, 12, SEP]]).unwrap();
        assert!(matches!(m.embed(&tokens), Err(Error::InvalidArgument(_))));
        assert!(matches!(m.forward(&tokens), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn forward_matches_composition_and_ignores_padding() {
        let m = toy(2);
        let tokens = TokenBatch::from_rows(&[vec![CLS, 6, 8, SEP, PAD, PAD], vec![CLS, 5, SEP, PAD, PAD, PAD]]).unwrap();
        let mask = tokens.attention_mask().unwrap();
        let e = m.embed(&tokens).unwrap();
        let h = m.encode(&e, &mask).unwrap();
        assert_eq!(h.shape(), e.shape());
        let d = 8;
        let mut cls = h.values()[..d].to_vec();
        cls.extend_from_slice(&h.values()[6 * d..7 * d]);
        let composed = m.classify(&Tensor::new(&[2, d], cls).unwrap()).unwrap();
        let direct = m.forward(&tokens).unwrap();
        for (a, b) in composed.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let via_e = m.forward_from_embeddings(&e, &mask).unwrap();
        for (a, b) in via_e.logits.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(via_e.h_cls.values()[..d], via_e.h_all.values()[..d]);

        let shorter = TokenBatch::from_rows(&[vec![CLS, 6, 8, SEP], vec![CLS, 5, SEP, PAD]]).unwrap();
        let short_logits = m.forward(&shorter).unwrap();
        for (a, b) in short_logits.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_positions_do_not_leak() {
        let m = toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::<f64>::randn(&[1, 6, 8], 0.0, 1.0, &mut rng);
        let mask = AttentionMask::from_lengths(&[4], 6).unwrap();
        let h1 = m.encode(&e, &mask).unwrap();
        let mut e2 = e.clone();
        for v in &mut e2.values_mut()[4 * 8..] {
            *v += 3.0;
        }
        let h2 = m.encode(&e2, &mask).unwrap();
        assert_eq!(&h1.values()[..4 * 8], &h2.values()[..4 * 8]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = toy(1);
        for t in m.head.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let h = Tensor::new(&[2, 8], (0..16).map(|i| i as f64).collect()).unwrap();
        assert!(m.classify(&h).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(m.classify(&Tensor::zeros(&[2, 7])).is_err());
    }

    #[test]
    fn student_init_copy_and_share_semantics() {
        let teacher = toy(4);
        let identical = init_student_from_teacher(&teacher, &[1, 2, 3, 4]).unwrap();
        let tokens = TokenBatch::from_rows(&[vec![CLS, 6, 8, SEP, PAD, PAD]]).unwrap();
        assert_eq!(identical.forward(&tokens).unwrap(), teacher.forward(&tokens).unwrap());

        let mut student = init_student_from_teacher(&teacher, &[1, 4]).unwrap();
        assert_eq!(student.config().num_layers, 2);
        assert_eq!(student.layers[1], teacher.layers[3]);
        assert!(Arc::ptr_eq(student.embeddings(), teacher.embeddings()));
        let before = teacher.checksum();
        student.layers[0].wq.values_mut()[0] += 1.0;
        assert_eq!(teacher.checksum(), before);
        assert!(matches!(student.embeddings_mut(), Err(Error::Frozen)));
        assert!(init_student_from_teacher(&teacher, &[0, 2]).is_err());
        assert!(init_student_from_teacher(&teacher, &[1, 5]).is_err());
    }

    #[test]
    fn mask_span_and_lengths() {
        let mask = AttentionMask::from_lengths(&[3, 5], 8).unwrap();
        assert_eq!(mask.span(), 5);
        assert_eq!(mask.lengths(), vec![3, 5]);
        assert!(AttentionMask::from_lengths(&[0], 4).is_err());
    }
}
