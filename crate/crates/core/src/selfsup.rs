//! The student's mask-prediction module: hide one embedding row per sample
//! and reconstruct it from the student's contextual hidden state through a
//! linear map `W`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{AttentionMask, Bound, EmbeddingTable, MiniLm, MASK};
use crate::optim::AdamState;
use crate::tensor::{Real, Tensor};

/// Bias-free `d×d` projection with its own Adam state and learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPredictor<F> {
    pub w: Tensor<F>,
    pub adam: AdamState<F>,
    pub lr: f64,
}

impl<F: Real> MaskPredictor<F> {
    /// Identity plus N(0, 0.01²) noise.
    pub fn new<R: Rng + ?Sized>(width: usize, lr: f64, rng: &mut R) -> Self {
        let noise = Normal::new(0.0, 0.01).expect("valid std");
        let mut values = vec![F::zero(); width * width];
        for (i, v) in values.iter_mut().enumerate() {
            let diag = if i / width == i % width { 1.0 } else { 0.0 };
            *v = F::lit(diag + noise.sample(rng));
        }
        Self::from_weights(Tensor::new(&[width, width], values).expect("square"), lr).expect("square")
    }

    pub fn from_weights(w: Tensor<F>, lr: f64) -> Result<Self> {
        let s = w.shape();
        ensure!(s.len() == 2 && s[0] == s[1], Shape, "predictor weight must be square, got {s:?}");
        let adam = AdamState::for_tensor(&w);
        Ok(Self { w, adam, lr })
    }

    pub fn width(&self) -> usize {
        self.w.shape()[0]
    }
}

/// One content position per sample, uniform over `[1, length-2]`.
pub fn choose_mask_positions<R: Rng + ?Sized>(lengths: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    lengths
        .iter()
        .map(|&l| {
            if l < 3 {
                return Err(Error::Precondition(format!("length {l} has no content position to mask")));
            }
            Ok(rng.gen_range(1..=l - 2))
        })
        .collect()
}

/// Embedding-layer output rows of `[MASK]` at each sample's position, concatenated.
pub fn mask_rows<F: Real>(table: &EmbeddingTable<F>, positions: &[usize]) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(positions.len() * table.width());
    for &p in positions {
        out.extend(table.output_row(MASK, p)?);
    }
    Ok(out)
}

fn flat_rows(positions: &[usize], seq: usize) -> Vec<usize> {
    positions.iter().enumerate().map(|(b, &p)| b * seq + p).collect()
}

/// A block with one row per sample swapped for the `[MASK]` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView<F> {
    pub positions: Vec<usize>,
    /// Original rows `e_i`, `[batch, d]`.
    pub originals: Tensor<F>,
    pub masked: Tensor<F>,
    pub attention: AttentionMask,
}

impl<F: Real> MaskedView<F> {
    /// The unmasked block.
    pub fn restore(&self) -> Tensor<F> {
        let mut e = self.masked.clone();
        let (seq, d) = (self.attention.seq, self.originals.shape()[1]);
        for (b, &p) in self.positions.iter().enumerate() {
            let r = b * seq + p;
            e.values_mut()[r * d..(r + 1) * d].copy_from_slice(self.originals.row(b));
        }
        e
    }
}

fn check_positions(positions: &[usize], attention: &AttentionMask) -> Result<()> {
    ensure!(positions.len() == attention.batch, Shape, "{} positions for batch {}", positions.len(), attention.batch);
    for (b, (&p, len)) in positions.iter().zip(attention.lengths()).enumerate() {
        ensure!(p >= 1 && p + 2 <= len, Precondition, "mask position {p} outside content range of sample {b} (length {len})");
    }
    Ok(())
}

pub fn apply_mask<F: Real>(
    e: &Tensor<F>,
    positions: &[usize],
    attention: &AttentionMask,
    table: &EmbeddingTable<F>,
) -> Result<MaskedView<F>> {
    let s = e.shape();
    ensure!(s.len() == 3 && s[0] == attention.batch && s[1] == attention.seq, Shape, "block {s:?} vs mask {}x{}", attention.batch, attention.seq);
    check_positions(positions, attention)?;
    let d = s[2];
    let replacement = mask_rows(table, positions)?;
    let mut masked = e.clone();
    let mut originals = Vec::with_capacity(positions.len() * d);
    for (b, r) in flat_rows(positions, s[1]).into_iter().enumerate() {
        originals.extend_from_slice(&e.values()[r * d..(r + 1) * d]);
        masked.values_mut()[r * d..(r + 1) * d].copy_from_slice(&replacement[b * d..(b + 1) * d]);
    }
    Ok(MaskedView {
        positions: positions.to_vec(),
        originals: Tensor::new(&[positions.len(), d], originals)?,
        masked,
        attention: attention.clone(),
    })
}

/// L_MASK on a graph: mask `e` (a `[batch·seq, d]` node), run the student
/// trunk, project the hidden state at each masked position with `W` and
/// compare with the original row. Gradients reach `e` through both the
/// target rows and the student path.
#[allow(clippy::too_many_arguments)]
pub fn mask_loss_graph<F: Real>(
    g: &mut Graph<F>,
    e: Var,
    positions: &[usize],
    replacement: &[F],
    attention: &AttentionMask,
    student: &Bound,
    w: Var,
) -> Result<Var> {
    check_positions(positions, attention)?;
    let rows = flat_rows(positions, attention.seq);
    let targets = g.gather_rows(e, &rows)?;
    let masked = g.replace_rows(e, &rows, replacement)?;
    let h_all = student.encode(g, masked, attention)?;
    let h = g.gather_rows(h_all, &rows)?;
    let pred = g.matmul(h, w, true)?;
    g.normalized_sqdist(targets, pred)
}

fn block_leaf<F: Real>(g: &mut Graph<F>, e: &Tensor<F>, requires_grad: bool) -> Result<Var> {
    let s = e.shape();
    ensure!(s.len() == 3, Shape, "expected a [batch, seq, d] block, got {s:?}");
    g.leaf(&[s[0] * s[1], s[2]], e.values().to_vec(), requires_grad)
}

/// Value of L_MASK for a masked view, in `[0, 4]`.
pub fn mask_loss<F: Real>(view: &MaskedView<F>, student: &MiniLm<F>, predictor: &MaskPredictor<F>) -> Result<F> {
    ensure!(
        predictor.width() == student.config().hidden_dim,
        Config,
        "predictor width {} vs student width {}",
        predictor.width(),
        student.config().hidden_dim
    );
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false, false);
    let e = block_leaf(&mut g, &view.restore(), false)?;
    let w = g.constant(&predictor.w);
    let replacement = mask_rows(student.embeddings(), &view.positions)?;
    let loss = mask_loss_graph(&mut g, e, &view.positions, &replacement, &view.attention, &bound, w)?;
    Ok(g.scalar(loss))
}

/// One Adam step on `W` (only) descending L_MASK; returns the pre-step loss.
pub fn predictor_step<F: Real>(view: &MaskedView<F>, student: &MiniLm<F>, predictor: &mut MaskPredictor<F>) -> Result<F> {
    ensure!(predictor.width() == student.config().hidden_dim, Config, "predictor width mismatch");
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false, false);
    let e = block_leaf(&mut g, &view.restore(), false)?;
    let w = g.param(&predictor.w);
    let replacement = mask_rows(student.embeddings(), &view.positions)?;
    let loss = mask_loss_graph(&mut g, e, &view.positions, &replacement, &view.attention, &bound, w)?;
    g.backward(loss)?;
    let grad = g.grad(w).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); predictor.w.numel()]);
    let lr = F::lit(predictor.lr);
    let MaskPredictor { w: weights, adam, .. } = predictor;
    adam.update(weights.values_mut(), &grad, lr)?;
    Ok(g.scalar(loss))
}
