//! Finite-difference audit of the training losses on a tiny fp64 model.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::kd_losses_graph;
use crate::error::Result;
use crate::forge::{self, ForgeConfig, PseudoBatch};
use crate::graph::Graph;
use crate::model::{init_student_from_teacher, MiniLm, ModelConfig};
use crate::selfsup::{choose_mask_positions, mask_loss_graph, mask_rows, MaskPredictor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Loss {
    Input,
    Mask,
    Kl,
    Pt,
    Kd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Wrt {
    Embeddings,
    Predictor,
    Student,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub loss: Loss,
    pub wrt: Wrt,
    pub coords: usize,
    pub max_rel_err: f64,
}

/// Step and denominator floor of the relative error `|a−n| / max(|a|, |n|, floor)`.
#[derive(Clone, Copy, Debug)]
pub struct Settings {
    pub h: f64,
    pub floor: f64,
    /// Coordinates sampled per parameter tensor.
    pub per_tensor: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self { h: 1e-4, floor: 1e-3, per_tensor: 4 }
    }
}

const ALPHA: f64 = 2.5;
const TAU: f64 = 1.5;

#[derive(Clone)]
struct Fixture {
    teacher: MiniLm<f64>,
    student: MiniLm<f64>,
    predictor: MaskPredictor<f64>,
    batch: PseudoBatch<f64>,
    positions: Vec<usize>,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { num_layers: 2, hidden_dim: 8, num_heads: 2, ff_dim: 16, vocab_size: 12, max_len: 8, num_classes: 3 };
    let teacher = MiniLm::new(cfg, &mut rng)?;
    let mut student = init_student_from_teacher(&teacher, &[1, 2])?;
    for t in student.trainable_params_mut() {
        let noise = Tensor::<f64>::randn(t.shape(), 0.0, 0.05, &mut rng);
        t.values_mut().iter_mut().zip(noise.values()).for_each(|(v, n)| *v += n);
    }
    let predictor = MaskPredictor::new(8, 1e-3, &mut rng);
    let fc = ForgeConfig { l_min: 4, l_max: None, sigma: 0.5, ..ForgeConfig::default() };
    let mut batch = forge::init_batch(&fc, &teacher, 3, &mut rng)?;
    forge::apply_alignment(&fc, &mut batch, teacher.embeddings())?;
    let positions = choose_mask_positions(&batch.lengths, &mut rng)?;
    Ok(Fixture { teacher, student, predictor, batch, positions })
}

/// Loss value and, when `grads`, the gradient w.r.t. each of the three
/// inputs (block, `W`, student parameters in trainable order).
fn evaluate(fx: &Fixture, loss: Loss, grads: bool) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let tb = fx.teacher.bind(&mut g, false, false);
    let sb = fx.student.bind(&mut g, grads, false);
    let (b, s, d) = (fx.batch.batch(), fx.batch.seq(), fx.batch.width());
    let e = g.leaf(&[b * s, d], fx.batch.e.values().to_vec(), grads)?;
    let w = if grads { g.param(&fx.predictor.w) } else { g.constant(&fx.predictor.w) };
    let out = match loss {
        Loss::Input => forge::input_loss_graph(&mut g, e, &fx.batch, &tb)?.0,
        Loss::Mask => {
            let rep = mask_rows(fx.student.embeddings(), &fx.positions)?;
            mask_loss_graph(&mut g, e, &fx.positions, &rep, &fx.batch.attention, &sb, w)?
        }
        Loss::Kl | Loss::Pt | Loss::Kd => {
            let v = kd_losses_graph(&mut g, e, &fx.batch.attention, &tb, &sb, ALPHA, TAU)?;
            match loss {
                Loss::Kl => v.kl,
                Loss::Pt => v.pt,
                _ => v.kd,
            }
        }
    };
    let value = g.scalar(out);
    if !grads {
        return Ok((value, vec![], vec![], vec![]));
    }
    g.backward(out)?;
    let ge = g.grad(e).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; b * s * d]);
    let gw = g.grad(w).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d * d]);
    let mut student = fx.student.clone();
    student.absorb_grads(&g, &sb)?;
    let gs = student
        .trainable_params_mut()
        .into_iter()
        .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, ge, gw, gs))
}

/// Checks every (loss, input) pair that carries a gradient in training.
pub fn check_model_gradients(seed: u64, settings: Settings) -> Result<Vec<GradCheck>> {
    let fx = fixture(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let free: Vec<usize> = fx.batch.frozen.iter().enumerate().filter(|(_, &f)| !f).map(|(r, _)| r).collect();
    let d = fx.batch.width();
    let e_coords: Vec<usize> = sample(&mut rng, free.len() * d, settings.per_tensor * 4)
        .into_iter()
        .map(|i| free[i / d] * d + i % d)
        .collect();
    let w_coords: Vec<usize> = sample(&mut rng, d * d, settings.per_tensor * 2).into_vec();
    let mut student = fx.student.clone();
    let sizes: Vec<usize> = student.trainable_params_mut().iter().map(|t| t.numel()).collect();
    let s_coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(p, &n)| sample(&mut rng, n, settings.per_tensor.min(n)).into_iter().map(move |k| (p, k)))
        .collect();

    let plan: [(Loss, &[Wrt]); 5] = [
        (Loss::Input, &[Wrt::Embeddings]),
        (Loss::Mask, &[Wrt::Embeddings, Wrt::Predictor, Wrt::Student]),
        (Loss::Kl, &[Wrt::Student]),
        (Loss::Pt, &[Wrt::Student]),
        (Loss::Kd, &[Wrt::Student]),
    ];
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(settings.floor);
    let mut out = Vec::new();
    for (loss, wrts) in plan {
        let (_, ge, gw, gs) = evaluate(&fx, loss, true)?;
        for &wrt in wrts {
            let mut worst = 0.0f64;
            let mut coords = 0;
            let numeric = |poke: &dyn Fn(&mut Fixture, f64)| -> Result<f64> {
                let mut up = fx.clone();
                poke(&mut up, settings.h);
                let mut down = fx.clone();
                poke(&mut down, -settings.h);
                Ok((evaluate(&up, loss, false)?.0 - evaluate(&down, loss, false)?.0) / (2.0 * settings.h))
            };
            match wrt {
                Wrt::Embeddings => {
                    for &k in &e_coords {
                        let n = numeric(&|f: &mut Fixture, h| f.batch.e.values_mut()[k] += h)?;
                        worst = worst.max(rel(ge[k], n));
                        coords += 1;
                    }
                }
                Wrt::Predictor => {
                    for &k in &w_coords {
                        let n = numeric(&|f: &mut Fixture, h| f.predictor.w.values_mut()[k] += h)?;
                        worst = worst.max(rel(gw[k], n));
                        coords += 1;
                    }
                }
                Wrt::Student => {
                    for &(p, k) in &s_coords {
                        let n = numeric(&|f: &mut Fixture, h| f.student.trainable_params_mut()[p].values_mut()[k] += h)?;
                        worst = worst.max(rel(gs[p][k], n));
                        coords += 1;
                    }
                }
            }
            out.push(GradCheck { loss, wrt, coords, max_rel_err: worst });
        }
    }
    Ok(out)
}
