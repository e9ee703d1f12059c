//! Last-layer `[CLS]` vectors of real and pseudo samples, for offline
//! visualization.

use std::path::Path;

use asdfd_core::corpus::{make_batch, DatasetSplit};
use asdfd_core::forge;
use asdfd_core::model::{init_student, MiniLm};
use asdfd_core::selfsup::MaskPredictor;
use asdfd_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audit;
use crate::config::RunConfig;
use crate::experiments::Session;

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenRow {
    pub synthetic: bool,
    pub label: usize,
    pub values: Vec<f64>,
}

/// `h_[CLS]` of the first `n` examples of `split` under `model`.
pub fn real_rows<F: Real>(model: &MiniLm<F>, split: &DatasetSplit, n: usize) -> anyhow::Result<Vec<HiddenRow>> {
    let max_len = model.config().max_len;
    let mut rows = Vec::new();
    for chunk in split.examples[..n.min(split.len())].chunks(64) {
        let refs: Vec<_> = chunk.iter().collect();
        let (tokens, mask) = make_batch(&refs, max_len)?;
        let h = model.forward_from_embeddings(&model.embed(&tokens)?, &mask)?.h_cls;
        for (ex, r) in chunk.iter().zip(h.values().chunks(model.config().hidden_dim)) {
            rows.push(HiddenRow { synthetic: false, label: ex.label, values: r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect() });
        }
    }
    Ok(rows)
}

/// `n` pseudo samples forged against the session teacher (student and
/// predictor freshly initialized from `cfg`), read out through `model`.
/// Labels are the construction targets.
pub fn synthetic_rows<F: Real>(model: &MiniLm<F>, session: &Session, cfg: &RunConfig, n: usize) -> anyhow::Result<Vec<HiddenRow>> {
    let teacher = session.teacher.model_as::<F>();
    let student = init_student(&teacher, &session.base.model_as::<F>(), &cfg.student_layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let predictor = MaskPredictor::new(student.config().hidden_dim, cfg.distill.xi, &mut rng);
    let mut rows = Vec::new();
    while rows.len() < n {
        let size = cfg.distill.batch.min(n - rows.len());
        let batch = forge::construct(&cfg.forge, &teacher, &student, &predictor, size, &mut rng)?;
        let h = model.forward_from_embeddings(&batch.e, &batch.attention)?.h_cls;
        for (&label, r) in batch.targets.iter().zip(h.values().chunks(model.config().hidden_dim)) {
            rows.push(HiddenRow { synthetic: true, label, values: r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect() });
        }
    }
    Ok(rows)
}

/// CSV with header `source,label,dim_0..dim_{d-1}`.
pub fn write_hidden_csv(path: &Path, width: usize, rows: &[HiddenRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(audit::create(path)?);
    let mut header = vec!["source".to_string(), "label".to_string()];
    header.extend((0..width).map(|i| format!("dim_{i}")));
    w.write_record(&header)?;
    for r in rows {
        anyhow::ensure!(r.values.len() == width, "row of width {} in a {width}-wide export", r.values.len());
        let mut rec = vec![if r.synthetic { "synthetic" } else { "real" }.to_string(), r.label.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
