//! Sequential vs rayon execution of the hot paths at desk scale.

use asdfd_core::distill::{distill_step, DistillConfig};
use asdfd_core::exec;
use asdfd_core::forge::{self, ForgeConfig};
use asdfd_core::model::{init_student_from_teacher, AttentionMask, MiniLm, ModelConfig, ModelOptimizer};
use asdfd_core::selfsup::MaskPredictor;
use asdfd_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn forward(c: &mut Criterion) {
    let teacher = MiniLm::<f32>::new(ModelConfig::desk_teacher(400, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let e = Tensor::<f32>::randn(&[16, 16, 64], 0.0, 0.35, &mut ChaCha8Rng::seed_from_u64(1));
    let mask = AttentionMask::all(16, 16);
    let mut group = c.benchmark_group("teacher_forward_b16_s16");
    for (name, on) in MODES {
        exec::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| teacher.forward_from_embeddings(&e, &mask).unwrap()));
    }
    group.finish();
}

fn distill_epoch(c: &mut Criterion) {
    let teacher = MiniLm::<f32>::new(ModelConfig::desk_teacher(400, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = ForgeConfig { n_iter: 1, n_t: 2, ..ForgeConfig::default() };
    let dc = DistillConfig::default();
    let mut group = c.benchmark_group("construct_and_step_b16");
    group.sample_size(10);
    for (name, on) in MODES {
        exec::set_parallel(on);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut student = init_student_from_teacher(&teacher, &[1, 4]).unwrap();
        let mut opt = ModelOptimizer::new(&mut student);
        let mut pred = MaskPredictor::new(64, dc.xi, &mut rng);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let batch = forge::construct(&cfg, &teacher, &student, &pred, 16, &mut rng).unwrap();
                distill_step(&batch.e, &batch.attention, batch.mask_positions.as_deref(), &teacher, &mut student, &mut opt, Some(&mut pred), &dc, 1e-4)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, distill_epoch);
criterion_main!(benches);
