use std::io::Cursor;

use asdfd_core::corpus::{build_vocab, encode_text, Vocab};
use asdfd_core::distill::{kd_components, kd_loss};
use asdfd_core::exec;
use asdfd_core::forge::{self, sample_targets, ForgeConfig, TargetPolicy};
use asdfd_core::functional::{kl_divergence, normalized_sqdist, softmax};
use asdfd_core::model::{init_student_from_teacher, AttentionMask, MiniLm, ModelConfig, CLS, PAD, SEP};
use asdfd_core::selfsup::{apply_mask, choose_mask_positions, mask_loss, MaskPredictor};
use asdfd_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize, seed: u64) -> MiniLm<f64> {
    let cfg = ModelConfig { num_layers: layers, hidden_dim: 8, num_heads: 2, ff_dim: 16, vocab_size: 14, max_len: 9, num_classes: 3 };
    MiniLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn rows(cols: usize) -> impl Strategy<Value = Vec<f64>> {
    (1usize..5).prop_flat_map(move |r| prop::collection::vec(-20.0f64..20.0, r * cols))
}

fn nonzero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in rows(4), tau in 0.1f64..5.0) {
        let t = Tensor::new(&[v.len() / 4, 4], v).unwrap();
        let p = softmax(&t, tau).unwrap();
        for r in p.values().chunks(4) {
            prop_assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(a in rows(3), noise in prop::collection::vec(-3.0f64..3.0, 12), tau in 0.2f64..4.0, shift in -10.0f64..10.0) {
        let n = a.len() / 3;
        let t = Tensor::new(&[n, 3], a.clone()).unwrap();
        let s = Tensor::new(&[n, 3], a.iter().zip(noise.iter().cycle()).map(|(x, e)| x + e).collect()).unwrap();
        prop_assert!(kl_divergence(&t, &s, tau).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&t, &t, tau).unwrap(), 0.0);
        // shifting a row leaves the distribution, hence KL, unchanged
        let shifted = Tensor::new(&[n, 3], a.iter().map(|x| x + shift).collect()).unwrap();
        prop_assert!(kl_divergence(&t, &shifted, tau).unwrap() < 1e-9);
    }

    #[test]
    fn sqdist_bounded_and_scale_invariant(a in nonzero(6), b in nonzero(6), ka in 0.01f64..100.0, kb in 0.01f64..100.0) {
        let d = normalized_sqdist(&a, &b).unwrap();
        prop_assert!((-1e-12..=4.0 + 1e-12).contains(&d));
        let sa: Vec<f64> = a.iter().map(|x| x * ka).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * kb).collect();
        prop_assert!((normalized_sqdist(&sa, &sb).unwrap() - d).abs() < 1e-9);
        prop_assert!(normalized_sqdist(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn encode_text_is_length_safe(words in prop::collection::vec("[a-e]{1,3}", 0..30), max_len in 3usize..16) {
        let text = words.join(" ");
        let vocab = build_vocab(["a b c aa bb"], 12).unwrap();
        let (ids, mask) = encode_text(&text, &vocab, max_len).unwrap();
        prop_assert_eq!(ids.len(), max_len);
        prop_assert_eq!(mask.len(), max_len);
        let len = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(len, (words.len() + 2).min(max_len));
        prop_assert_eq!(ids[0], CLS);
        prop_assert_eq!(ids[len - 1], SEP);
        prop_assert!(ids[len..].iter().all(|&t| t == PAD));
        prop_assert!(mask[..len].iter().all(|&m| m));
    }

    #[test]
    fn vocab_round_trips(words in prop::collection::vec("[a-z]{1,6}", 1..60), cap in 6usize..40) {
        let text = words.join(" ");
        let v = build_vocab([text.as_str()], cap).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let back = Vocab::read_from(Cursor::new(buf)).unwrap();
        prop_assert_eq!(back.tokens(), v.tokens());
        prop_assert!(v.len() <= cap);
    }

    #[test]
    fn balanced_targets_cover_classes(batch in 1usize..64, classes in 2usize..9, seed in any::<u64>()) {
        let t = sample_targets(TargetPolicy::Balanced, batch, classes, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut counts = vec![0usize; classes];
        for &c in &t {
            counts[c] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn mask_positions_in_content_range(lengths in prop::collection::vec(3usize..20, 1..10), seed in any::<u64>()) {
        let p = choose_mask_positions(&lengths, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (&pos, &len) in p.iter().zip(&lengths) {
            prop_assert!(pos >= 1 && pos <= len - 2);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kd_loss_is_affine_in_alpha(seed in 0u64..1000, a in 0.0f64..500.0, b in 0.0f64..500.0) {
        let t = tiny(2, seed);
        let s = init_student_from_teacher(&t, &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let e = Tensor::<f64>::randn(&[3, 6, 8], 0.0, 1.0, &mut rng);
        let mask = AttentionMask::from_lengths(&[6, 4, 5], 6).unwrap();
        let (kl, pt) = kd_components(&e, &mask, &t, &s, 1.0).unwrap();
        for alpha in [a, b] {
            let kd = kd_loss(&e, &mask, &t, &s, alpha, 1.0).unwrap();
            prop_assert!((kd - (kl + alpha * pt)).abs() <= 1e-9 * (1.0 + kd.abs()));
        }
        prop_assert!((0.0..=4.0).contains(&pt) && kl >= 0.0);
    }

    #[test]
    fn identical_student_has_zero_kd(seed in 0u64..1000, tau in 0.5f64..3.0) {
        let t = tiny(2, seed);
        let s = init_student_from_teacher(&t, &[1, 2]).unwrap();
        let e = Tensor::<f64>::randn(&[2, 5, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let (kl, pt) = kd_components(&e, &AttentionMask::all(2, 5), &t, &s, tau).unwrap();
        prop_assert!(kl.abs() < 1e-12 && pt.abs() < 1e-12);
    }

    #[test]
    fn mask_loss_bounded_and_w_scale_invariant(seed in 0u64..1000, k in 0.01f64..50.0) {
        let m = tiny(1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Tensor::<f64>::randn(&[2, 6, 8], 0.0, 1.0, &mut rng);
        let attn = AttentionMask::from_lengths(&[6, 5], 6).unwrap();
        let pos = choose_mask_positions(&attn.lengths(), &mut rng).unwrap();
        let view = apply_mask(&e, &pos, &attn, m.embeddings()).unwrap();
        let p = MaskPredictor::<f64>::new(8, 1e-3, &mut rng);
        let l = mask_loss(&view, &m, &p).unwrap();
        prop_assert!((0.0..=4.0).contains(&l));
        let mut q = p.clone();
        q.w.values_mut().iter_mut().for_each(|v| *v *= k);
        prop_assert!((mask_loss(&view, &m, &q).unwrap() - l).abs() < 1e-10);
    }

    #[test]
    fn construction_never_moves_frozen_rows(seed in 0u64..1000, cls_sep in any::<bool>(), variable in any::<bool>()) {
        let t = tiny(2, seed);
        let s = init_student_from_teacher(&t, &[1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MaskPredictor::<f64>::new(8, 1e-3, &mut rng);
        let cfg = ForgeConfig { n_iter: 2, n_t: 2, n_s: 1, l_min: 4, l_max: Some(8), cls_sep, variable_length: variable, ..ForgeConfig::default() };
        let mut batch = forge::init_batch(&cfg, &t, 4, &mut rng).unwrap();
        forge::apply_alignment(&cfg, &mut batch, t.embeddings()).unwrap();
        let before = batch.frozen_checksum();
        let frozen = batch.frozen.clone();
        let e0 = batch.e.clone();
        forge::refine(&cfg, &mut batch, &t, &s, &p, &mut rng).unwrap();
        prop_assert_eq!(batch.frozen_checksum(), before);
        let d = batch.width();
        for (r, &f) in frozen.iter().enumerate() {
            if f {
                prop_assert_eq!(&batch.e.values()[r * d..(r + 1) * d], &e0.values()[r * d..(r + 1) * d]);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree(seed in 0u64..1000) {
        let t = tiny(2, seed);
        let e = Tensor::<f64>::randn(&[5, 7, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mask = AttentionMask::from_lengths(&[7, 3, 5, 6, 4], 7).unwrap();
        exec::set_parallel(false);
        let a = t.forward_from_embeddings(&e, &mask).unwrap();
        exec::set_parallel(true);
        let b = t.forward_from_embeddings(&e, &mask).unwrap();
        prop_assert_eq!(a.logits.values(), b.logits.values());
        prop_assert_eq!(a.h_all.values(), b.h_all.values());
    }
}
