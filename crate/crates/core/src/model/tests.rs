use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::check_registry;
use crate::synthstyle::{generate_dataset, DatasetConfig};

fn tiny_data(seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        n_contents: 3,
        n_styles: 3,
        unseen_styles: 0,
        content_dim: 2,
        obs_dim: 6,
        target_dim: 4,
        samples_per_cell: 5,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { d_model: 8, blocks: 1, heads: 2, style_dim: 3, ff_width: 8, tokens: 2, modulate_values: true },
        decoder: DecoderConfig { anchor_dim: 4, blocks: 1, heads: 2, ff_width: 8, lora_rank: 2, max_shots: 2, ..DecoderConfig::default() },
        probe: ProbeConfig { steps: 60, lr: 0.05 },
    }
}

fn randomize_trainable(m: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in m.registry.trainable_ids() {
        let shape = m.registry.value(id).shape().to_vec();
        let noise = Tensor::randn(&shape, 0.3, &mut rng);
        for (v, n) in m.registry.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// Six training samples covering every content, two styles each, with
/// one-shot other-style contexts and two restyled copies.
fn tiny_batch(data: &Dataset, seed: u64) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for c in 0..3 {
        for s in [c % 3, (c + 1) % 3] {
            samples.push(data.train.iter().find(|x| x.content_id == c && x.style_id == s).unwrap().clone());
        }
    }
    let episodes = (0..samples.len())
        .map(|i| {
            let ctx = draw_context(&samples, i, 1, &mut rng).unwrap();
            episode(&samples, &ctx, i)
        })
        .collect();
    let transfers = [0usize, 3]
        .iter()
        .map(|&i| {
            let to = (samples[i].style_id + 2) % 3;
            (i, data.apply_style_transfer(&samples[i], to, seed).unwrap())
        })
        .collect();
    TrainingBatch { samples, transfers, episodes }
}

#[test]
fn default_counts_match_closed_form_and_stay_under_a_quarter() {
    let data = generate_dataset(&DatasetConfig { samples_per_cell: 5, ..DatasetConfig::default() }).unwrap();
    for v in Variant::ALL {
        let m = Model::build(&ModelConfig::default(), v.flags(), &data, 1).unwrap();
        assert_eq!(m.registry.trainable_count(), m.closed_form_trainable_count(), "{}", v.id());
    }
    let m = Model::build(&ModelConfig::default(), AblationFlags::default(), &data, 1).unwrap();
    assert_eq!(m.registry.trainable_count(), 23_696);
    let ratio = m.registry.trainable_count() as f64 / m.registry.frozen_count() as f64;
    assert!(ratio < 0.25, "{ratio}");
}

#[test]
fn variants_round_trip_their_ids() {
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.id()).unwrap(), v);
    }
    assert!(Variant::parse("full_model").is_err());
    let w = LossWeights::default();
    let off = Variant::NoAscm.flags().weights(&w);
    assert_eq!((off.alpha, off.beta), (0.0, 0.0));
    assert_eq!(Variant::NoSemantic.flags().weights(&w).beta, w.beta);
}

#[test]
fn objective_without_consistency_terms_is_the_nce_node() {
    let data = tiny_data(2);
    let m = Model::build(&tiny_cfg(), Variant::NoAscm.flags(), &data, 3).unwrap();
    let w = m.flags.weights(&LossWeights::default());
    let batch = tiny_batch(&data, 4);
    let mut s = Session::new(&m.registry, true);
    let o = m.objective(&mut s, &batch, &w).unwrap();
    assert_eq!(o.total, o.info_nce);
    assert!(o.semantic.is_some() && o.cycle.is_some());
}

#[test]
fn every_trainable_gets_a_gradient_and_no_frozen_one_does() {
    let data = tiny_data(5);
    let m = Model::build(&tiny_cfg(), AblationFlags::default(), &data, 6).unwrap();
    let batch = tiny_batch(&data, 7);
    let mut s = Session::new(&m.registry, true);
    let o = m.objective(&mut s, &batch, &LossWeights::default()).unwrap();
    s.graph.backward(o.total).unwrap();
    for (id, p) in m.registry.iter() {
        let grad = s.bound(id).and_then(|v| s.graph.grad(v));
        if p.trainable {
            let g = grad.unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(g.is_finite());
        } else {
            assert!(grad.is_none(), "{} is frozen but has a gradient", p.name);
        }
    }
}

#[test]
fn end_to_end_objective_passes_finite_differences() {
    let data = tiny_data(8);
    let batch = tiny_batch(&data, 9);
    for seed in 0..10u64 {
        let mut m = Model::build(&tiny_cfg(), AblationFlags::default(), &data, seed).unwrap();
        randomize_trainable(&mut m, seed);
        let w = LossWeights { alpha: 1.0, beta: 1.0, ..LossWeights::default() };
        let ids = m.registry.trainable_ids();
        let r = check_registry(&m.registry, &ids, 1e-5, Some(2), seed, |s| Ok(m.objective(s, &batch, &w)?.total)).unwrap();
        assert!(r.max_rel_err <= 1e-4, "seed {seed}: {}", r.worst);
    }
}

#[test]
fn icl_prediction_is_a_distribution_over_classes() {
    let data = tiny_data(10);
    let m = Model::build(&tiny_cfg(), AblationFlags::default(), &data, 11).unwrap();
    let ctx = vec![(data.train[0].clone(), data.train[0].content_id), (data.train[7].clone(), data.train[7].content_id)];
    let p = m.icl_predict(&ctx, &data.test[3]).unwrap();
    assert_eq!(p.len(), 3);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.iter().all(|x| *x > 0.0));
}

#[test]
fn context_draw_excludes_target_style_and_rejects_oversized_requests() {
    let data = tiny_data(12);
    let pool = &data.val;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = draw_context(pool, 0, 4, &mut rng).unwrap();
    assert_eq!(ctx.len(), 4);
    assert!(ctx.iter().all(|&i| pool[i].style_id != pool[0].style_id));
    let others = pool.iter().filter(|x| x.style_id != pool[0].style_id).count();
    assert!(matches!(draw_context(pool, 0, others + 1, &mut rng), Err(Error::Domain(_))));
}

#[test]
fn batch_of_one_is_rejected() {
    let data = tiny_data(13);
    let m = Model::build(&tiny_cfg(), AblationFlags::default(), &data, 0).unwrap();
    let mut batch = tiny_batch(&data, 0);
    batch.samples.truncate(1);
    batch.episodes.truncate(1);
    batch.transfers.clear();
    let mut s = Session::new(&m.registry, true);
    assert!(matches!(m.objective(&mut s, &batch, &LossWeights::default()), Err(Error::Contract(_))));
}

#[test]
fn semantic_term_can_use_anchor_features_and_the_literal_denominator() {
    let data = tiny_data(14);
    let batch = tiny_batch(&data, 15);
    let mut m = Model::build(&tiny_cfg(), AblationFlags::default(), &data, 16).unwrap();
    randomize_trainable(&mut m, 16);
    let value = |w: &LossWeights| {
        let mut s = Session::new(&m.registry, false);
        let o = m.objective(&mut s, &batch, w).unwrap();
        s.graph.value(o.semantic.unwrap()).item()
    };
    let enc = LossWeights::default();
    let anchor = LossWeights { semantic_space: SemanticSpace::Anchor, ..LossWeights::default() };
    let literal = LossWeights { semantic_includes_positive: false, ..LossWeights::default() };
    assert_ne!(value(&enc), value(&anchor));
    assert!(value(&literal) < value(&enc));
    let w = LossWeights { alpha: 1.0, beta: 1.0, ..anchor };
    let ids = m.registry.trainable_ids();
    let r = check_registry(&m.registry, &ids, 1e-5, Some(2), 17, |s| Ok(m.objective(s, &batch, &w)?.total)).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{}", r.worst);
}
