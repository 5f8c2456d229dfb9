use super::*;
use crate::csfe::EncoderConfig;
use crate::model::Variant;
use crate::saicd::DecoderConfig;
use crate::synthstyle::{generate_dataset, DatasetConfig, ProbeConfig};

fn tiny_data() -> Dataset {
    generate_dataset(&DatasetConfig {
        n_contents: 4,
        n_styles: 3,
        unseen_styles: 0,
        content_dim: 3,
        obs_dim: 8,
        target_dim: 6,
        samples_per_cell: 10,
        seed: 21,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        optimizer: AdamWConfig { lr: 1e-2, ..AdamWConfig::default() },
        model: ModelConfig {
            encoder: EncoderConfig { d_model: 8, blocks: 1, heads: 2, style_dim: 3, ff_width: 8, tokens: 2, modulate_values: true },
            decoder: DecoderConfig { anchor_dim: 6, blocks: 1, heads: 2, ff_width: 8, lora_rank: 2, max_shots: 4, ..DecoderConfig::default() },
            probe: ProbeConfig { steps: 50, lr: 0.05 },
        },
        val_shots: 2,
        seed: 77,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_parameters_survive_training() {
    let data = tiny_data();
    let cfg = tiny_cfg(2);
    let before = Model::build(&cfg.model, cfg.ablation, &data, cfg.seed).unwrap();
    let out = train_run(&cfg, &data).unwrap();
    assert_eq!(before.registry.frozen_checksum(), out.checkpoint.frozen_checksum());
    let changed = before
        .registry
        .trainable_ids()
        .into_iter()
        .any(|id| !before.registry.value(id).bit_eq(out.checkpoint.model.registry.value(id)));
    assert!(changed);
}

#[test]
fn identical_configs_give_identical_logs_and_checkpoints() {
    let data = tiny_data();
    let cfg = tiny_cfg(2);
    let a = train_run(&cfg, &data).unwrap();
    let b = train_run(&cfg, &data).unwrap();
    assert_eq!(a.log.steps_csv().unwrap(), b.log.steps_csv().unwrap());
    assert_eq!(a.log.epochs_csv().unwrap(), b.log.epochs_csv().unwrap());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
}

#[test]
fn metrics_files_have_the_step_columns() {
    let data = tiny_data();
    let out = train_run(&tiny_cfg(1), &data).unwrap();
    let csv = String::from_utf8(out.log.steps_csv().unwrap()).unwrap();
    assert!(csv.starts_with("step,epoch,info_nce,semantic,cycle,total\n"));
    assert_eq!(csv.lines().count(), 1 + out.log.steps.len());
    let jsonl = String::from_utf8(out.log.steps_jsonl().unwrap()).unwrap();
    assert_eq!(jsonl.lines().count(), out.log.steps.len());
    let first: StepRecord = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first, out.log.steps[0]);
}

#[test]
fn without_consistency_terms_the_objective_is_info_nce_every_step() {
    let data = tiny_data();
    let cfg = TrainConfig { ablation: Variant::NoAscm.flags(), ..tiny_cfg(2) };
    let out = train_run(&cfg, &data).unwrap();
    for r in &out.log.steps {
        assert_eq!(r.total.to_bits(), r.info_nce.to_bits(), "step {}", r.step);
        assert!(r.semantic > 0.0 && r.cycle > 0.0);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical_and_preserves_outputs() {
    let data = tiny_data();
    let out = train_run(&tiny_cfg(1), &data).unwrap();
    let bytes = out.checkpoint.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back, out.checkpoint);

    let eps = validation_episodes(&data.val, 2, 5).unwrap();
    let a = out.checkpoint.model.icl_scores(&data.val, &eps).unwrap();
    let b = back.model.icl_scores(&data.val, &eps).unwrap();
    assert!(a.logits.bit_eq(&b.logits));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let data = tiny_data();
    let out = train_run(&tiny_cfg(1), &data).unwrap();
    let bytes = out.checkpoint.to_bytes().unwrap();

    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format(_))));

    assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::Format(_))));

    // first section's length prefix sits after magic, version, count and the name "config"
    let mut v = bytes.clone();
    let at = 4 + 4 + 4 + 4 + "config".len();
    v[at..at + 8].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Integrity(_))));

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Integrity(_))));

    let mut v = bytes.clone();
    let mid = v.len() / 2;
    v[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Integrity(_))));

    let missing = std::path::Path::new("/nonexistent/never/model.ckpt");
    assert!(matches!(load_checkpoint(missing), Err(Error::Dependency(_))));
}

#[test]
fn non_finite_loss_reports_term_and_step() {
    let data = tiny_data();
    let cfg = tiny_cfg(1);
    let mut model = Model::build(&cfg.model, cfg.ablation, &data, cfg.seed).unwrap();
    let id = model.registry.id("saicd.head.b").unwrap();
    model.registry.value_mut(id).data_mut()[0] = f64::NAN;
    let mut opt = new_optimizer(&cfg.optimizer, &model.registry);
    let rows = epoch_batches(&data.train, cfg.batch_size, cfg.seed, 1).unwrap();
    let batch = assemble_batch(&data, &rows[0], &cfg, 17).unwrap();
    match train_step(&mut model, &mut opt, &batch, &cfg.loss, 17, 1) {
        Err(Error::Numeric { term, step }) => {
            assert_eq!(term, "info_nce");
            assert_eq!(step, Some(17));
        }
        other => panic!("{:?}", other.map(|r| r.total)),
    }
}

#[test]
fn batches_always_hold_a_cross_style_pair() {
    let data = tiny_data();
    for epoch in 1..20 {
        for b in epoch_batches(&data.train, 3, 9, epoch).unwrap() {
            assert!(has_semantic_pair(&data.train, &b));
            let mut u = b.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), b.len());
        }
    }
}

#[test]
fn batch_assembly_respects_fraction_and_styles() {
    let data = tiny_data();
    let cfg = tiny_cfg(1);
    let rows = epoch_batches(&data.train, cfg.batch_size, cfg.seed, 1).unwrap();
    let b = assemble_batch(&data, &rows[0], &cfg, 1).unwrap();
    assert_eq!(b.transfers.len(), 8);
    for (i, t) in &b.transfers {
        assert_eq!(t.content_id, b.samples[*i].content_id);
        assert_ne!(t.style_id, b.samples[*i].style_id);
    }
    for e in &b.episodes {
        assert!(e.context.iter().all(|(r, _)| b.samples[*r].style_id != b.samples[e.target].style_id));
    }
    assert_eq!(assemble_batch(&data, &rows[0], &cfg, 1).unwrap(), b);
}

#[test]
fn invalid_configs_list_every_problem() {
    let cfg = TrainConfig { batch_size: 1, epochs: 0, val_shots: 99, ..TrainConfig::default() };
    match cfg.check() {
        Err(Error::Config(bad)) => {
            assert_eq!(bad.len(), 3, "{bad:?}");
            assert!(bad.iter().any(|m| m.contains("batch_size")));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn loss_falls_over_training() {
    let data = tiny_data();
    let out = train_run(&tiny_cfg(8), &data).unwrap();
    let e = &out.log.epochs;
    assert!(e.last().unwrap().total < e[0].total, "{:?}", e.iter().map(|r| r.total).collect::<Vec<_>>());
}
