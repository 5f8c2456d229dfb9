use super::*;
use crate::csfe::EncoderConfig;
use crate::diffcore::AdamWConfig;
use crate::model::{AblationFlags, ModelConfig};
use crate::saicd::DecoderConfig;
use crate::synthstyle::{generate_dataset, DatasetConfig, ProbeConfig};

fn default_data() -> Dataset {
    generate_dataset(&DatasetConfig { seed: 5, ..DatasetConfig::default() }).unwrap()
}

fn tiny_data() -> Dataset {
    generate_dataset(&DatasetConfig {
        n_contents: 4,
        n_styles: 3,
        content_dim: 3,
        obs_dim: 8,
        target_dim: 6,
        samples_per_cell: 10,
        unseen_styles: 1,
        seed: 21,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 1,
        optimizer: AdamWConfig { lr: 1e-2, ..AdamWConfig::default() },
        model: ModelConfig {
            encoder: EncoderConfig { d_model: 8, blocks: 1, heads: 2, style_dim: 3, ff_width: 8, tokens: 2, modulate_values: true },
            decoder: DecoderConfig { anchor_dim: 6, blocks: 1, heads: 2, ff_width: 8, lora_rank: 2, max_shots: 4, ..DecoderConfig::default() },
            probe: ProbeConfig { steps: 50, lr: 0.05 },
        },
        val_shots: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn tiny_eval() -> EvalConfig {
    EvalConfig { n_pairs: 100, shots: vec![1, 2, 4], trials: 50, table_shots: 2, ablation_seeds: 3, workers: 1 }
}

#[test]
fn content_oracle_is_perfectly_style_free() {
    let data = default_data();
    let d = disentanglement_report(&ContentOracle, &data.test, 1000, 1).unwrap();
    assert_eq!(d.sim_same_content_diff_style, 1.0);
    assert_eq!(d.gap, d.sim_same_content_diff_style - d.sim_diff_content_same_style);
}

#[test]
fn raw_observations_are_less_disentangled_than_the_oracle() {
    let data = default_data();
    let oracle = disentanglement_report(&ContentOracle, &data.test, 1000, 2).unwrap();
    let obs = disentanglement_report(&ObservationEncoder, &data.test, 1000, 2).unwrap();
    assert!(obs.gap < oracle.gap, "{} vs {}", obs.gap, oracle.gap);
}

#[test]
fn random_encoder_gap_is_near_zero() {
    let data = default_data();
    for seed in 0..5 {
        let d = disentanglement_report(&RandomEncoder { dim: 64, seed }, &data.test, 1000, seed).unwrap();
        assert!(d.gap.abs() <= 0.05, "seed {seed}: {}", d.gap);
    }
}

#[test]
fn gap_flips_sign_when_populations_swap() {
    let d = Disentanglement::from_sims(0.8, 0.3);
    assert_eq!(d.swapped().gap, -d.gap);
    assert_eq!(d.swapped().swapped(), d);
}

#[test]
fn disentanglement_preconditions() {
    let data = tiny_data();
    assert!(matches!(disentanglement_report(&ObservationEncoder, &data.test, 99, 0), Err(Error::Domain(_))));
    let one_style: Vec<Sample> = data.test.iter().filter(|s| s.style_id == 0).cloned().collect();
    assert!(matches!(disentanglement_report(&ObservationEncoder, &one_style, 100, 0), Err(Error::Domain(_))));
    let a = disentanglement_report(&ObservationEncoder, &data.test, 200, 4).unwrap();
    let b = disentanglement_report(&ObservationEncoder, &data.test, 200, 4).unwrap();
    assert_eq!(a.gap.to_bits(), b.gap.to_bits());
}

#[test]
fn shot_curve_has_one_entry_per_shot_count() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let model = Model::build(&cfg.model, AblationFlags::default(), &data, 1).unwrap();
    let curve = fewshot_icl_eval(&model, &data, &[1, 2, 4], 30, 9).unwrap();
    assert_eq!(curve.iter().map(|p| p.shots).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert!(curve.iter().all(|p| (0.0..=1.0).contains(&p.accuracy)));
    assert_eq!(curve, fewshot_icl_eval(&model, &data, &[1, 2, 4], 30, 9).unwrap());
    let others = data.test.len() - data.test.iter().filter(|s| s.style_id == 0).count();
    assert!(matches!(fewshot_icl_eval(&model, &data, &[others + 1], 5, 0), Err(Error::Domain(_))));
    assert!(matches!(fewshot_icl_eval(&model, &data, &[], 5, 0), Err(Error::Domain(_))));
}

#[test]
fn untrained_model_is_at_chance() {
    let data = default_data();
    let model = Model::build(&ModelConfig::default(), AblationFlags::default(), &data, 8).unwrap();
    let trials = 2000;
    let curve = fewshot_icl_eval(&model, &data, &[4], trials, 3).unwrap();
    let p = 1.0 / data.config.n_contents as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    assert!((curve[0].accuracy - p).abs() <= 3.0 * sigma, "accuracy {} vs chance {p} (3 sigma = {})", curve[0].accuracy, 3.0 * sigma);
}

#[test]
fn style_table_average_is_the_row_mean() {
    let data = tiny_data();
    let model = Model::build(&tiny_cfg().model, AblationFlags::default(), &data, 2).unwrap();
    let t = cross_style_report(&model, &data, 2, 0).unwrap();
    assert_eq!(t.rows.len(), 3);
    let names: Vec<&str> = t.rows.iter().map(|r| r.style.as_str()).collect();
    assert_eq!(names, ["Photorealistic", "Cartoon/Comic", "Sketch/Line Art"]);
    let acc: f64 = t.rows.iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
    let sim: f64 = t.rows.iter().map(|r| r.similarity).sum::<f64>() / 3.0;
    assert_eq!(t.average.accuracy, acc);
    assert_eq!(t.average.similarity, sim);
    assert_eq!(t.average.style, "Average");

    let mut missing = tiny_data();
    missing.test.retain(|s| s.style_id != 2);
    assert!(matches!(cross_style_report(&model, &missing, 2, 0), Err(Error::Domain(_))));
}

#[test]
fn ablation_table_has_one_row_per_variant() {
    let data = tiny_data();
    let out = ablation_suite(&tiny_cfg(), &data, &[1, 2, 3], &tiny_eval()).unwrap();
    let ids: Vec<&str> = out.table.rows.iter().map(|r| r.variant.id()).collect();
    assert_eq!(ids, ["full", "no_csfe", "no_saicd", "no_ascm", "no_semantic", "no_cycle"]);
    assert_eq!(out.table.runs.len(), 18);
    for (v, _, log) in &out.logs {
        if *v == Variant::NoAscm {
            assert!(log.steps.iter().all(|r| r.total.to_bits() == r.info_nce.to_bits()));
        }
    }
    let full = out.table.runs.iter().filter(|r| r.variant == Variant::Full).map(|r| r.val_accuracy).collect::<Vec<_>>();
    assert_eq!(out.table.rows[0].val_accuracy, median(&full));
    assert!(matches!(ablation_suite(&tiny_cfg(), &data, &[1, 2], &tiny_eval()), Err(Error::Domain(_))));
}

#[test]
fn parallel_and_serial_suites_agree() {
    let data = tiny_data();
    let serial = ablation_suite(&tiny_cfg(), &data, &[4, 5, 6], &tiny_eval()).unwrap();
    let par = ablation_suite(&tiny_cfg(), &data, &[4, 5, 6], &EvalConfig { workers: 3, ..tiny_eval() }).unwrap();
    assert_eq!(serial.table, par.table);
}

#[test]
fn failing_run_names_variant_and_seed() {
    let data = tiny_data();
    let mut cfg = tiny_cfg();
    cfg.val_shots = 50;
    cfg.model.decoder.max_shots = 50;
    match ablation_suite(&cfg, &data, &[7, 8, 9], &tiny_eval()) {
        Err(Error::Run { variant, seed, .. }) => {
            assert_eq!(variant, "full");
            assert_eq!(seed, 7);
        }
        other => panic!("{:?}", other.map(|o| o.table)),
    }
}

#[test]
fn median_and_completeness() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    let r = EvalReport::new(String::new(), 0);
    assert!(matches!(r.check_complete(), Err(Error::Schema(s)) if s == "disentanglement"));
    assert_eq!(r.orientation["gap"], "higher_is_better");
}
