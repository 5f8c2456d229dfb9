//! Disentanglement gap, shot sweep, ablation matrix and per-style report.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{cosine, pairwise_sum, Tensor};
use crate::error::{Error, Result};
use crate::model::{draw_context, episode, Model, Variant};
use crate::saicd::Episode;
use crate::seed::{derive_seed, stream};
use crate::synthstyle::{Dataset, Sample};
use crate::trainkit::{icl_accuracy, train_run, validation_episodes, MetricsLog, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Anything that maps samples to one feature row each.
pub trait FeatureEncoder {
    fn name(&self) -> &str;
    fn encode(&self, samples: &[Sample]) -> Result<Tensor>;
}

impl FeatureEncoder for Model {
    fn name(&self) -> &str {
        "trained"
    }

    /// Pooled encoder features.
    fn encode(&self, samples: &[Sample]) -> Result<Tensor> {
        self.features(samples)
    }
}

/// Returns the ground-truth content latent, which carries no style at all.
pub struct ContentOracle;

impl FeatureEncoder for ContentOracle {
    fn name(&self) -> &str {
        "content_oracle"
    }

    fn encode(&self, samples: &[Sample]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.content_latent.clone()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Raw observations.
pub struct ObservationEncoder;

impl FeatureEncoder for ObservationEncoder {
    fn name(&self) -> &str {
        "observation"
    }

    fn encode(&self, samples: &[Sample]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.observation.clone()).collect();
        Tensor::from_rows(&rows)
    }
}

/// A fixed Gaussian vector per sample id, ignoring the observation.
pub struct RandomEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl FeatureEncoder for RandomEncoder {
    fn name(&self) -> &str {
        "random"
    }

    fn encode(&self, samples: &[Sample]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| Tensor::randn(&[self.dim], 1.0, &mut stream(self.seed, &format!("random-encoder/{}", s.uid))).into_data())
            .collect();
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    /// Mean cosine over same-content, different-style pairs.
    pub sim_same_content_diff_style: f64,
    /// Mean cosine over different-content, same-style pairs.
    pub sim_diff_content_same_style: f64,
    pub gap: f64,
}

impl Disentanglement {
    pub fn from_sims(scd: f64, dcs: f64) -> Self {
        Self { sim_same_content_diff_style: scd, sim_diff_content_same_style: dcs, gap: scd - dcs }
    }

    /// The same numbers with the two pair populations swapped.
    pub fn swapped(&self) -> Self {
        Self::from_sims(self.sim_diff_content_same_style, self.sim_same_content_diff_style)
    }
}

fn pair_cosine(f: &Tensor, i: usize, j: usize) -> Result<f64> {
    let (a, b) = (f.row(i), f.row(j));
    if a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.iter().any(|x| *x != 0.0) {
        return Ok(1.0);
    }
    cosine(a, b).ok_or_else(|| Error::Domain(format!("zero-norm feature in pair ({i}, {j})")))
}

/// Mean cosine over `n_pairs` random pairs satisfying `keep`, drawn by picking
/// a first sample uniformly among those with at least one partner, then a
/// partner uniformly.
fn mean_pair_similarity<R: Rng>(
    f: &Tensor,
    samples: &[Sample],
    n_pairs: usize,
    rng: &mut R,
    keep: impl Fn(&Sample, &Sample) -> bool,
    what: &str,
) -> Result<f64> {
    let partners: Vec<Vec<usize>> =
        (0..samples.len()).map(|i| (0..samples.len()).filter(|&j| j != i && keep(&samples[i], &samples[j])).collect()).collect();
    let firsts: Vec<usize> = (0..samples.len()).filter(|&i| !partners[i].is_empty()).collect();
    if firsts.is_empty() {
        return Err(Error::Domain(format!("no {what} pairs in the evaluated samples")));
    }
    let mut sims = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = firsts[rng.random_range(0..firsts.len())];
        let j = partners[i][rng.random_range(0..partners[i].len())];
        sims.push(pair_cosine(f, i, j)?);
    }
    Ok(pairwise_sum(&sims) / sims.len() as f64)
}

/// Disentanglement gap of `encoder` over `samples` with `n_pairs` of each pair type.
pub fn disentanglement_report(encoder: &dyn FeatureEncoder, samples: &[Sample], n_pairs: usize, seed: u64) -> Result<Disentanglement> {
    if n_pairs < 100 {
        return Err(Error::Domain(format!("n_pairs must be at least 100 (got {n_pairs})")));
    }
    let styles: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.style_id).collect();
    let contents: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.content_id).collect();
    if styles.len() < 2 || contents.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 styles and 2 contents (got {} and {})", styles.len(), contents.len())));
    }
    let f = encoder.encode(samples)?;
    let mut rng = stream(seed, "disentanglement");
    let scd = mean_pair_similarity(&f, samples, n_pairs, &mut rng, |a, b| a.content_id == b.content_id && a.style_id != b.style_id, "same-content/different-style")?;
    let dcs = mean_pair_similarity(&f, samples, n_pairs, &mut rng, |a, b| a.content_id != b.content_id && a.style_id == b.style_id, "different-content/same-style")?;
    Ok(Disentanglement::from_sims(scd, dcs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotPoint {
    pub shots: usize,
    pub accuracy: f64,
    pub similarity: f64,
}

/// Accuracy and target similarity per context size over `trials` episodes
/// on the test split. Each trial draws one target and the largest context
/// once; smaller shot counts use its prefix, so curves compare like with like.
pub fn fewshot_icl_eval(model: &Model, data: &Dataset, shots: &[usize], trials: usize, seed: u64) -> Result<Vec<ShotPoint>> {
    let pool = &data.test;
    let max = *shots.iter().max().ok_or_else(|| Error::Domain("shot list is empty".into()))?;
    if shots.contains(&0) {
        return Err(Error::Domain("shot counts must be positive".into()));
    }
    if trials == 0 {
        return Err(Error::Domain("trials must be positive".into()));
    }
    if pool.is_empty() {
        return Err(Error::Domain("test split is empty".into()));
    }
    let mut rng = stream(seed, "fewshot");
    let mut draws = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = rng.random_range(0..pool.len());
        draws.push((t, draw_context(pool, t, max, &mut rng)?));
    }
    shots
        .iter()
        .map(|&k| {
            let eps: Vec<Episode> = draws.iter().map(|(t, ctx)| episode(pool, &ctx[..k], *t)).collect();
            let (accuracy, similarity) = icl_accuracy(model, pool, &eps)?;
            Ok(ShotPoint { shots: k, accuracy, similarity })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRow {
    pub style: String,
    pub accuracy: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTable {
    pub rows: Vec<StyleRow>,
    pub average: StyleRow,
}

/// Per-style accuracy and similarity on the test split: every test sample is
/// a target once, with `shots` context samples from other styles.
pub fn cross_style_report(model: &Model, data: &Dataset, shots: usize, seed: u64) -> Result<StyleTable> {
    let pool = &data.test;
    let n = data.config.n_styles;
    for s in 0..n {
        if !pool.iter().any(|x| x.style_id == s) {
            return Err(Error::Domain(format!("style `{}` is absent from the test split", data.style_name(s))));
        }
    }
    let eps = validation_episodes(pool, shots, derive_seed(seed, "style-table"))?;
    let sc = model.icl_scores(pool, &eps)?;
    let mut hits = vec![0usize; n];
    let mut count = vec![0usize; n];
    let mut sims = vec![Vec::new(); n];
    for ((e, p), sim) in eps.iter().zip(&sc.predictions).zip(&sc.similarities) {
        let t = &pool[e.target];
        count[t.style_id] += 1;
        hits[t.style_id] += (t.content_id == *p) as usize;
        sims[t.style_id].push(*sim);
    }
    let rows: Vec<StyleRow> = (0..n)
        .map(|s| StyleRow {
            style: data.style_name(s),
            accuracy: hits[s] as f64 / count[s] as f64,
            similarity: sims[s].iter().sum::<f64>() / count[s] as f64,
        })
        .collect();
    let average = StyleRow {
        style: "Average".into(),
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n as f64,
        similarity: rows.iter().map(|r| r.similarity).sum::<f64>() / n as f64,
    };
    Ok(StyleTable { rows, average })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: Variant,
    pub seed: u64,
    pub val_accuracy: f64,
    pub val_similarity: f64,
    pub test_accuracy: f64,
    pub test_similarity: f64,
    pub gap: f64,
    pub trainable_params: usize,
    /// Test-split accuracy per context size, for `EvalConfig::shots`.
    pub shot_curve: Vec<ShotPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub similarity: f64,
    pub gap: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Medians over seeds, one row per variant in canonical order.
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunMetrics>,
}

pub struct AblationOutcome {
    pub table: AblationTable,
    pub logs: Vec<(Variant, u64, MetricsLog)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub shots: Vec<usize>,
    pub trials: usize,
    /// Context size for the per-style table and the ablation test metrics.
    pub table_shots: usize,
    pub ablation_seeds: usize,
    /// Worker threads for independent ablation runs; 0 means one per core.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_pairs: 1000, shots: vec![1, 2, 4, 8], trials: 1000, table_shots: 4, ablation_seeds: 3, workers: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self, max_shots: usize, bad: &mut Vec<String>) {
        if self.n_pairs < 100 {
            bad.push(format!("eval.n_pairs must be >= 100 (got {})", self.n_pairs));
        }
        if self.shots.is_empty() {
            bad.push("eval.shots must list at least one shot count".into());
        }
        if let Some(k) = self.shots.iter().find(|&&k| k == 0 || k > max_shots) {
            bad.push(format!("eval.shots entries must lie in 1..={max_shots} (got {k})"));
        }
        if self.trials == 0 {
            bad.push("eval.trials must be positive".into());
        }
        if self.table_shots == 0 || self.table_shots > max_shots {
            bad.push(format!("eval.table_shots must lie in 1..={max_shots} (got {})", self.table_shots));
        }
        if self.ablation_seeds < 3 {
            bad.push(format!("eval.ablation_seeds must be >= 3 (got {})", self.ablation_seeds));
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains one variant with one seed and measures it.
pub fn run_variant(base: &TrainConfig, data: &Dataset, variant: Variant, seed: u64, eval: &EvalConfig) -> Result<(RunMetrics, MetricsLog)> {
    let cfg = TrainConfig { ablation: variant.flags(), seed, ..base.clone() };
    let out = train_run(&cfg, data)?;
    let model = &out.checkpoint.model;
    let last = out.log.epochs.last().ok_or_else(|| Error::State("training produced no epochs".into()))?;
    let eps = validation_episodes(&data.test, eval.table_shots, derive_seed(seed, "ablation-test"))?;
    let (test_accuracy, test_similarity) = icl_accuracy(model, &data.test, &eps)?;
    let gap = disentanglement_report(model, &data.test, eval.n_pairs, derive_seed(seed, "ablation-gap"))?.gap;
    let shot_curve = fewshot_icl_eval(model, data, &eval.shots, eval.trials, derive_seed(seed, "ablation-fewshot"))?;
    let metrics = RunMetrics {
        variant,
        seed,
        val_accuracy: last.val_accuracy,
        val_similarity: last.val_similarity,
        test_accuracy,
        test_similarity,
        gap,
        trainable_params: model.registry.trainable_count(),
        shot_curve,
    };
    Ok((metrics, out.log))
}

/// Trains and evaluates every variant under every seed; the table holds medians.
pub fn ablation_suite(base: &TrainConfig, data: &Dataset, seeds: &[u64], eval: &EvalConfig) -> Result<AblationOutcome> {
    ablation_suite_with(base, data, seeds, eval, |_| {})
}

/// [`ablation_suite`] with a callback after each finished run.
pub fn ablation_suite_with(
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    eval: &EvalConfig,
    on_run: impl Fn(&RunMetrics) + Sync,
) -> Result<AblationOutcome> {
    if seeds.len() < 3 {
        return Err(Error::Domain(format!("the ablation suite needs at least 3 seeds (got {})", seeds.len())));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let workers = match eval.workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .min(jobs.len());
    let run = |&(v, s): &(Variant, u64)| {
        let r = run_variant(base, data, v, s, eval).map_err(|e| Error::Run { variant: v.id().into(), seed: s, source: Box::new(e) });
        if let Ok((m, _)) = &r {
            on_run(m);
        }
        r
    };
    let results: Vec<Result<(RunMetrics, MetricsLog)>> = if workers <= 1 {
        jobs.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<(RunMetrics, MetricsLog)>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    let run = &run;
                    scope.spawn(move || (w..jobs.len()).step_by(workers).map(|i| (i, run(&jobs[i]))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("ablation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    };
    let mut runs = Vec::with_capacity(jobs.len());
    let mut logs = Vec::with_capacity(jobs.len());
    for r in results {
        let (m, log) = r?;
        logs.push((m.variant, m.seed, log));
        runs.push(m);
    }
    let rows = Variant::ALL
        .iter()
        .map(|&v| {
            let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.variant == v).collect();
            let med = |f: fn(&RunMetrics) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationRow {
                variant: v,
                val_accuracy: med(|r| r.val_accuracy),
                test_accuracy: med(|r| r.test_accuracy),
                similarity: med(|r| r.test_similarity),
                gap: med(|r| r.gap),
                trainable_params: mine[0].trainable_params,
            }
        })
        .collect();
    Ok(AblationOutcome { table: AblationTable { seeds: seeds.to_vec(), rows, runs }, logs })
}

/// Every reported metric is oriented so that larger is better.
pub fn metric_orientation() -> BTreeMap<String, String> {
    ["accuracy", "similarity", "gap", "val_accuracy", "test_accuracy", "sim_same_content_diff_style"]
        .into_iter()
        .map(|k| (k.to_string(), "higher_is_better".to_string()))
        .chain(std::iter::once(("sim_diff_content_same_style".to_string(), "lower_is_better".to_string())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub closed_form_trainable: usize,
    pub ratio: f64,
}

impl ParamCounts {
    pub fn of(model: &Model) -> Self {
        let (t, f) = (model.registry.trainable_count(), model.registry.frozen_count());
        Self { trainable: t, frozen: f, closed_form_trainable: model.closed_form_trainable_count(), ratio: t as f64 / f as f64 }
    }
}

/// Everything one report needs; a section left `None` is incomplete.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub orientation: BTreeMap<String, String>,
    /// Which features the gap is measured on.
    pub feature_space: String,
    pub disentanglement: Option<BTreeMap<String, Disentanglement>>,
    pub shot_curve: Option<Vec<ShotPoint>>,
    pub ablation: Option<AblationTable>,
    pub style_table: Option<StyleTable>,
    pub params: Option<ParamCounts>,
    /// Resolved run configuration, TOML text.
    pub config: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
}

impl EvalReport {
    pub fn new(config: String, master_seed: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            orientation: metric_orientation(),
            feature_space: "pooled encoder output".into(),
            config,
            master_seed,
            ..Self::default()
        }
    }

    /// Names the first missing section, if any.
    pub fn check_complete(&self) -> Result<()> {
        let missing = [
            ("disentanglement", self.disentanglement.is_none()),
            ("shot_curve", self.shot_curve.is_none()),
            ("ablation", self.ablation.is_none()),
            ("style_table", self.style_table.is_none()),
            ("params", self.params.is_none()),
        ];
        match missing.iter().find(|(_, m)| *m) {
            Some((name, _)) => Err(Error::Schema((*name).into())),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests;
