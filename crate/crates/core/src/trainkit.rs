//! Training loop, metrics log and checkpoint files.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ascm::{self, LossWeights};
use crate::codec::{self, Reader, Writer};
use crate::diffcore::{AdamWConfig, AdamWState, ParamRegistry, Session, Tensor};
use crate::error::{Error, Result};
use crate::model::{draw_context, episode, AblationFlags, Model, ModelConfig, TrainingBatch};
use crate::saicd::Episode;
use crate::seed::stream;
use crate::synthstyle::{Dataset, Sample, StyleProbe};

const MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: [&str; 7] = ["config", "csfe", "saicd", "ascm", "probe", "optimizer", "meta"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub ablation: AblationFlags,
    /// Share of each batch paired with a restyled copy for the cycle term.
    pub cycle_fraction: f64,
    /// Context size of the per-epoch validation episodes.
    pub val_shots: usize,
    /// Filled from the run's master seed; never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            ablation: AblationFlags::default(),
            cycle_fraction: 0.5,
            val_shots: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, bad: &mut Vec<String>) {
        if self.batch_size < 2 {
            bad.push(format!("train.batch_size must be >= 2 for in-batch negatives (got {})", self.batch_size));
        }
        if self.epochs == 0 {
            bad.push("train.epochs must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            bad.push(format!("train.optimizer.lr must be positive (got {})", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            bad.push("train.optimizer.beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            bad.push("train.optimizer.eps must be positive".into());
        }
        if !(o.weight_decay >= 0.0 && o.lr * o.weight_decay < 1.0) {
            bad.push("train.optimizer.weight_decay must be >= 0 with lr * weight_decay < 1".into());
        }
        self.loss.validate("train.loss", bad);
        self.model.validate(bad);
        if !(0.0..=1.0).contains(&self.cycle_fraction) {
            bad.push(format!("train.cycle_fraction must lie in [0, 1] (got {})", self.cycle_fraction));
        }
        if self.val_shots == 0 || self.val_shots > self.model.decoder.max_shots {
            bad.push(format!(
                "train.val_shots must lie in 1..={} (got {})",
                self.model.decoder.max_shots, self.val_shots
            ));
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        self.validate(&mut bad);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub info_nce: f64,
    pub semantic: f64,
    pub cycle: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub info_nce: f64,
    pub semantic: f64,
    pub cycle: f64,
    pub total: f64,
    pub val_accuracy: f64,
    pub val_similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

impl MetricsLog {
    pub fn steps_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&self.steps)
    }

    pub fn steps_jsonl(&self) -> Result<Vec<u8>> {
        jsonl_bytes(&self.steps)
    }

    pub fn epochs_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&self.epochs)
    }

    /// Writes `metrics.csv`, `metrics.jsonl` and `epochs.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        codec::write_file(&dir.join("metrics.csv"), &self.steps_csv()?)?;
        codec::write_file(&dir.join("metrics.jsonl"), &self.steps_jsonl()?)?;
        codec::write_file(&dir.join("epochs.csv"), &self.epochs_csv()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamWState,
    pub epoch: u64,
    pub step: u64,
    pub dataset_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    seed: u64,
    epoch: u64,
    step: u64,
    dataset_hash: String,
    frozen_checksum: String,
    trainable_count: usize,
    frozen_count: usize,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
}

/// Batch indices for one epoch: a seeded shuffle cut into `batch_size` chunks.
/// A trailing chunk smaller than two is dropped. A chunk without any
/// same-content pair across styles gets its last row swapped for one.
pub fn epoch_batches(train: &[Sample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = stream(seed, &format!("epoch/{epoch}/order"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut b = chunk.to_vec();
        if !has_semantic_pair(train, &b) {
            let first = &train[b[0]];
            let swap = (0..train.len())
                .find(|&j| train[j].content_id == first.content_id && train[j].style_id != first.style_id && !b.contains(&j))
                .ok_or_else(|| Error::Contract("training split has no same-content pair across styles".into()))?;
            let last = b.len() - 1;
            b[last] = swap;
        }
        out.push(b);
    }
    if out.is_empty() {
        return Err(Error::Contract(format!("{} training samples cannot fill a batch", train.len())));
    }
    Ok(out)
}

fn has_semantic_pair(train: &[Sample], rows: &[usize]) -> bool {
    rows.iter().enumerate().any(|(a, &i)| {
        rows[a + 1..].iter().any(|&j| train[i].content_id == train[j].content_id && train[i].style_id != train[j].style_id)
    })
}

/// Episodes, context size and restyled copies for one step, all drawn from the step's own stream.
pub fn assemble_batch(data: &Dataset, rows: &[usize], cfg: &TrainConfig, step: u64) -> Result<TrainingBatch> {
    let mut rng = stream(cfg.seed, &format!("step/{step}"));
    let samples: Vec<Sample> = rows.iter().map(|&i| data.train[i].clone()).collect();
    let room = (0..samples.len())
        .map(|i| samples.iter().filter(|x| x.style_id != samples[i].style_id).count())
        .min()
        .unwrap_or(0);
    let k_max = cfg.model.decoder.max_shots.min(room);
    if k_max == 0 {
        return Err(Error::Contract("a batch needs at least two styles to build contexts".into()));
    }
    let k = rng.random_range(1..=k_max);
    let episodes = (0..samples.len())
        .map(|i| Ok(episode(&samples, &draw_context(&samples, i, k, &mut rng)?, i)))
        .collect::<Result<Vec<Episode>>>()?;
    let n_styles = data.config.n_styles;
    let m = (cfg.cycle_fraction * samples.len() as f64).round() as usize;
    let mut picks = index::sample(&mut rng, samples.len(), m).into_vec();
    picks.sort_unstable();
    let mut transfers = Vec::with_capacity(m);
    for i in picks {
        let to = (samples[i].style_id + rng.random_range(1..n_styles)) % n_styles;
        let nonce = rng.random::<u64>();
        transfers.push((i, data.apply_style_transfer(&samples[i], to, nonce)?));
    }
    Ok(TrainingBatch { samples, transfers, episodes })
}

/// Fixed validation episodes: every validation sample is a target once, with
/// `shots` context samples from other styles.
pub fn validation_episodes(val: &[Sample], shots: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut rng = stream(seed, "validation");
    (0..val.len()).map(|i| Ok(episode(val, &draw_context(val, i, shots, &mut rng)?, i))).collect()
}

/// `(accuracy, mean similarity)` over the given episodes.
pub fn icl_accuracy(model: &Model, pool: &[Sample], episodes: &[Episode]) -> Result<(f64, f64)> {
    let sc = model.icl_scores(pool, episodes)?;
    let n = episodes.len() as f64;
    let hits = episodes.iter().zip(&sc.predictions).filter(|(e, &p)| pool[e.target].content_id == p).count();
    Ok((hits as f64 / n, sc.similarities.iter().sum::<f64>() / n))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs one optimisation step and returns its loss record.
pub fn train_step(model: &mut Model, opt: &mut AdamWState, batch: &TrainingBatch, weights: &LossWeights, step: u64, epoch: u64) -> Result<StepRecord> {
    let (record, grads) = {
        let mut s = Session::new(&model.registry, true);
        let o = model.objective(&mut s, batch, weights)?;
        let val = |v: Option<crate::diffcore::Var>| v.map(|v| s.graph.value(v).item()).unwrap_or(0.0);
        let parts = (s.graph.value(o.info_nce).item(), val(o.semantic), val(o.cycle));
        ascm::total_loss(parts, weights).map_err(|e| match e {
            Error::Numeric { term, .. } => Error::Numeric { term, step: Some(step) },
            other => other,
        })?;
        let total = s.graph.value(o.total).item();
        if !total.is_finite() {
            return Err(Error::Numeric { term: "total".into(), step: Some(step) });
        }
        s.graph.backward(o.total)?;
        let grads: Vec<Tensor> = s.trainable_grads().into_iter().map(|(_, g)| g).collect();
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            let id = model.registry.trainable_ids()[bad];
            return Err(Error::Numeric { term: format!("gradient of {}", model.registry.get(id).name), step: Some(step) });
        }
        (StepRecord { step, epoch, info_nce: parts.0, semantic: parts.1, cycle: parts.2, total }, grads)
    };
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut model.registry.trainable_values_mut(), &grad_refs)?;
    Ok(record)
}

fn new_optimizer(cfg: &AdamWConfig, reg: &ParamRegistry) -> AdamWState {
    let sizes: Vec<usize> = reg.trainable_ids().into_iter().map(|id| reg.value(id).len()).collect();
    AdamWState::new(*cfg, &sizes)
}

/// Trains a fresh model on `data` and returns the final checkpoint and the metrics log.
pub fn train_run(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_run_with(cfg, data, |_| {})
}

/// [`train_run`] with a callback after every epoch.
pub fn train_run_with(cfg: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.check()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation splits".into()));
    }
    let mut model = Model::build(&cfg.model, cfg.ablation, data, cfg.seed)?;
    let weights = cfg.ablation.weights(&cfg.loss);
    let mut opt = new_optimizer(&cfg.optimizer, &model.registry);
    let val_eps = validation_episodes(&data.val, cfg.val_shots, cfg.seed)?;
    let mut log = MetricsLog::default();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs as u64 {
        let first = log.steps.len();
        for rows in epoch_batches(&data.train, cfg.batch_size, cfg.seed, epoch)? {
            step += 1;
            let batch = assemble_batch(data, &rows, cfg, step)?;
            log.steps.push(train_step(&mut model, &mut opt, &batch, &weights, step, epoch)?);
        }
        let recs = &log.steps[first..];
        let (val_accuracy, val_similarity) = icl_accuracy(&model, &data.val, &val_eps)?;
        let rec = EpochRecord {
            epoch,
            info_nce: mean(recs.iter().map(|r| r.info_nce)),
            semantic: mean(recs.iter().map(|r| r.semantic)),
            cycle: mean(recs.iter().map(|r| r.cycle)),
            total: mean(recs.iter().map(|r| r.total)),
            val_accuracy,
            val_similarity,
        };
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        model,
        optimizer: opt,
        epoch: cfg.epochs as u64,
        step,
        dataset_hash: data.content_hash(),
    };
    Ok(TrainOutcome { checkpoint, log })
}

fn write_params(reg: &ParamRegistry, prefix: &str) -> Vec<u8> {
    let mut w = Writer::default();
    let items: Vec<_> = reg.iter().filter(|(_, p)| p.name.starts_with(prefix)).collect();
    w.u32(items.len() as u32);
    for (_, p) in items {
        w.str(&p.name);
        w.u8(p.trainable as u8);
        w.tensor(&p.value);
    }
    w.buf
}

fn read_params(bytes: &[u8], what: &'static str) -> Result<Vec<(String, bool, Tensor)>> {
    let mut r = Reader::new(bytes, what);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        out.push((name, trainable, r.tensor()?));
    }
    r.finish()?;
    Ok(out)
}

fn write_probe(p: &StyleProbe) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(p.n_styles as u32);
    w.f64s(&p.mean);
    w.f64s(&p.inv_std);
    w.tensor(&p.weight);
    w.tensor(&p.bias);
    w.u8(p.trained as u8);
    w.buf
}

fn read_probe(bytes: &[u8]) -> Result<StyleProbe> {
    let mut r = Reader::new(bytes, "probe section");
    let p = StyleProbe {
        n_styles: r.u32()? as usize,
        mean: r.f64s()?,
        inv_std: r.f64s()?,
        weight: r.tensor()?,
        bias: r.tensor()?,
        trained: r.u8()? != 0,
    };
    r.finish()?;
    Ok(p)
}

fn write_optimizer(o: &AdamWState) -> Vec<u8> {
    let mut w = Writer::default();
    let c = &o.config;
    w.f64s(&[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]);
    w.u64(o.step);
    w.u32(o.first_moment.len() as u32);
    for (m, v) in o.first_moment.iter().zip(&o.second_moment) {
        w.f64s(m);
        w.f64s(v);
    }
    w.buf
}

fn read_optimizer(bytes: &[u8]) -> Result<AdamWState> {
    let mut r = Reader::new(bytes, "optimizer section");
    let c = r.f64s()?;
    if c.len() != 5 {
        return Err(Error::Integrity(format!("optimizer section holds {} hyperparameters, expected 5", c.len())));
    }
    let config = AdamWConfig { lr: c[0], beta1: c[1], beta2: c[2], eps: c[3], weight_decay: c[4] };
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let (mut first_moment, mut second_moment) = (Vec::new(), Vec::new());
    for _ in 0..n {
        first_moment.push(r.f64s()?);
        second_moment.push(r.f64s()?);
    }
    r.finish()?;
    Ok(AdamWState { config, step, first_moment, second_moment })
}

impl Checkpoint {
    pub fn frozen_checksum(&self) -> String {
        self.model.registry.frozen_checksum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let reg = &self.model.registry;
        let meta = Meta {
            seed: self.config.seed,
            epoch: self.epoch,
            step: self.step,
            dataset_hash: self.dataset_hash.clone(),
            frozen_checksum: reg.frozen_checksum(),
            trainable_count: reg.trainable_count(),
            frozen_count: reg.frozen_count(),
        };
        let sections: [(&str, Vec<u8>); 7] = [
            ("config", serde_json::to_vec(&self.config)?),
            ("csfe", write_params(reg, "csfe.")),
            ("saicd", write_params(reg, "saicd.")),
            ("ascm", serde_json::to_vec(&self.config.ablation.weights(&self.config.loss))?),
            ("probe", write_probe(&self.model.probe)),
            ("optimizer", write_optimizer(&self.optimizer)),
            ("meta", serde_json::to_vec(&meta)?),
        ];
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(sections.len() as u32);
        for (name, body) in &sections {
            w.str(name);
            w.blob(body);
        }
        let digest = sha2_digest(&w.buf);
        w.buf.extend_from_slice(&digest);
        Ok(w.buf)
    }

    /// Parses a checkpoint. Nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut r = Reader::new(&bytes[4..], "checkpoint");
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let n = r.u32()? as usize;
        if n != SECTIONS.len() {
            return Err(Error::Integrity(format!("checkpoint lists {n} sections, expected {}", SECTIONS.len())));
        }
        let mut bodies = Vec::with_capacity(n);
        for want in SECTIONS {
            let name = r.str()?;
            if name != want {
                return Err(Error::Integrity(format!("expected section `{want}`, found `{name}`")));
            }
            bodies.push(r.blob()?);
        }
        let footer = r.take(32)?;
        r.finish()?;
        let body_len = bytes.len() - 32;
        if sha2_digest(&bytes[..body_len]).as_slice() != footer {
            return Err(Error::Integrity("checkpoint hash mismatch".into()));
        }

        let mut config: TrainConfig = serde_json::from_slice(bodies[0])?;
        let meta: Meta = serde_json::from_slice(bodies[6])?;
        config.seed = meta.seed;
        let mut stored = read_params(bodies[1], "csfe section")?;
        stored.extend(read_params(bodies[2], "saicd section")?);
        let probe = read_probe(bodies[4])?;
        let optimizer = read_optimizer(bodies[5])?;
        let labels = stored
            .iter()
            .find(|(n, _, _)| n == "saicd.decoder.label_embedding")
            .map(|(_, _, t)| t.clone())
            .ok_or_else(|| Error::Format("checkpoint lacks the label embedding table".into()))?;
        let mut model = Model::assemble(&config.model, config.ablation, &labels, probe, meta.seed)?;
        if stored.len() != model.registry.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                stored.len(),
                model.registry.len()
            )));
        }
        for (name, trainable, value) in stored {
            let id = model.registry.id(&name).ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            let p = model.registry.get(id);
            if p.trainable != trainable || p.value.shape() != value.shape() {
                return Err(Error::Format(format!("parameter `{name}` does not match the configured model")));
            }
            *model.registry.value_mut(id) = value;
        }
        if model.registry.frozen_checksum() != meta.frozen_checksum {
            return Err(Error::Integrity("frozen parameters do not match the recorded checksum".into()));
        }
        let sizes: Vec<usize> = model.registry.trainable_ids().into_iter().map(|id| model.registry.value(id).len()).collect();
        if optimizer.first_moment.iter().map(Vec::len).ne(sizes.iter().copied())
            || optimizer.second_moment.iter().map(Vec::len).ne(sizes.iter().copied())
        {
            return Err(Error::Integrity("optimizer state does not match the trainable parameters".into()));
        }
        Ok(Self { config, model, optimizer, epoch: meta.epoch, step: meta.step, dataset_hash: meta.dataset_hash })
    }
}

fn sha2_digest(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    codec::write_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&codec::read_file(path)?)
}

#[cfg(test)]
mod tests;
