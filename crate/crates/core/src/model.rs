//! The full stack: style-aware encoder, anchor decoder, style probe and the
//! batch objective that ties them to the losses.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ascm::{self, LossWeights, SemanticPairs, SemanticSpace};
use crate::csfe::{Csfe, EncoderConfig};
use crate::diffcore::{ParamRegistry, Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::saicd::{DecoderConfig, Episode, Saicd};
use crate::seed::derive_seed;
use crate::synthstyle::{classify_style, fit_style_probe, Dataset, ProbeConfig, Sample, StyleProbe};

/// Component switches for the ablation variants. All `false` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// No style table or style adapters; the encoder runs unmodulated.
    pub no_style_modulation: bool,
    /// Frozen coordinate-selection anchor map and no decoder adapters.
    pub no_decoder_adaptation: bool,
    /// Drops both consistency terms, leaving plain InfoNCE.
    pub no_consistency: bool,
    pub no_semantic: bool,
    pub no_cycle: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCsfe,
    NoSaicd,
    NoAscm,
    NoSemantic,
    NoCycle,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoCsfe, Variant::NoSaicd, Variant::NoAscm, Variant::NoSemantic, Variant::NoCycle];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCsfe => "no_csfe",
            Variant::NoSaicd => "no_saicd",
            Variant::NoAscm => "no_ascm",
            Variant::NoSemantic => "no_semantic",
            Variant::NoCycle => "no_cycle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::Domain(format!("unknown variant `{s}`")))
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::NoCsfe => f.no_style_modulation = true,
            Variant::NoSaicd => f.no_decoder_adaptation = true,
            Variant::NoAscm => f.no_consistency = true,
            Variant::NoSemantic => f.no_semantic = true,
            Variant::NoCycle => f.no_cycle = true,
        }
        f
    }
}

impl AblationFlags {
    /// Loss weights with the disabled terms zeroed.
    pub fn weights(&self, w: &LossWeights) -> LossWeights {
        let mut w = w.clone();
        if self.no_consistency || self.no_semantic {
            w.alpha = 0.0;
        }
        if self.no_consistency || self.no_cycle {
            w.beta = 0.0;
        }
        w
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub probe: ProbeConfig,
}

impl ModelConfig {
    pub fn validate(&self, bad: &mut Vec<String>) {
        self.encoder.validate(bad);
        self.decoder.validate(bad);
        if self.probe.steps == 0 {
            bad.push("model.probe.steps must be positive".into());
        }
        if !(self.probe.lr > 0.0 && self.probe.lr.is_finite()) {
            bad.push(format!("model.probe.lr must be positive (got {})", self.probe.lr));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub seed: u64,
    pub registry: ParamRegistry,
    pub csfe: Csfe,
    pub saicd: Saicd,
    pub probe: StyleProbe,
}

/// Per-term graph nodes of one batch. Terms that could not be formed are `None`.
pub struct ObjectiveVars {
    pub info_nce: Var,
    pub semantic: Option<Var>,
    pub cycle: Option<Var>,
    pub total: Var,
}

/// One training batch. Episode rows index `samples`; each transfer pairs a
/// batch row with its restyled copy.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub samples: Vec<Sample>,
    pub transfers: Vec<(usize, Sample)>,
    pub episodes: Vec<Episode>,
}

/// Predictions and target similarities for a set of in-context episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct IclScores {
    pub logits: Tensor,
    pub predictions: Vec<usize>,
    /// Cosine between each output embedding and its target's paired embedding.
    pub similarities: Vec<f64>,
}

impl Model {
    /// Fits the style probe on the training split and registers every parameter.
    pub fn build(cfg: &ModelConfig, flags: AblationFlags, data: &Dataset, seed: u64) -> Result<Self> {
        let probe = fit_style_probe(
            &data.train,
            data.config.n_styles,
            data.config.label_noise,
            derive_seed(seed, "probe"),
            &cfg.probe,
        )?;
        Self::assemble(cfg, flags, &data.class_embeddings(), probe, seed)
    }

    /// Registers parameters around an existing probe and label table.
    pub fn assemble(cfg: &ModelConfig, flags: AblationFlags, labels: &Tensor, probe: StyleProbe, seed: u64) -> Result<Self> {
        let mut bad = Vec::new();
        cfg.validate(&mut bad);
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut registry = ParamRegistry::new();
        let init = derive_seed(seed, "init");
        let csfe = Csfe::register(&mut registry, &cfg.encoder, probe.mean.len(), probe.n_styles, !flags.no_style_modulation, init)?;
        let saicd = Saicd::register(&mut registry, &cfg.decoder, cfg.encoder.d_model, labels, !flags.no_decoder_adaptation, init)?;
        Ok(Self { config: cfg.clone(), flags, seed, registry, csfe, saicd, probe })
    }

    /// Sum of the component counts, computed from the architecture alone.
    pub fn closed_form_trainable_count(&self) -> usize {
        self.csfe.trainable_count() + self.saicd.trainable_count()
    }

    pub fn n_classes(&self) -> usize {
        self.saicd.n_classes
    }

    /// Style ids as seen by the probe.
    pub fn style_labels<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Vec<usize>> {
        samples.into_iter().map(|s| classify_style(&s.observation, &self.probe)).collect()
    }

    /// Pooled encoder features `[n, d_model]` for the given samples.
    pub fn encode(&self, s: &mut Session, samples: &[&Sample]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Contract("nothing to encode".into()));
        }
        let rows: Vec<Vec<f64>> = samples.iter().map(|x| x.observation.clone()).collect();
        let obs = s.graph.constant(Tensor::from_rows(&rows)?);
        let styles = self.style_labels(samples.iter().copied())?;
        self.csfe.encode(s, obs, &styles, true)
    }

    /// Encoder features without gradient tracking.
    pub fn features(&self, samples: &[Sample]) -> Result<Tensor> {
        let mut s = Session::new(&self.registry, false);
        let refs: Vec<&Sample> = samples.iter().collect();
        let f = self.encode(&mut s, &refs)?;
        Ok(s.graph.value(f).clone())
    }

    /// Joint-space embeddings `[episodes, anchor_dim]` for episodes over `pool`.
    pub fn embed_episodes(&self, s: &mut Session, pool: &[&Sample], episodes: &[Episode]) -> Result<Var> {
        let f = self.encode(s, pool)?;
        let a = self.saicd.anchor(s, f)?;
        let z = self.saicd.decode(s, a, episodes, true)?;
        self.saicd.head(s, z)
    }

    /// Classifies each episode's target and scores it against its paired embedding.
    pub fn icl_scores(&self, pool: &[Sample], episodes: &[Episode]) -> Result<IclScores> {
        let mut s = Session::new(&self.registry, false);
        let refs: Vec<&Sample> = pool.iter().collect();
        let e = self.embed_episodes(&mut s, &refs, episodes)?;
        let logits = self.saicd.class_logits(&mut s, e)?;
        let logits = s.graph.value(logits).clone();
        let emb = s.graph.value(e);
        let c = logits.last_dim();
        let predictions = (0..episodes.len())
            .map(|i| {
                let row = &logits.data()[i * c..(i + 1) * c];
                (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect();
        let similarities = episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                crate::diffcore::cosine(emb.row(i), &pool[ep.target].target_embedding)
                    .ok_or_else(|| Error::Domain(format!("zero-norm embedding for episode {i}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(IclScores { logits, predictions, similarities })
    }

    /// Class probabilities for one target given labelled context samples.
    pub fn icl_predict(&self, context: &[(Sample, usize)], target: &Sample) -> Result<Vec<f64>> {
        let mut pool: Vec<Sample> = context.iter().map(|(s, _)| s.clone()).collect();
        pool.push(target.clone());
        let ep = Episode { context: context.iter().enumerate().map(|(i, (_, l))| (i, *l)).collect(), target: context.len() };
        let scores = self.icl_scores(&pool, &[ep])?;
        let row = scores.logits.row(0);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|x| x / z).collect())
    }

    /// Builds the batch objective on `s`. Semantic and cycle terms are always
    /// computed when their inputs exist, but enter the total only when their
    /// weight is nonzero.
    pub fn objective(&self, s: &mut Session, batch: &TrainingBatch, weights: &LossWeights) -> Result<ObjectiveVars> {
        let b = batch.samples.len();
        if b < 2 {
            return Err(Error::Contract(format!("InfoNCE needs a batch of at least 2 (got {b})")));
        }
        if batch.episodes.len() != b || batch.episodes.iter().enumerate().any(|(i, e)| e.target != i) {
            return Err(Error::Contract("batch needs exactly one episode per sample, targeting that sample".into()));
        }
        let mut pool: Vec<&Sample> = batch.samples.iter().collect();
        pool.extend(batch.transfers.iter().map(|(_, t)| t));
        let f = self.encode(s, &pool)?;
        let a = self.saicd.anchor(s, f)?;
        let z = self.saicd.decode(s, a, &batch.episodes, true)?;
        let e = self.saicd.head(s, z)?;
        let targets: Vec<Vec<f64>> = batch.samples.iter().map(|x| x.target_embedding.clone()).collect();
        let t = s.graph.constant(Tensor::from_rows(&targets)?);
        let info_nce = ascm::info_nce_loss(&mut s.graph, e, t, weights.tau)?;

        let content: Vec<usize> = batch.samples.iter().map(|x| x.content_id).collect();
        let styles: Vec<usize> = batch.samples.iter().map(|x| x.style_id).collect();
        let pairs = SemanticPairs::from_labels(&content, &styles);
        let semantic = if pairs.is_empty() {
            if weights.alpha > 0.0 {
                return Err(Error::Contract("batch has no same-content pair across styles".into()));
            }
            None
        } else {
            let space = match weights.semantic_space {
                SemanticSpace::Encoder => f,
                SemanticSpace::Anchor => a,
            };
            let fb = s.graph.gather_rows(space, (0..b).collect())?;
            Some(ascm::semantic_preservation_loss(&mut s.graph, fb, &pairs, &styles, weights.semantic_tau(), weights.semantic_includes_positive)?)
        };

        let cycle = if batch.transfers.is_empty() {
            None
        } else {
            let orig = s.graph.gather_rows(f, batch.transfers.iter().map(|(i, _)| *i).collect())?;
            let moved = s.graph.gather_rows(f, (b..b + batch.transfers.len()).collect())?;
            Some(ascm::cycle_consistency_loss(&mut s.graph, orig, moved)?)
        };

        let sem_used = semantic.filter(|_| weights.alpha > 0.0);
        let cyc_used = cycle.filter(|_| weights.beta > 0.0);
        let total = ascm::combine_losses(&mut s.graph, info_nce, sem_used, cyc_used, weights)?;
        Ok(ObjectiveVars { info_nce, semantic, cycle, total })
    }
}

/// Draws `k` distinct pool indices whose style differs from the target's.
pub fn draw_context<R: Rng>(pool: &[Sample], target: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let style = pool[target].style_id;
    let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].style_id != style).collect();
    if k > candidates.len() {
        return Err(Error::Domain(format!(
            "{k} context examples requested but only {} samples outside the target's style",
            candidates.len()
        )));
    }
    Ok(index::sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect())
}

/// Episode for `target` labelled by content id.
pub fn episode(pool: &[Sample], context: &[usize], target: usize) -> Episode {
    Episode { context: context.iter().map(|&i| (i, pool[i].content_id)).collect(), target }
}

#[cfg(test)]
mod tests;
