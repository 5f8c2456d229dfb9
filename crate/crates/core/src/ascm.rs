//! The three training losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Finite stand-in for `-inf` when excluding entries from a log-sum-exp.
const EXCLUDED: f64 = -1e300;

/// Features the semantic term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSpace {
    /// Pooled encoder output.
    #[default]
    Encoder,
    /// After the anchor projection.
    Anchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Temperature of the semantic term; `None` shares `tau`.
    pub semantic_tau: Option<f64>,
    pub semantic_space: SemanticSpace,
    /// Keep the positive in the semantic denominator. Without it the term
    /// can go negative.
    pub semantic_includes_positive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.2, tau: 0.07, semantic_tau: None, semantic_space: SemanticSpace::Encoder, semantic_includes_positive: true }
    }
}

impl LossWeights {
    pub fn semantic_tau(&self) -> f64 {
        self.semantic_tau.unwrap_or(self.tau)
    }

    pub fn validate(&self, prefix: &str, bad: &mut Vec<String>) {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bad.push(format!("{prefix}.alpha must be finite and >= 0 (got {})", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad.push(format!("{prefix}.beta must be finite and >= 0 (got {})", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad.push(format!("{prefix}.tau must be positive (got {})", self.tau));
        }
        if let Some(t) = self.semantic_tau {
            if !(t > 0.0 && t.is_finite()) {
                bad.push(format!("{prefix}.semantic_tau must be positive (got {t})"));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub info_nce: f64,
    pub semantic: f64,
    pub cycle: f64,
    pub total: f64,
}

fn check_pair_shapes(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Symmetric InfoNCE over cosine similarities; row `i` of `paired` is the
/// positive for row `i` of `visual`, every other row a negative.
pub fn info_nce_loss(g: &mut Graph, visual: Var, paired: Var, tau: f64) -> Result<Var> {
    check_pair_shapes(g, "info_nce_loss", visual, paired)?;
    let n = g.value(visual).rows();
    if n == 0 {
        return Err(Error::Contract("InfoNCE needs at least one pair".into()));
    }
    let v = g.normalize_rows(visual)?;
    let p = g.normalize_rows(paired)?;
    let s = g.matmul_nt(v, p)?;
    let s = g.scale(s, 1.0 / tau)?;
    let st = g.transpose(s)?;
    let fwd = g.cross_entropy_rows(s, (0..n).collect())?;
    let fwd = g.mean(fwd)?;
    let bwd = g.cross_entropy_rows(st, (0..n).collect())?;
    let bwd = g.mean(bwd)?;
    let both = g.add(fwd, bwd)?;
    g.scale(both, 0.5)
}

/// Same-content pairs across styles and, per anchor, the different-content negatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticPairs {
    pub pairs: Vec<(usize, usize)>,
    pub negatives: Vec<Vec<usize>>,
}

impl SemanticPairs {
    /// Every ordered `(i, j)` with equal content and different style; the
    /// negatives of `i` are all rows with a different content.
    pub fn from_labels(content: &[usize], styles: &[usize]) -> Self {
        let mut out = Self::default();
        for i in 0..content.len() {
            let negs: Vec<usize> = (0..content.len()).filter(|&k| content[k] != content[i]).collect();
            for j in 0..content.len() {
                if j != i && content[j] == content[i] && styles[j] != styles[i] {
                    out.pairs.push((i, j));
                    out.negatives.push(negs.clone());
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Mean over pairs of `-log(exp(s_pos/τ) / D)`, where `D` sums `exp(s/τ)`
/// over the negatives and, when `include_positive` is set, the positive.
pub fn semantic_preservation_loss(
    g: &mut Graph,
    features: Var,
    set: &SemanticPairs,
    styles: &[usize],
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    let n = g.value(features).rows();
    if set.pairs.is_empty() {
        return Err(Error::Contract("semantic loss needs at least one cross-style pair".into()));
    }
    if set.negatives.len() != set.pairs.len() {
        return Err(Error::Contract("one negative set is required per pair".into()));
    }
    if styles.len() != n {
        return Err(Error::shape("semantic_preservation_loss", format!("{} style ids for {n} features", styles.len())));
    }
    let mut mask = Tensor::filled(&[set.pairs.len(), n], EXCLUDED);
    let mut pos_index = Vec::with_capacity(set.pairs.len());
    for (p, (&(i, j), negs)) in set.pairs.iter().zip(&set.negatives).enumerate() {
        if i >= n || j >= n {
            return Err(Error::Domain(format!("pair ({i}, {j}) refers past {n} features")));
        }
        if styles[i] == styles[j] {
            return Err(Error::Contract(format!("pair ({i}, {j}) shares style {}", styles[i])));
        }
        if negs.is_empty() {
            return Err(Error::Contract(format!("pair ({i}, {j}) has no negatives")));
        }
        let row = &mut mask.data_mut()[p * n..(p + 1) * n];
        for &k in negs {
            if k >= n {
                return Err(Error::Domain(format!("negative {k} refers past {n} features")));
            }
            row[k] = 0.0;
        }
        if include_positive {
            row[j] = 0.0;
        }
        pos_index.push(p * n + j);
    }
    let f = g.normalize_rows(features)?;
    let s = g.matmul_nt(f, f)?;
    let s = g.scale(s, 1.0 / tau)?;
    let rows = g.gather_rows(s, set.pairs.iter().map(|p| p.0).collect())?;
    let m = g.constant(mask);
    let masked = g.add(rows, m)?;
    let lse = g.logsumexp_lastdim(masked)?;
    let pos = g.pick(rows, pos_index)?;
    let per = g.sub(lse, pos)?;
    g.mean(per)
}

/// Mean over rows of `‖f_orig − f_trans‖²`.
pub fn cycle_consistency_loss(g: &mut Graph, f_orig: Var, f_trans: Var) -> Result<Var> {
    check_pair_shapes(g, "cycle_consistency_loss", f_orig, f_trans)?;
    let rows = if g.value(f_orig).rank() == 1 { 1 } else { g.value(f_orig).rows() };
    let d = g.sub(f_orig, f_trans)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    if rows == 1 {
        Ok(s)
    } else {
        g.scale(s, 1.0 / rows as f64)
    }
}

/// `l_nce + α·l_sem + β·l_cyc` on plain numbers.
pub fn total_loss(parts: (f64, f64, f64), w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("info_nce", parts.0), ("semantic", parts.1), ("cycle", parts.2)] {
        if !v.is_finite() {
            return Err(Error::Numeric { term: name.into(), step: None });
        }
    }
    Ok(LossBreakdown { info_nce: parts.0, semantic: parts.1, cycle: parts.2, total: parts.0 + w.alpha * parts.1 + w.beta * parts.2 })
}

/// Graph form of the weighted sum. Absent terms contribute nothing, so with
/// both absent the result is the InfoNCE node itself.
pub fn combine_losses(g: &mut Graph, nce: Var, sem: Option<Var>, cyc: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut total = nce;
    if let Some(s) = sem {
        let t = g.scale(s, w.alpha)?;
        total = g.add(total, t)?;
    }
    if let Some(c) = cyc {
        let t = g.scale(c, w.beta)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}
