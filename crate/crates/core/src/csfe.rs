//! Cross-style feature encoder.
//!
//! A frozen random backbone lifts an observation to a token matrix. Each
//! attention block adds a per-style offset `E_s · W` to every row of its
//! queries, keys and values before scaled dot-product attention. Blocks are
//! pre-norm with residual connections; the output is the token mean.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamRegistry, Session, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub style_dim: usize,
    pub ff_width: usize,
    /// Tokens produced by the backbone per observation.
    pub tokens: usize,
    /// Use the style-shifted values in the attention product (otherwise raw values).
    pub modulate_values: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 64, blocks: 2, heads: 4, style_dim: 16, ff_width: 128, tokens: 8, modulate_values: true }
    }
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self, bad: &mut Vec<String>) {
        for (k, v) in [
            ("d_model", self.d_model),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("style_dim", self.style_dim),
            ("ff_width", self.ff_width),
            ("tokens", self.tokens),
        ] {
            if v == 0 {
                bad.push(format!("model.encoder.{k} must be positive"));
            }
        }
        if self.heads > 0 && !self.d_model.is_multiple_of(self.heads) {
            bad.push(format!("model.encoder.d_model ({}) must be divisible by heads ({})", self.d_model, self.heads));
        }
    }
}

/// Graph handles of the three `d_s -> d_model` style adapters of one block.
#[derive(Clone, Copy, Debug)]
pub struct StyleAdapterWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Adds `E · W` (one row per sequence) to every token row of `q`, `k`, `v`.
///
/// `q`, `k`, `v` are `[batch * tokens, d_model]`; `style` is `[batch, d_s]`.
pub fn style_modulate_qkv(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    style: Var,
    w: &StyleAdapterWeights,
    tokens: usize,
) -> Result<(Var, Var, Var)> {
    let ds = g.value(style).last_dim();
    for (name, m) in [("W_Q", w.w_q), ("W_K", w.w_k), ("W_V", w.w_v)] {
        if g.shape(m)[0] != ds {
            return Err(Error::shape(
                "style_modulate_qkv",
                format!("style embedding has dimension {ds} but {name} expects {:?}", g.shape(m)),
            ));
        }
    }
    if g.value(q).rows() != g.value(style).rows() * tokens {
        return Err(Error::shape(
            "style_modulate_qkv",
            format!("{} token rows for {} style rows x {tokens} tokens", g.value(q).rows(), g.value(style).rows()),
        ));
    }
    let mut shifted = [q, k, v];
    for (x, m) in shifted.iter_mut().zip([w.w_q, w.w_k, w.w_v]) {
        let offset = g.matmul(style, m)?;
        let offset = g.repeat_rows(offset, tokens)?;
        *x = g.add(*x, offset)?;
    }
    Ok((shifted[0], shifted[1], shifted[2]))
}

/// Frozen projections of one attention block, plus optional style adapters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub style: Option<StyleAdapterWeights>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[batch * tokens, d_model]` after the output projection.
    pub output: Var,
    /// Concatenated heads before the output projection.
    pub pre_projection: Var,
    /// `[batch * heads, tokens, tokens]` attention weights.
    pub weights: Var,
    /// Values actually used in the attention product.
    pub values: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn style_attention(
    g: &mut Graph,
    f: Var,
    style: Option<Var>,
    w: &AttentionWeights,
    batch: usize,
    tokens: usize,
    heads: usize,
    modulate_values: bool,
) -> Result<AttentionOutput> {
    if tokens == 0 || batch == 0 {
        return Err(Error::shape("style_attention", "sequence has no tokens"));
    }
    if g.value(f).rows() != batch * tokens {
        return Err(Error::shape("style_attention", format!("{:?} for {batch} x {tokens} tokens", g.shape(f))));
    }
    let q = g.matmul(f, w.wq)?;
    let k = g.matmul(f, w.wk)?;
    let v = g.matmul(f, w.wv)?;
    let (q, k, v) = match (style, w.style.as_ref()) {
        (Some(e), Some(adapters)) => {
            let (q2, k2, v2) = style_modulate_qkv(g, q, k, v, e, adapters, tokens)?;
            (q2, k2, if modulate_values { v2 } else { v })
        }
        _ => (q, k, v),
    };
    let (pre_projection, weights) = attention_core(g, q, k, v, batch, tokens, heads)?;
    let output = g.matmul(pre_projection, w.wo)?;
    Ok(AttentionOutput { output, pre_projection, weights, values: v })
}

/// Multi-head `softmax(Q Kᵀ / √d_k) V` over `[batch * tokens, d]` inputs.
/// Returns the merged heads and the `[batch * heads, tokens, tokens]` weights.
pub fn attention_core(g: &mut Graph, q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize) -> Result<(Var, Var)> {
    let d = g.value(q).last_dim();
    let qh = g.split_heads(q, batch, tokens, heads)?;
    let kh = g.split_heads(k, batch, tokens, heads)?;
    let vh = g.split_heads(v, batch, tokens, heads)?;
    let scores = g.matmul_nt(qh, kh)?;
    let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt())?;
    let weights = g.softmax_lastdim(scores)?;
    let ctx = g.matmul(weights, vh)?;
    Ok((g.merge_heads(ctx, batch, tokens, heads)?, weights))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleAdapterIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ff1: ParamId,
    pub ff1_b: ParamId,
    pub ff2: ParamId,
    pub ff2_b: ParamId,
    pub style: Option<StyleAdapterIds>,
}

/// Encoder parameters as registry handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Csfe {
    pub config: EncoderConfig,
    pub obs_dim: usize,
    pub n_styles: usize,
    pub backbone_w: ParamId,
    pub backbone_b: ParamId,
    pub blocks: Vec<BlockIds>,
    /// `None` when style modulation is disabled.
    pub style_table: Option<ParamId>,
}

impl Csfe {
    /// Registers the frozen body and, when `modulate` is set, the trainable
    /// style table and zero-initialized adapters.
    pub fn register(
        reg: &mut ParamRegistry,
        cfg: &EncoderConfig,
        obs_dim: usize,
        n_styles: usize,
        modulate: bool,
        seed: u64,
    ) -> Result<Self> {
        let (d, t, f) = (cfg.d_model, cfg.tokens, cfg.ff_width);
        let backbone_w = reg.register_randn("csfe.backbone.w", &[obs_dim, t * d], 1.0 / (obs_dim as f64).sqrt(), false, seed)?;
        let backbone_b = reg.register_randn("csfe.backbone.b", &[t * d], 0.1, false, seed)?;
        let sd = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let p = format!("csfe.block{l}");
            let style = if modulate {
                Some(StyleAdapterIds {
                    w_q: reg.register(format!("{p}.style_q"), Tensor::zeros(&[cfg.style_dim, d]), true)?,
                    w_k: reg.register(format!("{p}.style_k"), Tensor::zeros(&[cfg.style_dim, d]), true)?,
                    w_v: reg.register(format!("{p}.style_v"), Tensor::zeros(&[cfg.style_dim, d]), true)?,
                })
            } else {
                None
            };
            blocks.push(BlockIds {
                wq: reg.register_randn(&format!("{p}.wq"), &[d, d], sd, false, seed)?,
                wk: reg.register_randn(&format!("{p}.wk"), &[d, d], sd, false, seed)?,
                wv: reg.register_randn(&format!("{p}.wv"), &[d, d], sd, false, seed)?,
                wo: reg.register_randn(&format!("{p}.wo"), &[d, d], sd, false, seed)?,
                ff1: reg.register_randn(&format!("{p}.ff1"), &[d, f], sd, false, seed)?,
                ff1_b: reg.register_randn(&format!("{p}.ff1_b"), &[f], 0.02, false, seed)?,
                ff2: reg.register_randn(&format!("{p}.ff2"), &[f, d], 1.0 / (f as f64).sqrt(), false, seed)?,
                ff2_b: reg.register_randn(&format!("{p}.ff2_b"), &[d], 0.02, false, seed)?,
                style,
            });
        }
        let style_table = if modulate {
            Some(reg.register_randn("csfe.style_table", &[n_styles, cfg.style_dim], 1.0, true, seed)?)
        } else {
            None
        };
        Ok(Self { config: cfg.clone(), obs_dim, n_styles, backbone_w, backbone_b, blocks, style_table })
    }

    /// Closed-form count of trainable entries.
    pub fn trainable_count(&self) -> usize {
        match self.style_table {
            Some(_) => {
                let c = &self.config;
                self.n_styles * c.style_dim + self.blocks.len() * 3 * c.style_dim * c.d_model
            }
            None => 0,
        }
    }

    /// Frozen backbone: `[batch, obs_dim] -> [batch * tokens, d_model]`.
    pub fn backbone(&self, s: &mut Session, obs: Var) -> Result<Var> {
        let w = s.param(self.backbone_w);
        let b = s.param(self.backbone_b);
        let n = s.graph.value(obs).rows();
        if s.graph.value(obs).last_dim() != self.obs_dim {
            return Err(Error::shape("backbone", format!("observation width {} != {}", s.graph.value(obs).last_dim(), self.obs_dim)));
        }
        let h = s.graph.matmul(obs, w)?;
        let h = s.graph.add_row(h, b)?;
        let h = s.graph.tanh(h)?;
        s.graph.reshape(h, vec![n * self.config.tokens, self.config.d_model])
    }

    fn check_styles(&self, styles: &[usize]) -> Result<()> {
        if let Some(bad) = styles.iter().find(|&&x| x >= self.n_styles) {
            return Err(Error::Domain(format!("style id {bad} outside [0, {})", self.n_styles)));
        }
        Ok(())
    }

    /// Style embeddings `[batch, d_s]` for the given ids, or `None` when
    /// modulation is off for this call or for the whole encoder.
    pub fn style_embeddings(&self, s: &mut Session, styles: &[usize], modulate: bool) -> Result<Option<Var>> {
        self.check_styles(styles)?;
        match (modulate, self.style_table) {
            (true, Some(t)) => {
                let tv = s.param(t);
                Ok(Some(s.graph.gather_rows(tv, styles.to_vec())?))
            }
            _ => Ok(None),
        }
    }

    /// Runs one block on `[batch * tokens, d_model]`.
    pub fn block(&self, s: &mut Session, l: usize, x: Var, style: Option<Var>, batch: usize) -> Result<Var> {
        let b = &self.blocks[l];
        let w = AttentionWeights {
            wq: s.param(b.wq),
            wk: s.param(b.wk),
            wv: s.param(b.wv),
            wo: s.param(b.wo),
            style: b.style.map(|a| StyleAdapterWeights { w_q: s.param(a.w_q), w_k: s.param(a.w_k), w_v: s.param(a.w_v) }),
        };
        let c = &self.config;
        let h = s.graph.layer_norm(x, LN_EPS)?;
        let att = style_attention(&mut s.graph, h, style, &w, batch, c.tokens, c.heads, c.modulate_values)?;
        let x = s.graph.add(x, att.output)?;
        let h = s.graph.layer_norm(x, LN_EPS)?;
        let (ff1, ff1_b, ff2, ff2_b) = (s.param(b.ff1), s.param(b.ff1_b), s.param(b.ff2), s.param(b.ff2_b));
        let h = s.graph.matmul(h, ff1)?;
        let h = s.graph.add_row(h, ff1_b)?;
        let h = s.graph.gelu(h)?;
        let h = s.graph.matmul(h, ff2)?;
        let h = s.graph.add_row(h, ff2_b)?;
        s.graph.add(x, h)
    }

    /// Pooled features `[batch, d_model]` for observations `[batch, obs_dim]`.
    pub fn encode(&self, s: &mut Session, obs: Var, styles: &[usize], modulate: bool) -> Result<Var> {
        let batch = s.graph.value(obs).rows();
        if styles.len() != batch {
            return Err(Error::shape("encode", format!("{} style ids for {batch} observations", styles.len())));
        }
        let style = self.style_embeddings(s, styles, modulate)?;
        let mut x = self.backbone(s, obs)?;
        for l in 0..self.blocks.len() {
            x = self.block(s, l, x, style, batch)?;
        }
        s.graph.group_mean(x, self.config.tokens)
    }
}

/// Pooled features of one observation, computed without gradient tracking.
pub fn encode_image(enc: &Csfe, reg: &ParamRegistry, observation: &[f64], style_id: usize) -> Result<Vec<f64>> {
    let mut s = Session::new(reg, false);
    let obs = s.graph.constant(Tensor::new(vec![1, observation.len()], observation.to_vec())?);
    let f = enc.encode(&mut s, obs, &[style_id], true)?;
    Ok(s.graph.value(f).data().to_vec())
}

/// Same as [`encode_image`] with style modulation switched off.
pub fn encode_vanilla(enc: &Csfe, reg: &ParamRegistry, observation: &[f64], style_id: usize) -> Result<Vec<f64>> {
    let mut s = Session::new(reg, false);
    let obs = s.graph.constant(Tensor::new(vec![1, observation.len()], observation.to_vec())?);
    let f = enc.encode(&mut s, obs, &[style_id], false)?;
    Ok(s.graph.value(f).data().to_vec())
}

#[cfg(test)]
mod tests;
