//! Anchor projection and the in-context decoder.
//!
//! Encoder features are projected into an anchor space shared with the
//! class label embeddings. An episode is the sequence
//! `[anchor(ctx_1), label_1, ..., anchor(ctx_k), label_k, anchor(target)]`,
//! read by a frozen pre-norm transformer whose linear maps carry low-rank
//! adapters. The hidden state at the target position goes through a linear
//! head and is scored against every label embedding by cosine similarity.

use serde::{Deserialize, Serialize};

use crate::csfe::{attention_core, LN_EPS};
use crate::diffcore::{Graph, ParamId, ParamRegistry, Session, Tensor, Var};
use crate::error::{Error, Result};

pub const LORA_HOSTS: [&str; 6] = ["wq", "wk", "wv", "wo", "ff1", "ff2"];

/// Token type rows of the decoder's type embedding.
const TYPE_CONTEXT: usize = 0;
const TYPE_LABEL: usize = 1;
const TYPE_TARGET: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub anchor_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub lora_rank: usize,
    /// LoRA scale numerator; `None` means equal to the rank (scale 1).
    pub lora_alpha: Option<f64>,
    /// Host maps that receive adapters, any of `wq wk wv wo ff1 ff2`.
    pub lora_targets: Vec<String>,
    /// Decoder blocks that receive adapters; empty means all.
    pub lora_layers: Vec<usize>,
    pub max_shots: usize,
    /// Temperature of the cosine classification head.
    pub head_temperature: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            anchor_dim: 32,
            blocks: 2,
            heads: 2,
            ff_width: 64,
            lora_rank: 16,
            lora_alpha: None,
            lora_targets: LORA_HOSTS.iter().map(|s| s.to_string()).collect(),
            lora_layers: Vec::new(),
            max_shots: 8,
            head_temperature: 0.07,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, bad: &mut Vec<String>) {
        for (k, v) in [
            ("anchor_dim", self.anchor_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("lora_rank", self.lora_rank),
            ("max_shots", self.max_shots),
        ] {
            if v == 0 {
                bad.push(format!("model.decoder.{k} must be positive"));
            }
        }
        if self.heads > 0 && !self.anchor_dim.is_multiple_of(self.heads) {
            bad.push(format!("model.decoder.anchor_dim ({}) must be divisible by heads ({})", self.anchor_dim, self.heads));
        }
        if self.lora_rank > self.anchor_dim.min(self.ff_width) {
            bad.push(format!(
                "model.decoder.lora_rank ({}) exceeds min(d_in, d_out) = {}",
                self.lora_rank,
                self.anchor_dim.min(self.ff_width)
            ));
        }
        for t in &self.lora_targets {
            if !LORA_HOSTS.contains(&t.as_str()) {
                bad.push(format!("model.decoder.lora_targets: unknown host `{t}` (expected one of {LORA_HOSTS:?})"));
            }
        }
        for l in &self.lora_layers {
            if *l >= self.blocks {
                bad.push(format!("model.decoder.lora_layers: block {l} does not exist ({} blocks)", self.blocks));
            }
        }
        if !(self.head_temperature > 0.0 && self.head_temperature.is_finite()) {
            bad.push(format!("model.decoder.head_temperature must be positive (got {})", self.head_temperature));
        }
        if let Some(a) = self.lora_alpha {
            if !(a.is_finite() && a > 0.0) {
                bad.push(format!("model.decoder.lora_alpha must be positive (got {a})"));
            }
        }
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64) / self.lora_rank as f64
    }

    fn adapted(&self, layer: usize, host: &str) -> bool {
        (self.lora_layers.is_empty() || self.lora_layers.contains(&layer)) && self.lora_targets.iter().any(|t| t == host)
    }
}

/// `x · W + b` for rows of `x`.
pub fn anchor_project(g: &mut Graph, f: Var, w: Var, b: Var) -> Result<Var> {
    let (din, d) = (g.value(f).last_dim(), g.shape(w)[0]);
    if din != d {
        return Err(Error::shape("anchor_project", format!("features of width {din} for a projection from {d}")));
    }
    let y = g.matmul(f, w)?;
    g.add_row(y, b)
}

/// `host(x) + scale · (x Aᵀ) Bᵀ` with `A: [r, d_in]`, `B: [d_out, r]`, host `W: [d_in, d_out]`.
pub fn lora_apply(g: &mut Graph, x: Var, host_w: Var, host_b: Option<Var>, a: Var, b: Var, scale: f64) -> Result<Var> {
    let (ws, as_, bs) = (g.shape(host_w).to_vec(), g.shape(a).to_vec(), g.shape(b).to_vec());
    if as_.len() != 2 || bs.len() != 2 || as_[1] != ws[0] || bs[0] != ws[1] || as_[0] != bs[1] {
        return Err(Error::shape(
            "lora_apply",
            format!("host {ws:?} with A {as_:?} and B {bs:?} (expected A [r, {}], B [{}, r])", ws[0], ws[1]),
        ));
    }
    let mut y = g.matmul(x, host_w)?;
    if let Some(hb) = host_b {
        y = g.add_row(y, hb)?;
    }
    let low = g.matmul_nt(x, a)?;
    let up = g.matmul_nt(low, b)?;
    let up = g.scale(up, scale)?;
    g.add(y, up)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn trainable_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    fn forward(&self, s: &mut Session, x: Var, use_adapters: bool) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        match (&self.lora, use_adapters) {
            (Some(l), true) => {
                let (a, bb) = (s.param(l.a), s.param(l.b));
                lora_apply(&mut s.graph, x, w, b, a, bb, l.scale)
            }
            _ => {
                let y = s.graph.matmul(x, w)?;
                match b {
                    Some(b) => s.graph.add_row(y, b),
                    None => Ok(y),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// One in-context episode over a pool of encoded samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `(pool row, class label)` per context example.
    pub context: Vec<(usize, usize)>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Saicd {
    pub config: DecoderConfig,
    pub d_model: usize,
    pub n_classes: usize,
    pub anchor_w: ParamId,
    pub anchor_b: ParamId,
    /// Whether the anchor projection and adapters train (off in the no-decoder-adaptation variant).
    pub adapted: bool,
    pub blocks: Vec<DecoderBlock>,
    pub type_embedding: ParamId,
    pub label_embedding: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Saicd {
    /// Registers the decoder. `labels` holds one `[anchor_dim]` embedding per class.
    ///
    /// With `adapted` unset the anchor projection is a frozen coordinate
    /// selection and no adapters are attached.
    pub fn register(
        reg: &mut ParamRegistry,
        cfg: &DecoderConfig,
        d_model: usize,
        labels: &Tensor,
        adapted: bool,
        seed: u64,
    ) -> Result<Self> {
        let da = cfg.anchor_dim;
        if labels.rank() != 2 || labels.last_dim() != da {
            return Err(Error::shape("saicd", format!("label embeddings {:?} do not match anchor_dim {da}", labels.shape())));
        }
        let n_classes = labels.rows();
        let (anchor_w, anchor_b) = if adapted {
            (
                reg.register_randn("saicd.anchor.w", &[d_model, da], 1.0 / (d_model as f64).sqrt(), true, seed)?,
                reg.register("saicd.anchor.b", Tensor::zeros(&[da]), true)?,
            )
        } else {
            let mut sel = Tensor::zeros(&[d_model, da]);
            for i in 0..d_model.min(da) {
                sel.data_mut()[i * da + i] = 1.0;
            }
            (reg.register("saicd.anchor.w", sel, false)?, reg.register("saicd.anchor.b", Tensor::zeros(&[da]), false)?)
        };
        let scale = cfg.lora_scale();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let p = format!("saicd.decoder.block{l}");
            let lin = |reg: &mut ParamRegistry, host: &str, din: usize, dout: usize, bias: bool| -> Result<Linear> {
                let w = reg.register_randn(&format!("{p}.{host}"), &[din, dout], 1.0 / (din as f64).sqrt(), false, seed)?;
                let b = if bias { Some(reg.register_randn(&format!("{p}.{host}_b"), &[dout], 0.02, false, seed)?) } else { None };
                let lora = if adapted && cfg.adapted(l, host) {
                    let r = cfg.lora_rank;
                    Some(LoraAdapter {
                        a: reg.register_randn(&format!("{p}.{host}.lora_a"), &[r, din], 1.0 / (din as f64).sqrt(), true, seed)?,
                        b: reg.register(format!("{p}.{host}.lora_b"), Tensor::zeros(&[dout, r]), true)?,
                        rank: r,
                        d_in: din,
                        d_out: dout,
                        scale,
                    })
                } else {
                    None
                };
                Ok(Linear { w, b, lora })
            };
            blocks.push(DecoderBlock {
                wq: lin(reg, "wq", da, da, false)?,
                wk: lin(reg, "wk", da, da, false)?,
                wv: lin(reg, "wv", da, da, false)?,
                wo: lin(reg, "wo", da, da, false)?,
                ff1: lin(reg, "ff1", da, cfg.ff_width, true)?,
                ff2: lin(reg, "ff2", cfg.ff_width, da, true)?,
            });
        }
        let type_embedding = reg.register_randn("saicd.decoder.type_embedding", &[3, da], 0.5, false, seed)?;
        let label_embedding = reg.register("saicd.decoder.label_embedding", labels.clone(), false)?;
        let head_w = reg.register("saicd.head.w", Tensor::eye(da), true)?;
        let head_b = reg.register("saicd.head.b", Tensor::zeros(&[da]), true)?;
        Ok(Self {
            config: cfg.clone(),
            d_model,
            n_classes,
            anchor_w,
            anchor_b,
            adapted,
            blocks,
            type_embedding,
            label_embedding,
            head_w,
            head_b,
        })
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.wq, &b.wk, &b.wv, &b.wo, &b.ff1, &b.ff2])
            .filter_map(|l| l.lora.as_ref())
    }

    /// Closed-form count of trainable entries: adapters, anchor projection and head.
    pub fn trainable_count(&self) -> usize {
        let da = self.config.anchor_dim;
        let anchor = if self.adapted { self.d_model * da + da } else { 0 };
        let head = da * da + da;
        anchor + head + self.adapters().map(LoraAdapter::trainable_count).sum::<usize>()
    }

    pub fn anchor(&self, s: &mut Session, features: Var) -> Result<Var> {
        let (w, b) = (s.param(self.anchor_w), s.param(self.anchor_b));
        anchor_project(&mut s.graph, features, w, b)
    }

    fn check_episodes(&self, episodes: &[Episode], pool: usize) -> Result<usize> {
        let first = episodes.first().ok_or_else(|| Error::Contract("no episodes to decode".into()))?;
        let k = first.context.len();
        if k == 0 {
            return Err(Error::Contract("in-context prediction needs at least one context example".into()));
        }
        if k > self.config.max_shots {
            return Err(Error::Contract(format!("{k} context examples exceed max_shots = {}", self.config.max_shots)));
        }
        for e in episodes {
            if e.context.len() != k {
                return Err(Error::Contract("episodes decoded together must share a context size".into()));
            }
            if let Some(&(_, l)) = e.context.iter().find(|(_, l)| *l >= self.n_classes) {
                return Err(Error::Domain(format!("label {l} outside the {} classes", self.n_classes)));
            }
            if e.target >= pool || e.context.iter().any(|(r, _)| *r >= pool) {
                return Err(Error::Domain(format!("episode refers past the {pool} encoded samples")));
            }
        }
        Ok(k)
    }

    /// Hidden state `[episodes, anchor_dim]` at each target position.
    ///
    /// `anchors` is the `[pool, anchor_dim]` matrix every episode indexes into.
    pub fn decode(&self, s: &mut Session, anchors: Var, episodes: &[Episode], use_adapters: bool) -> Result<Var> {
        let pool = s.graph.value(anchors).rows();
        let k = self.check_episodes(episodes, pool)?;
        let len = 2 * k + 1;
        let mut rows = Vec::with_capacity(episodes.len() * len);
        let mut types = Vec::with_capacity(episodes.len() * len);
        for e in episodes {
            for &(r, l) in &e.context {
                rows.extend([r, pool + l]);
                types.extend([TYPE_CONTEXT, TYPE_LABEL]);
            }
            rows.push(e.target);
            types.push(TYPE_TARGET);
        }
        let labels = s.param(self.label_embedding);
        let table = s.graph.concat_rows(&[anchors, labels])?;
        let x = s.graph.gather_rows(table, rows)?;
        let te = s.param(self.type_embedding);
        let t = s.graph.gather_rows(te, types)?;
        let mut x = s.graph.add(x, t)?;
        let n = episodes.len();
        for b in &self.blocks {
            let h = s.graph.layer_norm(x, LN_EPS)?;
            let q = b.wq.forward(s, h, use_adapters)?;
            let kk = b.wk.forward(s, h, use_adapters)?;
            let v = b.wv.forward(s, h, use_adapters)?;
            let (att, _) = attention_core(&mut s.graph, q, kk, v, n, len, self.config.heads)?;
            let o = b.wo.forward(s, att, use_adapters)?;
            x = s.graph.add(x, o)?;
            let h = s.graph.layer_norm(x, LN_EPS)?;
            let h = b.ff1.forward(s, h, use_adapters)?;
            let h = s.graph.gelu(h)?;
            let h = b.ff2.forward(s, h, use_adapters)?;
            x = s.graph.add(x, h)?;
        }
        s.graph.gather_rows(x, (0..n).map(|i| i * len + len - 1).collect())
    }

    /// Joint-space embedding `z · W_h + b_h`.
    pub fn head(&self, s: &mut Session, hidden: Var) -> Result<Var> {
        let (w, b) = (s.param(self.head_w), s.param(self.head_b));
        let y = s.graph.matmul(hidden, w)?;
        s.graph.add_row(y, b)
    }

    /// Class logits: cosine of each embedding with each label embedding over the temperature.
    pub fn class_logits(&self, s: &mut Session, embedding: Var) -> Result<Var> {
        let labels = s.param(self.label_embedding);
        let e = s.graph.normalize_rows(embedding)?;
        let l = s.graph.normalize_rows(labels)?;
        let c = s.graph.matmul_nt(e, l)?;
        s.graph.scale(c, 1.0 / self.config.head_temperature)
    }
}
