//! Procedural multi-style dataset with known content and style factors.
//!
//! Each content class owns a latent vector. An observation is a shared
//! nonlinear render of that latent, pushed through a per-style invertible
//! affine map, plus Gaussian noise. The paired target embedding is a fixed
//! linear map of the latent and therefore ignores style entirely.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::diffcore::{AdamWConfig, AdamWState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::seed::stream;

pub const DEFAULT_STYLE_NAMES: [&str; 5] =
    ["Photorealistic", "Cartoon/Comic", "Sketch/Line Art", "Impressionist", "Abstract"];

const MAGIC: &[u8; 4] = b"SSDS";
pub const FORMAT_VERSION: u32 = 1;
const MAX_CONDITION: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_contents: usize,
    pub n_styles: usize,
    pub content_dim: usize,
    pub obs_dim: usize,
    /// Dimension of the paired target embedding; must match the anchor space.
    pub target_dim: usize,
    pub samples_per_cell: usize,
    pub noise_std: f64,
    /// Per-sample Gaussian perturbation of the content latent before rendering.
    pub latent_jitter: f64,
    pub label_noise: f64,
    /// Styles each content class never shows in the training split. Cell
    /// `(c, s)` is withheld when `(c + s) % n_styles < unseen_styles`.
    pub unseen_styles: usize,
    /// Standard deviation of the per-style additive offset.
    pub style_offset_std: f64,
    /// Strength of the random perturbation of the identity in each style matrix.
    pub style_mix: f64,
    /// Empty means the default names (then `style_<i>` past the fifth).
    pub style_names: Vec<String>,
    /// Filled from the run's master seed; never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_contents: 10,
            n_styles: 5,
            content_dim: 8,
            obs_dim: 32,
            target_dim: 32,
            samples_per_cell: 40,
            noise_std: 0.1,
            latent_jitter: 0.3,
            label_noise: 0.0,
            unseen_styles: 2,
            style_offset_std: 1.5,
            style_mix: 0.3,
            style_names: Vec::new(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_contents < 2 {
            bad.push(format!("data.n_contents must be >= 2 (got {})", self.n_contents));
        }
        if self.n_styles < 2 {
            bad.push(format!("data.n_styles must be >= 2 (got {})", self.n_styles));
        }
        for (k, v) in [("content_dim", self.content_dim), ("obs_dim", self.obs_dim), ("target_dim", self.target_dim)] {
            if v == 0 {
                bad.push(format!("data.{k} must be positive"));
            }
        }
        if self.samples_per_cell == 0 {
            bad.push("data.samples_per_cell is 0: every (content, style) cell needs samples".into());
        } else if self.samples_per_cell < 3 {
            bad.push(format!("data.samples_per_cell must be >= 3 to fill train/val/test (got {})", self.samples_per_cell));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bad.push(format!("data.noise_std must be finite and >= 0 (got {})", self.noise_std));
        }
        if !(self.latent_jitter >= 0.0 && self.latent_jitter.is_finite()) {
            bad.push(format!("data.latent_jitter must be finite and >= 0 (got {})", self.latent_jitter));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            bad.push(format!("data.label_noise must lie in [0, 1) (got {})", self.label_noise));
        }
        if !(self.style_offset_std >= 0.0 && self.style_offset_std.is_finite()) {
            bad.push("data.style_offset_std must be finite and >= 0".into());
        }
        if !(self.style_mix >= 0.0 && self.style_mix < 1.0) {
            bad.push(format!("data.style_mix must lie in [0, 1) (got {})", self.style_mix));
        }
        if self.n_styles >= 2 && self.unseen_styles > self.n_styles - 2 {
            bad.push(format!(
                "data.unseen_styles must leave each content at least two training styles (got {} of {})",
                self.unseen_styles, self.n_styles
            ));
        }
        if !self.style_names.is_empty() && self.style_names.len() != self.n_styles {
            bad.push(format!(
                "data.style_names has {} entries but data.n_styles is {}",
                self.style_names.len(),
                self.n_styles
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn style_name(&self, s: usize) -> String {
        if let Some(n) = self.style_names.get(s) {
            return n.clone();
        }
        DEFAULT_STYLE_NAMES.get(s).map(|n| n.to_string()).unwrap_or_else(|| format!("style_{s}"))
    }

    /// Whether training samples of cell `(content, style)` are withheld.
    pub fn is_unseen(&self, content: usize, style: usize) -> bool {
        (content + style) % self.n_styles < self.unseen_styles
    }

    /// `(train, val, test)` sample counts within one cell.
    pub fn cell_split(&self) -> (usize, usize, usize) {
        let n = self.samples_per_cell;
        let held = (n / 5).max(1);
        (n - 2 * held, held, held)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub uid: u64,
    pub content_id: usize,
    pub style_id: usize,
    pub content_latent: Vec<f64>,
    pub observation: Vec<f64>,
    pub target_embedding: Vec<f64>,
}

/// Per-style affine map applied to the render, plus the render gain.
#[derive(Clone, Debug)]
pub struct StyleTransform {
    pub matrix: Tensor,
    pub bias: Vec<f64>,
    pub gain: f64,
    pub condition: f64,
}

#[derive(Clone, Debug)]
struct World {
    latents: Vec<Vec<f64>>,
    render_w: Tensor,
    render_b: Vec<f64>,
    embed: Tensor,
    styles: Vec<StyleTransform>,
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn condition_number(m: &Tensor) -> f64 {
    let d = m.rows();
    let sv = DMatrix::from_row_slice(d, m.last_dim(), m.data()).singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl World {
    fn new(cfg: &DatasetConfig) -> Self {
        let (dc, d) = (cfg.content_dim, cfg.obs_dim);
        let latents = (0..cfg.n_contents)
            .map(|c| {
                let mut r = stream(cfg.seed, &format!("content/{c}"));
                (0..dc).map(|_| gauss(&mut r)).collect()
            })
            .collect();
        let mut r = stream(cfg.seed, "render");
        let render_w = Tensor::randn(&[d, dc], 1.0 / (dc as f64).sqrt(), &mut r);
        let render_b = (0..d).map(|_| 0.1 * gauss(&mut r)).collect();
        let mut r = stream(cfg.seed, "target-embedding");
        let embed = Tensor::randn(&[cfg.target_dim, dc], 1.0 / (dc as f64).sqrt(), &mut r);
        let styles = (0..cfg.n_styles)
            .map(|s| {
                let mut attempt = 0;
                loop {
                    let mut r = stream(cfg.seed, &format!("style/{s}/{attempt}"));
                    let g = Tensor::randn(&[d, d], cfg.style_mix / (d as f64).sqrt(), &mut r);
                    let mut matrix = Tensor::eye(d);
                    for (m, x) in matrix.data_mut().iter_mut().zip(g.data()) {
                        *m += x;
                    }
                    let condition = condition_number(&matrix);
                    let bias = (0..d).map(|_| cfg.style_offset_std * gauss(&mut r)).collect();
                    let gain = r.random_range(0.6..1.6);
                    if condition < MAX_CONDITION {
                        break StyleTransform { matrix, bias, gain, condition };
                    }
                    attempt += 1;
                }
            })
            .collect();
        Self { latents, render_w, render_b, embed, styles }
    }

    fn clean(&self, content: usize, style: usize) -> Vec<f64> {
        self.render(&self.latents[content], style)
    }

    fn render(&self, latent: &[f64], style: usize) -> Vec<f64> {
        let st = &self.styles[style];
        let pre = matvec(&self.render_w, latent);
        let r: Vec<f64> = pre.iter().zip(&self.render_b).map(|(a, b)| (st.gain * (a + b)).tanh()).collect();
        matvec(&st.matrix, &r).into_iter().zip(&st.bias).map(|(a, b)| a + b).collect()
    }

    fn target(&self, content: usize) -> Vec<f64> {
        matvec(&self.embed, &self.latents[content])
    }
}

pub struct Dataset {
    pub config: DatasetConfig,
    world: World,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("config", &self.config)
            .field("train", &self.train.len())
            .field("val", &self.val.len())
            .field("test", &self.test.len())
            .finish()
    }
}

fn noisy(clean: Vec<f64>, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    clean.into_iter().map(|x| x + std * gauss(rng)).collect()
}

impl World {
    /// One noisy observation of sample `uid`: its jittered latent rendered
    /// under `style`, plus pixel noise from `rng`. The jitter depends only on
    /// `uid`, so restyling a sample keeps its exact content.
    fn observe(&self, cfg: &DatasetConfig, uid: u64, content: usize, style: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut jr = stream(cfg.seed, &format!("jitter/{uid}"));
        let z: Vec<f64> = self.latents[content].iter().map(|x| x + cfg.latent_jitter * gauss(&mut jr)).collect();
        noisy(self.render(&z, style), cfg.noise_std, rng)
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let (n_train, n_val, _) = cfg.cell_split();
    let n = cfg.samples_per_cell;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..cfg.n_contents {
        let target = world.target(c);
        for s in 0..cfg.n_styles {
            for idx in 0..n {
                let split = if idx < n_train {
                    Split::Train
                } else if idx < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                let mut r = stream(cfg.seed, &format!("sample/{}/{c}/{s}/{idx}", split.name()));
                let uid = ((c * cfg.n_styles + s) * n + idx) as u64;
                let sample = Sample {
                    uid,
                    content_id: c,
                    style_id: s,
                    content_latent: world.latents[c].clone(),
                    observation: world.observe(cfg, uid, c, s, &mut r),
                    target_embedding: target.clone(),
                };
                match split {
                    Split::Train if cfg.is_unseen(c, s) => {}
                    Split::Train => train.push(sample),
                    Split::Val => val.push(sample),
                    Split::Test => test.push(sample),
                }
            }
        }
    }
    Ok(Dataset { config: cfg.clone(), world, train, val, test })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: DatasetConfig,
    seed: u64,
    counts: [usize; 3],
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn style_name(&self, s: usize) -> String {
        self.config.style_name(s)
    }

    pub fn style_transform(&self, s: usize) -> Option<&StyleTransform> {
        self.world.styles.get(s)
    }

    /// Target embedding of every content class, row `c` for class `c`.
    pub fn class_embeddings(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..self.config.n_contents).map(|c| self.world.target(c)).collect();
        Tensor::from_rows(&rows).expect("classes share the target dimension")
    }

    /// Noise-free observation of a content class under a style.
    pub fn clean_observation(&self, content: usize, style: usize) -> Result<Vec<f64>> {
        self.check_style(style)?;
        if content >= self.config.n_contents {
            return Err(Error::Domain(format!("content id {content} outside [0, {})", self.config.n_contents)));
        }
        Ok(self.world.clean(content, style))
    }

    fn check_style(&self, style: usize) -> Result<()> {
        if style >= self.config.n_styles {
            return Err(Error::Domain(format!("style id {style} outside [0, {})", self.config.n_styles)));
        }
        Ok(())
    }

    /// Re-renders `s` under `target_style` with fresh noise drawn from `nonce`.
    pub fn apply_style_transfer(&self, s: &Sample, target_style: usize, nonce: u64) -> Result<Sample> {
        self.check_style(target_style)?;
        if target_style == s.style_id {
            return Err(Error::Contract(format!("style transfer needs a different style; both are {target_style}")));
        }
        let mut r = stream(self.config.seed, &format!("transfer/{}/{target_style}/{nonce}", s.uid));
        let observation = self.world.observe(&self.config, s.uid, s.content_id, target_style, &mut r);
        Ok(Sample {
            uid: s.uid,
            content_id: s.content_id,
            style_id: target_style,
            content_latent: s.content_latent.clone(),
            observation,
            target_embedding: s.target_embedding.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            seed: self.config.seed,
            counts: [self.train.len(), self.val.len(), self.test.len()],
        };
        w.str(&serde_json::to_string(&header).expect("header serializes"));
        for split in Split::ALL {
            for s in self.split(split) {
                let mut rec = Writer::default();
                rec.u8(split as u8);
                rec.u64(s.uid);
                rec.u32(s.content_id as u32);
                rec.u32(s.style_id as u32);
                rec.f64s(&s.content_latent);
                rec.f64s(&s.observation);
                rec.f64s(&s.target_embedding);
                w.blob(&rec.buf);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(4).map_err(|_| Error::Format("dataset file too short".into()))? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("dataset format version {version}, expected {FORMAT_VERSION}")));
        }
        let header: Header = serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let mut config = header.config;
        config.seed = header.seed;
        config.validate()?;
        let world = World::new(&config);
        let mut out = Dataset { config, world, train: Vec::new(), val: Vec::new(), test: Vec::new() };
        let total: usize = header.counts.iter().sum();
        for _ in 0..total {
            let mut rec = Reader::new(r.blob()?, "dataset record");
            let split = match rec.u8()? {
                0 => Split::Train,
                1 => Split::Val,
                2 => Split::Test,
                t => return Err(Error::Integrity(format!("unknown split tag {t}"))),
            };
            let s = Sample {
                uid: rec.u64()?,
                content_id: rec.u32()? as usize,
                style_id: rec.u32()? as usize,
                content_latent: rec.f64s()?,
                observation: rec.f64s()?,
                target_embedding: rec.f64s()?,
            };
            rec.finish()?;
            match split {
                Split::Train => out.train.push(s),
                Split::Val => out.val.push(s),
                Split::Test => out.test.push(s),
            }
        }
        r.finish()?;
        if [out.train.len(), out.val.len(), out.test.len()] != header.counts {
            return Err(Error::Integrity("split counts disagree with the header".into()));
        }
        Ok(out)
    }

    /// SHA-256 of the serialized dataset.
    pub fn content_hash(&self) -> String {
        codec::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["split".to_string(), "uid".into(), "content_id".into(), "style_id".into(), "style_name".into()];
        header.extend((0..c.content_dim).map(|i| format!("latent_{i}")));
        header.extend((0..c.obs_dim).map(|i| format!("obs_{i}")));
        header.extend((0..c.target_dim).map(|i| format!("target_{i}")));
        w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
        for split in Split::ALL {
            for s in self.split(split) {
                let mut row = vec![
                    split.name().to_string(),
                    s.uid.to_string(),
                    s.content_id.to_string(),
                    s.style_id.to_string(),
                    self.style_name(s.style_id),
                ];
                row.extend(s.content_latent.iter().chain(&s.observation).chain(&s.target_embedding).map(f64::to_string));
                w.write_record(&row).map_err(|e| Error::Serde(e.to_string()))?;
            }
        }
        w.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Linear softmax classifier over standardized observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleProbe {
    pub n_styles: usize,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub weight: Tensor,
    pub bias: Tensor,
    pub trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.05 }
    }
}

impl StyleProbe {
    pub fn untrained(obs_dim: usize, n_styles: usize) -> Self {
        Self {
            n_styles,
            mean: vec![0.0; obs_dim],
            inv_std: vec![1.0; obs_dim],
            weight: Tensor::zeros(&[obs_dim, n_styles]),
            bias: Tensor::zeros(&[n_styles]),
            trained: false,
        }
    }

    fn standardize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter().zip(&self.mean).zip(&self.inv_std).map(|((x, m), s)| (x - m) * s).collect()
    }

    pub fn logits(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::State("style probe has not been trained".into()));
        }
        if obs.len() != self.mean.len() {
            return Err(Error::shape("classify_style", format!("observation of length {} for a probe over {}", obs.len(), self.mean.len())));
        }
        let x = self.standardize(obs);
        Ok((0..self.n_styles)
            .map(|k| self.bias.data()[k] + x.iter().enumerate().map(|(i, xi)| xi * self.weight.data()[i * self.n_styles + k]).sum::<f64>())
            .collect())
    }
}

/// Predicted style id; ties go to the lowest id.
pub fn classify_style(observation: &[f64], probe: &StyleProbe) -> Result<usize> {
    let l = probe.logits(observation)?;
    let mut best = 0;
    for (k, v) in l.iter().enumerate() {
        if *v > l[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Fits the probe on `samples`, corrupting each label with probability `label_noise`.
pub fn fit_style_probe(samples: &[Sample], n_styles: usize, label_noise: f64, seed: u64, cfg: &ProbeConfig) -> Result<StyleProbe> {
    let first = samples.first().ok_or_else(|| Error::Contract("cannot fit a style probe on no samples".into()))?;
    let d = first.observation.len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(&s.observation) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(&s.observation).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let inv_std = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
    let mut probe = StyleProbe { n_styles, mean, inv_std, weight: Tensor::zeros(&[d, n_styles]), bias: Tensor::zeros(&[n_styles]), trained: false };

    let mut rng = stream(seed, "probe/labels");
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| {
            if label_noise > 0.0 && rng.random::<f64>() < label_noise {
                (s.style_id + rng.random_range(1..n_styles)) % n_styles
            } else {
                s.style_id
            }
        })
        .collect();
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| probe.standardize(&s.observation)).collect();
    let x = Tensor::from_rows(&rows)?;
    let mut opt = AdamWState::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() }, &[d * n_styles, n_styles]);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.leaf(probe.weight.clone(), true);
        let b = g.leaf(probe.bias.clone(), true);
        let z = g.matmul(xv, w)?;
        let z = g.add_row(z, b)?;
        let ce = g.cross_entropy_rows(z, labels.clone())?;
        let loss = g.mean(ce)?;
        g.backward(loss)?;
        let (gw, gb) = (g.grad(w).expect("grad").clone(), g.grad(b).expect("grad").clone());
        opt.step(&mut [&mut probe.weight, &mut probe.bias], &[&gw, &gb])?;
    }
    probe.trained = true;
    Ok(probe)
}

pub fn probe_accuracy(probe: &StyleProbe, samples: &[Sample]) -> Result<f64> {
    let mut hit = 0usize;
    for s in samples {
        if classify_style(&s.observation, probe)? == s.style_id {
            hit += 1;
        }
    }
    Ok(hit as f64 / samples.len().max(1) as f64)
}
