//! Run configuration and the file-based stages driven by the command line.
//!
//! Stages talk to each other only through files under the output directory:
//!
//! ```text
//! data/dataset.bin            gen-data
//! train/checkpoint.bin        train (plus metrics.csv, metrics.jsonl, epochs.csv)
//! eval/eval.json              eval
//! fewshot/shot_curve.json     fewshot
//! ablation/ablation.json      ablate (plus logs/)
//! report/                     report (CSV tables, report.json, plot_data.json)
//! ```
//!
//! Every stage directory also receives `resolved_config.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codec;
use crate::error::{Error, Result};
use crate::evalkit::{
    ablation_suite_with, cross_style_report, disentanglement_report, fewshot_icl_eval, AblationTable, ContentOracle, Disentanglement,
    EvalConfig, EvalReport, FeatureEncoder, ObservationEncoder, ParamCounts, RandomEncoder, ShotPoint, StyleTable,
};
use crate::seed::derive_seed;
use crate::synthstyle::{generate_dataset, Dataset, DatasetConfig};
use crate::trainkit::{load_checkpoint, save_checkpoint, train_run_with, Checkpoint, TrainConfig};

pub const OUT_ENV: &str = "STYLESHIFT_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// CSV tables, `report.json` and `plot_data.json`.
    #[default]
    All,
    Csv,
    Json,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub format: ReportFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub out_dir: String,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            out_dir: "out".into(),
            data: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
        };
        c.derive_seeds();
        c
    }
}

/// Dotted paths present in `value` but not in `known`.
fn unknown_keys(value: &toml::Value, known: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(t), serde_json::Value::Object(k)) = (value, known) {
        for (key, v) in t {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(sub) => unknown_keys(v, sub, &path, out),
                None => out.push(format!("unknown key `{path}`")),
            }
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to `root`, creating tables on the way.
fn apply_override(root: &mut toml::Table, entry: &str, bad: &mut Vec<String>) {
    let Some((path, raw)) = entry.split_once('=') else {
        bad.push(format!("override `{entry}` is not of the form key.path=value"));
        return;
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bad.push(format!("override `{entry}` has an empty key"));
        return;
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => table = t,
            _ => {
                bad.push(format!("override `{entry}`: `{k}` is not a section"));
                return;
            }
        }
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
}

impl RunConfig {
    /// Parses TOML text plus `key.path=value` overrides. Unknown keys and
    /// invalid values are all reported together.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![format!("config is not valid TOML: {e}")]))?;
        let mut bad = Vec::new();
        for o in overrides {
            apply_override(&mut root, o, &mut bad);
        }
        let known = serde_json::to_value(Self::default())?;
        let value = toml::Value::Table(root);
        unknown_keys(&value, &known, "", &mut bad);
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.derive_seeds();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => String::from_utf8(codec::read_file(p)?).map_err(|_| Error::Config(vec![format!("{} is not UTF-8", p.display())]))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Fills the per-section seeds from the master seed.
    pub fn derive_seeds(&mut self) {
        self.data.seed = derive_seed(self.seed, "data");
        self.train.seed = derive_seed(self.seed, "train");
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "eval")
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        (0..self.eval.ablation_seeds).map(|i| derive_seed(self.seed, &format!("ablation/{i}"))).collect()
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::from([
            ("data".to_string(), self.data.seed),
            ("train".to_string(), self.train.seed),
            ("eval".to_string(), self.eval_seed()),
        ]);
        for (i, s) in self.ablation_seeds().into_iter().enumerate() {
            m.insert(format!("ablation/{i}"), s);
        }
        m
    }

    pub fn validate(&self, bad: &mut Vec<String>) {
        if let Err(Error::Config(v)) = self.data.validate() {
            bad.extend(v);
        }
        self.train.validate(bad);
        self.eval.validate(self.train.model.decoder.max_shots, bad);
        if self.data.target_dim != self.train.model.decoder.anchor_dim {
            bad.push(format!(
                "data.target_dim ({}) must equal train.model.decoder.anchor_dim ({})",
                self.data.target_dim, self.train.model.decoder.anchor_dim
            ));
        }
        if self.out_dir.is_empty() {
            bad.push("out_dir must not be empty".into());
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

    /// The configuration with every default filled in, as TOML.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// What a stage did, for the caller to print.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: &'static str,
    /// `written` or `unchanged`.
    pub status: &'static str,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&codec::read_file(path)?)?)
}

#[derive(Serialize, Deserialize)]
struct EvalArtifact {
    config: String,
    master_seed: u64,
    dataset_hash: String,
    feature_space: String,
    disentanglement: BTreeMap<String, Disentanglement>,
    style_table: StyleTable,
    params: ParamCounts,
}

#[derive(Serialize, Deserialize)]
struct ShotArtifact {
    config: String,
    master_seed: u64,
    dataset_hash: String,
    shot_curve: Vec<ShotPoint>,
}

#[derive(Serialize, Deserialize)]
struct AblationArtifact {
    config: String,
    master_seed: u64,
    dataset_hash: String,
    table: AblationTable,
}

impl Pipeline {
    /// `out_root` (normally from the environment) replaces `out_dir` when set.
    pub fn new(config: RunConfig, out_root: Option<PathBuf>) -> Self {
        let out = out_root.unwrap_or_else(|| PathBuf::from(&config.out_dir));
        Self { config, out }
    }

    pub fn from_env(config: RunConfig) -> Self {
        let root = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        Self::new(config, root)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out.join("data").join("dataset.bin")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("train").join("checkpoint.bin")
    }

    pub fn ablation_path(&self) -> PathBuf {
        self.out.join("ablation").join("ablation.json")
    }

    fn write(&self, files: &mut Vec<PathBuf>, path: PathBuf, bytes: &[u8]) -> Result<()> {
        codec::write_file(&path, bytes)?;
        files.push(path);
        Ok(())
    }

    fn write_config(&self, files: &mut Vec<PathBuf>, dir: &str) -> Result<()> {
        let text = self.config.resolved_toml()?;
        self.write(files, self.out.join(dir).join("resolved_config.toml"), text.as_bytes())
    }

    /// Loads the dataset and checks it came from the current data settings.
    fn dataset(&self) -> Result<Dataset> {
        let d = Dataset::load(&self.dataset_path())?;
        if d.config != self.config.data {
            return Err(Error::State(format!(
                "{} was generated from different data settings; rerun gen-data",
                self.dataset_path().display()
            )));
        }
        Ok(d)
    }

    fn checkpoint(&self, data: &Dataset) -> Result<Checkpoint> {
        let c = load_checkpoint(&self.checkpoint_path())?;
        if c.dataset_hash != data.content_hash() {
            return Err(Error::State(format!("{} was trained on a different dataset; rerun train", self.checkpoint_path().display())));
        }
        Ok(c)
    }

    pub fn gen_data(&self) -> Result<StageOutcome> {
        let data = generate_dataset(&self.config.data)?;
        let bytes = data.to_bytes();
        let hash = codec::sha256_hex(&bytes);
        let path = self.dataset_path();
        let summary = json!({
            "hash": hash,
            "train": data.train.len(),
            "val": data.val.len(),
            "test": data.test.len(),
        });
        if path.exists() && codec::sha256_hex(&codec::read_file(&path)?) == hash {
            return Ok(StageOutcome { stage: "gen-data", status: "unchanged", files: vec![path], summary });
        }
        let mut files = Vec::new();
        self.write(&mut files, path, &bytes)?;
        self.write(&mut files, self.out.join("data").join("dataset.csv"), &data.to_csv()?)?;
        self.write_config(&mut files, "data")?;
        Ok(StageOutcome { stage: "gen-data", status: "written", files, summary })
    }

    pub fn train(&self, progress: &mut dyn FnMut(String)) -> Result<StageOutcome> {
        let data = self.dataset()?;
        let out = train_run_with(&self.config.train, &data, |e| {
            progress(format!(
                "epoch {} total {:.4} info_nce {:.4} semantic {:.4} cycle {:.4} val_accuracy {:.3}",
                e.epoch, e.total, e.info_nce, e.semantic, e.cycle, e.val_accuracy
            ))
        })?;
        let dir = self.out.join("train");
        let mut files = Vec::new();
        let ck = self.checkpoint_path();
        save_checkpoint(&out.checkpoint, &ck)?;
        files.push(ck);
        self.write(&mut files, dir.join("metrics.csv"), &out.log.steps_csv()?)?;
        self.write(&mut files, dir.join("metrics.jsonl"), &out.log.steps_jsonl()?)?;
        self.write(&mut files, dir.join("epochs.csv"), &out.log.epochs_csv()?)?;
        self.write_config(&mut files, "train")?;
        let last = out.log.epochs.last().copied();
        let summary = json!({
            "steps": out.checkpoint.step,
            "final_epoch": last,
            "frozen_checksum": out.checkpoint.frozen_checksum(),
            "params": ParamCounts::of(&out.checkpoint.model),
        });
        Ok(StageOutcome { stage: "train", status: "written", files, summary })
    }

    fn disentanglement_all(&self, data: &Dataset, ck: &Checkpoint) -> Result<BTreeMap<String, Disentanglement>> {
        let seed = derive_seed(self.config.eval_seed(), "disentanglement");
        let n = self.config.eval.n_pairs;
        let random = RandomEncoder { dim: self.config.train.model.encoder.d_model, seed: derive_seed(seed, "random") };
        let encoders: [&dyn FeatureEncoder; 4] = [&ck.model, &ObservationEncoder, &ContentOracle, &random];
        encoders.iter().map(|e| Ok((e.name().to_string(), disentanglement_report(*e, &data.test, n, seed)?))).collect()
    }

    fn shot_curve(&self, data: &Dataset, ck: &Checkpoint) -> Result<Vec<ShotPoint>> {
        let e = &self.config.eval;
        fewshot_icl_eval(&ck.model, data, &e.shots, e.trials, derive_seed(self.config.eval_seed(), "fewshot"))
    }

    fn style_table(&self, data: &Dataset, ck: &Checkpoint) -> Result<StyleTable> {
        cross_style_report(&ck.model, data, self.config.eval.table_shots, self.config.eval_seed())
    }

    pub fn eval(&self) -> Result<StageOutcome> {
        let data = self.dataset()?;
        let ck = self.checkpoint(&data)?;
        let art = EvalArtifact {
            config: self.config.resolved_toml()?,
            master_seed: self.config.seed,
            dataset_hash: data.content_hash(),
            feature_space: EvalReport::new(String::new(), 0).feature_space,
            disentanglement: self.disentanglement_all(&data, &ck)?,
            style_table: self.style_table(&data, &ck)?,
            params: ParamCounts::of(&ck.model),
        };
        let mut files = Vec::new();
        self.write(&mut files, self.out.join("eval").join("eval.json"), &json_bytes(&art)?)?;
        self.write_config(&mut files, "eval")?;
        let summary = json!({ "disentanglement": art.disentanglement, "average": art.style_table.average });
        Ok(StageOutcome { stage: "eval", status: "written", files, summary })
    }

    pub fn fewshot(&self) -> Result<StageOutcome> {
        let data = self.dataset()?;
        let ck = self.checkpoint(&data)?;
        let art = ShotArtifact {
            config: self.config.resolved_toml()?,
            master_seed: self.config.seed,
            dataset_hash: data.content_hash(),
            shot_curve: self.shot_curve(&data, &ck)?,
        };
        let mut files = Vec::new();
        self.write(&mut files, self.out.join("fewshot").join("shot_curve.json"), &json_bytes(&art)?)?;
        self.write_config(&mut files, "fewshot")?;
        Ok(StageOutcome { stage: "fewshot", status: "written", files, summary: json!(art.shot_curve) })
    }

    pub fn ablate(&self, progress: &(dyn Fn(String) + Sync)) -> Result<StageOutcome> {
        let data = self.dataset()?;
        let out = ablation_suite_with(&self.config.train, &data, &self.config.ablation_seeds(), &self.config.eval, |m| {
            progress(format!("{} seed {}: val_accuracy {:.3} gap {:.3}", m.variant.id(), m.seed, m.val_accuracy, m.gap))
        })?;
        let art = AblationArtifact {
            config: self.config.resolved_toml()?,
            master_seed: self.config.seed,
            dataset_hash: data.content_hash(),
            table: out.table,
        };
        let dir = self.out.join("ablation");
        let mut files = Vec::new();
        for (v, seed, log) in &out.logs {
            self.write(&mut files, dir.join("logs").join(format!("{}_{seed}.csv", v.id())), &log.steps_csv()?)?;
        }
        self.write(&mut files, self.ablation_path(), &json_bytes(&art)?)?;
        self.write_config(&mut files, "ablation")?;
        Ok(StageOutcome { stage: "ablate", status: "written", files, summary: json!(art.table.rows) })
    }

    /// Assembles the full report from the dataset, the checkpoint and the
    /// ablation results, then writes it.
    pub fn report(&self) -> Result<StageOutcome> {
        let data = self.dataset()?;
        let ck = self.checkpoint(&data)?;
        let abl: AblationArtifact = read_json(&self.ablation_path())?;
        if abl.dataset_hash != data.content_hash() {
            return Err(Error::State(format!("{} was computed on a different dataset; rerun ablate", self.ablation_path().display())));
        }
        let mut report = EvalReport::new(self.config.resolved_toml()?, self.config.seed);
        report.seeds = self.config.seeds();
        report.disentanglement = Some(self.disentanglement_all(&data, &ck)?);
        report.shot_curve = Some(self.shot_curve(&data, &ck)?);
        report.style_table = Some(self.style_table(&data, &ck)?);
        report.params = Some(ParamCounts::of(&ck.model));
        report.ablation = Some(abl.table);
        let mut files = emit_report(&report, &self.out.join("report"), self.config.report.format)?;
        self.write_config(&mut files, "report")?;
        Ok(StageOutcome { stage: "report", status: "written", files, summary: json!({ "sections": 5 }) })
    }
}

fn csv_table(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

/// Writes the report's tables and plot data into `dir`. Nothing is written
/// unless every section is present.
pub fn emit_report(report: &EvalReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    report.check_complete()?;
    let (dis, shots, abl, styles, params) = (
        report.disentanglement.as_ref().expect("checked"),
        report.shot_curve.as_ref().expect("checked"),
        report.ablation.as_ref().expect("checked"),
        report.style_table.as_ref().expect("checked"),
        report.params.as_ref().expect("checked"),
    );
    let mut outputs: Vec<(&str, Vec<u8>)> = Vec::new();
    if format != ReportFormat::Json {
        outputs.push((
            "ablation.csv",
            csv_table(
                &["variant", "val_accuracy", "test_accuracy", "similarity", "gap", "trainable_params"],
                abl.rows
                    .iter()
                    .map(|r| {
                        vec![
                            r.variant.id().to_string(),
                            r.val_accuracy.to_string(),
                            r.test_accuracy.to_string(),
                            r.similarity.to_string(),
                            r.gap.to_string(),
                            r.trainable_params.to_string(),
                        ]
                    })
                    .collect(),
            )?,
        ));
        outputs.push((
            "style_generalization.csv",
            csv_table(
                &["style", "accuracy", "similarity"],
                styles
                    .rows
                    .iter()
                    .chain(std::iter::once(&styles.average))
                    .map(|r| vec![r.style.clone(), r.accuracy.to_string(), r.similarity.to_string()])
                    .collect(),
            )?,
        ));
        outputs.push((
            "shot_curve.csv",
            csv_table(
                &["shots", "accuracy", "similarity"],
                shots.iter().map(|p| vec![p.shots.to_string(), p.accuracy.to_string(), p.similarity.to_string()]).collect(),
            )?,
        ));
        outputs.push((
            "disentanglement.csv",
            csv_table(
                &["encoder", "sim_same_content_diff_style", "sim_diff_content_same_style", "gap"],
                dis.iter()
                    .map(|(k, d)| {
                        vec![
                            k.clone(),
                            d.sim_same_content_diff_style.to_string(),
                            d.sim_diff_content_same_style.to_string(),
                            d.gap.to_string(),
                        ]
                    })
                    .collect(),
            )?,
        ));
    }
    if format != ReportFormat::Csv {
        outputs.push(("report.json", json_bytes(report)?));
        let bars: BTreeMap<&String, [f64; 3]> =
            dis.iter().map(|(k, d)| (k, [d.sim_same_content_diff_style, d.sim_diff_content_same_style, d.gap])).collect();
        let plot = json!({
            "shot_curve": {
                "x": shots.iter().map(|p| p.shots).collect::<Vec<_>>(),
                "accuracy": shots.iter().map(|p| p.accuracy).collect::<Vec<_>>(),
                "similarity": shots.iter().map(|p| p.similarity).collect::<Vec<_>>(),
            },
            "disentanglement": {
                "labels": ["sim_same_content_diff_style", "sim_diff_content_same_style", "gap"],
                "bars": bars,
            },
            "params": params,
        });
        outputs.push(("plot_data.json", json_bytes(&plot)?));
    }
    let mut files = Vec::new();
    for (name, bytes) in outputs {
        let p = dir.join(name);
        codec::write_file(&p, &bytes)?;
        files.push(p);
    }
    Ok(files)
}
