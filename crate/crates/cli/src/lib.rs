//! Command implementations behind the `mtst` binary: config-file handling,
//! the train/evaluate/forecast/ablate/synth verbs, and the JSON artifacts
//! they emit. Everything here is deterministic under a fixed seed; wall
//! clock never reaches a result file except the per-epoch elapsed_seconds
//! mandated in the history stream.

use anyhow::{anyhow, bail, Context};
use mtst_core::checkpoint::{self, CheckpointMeta};
use mtst_core::config::{ablate, preset, AblateMode, BranchSpec, ModelConfig};
use mtst_core::data::{
    load_csv, split_windows, synth_multi_periodic, write_csv, MultivariateSeries, Split, SynthSpec,
};
use mtst_core::model::Mtst;
use mtst_core::posenc::PeKind;
use mtst_core::training::{self, evaluate, train, Metrics, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Structured run configuration, loaded from a TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; overridable by --out and the MTST_OUT variable.
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV dataset path; mutually exclusive with `synth`.
    pub path: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    /// (train, val, test) fractions; presets carry their own default.
    pub ratios: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub length: usize,
    pub periods: Vec<f64>,
    /// Defaults to 1.0 per period.
    pub amplitudes: Option<Vec<f64>>,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "one")]
    pub variates: usize,
}

fn one() -> usize {
    1
}

impl SynthSection {
    fn to_spec(&self) -> SynthSpec {
        SynthSpec {
            length: self.length,
            periods: self.periods.clone(),
            amplitudes: self
                .amplitudes
                .clone()
                .unwrap_or_else(|| vec![1.0; self.periods.len()]),
            slope: self.slope,
            sigma: self.sigma,
            variates: self.variates,
        }
    }
}

/// Architecture settings: either a named preset (plus horizon) or an
/// explicit uniform layer stack. Scalar knobs override either base.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
    pub layers: Option<usize>,
    pub patches: Option<Vec<usize>>,
    pub strides: Option<Vec<usize>>,
    pub heads: Option<usize>,
    pub d_pos: Option<usize>,
    pub pe: Option<PeKind>,
    pub revin: Option<bool>,
    pub revin_affine: Option<bool>,
    pub share_w_pos: Option<bool>,
    pub ffn_hidden: Option<usize>,
    pub ffn_dropout: Option<f64>,
    pub fuse_dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub clip_norm: Option<f64>,
    pub decay_every: Option<usize>,
    pub decay_factor: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthSpec),
}

/// A fully resolved run: validated configs plus the data source.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ratios: (f64, f64, f64),
    pub data: DataSource,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

pub fn load_run_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg: RunConfig =
        toml::from_str(&text).with_context(|| format!("bad config {}", path.display()))?;
    Ok(cfg)
}

impl RunConfig {
    pub fn resolve(&self) -> anyhow::Result<Resolved> {
        let m = &self.model;
        let explicit_arch = m.patches.is_some() || m.strides.is_some() || m.layers.is_some();
        let (mut model, mut train, mut ratios) = match &m.preset {
            Some(name) => {
                if explicit_arch {
                    bail!("model.preset and explicit patches/strides/layers are mutually exclusive");
                }
                let horizon = m
                    .horizon
                    .ok_or_else(|| anyhow!("model.preset needs model.horizon"))?;
                let bundle = preset(name, horizon)?;
                (bundle.model, bundle.train, bundle.ratios)
            }
            None => {
                let lookback = m
                    .lookback
                    .ok_or_else(|| anyhow!("model.lookback is required without a preset"))?;
                let horizon = m
                    .horizon
                    .ok_or_else(|| anyhow!("model.horizon is required without a preset"))?;
                let patches = m
                    .patches
                    .clone()
                    .ok_or_else(|| anyhow!("model.patches is required without a preset"))?;
                let strides = match &m.strides {
                    Some(s) => {
                        if s.len() != patches.len() {
                            bail!(
                                "model.strides has {} entries for {} patches",
                                s.len(),
                                patches.len()
                            );
                        }
                        s.clone()
                    }
                    None => patches.iter().map(|p| (p / 2).max(1)).collect(),
                };
                let heads = m.heads.unwrap_or(16);
                let branches = patches
                    .iter()
                    .zip(&strides)
                    .map(|(&patch, &stride)| BranchSpec {
                        patch,
                        stride,
                        heads,
                        d_pos: m.d_pos,
                    })
                    .collect();
                let layers = m.layers.unwrap_or(1);
                (
                    ModelConfig::uniform(lookback, horizon, layers, branches),
                    TrainConfig::default(),
                    (0.7, 0.1, 0.2),
                )
            }
        };

        if let Some(v) = m.lookback {
            model.lookback = v;
        }
        if let Some(v) = m.pe {
            model.pe = v;
        }
        if let Some(v) = m.revin {
            model.revin = v;
        }
        if let Some(v) = m.revin_affine {
            model.revin_affine = v;
        }
        if let Some(v) = m.share_w_pos {
            model.share_w_pos = v;
        }
        if let Some(v) = m.ffn_hidden {
            model.ffn_hidden = v;
        }
        if let Some(v) = m.ffn_dropout {
            model.ffn_dropout = v;
        }
        if let Some(v) = m.fuse_dropout {
            model.fuse_dropout = v;
        }
        if m.preset.is_some() {
            if let Some(h) = m.heads {
                for layer in &mut model.layers {
                    for b in &mut layer.branches {
                        b.heads = h;
                    }
                }
            }
            if let Some(d) = m.d_pos {
                for layer in &mut model.layers {
                    for b in &mut layer.branches {
                        b.d_pos = Some(d);
                    }
                }
            }
        }
        let model = model.validated()?;

        let t = &self.train;
        if let Some(v) = t.lr {
            train.lr = v;
        }
        if let Some(v) = t.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = t.max_epochs {
            train.max_epochs = v;
        }
        if let Some(v) = t.patience {
            train.patience = v;
        }
        if let Some(v) = t.beta1 {
            train.beta1 = v;
        }
        if let Some(v) = t.beta2 {
            train.beta2 = v;
        }
        if let Some(v) = t.epsilon {
            train.epsilon = v;
        }
        if t.clip_norm.is_some() {
            train.clip_norm = t.clip_norm;
        }
        if t.decay_every.is_some() {
            train.decay_every = t.decay_every;
        }
        if let Some(v) = t.decay_factor {
            train.decay_factor = v;
        }
        train.seed = self.seed;
        train.validated()?;

        if let Some(r) = self.data.ratios {
            ratios = r;
        }
        let data = match (&self.data.path, &self.data.synth) {
            (Some(p), None) => DataSource::Csv(p.clone()),
            (None, Some(s)) => DataSource::Synth(s.to_spec()),
            (Some(_), Some(_)) => bail!("data.path and data.synth are mutually exclusive"),
            (None, None) => bail!("config needs data.path or data.synth"),
        };

        Ok(Resolved {
            model,
            train,
            ratios,
            data,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
        })
    }
}

/// Canonical fingerprint of everything that determines a run's numbers
/// except the seed (reported separately in every artifact).
pub fn config_hash(r: &Resolved) -> String {
    #[derive(Serialize)]
    struct HashInput<'a> {
        model: &'a ModelConfig,
        train: TrainConfig,
        ratios: (f64, f64, f64),
        data: String,
    }
    let mut train = r.train.clone();
    train.seed = 0;
    let data = match &r.data {
        DataSource::Csv(p) => format!("csv:{}", p.display()),
        DataSource::Synth(s) => format!("synth:{s:?}"),
    };
    let input = HashInput { model: &r.model, train, ratios: r.ratios, data };
    let json = serde_json::to_vec(&input).expect("config serializes");
    let digest = Sha256::digest(&json);
    let mut hex = String::with_capacity(16);
    for b in &digest[..8] {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Final per-run metrics artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub val: Metrics,
    pub test: Metrics,
}

fn load_source(data: &DataSource, seed: u64) -> anyhow::Result<MultivariateSeries> {
    match data {
        DataSource::Csv(path) => Ok(load_csv(path)?),
        DataSource::Synth(spec) => Ok(synth_multi_periodic(seed, spec)?),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Output directory precedence: --out flag, then MTST_OUT, then the config
/// file, then the current directory.
pub fn resolve_out_dir(flag: Option<&Path>, from_config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("MTST_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    from_config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// Train per the config, then write checkpoint, history, and metrics into
/// the output directory. Prints the metrics JSON on stdout.
pub fn cmd_train(config_path: &Path, out_flag: Option<&Path>) -> anyhow::Result<()> {
    let run = load_run_config(config_path)?;
    let resolved = run.resolve()?;
    let out_dir = resolve_out_dir(out_flag, resolved.out_dir.as_deref());
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;

    let series = load_source(&resolved.data, resolved.seed)?;
    let (tr, va, te) = split_windows(
        &series,
        resolved.ratios,
        resolved.model.lookback,
        resolved.model.horizon,
    )?;
    log::info!(
        "training on {} windows ({} variates), validating on {}, testing on {}",
        tr.len(),
        series.num_variates(),
        va.len(),
        te.len()
    );

    let (model, params, state) = Mtst::init(resolved.model.clone(), resolved.seed)?;
    let report = train(&model, params, state, &tr, &va, &resolved.train)?;
    log::info!(
        "best epoch {} with validation MSE {:.6}",
        report.best_epoch,
        report.best_val_mse
    );

    let val_metrics = evaluate(&model, &report.params, &report.state, &va)?;
    let test_metrics = evaluate(&model, &report.params, &report.state, &te)?;

    let meta = CheckpointMeta {
        config: resolved.model.clone(),
        seed: resolved.seed,
        ratios: resolved.ratios,
        variates: series.names().to_vec(),
    };
    checkpoint::save(&out_dir.join("model.ckpt"), &meta, &report.params, &report.state)?;
    write_text(
        &out_dir.join("history.jsonl"),
        &training::history_to_jsonl(&report.history),
    )?;
    let metrics = MetricsReport {
        config_hash: config_hash(&resolved),
        seed: resolved.seed,
        val: val_metrics,
        test: test_metrics,
    };
    let json = serde_json::to_string(&metrics)?;
    write_text(&out_dir.join("metrics.json"), &format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

/// Split-level evaluation artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Metrics,
}

pub fn cmd_evaluate(
    checkpoint_path: &Path,
    dataset: &Path,
    split: &str,
    out_flag: Option<&Path>,
) -> anyhow::Result<()> {
    let split = Split::from_str(split)?;
    let (meta, model, params, state) = checkpoint::load(checkpoint_path)?;
    let series = load_csv(dataset)?;
    if series.num_variates() != meta.variates.len() {
        bail!(
            "checkpoint was trained on {} variates, dataset {} has {}",
            meta.variates.len(),
            dataset.display(),
            series.num_variates()
        );
    }
    let (tr, va, te) = split_windows(
        &series,
        meta.ratios,
        meta.config.lookback,
        meta.config.horizon,
    )?;
    let set = match split {
        Split::Train => tr,
        Split::Val => va,
        Split::Test => te,
    };
    let metrics = evaluate(&model, &params, &state, &set)?;
    let report = EvalReport {
        split: split.as_str().to_owned(),
        config_hash: String::new(),
        seed: meta.seed,
        metrics,
    };
    let json = serde_json::to_string(&report)?;
    let out_dir = resolve_out_dir(out_flag, None);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    write_text(
        &out_dir.join(format!("metrics-{split}.json")),
        &format!("{json}\n"),
    )?;
    println!("{json}");
    Ok(())
}

/// Forecast from one look-back window supplied as CSV; writes T rows with
/// the input's header preserved verbatim.
pub fn cmd_forecast(
    checkpoint_path: &Path,
    dataset: &Path,
    out_flag: Option<&Path>,
) -> anyhow::Result<()> {
    let (meta, model, params, state) = checkpoint::load(checkpoint_path)?;
    let series = load_csv(dataset)?;
    if series.num_variates() != meta.variates.len() {
        bail!(
            "checkpoint was trained on {} variates, input {} has {}",
            meta.variates.len(),
            dataset.display(),
            series.num_variates()
        );
    }
    let lookback = meta.config.lookback;
    if series.len() != lookback {
        bail!(
            "forecast input must have exactly {lookback} rows (the model look-back), got {}",
            series.len()
        );
    }
    let columns: Vec<Vec<f64>> = (0..series.num_variates())
        .map(|m| series.column(m).to_vec())
        .collect();
    let forecasts = model.forward_multivariate(&params, &state, &columns)?;

    let out_path = match out_flag {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("forecast.csv"),
    };
    let mut out = MultivariateSeries::from_columns(series.names().to_vec(), forecasts)?;
    if series.timestamps.is_some() {
        // future timestamps are unknown; keep the column so the header
        // round-trips, with empty cells
        out.timestamps = Some(vec![String::new(); meta.config.horizon]);
    }
    write_csv(&out_path, &out)?;
    log::info!("wrote {}", out_path.display());
    Ok(())
}

/// One seed's paired ablation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub base: Metrics,
    pub variant: Metrics,
    pub delta_mse: f64,
    pub delta_mae: f64,
}

/// Paired-comparison artifact for `cmd_ablate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: String,
    /// Positional-encoding tag of the variant model.
    pub pe: String,
    pub base_hash: String,
    pub variant_hash: String,
    pub runs: Vec<AblationRun>,
}

/// Train base and ablated variant under identical seeds and report paired
/// test-set deltas (variant − base).
pub fn cmd_ablate(
    config_path: &Path,
    mode: &str,
    seeds: u64,
    out_flag: Option<&Path>,
) -> anyhow::Result<()> {
    let mode = AblateMode::from_str(mode)?;
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let run = load_run_config(config_path)?;
    let resolved = run.resolve()?;
    let variant_model = ablate(&resolved.model, mode)?;
    let out_dir = resolve_out_dir(out_flag, resolved.out_dir.as_deref());
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;

    // one dataset for every seed: only init and training order vary
    let series = load_source(&resolved.data, resolved.seed)?;
    let (tr, va, te) = split_windows(
        &series,
        resolved.ratios,
        resolved.model.lookback,
        resolved.model.horizon,
    )?;

    let mut runs = Vec::with_capacity(seeds as usize);
    for i in 0..seeds {
        let seed = resolved.seed + i;
        let mut tc = resolved.train.clone();
        tc.seed = seed;
        let mut pair = Vec::with_capacity(2);
        for cfg in [&resolved.model, &variant_model] {
            let (model, params, state) = Mtst::init(cfg.clone(), seed)?;
            let report = train(&model, params, state, &tr, &va, &tc)?;
            pair.push(evaluate(&model, &report.params, &report.state, &te)?);
        }
        let (base, variant) = (pair[0], pair[1]);
        log::info!(
            "seed {seed}: base mse {:.6}, {} mse {:.6}",
            base.mse,
            mode.as_str(),
            variant.mse
        );
        runs.push(AblationRun {
            seed,
            base,
            variant,
            delta_mse: variant.mse - base.mse,
            delta_mae: variant.mae - base.mae,
        });
    }

    let variant_resolved = Resolved { model: variant_model.clone(), ..resolved.clone() };
    let report = AblationReport {
        mode: mode.as_str().to_owned(),
        pe: variant_model.pe.as_str().to_owned(),
        base_hash: config_hash(&resolved),
        variant_hash: config_hash(&variant_resolved),
        runs,
    };
    let json = serde_json::to_string(&report)?;
    write_text(
        &out_dir.join(format!("ablation-{}.json", mode.as_str())),
        &format!("{json}\n"),
    )?;
    println!("{json}");
    Ok(())
}

/// Generate the configured synthetic dataset and write it as CSV.
pub fn cmd_synth(config_path: &Path, out_file: &Path) -> anyhow::Result<()> {
    let run = load_run_config(config_path)?;
    let spec = run
        .data
        .synth
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [data.synth] section"))?
        .to_spec();
    let series = synth_multi_periodic(run.seed, &spec)?;
    if let Some(dir) = out_file.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("cannot create {}", dir.display()))?;
        }
    }
    write_csv(out_file, &series)?;
    log::info!("wrote {} rows to {}", series.len(), out_file.display());
    Ok(())
}
