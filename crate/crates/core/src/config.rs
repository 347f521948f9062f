//! Model architecture configuration and the published benchmark presets.

use crate::error::Error;
use crate::posenc::PeKind;
use crate::tokenizer::num_patches;
use crate::training::TrainConfig;
use crate::Result;
use serde::{Deserialize, Serialize};

/// One tokenizer+attention pipeline at a fixed patch size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub patch: usize,
    pub stride: usize,
    /// Requested head count; reduced to the largest divisor of `patch` at
    /// init when it doesn't divide.
    pub heads: usize,
    /// Relative-position vector width; `None` = per-head width rounded up
    /// to even.
    #[serde(default)]
    pub d_pos: Option<usize>,
}

impl BranchSpec {
    /// Paper default: stride = patch/2 (patch 1 degenerates to stride 1).
    pub fn with_default_stride(patch: usize, heads: usize) -> Self {
        BranchSpec { patch, stride: (patch / 2).max(1), heads, d_pos: None }
    }
}

/// One layer: a set of branches over the same input plus the fused output
/// width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub branches: Vec<BranchSpec>,
}

/// Full architecture description. `lookback` is the input width of the
/// first layer; the final layer's `out_dim` must equal `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub layers: Vec<LayerSpec>,
    pub pe: PeKind,
    pub revin: bool,
    #[serde(default)]
    pub revin_affine: bool,
    /// Share one w_pos across heads instead of one per head.
    #[serde(default)]
    pub share_w_pos: bool,
    /// Scale attention logits by 1/sqrt(D) instead of 1/sqrt(D_head).
    #[serde(default)]
    pub scale_literal_d: bool,
    pub ffn_hidden: usize,
    pub ffn_dropout: f64,
    pub fuse_dropout: f64,
}

impl ModelConfig {
    /// Same branch set in every layer; intermediate widths stay at
    /// `lookback`, the last layer maps to `horizon`.
    pub fn uniform(
        lookback: usize,
        horizon: usize,
        n_layers: usize,
        branches: Vec<BranchSpec>,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|n| LayerSpec {
                out_dim: if n + 1 == n_layers { horizon } else { lookback },
                branches: branches.clone(),
            })
            .collect();
        ModelConfig {
            lookback,
            horizon,
            layers,
            pe: PeKind::Rpe,
            revin: true,
            revin_affine: false,
            share_w_pos: false,
            scale_literal_d: false,
            ffn_hidden: 256,
            ffn_dropout: 0.0,
            fuse_dropout: 0.0,
        }
    }

    /// Input width of layer `n`.
    pub fn in_dim(&self, n: usize) -> usize {
        if n == 0 {
            self.lookback
        } else {
            self.layers[n - 1].out_dim
        }
    }

    /// Validate all structural invariants; normalizes branch order to
    /// ascending patch size (the documented fuse concatenation order).
    pub fn validated(mut self) -> Result<Self> {
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("at least one layer required".into()));
        }
        let last = self.layers.last().unwrap().out_dim;
        if last != self.horizon {
            return Err(Error::Config(format!(
                "final layer out_dim {last} must equal horizon {}",
                self.horizon
            )));
        }
        if !(0.0..1.0).contains(&self.ffn_dropout) || !(0.0..1.0).contains(&self.fuse_dropout) {
            return Err(Error::Config("dropout rates must lie in [0,1)".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be >= 1".into()));
        }
        for n in 0..self.layers.len() {
            let d_in = self.in_dim(n);
            if self.layers[n].out_dim == 0 {
                return Err(Error::Config(format!("layer {n}: out_dim must be >= 1")));
            }
            if self.layers[n].branches.is_empty() {
                return Err(Error::Config(format!("layer {n}: needs at least one branch")));
            }
            self.layers[n].branches.sort_by_key(|b| b.patch);
            for (bi, b) in self.layers[n].branches.iter().enumerate() {
                let ctx = format!("layer {n} branch {bi} (patch {})", b.patch);
                if b.heads == 0 {
                    return Err(Error::Config(format!("{ctx}: heads must be >= 1")));
                }
                if let Some(p) = b.d_pos {
                    if p == 0 || p % 2 != 0 {
                        return Err(Error::Config(format!("{ctx}: d_pos must be even and > 0")));
                    }
                }
                num_patches(d_in, b.patch, b.stride)
                    .map_err(|e| Error::Config(format!("{ctx}: {e}")))?;
            }
        }
        Ok(self)
    }

    /// Flatten-concat width of layer `n`: Σ over branches of J·P.
    pub fn fuse_width(&self, n: usize) -> Result<usize> {
        let d_in = self.in_dim(n);
        self.layers[n]
            .branches
            .iter()
            .map(|b| Ok(num_patches(d_in, b.patch, b.stride)? * b.patch))
            .sum()
    }
}

/// Which architecture piece an ablation removes or replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblateMode {
    /// Drop the largest-patch branch from every layer.
    NoLowRes,
    /// Drop the smallest-patch branch from every layer.
    NoHighRes,
    /// Replace RPE with the fixed sinusoidal absolute encoding.
    Sinape,
    /// Replace RPE with the learned absolute encoding.
    Learnedape,
    /// Remove positional information entirely.
    Nope,
}

impl AblateMode {
    pub const ALL: [AblateMode; 5] = [
        AblateMode::NoLowRes,
        AblateMode::NoHighRes,
        AblateMode::Sinape,
        AblateMode::Learnedape,
        AblateMode::Nope,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblateMode::NoLowRes => "no-low-res",
            AblateMode::NoHighRes => "no-high-res",
            AblateMode::Sinape => "sinape",
            AblateMode::Learnedape => "learnedape",
            AblateMode::Nope => "nope",
        }
    }
}

impl std::str::FromStr for AblateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "no-low-res" => Ok(AblateMode::NoLowRes),
            "no-high-res" => Ok(AblateMode::NoHighRes),
            "sinape" => Ok(AblateMode::Sinape),
            "learnedape" => Ok(AblateMode::Learnedape),
            "nope" => Ok(AblateMode::Nope),
            other => {
                let valid: Vec<&str> = AblateMode::ALL.iter().map(|m| m.as_str()).collect();
                Err(Error::Config(format!(
                    "unknown ablation mode {other:?} (valid: {})",
                    valid.join(", ")
                )))
            }
        }
    }
}

/// Derive the ablated architecture from a base config.
pub fn ablate(base: &ModelConfig, mode: AblateMode) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match mode {
        AblateMode::NoLowRes | AblateMode::NoHighRes => {
            for (n, layer) in cfg.layers.iter_mut().enumerate() {
                if layer.branches.len() < 2 {
                    return Err(Error::Config(format!(
                        "layer {n} has a single branch; branch-drop ablation needs >= 2"
                    )));
                }
                // branches are kept sorted ascending by patch
                layer.branches.sort_by_key(|b| b.patch);
                match mode {
                    AblateMode::NoLowRes => {
                        layer.branches.pop();
                    }
                    _ => {
                        layer.branches.remove(0);
                    }
                }
            }
        }
        AblateMode::Sinape => cfg.pe = PeKind::SinApe,
        AblateMode::Learnedape => cfg.pe = PeKind::LearnedApe,
        AblateMode::Nope => cfg.pe = PeKind::None,
    }
    cfg.validated()
}

/// A benchmark preset: architecture + optimizer settings + split ratios.
#[derive(Debug, Clone)]
pub struct PresetBundle {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ratios: (f64, f64, f64),
}

/// Published configurations, keyed by dataset name. `horizon` must be one
/// of {96, 192, 336, 720}; look-back is 336 throughout.
pub fn preset(name: &str, horizon: usize) -> Result<PresetBundle> {
    const HORIZONS: [usize; 4] = [96, 192, 336, 720];
    if !HORIZONS.contains(&horizon) {
        return Err(Error::Config(format!(
            "preset horizon must be one of {HORIZONS:?}, got {horizon}"
        )));
    }
    let lookback = 336;
    let long = horizon >= 336;
    let branches = |ps: &[(usize, usize)]| -> Vec<BranchSpec> {
        ps.iter()
            .map(|&(p, s)| BranchSpec { patch: p, stride: s, heads: 16, d_pos: None })
            .collect()
    };
    let key = name.to_ascii_lowercase();
    let (n_layers, branch_list, ffn_dropout, fuse_dropout, batch_size, lr, ratios) = match key.as_str() {
        "traffic" | "electricity" => {
            let b = if long {
                branches(&[(8, 4), (32, 16), (96, 48)])
            } else {
                branches(&[(8, 4), (16, 8), (48, 24)])
            };
            let batch = if key == "traffic" { 10 } else { 32 };
            (1, b, 0.2, 0.0, batch, 5e-4, (0.7, 0.1, 0.2))
        }
        "weather" => {
            let b = if long {
                branches(&[(16, 8), (96, 48)])
            } else {
                branches(&[(24, 12), (96, 48)])
            };
            (2, b, 0.2, 0.0, 128, 5e-4, (0.7, 0.1, 0.2))
        }
        "etth1" => (2, branches(&[(8, 4), (16, 8)]), 0.3, 0.1, 256, 1e-4, (0.6, 0.2, 0.2)),
        "etth2" => (1, branches(&[(16, 8), (96, 48)]), 0.3, 0.3, 256, 1e-4, (0.6, 0.2, 0.2)),
        "ettm1" | "ettm2" => {
            (2, branches(&[(16, 8), (96, 48)]), 0.2, 0.0, 128, 1e-4, (0.6, 0.2, 0.2))
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (valid: traffic, electricity, weather, etth1, etth2, ettm1, ettm2)"
            )))
        }
    };

    let mut model = ModelConfig::uniform(lookback, horizon, n_layers, branch_list);
    model.ffn_dropout = ffn_dropout;
    model.fuse_dropout = fuse_dropout;
    let model = model.validated()?;
    let train = TrainConfig { lr, batch_size, ..TrainConfig::default() };
    Ok(PresetBundle { model, train, ratios })
}

pub const PRESET_NAMES: [&str; 7] =
    ["traffic", "electricity", "weather", "etth1", "etth2", "ettm1", "ettm2"];
