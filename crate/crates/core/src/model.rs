//! The full multi-resolution network: per layer, every branch tokenizes the
//! incoming 1-D representation at its own patch size, runs the attention
//! block, and the flattened branch outputs are fused by a linear map into
//! the layer's output vector. Layer 0 consumes the look-back window (after
//! optional instance normalization); the final layer emits the horizon.
//!
//! Channel independence: the same parameters process each variate's column
//! separately, so cross-variate Jacobians are exactly zero.

use crate::attention::{attn_residual, block_bn, ffn_residual, transformer_block, AttnIds, BlockMode};
use crate::autodiff::{BnRunning, Tape, VarId};
use crate::config::ModelConfig;
use crate::error::Error;
use crate::params::{ParamId, ParamStore};
use crate::posenc::{build_rel_table, rel_rows_matrix, sinape_table, PeKind};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use crate::tokenizer::num_patches;
use crate::Result;
use rand::Rng;
use rayon::prelude::*;

/// Instance-normalization guard: window std is clamped from below.
pub const REVIN_EPS: f64 = 1e-8;

/// Per-window, per-variate normalization statistics, taken from the input
/// window only (never from targets).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevinState {
    pub mean: f64,
    pub std: f64,
}

/// Window statistics with the epsilon guard (population std).
pub fn revin_stats(x: &[f64]) -> RevinState {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    RevinState { mean, std: var.sqrt().max(REVIN_EPS) }
}

pub fn revin_normalize(x: &[f64]) -> (Vec<f64>, RevinState) {
    let st = revin_stats(x);
    (x.iter().map(|&v| (v - st.mean) / st.std).collect(), st)
}

pub fn revin_denormalize(y: &[f64], st: &RevinState) -> Vec<f64> {
    y.iter().map(|&v| v * st.std + st.mean).collect()
}

/// Mutable model state outside the learnable parameters: the BN running
/// statistics, in block declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub bn: Vec<BnRunning>,
}

/// One branch, resolved against its layer's input width.
#[derive(Debug, Clone)]
pub struct BranchRuntime {
    pub patch: usize,
    pub stride: usize,
    pub j: usize,
    pub attn: AttnIds,
    /// Cached (J·J)×D_pos offset rows (RPE only).
    pub rel_rows: Option<Tensor>,
    /// Cached J×P sinusoid table (SinAPE only).
    pub sin_table: Option<Tensor>,
    /// Learnable J×P table (LearnedAPE only).
    pub learned_pe: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct LayerRuntime {
    pub in_dim: usize,
    pub out_dim: usize,
    pub fuse_width: usize,
    pub branches: Vec<BranchRuntime>,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

/// Immutable network layout: parameter handles plus cached tables. The
/// values themselves live in a [`ParamStore`] / [`ModelState`] pair.
#[derive(Debug, Clone)]
pub struct Mtst {
    pub config: ModelConfig,
    pub layers: Vec<LayerRuntime>,
    pub revin_gamma: Option<ParamId>,
    pub revin_beta: Option<ParamId>,
}

impl Mtst {
    /// Build the layout and seed-initialized values for `config`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Mtst, ParamStore, ModelState)> {
        let config = config.validated()?;
        let mut store = ParamStore::new();
        let mut bn = Vec::new();
        let mut layers = Vec::with_capacity(config.layers.len());

        for (n, layer) in config.layers.iter().enumerate() {
            let d_in = config.in_dim(n);
            let mut branches = Vec::with_capacity(layer.branches.len());
            for (bi, b) in layer.branches.iter().enumerate() {
                let prefix = format!("l{n}.b{bi}");
                let j = num_patches(d_in, b.patch, b.stride)
                    .map_err(|e| Error::Config(format!("layer {n} branch {bi}: {e}")))?;
                let attn = AttnIds::init(
                    &mut store,
                    &mut bn,
                    &prefix,
                    b.patch,
                    b.heads,
                    b.d_pos,
                    config.ffn_hidden,
                    config.pe,
                    config.share_w_pos,
                    config.scale_literal_d,
                    seed,
                )?;
                let rel_rows = if config.pe == PeKind::Rpe {
                    let table = build_rel_table(j, attn.dims.d_pos)?;
                    Some(rel_rows_matrix(&table, j)?)
                } else {
                    None
                };
                let sin_table = if config.pe == PeKind::SinApe {
                    Some(sinape_table(j, b.patch).map_err(|e| {
                        Error::Config(format!("layer {n} branch {bi}: sinusoidal APE needs an even patch size: {e}"))
                    })?)
                } else {
                    None
                };
                let learned_pe = if config.pe == PeKind::LearnedApe {
                    Some(store.add(format!("{prefix}.ape"), Tensor::zeros(vec![j, b.patch])?)?)
                } else {
                    None
                };
                branches.push(BranchRuntime {
                    patch: b.patch,
                    stride: b.stride,
                    j,
                    attn,
                    rel_rows,
                    sin_table,
                    learned_pe,
                });
            }

            // fuse width recomputed from first principles must match the
            // branch runtime token geometry
            let fuse_width: usize = branches.iter().map(|b| b.j * b.patch).sum();
            let expected = config.fuse_width(n)?;
            if fuse_width != expected {
                return Err(Error::Config(format!(
                    "layer {n}: fuse width {fuse_width} disagrees with recomputed {expected}"
                )));
            }
            let name = format!("l{n}.fuse.w");
            let bound = 1.0 / (fuse_width as f64).sqrt();
            let mut r = rng::stream(seed, &[tag::INIT, rng::name_hash(&name)]);
            let data = (0..layer.out_dim * fuse_width)
                .map(|_| r.gen_range(-bound..bound))
                .collect();
            let fuse_w = store.add(name, Tensor::matrix(layer.out_dim, fuse_width, data)?)?;
            let fuse_b = store.add(format!("l{n}.fuse.b"), Tensor::zeros(vec![layer.out_dim])?)?;

            layers.push(LayerRuntime {
                in_dim: d_in,
                out_dim: layer.out_dim,
                fuse_width,
                branches,
                fuse_w,
                fuse_b,
            });
        }

        let (revin_gamma, revin_beta) = if config.revin && config.revin_affine {
            (
                Some(store.add("revin.gamma", Tensor::vector(vec![1.0]))?),
                Some(store.add("revin.beta", Tensor::vector(vec![0.0]))?),
            )
        } else {
            (None, None)
        };

        let model = Mtst { config, layers, revin_gamma, revin_beta };
        Ok((model, store, ModelState { bn }))
    }

    /// Tokenize one window for a branch and add any absolute PE.
    fn branch_tokens(
        &self,
        tape: &mut Tape,
        y: VarId,
        branch: &BranchRuntime,
        binding: &[VarId],
    ) -> Result<VarId> {
        let tok = tape.tokenize(y, branch.patch, branch.stride)?;
        match self.config.pe {
            PeKind::SinApe => {
                let table = tape.leaf(branch.sin_table.clone().unwrap());
                tape.add(tok, table)
            }
            PeKind::LearnedApe => tape.add(tok, binding[branch.learned_pe.unwrap().0]),
            _ => Ok(tok),
        }
    }

    /// One branch: tokenize, add any absolute PE, run the block.
    fn branch_forward(
        &self,
        tape: &mut Tape,
        y: VarId,
        branch: &BranchRuntime,
        binding: &[VarId],
        mode: &mut BlockMode,
    ) -> Result<VarId> {
        let tok = self.branch_tokens(tape, y, branch, binding)?;
        transformer_block(tape, tok, &branch.attn, binding, branch.rel_rows.as_ref(), mode)
    }

    /// Flatten branch outputs (ascending patch order), apply fuse dropout,
    /// project to the layer's output width.
    fn fuse(
        &self,
        tape: &mut Tape,
        outs: &[VarId],
        layer: &LayerRuntime,
        binding: &[VarId],
        mode: &mut BlockMode,
    ) -> Result<VarId> {
        let z = tape.concat_flat(outs)?;
        let got = tape.value(z).numel();
        if got != layer.fuse_width {
            return Err(Error::Shape(format!(
                "fuse: concat width {got}, expected {}",
                layer.fuse_width
            )));
        }
        let z = match mode {
            BlockMode::Train { rng, .. } => tape.dropout(z, self.config.fuse_dropout, rng)?,
            BlockMode::Eval { .. } => z,
        };
        let z_col = tape.reshape(z, vec![layer.fuse_width, 1])?;
        let wy = tape.matmul(binding[layer.fuse_w.0], z_col)?;
        let v = tape.reshape(wy, vec![layer.out_dim])?;
        tape.add(v, binding[layer.fuse_b.0])
    }

    /// Instance-normalize one window (when configured), put it on the tape,
    /// and apply the learned affine.
    fn revin_prefix(
        &self,
        tape: &mut Tape,
        binding: &[VarId],
        x: &[f64],
    ) -> Result<(VarId, Option<RevinState>)> {
        if x.len() != self.config.lookback {
            return Err(Error::Shape(format!(
                "input window has {} values, model look-back is {}",
                x.len(),
                self.config.lookback
            )));
        }
        let (vals, revin) = if self.config.revin {
            let (v, st) = revin_normalize(x);
            (v, Some(st))
        } else {
            (x.to_vec(), None)
        };
        let mut y = tape.leaf(Tensor::vector(vals));
        if let (Some(g), Some(b)) = (self.revin_gamma, self.revin_beta) {
            let scaled = tape.mul_var_scalar(y, binding[g.0])?;
            y = tape.add_var_scalar(scaled, binding[b.0])?;
        }
        Ok((y, revin))
    }

    /// Undo the affine and the window statistics on a prediction.
    fn revin_suffix(
        &self,
        tape: &mut Tape,
        binding: &[VarId],
        mut y: VarId,
        revin: Option<RevinState>,
    ) -> Result<VarId> {
        if let Some(st) = revin {
            if let (Some(g), Some(b)) = (self.revin_gamma, self.revin_beta) {
                let centered = tape.sub_var_scalar(y, binding[b.0])?;
                let inv = tape.recip_scalar(binding[g.0])?;
                y = tape.mul_var_scalar(centered, inv)?;
            }
            let scaled = tape.scale(y, st.std)?;
            y = tape.add_scalar(scaled, st.mean)?;
        }
        Ok(y)
    }

    /// Record the whole forward pass (instance norm, layers, denorm) for a
    /// single variate's look-back window. The returned var has length T and
    /// lives in the original data scale.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &[VarId],
        x: &[f64],
        mode: &mut BlockMode,
    ) -> Result<VarId> {
        let (mut y, revin) = self.revin_prefix(tape, binding, x)?;

        for layer in &self.layers {
            let mut outs = Vec::with_capacity(layer.branches.len());
            for branch in &layer.branches {
                outs.push(self.branch_forward(tape, y, branch, binding, mode)?);
            }
            y = self.fuse(tape, &outs, layer, binding, mode)?;
        }

        self.revin_suffix(tape, binding, y, revin)
    }

    /// Record one forward pass for a whole batch of windows on a single
    /// tape, returning one T-vector per window (original data scale, same
    /// order). Attention still runs per window, but each block norm sees
    /// the stacked `(windows · tokens) × patch` matrix, so in train mode
    /// the statistics — and the running stats they feed — are pooled over
    /// the batch instead of describing one window at a time. The training
    /// loop uses this; eval-mode output is bitwise identical to running
    /// [`Mtst::forward_on_tape`] per window.
    pub fn forward_batch_on_tape(
        &self,
        tape: &mut Tape,
        binding: &[VarId],
        windows: &[&[f64]],
        mode: &mut BlockMode,
    ) -> Result<Vec<VarId>> {
        if windows.is_empty() {
            return Err(Error::Data("forward_batch_on_tape: empty batch".into()));
        }
        let mut ys = Vec::with_capacity(windows.len());
        let mut stats = Vec::with_capacity(windows.len());
        for x in windows {
            let (y, revin) = self.revin_prefix(tape, binding, x)?;
            ys.push(y);
            stats.push(revin);
        }

        for layer in &self.layers {
            let mut branch_outs: Vec<Vec<VarId>> = vec![Vec::new(); windows.len()];
            for branch in &layer.branches {
                let ids = &branch.attn;
                let mut res1 = Vec::with_capacity(windows.len());
                for &y in &ys {
                    let tok = self.branch_tokens(tape, y, branch, binding)?;
                    res1.push(attn_residual(tape, tok, ids, binding, branch.rel_rows.as_ref())?);
                }
                let flat = tape.concat_flat(&res1)?;
                let stacked =
                    tape.reshape(flat, vec![windows.len() * branch.j, branch.patch])?;
                let z1 = block_bn(
                    tape, stacked, ids.bn1_gamma, ids.bn1_beta, ids.bn1_state, binding, mode,
                )?;
                let res2 = ffn_residual(tape, z1, ids, binding, mode)?;
                let z2 = block_bn(
                    tape, res2, ids.bn2_gamma, ids.bn2_beta, ids.bn2_state, binding, mode,
                )?;
                for (w, outs) in branch_outs.iter_mut().enumerate() {
                    outs.push(tape.slice_rows(z2, w * branch.j, branch.j)?);
                }
            }
            for (w, outs) in branch_outs.iter().enumerate() {
                ys[w] = self.fuse(tape, outs, layer, binding, mode)?;
            }
        }

        ys.into_iter()
            .zip(stats)
            .map(|(y, revin)| self.revin_suffix(tape, binding, y, revin))
            .collect()
    }

    /// Eval-mode forward on a fresh tape; returns the T-vector forecast.
    pub fn forward_eval(
        &self,
        params: &ParamStore,
        state: &ModelState,
        x: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let mut mode = BlockMode::Eval { bn: &state.bn };
        let out = self.forward_on_tape(&mut tape, &binding, x, &mut mode)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Apply the shared univariate model to every column independently.
    /// `columns` are the per-variate look-back windows; the result keeps
    /// the same column order. Eval mode; columns may run in parallel.
    pub fn forward_multivariate(
        &self,
        params: &ParamStore,
        state: &ModelState,
        columns: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        if columns.is_empty() {
            return Err(Error::Data("forecast needs at least one variate".into()));
        }
        columns
            .par_iter()
            .map(|col| self.forward_eval(params, state, col))
            .collect()
    }

    /// Closed-form count of learnable scalars for `config`. Matches
    /// enumeration over an initialized store for any seed.
    pub fn param_count(config: &ModelConfig) -> Result<usize> {
        use crate::attention::{default_d_pos, effective_heads};
        let config = config.clone().validated()?;
        let f = config.ffn_hidden;
        let mut total = 0usize;
        for (n, layer) in config.layers.iter().enumerate() {
            let d_in = config.in_dim(n);
            for b in &layer.branches {
                let p = b.patch;
                let heads = effective_heads(p, b.heads);
                let d_pos = b.d_pos.unwrap_or_else(|| default_d_pos(p, heads));
                let j = num_patches(d_in, p, b.stride)?;
                // q/k/v projections: heads × 3 × (P × P/heads)
                total += 3 * p * p;
                if config.pe == PeKind::Rpe {
                    total += if config.share_w_pos { d_pos } else { heads * d_pos };
                }
                total += p * p; // output projection
                total += p * f + f + f * p; // FFN (second linear bias-free)
                total += 4 * p; // two BN affine pairs
                if config.pe == PeKind::LearnedApe {
                    total += j * p;
                }
            }
            let width = config.fuse_width(n)?;
            total += layer.out_dim * width + layer.out_dim;
        }
        if config.revin && config.revin_affine {
            total += 2;
        }
        Ok(total)
    }
}
