//! Positional encodings.
//!
//! The model's native scheme is a *relative* encoding: the attention bias
//! between tokens i and j is `w_posᵀ · sign(i−j)·PE(|i−j|)`, where PE is the
//! classic sinusoid table. Two absolute variants (fixed sinusoidal, learned)
//! exist for ablations.

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

/// Which positional-encoding scheme a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    /// Relative bias inside the attention logits (the default scheme).
    Rpe,
    /// Fixed sinusoidal table added to tokens after tokenization.
    SinApe,
    /// Learnable table added to tokens after tokenization.
    LearnedApe,
    /// No positional information at all.
    None,
}

impl PeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PeKind::Rpe => "rpe",
            PeKind::SinApe => "sinape",
            PeKind::LearnedApe => "learnedape",
            PeKind::None => "none",
        }
    }
}

impl std::str::FromStr for PeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rpe" => Ok(PeKind::Rpe),
            "sinape" => Ok(PeKind::SinApe),
            "learnedape" => Ok(PeKind::LearnedApe),
            "none" => Ok(PeKind::None),
            other => Err(Error::Config(format!(
                "unknown positional encoding {other:?} (expected rpe|sinape|learnedape|none)"
            ))),
        }
    }
}

/// Sinusoid vector for a nonnegative offset: paired components `(2k, 2k+1)`
/// hold `sin` and `cos` of `i / 10000^(2k/d_pos)`, k = 0 … d_pos/2 − 1.
pub fn sinusoidal_pe(i: usize, d_pos: usize) -> Result<Vec<f64>> {
    if d_pos == 0 || d_pos % 2 != 0 {
        return Err(Error::Config(format!("positional dimension must be even and > 0, got {d_pos}")));
    }
    let mut v = vec![0.0; d_pos];
    for k in 0..d_pos / 2 {
        let freq = 10000f64.powf(2.0 * k as f64 / d_pos as f64);
        let x = i as f64 / freq;
        v[2 * k] = x.sin();
        v[2 * k + 1] = x.cos();
    }
    Ok(v)
}

/// Signed relative-offset table: entry r ∈ −(J−1)…(J−1) is
/// `sign(r) · sinusoidal_pe(|r|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosTable {
    pub d_pos: usize,
    pub max_offset: usize,
    /// Row for offset r lives at index `r + max_offset`; 2J−1 rows total.
    rows: Vec<Vec<f64>>,
}

impl RelPosTable {
    pub fn entry(&self, offset: i64) -> &[f64] {
        debug_assert!(offset.unsigned_abs() as usize <= self.max_offset);
        &self.rows[(offset + self.max_offset as i64) as usize]
    }
}

pub fn build_rel_table(j: usize, d_pos: usize) -> Result<RelPosTable> {
    if j == 0 {
        return Err(Error::Config("token count must be >= 1".into()));
    }
    let max_offset = j - 1;
    let mut rows = Vec::with_capacity(2 * j - 1);
    for r in -(max_offset as i64)..=(max_offset as i64) {
        let base = sinusoidal_pe(r.unsigned_abs() as usize, d_pos)?;
        let sign = match r {
            0 => 0.0,
            _ if r > 0 => 1.0,
            _ => -1.0,
        };
        rows.push(base.into_iter().map(|v| sign * v).collect());
    }
    Ok(RelPosTable { d_pos, max_offset, rows })
}

/// The J×J attention bias for a given `w_pos`: `bias[i][j] = w_posᵀ·table[i−j]`.
/// Toeplitz, antisymmetric, zero diagonal.
pub fn rpe_bias(table: &RelPosTable, w_pos: &[f64], j: usize) -> Result<Tensor> {
    if w_pos.len() != table.d_pos {
        return Err(Error::Shape(format!(
            "w_pos has {} components, table dimension is {}",
            w_pos.len(),
            table.d_pos
        )));
    }
    if j == 0 || j - 1 > table.max_offset {
        return Err(Error::Shape(format!(
            "table covers offsets up to {}, need {}",
            table.max_offset,
            j.saturating_sub(1)
        )));
    }
    // one dot product per distinct offset, then fill the Toeplitz matrix
    let mut per_offset = vec![0.0; 2 * j - 1];
    for (slot, r) in (-(j as i64 - 1)..=(j as i64 - 1)).enumerate() {
        per_offset[slot] = table
            .entry(r)
            .iter()
            .zip(w_pos)
            .map(|(&t, &w)| t * w)
            .sum();
    }
    let mut data = vec![0.0; j * j];
    for row in 0..j {
        for col in 0..j {
            let r = row as i64 - col as i64;
            data[row * j + col] = per_offset[(r + j as i64 - 1) as usize];
        }
    }
    Tensor::matrix(j, j, data)
}

/// Flattened `(J·J) × D_pos` matrix whose row `i*J + j` is `table[i−j]`.
/// Multiplying it by `w_pos` (as a column) on the tape yields the bias of
/// [`rpe_bias`] with gradient flow into `w_pos`.
pub fn rel_rows_matrix(table: &RelPosTable, j: usize) -> Result<Tensor> {
    if j == 0 || j - 1 > table.max_offset {
        return Err(Error::Shape(format!(
            "table covers offsets up to {}, need {}",
            table.max_offset,
            j.saturating_sub(1)
        )));
    }
    let d_pos = table.d_pos;
    let mut data = Vec::with_capacity(j * j * d_pos);
    for row in 0..j {
        for col in 0..j {
            data.extend_from_slice(table.entry(row as i64 - col as i64));
        }
    }
    Tensor::matrix(j * j, d_pos, data)
}

/// Fixed sinusoidal token table for the absolute-PE ablation: row `t` is
/// `sinusoidal_pe(t, d)`.
pub fn sinape_table(j: usize, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(j * d);
    for t in 0..j {
        data.extend_from_slice(&sinusoidal_pe(t, d)?);
    }
    Tensor::matrix(j, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_reference_values() {
        let v = sinusoidal_pe(0, 6).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let v = sinusoidal_pe(1, 2).unwrap();
        assert!((v[0] - 0.8414709848078965).abs() < 1e-15);
        assert!((v[1] - 0.5403023058681398).abs() < 1e-15);
        assert!(sinusoidal_pe(1, 3).is_err());
        assert!(sinusoidal_pe(1, 0).is_err());
    }

    #[test]
    fn sinusoid_bounded_for_huge_offsets() {
        for &i in &[10usize, 1_000, 1_000_000] {
            for &v in &sinusoidal_pe(i, 8).unwrap() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn rel_table_antisymmetric_with_zero_center() {
        let t = build_rel_table(5, 4).unwrap();
        assert_eq!(t.entry(0), &[0.0; 4]);
        for r in 1..=4i64 {
            for (a, b) in t.entry(r).iter().zip(t.entry(-r)) {
                assert_eq!(*a, -*b);
            }
        }
        assert!((t.entry(2)[0] - 2f64.sin()).abs() < 1e-15);

        let single = build_rel_table(1, 2).unwrap();
        assert_eq!(single.entry(0), &[0.0, 0.0]);
    }

    #[test]
    fn bias_hand_case() {
        let t = build_rel_table(3, 2).unwrap();
        let b = rpe_bias(&t, &[1.0, 0.0], 3).unwrap();
        assert!((b.at(0, 1) + 1f64.sin()).abs() < 1e-15);
        assert!((b.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(b.at(i, i), 0.0);
        }
    }

    #[test]
    fn bias_zero_weights_gives_zero_matrix() {
        let t = build_rel_table(4, 6).unwrap();
        let b = rpe_bias(&t, &[0.0; 6], 4).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_toeplitz_and_antisymmetric() {
        let t = build_rel_table(16, 8).unwrap();
        let w: Vec<f64> = (0..8).map(|k| 0.3 - 0.07 * k as f64).collect();
        let b = rpe_bias(&t, &w, 16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert!((b.at(i, j) + b.at(j, i)).abs() < 1e-12);
                if i + 1 < 16 && j + 1 < 16 {
                    assert!((b.at(i, j) - b.at(i + 1, j + 1)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bias_dimension_mismatch_rejected() {
        let t = build_rel_table(4, 6).unwrap();
        assert!(rpe_bias(&t, &[1.0, 2.0], 4).is_err());
        assert!(rpe_bias(&t, &[0.0; 6], 9).is_err());
    }

    #[test]
    fn rel_rows_matrix_reproduces_bias() {
        let j = 7;
        let t = build_rel_table(j, 4).unwrap();
        let w = [0.2, -0.4, 0.6, -0.8];
        let rows = rel_rows_matrix(&t, j).unwrap();
        let bias = rpe_bias(&t, &w, j).unwrap();
        for i in 0..j {
            for jj in 0..j {
                let dot: f64 = rows.data()[(i * j + jj) * 4..(i * j + jj + 1) * 4]
                    .iter()
                    .zip(&w)
                    .map(|(&r, &wv)| r * wv)
                    .sum();
                assert!((dot - bias.at(i, jj)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bias_gradient_flows_to_w_pos() {
        use crate::autodiff::finite_diff_check;
        use crate::params::ParamStore;
        let j = 5;
        let table = build_rel_table(j, 4).unwrap();
        let rows = rel_rows_matrix(&table, j).unwrap();
        let mut store = ParamStore::new();
        store.add("w_pos", Tensor::vector(vec![0.1, -0.2, 0.3, 0.4])).unwrap();
        let err = finite_diff_check(&store, 1e-5, |t, ids| {
            let r = t.leaf(rows.clone());
            let w = t.reshape(ids[0], vec![4, 1])?;
            let bias_flat = t.matmul(r, w)?;
            let bias = t.reshape(bias_flat, vec![j, j])?;
            // weight by an asymmetric constant so the sum isn't trivially zero
            let c = t.leaf(Tensor::matrix(j, j, (0..j * j).map(|v| (v % 7) as f64 - 2.0).collect()).unwrap());
            let m = t.mul(bias, c)?;
            t.sum_all(m)
        })
        .unwrap();
        assert!(err < 1e-6, "w_pos fd error {err}");
    }

    #[test]
    fn tables_are_bitwise_reproducible() {
        let a = build_rel_table(64, 8).unwrap();
        let b = build_rel_table(64, 8).unwrap();
        assert_eq!(a, b);
        let sa = sinape_table(32, 16).unwrap();
        let sb = sinape_table(32, 16).unwrap();
        assert_eq!(
            sa.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            sb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sinape_rows_distinct() {
        let t = sinape_table(512, 16).unwrap();
        // pairwise distinctness via exhaustive L2 check
        for a in 0..512 {
            for b in (a + 1)..512 {
                let d2: f64 = (0..16)
                    .map(|c| (t.at(a, c) - t.at(b, c)).powi(2))
                    .sum();
                assert!(d2 > 0.0, "rows {a} and {b} identical");
            }
        }
    }
}
