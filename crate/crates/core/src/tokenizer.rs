//! Patch tokenization: slice a 1-D representation into J overlapping
//! windows of width P at stride S. Window j (0-based here) covers input
//! positions `j*S .. j*S+P`; when `(d-P)` is not divisible by `S` the tail
//! is padded by replicating the final element so the last window is full.
//!
//! Padding by replication (rather than zeros) avoids injecting an
//! artificial level shift at the sequence tail.

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

/// Number of patches J for input length `d`, patch size `p`, stride `s`.
///
/// `J = ceil((d - p) / s) + 1`.
pub fn num_patches(d: usize, p: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if s > p {
        return Err(Error::Config(format!(
            "stride {s} exceeds patch size {p}; gapped patches are not supported"
        )));
    }
    if p > d {
        return Err(Error::Config(format!("patch size {p} exceeds input length {d}")));
    }
    Ok((d - p).div_ceil(s) + 1)
}

/// Elements appended past the end of the input so the last window is full.
pub fn pad_count(d: usize, p: usize, s: usize) -> Result<usize> {
    let j = num_patches(d, p, s)?;
    Ok((j - 1) * s + p - d)
}

/// Tokenize raw values into a `J×P` matrix (no tape involvement; the
/// recorded variant is [`crate::autodiff::Tape::tokenize`]).
pub fn tokenize_values(y: &[f64], p: usize, s: usize) -> Result<Tensor> {
    let d = y.len();
    let j = num_patches(d, p, s)?;
    let last = y[d - 1];
    let mut data = Vec::with_capacity(j * p);
    for row in 0..j {
        let start = row * s;
        for col in 0..p {
            let idx = start + col;
            data.push(if idx < d { y[idx] } else { last });
        }
    }
    Tensor::matrix(j, p, data)
}

/// Adjoint of [`tokenize_values`]: scatter-add token gradients back onto the
/// input. Every position accumulates the gradient of each window covering
/// it; padded cells fold their gradient into the final real element.
pub fn tokenize_backward(grad_tokens: &[f64], p: usize, s: usize, d: usize) -> Vec<f64> {
    let j = (d - p).div_ceil(s) + 1;
    debug_assert_eq!(grad_tokens.len(), j * p);
    let mut grad_y = vec![0.0; d];
    for row in 0..j {
        let start = row * s;
        for col in 0..p {
            let idx = (start + col).min(d - 1);
            grad_y[idx] += grad_tokens[row * p + col];
        }
    }
    grad_y
}
