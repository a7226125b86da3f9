//! Exhaustive nearest-codeword search.

use alloc::vec::Vec;

use crate::error::{Error, Result};

fn check_codebook(codebook: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || codebook.is_empty() || !codebook.len().is_multiple_of(dim) {
        return Err(Error::Invalid(alloc::format!(
            "codebook of {} values is not a non-empty set of {dim}-vectors",
            codebook.len()
        )));
    }
    Ok(codebook.len() / dim)
}

/// Index of the codeword closest to `z` in squared Euclidean distance.
/// Ties go to the lowest index.
pub fn nearest_codeword(codebook: &[f64], dim: usize, z: &[f64]) -> Result<usize> {
    check_codebook(codebook, dim)?;
    if z.len() != dim {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: z.len(),
        });
    }
    Ok(nearest_unchecked(codebook, dim, z))
}

fn nearest_unchecked(codebook: &[f64], dim: usize, z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codebook.chunks_exact(dim).enumerate() {
        let d: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Nearest codeword for every `dim`-wide row of `latents`.
pub fn quantize_rows(codebook: &[f64], dim: usize, latents: &[f64]) -> Result<Vec<usize>> {
    check_codebook(codebook, dim)?;
    if !latents.len().is_multiple_of(dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: latents.len() % dim,
        });
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "latent" });
    }
    Ok(latents
        .chunks_exact(dim)
        .map(|z| nearest_unchecked(codebook, dim, z))
        .collect())
}

/// Concatenated codewords for `indices`.
pub fn lookup(codebook: &[f64], dim: usize, indices: &[usize]) -> Result<Vec<f64>> {
    let k = check_codebook(codebook, dim)?;
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        if i >= k {
            return Err(Error::OutOfRange { index: i, len: k });
        }
        out.extend_from_slice(&codebook[i * dim..(i + 1) * dim]);
    }
    Ok(out)
}
