//! Analytic toy similarity and a central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::{LatentConditioning, LatentGrid, TensorBuffer};

/// `cosine(mean_pool(z_n), target)` and its exact gradient with respect to every
/// element of `z_n` (row-major, same layout as the grid).
pub fn toy_similarity(zn: &LatentGrid, target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != zn.channels {
        return Err(Error::Shape(format!(
            "target has {} channels, conditioning has {}",
            target.len(),
            zn.channels
        )));
    }
    let pooled = zn.mean_pool();
    let np = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 || !np.is_finite() {
        return Err(Error::Degenerate(
            "pooled conditioning or target has zero norm".into(),
        ));
    }
    let dot: f64 = pooled.iter().zip(target).map(|(p, t)| p * t).sum();
    let value = dot / (np * nt);
    // d cos / d pooled_j = t_j / (|p| |t|) - cos * p_j / |p|^2; pooling divides by T.
    let inv_tokens = 1.0 / zn.tokens as f64;
    let d_pooled: Vec<f64> = pooled
        .iter()
        .zip(target)
        .map(|(p, t)| (t / (np * nt) - value * p / (np * np)) * inv_tokens)
        .collect();
    let mut grad = Vec::with_capacity(zn.data.len());
    for _ in 0..zn.tokens {
        grad.extend_from_slice(&d_pooled);
    }
    Ok((value, grad))
}

/// [`toy_similarity`] over exchange types.
pub fn toy_similarity_tensor(
    zn: &LatentConditioning,
    target: &TensorBuffer,
) -> Result<(f64, TensorBuffer)> {
    let grid = zn.to_grid();
    let (v, g) = toy_similarity(&grid, &target.to_f64())?;
    Ok((
        v,
        TensorBuffer::from_f64(zn.embedding().shape().to_vec(), &g)?,
    ))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Argument("finite-difference step must be > 0".into()));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation at element {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Finite-difference gradient of a function of a tensor; the tensor is perturbed in
/// `f64` and handed to `f` as a working-precision slice.
pub fn finite_diff_gradient_tensor<F>(f: F, x: &TensorBuffer, h: f64) -> Result<TensorBuffer>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let g = finite_diff_gradient(f, &x.to_f64(), h)?;
    TensorBuffer::from_f64(x.shape().to_vec(), &g)
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
