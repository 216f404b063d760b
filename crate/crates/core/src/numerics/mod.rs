//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod param;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, relative_error, GRAD_CHECK_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use param::{BoundParams, Parameter};
pub use tensor::Tensor;

/// Default epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Vectors shorter than this are treated as zero when normalizing.
pub const MIN_NORM: f64 = 1e-12;

/// Cosine similarity of two equal-length vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> crate::Result<f64> {
    if u.len() != v.len() {
        return Err(crate::Error::dim("cosine", &[u.len()], &[v.len()]));
    }
    let (nu, nv) = (kernels::norm(u), kernels::norm(v));
    if !(nu > MIN_NORM && nv > MIN_NORM) {
        return Err(crate::Error::DegenerateVector(format!(
            "cosine of vectors with norms {nu} and {nv}"
        )));
    }
    // sqrt(|u|^2 |v|^2) rather than |u| |v|: for u = v this is exactly the
    // dot product, so identical vectors score exactly 1.
    let denom = (kernels::dot(u, u) * kernels::dot(v, v)).sqrt();
    Ok((kernels::dot(u, v) / denom).clamp(-1.0, 1.0))
}
