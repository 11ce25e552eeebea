//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] sweeps it in
//! reverse and returns [`Gradients`] for every parameter of a
//! [`ParamStore`]. Elements are generic over [`Real`] so the same model code
//! runs at 32-bit for training and 64-bit for finite-difference checks.

mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

use std::sync::Arc;

pub use gradcheck::{finite_diff_check, sample_probes, FdReport, Probe};
pub use graph::{Gradients, Graph, KeyLists, Var};
pub use params::{randn, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Single-head attention of `q`, `k`, `v` (`[S, d]`) under a dense
/// row-major boolean `mask` (`[S, S]`, `true` = permitted).
pub fn masked_attention<T: Real>(
    graph: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
) -> Result<Var> {
    let s = graph.shape(q).first().copied().unwrap_or(0);
    if mask.len() != s * s {
        return Err(Error::dim(format!(
            "mask of {} entries for {s} tokens",
            mask.len()
        )));
    }
    let keys = KeyLists::from_dense(s, mask)?;
    graph.attention(q, k, v, Arc::new(keys), 1)
}

#[cfg(test)]
mod tests;
