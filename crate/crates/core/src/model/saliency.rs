//! Gradient-based input saliency.

use super::{backward_pass, forward_pass, Model, ModelError};
use crate::scalar::Scalar;

/// Influence of each token `ids[..position]` on the token at `ids[position]`.
///
/// Takes the gradient of that token's logit (read off the row that predicts
/// it) with respect to every input embedding, reduces each row to its L2
/// norm and normalizes the norms to sum to one. An all-zero gradient yields
/// uniform scores.
pub fn saliency_scores<S: Scalar>(
    model: &Model<S>,
    ids: &[u32],
    position: usize,
) -> Result<Vec<f64>, ModelError> {
    if position == 0 || position >= ids.len() {
        return Err(ModelError::PositionOutOfRange {
            position,
            len: ids.len(),
        });
    }
    let prefix = &ids[..position];
    let cache = forward_pass(model, &[prefix], None)?;
    let v = model.config().vocab_size;
    let target = ids[position] as usize;
    if target >= v {
        return Err(ModelError::TokenOutOfRange {
            id: ids[position],
            vocab: v,
        });
    }
    let mut dlogits = vec![S::zero(); position * v];
    dlogits[(position - 1) * v + target] = S::one();
    let (_, dx) = backward_pass(model, &cache, &dlogits);
    let d = model.config().d_model;
    let norms: Vec<f64> = dx
        .chunks_exact(d)
        .map(|row| row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Ok(vec![1.0 / position as f64; position]);
    }
    Ok(norms.into_iter().map(|x| x / total).collect())
}
