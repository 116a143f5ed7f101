//! Inference: full-sequence logits and incremental decoding with a key/value cache.

use super::ops::{gelu, layer_norm, linear, softmax_in_place};
use super::{forward_pass, Model, ModelConfig, ModelError, LAYER_NORM_EPS};
use crate::scalar::Scalar;

/// Logits `[ids.len(), vocab]`, row-major. Row `t` depends only on `ids[..=t]`.
pub fn forward<S: Scalar>(model: &Model<S>, ids: &[u32]) -> Result<Vec<S>, ModelError> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    Ok(forward_pass(model, &[ids], None)?.logits)
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let cap = cfg.max_seq_len * cfg.d_model;
        KvCache {
            keys: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
        }
    }

    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
        self.len = 0;
    }
}

/// Appends `ids` after the cached positions and returns their logits
/// `[ids.len(), vocab]`.
pub fn forward_cached<S: Scalar>(
    model: &Model<S>,
    cache: &mut KvCache<S>,
    ids: &[u32],
) -> Result<Vec<S>, ModelError> {
    let cfg = model.config();
    let p = model.params();
    let layout = p.layout();
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let n = ids.len();
    let start = cache.len;
    if start + n > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: start + n,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= v) {
        return Err(ModelError::TokenOutOfRange { id, vocab: v });
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let wte = p.tensor(layout.wte);
    let wpe = p.tensor(layout.wpe);
    let mut x = vec![S::zero(); n * d];
    for (r, &id) in ids.iter().enumerate() {
        let (id, pos) = (id as usize, start + r);
        for i in 0..d {
            x[r * d + i] = wte[id * d + i] + wpe[pos * d + i];
        }
    }

    let scale = S::lit(1.0 / (hd as f64).sqrt());
    let mut h = vec![S::zero(); n * d];
    let mut qkv = vec![S::zero(); n * 3 * d];
    let mut attn = vec![S::zero(); n * d];
    let mut branch = vec![S::zero(); n * d];
    let mut hidden = vec![S::zero(); n * f];
    let mut scores = Vec::with_capacity(cfg.max_seq_len);
    for (l, b) in layout.blocks.iter().enumerate() {
        layer_norm(
            &x,
            p.tensor(b.ln1_g),
            p.tensor(b.ln1_b),
            d,
            LAYER_NORM_EPS,
            &mut h,
        );
        linear(
            &h,
            p.tensor(b.w_qkv),
            Some(p.tensor(b.b_qkv)),
            n,
            d,
            3 * d,
            &mut qkv,
        );
        let (keys, values) = (&mut cache.keys[l], &mut cache.values[l]);
        for r in 0..n {
            keys.extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
            values.extend_from_slice(&qkv[r * 3 * d + 2 * d..(r + 1) * 3 * d]);
        }
        for r in 0..n {
            let visible = start + r + 1;
            for head in 0..n_heads {
                let q = &qkv[r * 3 * d + head * hd..r * 3 * d + (head + 1) * hd];
                scores.clear();
                for j in 0..visible {
                    let k = &keys[j * d + head * hd..j * d + (head + 1) * hd];
                    scores.push(q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>() * scale);
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[r * d + head * hd..r * d + (head + 1) * hd];
                out.fill(S::zero());
                for (j, &w) in scores.iter().enumerate() {
                    let val = &values[j * d + head * hd..j * d + (head + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(val) {
                        *o += w * vv;
                    }
                }
            }
        }
        linear(
            &attn,
            p.tensor(b.w_attn_out),
            Some(p.tensor(b.b_attn_out)),
            n,
            d,
            d,
            &mut branch,
        );
        x.iter_mut().zip(&branch).for_each(|(xi, &bi)| *xi += bi);

        layer_norm(
            &x,
            p.tensor(b.ln2_g),
            p.tensor(b.ln2_b),
            d,
            LAYER_NORM_EPS,
            &mut h,
        );
        linear(
            &h,
            p.tensor(b.w_fc),
            Some(p.tensor(b.b_fc)),
            n,
            d,
            f,
            &mut hidden,
        );
        hidden.iter_mut().for_each(|z| *z = gelu(*z));
        linear(
            &hidden,
            p.tensor(b.w_mlp_out),
            Some(p.tensor(b.b_mlp_out)),
            n,
            f,
            d,
            &mut branch,
        );
        x.iter_mut().zip(&branch).for_each(|(xi, &bi)| *xi += bi);
    }
    cache.len += n;

    layer_norm(
        &x,
        p.tensor(layout.lnf_g),
        p.tensor(layout.lnf_b),
        d,
        LAYER_NORM_EPS,
        &mut h,
    );
    let mut logits = vec![S::zero(); n * v];
    linear(&h, p.tensor(layout.lm_head), None, n, d, v, &mut logits);
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 12,
            vocab_size: 10,
            dropout: 0.0,
        };
        Model::init(cfg, 11).unwrap()
    }

    #[test]
    fn rows_are_probability_vectors() {
        let m: Model<f32> = model().convert();
        let logits = forward(&m, &[1, 4, 5, 6, 2]).unwrap();
        for row in logits.chunks(10) {
            let mut row = row.to_vec();
            softmax_in_place(&mut row);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let m = model();
        let a = forward(&m, &[1, 4, 5, 6, 2]).unwrap();
        let b = forward(&m, &[1, 4, 5, 9, 3]).unwrap();
        assert_eq!(a[..3 * 10], b[..3 * 10]);
        assert_ne!(a[3 * 10..], b[3 * 10..]);
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let m = model();
        let ids = [1, 4, 5, 6, 2, 7, 8];
        let full = forward(&m, &ids).unwrap();
        let mut cache = KvCache::new(m.config());
        let mut inc = forward_cached(&m, &mut cache, &ids[..3]).unwrap();
        for &id in &ids[3..] {
            inc.extend(forward_cached(&m, &mut cache, &[id]).unwrap());
        }
        assert_eq!(cache.len(), ids.len());
        for (a, b) in full.iter().zip(&inc) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let m = model();
        assert!(matches!(
            forward(&m, &[1; 13]),
            Err(ModelError::SequenceTooLong { .. })
        ));
        let mut cache = KvCache::new(m.config());
        forward_cached(&m, &mut cache, &[1; 12]).unwrap();
        assert!(forward_cached(&m, &mut cache, &[1]).is_err());
    }

    #[test]
    fn logits_are_reproducible() {
        let a: Model<f32> = model().convert();
        let b: Model<f32> = model().convert();
        assert_eq!(
            forward(&a, &[3, 1, 4, 1, 5]).unwrap(),
            forward(&b, &[3, 1, 4, 1, 5]).unwrap()
        );
    }
}
