//! Batched training forward pass with activation caching, next-token
//! cross-entropy, and the matching hand-derived backward pass.
//!
//! Sequences in a batch are laid out back to back as rows of one matrix so
//! that every dense layer is a single matrix product; attention runs per
//! sequence. Trailing `PAD` tokens are stripped first. Because padding only
//! ever follows real tokens and attention is causal, this gives exactly the
//! loss and gradients of a padded batch with padded targets masked out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, NormCache,
};
use super::{Model, ModelError, ParamSet, LAYER_NORM_EPS};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tokenizer::PAD;

/// Inverted dropout applied to the embedding output and to both residual
/// branches. Masks are drawn from a generator seeded with `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub offset: usize,
    pub len: usize,
    prob_offset: usize,
}

struct LayerCache<S> {
    ln1: NormCache<S>,
    h1: Vec<S>,
    qkv: Vec<S>,
    probs: Vec<S>,
    attn: Vec<S>,
    attn_mask: Option<Vec<S>>,
    ln2: NormCache<S>,
    h2: Vec<S>,
    pre: Vec<S>,
    act: Vec<S>,
    mlp_mask: Option<Vec<S>>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardCache<S> {
    pub segments: Vec<Segment>,
    pub ids: Vec<u32>,
    emb_mask: Option<Vec<S>>,
    layers: Vec<LayerCache<S>>,
    lnf: NormCache<S>,
    hf: Vec<S>,
    /// `[rows, vocab]`
    pub logits: Vec<S>,
}

impl<S> ForwardCache<S> {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

fn dropout_mask<S: Scalar>(rng: &mut ChaCha8Rng, p: f64, n: usize) -> Vec<S> {
    let keep = S::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                S::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn apply_mask<S: Scalar>(x: &mut [S], mask: &Option<Vec<S>>) {
    if let Some(mask) = mask {
        for (v, &m) in x.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

/// Trailing `PAD` tokens removed.
pub(crate) fn strip_padding(seq: &[u32]) -> &[u32] {
    let end = seq.iter().rposition(|&id| id != PAD).map_or(0, |i| i + 1);
    &seq[..end]
}

pub(crate) fn forward_pass<S: Scalar>(
    model: &Model<S>,
    seqs: &[&[u32]],
    dropout: Option<Dropout>,
) -> Result<ForwardCache<S>, ModelError> {
    let cfg = model.config();
    let p = model.params();
    let layout = p.layout().clone();
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());

    let mut segments = Vec::with_capacity(seqs.len());
    let mut ids = Vec::new();
    let mut prob_offset = 0;
    for seq in seqs {
        if seq.len() > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= v) {
            return Err(ModelError::TokenOutOfRange { id, vocab: v });
        }
        segments.push(Segment {
            offset: ids.len(),
            len: seq.len(),
            prob_offset,
        });
        prob_offset += n_heads * seq.len() * seq.len();
        ids.extend_from_slice(seq);
    }
    let rows = ids.len();
    if rows == 0 {
        return Err(ModelError::EmptyBatch);
    }

    let mut rng = dropout
        .filter(|dr| dr.p > 0.0)
        .map(|dr| (ChaCha8Rng::seed_from_u64(dr.seed), dr.p));
    let mut draw_mask = |n: usize| rng.as_mut().map(|(rng, p)| dropout_mask::<S>(rng, *p, n));

    let mut x = vec![S::zero(); rows * d];
    let wte = p.tensor(layout.wte);
    let wpe = p.tensor(layout.wpe);
    for seg in &segments {
        for t in 0..seg.len {
            let r = seg.offset + t;
            let id = ids[r] as usize;
            let xr = &mut x[r * d..(r + 1) * d];
            for i in 0..d {
                xr[i] = wte[id * d + i] + wpe[t * d + i];
            }
        }
    }
    let emb_mask = draw_mask(rows * d);
    apply_mask(&mut x, &emb_mask);

    let scale = S::lit(1.0 / (hd as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for b in &layout.blocks {
        let mut h1 = vec![S::zero(); rows * d];
        let ln1 = layer_norm(
            &x,
            p.tensor(b.ln1_g),
            p.tensor(b.ln1_b),
            d,
            LAYER_NORM_EPS,
            &mut h1,
        );
        let mut qkv = vec![S::zero(); rows * 3 * d];
        linear(
            &h1,
            p.tensor(b.w_qkv),
            Some(p.tensor(b.b_qkv)),
            rows,
            d,
            3 * d,
            &mut qkv,
        );

        let mut probs = vec![S::zero(); prob_offset];
        let mut attn = vec![S::zero(); rows * d];
        for seg in &segments {
            let (o, t) = (seg.offset, seg.len);
            for h in 0..n_heads {
                let pr = &mut probs[seg.prob_offset + h * t * t..seg.prob_offset + (h + 1) * t * t];
                let q = MatRef::strided(&qkv[o * 3 * d + h * hd..], t, hd, 3 * d, 1);
                let k = MatRef::strided(&qkv[o * 3 * d + d + h * hd..], t, hd, 3 * d, 1);
                gemm(scale, q, k.t(), S::zero(), MatMut::new(pr, t, t));
                for i in 0..t {
                    let row = &mut pr[i * t..(i + 1) * t];
                    super::ops::softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(S::zero());
                }
                let vv = MatRef::strided(&qkv[o * 3 * d + 2 * d + h * hd..], t, hd, 3 * d, 1);
                gemm(
                    S::one(),
                    MatRef::new(pr, t, t),
                    vv,
                    S::zero(),
                    MatMut::strided(&mut attn[o * d + h * hd..], t, hd, d, 1),
                );
            }
        }
        let mut branch = vec![S::zero(); rows * d];
        linear(
            &attn,
            p.tensor(b.w_attn_out),
            Some(p.tensor(b.b_attn_out)),
            rows,
            d,
            d,
            &mut branch,
        );
        let attn_mask = draw_mask(rows * d);
        apply_mask(&mut branch, &attn_mask);
        for (xi, bi) in x.iter_mut().zip(&branch) {
            *xi += *bi;
        }

        let mut h2 = vec![S::zero(); rows * d];
        let ln2 = layer_norm(
            &x,
            p.tensor(b.ln2_g),
            p.tensor(b.ln2_b),
            d,
            LAYER_NORM_EPS,
            &mut h2,
        );
        let mut pre = vec![S::zero(); rows * f];
        linear(
            &h2,
            p.tensor(b.w_fc),
            Some(p.tensor(b.b_fc)),
            rows,
            d,
            f,
            &mut pre,
        );
        let act: Vec<S> = pre.iter().map(|&z| gelu(z)).collect();
        linear(
            &act,
            p.tensor(b.w_mlp_out),
            Some(p.tensor(b.b_mlp_out)),
            rows,
            f,
            d,
            &mut branch,
        );
        let mlp_mask = draw_mask(rows * d);
        apply_mask(&mut branch, &mlp_mask);
        for (xi, bi) in x.iter_mut().zip(&branch) {
            *xi += *bi;
        }

        layers.push(LayerCache {
            ln1,
            h1,
            qkv,
            probs,
            attn,
            attn_mask,
            ln2,
            h2,
            pre,
            act,
            mlp_mask,
        });
    }

    let mut hf = vec![S::zero(); rows * d];
    let lnf = layer_norm(
        &x,
        p.tensor(layout.lnf_g),
        p.tensor(layout.lnf_b),
        d,
        LAYER_NORM_EPS,
        &mut hf,
    );
    let mut logits = vec![S::zero(); rows * v];
    linear(&hf, p.tensor(layout.lm_head), None, rows, d, v, &mut logits);

    Ok(ForwardCache {
        segments,
        ids,
        emb_mask,
        layers,
        lnf,
        hf,
        logits,
    })
}

fn pair_mut<S>(grads: &mut ParamSet<S>, a: usize, b: usize) -> [&mut [S]; 2]
where
    S: Scalar,
{
    let ta = &grads.layout().tensors()[a];
    let tb = &grads.layout().tensors()[b];
    let (ra, rb) = (ta.offset..ta.offset + ta.len, tb.offset..tb.offset + tb.len);
    grads
        .as_mut_slice()
        .get_disjoint_mut([ra, rb])
        .expect("parameter tensors do not overlap")
}

/// Back-propagates `dlogits` (`[rows, vocab]`) through the cached forward pass.
/// Returns the parameter gradients and the gradient with respect to the
/// summed token-plus-position input embedding of every row.
pub(crate) fn backward_pass<S: Scalar>(
    model: &Model<S>,
    cache: &ForwardCache<S>,
    dlogits: &[S],
) -> (ParamSet<S>, Vec<S>) {
    let cfg = model.config();
    let p = model.params();
    let layout = p.layout().clone();
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let rows = cache.rows();
    let mut grads = ParamSet::zeros_like(p);

    let mut dh = vec![S::zero(); rows * d];
    linear_backward(
        &cache.hf,
        p.tensor(layout.lm_head),
        dlogits,
        rows,
        d,
        v,
        grads.tensor_mut(layout.lm_head),
        None,
        Some(&mut dh),
    );
    let mut dx = vec![S::zero(); rows * d];
    {
        let [dg, db] = pair_mut(&mut grads, layout.lnf_g, layout.lnf_b);
        layer_norm_backward(&dh, &cache.lnf, p.tensor(layout.lnf_g), d, dg, db, &mut dx);
    }

    let scale = S::lit(1.0 / (hd as f64).sqrt());
    let mut dbranch = vec![S::zero(); rows * d];
    let mut dact = vec![S::zero(); rows * f];
    let mut dqkv = vec![S::zero(); rows * 3 * d];
    let mut dattn = vec![S::zero(); rows * d];
    for (b, lc) in layout.blocks.iter().zip(&cache.layers).rev() {
        // Feed-forward branch.
        dbranch.copy_from_slice(&dx);
        apply_mask(&mut dbranch, &lc.mlp_mask);
        {
            let [dw, db] = pair_mut(&mut grads, b.w_mlp_out, b.b_mlp_out);
            linear_backward(
                &lc.act,
                p.tensor(b.w_mlp_out),
                &dbranch,
                rows,
                f,
                d,
                dw,
                Some(db),
                Some(&mut dact),
            );
        }
        for (g, &z) in dact.iter_mut().zip(&lc.pre) {
            *g *= gelu_grad(z);
        }
        {
            let [dw, db] = pair_mut(&mut grads, b.w_fc, b.b_fc);
            linear_backward(
                &lc.h2,
                p.tensor(b.w_fc),
                &dact,
                rows,
                d,
                f,
                dw,
                Some(db),
                Some(&mut dh),
            );
        }
        {
            let [dg, db] = pair_mut(&mut grads, b.ln2_g, b.ln2_b);
            layer_norm_backward(&dh, &lc.ln2, p.tensor(b.ln2_g), d, dg, db, &mut dx);
        }

        // Attention branch.
        dbranch.copy_from_slice(&dx);
        apply_mask(&mut dbranch, &lc.attn_mask);
        {
            let [dw, db] = pair_mut(&mut grads, b.w_attn_out, b.b_attn_out);
            linear_backward(
                &lc.attn,
                p.tensor(b.w_attn_out),
                &dbranch,
                rows,
                d,
                d,
                dw,
                Some(db),
                Some(&mut dattn),
            );
        }
        for seg in &cache.segments {
            let (o, t) = (seg.offset, seg.len);
            let mut dp = vec![S::zero(); t * t];
            for h in 0..n_heads {
                let pr = &lc.probs[seg.prob_offset + h * t * t..seg.prob_offset + (h + 1) * t * t];
                let q = MatRef::strided(&lc.qkv[o * 3 * d + h * hd..], t, hd, 3 * d, 1);
                let k = MatRef::strided(&lc.qkv[o * 3 * d + d + h * hd..], t, hd, 3 * d, 1);
                let vv = MatRef::strided(&lc.qkv[o * 3 * d + 2 * d + h * hd..], t, hd, 3 * d, 1);
                let dout = MatRef::strided(&dattn[o * d + h * hd..], t, hd, d, 1);
                gemm(
                    S::one(),
                    dout,
                    vv.t(),
                    S::zero(),
                    MatMut::new(&mut dp, t, t),
                );
                gemm(
                    S::one(),
                    MatRef::new(pr, t, t).t(),
                    dout,
                    S::zero(),
                    MatMut::strided(&mut dqkv[o * 3 * d + 2 * d + h * hd..], t, hd, 3 * d, 1),
                );
                // Softmax backward: dS = P ⊙ (dP − rowsum(P ⊙ dP)).
                for i in 0..t {
                    let prow = &pr[i * t..i * t + i + 1];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let dot: S = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                    drow[i + 1..].fill(S::zero());
                }
                let ds = MatRef::new(&dp, t, t);
                gemm(
                    scale,
                    ds,
                    k,
                    S::zero(),
                    MatMut::strided(&mut dqkv[o * 3 * d + h * hd..], t, hd, 3 * d, 1),
                );
                gemm(
                    scale,
                    ds.t(),
                    q,
                    S::zero(),
                    MatMut::strided(&mut dqkv[o * 3 * d + d + h * hd..], t, hd, 3 * d, 1),
                );
            }
        }
        {
            let [dw, db] = pair_mut(&mut grads, b.w_qkv, b.b_qkv);
            linear_backward(
                &lc.h1,
                p.tensor(b.w_qkv),
                &dqkv,
                rows,
                d,
                3 * d,
                dw,
                Some(db),
                Some(&mut dh),
            );
        }
        {
            let [dg, db] = pair_mut(&mut grads, b.ln1_g, b.ln1_b);
            layer_norm_backward(&dh, &lc.ln1, p.tensor(b.ln1_g), d, dg, db, &mut dx);
        }
    }

    apply_mask(&mut dx, &cache.emb_mask);
    {
        let [dwte, dwpe] = pair_mut(&mut grads, layout.wte, layout.wpe);
        for seg in &cache.segments {
            for t in 0..seg.len {
                let r = seg.offset + t;
                let id = cache.ids[r] as usize;
                let g = &dx[r * d..(r + 1) * d];
                for i in 0..d {
                    dwte[id * d + i] += g[i];
                    dwpe[t * d + i] += g[i];
                }
            }
        }
    }
    (grads, dx)
}

/// Mean next-token cross-entropy over every row that has a successor in its
/// sequence, and its gradient with respect to the logits.
pub(crate) fn cross_entropy<S: Scalar>(
    cache: &ForwardCache<S>,
    vocab: usize,
) -> Result<(f64, Vec<S>, usize), ModelError> {
    let targets: usize = cache.segments.iter().map(|s| s.len.saturating_sub(1)).sum();
    if targets == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let inv_n = 1.0 / targets as f64;
    let mut dlogits = vec![S::zero(); cache.logits.len()];
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; vocab];
    for seg in &cache.segments {
        for t in 0..seg.len.saturating_sub(1) {
            let r = seg.offset + t;
            let target = cache.ids[r + 1] as usize;
            let row = &cache.logits[r * vocab..(r + 1) * vocab];
            let max = row
                .iter()
                .map(|x| x.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (pr, &x) in probs.iter_mut().zip(row) {
                *pr = (x.as_f64() - max).exp();
                sum += *pr;
            }
            total += sum.ln() + max - row[target].as_f64();
            let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
            for (j, (g, &pr)) in drow.iter_mut().zip(&probs).enumerate() {
                let onehot = if j == target { 1.0 } else { 0.0 };
                *g = S::lit((pr / sum - onehot) * inv_n);
            }
        }
    }
    Ok((total * inv_n, dlogits, targets))
}

#[derive(Debug, Clone)]
pub struct LossAndGrads<S> {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub grads: ParamSet<S>,
    /// Number of predicted tokens the mean was taken over.
    pub targets: usize,
}

/// Loss and parameter gradients for a batch of token sequences. Trailing
/// `PAD` tokens are ignored, so ragged and padded batches give the same result.
pub fn loss_and_grads<S: Scalar>(
    model: &Model<S>,
    batch: &[Vec<u32>],
    dropout: Option<Dropout>,
) -> Result<LossAndGrads<S>, ModelError> {
    let seqs: Vec<&[u32]> = batch.iter().map(|s| strip_padding(s)).collect();
    let cache = forward_pass(model, &seqs, dropout)?;
    let (loss, dlogits, targets) = cross_entropy(&cache, model.config().vocab_size)?;
    let (grads, _) = backward_pass(model, &cache, &dlogits);
    Ok(LossAndGrads {
        loss,
        grads,
        targets,
    })
}

/// Loss only, without dropout.
pub fn batch_loss<S: Scalar>(model: &Model<S>, batch: &[Vec<u32>]) -> Result<f64, ModelError> {
    let seqs: Vec<&[u32]> = batch.iter().map(|s| strip_padding(s)).collect();
    let cache = forward_pass(model, &seqs, None)?;
    Ok(cross_entropy(&cache, model.config().vocab_size)?.0)
}
