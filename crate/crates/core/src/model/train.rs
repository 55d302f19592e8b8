//! Next-token cross-entropy, hand-written backward pass, and plain SGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::Norm;
use super::forward::{activate_grad, forward, log_softmax_at, ForwardTrace, Token};
use super::weights::ModelWeights;
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub weights: ModelWeights<T>,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// Mean next-token cross-entropy over positions `0..len-1`.
pub fn sequence_loss<T: Scalar>(weights: &ModelWeights<T>, tokens: &[Token]) -> Result<T> {
    ensure!(tokens.len() >= 2, Input, "need at least two tokens for a next-token loss");
    let tr = forward(weights, tokens)?;
    Ok(loss_from_trace(&tr))
}

fn loss_from_trace<T: Scalar>(tr: &ForwardTrace<T>) -> T {
    let n = tr.seq_len() - 1;
    let total = (0..n).map(|t| -log_softmax_at(tr.logits.row(t), tr.tokens[t + 1] as usize)).sum::<T>();
    total / T::of(n as f64)
}

/// Backward through an (optional) RMS norm. Accumulates the scale gradient
/// and returns the gradient with respect to the un-normalized input.
fn norm_backward<T: Scalar>(norm: Norm, x: &[T], inv: T, scale: &[T], dy: &[T], dscale: &mut [T]) -> Vec<T> {
    match norm {
        Norm::None => dy.to_vec(),
        Norm::RmsNorm => {
            let dim = T::of(x.len() as f64);
            let mut acc = T::zero();
            for i in 0..x.len() {
                dscale[i] += dy[i] * x[i] * inv;
                acc += dy[i] * scale[i] * x[i];
            }
            let k = inv * inv * inv / dim * acc;
            (0..x.len()).map(|i| inv * scale[i] * dy[i] - k * x[i]).collect()
        }
    }
}

/// Loss and parameter gradients for one sequence.
pub fn loss_and_grad<T: Scalar>(weights: &ModelWeights<T>, tokens: &[Token]) -> Result<(T, ModelWeights<T>)> {
    ensure!(tokens.len() >= 2, Input, "need at least two tokens for a next-token loss");
    let tr = forward(weights, tokens)?;
    let mut grad = weights.zeros_like();
    let loss = loss_from_trace(&tr);
    accumulate_grad(weights, &tr, T::one(), &mut grad);
    Ok((loss, grad))
}

/// Adds `weight · ∂loss/∂θ` for the sequence in `tr` into `grad`.
fn accumulate_grad<T: Scalar>(w: &ModelWeights<T>, tr: &ForwardTrace<T>, weight: T, grad: &mut ModelWeights<T>) {
    let c = &w.config;
    let n = tr.seq_len();
    let d = c.d_model;
    let dh = c.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let per_pos = weight / T::of((n - 1) as f64);

    // Unembedding and final norm.
    let final_resid = tr.final_resid();
    let mut dx = Matrix::zeros(n, d);
    for t in 0..n - 1 {
        let row = tr.logits.row(t);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let z = row.iter().map(|&v| (v - max).exp()).sum::<T>();
        let mut dlogits: Vec<T> = row.iter().map(|&v| (v - max).exp() / z * per_pos).collect();
        dlogits[tr.tokens[t + 1] as usize] -= per_pos;
        grad.unembedding.add_outer(tr.final_in.row(t), &dlogits, T::one());
        let dh_t = w.unembedding.right_mul(&dlogits);
        let g = norm_backward(c.norm, final_resid.row(t), tr.final_inv_rms[t], &w.final_norm, &dh_t, &mut grad.final_norm);
        dx.row_mut(t).copy_from_slice(&g);
    }

    for (li, lw) in w.layers.iter().enumerate().rev() {
        let lt = &tr.layers[li];
        let lg = &mut grad.layers[li];

        // MLP branch; the skip path keeps dx as is.
        let mut d_mid = dx.clone();
        for t in 0..n {
            let dout = dx.row(t);
            lg.mlp_down.add_outer(lt.mlp_post.row(t), dout, T::one());
            let dpost = lw.mlp_down.right_mul(dout);
            let dpre: Vec<T> = dpost
                .iter()
                .zip(lt.mlp_pre.row(t))
                .map(|(&g, &z)| g * activate_grad(c.activation, z))
                .collect();
            lg.mlp_up.add_outer(lt.mlp_in.row(t), &dpre, T::one());
            let din = lw.mlp_up.right_mul(&dpre);
            let g = norm_backward(c.norm, lt.resid_mid.row(t), lt.mlp_inv_rms[t], &lw.mlp_norm, &din, &mut lg.mlp_norm);
            for (m, v) in d_mid.row_mut(t).iter_mut().zip(g) {
                *m += v;
            }
        }

        // Attention branch.
        let mut d_in = d_mid.clone();
        let mut dmix = Matrix::zeros(n, d);
        for t in 0..n {
            lg.attn_o.add_outer(lt.mix.row(t), d_mid.row(t), T::one());
            dmix.row_mut(t).copy_from_slice(&lw.attn_o.right_mul(d_mid.row(t)));
        }
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut da = vec![T::zero(); n];
        for (h, a) in lt.attn.iter().enumerate() {
            let hs = h * dh..(h + 1) * dh;
            for t in 0..n {
                let gm = &dmix.row(t)[hs.clone()];
                let mut weighted = T::zero();
                for i in 0..=t {
                    da[i] = dot(gm, &lt.v.row(i)[hs.clone()]);
                    weighted += a[(t, i)] * da[i];
                    let ai = a[(t, i)];
                    for (o, &g) in dv.row_mut(i)[hs.clone()].iter_mut().zip(gm) {
                        *o += ai * g;
                    }
                }
                for i in 0..=t {
                    let ds = a[(t, i)] * (da[i] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in hs.clone() {
                        dq[(t, c)] += ds * lt.k[(i, c)];
                        dk[(i, c)] += ds * lt.q[(t, c)];
                    }
                }
            }
        }
        for t in 0..n {
            let x = lt.attn_in.row(t);
            lg.attn_q.add_outer(x, dq.row(t), T::one());
            lg.attn_k.add_outer(x, dk.row(t), T::one());
            lg.attn_v.add_outer(x, dv.row(t), T::one());
            let mut din: Vec<T> = lw.attn_q.right_mul(dq.row(t));
            for (a, b) in din.iter_mut().zip(lw.attn_k.right_mul(dk.row(t))) {
                *a += b;
            }
            for (a, b) in din.iter_mut().zip(lw.attn_v.right_mul(dv.row(t))) {
                *a += b;
            }
            let g = norm_backward(c.norm, lt.resid_in.row(t), lt.attn_inv_rms[t], &lw.attn_norm, &din, &mut lg.attn_norm);
            for (m, v) in d_in.row_mut(t).iter_mut().zip(g) {
                *m += v;
            }
        }
        dx = d_in;
    }

    for (t, &tok) in tr.tokens.iter().enumerate() {
        for (e, &g) in grad.token_embedding.row_mut(tok as usize).iter_mut().zip(dx.row(t)) {
            *e += g;
        }
    }
}

/// Plain minibatch SGD on next-token cross-entropy. Batches are drawn with
/// replacement from `corpus` by a generator seeded from `hyper.seed`.
pub fn train<T: Scalar>(weights: &ModelWeights<T>, corpus: &[Vec<Token>], hyper: &TrainConfig) -> Result<TrainOutcome<T>> {
    ensure!(hyper.batch >= 1, Config, "batch must be at least 1");
    ensure!(hyper.lr.is_finite() && hyper.lr >= 0.0, Config, "learning rate must be finite and non-negative");
    let usable: Vec<&Vec<Token>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if hyper.steps > 0 {
        ensure!(!usable.is_empty(), Input, "training corpus has no sequence of length >= 2");
    }
    for s in &usable {
        super::forward::check_tokens(&weights.config, s)?;
    }
    let mut w = weights.clone();
    let mut rng = seed::rng(hyper.seed);
    let lr = T::of(hyper.lr);
    let per_sample = T::one() / T::of(hyper.batch as f64);
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut grad = w.zeros_like();
        let mut loss = T::zero();
        for _ in 0..hyper.batch {
            let s = usable[rng.gen_range(0..usable.len())];
            let tr = forward(&w, s)?;
            loss += loss_from_trace(&tr) * per_sample;
            accumulate_grad(&w, &tr, per_sample, &mut grad);
        }
        if !loss.is_finite() {
            return Err(Error::Training { step, loss: loss.f64() });
        }
        losses.push(loss.f64());
        for ((_, p), (_, g)) in w.tensors_mut().into_iter().zip(grad.tensors()) {
            for (pv, &gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(TrainOutcome { weights: w, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation, ModelConfig};

    fn bits(w: &ModelWeights<f64>) -> Vec<u64> {
        w.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn zero_lr_leaves_weights_untouched() {
        let w: ModelWeights<f64> = build_model(ModelConfig::default(), 7).unwrap();
        let corpus = vec![vec![1, 2, 3, 4], vec![40, 41, 42]];
        let out = train(&w, &corpus, &TrainConfig { lr: 0.0, steps: 3, batch: 2, seed: 1 }).unwrap();
        assert_eq!(bits(&out.weights), bits(&w));
        assert_eq!(out.losses.len(), 3);
    }

    #[test]
    fn diverging_training_reports_step() {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 8, vocab_size: 8, max_seq_len: 8, ..Default::default() };
        let w = ModelWeights::<f64>::gaussian(cfg, 1.0, 2).unwrap();
        let corpus = vec![vec![1, 2, 3, 4, 5, 6, 7, 0]];
        let err = train(&w, &corpus, &TrainConfig { lr: 1e200, steps: 10, batch: 1, seed: 1 }).unwrap_err();
        match err {
            Error::Training { step, .. } => assert!(step >= 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn single_parameter_gradient_matches_difference_quotient() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_mlp: 3,
            vocab_size: 5,
            max_seq_len: 8,
            activation: Activation::Silu,
            ..Default::default()
        };
        let w = ModelWeights::<f64>::gaussian(cfg, 0.7, 11).unwrap();
        let toks = [0, 3, 1, 4];
        let (_, g) = loss_and_grad(&w, &toks).unwrap();
        let h = 1e-6;
        let mut plus = w.clone();
        plus.layers[0].mlp_up[(1, 2)] += h;
        let mut minus = w.clone();
        minus.layers[0].mlp_up[(1, 2)] -= h;
        let fd = (sequence_loss(&plus, &toks).unwrap() - sequence_loss(&minus, &toks).unwrap()) / (2.0 * h);
        let an = g.layers[0].mlp_up[(1, 2)];
        assert!((fd - an).abs() <= 1e-7 * (1.0 + an.abs()), "fd {fd} analytic {an}");
    }
}
