//! Causal pre-norm decoder forward pass with an activation cache.

use super::config::{Activation, ModelConfig, Norm};
use super::neuron::NeuronSet;
use super::weights::ModelWeights;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

pub type Token = u32;

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Cached intermediate values for one layer. Matrices have one row per
/// token position.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// Residual stream entering the layer.
    pub resid_in: Matrix<T>,
    /// Normalized input to attention.
    pub attn_in: Matrix<T>,
    pub attn_inv_rms: Vec<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Attention weights per head, `seq × seq`, zero above the diagonal.
    pub attn: Vec<Matrix<T>>,
    /// Concatenated per-head mixtures `Σ_i A[t,i] v_i`.
    pub mix: Matrix<T>,
    pub attn_out: Matrix<T>,
    pub resid_mid: Matrix<T>,
    pub mlp_in: Matrix<T>,
    pub mlp_inv_rms: Vec<T>,
    pub mlp_pre: Matrix<T>,
    pub mlp_post: Matrix<T>,
    pub mlp_out: Matrix<T>,
    pub resid_out: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub tokens: Vec<Token>,
    pub layers: Vec<LayerTrace<T>>,
    /// Normalized final residual fed to the unembedding.
    pub final_in: Matrix<T>,
    pub final_inv_rms: Vec<T>,
    pub logits: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn final_resid(&self) -> &Matrix<T> {
        &self.layers.last().expect("at least one layer").resid_out
    }
}

pub fn check_tokens(config: &ModelConfig, tokens: &[Token]) -> Result<()> {
    ensure!(!tokens.is_empty(), Input, "empty token sequence");
    ensure!(
        tokens.len() <= config.max_seq_len,
        Input,
        "sequence length {} exceeds max_seq_len {}",
        tokens.len(),
        config.max_seq_len
    );
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(crate::Error::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub fn activate<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Activation::Silu => x / (T::one() + (-x).exp()),
    }
}

pub fn activate_grad<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
    }
}

/// Returns `(normalized, 1/rms)`; identity with unit factor when norm is off.
fn norm_row<T: Scalar>(norm: Norm, x: &[T], scale: &[T], out: &mut [T]) -> T {
    match norm {
        Norm::None => {
            out.copy_from_slice(x);
            T::one()
        }
        Norm::RmsNorm => {
            let ms = x.iter().map(|&v| v * v).sum::<T>() / T::of(x.len() as f64);
            let inv = T::one() / (ms + T::of(NORM_EPS)).sqrt();
            for ((o, &v), &s) in out.iter_mut().zip(x).zip(scale) {
                *o = v * inv * s;
            }
            inv
        }
    }
}

fn run<T: Scalar>(w: &ModelWeights<T>, tokens: &[Token], mask: Option<&[bool]>) -> Result<ForwardTrace<T>> {
    let c = &w.config;
    check_tokens(c, tokens)?;
    let n = tokens.len();
    let d = c.d_model;
    let dh = c.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut x = Matrix::zeros(n, d);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(w.token_embedding.row(tok as usize));
    }

    let mut layers = Vec::with_capacity(c.n_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        let resid_in = x;
        let mut attn_in = Matrix::zeros(n, d);
        let mut attn_inv_rms = vec![T::zero(); n];
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for t in 0..n {
            attn_inv_rms[t] = norm_row(c.norm, resid_in.row(t), &lw.attn_norm, attn_in.row_mut(t));
            lw.attn_q.left_mul_into(attn_in.row(t), q.row_mut(t));
            lw.attn_k.left_mul_into(attn_in.row(t), k.row_mut(t));
            lw.attn_v.left_mul_into(attn_in.row(t), v.row_mut(t));
        }

        let mut attn = Vec::with_capacity(c.n_heads);
        let mut mix = Matrix::zeros(n, d);
        let mut scores = vec![T::zero(); n];
        for h in 0..c.n_heads {
            let hs = h * dh..(h + 1) * dh;
            let mut a = Matrix::zeros(n, n);
            for t in 0..n {
                let qt = &q.row(t)[hs.clone()];
                let mut max = T::neg_infinity();
                for i in 0..=t {
                    scores[i] = dot(qt, &k.row(i)[hs.clone()]) * scale;
                    max = max.max(scores[i]);
                }
                let mut z = T::zero();
                for s in scores.iter_mut().take(t + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let row = a.row_mut(t);
                for i in 0..=t {
                    row[i] = scores[i] / z;
                }
                let out = &mut mix.row_mut(t)[hs.clone()];
                for i in 0..=t {
                    let ai = a[(t, i)];
                    for (o, &vv) in out.iter_mut().zip(&v.row(i)[hs.clone()]) {
                        *o += ai * vv;
                    }
                }
            }
            attn.push(a);
        }

        let mut attn_out = Matrix::zeros(n, d);
        let mut resid_mid = Matrix::zeros(n, d);
        let mut mlp_in = Matrix::zeros(n, d);
        let mut mlp_inv_rms = vec![T::zero(); n];
        let mut mlp_pre = Matrix::zeros(n, c.d_mlp);
        let mut mlp_post = Matrix::zeros(n, c.d_mlp);
        let mut mlp_out = Matrix::zeros(n, d);
        let mut resid_out = Matrix::zeros(n, d);
        let layer_mask = mask.map(|m| &m[li * c.d_mlp..(li + 1) * c.d_mlp]);
        let mut gated = vec![T::zero(); c.d_mlp];
        for t in 0..n {
            lw.attn_o.left_mul_into(mix.row(t), attn_out.row_mut(t));
            for ((m, &r), &a) in resid_mid.row_mut(t).iter_mut().zip(resid_in.row(t)).zip(attn_out.row(t)) {
                *m = r + a;
            }
            mlp_inv_rms[t] = norm_row(c.norm, resid_mid.row(t), &lw.mlp_norm, mlp_in.row_mut(t));
            lw.mlp_up.left_mul_into(mlp_in.row(t), mlp_pre.row_mut(t));
            for (p, &z) in mlp_post.row_mut(t).iter_mut().zip(mlp_pre.row(t)) {
                *p = activate(c.activation, z);
            }
            let post = match layer_mask {
                None => mlp_post.row(t),
                Some(m) => {
                    for ((g, &p), &off) in gated.iter_mut().zip(mlp_post.row(t)).zip(m) {
                        *g = if off { T::zero() } else { p };
                    }
                    &gated
                }
            };
            lw.mlp_down.left_mul_into(post, mlp_out.row_mut(t));
            for ((o, &r), &m) in resid_out.row_mut(t).iter_mut().zip(resid_mid.row(t)).zip(mlp_out.row(t)) {
                *o = r + m;
            }
        }
        x = resid_out.clone();
        layers.push(LayerTrace {
            resid_in,
            attn_in,
            attn_inv_rms,
            q,
            k,
            v,
            attn,
            mix,
            attn_out,
            resid_mid,
            mlp_in,
            mlp_inv_rms,
            mlp_pre,
            mlp_post,
            mlp_out,
            resid_out,
        });
    }

    let mut final_in = Matrix::zeros(n, d);
    let mut final_inv_rms = vec![T::zero(); n];
    let mut logits = Matrix::zeros(n, c.vocab_size);
    for t in 0..n {
        final_inv_rms[t] = norm_row(c.norm, x.row(t), &w.final_norm, final_in.row_mut(t));
        w.unembedding.left_mul_into(final_in.row(t), logits.row_mut(t));
    }
    Ok(ForwardTrace { tokens: tokens.to_vec(), layers, final_in, final_inv_rms, logits })
}

/// Unmasked forward pass. The returned trace carries the logits.
pub fn forward<T: Scalar>(weights: &ModelWeights<T>, tokens: &[Token]) -> Result<ForwardTrace<T>> {
    run(weights, tokens, None)
}

/// Forward pass with the post-activations of `mask` replaced by zero before
/// the down projection.
pub fn forward_masked<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[Token],
    mask: &NeuronSet,
) -> Result<Matrix<T>> {
    let bits = mask.mask(weights.config.layout())?;
    Ok(run(weights, tokens, Some(&bits))?.logits)
}

/// Logits under an optional mask given as a precomputed flat bitmap.
pub(crate) fn logits_with_bits<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[Token],
    bits: Option<&[bool]>,
) -> Result<Matrix<T>> {
    Ok(run(weights, tokens, bits)?.logits)
}

/// Numerically stable `log softmax(row)[index]`.
pub fn log_softmax_at<T: Scalar>(row: &[T], index: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let z = row.iter().map(|&v| (v - max).exp()).sum::<T>();
    row[index] - max - z.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, NeuronId, Method};
    use crate::Error;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_mlp: 6, vocab_size: 11, max_seq_len: 16, ..Default::default() }
    }

    #[test]
    fn deterministic_and_shaped() {
        let w = ModelWeights::<f64>::gaussian(small(), 0.5, 3).unwrap();
        let a = forward(&w, &[1, 2, 3]).unwrap();
        let b = forward(&w, &[1, 2, 3]).unwrap();
        assert_eq!(a.logits, b.logits);
        let one = forward(&w, &[4]).unwrap();
        assert_eq!(one.logits.shape(), (1, 11));
        assert_eq!(one.seq_len(), 1);
        assert_eq!(one.layers.len(), 2);
    }

    #[test]
    fn bounds_are_input_errors() {
        let w = ModelWeights::<f64>::gaussian(small(), 0.5, 3).unwrap();
        assert!(matches!(forward(&w, &[11]), Err(Error::Input(_))));
        assert!(matches!(forward(&w, &[0; 17]), Err(Error::Input(_))));
        assert!(matches!(forward(&w, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let w = ModelWeights::<f64>::gaussian(small(), 0.5, 3).unwrap();
        let tr = forward(&w, &[1, 5, 2, 9]).unwrap();
        for a in &tr.layers[1].attn {
            for t in 0..4 {
                let s: f64 = a.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(a.row(t)[t + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn prefix_logits_match_full_sequence() {
        let w = ModelWeights::<f64>::gaussian(small(), 0.5, 3).unwrap();
        let full = forward(&w, &[3, 1, 4, 1, 5]).unwrap();
        let pre = forward(&w, &[3, 1, 4]).unwrap();
        assert_eq!(pre.logits.row(2), full.logits.row(2));
    }

    #[test]
    fn trace_post_is_activation_of_pre() {
        for act in [Activation::Relu, Activation::Silu] {
            let w = ModelWeights::<f64>::gaussian(ModelConfig { activation: act, ..small() }, 0.5, 4).unwrap();
            let tr = forward(&w, &[0, 7, 7, 2]).unwrap();
            for l in &tr.layers {
                for (&p, &z) in l.mlp_post.as_slice().iter().zip(l.mlp_pre.as_slice()) {
                    assert_eq!(p, activate(act, z));
                }
            }
        }
    }

    #[test]
    fn empty_mask_is_bitwise_identity() {
        let w: ModelWeights<f64> = build_model(ModelConfig::default(), 7).unwrap();
        let toks = [1, 40, 70, 3, 3, 90];
        let plain = forward(&w, &toks).unwrap().logits;
        let masked = forward_masked(&w, &toks, &NeuronSet::empty(Method::Random, None, 0)).unwrap();
        let bits = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain), bits(&masked));
    }

    #[test]
    fn invalid_mask_is_input_error() {
        let w = ModelWeights::<f64>::gaussian(small(), 0.5, 3).unwrap();
        let set = NeuronSet::new([NeuronId::new(0, 6)], Method::Random, None, 1).unwrap();
        assert!(matches!(forward_masked(&w, &[1], &set), Err(Error::Input(_))));
    }

    #[test]
    fn log_softmax_of_uniform_row() {
        let v = log_softmax_at(&[0.0f64; 4], 2);
        assert!((v - (0.25f64).ln()).abs() < 1e-15);
    }
}
