//! Layer-wise relevance propagation from a next-token objective back to the
//! MLP neurons and the input embeddings.
//!
//! Rules: epsilon rule for every linear map, pass-through for activations
//! and norms, attention weights held constant with relevance routed through
//! the value path, and proportional splitting at residual junctions.

mod dump;
mod rules;

pub use dump::{read_relevance_dump, write_relevance_dump, RelevanceRecord, DUMP_MAGIC};
pub use rules::{propagate_attention, propagate_elementwise, propagate_linear, split_residual};

use serde::{Deserialize, Serialize};

use crate::corpus::LanguageId;
use crate::error::{ensure, Error, Result};
use crate::model::{forward, log_softmax_at, ForwardTrace, ModelWeights, Token};
use crate::tensor::Matrix;
use crate::Scalar;
use rules::{attention_with_mix, linear_with_z, ratio};

/// Quantity whose relevance is distributed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Sum over positions of the logit of the next token.
    #[default]
    GoldLogitSum,
    /// Sum over positions of the log-probability of the next token, seeded
    /// at the gold logit and propagated with the logit's rules.
    GoldLogprobSum,
}

/// How per-token neuron relevance is reduced to one value per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    AbsSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrpConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub objective: Objective,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self { epsilon: 1e-9, aggregation: Aggregation::Sum, objective: Objective::GoldLogitSum }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epsilon.is_finite() && self.epsilon >= 0.0, Config, "epsilon must be finite and non-negative");
        Ok(())
    }
}

/// Per-sample neuron relevance in layer-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceVector<T> {
    pub values: Vec<T>,
    pub objective_value: T,
    pub language: LanguageId,
}

/// Everything one backward sweep produces.
#[derive(Clone, Debug)]
pub struct Propagation<T> {
    /// Relevance per layer, token and neuron at the post-activation.
    pub neuron_tokens: Vec<Matrix<T>>,
    /// Relevance arriving at the input embeddings (the leaves).
    pub input: Matrix<T>,
    /// Per junction (two per layer, attention then MLP) the largest
    /// `|R - (R_skip + R_branch)|` over all coordinates.
    pub junction_error: Vec<T>,
}

impl<T: Scalar> Propagation<T> {
    pub fn leaf_total(&self) -> T {
        self.input.as_slice().iter().copied().sum()
    }

    pub fn neuron_values(&self, aggregation: Aggregation) -> Vec<T> {
        let mut out = Vec::with_capacity(self.neuron_tokens.iter().map(|m| m.cols()).sum());
        for m in &self.neuron_tokens {
            for n in 0..m.cols() {
                let mut acc = T::zero();
                for t in 0..m.rows() {
                    let v = m[(t, n)];
                    acc += match aggregation {
                        Aggregation::Sum => v,
                        Aggregation::AbsSum => v.abs(),
                    };
                }
                out.push(acc);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Attribution<T> {
    pub relevance: RelevanceVector<T>,
    pub trace: ForwardTrace<T>,
    pub propagation: Propagation<T>,
}

fn check_targets(tokens: &[Token]) -> Result<()> {
    ensure!(tokens.len() >= 2, Input, "need at least two tokens for a next-token objective");
    Ok(())
}

/// Objective value on a trace of `tokens`; the final position has no target.
pub fn objective_value<T: Scalar>(trace: &ForwardTrace<T>, tokens: &[Token]) -> Result<T> {
    objective_with(trace, tokens, Objective::GoldLogitSum)
}

pub fn objective_with<T: Scalar>(trace: &ForwardTrace<T>, tokens: &[Token], objective: Objective) -> Result<T> {
    check_targets(tokens)?;
    ensure!(trace.tokens == tokens, Input, "trace was produced from a different token sequence");
    Ok((0..tokens.len() - 1).map(|t| gold_term(trace, tokens, t, objective)).sum())
}

fn gold_term<T: Scalar>(trace: &ForwardTrace<T>, tokens: &[Token], t: usize, objective: Objective) -> T {
    let gold = tokens[t + 1] as usize;
    match objective {
        Objective::GoldLogitSum => trace.logits[(t, gold)],
        Objective::GoldLogprobSum => log_softmax_at(trace.logits.row(t), gold),
    }
}

/// Initial relevance on the logits: each position's objective term placed on
/// its gold token.
pub fn initial_relevance<T: Scalar>(trace: &ForwardTrace<T>, objective: Objective) -> Result<Matrix<T>> {
    check_targets(&trace.tokens)?;
    let n = trace.seq_len();
    let mut r = Matrix::zeros(n, trace.logits.cols());
    for t in 0..n - 1 {
        r[(t, trace.tokens[t + 1] as usize)] = gold_term(trace, &trace.tokens, t, objective);
    }
    Ok(r)
}

fn finite<T: Scalar>(m: &Matrix<T>, layer: usize, site: &str) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::Attribution { layer, reason: format!("non-finite relevance at {site}") })
    }
}

fn split_rows<T: Scalar>(r: &Matrix<T>, skip: &Matrix<T>, branch: &Matrix<T>, eps: T) -> (Matrix<T>, Matrix<T>, T) {
    let (n, d) = r.shape();
    let mut r_skip = Matrix::zeros(n, d);
    let mut r_branch = Matrix::zeros(n, d);
    let mut worst = T::zero();
    for t in 0..n {
        for j in 0..d {
            let b = branch[(t, j)];
            let rb = b * ratio(r[(t, j)], skip[(t, j)] + b, eps);
            let rs = r[(t, j)] - rb;
            r_branch[(t, j)] = rb;
            r_skip[(t, j)] = rs;
            worst = worst.max((r[(t, j)] - (rs + rb)).abs());
        }
    }
    (r_skip, r_branch, worst)
}

/// Propagates `output_relevance` (one row per position over the vocabulary)
/// back through the model recorded in `trace`.
pub fn propagate_from<T: Scalar>(
    weights: &ModelWeights<T>,
    trace: &ForwardTrace<T>,
    output_relevance: &Matrix<T>,
    epsilon: f64,
) -> Result<Propagation<T>> {
    let c = &weights.config;
    let n = trace.seq_len();
    ensure!(
        output_relevance.shape() == (n, c.vocab_size),
        Input,
        "output relevance shape {:?} does not match ({n}, {})",
        output_relevance.shape(),
        c.vocab_size
    );
    let eps = T::of(epsilon);
    let dh = c.head_dim();

    // Unembedding, then pass-through of the final norm.
    let mut r = Matrix::zeros(n, c.d_model);
    for t in 0..n {
        let row = linear_with_z(output_relevance.row(t), trace.final_in.row(t), &weights.unembedding, trace.logits.row(t), eps);
        r.row_mut(t).copy_from_slice(&row);
    }
    finite(&r, c.n_layers, "unembedding")?;

    let mut neuron_tokens = vec![Matrix::zeros(0, 0); c.n_layers];
    let mut junction_error = vec![T::zero(); 2 * c.n_layers];
    for (l, (lw, lt)) in weights.layers.iter().zip(&trace.layers).enumerate().rev() {
        // MLP junction.
        let (mut r_mid, r_mlp_out, err) = split_rows(&r, &lt.resid_mid, &lt.mlp_out, eps);
        junction_error[2 * l + 1] = err;
        let mut r_post = Matrix::zeros(n, c.d_mlp);
        for t in 0..n {
            let rp = linear_with_z(r_mlp_out.row(t), lt.mlp_post.row(t), &lw.mlp_down, lt.mlp_out.row(t), eps);
            r_post.row_mut(t).copy_from_slice(&rp);
            let r_in = linear_with_z(&rp, lt.mlp_in.row(t), &lw.mlp_up, lt.mlp_pre.row(t), eps);
            for (m, v) in r_mid.row_mut(t).iter_mut().zip(r_in) {
                *m += v;
            }
        }
        finite(&r_post, l, "mlp neurons")?;
        neuron_tokens[l] = r_post;

        // Attention junction.
        let (mut r_in, r_attn_out, err) = split_rows(&r_mid, &lt.resid_in, &lt.attn_out, eps);
        junction_error[2 * l] = err;
        let mut r_mix = Matrix::zeros(n, c.d_model);
        for t in 0..n {
            let row = linear_with_z(r_attn_out.row(t), lt.mix.row(t), &lw.attn_o, lt.attn_out.row(t), eps);
            r_mix.row_mut(t).copy_from_slice(&row);
        }
        let mut r_v = Matrix::zeros(n, c.d_model);
        for (h, a) in lt.attn.iter().enumerate() {
            let part = attention_with_mix(&r_mix, a, &lt.v, &lt.mix, eps, h * dh..(h + 1) * dh);
            for (dst, src) in r_v.as_mut_slice().iter_mut().zip(part.as_slice()) {
                *dst += *src;
            }
        }
        for t in 0..n {
            let row = linear_with_z(r_v.row(t), lt.attn_in.row(t), &lw.attn_v, lt.v.row(t), eps);
            for (m, v) in r_in.row_mut(t).iter_mut().zip(row) {
                *m += v;
            }
        }
        finite(&r_in, l, "attention input")?;
        r = r_in;
    }
    Ok(Propagation { neuron_tokens, input: r, junction_error })
}

/// Runs the forward pass and the full backward sweep for one sample.
pub fn attribute_detailed<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[Token],
    language: &LanguageId,
    config: &LrpConfig,
) -> Result<Attribution<T>> {
    config.validate()?;
    check_targets(tokens)?;
    let trace = forward(weights, tokens)?;
    let objective_value = objective_with(&trace, tokens, config.objective)?;
    let init = initial_relevance(&trace, config.objective)?;
    let propagation = propagate_from(weights, &trace, &init, config.epsilon)?;
    let values = propagation.neuron_values(config.aggregation);
    Ok(Attribution {
        relevance: RelevanceVector { values, objective_value, language: language.clone() },
        trace,
        propagation,
    })
}

/// Per-sample neuron relevance vector.
pub fn attribute_sample<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[Token],
    language: &LanguageId,
    config: &LrpConfig,
) -> Result<RelevanceVector<T>> {
    Ok(attribute_detailed(weights, tokens, language, config)?.relevance)
}
