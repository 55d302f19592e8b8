use crane_core::attribution::{attribute_detailed, propagate_linear, split_residual, Aggregation, LrpConfig, Objective};
use crane_core::corpus::LanguageId;
use crane_core::model::{forward, Activation, ModelConfig, ModelWeights, Norm};
use crane_core::tensor::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn lang() -> LanguageId {
    LanguageId::new("l1")
}

fn random_tokens(vocab: usize, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = crane_core::seed::rng(seed);
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Leaf relevance sums to the objective over many random models and inputs.
#[test]
fn conservation_over_random_models() {
    let lrp = LrpConfig::default();
    let mut worst: f64 = 0.0;
    for s in 0..120u64 {
        let mut rng = crane_core::seed::rng_for(s, "conservation");
        let n_heads = rng.gen_range(1..=2);
        let cfg = ModelConfig {
            n_layers: rng.gen_range(1..=3),
            d_model: 4 * n_heads * rng.gen_range(1..=2),
            n_heads,
            d_mlp: rng.gen_range(2..=12),
            vocab_size: rng.gen_range(5..=20),
            max_seq_len: 12,
            activation: if s % 2 == 0 { Activation::Relu } else { Activation::Silu },
            norm: if s % 3 == 0 { Norm::None } else { Norm::RmsNorm },
        };
        let w = ModelWeights::<f64>::gaussian(cfg, 0.5, s).unwrap();
        let toks = random_tokens(cfg.vocab_size, rng.gen_range(2..=12), s);
        let a = attribute_detailed(&w, &toks, &lang(), &lrp).unwrap();
        let obj = a.relevance.objective_value;
        let err = (a.propagation.leaf_total() - obj).abs() / obj.abs().max(1e-12);
        worst = worst.max(err);
        assert!(err <= 1e-3, "seed {s}: leaves {} vs objective {obj}", a.propagation.leaf_total());
        for (j, e) in a.propagation.junction_error.iter().enumerate() {
            assert!(*e <= 1e-12 * (1.0 + obj.abs()), "seed {s} junction {j}: {e}");
        }
    }
    assert!(worst < 1e-3);
}

/// Without attention values and norms, the relevance of neuron `j` is its
/// direct logit contribution `h_j (D U)_{j, gold}` summed over positions.
/// The identity is exact at epsilon 0; the default epsilon perturbs it only
/// through the stabiliser terms.
#[test]
fn two_neuron_direct_logit_oracle() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 1,
        d_mlp: 2,
        vocab_size: 6,
        max_seq_len: 8,
        activation: Activation::Relu,
        norm: Norm::None,
    };
    for s in 0..20u64 {
        let mut w = ModelWeights::<f64>::gaussian(cfg, 0.8, 100 + s).unwrap();
        w.layers[0].attn_v = Matrix::zeros(4, 4);
        let toks = random_tokens(6, 6, s);
        let exact = attribute_detailed(&w, &toks, &lang(), &LrpConfig { epsilon: 0.0, ..Default::default() }).unwrap();
        let stabilised = attribute_detailed(&w, &toks, &lang(), &LrpConfig::default()).unwrap();

        let l = &w.layers[0];
        let mut expected = [0.0; 2];
        for t in 0..toks.len() - 1 {
            let e = w.token_embedding.row(toks[t] as usize);
            let gold = toks[t + 1] as usize;
            for (j, slot) in expected.iter_mut().enumerate() {
                let pre: f64 = (0..4).map(|i| e[i] * l.mlp_up[(i, j)]).sum();
                let h = pre.max(0.0);
                let du: f64 = (0..4).map(|i| l.mlp_down[(j, i)] * w.unembedding[(i, gold)]).sum();
                *slot += h * du;
            }
        }
        for j in 0..2 {
            let got = exact.relevance.values[j];
            assert!((got - expected[j]).abs() <= 1e-9 * (1.0 + expected[j].abs()), "seed {s} neuron {j}: {got} vs {}", expected[j]);
            let near = stabilised.relevance.values[j];
            assert!((near - expected[j]).abs() <= 1e-6 * (1.0 + expected[j].abs()), "seed {s} neuron {j}: {near} vs {}", expected[j]);
        }
    }
}

#[test]
fn zeroed_down_projection_carries_no_relevance() {
    let cfg = ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_mlp: 5, vocab_size: 9, max_seq_len: 8, ..Default::default() };
    let mut w = ModelWeights::<f64>::gaussian(cfg, 0.6, 4).unwrap();
    w.layers[1].mlp_down = Matrix::zeros(5, 8);
    let a = attribute_detailed(&w, &[1, 4, 2, 8, 0], &lang(), &LrpConfig::default()).unwrap();
    assert!(a.relevance.values[5..].iter().all(|&v| v == 0.0));
    assert!(a.relevance.values[..5].iter().any(|&v| v != 0.0));
}

#[test]
fn objectives_and_aggregation() {
    let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_mlp: 4, vocab_size: 7, max_seq_len: 8, ..Default::default() };
    let w = ModelWeights::<f64>::gaussian(cfg, 0.6, 9).unwrap();
    let toks = [3, 1, 6, 2];
    let trace = forward(&w, &toks).unwrap();
    let logit_sum: f64 = (0..3).map(|t| trace.logits[(t, toks[t + 1] as usize)]).sum();
    let lp = |t: usize| {
        let row = trace.logits.row(t);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        row[toks[t + 1] as usize] - z.ln()
    };
    let logprob_sum: f64 = (0..3).map(lp).sum();

    let base = LrpConfig::default();
    let a = attribute_detailed(&w, &toks, &lang(), &base).unwrap();
    assert!((a.relevance.objective_value - logit_sum).abs() < 1e-12);

    let b = attribute_detailed(&w, &toks, &lang(), &LrpConfig { objective: Objective::GoldLogprobSum, ..base }).unwrap();
    assert!((b.relevance.objective_value - logprob_sum).abs() < 1e-12);
    assert!((b.propagation.leaf_total() - logprob_sum).abs() <= 1e-3 * logprob_sum.abs());

    let c = attribute_detailed(&w, &toks, &lang(), &LrpConfig { aggregation: Aggregation::AbsSum, ..base }).unwrap();
    for (s, abs) in a.relevance.values.iter().zip(&c.relevance.values) {
        assert!(*abs >= s.abs() - 1e-15);
    }
    assert!(attribute_detailed(&w, &[3], &lang(), &base).is_err());
}

#[test]
fn linear_rule_hand_example() {
    // z = [1*2 + 3*(-1)] = -1; relevance 2 goes to inputs in proportion to
    // their contributions 2 and -3.
    let w = Matrix::from_rows(&[vec![2.0], vec![-1.0]]);
    let r = propagate_linear(&[2.0f64], &[1.0, 3.0], &w, 0.0).unwrap();
    assert!((r[0] - -4.0).abs() < 1e-12 && (r[1] - 6.0).abs() < 1e-12, "{r:?}");
}

#[test]
fn residual_split_hand_example() {
    let (skip, branch) = split_residual(&[3.0f64], &[1.0], &[2.0], 0.0).unwrap();
    assert!((skip[0] - 1.0).abs() < 1e-12 && (branch[0] - 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The linear rule is linear in the incoming relevance and conserves it
    /// when no output is near zero.
    #[test]
    fn linear_rule_linearity(
        x in prop::collection::vec(0.5..2.0f64, 3),
        wv in prop::collection::vec(0.1..1.0f64, 6),
        r1 in prop::collection::vec(-3.0..3.0f64, 2),
        r2 in prop::collection::vec(-3.0..3.0f64, 2),
        a in -2.0..2.0f64,
    ) {
        let w = Matrix::from_vec(3, 2, wv);
        let sum: Vec<f64> = r1.iter().zip(&r2).map(|(p, q)| p + a * q).collect();
        let l1 = propagate_linear(&r1, &x, &w, 1e-9).unwrap();
        let l2 = propagate_linear(&r2, &x, &w, 1e-9).unwrap();
        let ls = propagate_linear(&sum, &x, &w, 1e-9).unwrap();
        for i in 0..3 {
            prop_assert!((ls[i] - (l1[i] + a * l2[i])).abs() < 1e-9);
        }
        let total: f64 = l1.iter().sum();
        prop_assert!((total - r1.iter().sum::<f64>()).abs() < 1e-6);
    }
}
