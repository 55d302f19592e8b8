use crane_core::corpus::{default_languages, generate_corpus};
use crane_core::model::{
    deserialize_model, forward, forward_masked, loss_and_grad, sequence_loss, serialize_model, train, Activation, Method,
    ModelConfig, ModelWeights, NeuronId, NeuronSet, TrainConfig,
};
use rand::seq::index::sample;
use rand::Rng;

/// Masking a neuron set gives exactly the logits of the model whose
/// corresponding down-projection rows are zero.
#[test]
fn masking_equals_zeroed_rows() {
    for s in 0..100u64 {
        let mut rng = crane_core::seed::rng_for(s, "mask");
        let cfg = ModelConfig {
            n_layers: rng.gen_range(1..=3),
            d_model: 8,
            n_heads: 2,
            d_mlp: rng.gen_range(2..=10),
            vocab_size: 13,
            max_seq_len: 10,
            activation: if s % 2 == 0 { Activation::Relu } else { Activation::Silu },
            ..Default::default()
        };
        let w = ModelWeights::<f64>::gaussian(cfg, 0.5, s).unwrap();
        let toks: Vec<u32> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(0..13)).collect();
        let n = cfg.n_layers * cfg.d_mlp;
        let k = rng.gen_range(0..=n);
        let ids: Vec<NeuronId> = sample(&mut rng, n, k).into_iter().map(|f| NeuronId::from_flat(f, cfg.layout())).collect();
        let set = NeuronSet::new(ids.clone(), Method::Random, None, n).unwrap();

        let mut brute = w.clone();
        for id in &ids {
            brute.layers[id.layer].mlp_down.row_mut(id.index).fill(0.0);
        }
        let masked = forward_masked(&w, &toks, &set).unwrap();
        let expected = forward(&brute, &toks).unwrap().logits;
        assert_eq!(masked.as_slice(), expected.as_slice(), "seed {s}");

        let empty = NeuronSet::empty(Method::Random, None, n);
        let plain = forward(&w, &toks).unwrap().logits;
        let none = forward_masked(&w, &toks, &empty).unwrap();
        assert!(plain.as_slice().iter().zip(none.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn masking_everything_removes_the_mlps() {
    let cfg = ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_mlp: 6, vocab_size: 11, max_seq_len: 8, ..Default::default() };
    let w = ModelWeights::<f64>::gaussian(cfg, 0.5, 3).unwrap();
    let all: Vec<NeuronId> = (0..12).map(|f| NeuronId::from_flat(f, cfg.layout())).collect();
    let set = NeuronSet::new(all, Method::Random, None, 12).unwrap();
    let mut no_mlp = w.clone();
    for l in &mut no_mlp.layers {
        l.mlp_up.as_mut_slice().fill(0.0);
    }
    let toks = [1, 5, 9, 2];
    let masked = forward_masked(&w, &toks, &set).unwrap();
    assert_eq!(masked.as_slice(), forward(&no_mlp, &toks).unwrap().logits.as_slice());
}

/// Every analytic gradient entry agrees with the central difference.
#[test]
fn full_gradient_check() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 6,
        vocab_size: 7,
        max_seq_len: 8,
        activation: Activation::Silu,
        ..Default::default()
    };
    let w = ModelWeights::<f64>::gaussian(cfg, 0.5, 21).unwrap();
    let toks = [0, 4, 2, 6, 1, 3];
    let (_, grad) = loss_and_grad(&w, &toks).unwrap();
    let analytic: Vec<(&str, Vec<f64>)> = grad.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let h = 1e-5;
    let mut checked = 0;
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (k, &an) in g.iter().enumerate() {
            let shifted = |d: f64| {
                let mut p = w.clone();
                p.tensors_mut()[ti].1[k] += d;
                sequence_loss(&p, &toks).unwrap()
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()) + 1e-8, "{name}[{k}]: analytic {an} vs numeric {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, w.n_params());
}

#[test]
fn training_reduces_loss() {
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 16, vocab_size: 96, max_seq_len: 16, ..Default::default() };
    let w = ModelWeights::<f64>::gaussian(cfg, 0.1, 5).unwrap();
    let corpus: Vec<Vec<u32>> = default_languages(0)
        .iter()
        .flat_map(|spec| generate_corpus(spec, 40, 12, 7).unwrap().samples)
        .collect();
    let out = train(&w, &corpus, &TrainConfig { lr: 0.05, steps: 200, batch: 8, seed: 1 }).unwrap();
    assert_eq!(out.losses.len(), 200);
    let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = out.losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head - 0.1, "loss {head} -> {tail}");
    assert!(out.weights.all_finite());
}

#[test]
fn serialization_roundtrip_preserves_logits() {
    let cfg = ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_mlp: 4, vocab_size: 9, max_seq_len: 8, ..Default::default() };
    let w = ModelWeights::<f64>::gaussian(cfg, 0.4, 8).unwrap();
    let back: ModelWeights<f64> = deserialize_model(&serialize_model(&w).unwrap()).unwrap();
    assert_eq!(back, w);
}
