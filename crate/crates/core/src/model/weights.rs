use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub attn_q: Matrix<T>,
    pub attn_k: Matrix<T>,
    pub attn_v: Matrix<T>,
    pub attn_o: Matrix<T>,
    pub mlp_norm: Vec<T>,
    /// `d_model × d_mlp`; column `n` is neuron `n`'s input weights.
    pub mlp_up: Matrix<T>,
    /// `d_mlp × d_model`; row `n` is neuron `n`'s output weights.
    pub mlp_down: Matrix<T>,
}

/// All parameters of the tiny decoder-only transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub token_embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub unembedding: Matrix<T>,
}

impl<T: Scalar> ModelWeights<T> {
    /// Zero parameters with unit norm scales.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = LayerWeights {
            attn_norm: vec![T::one(); d],
            attn_q: Matrix::zeros(d, d),
            attn_k: Matrix::zeros(d, d),
            attn_v: Matrix::zeros(d, d),
            attn_o: Matrix::zeros(d, d),
            mlp_norm: vec![T::one(); d],
            mlp_up: Matrix::zeros(d, config.d_mlp),
            mlp_down: Matrix::zeros(config.d_mlp, d),
        };
        Ok(Self {
            config,
            token_embedding: Matrix::zeros(config.vocab_size, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![T::one(); d],
            unembedding: Matrix::zeros(d, config.vocab_size),
        })
    }

    /// Every matrix entry drawn i.i.d. from `N(0, std²)`, norm scales at one.
    /// Tensors are filled in [`ModelWeights::tensors`] order.
    pub fn gaussian(config: ModelConfig, std: f64, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let normal = Normal::new(0.0, std).map_err(|e| crate::Error::Config(e.to_string()))?;
        let mut rng = seed::rng(seed);
        for (name, t) in w.tensors_mut() {
            if name.ends_with("norm") {
                continue;
            }
            for v in t.iter_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(w)
    }

    /// Same shapes, all entries zero (norm scales included). Used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, t) in g.tensors_mut() {
            t.fill(T::zero());
        }
        g
    }

    /// Parameter tensors in the fixed serialization order:
    /// embedding, then per layer (attn_norm, q, k, v, o, mlp_norm, up, down),
    /// then final_norm and unembedding.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = vec![("token_embedding", self.token_embedding.as_slice())];
        for l in &self.layers {
            out.push(("attn_norm", &l.attn_norm));
            out.push(("attn_q", l.attn_q.as_slice()));
            out.push(("attn_k", l.attn_k.as_slice()));
            out.push(("attn_v", l.attn_v.as_slice()));
            out.push(("attn_o", l.attn_o.as_slice()));
            out.push(("mlp_norm", &l.mlp_norm));
            out.push(("mlp_up", l.mlp_up.as_slice()));
            out.push(("mlp_down", l.mlp_down.as_slice()));
        }
        out.push(("final_norm", &self.final_norm));
        out.push(("unembedding", self.unembedding.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> =
            vec![("token_embedding", self.token_embedding.as_mut_slice())];
        for l in &mut self.layers {
            out.push(("attn_norm", &mut l.attn_norm));
            out.push(("attn_q", l.attn_q.as_mut_slice()));
            out.push(("attn_k", l.attn_k.as_mut_slice()));
            out.push(("attn_v", l.attn_v.as_mut_slice()));
            out.push(("attn_o", l.attn_o.as_mut_slice()));
            out.push(("mlp_norm", &mut l.mlp_norm));
            out.push(("mlp_up", l.mlp_up.as_mut_slice()));
            out.push(("mlp_down", l.mlp_down.as_mut_slice()));
        }
        out.push(("final_norm", &mut self.final_norm));
        out.push(("unembedding", self.unembedding.as_mut_slice()));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks tensor shapes against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        ensure!(self.token_embedding.shape() == (c.vocab_size, d), Input, "token_embedding shape");
        ensure!(self.unembedding.shape() == (d, c.vocab_size), Input, "unembedding shape");
        ensure!(self.final_norm.len() == d, Input, "final_norm length");
        ensure!(self.layers.len() == c.n_layers, Input, "layer count");
        for (i, l) in self.layers.iter().enumerate() {
            let ok = l.attn_norm.len() == d
                && l.mlp_norm.len() == d
                && [&l.attn_q, &l.attn_k, &l.attn_v, &l.attn_o].iter().all(|m| m.shape() == (d, d))
                && l.mlp_up.shape() == (d, c.d_mlp)
                && l.mlp_down.shape() == (c.d_mlp, d);
            ensure!(ok, Input, "layer {i} tensor shapes do not match config");
        }
        ensure!(self.all_finite(), Input, "weights contain non-finite entries");
        Ok(())
    }

    /// Lossless for f32 -> f64, rounding for f64 -> f32.
    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let v = |x: &Vec<T>| x.iter().map(|&a| U::of(a.f64())).collect::<Vec<U>>();
        let m = |x: &Matrix<T>| x.map(|a| U::of(a.f64()));
        ModelWeights {
            config: self.config,
            token_embedding: m(&self.token_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: v(&l.attn_norm),
                    attn_q: m(&l.attn_q),
                    attn_k: m(&l.attn_k),
                    attn_v: m(&l.attn_v),
                    attn_o: m(&l.attn_o),
                    mlp_norm: v(&l.mlp_norm),
                    mlp_up: m(&l.mlp_up),
                    mlp_down: m(&l.mlp_down),
                })
                .collect(),
            final_norm: v(&self.final_norm),
            unembedding: m(&self.unembedding),
        }
    }
}

/// Initial weights: scaled Gaussian with `std = 0.02 / sqrt(d_model)`,
/// unit norm scales. Deterministic in `seed`.
pub fn build_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    ModelWeights::gaussian(config, init_std(&config), seed)
}

pub fn init_std(config: &ModelConfig) -> f64 {
    0.02 / (config.d_model as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn same_seed_is_bit_identical() {
        let c = ModelConfig::default();
        let a: ModelWeights<f64> = build_model(c, 7).unwrap();
        let b: ModelWeights<f64> = build_model(c, 7).unwrap();
        let bits = |w: &ModelWeights<f64>| {
            w.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn different_seed_differs() {
        let c = ModelConfig::default();
        let a: ModelWeights<f64> = build_model(c, 7).unwrap();
        let b: ModelWeights<f64> = build_model(c, 8).unwrap();
        let differing = a
            .tensors()
            .iter()
            .zip(b.tensors())
            .flat_map(|((_, x), (_, y))| x.iter().zip(y.iter()).map(|(p, q)| p != q).collect::<Vec<_>>())
            .filter(|&d| d)
            .count();
        assert!(differing > 0);
    }

    #[test]
    fn bad_heads_is_config_error() {
        let c = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(matches!(build_model::<f64>(c, 7), Err(Error::Config(_))));
    }

    #[test]
    fn init_scale_and_shapes() {
        let c = ModelConfig::default();
        let w: ModelWeights<f64> = build_model(c, 1).unwrap();
        w.validate().unwrap();
        let e = w.token_embedding.as_slice();
        let var = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
        let expect = init_std(&c).powi(2);
        assert!((var / expect - 1.0).abs() < 0.1, "variance {var} vs {expect}");
        assert!(w.final_norm.iter().all(|&s| s == 1.0));
    }
}
