//! Binary weight file.
//!
//! Layout: magic `CRN1`, `u32` LE format version, `u32` LE byte length of the
//! TOML-encoded [`ModelConfig`], the config text, then every tensor of
//! [`ModelWeights::tensors`] in order as row-major little-endian `f64`.

use super::{ModelConfig, ModelWeights};
use crate::error::{ensure, Error, Result};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"CRN1";
pub const FORMAT_VERSION: u32 = 1;

pub fn serialize_model<T: Scalar>(weights: &ModelWeights<T>) -> Result<Vec<u8>> {
    let config = toml::to_string(&weights.config).map_err(|e| Error::Internal(format!("config encoding: {e}")))?;
    let mut out = Vec::with_capacity(12 + config.len() + 8 * weights.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (_, t) in weights.tensors() {
        for v in t {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        ensure!(
            self.bytes.len() - self.pos >= n,
            Format,
            "truncated weight file: {what} needs {n} bytes at offset {}, {} left",
            self.pos,
            self.bytes.len() - self.pos
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn deserialize_model<T: Scalar>(bytes: &[u8]) -> Result<ModelWeights<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    ensure!(magic == MAGIC, Format, "bad magic {magic:?}, expected {MAGIC:?}");
    let version = r.u32("version")?;
    ensure!(version == FORMAT_VERSION, Format, "unsupported format version {version}");
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|e| Error::Format(format!("config is not UTF-8: {e}")))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut w = ModelWeights::<T>::zeros(config)?;
    for (name, t) in w.tensors_mut() {
        let raw = r.take(8 * t.len(), name)?;
        for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(8)) {
            *v = T::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
    }
    ensure!(r.pos == bytes.len(), Format, "{} trailing bytes after last tensor", bytes.len() - r.pos);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, forward};

    fn bits<T: Scalar>(w: &ModelWeights<T>) -> Vec<u64> {
        w.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.f64().to_bits())).collect()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let w: ModelWeights<f64> = ModelWeights::gaussian(ModelConfig::default(), 0.3, 7).unwrap();
        let back: ModelWeights<f64> = deserialize_model(&serialize_model(&w).unwrap()).unwrap();
        assert_eq!(back.config, w.config);
        assert_eq!(bits(&back), bits(&w));
        let w32: ModelWeights<f32> = w.cast();
        let back32: ModelWeights<f32> = deserialize_model(&serialize_model(&w32).unwrap()).unwrap();
        assert_eq!(bits(&back32), bits(&w32));
    }

    #[test]
    fn reloaded_model_gives_identical_logits() {
        let w: ModelWeights<f64> = build_model(ModelConfig::default(), 7).unwrap();
        let back: ModelWeights<f64> = deserialize_model(&serialize_model(&w).unwrap()).unwrap();
        let toks = [3, 40, 70, 5, 90];
        assert_eq!(forward(&w, &toks).unwrap().logits, forward(&back, &toks).unwrap().logits);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let c = ModelConfig { n_layers: 1, d_model: 4, n_heads: 1, d_mlp: 3, vocab_size: 5, max_seq_len: 4, ..Default::default() };
        let good = serialize_model(&ModelWeights::<f64>::gaussian(c, 1.0, 1).unwrap()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_model::<f64>(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(deserialize_model::<f64>(&bad), Err(Error::Format(_))));
        assert!(matches!(deserialize_model::<f64>(&good[..good.len() - 1]), Err(Error::Format(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(deserialize_model::<f64>(&long), Err(Error::Format(_))));
        assert!(matches!(deserialize_model::<f64>(&good[..2]), Err(Error::Format(_))));
    }
}
