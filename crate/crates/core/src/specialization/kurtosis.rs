use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{language_slot, RelevanceAccumulator};
use crate::corpus::LanguageId;
use crate::error::{ensure, Error, Result};
use crate::model::{NeuronId, NeuronLayout};

/// Raw and layer-normalized kurtosis per (language, neuron).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KurtosisTable {
    pub layout: NeuronLayout,
    pub languages: Vec<LanguageId>,
    /// `raw[language][flat neuron]`; `None` marks an invalid entry.
    pub raw: Vec<Vec<Option<f64>>>,
    /// Normalized scores; `0` for invalid entries.
    pub norm: Vec<Vec<f64>>,
}

/// Slices whose standard deviation falls below this (relative to the scale
/// of their values) are treated as constant.
const ZERO_STD: f64 = 1e-12;

impl KurtosisTable {
    pub fn from_raw(layout: NeuronLayout, languages: Vec<LanguageId>, raw: Vec<Vec<Option<f64>>>) -> Result<Self> {
        ensure!(raw.len() == languages.len(), Input, "{} kurtosis rows for {} languages", raw.len(), languages.len());
        ensure!(raw.iter().all(|r| r.len() == layout.len()), Input, "kurtosis rows do not match layout");
        let norm = vec![vec![0.0; layout.len()]; languages.len()];
        Ok(normalize_layerwise(&Self { layout, languages, raw, norm }))
    }

    pub fn from_accumulator(acc: &RelevanceAccumulator) -> Self {
        let raw = acc.moments.iter().map(|row| row.iter().map(|m| m.kurtosis()).collect()).collect();
        Self::from_raw(acc.layout, acc.languages.clone(), raw).expect("accumulator shapes are consistent")
    }

    pub fn slot(&self, language: &LanguageId) -> Result<usize> {
        language_slot(&self.languages, language)
    }

    pub fn valid(&self, language: usize, flat: usize) -> bool {
        self.raw[language][flat].is_some()
    }

    pub fn normalized(&self, neuron: NeuronId, language: &LanguageId) -> Result<f64> {
        neuron.check(self.layout)?;
        Ok(self.norm[self.slot(language)?][neuron.flat(self.layout)])
    }

    /// CSV with columns `layer,index,language,kappa_raw,kappa_norm,valid`;
    /// invalid entries leave `kappa_raw` empty.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Internal(format!("csv: {e}"));
        w.write_record(["layer", "index", "language", "kappa_raw", "kappa_norm", "valid"]).map_err(csv_err)?;
        for flat in 0..self.layout.len() {
            let id = NeuronId::from_flat(flat, self.layout);
            for (li, lang) in self.languages.iter().enumerate() {
                let raw = self.raw[li][flat].map_or(String::new(), |k| k.to_string());
                w.write_record([
                    id.layer.to_string(),
                    id.index.to_string(),
                    lang.to_string(),
                    raw,
                    self.norm[li][flat].to_string(),
                    self.valid(li, flat).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`write_csv`](Self::write_csv). Languages keep
    /// their first-appearance order; normalized values are taken as written.
    pub fn read_csv(input: impl Read, layout: NeuronLayout) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut languages: Vec<LanguageId> = Vec::new();
        let mut cells: Vec<(usize, usize, Option<f64>, f64)> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Format(format!("line {line}: {e}")))?;
            let bad = |what: &str| Error::Format(format!("line {line}: bad {what}"));
            ensure!(rec.len() == 6, Format, "line {line}: expected 6 columns, found {}", rec.len());
            let layer: usize = rec[0].parse().map_err(|_| bad("layer"))?;
            let index: usize = rec[1].parse().map_err(|_| bad("index"))?;
            let id = NeuronId::new(layer, index);
            id.check(layout).map_err(|e| Error::Format(format!("line {line}: {e}")))?;
            let lang = LanguageId::new(&rec[2]);
            let li = match languages.iter().position(|l| *l == lang) {
                Some(li) => li,
                None => {
                    languages.push(lang);
                    languages.len() - 1
                }
            };
            let valid: bool = rec[5].parse().map_err(|_| bad("valid flag"))?;
            let raw = if valid { Some(rec[3].parse().map_err(|_| bad("kappa_raw"))?) } else { None };
            let norm: f64 = rec[4].parse().map_err(|_| bad("kappa_norm"))?;
            cells.push((li, id.flat(layout), raw, norm));
        }
        let mut raw = vec![vec![None; layout.len()]; languages.len()];
        let mut norm = vec![vec![0.0; layout.len()]; languages.len()];
        let mut seen = vec![vec![false; layout.len()]; languages.len()];
        for (li, flat, r, n) in cells {
            ensure!(!seen[li][flat], Format, "duplicate kurtosis entry for neuron {flat} of {}", languages[li]);
            seen[li][flat] = true;
            raw[li][flat] = r;
            norm[li][flat] = n;
        }
        ensure!(seen.iter().flatten().all(|&s| s), Format, "kurtosis table is missing entries");
        Ok(Self { layout, languages, raw, norm })
    }
}

/// Z-scores raw kurtosis within every (layer, language) slice over its valid
/// neurons. Invalid entries, and every entry of a constant slice, become 0.
pub fn normalize_layerwise(table: &KurtosisTable) -> KurtosisTable {
    let d = table.layout.d_mlp;
    let mut norm = vec![vec![0.0; table.layout.len()]; table.languages.len()];
    for (li, raw) in table.raw.iter().enumerate() {
        for l in 0..table.layout.n_layers {
            let slice = &raw[l * d..(l + 1) * d];
            let vals: Vec<f64> = slice.iter().flatten().copied().collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            if std <= ZERO_STD * scale {
                continue;
            }
            for (i, k) in slice.iter().enumerate() {
                if let Some(k) = k {
                    norm[li][l * d + i] = (k - mean) / std;
                }
            }
        }
    }
    KurtosisTable { layout: table.layout, languages: table.languages.clone(), raw: table.raw.clone(), norm }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(raw: Vec<Vec<Option<f64>>>, layout: NeuronLayout) -> KurtosisTable {
        let langs = (0..raw.len()).map(|i| LanguageId::new(format!("l{i}"))).collect();
        KurtosisTable::from_raw(layout, langs, raw).unwrap()
    }

    #[test]
    fn two_point_and_constant_slices() {
        let t = table(vec![vec![Some(1.0), Some(3.0), Some(5.0), Some(5.0)]], NeuronLayout { n_layers: 2, d_mlp: 2 });
        assert_eq!(t.norm[0], vec![-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_entries_are_excluded() {
        let t = table(vec![vec![Some(1.0), None, Some(3.0)]], NeuronLayout { n_layers: 1, d_mlp: 3 });
        assert_eq!(t.norm[0], vec![-1.0, 0.0, 1.0]);
        assert!(!t.valid(0, 1));
    }

    #[test]
    fn csv_roundtrip() {
        let layout = NeuronLayout { n_layers: 2, d_mlp: 2 };
        let t = table(vec![vec![Some(1.5), None, Some(3.25), Some(9.0)], vec![Some(2.0), Some(2.5), None, None]], layout);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer,index,language,kappa_raw,kappa_norm,valid\n"));
        assert_eq!(KurtosisTable::read_csv(buf.as_slice(), layout).unwrap(), t);
        let err = KurtosisTable::read_csv("layer,index,language,kappa_raw,kappa_norm,valid\n0,x,l0,1,1,true\n".as_bytes(), layout);
        assert!(err.unwrap_err().to_string().contains("line 2"));
    }

    proptest! {
        #[test]
        fn slices_are_standardized_and_idempotent(
            vals in prop::collection::vec(prop::option::weighted(0.8, 0.5..50.0f64), 24),
        ) {
            let layout = NeuronLayout { n_layers: 3, d_mlp: 8 };
            let t = table(vec![vals], layout);
            for l in 0..3 {
                let v: Vec<f64> = (0..8).filter(|&i| t.valid(0, l * 8 + i)).map(|i| t.norm[0][l * 8 + i]).collect();
                if v.len() < 2 || v.iter().all(|&x| x == 0.0) { continue; }
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
            }
            let again = table(vec![t.raw[0].iter().zip(&t.norm[0]).map(|(r, &k)| r.map(|_| k)).collect()], layout);
            for (a, b) in again.norm[0].iter().zip(&t.norm[0]) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
