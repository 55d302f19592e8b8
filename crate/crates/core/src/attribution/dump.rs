//! Relevance dump: `CRNR`, `u32` version, `u32` n_layers, `u32` d_mlp, then
//! per record a `u32`-length-prefixed language id, the objective value and
//! `n_layers * d_mlp` neuron values, all `f64` little-endian.

use std::io::{Read, Write};

use super::RelevanceVector;
use crate::corpus::LanguageId;
use crate::error::{ensure, Error, Result};
use crate::model::NeuronLayout;
use crate::Scalar;

pub const DUMP_MAGIC: &[u8; 4] = b"CRNR";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceRecord {
    pub language: LanguageId,
    pub objective_value: f64,
    pub values: Vec<f64>,
}

impl<T: Scalar> From<&RelevanceVector<T>> for RelevanceRecord {
    fn from(r: &RelevanceVector<T>) -> Self {
        Self {
            language: r.language.clone(),
            objective_value: r.objective_value.f64(),
            values: r.values.iter().map(|v| v.f64()).collect(),
        }
    }
}

pub fn write_relevance_dump(out: &mut impl Write, layout: NeuronLayout, records: &[RelevanceRecord]) -> Result<()> {
    out.write_all(DUMP_MAGIC)?;
    for v in [VERSION, layout.n_layers as u32, layout.d_mlp as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for r in records {
        ensure!(r.values.len() == layout.len(), Input, "record has {} values for {} neurons", r.values.len(), layout.len());
        let id = r.language.as_str().as_bytes();
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id)?;
        out.write_all(&r.objective_value.to_le_bytes())?;
        for v in &r.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated relevance dump in {what}")),
        _ => Error::Io(e),
    })
}

fn u32_of(input: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_relevance_dump(input: &mut impl Read) -> Result<(NeuronLayout, Vec<RelevanceRecord>)> {
    let mut magic = [0u8; 4];
    read_exact_or(input, &mut magic, "magic")?;
    ensure!(&magic == DUMP_MAGIC, Format, "bad relevance dump magic {magic:?}");
    let version = u32_of(input, "version")?;
    ensure!(version == VERSION, Format, "unsupported relevance dump version {version}");
    let layout = NeuronLayout { n_layers: u32_of(input, "layout")? as usize, d_mlp: u32_of(input, "layout")? as usize };
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut rest = bytes.as_slice();
    let mut records = Vec::new();
    while !rest.is_empty() {
        let k = records.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            ensure!(rest.len() >= n, Format, "truncated relevance dump in record {k}");
            let (a, b) = rest.split_at(n);
            rest = b;
            Ok(a)
        };
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let id = std::str::from_utf8(take(len)?).map_err(|_| Error::Format(format!("record {k}: language id is not UTF-8")))?;
        let language = LanguageId::new(id);
        let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let objective_value = f(take(8)?);
        let values = take(8 * layout.len())?.chunks_exact(8).map(f).collect();
        records.push(RelevanceRecord { language, objective_value, values });
    }
    Ok((layout, records))
}
