use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::NeuronLayout;
use crate::corpus::LanguageId;
use crate::error::{ensure, Error, Result};

/// One MLP intermediate unit: column `index` of `mlp_up` paired with row
/// `index` of `mlp_down` in layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }

    pub fn flat(&self, layout: NeuronLayout) -> usize {
        self.layer * layout.d_mlp + self.index
    }

    pub fn from_flat(flat: usize, layout: NeuronLayout) -> Self {
        Self { layer: flat / layout.d_mlp, index: flat % layout.d_mlp }
    }

    pub fn check(&self, layout: NeuronLayout) -> Result<()> {
        ensure!(
            self.layer < layout.n_layers && self.index < layout.d_mlp,
            Input,
            "neuron ({}, {}) outside layout {}x{}",
            self.layer,
            self.index,
            layout.n_layers,
            layout.d_mlp
        );
        Ok(())
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.layer, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Crane,
    /// Activation-likelihood baseline; printed as `lape_style`.
    #[serde(rename = "lape_style", alias = "lape")]
    Lape,
    Random,
    Planted,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Crane => "crane",
            Method::Lape => "lape_style",
            Method::Random => "random",
            Method::Planted => "planted",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crane" => Ok(Method::Crane),
            "lape" | "lape_style" => Ok(Method::Lape),
            "random" => Ok(Method::Random),
            "planted" => Ok(Method::Planted),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// The unit of intervention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub ids: BTreeSet<NeuronId>,
    pub method: Method,
    pub target: Option<LanguageId>,
    pub budget: usize,
}

impl NeuronSet {
    pub fn new(
        ids: impl IntoIterator<Item = NeuronId>,
        method: Method,
        target: Option<LanguageId>,
        budget: usize,
    ) -> Result<Self> {
        let ids: BTreeSet<_> = ids.into_iter().collect();
        ensure!(ids.len() <= budget, Input, "{} neurons exceed budget {budget}", ids.len());
        Ok(Self { ids, method, target, budget })
    }

    pub fn empty(method: Method, target: Option<LanguageId>, budget: usize) -> Self {
        Self { ids: BTreeSet::new(), method, target, budget }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &NeuronId) -> bool {
        self.ids.contains(id)
    }

    pub fn validate(&self, layout: NeuronLayout) -> Result<()> {
        ensure!(self.ids.len() <= self.budget, Input, "neuron set exceeds its budget");
        self.ids.iter().try_for_each(|id| id.check(layout))
    }

    /// Flat boolean mask in layer-major layout.
    pub fn mask(&self, layout: NeuronLayout) -> Result<Vec<bool>> {
        self.validate(layout)?;
        let mut m = vec![false; layout.len()];
        for id in &self.ids {
            m[id.flat(layout)] = true;
        }
        Ok(m)
    }

    /// Neuron-set file body: one `layer,index` per line with a comment header.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# method={} target={} budget={}\n",
            self.method,
            self.target.as_ref().map_or("-", |t| t.as_str()),
            self.budget
        );
        for id in &self.ids {
            s.push_str(&format!("{id}\n"));
        }
        s
    }

    pub fn sidecar(&self, threshold: Option<f64>, seed: Option<u64>) -> SelectionSidecar {
        SelectionSidecar {
            method: self.method,
            target: self.target.clone(),
            threshold,
            budget: self.budget,
            seed,
        }
    }
}

/// JSON metadata stored next to a neuron-set file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSidecar {
    pub method: Method,
    pub target: Option<LanguageId>,
    pub threshold: Option<f64>,
    pub budget: usize,
    pub seed: Option<u64>,
}

impl SelectionSidecar {
    pub fn into_set(self, ids: Vec<NeuronId>) -> Result<NeuronSet> {
        NeuronSet::new(ids, self.method, self.target, self.budget)
    }
}

/// Parses `layer,index` lines; blank lines and `#` comments are skipped.
pub fn parse_neuron_ids(text: &str) -> Result<Vec<NeuronId>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("line {}: expected `layer,index`, got {raw:?}", i + 1));
        let (l, n) = line.split_once(',').ok_or_else(bad)?;
        let layer = l.trim().parse().map_err(|_| bad())?;
        let index = n.trim().parse().map_err(|_| bad())?;
        out.push(NeuronId { layer, index });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_comments() {
        let set = NeuronSet::new(
            [NeuronId::new(1, 3), NeuronId::new(0, 7)],
            Method::Crane,
            Some(LanguageId::from("l1")),
            4,
        )
        .unwrap();
        let text = set.to_text();
        assert!(text.starts_with("# method=crane target=l1 budget=4"));
        let ids = parse_neuron_ids(&text).unwrap();
        assert_eq!(ids, vec![NeuronId::new(0, 7), NeuronId::new(1, 3)]);
        assert_eq!(parse_neuron_ids("2, 5 # trailing\n\n").unwrap(), vec![NeuronId::new(2, 5)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_neuron_ids("0,1\nfoo\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn budget_and_bounds() {
        assert!(NeuronSet::new([NeuronId::new(0, 0), NeuronId::new(0, 1)], Method::Random, None, 1).is_err());
        let layout = NeuronLayout { n_layers: 2, d_mlp: 4 };
        let set = NeuronSet::new([NeuronId::new(2, 0)], Method::Random, None, 1).unwrap();
        assert!(set.validate(layout).is_err());
        let id = NeuronId::new(1, 2);
        assert_eq!(NeuronId::from_flat(id.flat(layout), layout), id);
    }
}
