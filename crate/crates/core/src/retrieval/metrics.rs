use std::collections::HashSet;
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::index::QueryResult;
use crate::store::TripletRecord;
use crate::{Error, Result};

/// Fraction of queries whose target is among the first `k` results.
pub fn recall_at_k<S: AsRef<str>>(results: &[QueryResult], targets: &[S], k: usize) -> Result<f64> {
    if results.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} results for {} targets",
            results.len(),
            targets.len()
        )));
    }
    if results.is_empty() {
        return Err(Error::Empty("no queries".into()));
    }
    let mut hits = 0usize;
    for (r, t) in results.iter().zip(targets) {
        if k > r.len() {
            return Err(Error::KOutOfRange {
                k,
                available: r.len(),
            });
        }
        if r.ranked_ids[..k].iter().any(|id| &**id == t.as_ref()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Recall@k after restricting each ranking to the query's subset members
/// other than the reference.
pub fn recall_subset_at_k(
    results: &[QueryResult],
    triplets: &[TripletRecord],
    k: usize,
) -> Result<f64> {
    if results.len() != triplets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} results for {} triplets",
            results.len(),
            triplets.len()
        )));
    }
    if results.is_empty() {
        return Err(Error::Empty("no queries".into()));
    }
    let mut hits = 0usize;
    for (r, t) in results.iter().zip(triplets) {
        let subset = t
            .subset_ids
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("query {:?} has no subset", t.query_id)))?;
        let members: HashSet<&str> = subset
            .iter()
            .map(String::as_str)
            .filter(|m| *m != t.reference_id)
            .collect();
        let filtered: Vec<&str> = r
            .ranked_ids
            .iter()
            .map(|id| &**id)
            .filter(|id| members.contains(id))
            .collect();
        match filtered.iter().position(|id| *id == t.target_id) {
            Some(pos) if pos < k => hits += 1,
            Some(_) => {}
            None => {
                return Err(Error::Protocol(format!(
                    "ranking for query {:?} does not reach its target; subset recall needs full-depth results",
                    t.query_id
                )))
            }
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    FashionIq,
    Cirr,
    Generic,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::FashionIq => "fashioniq",
            Protocol::Cirr => "cirr",
            Protocol::Generic => "generic",
        }
    }

    /// Reference exclusion is on for CIRR, where the reference belongs to the
    /// gallery and to its own subset.
    pub fn default_exclude_reference(self) -> bool {
        self == Protocol::Cirr
    }

    pub fn global_ks(self) -> &'static [usize] {
        match self {
            Protocol::FashionIq => &[10, 50],
            Protocol::Cirr | Protocol::Generic => &[1, 5, 10, 50],
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fashioniq" | "fashion-iq" => Ok(Protocol::FashionIq),
            "cirr" => Ok(Protocol::Cirr),
            "generic" => Ok(Protocol::Generic),
            other => Err(Error::InvalidConfig(format!("unknown protocol {other:?}"))),
        }
    }
}

pub const SUBSET_KS: [usize; 3] = [1, 2, 3];
pub const FASHIONIQ_CATEGORIES: [&str; 3] = ["shirt", "dress", "toptee"];

/// Metric values in `[0, 1]` keyed by name, plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub query_count: usize,
    pub metrics: IndexMap<String, f64>,
    pub config: IndexMap<String, serde_json::Value>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// The protocol's summary number, used for early stopping:
    /// generic and FashionIQ average R@10 and R@50, CIRR averages R@5 and
    /// R_subset@1.
    pub fn headline(&self) -> f64 {
        let key = match self.protocol {
            Protocol::Generic => "mean(R@10,R@50)",
            Protocol::FashionIq => "average/mean",
            Protocol::Cirr => "avg",
        };
        self.get(key).unwrap_or(0.0)
    }

    /// Aligned text table, values as percentages.
    pub fn to_table(&self) -> String {
        match self.protocol {
            Protocol::FashionIq => self.fashioniq_table(),
            _ => flat_table(self.metrics.iter().map(|(k, v)| (k.as_str(), *v))),
        }
    }

    fn fashioniq_table(&self) -> String {
        let mut groups: Vec<&str> = Vec::new();
        for key in self.metrics.keys() {
            if let Some((group, _)) = key.split_once('/') {
                if !groups.contains(&group) {
                    groups.push(group);
                }
            }
        }
        let width = 8;
        let mut top = String::new();
        let mut mid = String::new();
        let mut vals = String::new();
        for g in &groups {
            let title = capitalize(g);
            let _ = write!(top, "{:^w$}", title, w = 2 * width + 1);
            let _ = write!(mid, "{:>width$} {:>width$}", "R@10", "R@50");
            let _ = write!(
                vals,
                "{:>width$} {:>width$}",
                pct(self.get(&format!("{g}/R@10"))),
                pct(self.get(&format!("{g}/R@50")))
            );
            top.push_str("  ");
            mid.push_str("  ");
            vals.push_str("  ");
        }
        format!(
            "{}\n{}\n{}\n",
            top.trim_end(),
            mid.trim_end(),
            vals.trim_end()
        )
    }
}

fn flat_table<'a>(items: impl Iterator<Item = (&'a str, f64)>) -> String {
    let items: Vec<_> = items.collect();
    let widths: Vec<usize> = items.iter().map(|(k, _)| k.len().max(6)).collect();
    let mut head = String::new();
    let mut vals = String::new();
    for ((k, v), w) in items.iter().zip(&widths) {
        let _ = write!(head, "{k:>w$}  ");
        let _ = write!(vals, "{:>w$}  ", pct(Some(*v)));
    }
    format!("{}\n{}\n", head.trim_end(), vals.trim_end())
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v))
        .unwrap_or_else(|| "-".into())
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}
