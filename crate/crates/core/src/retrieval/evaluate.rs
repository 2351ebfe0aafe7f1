use indexmap::IndexMap;
use ndarray::{s, Array2, ArrayView2};
use serde_json::json;

use super::index::{GalleryIndex, QueryResult};
use super::metrics::{
    recall_at_k, recall_subset_at_k, MetricsReport, Protocol, FASHIONIQ_CATEGORIES, SUBSET_KS,
};
use crate::combiner::{CombineMode, CombinerParams, Phase};
use crate::store::{AlignedTriplets, TripletRecord};
use crate::{Error, Result};

const COMBINE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// `None` uses the protocol default.
    pub exclude_reference: Option<bool>,
}

impl EvalOptions {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            exclude_reference: None,
        }
    }

    pub fn exclude_reference(&self) -> bool {
        self.exclude_reference
            .unwrap_or_else(|| self.protocol.default_exclude_reference())
    }
}

/// Eval-phase combined features for every query row. `Sum` needs no parameters.
pub fn combine_queries(
    queries: &AlignedTriplets,
    params: Option<&CombinerParams<f32>>,
    mode: CombineMode,
) -> Result<Array2<f32>> {
    combine_features(
        queries.reference.view(),
        queries.caption.view(),
        params,
        mode,
    )
}

/// Eval-phase combination of paired reference-image and caption rows.
pub fn combine_features(
    reference: ArrayView2<f32>,
    caption: ArrayView2<f32>,
    params: Option<&CombinerParams<f32>>,
    mode: CombineMode,
) -> Result<Array2<f32>> {
    if reference.dim() != caption.dim() {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} vs caption {:?}",
            reference.dim(),
            caption.dim()
        )));
    }
    let (n, d) = reference.dim();
    let zero;
    let params = match (params, mode) {
        (Some(p), _) => p,
        (None, CombineMode::Sum) => {
            zero = CombinerParams::zeros(d);
            &zero
        }
        (None, m) => {
            return Err(Error::InvalidConfig(format!(
                "combine mode {m} needs trained parameters"
            )))
        }
    };
    if params.d != d {
        return Err(Error::ShapeMismatch(format!(
            "combiner dim {} vs feature dim {d}",
            params.d
        )));
    }
    let mut out = Array2::zeros((n, d));
    for start in (0..n).step_by(COMBINE_CHUNK) {
        let end = (start + COMBINE_CHUNK).min(n);
        let f = params.forward(
            reference.slice(s![start..end, ..]),
            caption.slice(s![start..end, ..]),
            mode,
            Phase::Eval,
        )?;
        out.slice_mut(s![start..end, ..]).assign(&f.combined);
    }
    Ok(out)
}

/// Combine, search and aggregate the protocol's metric set.
///
/// FashionIQ reports R@10/R@50 per category and their average; CIRR reports
/// R@{1,5,10,50}, R_subset@{1,2,3} and the mean of R@5 and R_subset@1;
/// generic reports R@{1,5,10,50}. A K larger than the searchable gallery is
/// evaluated at the full gallery depth.
pub fn evaluate(
    queries: &AlignedTriplets,
    params: Option<&CombinerParams<f32>>,
    mode: CombineMode,
    index: &GalleryIndex,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::Empty("no evaluation queries".into()));
    }
    if queries.dim() != index.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.dim(),
            index.dim()
        )));
    }
    let protocol = opts.protocol;
    let exclude = opts.exclude_reference();
    check_protocol(&queries.records, protocol, index)?;

    let combined = combine_queries(queries, params, mode)?;
    let max_k = protocol.global_ks().iter().copied().max().unwrap_or(1);
    let mut results = Vec::with_capacity(queries.len());
    for (row, rec) in combined.rows().into_iter().zip(&queries.records) {
        let excluded = exclude.then_some(rec.reference_id.as_str());
        let available = index.len() - usize::from(excluded.is_some_and(|id| index.contains(id)));
        let depth = if protocol == Protocol::Cirr {
            available
        } else {
            max_k.min(available)
        };
        results.push(index.search(row, depth, excluded)?);
    }

    let mut metrics = IndexMap::new();
    match protocol {
        Protocol::Generic => {
            global_recalls(
                &mut metrics,
                &results,
                &queries.records,
                protocol.global_ks(),
            )?;
            let m = (metrics["R@10"] + metrics["R@50"]) / 2.0;
            metrics.insert("mean(R@10,R@50)".into(), m);
        }
        Protocol::Cirr => {
            global_recalls(
                &mut metrics,
                &results,
                &queries.records,
                protocol.global_ks(),
            )?;
            for k in SUBSET_KS {
                metrics.insert(
                    format!("R_subset@{k}"),
                    recall_subset_at_k(&results, &queries.records, k)?,
                );
            }
            let avg = (metrics["R@5"] + metrics["R_subset@1"]) / 2.0;
            metrics.insert("avg".into(), avg);
        }
        Protocol::FashionIq => fashioniq_recalls(&mut metrics, &results, &queries.records)?,
    }

    let mut config = IndexMap::new();
    config.insert("mode".into(), json!(mode.as_str()));
    config.insert("exclude_reference".into(), json!(exclude));
    config.insert("gallery_size".into(), json!(index.len()));
    config.insert("gallery_checksum".into(), json!(index.checksum()));
    Ok(MetricsReport {
        protocol,
        query_count: queries.len(),
        metrics,
        config,
    })
}

fn check_protocol(
    records: &[TripletRecord],
    protocol: Protocol,
    index: &GalleryIndex,
) -> Result<()> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !index.contains(&r.target_id))
        .map(|r| r.target_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnresolvedIds(missing));
    }
    match protocol {
        Protocol::Cirr if records.iter().any(|r| r.subset_ids.is_none()) => Err(Error::Protocol(
            "cirr protocol needs subset ids on every triplet".into(),
        )),
        Protocol::FashionIq if records.iter().any(|r| r.category.is_none()) => Err(
            Error::Protocol("fashioniq protocol needs a category on every triplet".into()),
        ),
        _ => Ok(()),
    }
}

fn depth_k(results: &[QueryResult], k: usize) -> usize {
    results
        .iter()
        .map(QueryResult::len)
        .min()
        .unwrap_or(0)
        .min(k)
}

fn global_recalls(
    metrics: &mut IndexMap<String, f64>,
    results: &[QueryResult],
    records: &[TripletRecord],
    ks: &[usize],
) -> Result<()> {
    let targets: Vec<&str> = records.iter().map(|r| r.target_id.as_str()).collect();
    for &k in ks {
        metrics.insert(
            format!("R@{k}"),
            recall_at_k(results, &targets, depth_k(results, k))?,
        );
    }
    Ok(())
}

fn fashioniq_recalls(
    metrics: &mut IndexMap<String, f64>,
    results: &[QueryResult],
    records: &[TripletRecord],
) -> Result<()> {
    let mut categories: Vec<String> = Vec::new();
    for r in records {
        let c = r.category.as_ref().expect("checked").to_ascii_lowercase();
        if !categories.contains(&c) {
            categories.push(c);
        }
    }
    // Known categories in their usual column order, anything else after.
    categories.sort_by_key(|c| {
        (
            FASHIONIQ_CATEGORIES
                .iter()
                .position(|k| k == c)
                .unwrap_or(FASHIONIQ_CATEGORIES.len()),
            c.clone(),
        )
    });

    let ks = Protocol::FashionIq.global_ks();
    let mut sums = vec![0.0; ks.len()];
    for cat in &categories {
        let (rs, ts): (Vec<QueryResult>, Vec<&str>) = results
            .iter()
            .zip(records)
            .filter(|(_, r)| {
                r.category
                    .as_deref()
                    .map(str::to_ascii_lowercase)
                    .as_deref()
                    == Some(cat)
            })
            .map(|(q, r)| (q.clone(), r.target_id.as_str()))
            .unzip();
        for (i, &k) in ks.iter().enumerate() {
            let v = recall_at_k(&rs, &ts, depth_k(&rs, k))?;
            sums[i] += v;
            metrics.insert(format!("{cat}/R@{k}"), v);
        }
    }
    let n = categories.len() as f64;
    for (i, &k) in ks.iter().enumerate() {
        metrics.insert(format!("average/R@{k}"), sums[i] / n);
    }
    let mean = sums.iter().sum::<f64>() / (n * ks.len() as f64);
    metrics.insert("average/mean".into(), mean);
    Ok(())
}
