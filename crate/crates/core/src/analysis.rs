//! Embedding-space studies: pairwise similarity distributions and the
//! similarity gap between combined features and their targets versus random
//! non-target gallery images.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::store::{EmbeddingMatrix, TripletSet};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_RANGE: (f64, f64) = (-1.0, 1.0);

const PAIR_STREAM: u64 = 4;
const NONTARGET_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityStudy {
    pub sample_pairs: usize,
    pub nontargets_per_query: usize,
    pub seed: u64,
    pub bins: usize,
}

impl Default for SimilarityStudy {
    fn default() -> Self {
        Self {
            sample_pairs: 50_000,
            nontargets_per_query: 10,
            seed: 0,
            bins: DEFAULT_BINS,
        }
    }
}

impl SimilarityStudy {
    pub fn validate(&self) -> Result<()> {
        if self.sample_pairs == 0 {
            return Err(Error::InvalidConfig("sample_pairs must be >= 1".into()));
        }
        if self.nontargets_per_query == 0 {
            return Err(Error::InvalidConfig(
                "nontargets_per_query must be >= 1".into(),
            ));
        }
        if self.bins == 0 {
            return Err(Error::InvalidConfig("bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cosine similarity accumulated in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine of a zero vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

fn row(m: &EmbeddingMatrix, i: usize) -> &[f32] {
    m.row(i)
        .to_slice()
        .expect("embedding matrices are standard layout")
}

/// Cosine similarities of `study.sample_pairs` uniformly drawn index pairs
/// `(i, j)` with `i != j`, sampled with replacement.
pub fn pairwise_similarity_sample(
    m: &EmbeddingMatrix,
    study: &SimilarityStudy,
) -> Result<Vec<f64>> {
    study.validate()?;
    let n = m.len();
    if n < 2 {
        return Err(Error::Empty(format!(
            "pairwise sampling needs >= 2 rows, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(study.seed);
    rng.set_stream(PAIR_STREAM);
    (0..study.sample_pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            // Draw j from the other n-1 rows.
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            cosine(row(m, i), row(m, j))
                .map_err(|_| Error::ZeroNorm(format!("{} or {}", m.ids()[i], m.ids()[j])))
        })
        .collect()
}

/// Density histogram over `[lo, hi)` with equal-width bins; the area under
/// it is 1. Values outside the range are clamped into the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.density.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.density.len() as f64
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = self.bin_width();
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }

    /// `sum(density * bin_width)`; 1 up to rounding.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.bin_width()
    }

    /// CSV with header `bin_left,bin_right,density`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,density\n");
        for (i, d) in self.density.iter().enumerate() {
            let (l, r) = self.bin_edges(i);
            out.push_str(&format!("{l},{r},{d}\n"));
        }
        out
    }
}

pub fn normalized_histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if values.is_empty() {
        return Err(Error::Empty("histogram input".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be >= 1".into()));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "histogram range ({lo}, {hi})"
        )));
    }
    if let Some(v) = values.iter().find(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: format!("histogram value {v}"),
        });
    }
    let mut counts = vec![0u64; bins];
    let scale = bins as f64 / (hi - lo);
    for &v in values {
        let b = ((v - lo) * scale).floor();
        let b = if b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    let norm = values.len() as f64 * (hi - lo) / bins as f64;
    Ok(Histogram {
        lo,
        hi,
        density: counts.iter().map(|&c| c as f64 / norm).collect(),
    })
}

/// Overlap of two histograms on the same binning: `sum min / sum max`.
pub fn histogram_iou(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.bins() != b.bins() || a.lo != b.lo || a.hi != b.hi {
        return Err(Error::ShapeMismatch(format!(
            "histogram binning {} bins on [{}, {}) vs {} bins on [{}, {})",
            a.bins(),
            a.lo,
            a.hi,
            b.bins(),
            b.lo,
            b.hi
        )));
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.density.iter().zip(&b.density) {
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0.0 {
        return Err(Error::Empty("both histograms are empty".into()));
    }
    Ok(inter / union)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub mean_target_sim: f64,
    pub mean_nontarget_sim: f64,
    pub gap: f64,
    pub histogram_target: Histogram,
    pub histogram_nontarget: Histogram,
    pub histogram_iou: f64,
}

/// Compare each combined feature (row keyed by query id) with its target and
/// with `nontargets_per_query` gallery images drawn without replacement from
/// everything except the target and the reference.
pub fn similarity_gap(
    combined: &EmbeddingMatrix,
    triplets: &TripletSet,
    gallery: &EmbeddingMatrix,
    study: &SimilarityStudy,
) -> Result<GapReport> {
    study.validate()?;
    if triplets.is_empty() {
        return Err(Error::Empty("triplet set".into()));
    }
    if combined.dim() != gallery.dim() {
        return Err(Error::ShapeMismatch(format!(
            "combined dim {} vs gallery dim {}",
            combined.dim(),
            gallery.dim()
        )));
    }
    let k = study.nontargets_per_query;
    if gallery.len() <= k + 1 {
        return Err(Error::Empty(format!(
            "gallery of {} rows cannot supply {k} non-targets",
            gallery.len()
        )));
    }

    let mut unresolved = Vec::new();
    for r in &triplets.records {
        if combined.position(&r.query_id).is_none() {
            unresolved.push(format!("combined:{}", r.query_id));
        }
        if gallery.position(&r.target_id).is_none() {
            unresolved.push(r.target_id.clone());
        }
    }
    if !unresolved.is_empty() {
        unresolved.sort();
        unresolved.dedup();
        return Err(Error::UnresolvedIds(unresolved));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(study.seed);
    rng.set_stream(NONTARGET_STREAM);
    let mut target_sims = Vec::with_capacity(triplets.len());
    let mut other_sims = Vec::with_capacity(triplets.len() * k);
    for r in &triplets.records {
        let q = row(combined, combined.position(&r.query_id).expect("checked"));
        let t = gallery.position(&r.target_id).expect("checked");
        let excluded: Vec<usize> = [Some(t), gallery.position(&r.reference_id)]
            .into_iter()
            .flatten()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        target_sims
            .push(cosine(q, row(gallery, t)).map_err(|_| Error::ZeroNorm(r.query_id.clone()))?);

        // Sample among the remaining rows, then map the compact index back
        // around the (sorted) excluded positions.
        let pool = gallery.len() - excluded.len();
        for mut idx in sample(&mut rng, pool, k).into_iter() {
            for &e in &excluded {
                if idx >= e {
                    idx += 1;
                }
            }
            other_sims.push(
                cosine(q, row(gallery, idx))
                    .map_err(|_| Error::ZeroNorm(gallery.ids()[idx].clone()))?,
            );
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_target_sim = mean(&target_sims);
    let mean_nontarget_sim = mean(&other_sims);
    let histogram_target = normalized_histogram(&target_sims, study.bins, DEFAULT_RANGE)?;
    let histogram_nontarget = normalized_histogram(&other_sims, study.bins, DEFAULT_RANGE)?;
    let histogram_iou = histogram_iou(&histogram_target, &histogram_nontarget)?;
    Ok(GapReport {
        mean_target_sim,
        mean_nontarget_sim,
        gap: mean_target_sim - mean_nontarget_sim,
        histogram_target,
        histogram_nontarget,
        histogram_iou,
    })
}
