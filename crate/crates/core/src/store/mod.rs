//! Embedding persistence, annotations and synthetic fixtures.

pub mod annotations;
pub mod embeddings;
pub mod synth;

use ndarray::Array2;

pub use annotations::{
    load_annotations, parse_annotations, AnnotationSchema, Split, TripletRecord, TripletSet,
};
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingMatrix};
pub use synth::{synth_generate, Mixing, SampleSpec, SynthSample, SynthTask};

use crate::{Error, Result};

/// Triplets joined against their features, one row per record.
#[derive(Debug, Clone)]
pub struct AlignedTriplets {
    pub records: Vec<TripletRecord>,
    pub reference: Array2<f32>,
    pub caption: Array2<f32>,
    pub target: Array2<f32>,
}

impl AlignedTriplets {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.reference.ncols()
    }

    pub fn target_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.target_id.as_str()).collect()
    }
}

/// Resolves image ids across several matrices; the first match wins.
#[derive(Debug, Clone, Copy)]
pub struct ImageLookup<'a> {
    sources: &'a [&'a EmbeddingMatrix],
}

impl<'a> ImageLookup<'a> {
    pub fn new(sources: &'a [&'a EmbeddingMatrix]) -> Self {
        Self { sources }
    }

    pub fn get(&self, id: &str) -> Option<ndarray::ArrayView1<'a, f32>> {
        self.sources.iter().find_map(|m| m.row_by_id(id))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }
}

/// Every id a triplet set references that none of the sources resolve.
/// Reference/target ids are checked against `images`, query ids against `captions`.
pub fn unresolved_ids(
    triplets: &TripletSet,
    images: ImageLookup<'_>,
    captions: &EmbeddingMatrix,
) -> Vec<String> {
    let mut missing = Vec::new();
    for r in &triplets.records {
        for id in [&r.reference_id, &r.target_id] {
            if !images.contains(id) {
                missing.push(id.clone());
            }
        }
        if captions.position(&r.query_id).is_none() {
            missing.push(format!("caption:{}", r.query_id));
        }
    }
    missing.sort();
    missing.dedup();
    missing
}

/// Join a triplet set with image and caption features.
pub fn align(
    triplets: &TripletSet,
    images: ImageLookup<'_>,
    captions: &EmbeddingMatrix,
) -> Result<AlignedTriplets> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet set".into()));
    }
    let missing = unresolved_ids(triplets, images, captions);
    if !missing.is_empty() {
        return Err(Error::UnresolvedIds(missing));
    }
    let d = captions.dim();
    let n = triplets.len();
    let mut reference = Array2::zeros((n, d));
    let mut caption = Array2::zeros((n, d));
    let mut target = Array2::zeros((n, d));
    for (i, r) in triplets.records.iter().enumerate() {
        let rows = [
            (images.get(&r.reference_id), &mut reference),
            (images.get(&r.target_id), &mut target),
            (captions.row_by_id(&r.query_id), &mut caption),
        ];
        for (row, dst) in rows {
            let row = row.expect("resolved above");
            if row.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "query {:?}: image dim {} vs caption dim {d}",
                    r.query_id,
                    row.len()
                )));
            }
            dst.row_mut(i).assign(&row);
        }
    }
    Ok(AlignedTriplets {
        records: triplets.records.clone(),
        reference,
        caption,
        target,
    })
}
