//! Synthetic composed-retrieval tasks with a known solution.
//!
//! `Additive` targets are `normalize(reference + caption + noise)`, so plain
//! element-wise sum solves them. `LinearMaps` targets are
//! `normalize(A reference + B caption + noise)` for fixed random maps, which
//! sum fusion cannot recover but a trained Combiner can.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::annotations::{Split, TripletRecord, TripletSet};
use super::embeddings::EmbeddingMatrix;
use crate::{Error, Result};

pub const DEFAULT_NOISE_SIGMA: f32 = 0.05;

const MAP_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Additive,
    LinearMaps,
}

impl std::str::FromStr for Mixing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "additive" => Ok(Mixing::Additive),
            "linear_maps" => Ok(Mixing::LinearMaps),
            other => Err(Error::InvalidConfig(format!("unknown mixing {other:?}"))),
        }
    }
}

/// Draw parameters for one sample of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub seed: u64,
    pub n_triplets: usize,
    pub n_distractors: usize,
    pub noise_sigma: f32,
    /// Prepended to every generated id so several samples can share a bundle.
    pub id_prefix: String,
    pub split: Split,
}

impl SampleSpec {
    pub fn new(seed: u64, n_triplets: usize) -> Self {
        Self {
            seed,
            n_triplets,
            n_distractors: n_triplets,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            id_prefix: String::new(),
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub reference: EmbeddingMatrix,
    /// Keyed by query id.
    pub caption: EmbeddingMatrix,
    /// Every target followed by the distractors.
    pub gallery: EmbeddingMatrix,
    pub triplets: TripletSet,
}

/// The fixed part of a task: dimension, mixing law and (for `LinearMaps`) the maps.
#[derive(Debug, Clone)]
pub struct SynthTask {
    d: usize,
    mixing: Mixing,
    maps: Option<(Array2<f32>, Array2<f32>)>,
}

impl SynthTask {
    pub fn new(seed: u64, d: usize, mixing: Mixing) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidConfig(format!(
                "synthetic dimension must be >= 2, got {d}"
            )));
        }
        let maps = match mixing {
            Mixing::Additive => None,
            Mixing::LinearMaps => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(MAP_STREAM);
                let scale = 1.0 / (d as f32).sqrt();
                let mut draw = || Array2::from_shape_fn((d, d), |_| gaussian(&mut rng) * scale);
                let a = draw();
                let b = draw();
                Some((a, b))
            }
        };
        Ok(Self { d, mixing, maps })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mixing(&self) -> Mixing {
        self.mixing
    }

    fn compose(&self, reference: ArrayView1<f32>, caption: ArrayView1<f32>) -> Array1<f32> {
        match &self.maps {
            None => &reference + &caption,
            Some((a, b)) => a.dot(&reference) + b.dot(&caption),
        }
    }

    pub fn sample(&self, spec: &SampleSpec) -> Result<SynthSample> {
        if spec.n_triplets == 0 {
            return Err(Error::InvalidConfig("n_triplets must be >= 1".into()));
        }
        if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(
                "noise sigma must be finite and >= 0".into(),
            ));
        }
        let d = self.d;
        let n = spec.n_triplets;
        let p = &spec.id_prefix;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(SAMPLE_STREAM);

        let mut ref_rows = Array2::zeros((n, d));
        let mut cap_rows = Array2::zeros((n, d));
        let mut gallery_rows = Array2::zeros((n + spec.n_distractors, d));
        for i in 0..n + spec.n_distractors {
            let r = unit_gaussian(&mut rng, d);
            let c = unit_gaussian(&mut rng, d);
            let mut t = self.compose(r.view(), c.view());
            if spec.noise_sigma > 0.0 {
                t.mapv_inplace(|v| v + spec.noise_sigma * gaussian(&mut rng));
            }
            normalize(&mut t);
            gallery_rows.row_mut(i).assign(&t);
            if i < n {
                ref_rows.row_mut(i).assign(&r);
                cap_rows.row_mut(i).assign(&c);
            }
        }

        let ref_ids: Vec<String> = (0..n).map(|i| format!("{p}ref-{i}")).collect();
        let query_ids: Vec<String> = (0..n).map(|i| format!("{p}q-{i}")).collect();
        let gallery_ids: Vec<String> = (0..n)
            .map(|i| format!("{p}tgt-{i}"))
            .chain((0..spec.n_distractors).map(|i| format!("{p}dis-{i}")))
            .collect();
        let records = (0..n)
            .map(|i| TripletRecord {
                query_id: query_ids[i].clone(),
                reference_id: ref_ids[i].clone(),
                target_id: gallery_ids[i].clone(),
                captions: vec![format!("synthetic caption {i}")],
                category: None,
                subset_ids: None,
            })
            .collect();

        Ok(SynthSample {
            reference: EmbeddingMatrix::new(ref_ids, ref_rows)?,
            caption: EmbeddingMatrix::new(query_ids, cap_rows)?,
            gallery: EmbeddingMatrix::new(gallery_ids, gallery_rows)?,
            triplets: TripletSet::new(records, spec.split)?,
        })
    }
}

/// One self-contained task sample: `n_triplets` queries, as many distractors,
/// noise sigma 0.05. Maps and samples derive from `seed` on separate streams.
pub fn synth_generate(
    seed: u64,
    n_triplets: usize,
    d: usize,
    mixing: Mixing,
) -> Result<SynthSample> {
    SynthTask::new(seed, d, mixing)?.sample(&SampleSpec::new(seed, n_triplets))
}

fn gaussian(rng: &mut impl Rng) -> f32 {
    rng.sample(StandardNormal)
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> Array1<f32> {
    loop {
        let mut v = Array1::from_shape_fn(d, |_| gaussian(rng));
        if normalize(&mut v) {
            return v;
        }
    }
}

fn normalize(v: &mut Array1<f32>) -> bool {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 && norm.is_finite() {
        *v /= norm;
        true
    } else {
        false
    }
}
