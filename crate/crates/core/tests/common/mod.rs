//! Independent oracles shared by the integration and acceptance tests:
//! central finite differences, brute-force ranking and small random fixtures.
#![allow(dead_code)]

use cir_core::combiner::{CombineMode, CombinerParams, Linear, Phase};
use cir_core::training::contrastive_loss;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-3;
/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn gaussian_matrix_f32(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Parameters with every entry (biases included) drawn uniformly in
/// `+-1/sqrt(fan_in)`, so no unit sits exactly at a ReLU kink.
pub fn random_params(d: usize, seed: u64) -> CombinerParams<f64> {
    let mut p = CombinerParams::<f64>::zeros(d);
    let fans: Vec<usize> = p.shapes().iter().map(|s| s.0).collect();
    let shapes = p.shapes();
    let mut r = rng(seed ^ 0xA11CE);
    for (i, t) in p.tensors_mut().into_iter().enumerate() {
        // Biases are stored 1 x n; use the weight's fan-in for their scale.
        let fan_in = if shapes[i].0 == 1 && i % 2 == 1 {
            fans[i - 1]
        } else {
            fans[i]
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in t.iter_mut() {
            *v = r.random_range(-bound..bound);
        }
    }
    p
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub params: CombinerParams<f64>,
    pub img: Array2<f64>,
    pub txt: Array2<f64>,
    pub tgt: Array2<f64>,
    pub mode: CombineMode,
    pub phase: Phase,
    pub tau: f64,
}

impl Instance {
    pub fn loss_with(
        &self,
        params: &CombinerParams<f64>,
        img: &Array2<f64>,
        txt: &Array2<f64>,
    ) -> (f64, Vec<bool>) {
        let (fwd, cache) = params
            .forward_cached(img.view(), txt.view(), self.mode, self.phase)
            .expect("forward");
        let out = contrastive_loss(fwd.combined.view(), self.tgt.view(), self.tau).expect("loss");
        (out.loss, cache.activation_pattern())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Worst relative error of a whole gradient (one parameter tensor or one
    /// input), `|a - n| / max(|a|, |n|)` in the Euclidean norm.
    pub worst_rel: f64,
    /// Worst single-coordinate relative error; informational only, since
    /// near-zero coordinates are dominated by the O(h^2) truncation term.
    pub worst_coord_rel: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped_kinks += o.skipped_kinks;
        self.worst_rel = self.worst_rel.max(o.worst_rel);
        self.worst_coord_rel = self.worst_coord_rel.max(o.worst_coord_rel);
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Norm-wise relative error between two gradient vectors.
pub fn vec_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(REL_FLOOR)
}

/// Which coordinates of a tensor of `len` entries to probe: all of them when
/// small, otherwise `per_tensor` seeded picks.
fn probe_indices(len: usize, per_tensor: usize, r: &mut impl Rng) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        rand::seq::index::sample(r, len, per_tensor).into_vec()
    }
}

/// Analytic and numeric values collected for one gradient tensor.
#[derive(Default)]
struct Probe {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

/// Compares the analytic gradient of the full pipeline (Combiner forward,
/// contrastive loss) against central differences, for sampled parameter
/// coordinates and every input coordinate. Coordinates whose +-h probes
/// change the ReLU activation pattern are skipped and counted.
pub fn check_gradients(inst: &Instance, per_tensor: usize, seed: u64) -> FdStats {
    let h = FD_STEP;
    let (fwd, cache) = inst
        .params
        .forward_cached(inst.img.view(), inst.txt.view(), inst.mode, inst.phase)
        .expect("forward");
    let base_pattern = cache.activation_pattern();
    let out = contrastive_loss(fwd.combined.view(), inst.tgt.view(), inst.tau).expect("loss");
    let grads = inst
        .params
        .backward(&cache, out.grad_combined.view())
        .expect("backward");

    let mut stats = FdStats::default();
    let mut record =
        |probe: &mut Probe, analytic: f64, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)| {
            if plus.1 != base_pattern || minus.1 != base_pattern {
                stats.skipped_kinks += 1;
                return;
            }
            let numeric = (plus.0 - minus.0) / (2.0 * h);
            stats.checked += 1;
            stats.worst_coord_rel = stats.worst_coord_rel.max(rel_err(analytic, numeric));
            probe.analytic.push(analytic);
            probe.numeric.push(numeric);
        };
    let mut probes = Vec::new();

    if inst.mode.is_trainable() {
        let mut r = rng(seed);
        let analytic = grads
            .params
            .tensors()
            .iter()
            .map(|t| t.to_vec())
            .collect::<Vec<_>>();
        for (ti, g) in analytic.iter().enumerate() {
            let mut probe = Probe::default();
            for idx in probe_indices(g.len(), per_tensor, &mut r) {
                let mut p = inst.params.clone();
                p.tensors_mut()[ti][idx] += h;
                let plus = inst.loss_with(&p, &inst.img, &inst.txt);
                p.tensors_mut()[ti][idx] -= 2.0 * h;
                let minus = inst.loss_with(&p, &inst.img, &inst.txt);
                record(&mut probe, g[idx], plus, minus);
            }
            probes.push(probe);
        }
    }

    for which in 0..2 {
        let analytic = if which == 0 { &grads.img } else { &grads.txt };
        let mut probe = Probe::default();
        for ((i, j), &a) in analytic.indexed_iter() {
            let mut img = inst.img.clone();
            let mut txt = inst.txt.clone();
            let x = if which == 0 { &mut img } else { &mut txt };
            x[[i, j]] += h;
            let plus = inst.loss_with(&inst.params, &img, &txt);
            let x = if which == 0 { &mut img } else { &mut txt };
            x[[i, j]] -= 2.0 * h;
            let minus = inst.loss_with(&inst.params, &img, &txt);
            record(&mut probe, a, plus, minus);
        }
        probes.push(probe);
    }
    for p in &probes {
        stats.worst_rel = stats.worst_rel.max(vec_rel_err(&p.analytic, &p.numeric));
    }
    stats
}

/// Central differences of the loss alone with respect to the combined rows.
pub fn check_loss_gradient(combined: &Array2<f64>, targets: &Array2<f64>, tau: f64) -> f64 {
    let h = FD_STEP;
    let out = contrastive_loss(combined.view(), targets.view(), tau).expect("loss");
    let mut numeric = Vec::new();
    for (i, j) in out.grad_combined.indexed_iter().map(|(ij, _)| ij) {
        let mut c = combined.clone();
        c[[i, j]] += h;
        let plus = contrastive_loss(c.view(), targets.view(), tau)
            .unwrap()
            .loss;
        c[[i, j]] -= 2.0 * h;
        let minus = contrastive_loss(c.view(), targets.view(), tau)
            .unwrap()
            .loss;
        numeric.push((plus - minus) / (2.0 * h));
    }
    vec_rel_err(
        &out.grad_combined.iter().copied().collect::<Vec<_>>(),
        &numeric,
    )
}

/// The `i`-th gradient-check instance: dimension cycles through {4, 8, 16},
/// batch through 2..=8, mode through all variants, phase alternates.
pub fn gradient_instance(i: usize, tau: f64) -> Instance {
    let d = [4, 8, 16][i % 3];
    let batch = 2 + (i * 5) % 7;
    let mode = CombineMode::ALL[i % CombineMode::ALL.len()];
    let phase = if i.is_multiple_of(2) {
        Phase::Eval
    } else {
        Phase::Train {
            dropout_seed: 1000 + i as u64,
        }
    };
    let mut r = rng(7919 * i as u64 + 17);
    Instance {
        params: random_params(d, i as u64),
        img: gaussian_matrix(&mut r, batch, d),
        txt: gaussian_matrix(&mut r, batch, d),
        tgt: gaussian_matrix(&mut r, batch, d),
        mode,
        phase,
        tau,
    }
}

/// Full-sort ranking oracle: stable sort of every candidate by descending
/// score, so equal scores keep gallery order.
pub fn full_sort_ranking(scores: &[f32], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order.truncate(k);
    order
}

/// Cosine similarity computed independently in f64.
pub fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    let na = a.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Random orthogonal `d x d` matrix via Gram-Schmidt on Gaussian columns.
pub fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let mut q = gaussian_matrix(&mut r, d, d);
    for j in 0..d {
        for k in 0..j {
            let proj: f64 = (0..d).map(|i| q[[i, j]] * q[[i, k]]).sum();
            for i in 0..d {
                q[[i, j]] -= proj * q[[i, k]];
            }
        }
        let norm = (0..d).map(|i| q[[i, j]].powi(2)).sum::<f64>().sqrt();
        for i in 0..d {
            q[[i, j]] /= norm;
        }
    }
    q
}

/// One exact-search instance: a gallery seeded with exact ties, queries and a depth.
pub struct SearchCase {
    pub gallery: cir_core::store::EmbeddingMatrix,
    pub queries: Array2<f32>,
    pub k: usize,
    /// Gallery ordinal to exclude from every ranking, if any.
    pub exclude: Option<usize>,
}

/// The `i`-th search instance. Sizes cycle up to N = 5000, d = 64, k = 50.
/// About a fifth of the rows are exact duplicates or power-of-two rescalings
/// of earlier rows, which normalize to bitwise-identical vectors and so tie.
pub fn search_case(i: usize) -> SearchCase {
    let n = [7, 60, 500, 2000, 5000][i % 5];
    let d = [2, 8, 16, 33, 64][(i / 5) % 5];
    let k = [1, 5, 50, n - 1][i % 4].min(50).min(n - 1);
    let mut r = rng(5000 + i as u64);
    let mut rows = gaussian_matrix_f32(&mut r, n, d);
    for row in 1..n {
        if r.random_bool(0.2) {
            let src = r.random_range(0..row);
            let scale = [1.0f32, 2.0, 0.25, 8.0][r.random_range(0..4)];
            let copy = rows.row(src).mapv(|v| v * scale);
            rows.row_mut(row).assign(&copy);
        }
    }
    let ids = (0..n).map(|j| format!("g{j}")).collect();
    let gallery = cir_core::store::EmbeddingMatrix::new(ids, rows.clone()).expect("gallery");
    // Some queries sit exactly on gallery rows so that top scores tie too.
    let nq = 4;
    let mut queries = gaussian_matrix_f32(&mut r, nq, d);
    for q in 0..nq / 2 {
        let src = r.random_range(0..n);
        queries.row_mut(q).assign(&rows.row(src));
    }
    let exclude = i.is_multiple_of(3).then(|| r.random_range(0..n));
    SearchCase {
        gallery,
        queries,
        k,
        exclude,
    }
}

/// Every row multiplied by the orthogonal `q` (computed in f64, stored as f32).
pub fn rotate_rows(
    m: &cir_core::store::EmbeddingMatrix,
    q: &Array2<f64>,
) -> cir_core::store::EmbeddingMatrix {
    let rotated = m.data().mapv(f64::from).dot(q).mapv(|v| v as f32);
    cir_core::store::EmbeddingMatrix::new(m.ids().to_vec(), rotated).expect("rotated matrix")
}

/// Combined features (sum of reference and caption rows, keyed by query id)
/// for a synthetic sample, as the gap study consumes them.
pub fn summed_queries(s: &cir_core::store::SynthSample) -> cir_core::store::EmbeddingMatrix {
    let rows: Vec<Vec<f32>> = s
        .triplets
        .records
        .iter()
        .map(|r| {
            let a = s.reference.row_by_id(&r.reference_id).expect("reference");
            let b = s.caption.row_by_id(&r.query_id).expect("caption");
            (&a + &b).to_vec()
        })
        .collect();
    let ids = s
        .triplets
        .records
        .iter()
        .map(|r| r.query_id.clone())
        .collect();
    cir_core::store::EmbeddingMatrix::from_rows(ids, &rows).expect("combined")
}

/// `relu(x W + b)` with explicit loops.
pub fn dense(x: &Array2<f64>, layer: &Linear<f64>, relu: bool) -> Array2<f64> {
    let (n, fan_in) = x.dim();
    let fan_out = layer.fan_out();
    let mut y = Array2::zeros((n, fan_out));
    for r in 0..n {
        for o in 0..fan_out {
            let mut acc = layer.bias[o];
            for i in 0..fan_in {
                acc += x[[r, i]] * layer.weight[[i, o]];
            }
            y[[r, o]] = if relu { acc.max(0.0) } else { acc };
        }
    }
    y
}

pub struct Reference {
    pub lambda: Array1<f64>,
    pub residual: Array2<f64>,
}

pub fn reference_branches(
    p: &CombinerParams<f64>,
    img: &Array2<f64>,
    txt: &Array2<f64>,
) -> Reference {
    let fi = dense(img, &p.img_proj, true);
    let ft = dense(txt, &p.txt_proj, true);
    let concat = ndarray::concatenate![ndarray::Axis(1), fi, ft];
    let z = dense(&dense(&concat, &p.gate_hidden, true), &p.gate_out, false);
    Reference {
        lambda: z.column(0).mapv(|z| 1.0 / (1.0 + (-z).exp())),
        residual: dense(&dense(&concat, &p.mix_hidden, true), &p.mix_out, false),
    }
}

/// `(1 - lambda_i) img_i + lambda_i txt_i (+ v_i)`.
pub fn blend(
    img: &Array2<f64>,
    txt: &Array2<f64>,
    lambda: &Array1<f64>,
    v: Option<&Array2<f64>>,
) -> Array2<f64> {
    let mut out = Array2::zeros(img.dim());
    for ((r, c), o) in out.indexed_iter_mut() {
        *o = (1.0 - lambda[r]) * img[[r, c]]
            + lambda[r] * txt[[r, c]]
            + v.map_or(0.0, |v| v[[r, c]]);
    }
    out
}
