//! Exact search against a full-sort oracle, and recall bookkeeping.

mod common;

use cir_core::combiner::CombineMode;
use cir_core::retrieval::{
    build_index, evaluate, recall_at_k, recall_subset_at_k, EvalOptions, Protocol, QueryResult,
};
use cir_core::store::{
    align, EmbeddingMatrix, ImageLookup, Mixing, SampleSpec, Split, SynthTask, TripletRecord,
    TripletSet,
};
use cir_core::Error;
use common::*;
use ndarray::Array2;
use proptest::prelude::*;

#[test]
fn search_matches_full_sort_including_ties() {
    let mut ties_seen = 0;
    for i in 0..50 {
        let case = search_case(i);
        let index = build_index(&case.gallery).unwrap();
        let exclude_id = case.exclude.map(|j| case.gallery.ids()[j].clone());
        for q in case.queries.rows() {
            let scores = index.scores(q).unwrap().to_vec();
            let oracle = full_sort_ranking(&scores, case.k, case.exclude);
            let got = index.search(q, case.k, exclude_id.as_deref()).unwrap();
            let got_pos: Vec<usize> = got
                .ranked_ids
                .iter()
                .map(|id| index.position(id).unwrap())
                .collect();
            assert_eq!(got_pos, oracle, "instance {i}");
            let expected_scores: Vec<f32> = oracle.iter().map(|&j| scores[j]).collect();
            assert_eq!(got.scores, expected_scores);
            ties_seen += got.scores.windows(2).filter(|w| w[0] == w[1]).count();
        }
    }
    assert!(
        ties_seen > 50,
        "fixture should exercise ties, saw {ties_seen}"
    );
}

#[test]
fn scores_are_cosines() {
    for i in [0, 7, 13, 24] {
        let case = search_case(i);
        let index = build_index(&case.gallery).unwrap();
        for q in case.queries.rows() {
            let scores = index.scores(q).unwrap();
            let qs = q.to_vec();
            for (j, &s) in scores.iter().enumerate() {
                let oracle = cosine_f64(&qs, case.gallery.row(j).as_slice().unwrap());
                assert!((f64::from(s) - oracle).abs() < 1e-5, "instance {i} row {j}");
            }
        }
    }
}

#[test]
fn ranking_ignores_query_scale() {
    let case = search_case(11);
    let index = build_index(&case.gallery).unwrap();
    for q in case.queries.rows() {
        let a = index.search(q, case.k, None).unwrap();
        let b = index.search((&q * 4.0f32).view(), case.k, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn bad_k_and_zero_query_are_errors() {
    let case = search_case(1);
    let index = build_index(&case.gallery).unwrap();
    let q = case.queries.row(0);
    let n = index.len();
    assert!(matches!(
        index.search(q, 0, None),
        Err(Error::KOutOfRange { .. })
    ));
    assert!(matches!(
        index.search(q, n + 1, None),
        Err(Error::KOutOfRange { .. })
    ));
    assert!(index.search(q, n, None).is_ok());
    assert!(matches!(
        index.search(q, n, Some("g0")),
        Err(Error::KOutOfRange { .. })
    ));
    // An id outside the gallery excludes nothing.
    assert_eq!(index.search(q, n, Some("nope")).unwrap().len(), n);
    let zero = ndarray::Array1::<f32>::zeros(index.dim());
    assert!(index.search(zero.view(), 1, None).is_err());
}

fn result(ids: &[&str]) -> QueryResult {
    QueryResult {
        ranked_ids: ids.iter().map(|s| (*s).into()).collect(),
        scores: (0..ids.len()).map(|i| -(i as f32)).collect(),
    }
}

#[test]
fn recall_counts_hits_within_depth() {
    let results = vec![
        result(&["a", "b", "c"]),
        result(&["c", "a", "b"]),
        result(&["b", "c", "a"]),
    ];
    let targets = ["a", "a", "a"];
    assert_eq!(recall_at_k(&results, &targets, 1).unwrap(), 1.0 / 3.0);
    assert_eq!(recall_at_k(&results, &targets, 2).unwrap(), 2.0 / 3.0);
    assert_eq!(recall_at_k(&results, &targets, 3).unwrap(), 1.0);
    assert!(recall_at_k(&results, &targets, 4).is_err());
}

fn record(q: &str, reference: &str, target: &str, subset: &[&str]) -> TripletRecord {
    TripletRecord {
        query_id: q.into(),
        reference_id: reference.into(),
        target_id: target.into(),
        captions: vec!["c".into()],
        category: None,
        subset_ids: Some(subset.iter().map(|s| s.to_string()).collect()),
    }
}

#[test]
fn subset_recall_filters_ranking() {
    // Ranking x, r, y, t: inside subset {r, y, t} minus the reference, t is second.
    let results = vec![result(&["x", "r", "y", "t"])];
    let trip = vec![record("q", "r", "t", &["r", "y", "t"])];
    assert_eq!(recall_subset_at_k(&results, &trip, 1).unwrap(), 0.0);
    assert_eq!(recall_subset_at_k(&results, &trip, 2).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn subset_recall_dominates_global_recall(seed in any::<u64>(), k in 1usize..4) {
        let mut r = rng(seed);
        let n = 30;
        let gallery = EmbeddingMatrix::new(
            (0..n).map(|i| format!("g{i}")).collect(),
            gaussian_matrix_f32(&mut r, n, 8),
        ).unwrap();
        let index = build_index(&gallery).unwrap();
        let queries = gaussian_matrix_f32(&mut r, 10, 8);
        let mut results = Vec::new();
        let mut records = Vec::new();
        for (qi, q) in queries.rows().into_iter().enumerate() {
            results.push(index.search(q, n, None).unwrap());
            let members: Vec<String> = rand::seq::index::sample(&mut r, n, 6).into_iter().map(|i| format!("g{i}")).collect();
            let m: Vec<&str> = members.iter().map(String::as_str).collect();
            records.push(record(&format!("q{qi}"), m[0], m[1 + qi % 5], &m));
        }
        let targets: Vec<&str> = records.iter().map(|t| t.target_id.as_str()).collect();
        let global = recall_at_k(&results, &targets, k).unwrap();
        let subset = recall_subset_at_k(&results, &records, k).unwrap();
        prop_assert!(subset >= global);
    }
}

#[test]
fn cirr_protocol_excludes_reference_by_default() {
    // The reference is the closest gallery image to its own query, so keeping
    // it in the ranking pushes the target down.
    let d = 8;
    let mut rows = Array2::<f32>::zeros((7, d));
    rows[[0, 0]] = 1.0; // reference
    rows[[1, 0]] = 0.9; // target
    rows[[1, 1]] = 0.1;
    for j in 2..7 {
        rows[[j, j]] = 1.0;
    }
    let ids: Vec<String> = ["ref", "tgt", "o2", "o3", "o4", "o5", "o6"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let gallery = EmbeddingMatrix::new(ids, rows).unwrap();
    let mut cap = Array2::<f32>::zeros((1, d));
    cap[[0, 1]] = 0.01;
    let captions = EmbeddingMatrix::new(vec!["q".into()], cap).unwrap();
    let set = TripletSet::new(
        vec![record(
            "q",
            "ref",
            "tgt",
            &["ref", "tgt", "o2", "o3", "o4", "o5"],
        )],
        Split::Val,
    )
    .unwrap();
    let sources = [&gallery];
    let q = align(&set, ImageLookup::new(&sources), &captions).unwrap();
    let index = build_index(&gallery).unwrap();
    let cirr = evaluate(
        &q,
        None,
        CombineMode::Sum,
        &index,
        &EvalOptions::new(Protocol::Cirr),
    )
    .unwrap();
    assert_eq!(cirr.get("R@1"), Some(1.0));
    assert_eq!(cirr.get("R_subset@1"), Some(1.0));
    let kept = EvalOptions {
        protocol: Protocol::Cirr,
        exclude_reference: Some(false),
    };
    let report = evaluate(&q, None, CombineMode::Sum, &index, &kept).unwrap();
    assert_eq!(report.get("R@1"), Some(0.0));
}

#[test]
fn fashioniq_reports_each_category_and_average() {
    let task = SynthTask::new(3, 8, Mixing::Additive).unwrap();
    let mut records = Vec::new();
    let mut refs = Vec::new();
    let mut caps = Vec::new();
    let mut gallery = Vec::new();
    for (ci, cat) in ["dress", "shirt", "toptee"].iter().enumerate() {
        let mut spec = SampleSpec::new(20 + ci as u64, 30);
        spec.noise_sigma = 0.0;
        spec.id_prefix = format!("{cat}-");
        let s = task.sample(&spec).unwrap();
        for mut r in s.triplets.records.clone() {
            r.category = Some((*cat).into());
            records.push(r);
        }
        refs.push(s.reference);
        caps.push(s.caption);
        gallery.push(s.gallery);
    }
    let cat = |v: &Vec<EmbeddingMatrix>| {
        EmbeddingMatrix::concat(&v.iter().collect::<Vec<_>>(), false).unwrap()
    };
    let (refs, caps, gallery) = (cat(&refs), cat(&caps), cat(&gallery));
    let set = TripletSet::new(records, Split::Val).unwrap();
    let sources = [&refs, &gallery];
    let q = align(&set, ImageLookup::new(&sources), &caps).unwrap();
    let index = build_index(&gallery).unwrap();
    let report = evaluate(
        &q,
        None,
        CombineMode::Sum,
        &index,
        &EvalOptions::new(Protocol::FashionIq),
    )
    .unwrap();
    for c in ["dress", "shirt", "toptee"] {
        assert_eq!(report.get(&format!("{c}/R@10")), Some(1.0), "{report:?}");
        assert_eq!(report.get(&format!("{c}/R@50")), Some(1.0));
    }
    assert_eq!(report.headline(), 1.0);
}
