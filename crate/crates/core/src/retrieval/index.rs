use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};

use crate::store::EmbeddingMatrix;
use crate::{Error, Result};

/// Gallery features with unit-norm rows, searched by exact cosine similarity.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    ids: Vec<Arc<str>>,
    positions: HashMap<Arc<str>, usize>,
    normalized: Array2<f32>,
    checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Descending by score; ties in ascending gallery order.
    pub ranked_ids: Vec<Arc<str>>,
    pub scores: Vec<f32>,
}

impl QueryResult {
    pub fn len(&self) -> usize {
        self.ranked_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_ids.is_empty()
    }

    /// 1-based rank of `id`, if it was returned.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ranked_ids
            .iter()
            .position(|r| &**r == id)
            .map(|p| p + 1)
    }
}

/// Divide every row by its L2 norm; a zero row is an error naming its id.
pub fn build_index(m: &EmbeddingMatrix) -> Result<GalleryIndex> {
    let mut normalized = m.data().to_owned();
    for (i, mut row) in normalized.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm(m.ids()[i].clone()));
        }
        row /= norm;
    }
    let ids: Vec<Arc<str>> = m.ids().iter().map(|s| Arc::from(s.as_str())).collect();
    let positions = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    Ok(GalleryIndex {
        ids,
        positions,
        normalized,
        checksum: m.checksum()?,
    })
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.normalized.ncols()
    }

    pub fn ids(&self) -> &[Arc<str>] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// SHA-256 of the source matrix encoding.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn normalized(&self) -> &Array2<f32> {
        &self.normalized
    }

    /// Cosine score of the query against every gallery row, in gallery order.
    pub fn scores(&self, query: ArrayView1<f32>) -> Result<Array1<f32>> {
        if query.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "query dim {} vs gallery dim {}",
                query.len(),
                self.dim()
            )));
        }
        let norm = query.dot(&query).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm("query".into()));
        }
        let q = &query / norm;
        // Row by row so identical rows always score identically.
        Ok(self
            .normalized
            .rows()
            .into_iter()
            .map(|r| r.dot(&q))
            .collect())
    }

    /// Top-`k` gallery rows by cosine similarity. `exclude` drops one id
    /// (typically the query's reference image) before ranking; an id not in
    /// the gallery excludes nothing.
    pub fn search(
        &self,
        query: ArrayView1<f32>,
        k: usize,
        exclude: Option<&str>,
    ) -> Result<QueryResult> {
        let excluded = exclude.and_then(|id| self.position(id));
        let available = self.len() - usize::from(excluded.is_some());
        if k == 0 || k > available {
            return Err(Error::KOutOfRange { k, available });
        }
        let scores = self.scores(query)?;
        let mut cand: Vec<(usize, f32)> = scores
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| Some(*i) != excluded)
            .collect();
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, rank_order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(rank_order);
        Ok(QueryResult {
            ranked_ids: cand.iter().map(|(i, _)| self.ids[*i].clone()).collect(),
            scores: cand.iter().map(|(_, s)| *s).collect(),
        })
    }
}

/// Higher score first, then lower gallery ordinal.
pub(crate) fn rank_order(a: &(usize, f32), b: &(usize, f32)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| format!("g{i}")).collect();
        EmbeddingMatrix::from_rows(ids, rows).unwrap()
    }

    #[test]
    fn normalizes_rows() {
        let idx = build_index(&matrix(&[vec![3.0, 4.0]])).unwrap();
        assert!((idx.normalized()[[0, 0]] - 0.6).abs() < 1e-7);
        assert!((idx.normalized()[[0, 1]] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn unit_rows_unchanged() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, -1.0], vec![0.6, 0.8]];
        let idx = build_index(&matrix(&rows)).unwrap();
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                assert!((idx.normalized()[[i, j]] - v).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_row_error_names_id() {
        let err = build_index(&matrix(&[vec![1.0, 0.0], vec![0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::ZeroNorm(ref id) if id == "g1"));
    }

    #[test]
    fn query_equal_to_row_ranks_first() {
        let idx = build_index(&matrix(&[vec![1.0, 0.0], vec![0.3, 0.7], vec![-1.0, 0.2]])).unwrap();
        let r = idx.search(array![0.3f32, 0.7].view(), 3, None).unwrap();
        assert_eq!(&*r.ranked_ids[0], "g1");
        assert!((r.scores[0] - 1.0).abs() < 1e-6);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ties_break_by_ordinal() {
        let idx = build_index(&matrix(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]])).unwrap();
        let r = idx.search(array![1.0f32, 1.0].view(), 2, None).unwrap();
        assert_eq!(
            r.ranked_ids.iter().map(|s| &**s).collect::<Vec<_>>(),
            ["g1", "g2"]
        );
        assert_eq!(r.scores[0], r.scores[1]);
    }

    #[test]
    fn exclusion_and_k_range() {
        let idx = build_index(&matrix(&[vec![1.0, 0.0], vec![0.9, 0.1]])).unwrap();
        let r = idx
            .search(array![1.0f32, 0.0].view(), 1, Some("g0"))
            .unwrap();
        assert_eq!(&*r.ranked_ids[0], "g1");
        assert!(matches!(
            idx.search(array![1.0f32, 0.0].view(), 2, Some("g0")),
            Err(Error::KOutOfRange { k: 2, available: 1 })
        ));
        assert!(idx.search(array![1.0f32, 0.0].view(), 0, None).is_err());
        assert!(idx.search(array![1.0f32, 0.0].view(), 3, None).is_err());
        assert!(idx
            .search(array![1.0f32, 0.0].view(), 2, Some("missing"))
            .is_ok());
    }

    #[test]
    fn zero_query_rejected() {
        let idx = build_index(&matrix(&[vec![1.0, 0.0]])).unwrap();
        assert!(matches!(
            idx.search(array![0.0f32, 0.0].view(), 1, None),
            Err(Error::ZeroNorm(_))
        ));
    }
}
