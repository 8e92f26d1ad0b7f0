//! Embedding containers, L2 normalization, batched cosine similarity, and
//! the pairwise sign matrix.
//!
//! Values are stored as `f32`; dot products and norms accumulate in `f64`
//! so that batch-sized reductions stay reproducible and well conditioned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GlapError, Result};

/// Norm floor used when dividing by vector norms. Vectors with a smaller
/// norm are treated as degenerate and map to the zero vector.
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GlapError::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(GlapError::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(GlapError::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

/// One embedding vector. `normalized` is set when the L2 norm is within
/// 1e-6 of one.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    normalized: bool,
}

impl Embedding {
    /// Validates that the vector is non-empty and finite.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(GlapError::InvalidInput(
                "embedding must have at least one dimension".into(),
            ));
        }
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(GlapError::InvalidInput(format!(
                "embedding entry {col} is not finite"
            )));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Scales a vector to unit L2 norm, dividing by `max(norm, NORM_FLOOR)`.
/// Degenerate inputs below the floor come back unchanged in direction
/// (effectively zero) and are not flagged as normalized.
pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    if let Some(col) = v.values.iter().position(|x| !x.is_finite()) {
        return Err(GlapError::InvalidInput(format!(
            "embedding entry {col} is not finite"
        )));
    }
    let norm = l2_norm_f64(&v.values);
    let denom = norm.max(NORM_FLOOR);
    let values = v.values.iter().map(|&x| (x as f64 / denom) as f32).collect();
    Ok(Embedding {
        values,
        normalized: norm >= NORM_FLOOR,
    })
}

pub(crate) fn l2_norm_f64(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&x| {
            let x = x as f64;
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// A batch of same-dimension embeddings with unique record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingBatch {
    pub fn from_embeddings(ids: Vec<String>, embeddings: &[Embedding]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(GlapError::InvalidInput("batch must be non-empty".into()));
        }
        if ids.len() != embeddings.len() {
            return Err(GlapError::Shape(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        let dim = embeddings[0].dim();
        for (i, e) in embeddings.iter().enumerate() {
            if e.dim() != dim {
                return Err(GlapError::Shape(format!(
                    "embedding {i} has dimension {}, expected {dim}",
                    e.dim()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(GlapError::InvalidInput(format!(
                    "duplicate id {id:?} in batch"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for e in embeddings {
            data.extend_from_slice(e.values());
        }
        Ok(Self { dim, ids, data })
    }

    pub fn from_matrix(ids: Vec<String>, matrix: &Matrix<f32>) -> Result<Self> {
        let embeddings: Vec<Embedding> = (0..matrix.rows())
            .map(|i| Embedding::new(matrix.row(i).to_vec()))
            .collect::<Result<_>>()?;
        Self::from_embeddings(ids, &embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Pairwise cosine scores between two batches. Produced by
/// [`cosine_similarity_matrix`]; entries land in `[-1 - 1e-5, 1 + 1e-5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Matrix<f32>,
}

impl SimilarityMatrix {
    /// Wraps raw scores, checking finiteness only. Range is guaranteed for
    /// matrices built by [`cosine_similarity_matrix`]; synthetic score
    /// grids (for loss probes and metric tests) may use any finite values.
    pub fn from_scores(scores: Matrix<f32>) -> Result<Self> {
        for i in 0..scores.rows() {
            for j in 0..scores.cols() {
                if !scores.get(i, j).is_finite() {
                    return Err(GlapError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self { scores })
    }

    pub fn rows(&self) -> usize {
        self.scores.rows()
    }

    pub fn cols(&self) -> usize {
        self.scores.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.scores.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.scores.row(i)
    }

    pub fn matrix(&self) -> &Matrix<f32> {
        &self.scores
    }

    /// Transposed copy (swaps query and gallery roles).
    pub fn transposed(&self) -> SimilarityMatrix {
        let mut out = Matrix::zeros(self.cols(), self.rows());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.set(j, i, self.get(i, j));
            }
        }
        SimilarityMatrix { scores: out }
    }
}

/// `scores[i][j] = (a_i . t_j) / (|a_i| |t_j|)` with dot products and norms
/// accumulated in f64. Rows of the output are computed independently, so
/// the result is identical for any thread count.
pub fn cosine_similarity_matrix(
    a: &EmbeddingBatch,
    t: &EmbeddingBatch,
) -> Result<SimilarityMatrix> {
    if a.dim() != t.dim() {
        return Err(GlapError::Shape(format!(
            "cosine similarity needs equal dimensions, got {} and {}",
            a.dim(),
            t.dim()
        )));
    }
    let dim = a.dim();
    let a_norms: Vec<f64> = (0..a.len()).map(|i| l2_norm_f64(a.row(i))).collect();
    let t_norms: Vec<f64> = (0..t.len()).map(|j| l2_norm_f64(t.row(j))).collect();

    let rows = a.len();
    let cols = t.len();
    let mut data = vec![0.0f32; rows * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
        let ai = a.row(i);
        let an = a_norms[i].max(NORM_FLOOR);
        for (j, slot) in out.iter_mut().enumerate() {
            let tj = t.row(j);
            let mut dot = 0.0f64;
            for k in 0..dim {
                dot += ai[k] as f64 * tj[k] as f64;
            }
            *slot = (dot / (an * t_norms[j].max(NORM_FLOOR))) as f32;
        }
    });

    let scores = Matrix::from_vec(rows, cols, data)?;
    SimilarityMatrix::from_scores(scores)
}

/// The pairwise sign pattern: +1 on the diagonal (matched pairs), -1 off
/// it. Stored implicitly by size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignMatrix {
    size: usize,
}

impl SignMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.size && j < self.size);
        if i == j {
            1.0
        } else {
            -1.0
        }
    }
}

pub fn sign_matrix(b: usize) -> Result<SignMatrix> {
    if b == 0 {
        return Err(GlapError::InvalidInput(
            "sign matrix needs a positive batch size".into(),
        ));
    }
    Ok(SignMatrix { size: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: &[Vec<f32>]) -> EmbeddingBatch {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        let embeddings: Vec<Embedding> =
            rows.iter().map(|r| Embedding::new(r.clone()).unwrap()).collect();
        EmbeddingBatch::from_embeddings(ids, &embeddings).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let e = Embedding::new(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&e).unwrap();
        assert!((n.values()[0] - 0.6).abs() < 1e-7);
        assert!((n.values()[1] - 0.8).abs() < 1e-7);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalize_already_unit() {
        let e = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        let n = l2_normalize(&e).unwrap();
        assert_eq!(n.values(), &[1.0, 0.0, 0.0]);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalize_zero_vector_stays_zero() {
        let e = Embedding::new(vec![0.0, 0.0, 0.0]).unwrap();
        let n = l2_normalize(&e).unwrap();
        assert_eq!(n.values(), &[0.0, 0.0, 0.0]);
        assert!(!n.is_normalized());
    }

    #[test]
    fn non_finite_embedding_rejected() {
        assert!(Embedding::new(vec![1.0, f32::NAN]).is_err());
        assert!(Embedding::new(vec![f32::INFINITY]).is_err());
        assert!(Embedding::new(vec![]).is_err());
    }

    #[test]
    fn cosine_identity_rows() {
        let a = batch(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let s = cosine_similarity_matrix(&a, &a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((s.get(i, j) - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn cosine_analytic_entry() {
        let a = batch(&[vec![1.0, 1.0]]);
        let t = batch(&[vec![1.0, 0.0]]);
        let s = cosine_similarity_matrix(&a, &t).unwrap();
        assert!((s.get(0, 0) as f64 - 1.0 / 2.0f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn cosine_matches_scalar_loop_oracle() {
        // Independent per-entry dot/norm loop on a seeded 4x8 pair.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f32>> {
            (0..4)
                .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let ra = mk(&mut rng);
        let rt = mk(&mut rng);
        let s = cosine_similarity_matrix(&batch(&ra), &batch(&rt)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nt = 0.0f64;
                for k in 0..8 {
                    dot += ra[i][k] as f64 * rt[j][k] as f64;
                    na += (ra[i][k] as f64).powi(2);
                    nt += (rt[j][k] as f64).powi(2);
                }
                let expected = dot / (na.sqrt() * nt.sqrt());
                assert!(
                    (s.get(i, j) as f64 - expected).abs() < 1e-6,
                    "entry ({i},{j}): {} vs oracle {expected}",
                    s.get(i, j)
                );
            }
        }
    }

    #[test]
    fn cosine_dim_mismatch_is_shape_error() {
        let a = batch(&[vec![1.0, 0.0]]);
        let t = batch(&[vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            cosine_similarity_matrix(&a, &t),
            Err(GlapError::Shape(_))
        ));
    }

    #[test]
    fn sign_matrix_small_cases() {
        let s1 = sign_matrix(1).unwrap();
        assert_eq!(s1.entry(0, 0), 1.0);

        let s2 = sign_matrix(2).unwrap();
        assert_eq!(s2.entry(0, 0), 1.0);
        assert_eq!(s2.entry(0, 1), -1.0);
        assert_eq!(s2.entry(1, 0), -1.0);
        assert_eq!(s2.entry(1, 1), 1.0);

        let s3 = sign_matrix(3).unwrap();
        for i in 0..3 {
            let row_sum: f64 = (0..3).map(|j| s3.entry(i, j)).sum();
            assert_eq!(row_sum, -1.0);
        }

        assert!(sign_matrix(0).is_err());
    }

    #[test]
    fn sign_matrix_symmetric_with_trace_b() {
        for b in 1..=8 {
            let s = sign_matrix(b).unwrap();
            let trace: f64 = (0..b).map(|i| s.entry(i, i)).sum();
            assert_eq!(trace, b as f64);
            for i in 0..b {
                for j in 0..b {
                    assert_eq!(s.entry(i, j), s.entry(j, i));
                }
            }
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = Embedding::new(vec![1.0]).unwrap();
        let err = EmbeddingBatch::from_embeddings(
            vec!["a".into(), "a".into()],
            &[e.clone(), e],
        );
        assert!(err.is_err());
    }

    proptest! {
        #[test]
        fn cosine_self_similarity_has_unit_diagonal(
            rows in proptest::collection::vec(
                proptest::collection::vec(-10.0f32..10.0, 4),
                1..6
            )
        ) {
            // Keep rows away from zero so the diagonal is well defined.
            let rows: Vec<Vec<f32>> = rows
                .into_iter()
                .map(|mut r| {
                    if r.iter().map(|v| v.abs()).sum::<f32>() < 1e-3 {
                        r[0] = 1.0;
                    }
                    r
                })
                .collect();
            let b = batch(&rows);
            let s = cosine_similarity_matrix(&b, &b).unwrap();
            for i in 0..b.len() {
                prop_assert!((s.get(i, i) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_invariant_to_positive_row_scaling(
            rows in proptest::collection::vec(
                proptest::collection::vec(-5.0f32..5.0, 3),
                2..5
            ),
            scales in proptest::collection::vec(0.1f32..10.0, 8)
        ) {
            let rows: Vec<Vec<f32>> = rows
                .into_iter()
                .map(|mut r| {
                    if r.iter().map(|v| v.abs()).sum::<f32>() < 1e-3 {
                        r[0] = 1.0;
                    }
                    r
                })
                .collect();
            let scaled: Vec<Vec<f32>> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().map(|&v| v * scales[i % scales.len()]).collect())
                .collect();
            let s0 = cosine_similarity_matrix(&batch(&rows), &batch(&rows)).unwrap();
            let s1 = cosine_similarity_matrix(&batch(&scaled), &batch(&rows)).unwrap();
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    prop_assert!((s0.get(i, j) - s1.get(i, j)).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn cosine_transpose_symmetry(
            a in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 2..5),
            t in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 2..5),
        ) {
            let s_at = cosine_similarity_matrix(&batch(&a), &batch(&t)).unwrap();
            let s_ta = cosine_similarity_matrix(&batch(&t), &batch(&a)).unwrap();
            for i in 0..a.len() {
                for j in 0..t.len() {
                    prop_assert!((s_at.get(i, j) - s_ta.get(j, i)).abs() < 1e-6);
                }
            }
        }
    }
}
