//! Unit-norm embedding storage with exhaustive and approximate
//! max-similarity queries.
//!
//! Everything here is generic over the [`Scalar`] component type; the crate
//! root exports `f32`/`f64` aliases. The exhaustive path is the reference
//! every approximate answer is measured against.

mod hnsw;
pub mod io;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use hnsw::HnswParams;
use hnsw::HnswGraph;

/// Tolerance on `‖v‖₂ = 1`.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Component type of embedding vectors.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Send + Sync + Debug + Display + Default + 'static
{
    /// Dot product. The default keeps eight independent partial sums.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        let mut acc = [Self::zero(); 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
            for l in 0..8 {
                acc[l] = acc[l] + x[l] * y[l];
            }
        }
        let mut tail = Self::zero();
        for i in chunks * 8..a.len() {
            tail = tail + a[i] * b[i];
        }
        ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
    }

    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite cast")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Scalar for f64 {}

impl Scalar for f32 {
    /// Accumulates in `f64` lanes so large dimensions stay within tolerance.
    fn dot(a: &[f32], b: &[f32]) -> f32 {
        let mut acc = [0f64; 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
            for l in 0..8 {
                acc[l] += x[l] as f64 * y[l] as f64;
            }
        }
        let mut tail = 0f64;
        for i in chunks * 8..a.len() {
            tail += a[i] as f64 * b[i] as f64;
        }
        (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail)
            as f32
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("cannot build an index from zero vectors")]
    Empty,
    #[error("duplicate vector id `{0}`")]
    DuplicateId(String),
    #[error("vector `{id}` has norm {norm}, expected 1")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("vector `{0}` has a non-finite component")]
    NonFinite(String),
    #[error("vector `{0}` has zero norm")]
    ZeroNorm(String),
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    id: String,
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Accepts values that are already unit norm within [`NORM_TOLERANCE`].
    pub fn new(id: impl Into<String>, values: Vec<T>) -> Result<Self, IndexError> {
        let id = id.into();
        let norm = l2_norm(&values).ok_or_else(|| IndexError::NonFinite(id.clone()))?;
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NotUnitNorm { id, norm });
        }
        Ok(Self { id, values })
    }

    /// Scales `values` to unit norm.
    pub fn normalized(id: impl Into<String>, values: Vec<T>) -> Result<Self, IndexError> {
        let id = id.into();
        let norm = l2_norm(&values).ok_or_else(|| IndexError::NonFinite(id.clone()))?;
        if norm == 0.0 {
            return Err(IndexError::ZeroNorm(id));
        }
        let mut values: Vec<T> = values
            .into_iter()
            .map(|v| T::from_f64_lossy(v.to_f64_lossy() / norm))
            .collect();
        // One refinement pass absorbs rounding of low-precision scalars.
        let again = l2_norm(&values).expect("finite");
        if (again - 1.0).abs() > NORM_TOLERANCE / 4.0 {
            for v in &mut values {
                *v = T::from_f64_lossy(v.to_f64_lossy() / again);
            }
        }
        Ok(Self { id, values })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn l2_norm<T: Scalar>(values: &[T]) -> Option<f64> {
    let mut sum = 0f64;
    for v in values {
        let v = v.to_f64_lossy();
        if !v.is_finite() {
            return None;
        }
        sum += v * v;
    }
    Some(sum.sqrt())
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(clamp_unit(T::dot(&a.values, &b.values)))
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(-T::one()).min(T::one())
}

/// How a raw cosine is turned into the score compared against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityScale {
    #[default]
    RawCosine,
    /// `2.5 · max(cos, 0)`.
    ClipScore,
}

impl SimilarityScale {
    pub fn apply<T: Scalar>(self, cos: T) -> T {
        match self {
            SimilarityScale::RawCosine => cos,
            SimilarityScale::ClipScore => T::from_f64_lossy(2.5) * cos.max(T::zero()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IndexMode {
    Exhaustive,
    Approximate(HnswParams),
}

/// One query answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit<T> {
    pub id: String,
    pub position: usize,
    pub score: T,
}

/// Immutable vector store.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex<T> {
    dim: usize,
    ids: Vec<String>,
    data: Vec<T>,
    mode: IndexMode,
    graph: Option<HnswGraph>,
}

impl<T: Scalar> EmbeddingIndex<T> {
    pub fn build(vectors: Vec<EmbeddingVector<T>>, mode: IndexMode) -> Result<Self, IndexError> {
        let dim = vectors.first().ok_or(IndexError::Empty)?.dim();
        let mut seen = std::collections::HashSet::with_capacity(vectors.len());
        let mut ids = Vec::with_capacity(vectors.len());
        let mut data = Vec::with_capacity(vectors.len() * dim);
        for v in vectors {
            if v.dim() != dim {
                return Err(IndexError::DimMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            if !seen.insert(v.id.clone()) {
                return Err(IndexError::DuplicateId(v.id));
            }
            data.extend_from_slice(&v.values);
            ids.push(v.id);
        }
        let mut idx = Self {
            dim,
            ids,
            data,
            mode: mode.clone(),
            graph: None,
        };
        if let IndexMode::Approximate(params) = mode {
            idx.graph = Some(HnswGraph::build(&idx, &params));
        }
        Ok(idx)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mode(&self) -> &IndexMode {
        &self.mode
    }

    /// Parameters of the approximate graph, if any.
    pub fn build_params(&self) -> Option<&HnswParams> {
        match &self.mode {
            IndexMode::Approximate(p) => Some(p),
            IndexMode::Exhaustive => None,
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, position: usize) -> &[T] {
        &self.data[position * self.dim..(position + 1) * self.dim]
    }

    pub fn get(&self, position: usize) -> EmbeddingVector<T> {
        EmbeddingVector {
            id: self.ids[position].clone(),
            values: self.vector(position).to_vec(),
        }
    }

    fn sim(&self, q: &[T], position: usize) -> T {
        clamp_unit(T::dot(q, self.vector(position)))
    }

    fn check_dim(&self, q: &EmbeddingVector<T>) -> Result<(), IndexError> {
        if q.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: q.dim(),
            });
        }
        Ok(())
    }

    fn hit(&self, position: usize, score: T) -> Hit<T> {
        Hit {
            id: self.ids[position].clone(),
            position,
            score,
        }
    }

    /// Best match according to the index mode.
    pub fn max_similarity(&self, q: &EmbeddingVector<T>) -> Result<Hit<T>, IndexError> {
        Ok(self
            .top_k(q, 1)?
            .into_iter()
            .next()
            .expect("index is never empty"))
    }

    /// Up to `k` best matches, descending score, ties broken by position.
    pub fn top_k(&self, q: &EmbeddingVector<T>, k: usize) -> Result<Vec<Hit<T>>, IndexError> {
        self.check_dim(q)?;
        match &self.graph {
            None => Ok(self.scan_top_k(&q.values, k)),
            Some(g) => Ok(g
                .search(self, &q.values, k)
                .into_iter()
                .map(|(pos, s)| self.hit(pos, s))
                .collect()),
        }
    }

    /// Exhaustive answer regardless of mode; the calibration reference.
    pub fn exhaustive_max(&self, q: &EmbeddingVector<T>) -> Result<Hit<T>, IndexError> {
        self.check_dim(q)?;
        Ok(self.scan_top_k(&q.values, 1).remove(0))
    }

    fn scan_top_k(&self, q: &[T], k: usize) -> Vec<Hit<T>> {
        let k = k.max(1).min(self.len());
        let mut best: Vec<(usize, T)> = Vec::with_capacity(k + 1);
        for pos in 0..self.len() {
            let s = self.sim(q, pos);
            if best.len() == k && s <= best[k - 1].1 {
                continue;
            }
            let at = best.partition_point(|&(_, b)| b >= s);
            best.insert(at, (pos, s));
            best.truncate(k);
        }
        best.into_iter().map(|(p, s)| self.hit(p, s)).collect()
    }

    /// Batched queries; identical to issuing them one at a time.
    pub fn max_similarity_batch(&self, qs: &[EmbeddingVector<T>]) -> Result<Vec<Hit<T>>, IndexError> {
        qs.par_iter().map(|q| self.max_similarity(q)).collect()
    }

    pub(crate) fn graph(&self) -> Option<&HnswGraph> {
        self.graph.as_ref()
    }

    pub(crate) fn from_parts(
        dim: usize,
        ids: Vec<String>,
        data: Vec<T>,
        mode: IndexMode,
        graph: Option<HnswGraph>,
    ) -> Self {
        Self {
            dim,
            ids,
            data,
            mode,
            graph,
        }
    }
}

/// Free-function form of [`EmbeddingIndex::max_similarity`].
pub fn max_similarity<T: Scalar>(
    q: &EmbeddingVector<T>,
    idx: &EmbeddingIndex<T>,
) -> Result<(String, T), IndexError> {
    idx.max_similarity(q).map(|h| (h.id, h.score))
}

/// Fraction of queries whose approximate best id equals the exhaustive best id.
pub fn recall_at_1<T: Scalar>(idx: &EmbeddingIndex<T>, queries: &[EmbeddingVector<T>]) -> Result<f64, IndexError> {
    let hits: Vec<bool> = queries
        .par_iter()
        .map(|q| {
            let approx = idx.max_similarity(q)?;
            let exact = idx.exhaustive_max(q)?;
            Ok(approx.position == exact.position || approx.score == exact.score)
        })
        .collect::<Result<_, IndexError>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / queries.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(id: &str, dim: usize, axis: usize) -> EmbeddingVector<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        EmbeddingVector::new(id, v).unwrap()
    }

    fn random_unit<T: Scalar>(rng: &mut ChaCha8Rng, id: String, dim: usize) -> EmbeddingVector<T> {
        let v: Vec<T> = (0..dim)
            .map(|_| T::from_f64_lossy(rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        EmbeddingVector::normalized(id, v).unwrap()
    }

    /// Compensated (Neumaier) dot over f64 images of the components.
    fn oracle_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
        let (mut sum, mut comp) = (0f64, 0f64);
        for (x, y) in a.iter().zip(b) {
            let p = x.to_f64_lossy() * y.to_f64_lossy();
            let t = sum + p;
            if sum.abs() >= p.abs() {
                comp += (sum - t) + p;
            } else {
                comp += (p - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let e1 = basis("a", 4, 0);
        let e2 = basis("b", 4, 1);
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        let short = basis("c", 3, 0);
        assert!(matches!(cosine(&e1, &short), Err(IndexError::DimMismatch { .. })));
    }

    #[test]
    fn cosine_matches_extended_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..200 {
            let dim = [3, 64, 512, 1000][i % 4];
            let a: EmbeddingVector<f32> = random_unit(&mut rng, "a".into(), dim);
            let b: EmbeddingVector<f32> = random_unit(&mut rng, "b".into(), dim);
            let got = cosine(&a, &b).unwrap() as f64;
            assert!((got - oracle_dot(a.values(), b.values())).abs() <= 1e-6);
            let sym = cosine(&b, &a).unwrap() as f64;
            assert_eq!(got, sym);
            assert!((cosine(&a, &a).unwrap() as f64 - 1.0).abs() <= 1e-6);

            let a: EmbeddingVector<f64> = random_unit(&mut rng, "a".into(), dim);
            let b: EmbeddingVector<f64> = random_unit(&mut rng, "b".into(), dim);
            assert!((cosine(&a, &b).unwrap() - oracle_dot(a.values(), b.values())).abs() <= 1e-6);
        }
    }

    #[test]
    fn vector_invariants() {
        assert!(matches!(
            EmbeddingVector::new("x", vec![0.5f64, 0.5]),
            Err(IndexError::NotUnitNorm { .. })
        ));
        assert!(matches!(
            EmbeddingVector::normalized("x", vec![0f32, 0.0]),
            Err(IndexError::ZeroNorm(_))
        ));
        assert!(matches!(
            EmbeddingVector::normalized("x", vec![f32::NAN, 1.0]),
            Err(IndexError::NonFinite(_))
        ));
        let v = EmbeddingVector::normalized("x", vec![0.97f32, 0.0]).unwrap();
        assert!((l2_norm(v.values()).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn build_errors_and_counts() {
        assert_eq!(
            EmbeddingIndex::<f64>::build(vec![], IndexMode::Exhaustive).unwrap_err(),
            IndexError::Empty
        );
        let idx = EmbeddingIndex::build(vec![basis("a", 3, 0)], IndexMode::Exhaustive).unwrap();
        assert_eq!(idx.len(), 1);
        let dup = EmbeddingIndex::build(vec![basis("a", 3, 0), basis("a", 3, 1)], IndexMode::Exhaustive);
        assert_eq!(dup.unwrap_err(), IndexError::DuplicateId("a".into()));
        let mixed = EmbeddingIndex::build(vec![basis("a", 3, 0), basis("b", 4, 1)], IndexMode::Exhaustive);
        assert!(matches!(mixed, Err(IndexError::DimMismatch { .. })));
    }

    #[test]
    fn ten_thousand_vectors_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vs: Vec<EmbeddingVector<f32>> =
            (0..10_000).map(|i| random_unit(&mut rng, format!("v{i}"), 512)).collect();
        let idx = EmbeddingIndex::build(vs, IndexMode::Exhaustive).unwrap();
        assert_eq!(idx.len(), 10_000);
        assert_eq!(idx.dim(), 512);
    }

    #[test]
    fn query_equal_to_stored_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<EmbeddingVector<f64>> =
            (0..100).map(|i| random_unit(&mut rng, format!("v{i}"), 16)).collect();
        let q = vs[37].clone();
        let idx = EmbeddingIndex::build(vs, IndexMode::Exhaustive).unwrap();
        let (id, score) = max_similarity(&q, &idx).unwrap();
        assert_eq!(id, "v37");
        assert!((score - 1.0).abs() < 1e-12);
    }

    /// 999 mutually orthogonal decoys orthogonal to q, plus one planted
    /// vector at cosine 0.95, built by Gram-Schmidt on the standard basis.
    #[test]
    fn planted_vector_is_found() {
        let dim = 1001;
        let q = basis("q", dim, 0);
        let mut vs: Vec<EmbeddingVector<f64>> = (1..1000).map(|a| basis(&format!("d{a}"), dim, a)).collect();
        let mut planted = vec![0.0; dim];
        planted[0] = 0.95;
        planted[1000] = (1.0f64 - 0.95 * 0.95).sqrt();
        vs.push(EmbeddingVector::new("planted", planted).unwrap());
        for v in &vs[..999] {
            assert_eq!(cosine(&q, v).unwrap(), 0.0);
        }
        let idx = EmbeddingIndex::build(vs, IndexMode::Exhaustive).unwrap();
        let (id, score) = max_similarity(&q, &idx).unwrap();
        assert_eq!(id, "planted");
        assert!((score - 0.95).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vs: Vec<EmbeddingVector<f32>> =
            (0..500).map(|i| random_unit(&mut rng, format!("v{i}"), 24)).collect();
        let idx = EmbeddingIndex::build(vs.clone(), IndexMode::Exhaustive).unwrap();
        for j in 0..100 {
            let q: EmbeddingVector<f32> = random_unit(&mut rng, format!("q{j}"), 24);
            let mut best = (0usize, f32::NEG_INFINITY);
            for (i, v) in vs.iter().enumerate() {
                let s = cosine(&q, v).unwrap();
                if s > best.1 {
                    best = (i, s);
                }
            }
            let hit = idx.max_similarity(&q).unwrap();
            assert_eq!(hit.position, best.0);
            assert_eq!(hit.score, best.1);
        }
    }

    #[test]
    fn batch_equals_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<EmbeddingVector<f32>> =
            (0..300).map(|i| random_unit(&mut rng, format!("v{i}"), 32)).collect();
        let qs: Vec<EmbeddingVector<f32>> =
            (0..50).map(|i| random_unit(&mut rng, format!("q{i}"), 32)).collect();
        for mode in [IndexMode::Exhaustive, IndexMode::Approximate(HnswParams::default())] {
            let idx = EmbeddingIndex::build(vs.clone(), mode).unwrap();
            let batch = idx.max_similarity_batch(&qs).unwrap();
            let single: Vec<_> = qs.iter().map(|q| idx.max_similarity(q).unwrap()).collect();
            assert_eq!(batch, single);
        }
    }

    #[test]
    fn top_k_is_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vs: Vec<EmbeddingVector<f64>> =
            (0..200).map(|i| random_unit(&mut rng, format!("v{i}"), 8)).collect();
        let idx = EmbeddingIndex::build(vs, IndexMode::Exhaustive).unwrap();
        let q: EmbeddingVector<f64> = random_unit(&mut rng, "q".into(), 8);
        let top = idx.top_k(&q, 5).unwrap();
        assert_eq!(top.len(), 5);
        assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(top[0], idx.exhaustive_max(&q).unwrap());
    }

    #[test]
    fn clip_scale() {
        assert_eq!(SimilarityScale::ClipScore.apply(-0.3f64), 0.0);
        assert_eq!(SimilarityScale::ClipScore.apply(0.4f64), 1.0);
        assert_eq!(SimilarityScale::RawCosine.apply(0.4f64), 0.4);
    }
}
