//! Hierarchical navigable small-world graph over an [`EmbeddingIndex`].
//!
//! Insertion is sequential in vector order and level draws come from a
//! seeded generator, so the graph is a pure function of
//! `(vectors, params)`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingIndex, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 keeps `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    /// Search breadth at query time.
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HnswGraph {
    pub(crate) entry: usize,
    pub(crate) max_level: usize,
    /// `links[node][layer]`
    pub(crate) links: Vec<Vec<Vec<u32>>>,
    pub(crate) ef_search: usize,
}

#[derive(Clone, Copy)]
struct Scored<T>(T, usize);

impl<T: Scalar> PartialEq for Scored<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Scored<T> {}
impl<T: Scalar> PartialOrd for Scored<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Scored<T> {
    /// Higher similarity is greater; lower position wins ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .partial_cmp(&other.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl HnswGraph {
    pub(crate) fn build<T: Scalar>(idx: &EmbeddingIndex<T>, p: &HnswParams) -> Self {
        let n = idx.len();
        let m = p.m.max(2);
        let level_mult = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut g = HnswGraph {
            entry: 0,
            max_level: 0,
            links: Vec::with_capacity(n),
            ef_search: p.ef_search.max(1),
        };
        for node in 0..n {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let level = (-u.ln() * level_mult).floor() as usize;
            g.links.push(vec![Vec::new(); level + 1]);
            if node == 0 {
                g.max_level = level;
                continue;
            }
            let q = idx.vector(node);
            let mut ep = vec![g.entry];
            for layer in (level + 1..=g.max_level).rev() {
                ep = vec![g.search_layer(idx, q, &ep, 1, layer)[0].1];
            }
            for layer in (0..=level.min(g.max_level)).rev() {
                let found = g.search_layer(idx, q, &ep, p.ef_construction.max(m), layer);
                let cap = if layer == 0 { 2 * m } else { m };
                let chosen = select_neighbors(idx, &found, m);
                g.links[node][layer] = chosen.iter().map(|&c| c as u32).collect();
                for &c in &chosen {
                    g.links[c][layer].push(node as u32);
                    if g.links[c][layer].len() > cap {
                        g.shrink(idx, c, layer, cap);
                    }
                }
                ep = found.iter().map(|s| s.1).collect();
            }
            if level > g.max_level {
                g.max_level = level;
                g.entry = node;
            }
        }
        g
    }

    fn shrink<T: Scalar>(&mut self, idx: &EmbeddingIndex<T>, node: usize, layer: usize, cap: usize) {
        let base = idx.vector(node);
        let mut cands: Vec<Scored<T>> = self.links[node][layer]
            .iter()
            .map(|&c| Scored(idx.sim(base, c as usize), c as usize))
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = select_neighbors(idx, &cands, cap);
        self.links[node][layer] = kept.into_iter().map(|c| c as u32).collect();
    }

    /// Beam search on one layer; returns up to `ef` nodes, best first.
    fn search_layer<T: Scalar>(
        &self,
        idx: &EmbeddingIndex<T>,
        q: &[T],
        entry: &[usize],
        ef: usize,
        layer: usize,
    ) -> Vec<Scored<T>> {
        let mut visited: HashSet<usize> = HashSet::with_capacity(ef * 8);
        let mut frontier: BinaryHeap<Scored<T>> = BinaryHeap::new();
        let mut best: BinaryHeap<std::cmp::Reverse<Scored<T>>> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e) {
                let s = Scored(idx.sim(q, e), e);
                frontier.push(s);
                best.push(std::cmp::Reverse(s));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(cur) = frontier.pop() {
            let worst = best.peek().expect("non-empty").0;
            if best.len() >= ef && cur < worst {
                break;
            }
            for &nb in &self.links[cur.1][layer] {
                let nb = nb as usize;
                if !visited.insert(nb) {
                    continue;
                }
                let s = Scored(idx.sim(q, nb), nb);
                let worst = best.peek().expect("non-empty").0;
                if best.len() < ef || s > worst {
                    frontier.push(s);
                    best.push(std::cmp::Reverse(s));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored<T>> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    pub(crate) fn search<T: Scalar>(&self, idx: &EmbeddingIndex<T>, q: &[T], k: usize) -> Vec<(usize, T)> {
        let mut ep = vec![self.entry];
        for layer in (1..=self.max_level).rev() {
            ep = vec![self.search_layer(idx, q, &ep, 1, layer)[0].1];
        }
        self.search_layer(idx, q, &ep, self.ef_search.max(k), 0)
            .into_iter()
            .take(k.max(1))
            .map(|s| (s.1, s.0))
            .collect()
    }
}

/// Diversity heuristic: keep a candidate only if it is closer to the base
/// than to every already kept neighbour; top up with the nearest leftovers.
fn select_neighbors<T: Scalar>(idx: &EmbeddingIndex<T>, sorted: &[Scored<T>], m: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    let mut skipped = Vec::new();
    for c in sorted {
        if kept.len() >= m {
            break;
        }
        let cv = idx.vector(c.1);
        if kept.iter().all(|&k| idx.sim(cv, k) < c.0) {
            kept.push(c.1);
        } else {
            skipped.push(c.1);
        }
    }
    for s in skipped {
        if kept.len() >= m {
            break;
        }
        kept.push(s);
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v = (0..dim).map(|_| rng.random::<f32>() - 0.5).collect();
                EmbeddingVector::normalized(format!("v{i}"), v).unwrap()
            })
            .collect()
    }

    #[test]
    fn build_is_deterministic() {
        let vs = corpus(400, 16, 1);
        let p = HnswParams {
            seed: 11,
            ..HnswParams::default()
        };
        let a = EmbeddingIndex::build(vs.clone(), IndexMode::Approximate(p.clone())).unwrap();
        let b = EmbeddingIndex::build(vs, IndexMode::Approximate(p.clone())).unwrap();
        assert_eq!(a.graph(), b.graph());
        assert_eq!(a.build_params(), Some(&p));
    }

    #[test]
    fn recall_on_small_corpus() {
        let vs = corpus(2000, 16, 2);
        let qs = corpus(300, 16, 3);
        let idx = EmbeddingIndex::build(vs, IndexMode::Approximate(HnswParams::default())).unwrap();
        let r = recall_at_1(&idx, &qs).unwrap();
        assert!(r >= 0.97, "recall {r}");
    }

    #[test]
    fn single_vector_graph() {
        let vs = corpus(1, 4, 7);
        let q = vs[0].clone();
        let idx = EmbeddingIndex::build(vs, IndexMode::Approximate(HnswParams::default())).unwrap();
        assert_eq!(idx.max_similarity(&q).unwrap().id, "v0");
    }
}
