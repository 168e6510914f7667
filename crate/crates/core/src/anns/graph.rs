//! Layered navigable graph under the inner-product similarity.
//!
//! Nodes are inserted one at a time in id order. Each node draws a level
//! from a geometric distribution; on every layer up to that level it is
//! linked to the best candidates found by a beam search, and neighbor lists
//! that overflow are pruned back to the most similar entries.
//!
//! Node-to-node similarity during construction is the inner product of
//! norm-equalized vectors `(w, sqrt(M^2 - |w|^2))`, with `M` the largest
//! norm. A query `(q, 0)` scores every node exactly as `q . w`, so searches
//! rank by the plain inner product while the graph itself is built under a
//! proper metric.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;

use super::{sort_best_first, Cand};
use crate::linalg::{dot, DenseMatrix};
use crate::rng::{rng_for, stream};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    /// `layers[l][node]` are the out-neighbors of `node` on layer `l`.
    layers: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_degree: usize,
}

struct Visited {
    bits: Vec<u64>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            bits: vec![0; n.div_ceil(64)],
        }
    }

    /// Marks `id`; returns whether it was unmarked before.
    #[inline]
    fn insert(&mut self, id: u32) -> bool {
        let (w, b) = ((id / 64) as usize, id % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        self.bits[w] |= 1 << b;
        fresh
    }

    fn clear(&mut self) {
        self.bits.fill(0);
    }
}

/// Picks up to `cap` of `cands` (best first) for `base`: a candidate is kept
/// when it is more similar to `base` than to every candidate kept so far;
/// leftover slots are filled with the best rejected candidates.
fn select_diverse(sim: &impl Fn(usize, usize) -> f32, base: usize, cands: &[Cand], cap: usize) -> Vec<u32> {
    let mut kept: Vec<u32> = Vec::with_capacity(cap);
    let mut rejected: Vec<u32> = Vec::new();
    for c in cands {
        if c.id as usize == base {
            continue;
        }
        if kept.len() == cap {
            break;
        }
        let s = sim(base, c.id as usize);
        if kept.iter().all(|&k| sim(c.id as usize, k as usize) < s) {
            kept.push(c.id);
        } else {
            rejected.push(c.id);
        }
    }
    for r in rejected {
        if kept.len() == cap {
            break;
        }
        kept.push(r);
    }
    kept
}

impl Graph {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn neighbors(&self, layer: usize, node: u32) -> &[u32] {
        &self.layers[layer][node as usize]
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    fn layer_cap(&self, layer: usize) -> usize {
        if layer == 0 {
            self.max_degree
        } else {
            (self.max_degree / 2).max(1)
        }
    }

    pub(crate) fn build(vectors: &DenseMatrix<f32>, max_degree: usize, build_beam: usize, seed: u64) -> Self {
        let n = vectors.rows();
        let mut rng = rng_for(seed, &[stream::INDEX_BUILD]);
        let ml = 1.0 / ((max_degree / 2).max(2) as f64).ln();
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                ((-u.ln() * ml) as usize).min(MAX_LEVEL)
            })
            .collect();
        let top_level = levels.iter().copied().max().unwrap_or(0);
        let mut g = Graph {
            layers: vec![vec![Vec::new(); n]; top_level + 1],
            entry: 0,
            max_degree,
        };
        let sq: Vec<f32> = (0..n).map(|i| dot(vectors.row(i), vectors.row(i))).collect();
        let m2 = sq.iter().copied().fold(0.0f32, f32::max);
        let aux: Vec<f32> = sq.iter().map(|&s| (m2 - s).max(0.0).sqrt()).collect();
        let sim = |a: usize, b: usize| dot(vectors.row(a), vectors.row(b)) + aux[a] * aux[b];
        let mut visited = Visited::new(n);
        let mut top = levels[0];
        for i in 1..n {
            let score = |j: u32| sim(i, j as usize);
            let mut cur = Cand {
                score: score(g.entry),
                id: g.entry,
            };
            for layer in (levels[i] + 1..=top).rev() {
                cur = g.greedy(&score, cur, layer);
            }
            for layer in (0..=levels[i].min(top)).rev() {
                visited.clear();
                let found = g.search_layer(&score, cur, layer, build_beam, &mut visited);
                cur = found[0];
                let cap = g.layer_cap(layer);
                let picked = select_diverse(&sim, i, &found, cap);
                for &nb in &picked {
                    g.link(&sim, layer, nb, i as u32, cap);
                }
                g.layers[layer][i] = picked;
            }
            if levels[i] > top {
                top = levels[i];
                g.entry = i as u32;
            }
        }
        g.layers.truncate(top + 1);
        g
    }

    /// Adds `new` to the list of `node`, pruning by similarity to `node`.
    fn link(&mut self, sim: &impl Fn(usize, usize) -> f32, layer: usize, node: u32, new: u32, cap: usize) {
        let list = &mut self.layers[layer][node as usize];
        list.push(new);
        if list.len() > cap {
            let mut scored: Vec<Cand> = list
                .iter()
                .map(|&m| Cand {
                    score: sim(node as usize, m as usize),
                    id: m,
                })
                .collect();
            sort_best_first(&mut scored);
            *list = select_diverse(sim, node as usize, &scored, cap);
        }
    }

    fn greedy(&self, score: &impl Fn(u32) -> f32, mut cur: Cand, layer: usize) -> Cand {
        loop {
            let mut best = cur;
            for &nb in &self.layers[layer][cur.id as usize] {
                let c = Cand {
                    score: score(nb),
                    id: nb,
                };
                if c > best {
                    best = c;
                }
            }
            if best == cur {
                return cur;
            }
            cur = best;
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates best first.
    fn search_layer(
        &self,
        score: &impl Fn(u32) -> f32,
        start: Cand,
        layer: usize,
        ef: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        let mut frontier = BinaryHeap::from([start]);
        let mut results = BinaryHeap::from([Reverse(start)]);
        visited.insert(start.id);
        while let Some(c) = frontier.pop() {
            let worst = results.peek().map(|r| r.0).expect("results start non-empty");
            if results.len() >= ef && c < worst {
                break;
            }
            for &nb in &self.layers[layer][c.id as usize] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand {
                    score: score(nb),
                    id: nb,
                };
                let worst = results.peek().map(|r| r.0).expect("results start non-empty");
                if results.len() < ef || cand > worst {
                    frontier.push(cand);
                    results.push(Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = results.into_iter().map(|r| r.0).collect();
        sort_best_first(&mut out);
        out
    }

    pub(crate) fn search(&self, vectors: &DenseMatrix<f32>, q: &[f32], ef: usize) -> Vec<Cand> {
        let mut cur = Cand {
            score: dot(vectors.row(self.entry as usize), q),
            id: self.entry,
        };
        let score = |j: u32| dot(vectors.row(j as usize), q);
        for layer in (1..self.layers.len()).rev() {
            cur = self.greedy(&score, cur, layer);
        }
        let mut visited = Visited::new(vectors.rows());
        self.search_layer(&score, cur, 0, ef, &mut visited)
    }
}
