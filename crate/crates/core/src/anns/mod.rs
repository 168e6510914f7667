//! Inner-product top-k retrieval over classifier vectors.
//!
//! Two index kinds share one query interface: an exact full scan and a
//! layered navigable graph searched greedily with a beam. Ties are always
//! broken towards the lower id. An index owns a copy of the vectors it was
//! built from, stamped with the epoch of that snapshot.

mod cache;
mod graph;
mod refresh;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::ScoredLabels;
use crate::linalg::{dot, matmul, DenseMatrix};
use crate::{Error, Result};

pub use cache::NegativeCache;
pub use graph::Graph;
pub use refresh::{
    expected_snapshot_epoch, plan_refresh, RefreshJob, RefreshOutcome, RefreshSchedule, RefreshWorker, Stage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexKind {
    Exact,
    ApproxGraph,
    /// A graph when a search would touch fewer vectors than the index holds,
    /// otherwise a scan, which is then no slower and exact.
    Auto,
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::ApproxGraph => "approx-graph",
            Self::Auto => "auto",
        })
    }
}

impl FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "approx" | "approx-graph" | "approx_graph" | "graph" => Ok(Self::ApproxGraph),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::invalid(format!("unknown index kind '{s}'"))),
        }
    }
}

/// Graph construction and search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    pub max_degree: usize,
    pub build_beam: usize,
    pub query_beam: usize,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            max_degree: 32,
            build_beam: 128,
            query_beam: 256,
            seed: 0,
        }
    }
}

impl IndexParams {
    /// Vectors a graph search examines at most: one neighbour list per beam slot.
    pub fn search_cost(&self) -> usize {
        self.query_beam.saturating_mul(self.max_degree)
    }

    /// The concrete kind built for `n` vectors.
    pub fn resolve(&self, kind: IndexKind, n: usize) -> IndexKind {
        match kind {
            IndexKind::Auto if self.search_cost() >= n => IndexKind::Exact,
            IndexKind::Auto => IndexKind::ApproxGraph,
            k => k,
        }
    }
}

/// A scored candidate. `Ord` puts the better candidate last: higher score,
/// then lower id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cand {
    pub score: f32,
    pub id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sorts best first.
pub(crate) fn sort_best_first(c: &mut [Cand]) {
    c.sort_unstable_by(|a, b| b.cmp(a));
}

fn top_cands(mut all: Vec<Cand>, k: usize) -> Vec<Cand> {
    if k < all.len() {
        all.select_nth_unstable_by(k, |a, b| b.cmp(a));
        all.truncate(k);
    }
    sort_best_first(&mut all);
    all
}

#[derive(Debug, Clone)]
pub struct AnnsIndex {
    kind: IndexKind,
    vectors: DenseMatrix<f32>,
    graph: Option<Graph>,
    snapshot_epoch: u32,
}

impl AnnsIndex {
    fn check_vectors(vectors: &DenseMatrix<f32>) -> Result<()> {
        if vectors.rows() == 0 {
            return Err(Error::invalid("index needs at least one vector"));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("index vectors".into()));
        }
        Ok(())
    }

    pub fn build_exact(vectors: DenseMatrix<f32>) -> Result<Self> {
        Self::check_vectors(&vectors)?;
        Ok(Self {
            kind: IndexKind::Exact,
            vectors,
            graph: None,
            snapshot_epoch: 0,
        })
    }

    pub fn build_approx(vectors: DenseMatrix<f32>, max_degree: usize, build_beam: usize, seed: u64) -> Result<Self> {
        Self::check_vectors(&vectors)?;
        if max_degree < 2 {
            return Err(Error::invalid("max_degree must be at least 2"));
        }
        if build_beam == 0 {
            return Err(Error::invalid("build_beam must be positive"));
        }
        let graph = Graph::build(&vectors, max_degree, build_beam, seed);
        Ok(Self {
            kind: IndexKind::ApproxGraph,
            vectors,
            graph: Some(graph),
            snapshot_epoch: 0,
        })
    }

    pub fn build(kind: IndexKind, vectors: DenseMatrix<f32>, params: &IndexParams) -> Result<Self> {
        match kind {
            IndexKind::Exact => Self::build_exact(vectors),
            IndexKind::ApproxGraph => Self::build_approx(vectors, params.max_degree, params.build_beam, params.seed),
            IndexKind::Auto => Self::build(params.resolve(IndexKind::Auto, vectors.rows()), vectors, params),
        }
    }

    pub fn with_snapshot_epoch(mut self, epoch: u32) -> Self {
        self.snapshot_epoch = epoch;
        self
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn snapshot_epoch(&self) -> u32 {
        self.snapshot_epoch
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &DenseMatrix<f32> {
        &self.vectors
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_ref()
    }

    fn exact_topk(&self, query: &[f32], k: usize) -> Vec<Cand> {
        let all: Vec<Cand> = (0..self.len())
            .map(|i| Cand {
                score: dot(self.vectors.row(i), query),
                id: i as u32,
            })
            .collect();
        top_cands(all, k)
    }

    /// `query_topk` for every row of `queries`. A scan index scores blocks of
    /// queries with one matrix product.
    pub fn query_topk_batch(
        &self,
        queries: &DenseMatrix<f32>,
        k: usize,
        query_beam: usize,
    ) -> Result<Vec<ScoredLabels>> {
        if self.graph.is_some() || queries.rows() <= 1 {
            return (0..queries.rows())
                .into_par_iter()
                .map(|q| self.query_topk(queries.row(q), k, query_beam))
                .collect();
        }
        if queries.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "queries of length {} for index dimension {}",
                queries.cols(),
                self.dim()
            )));
        }
        if k > self.len() {
            return Err(Error::invalid(format!("k = {k} exceeds index size {}", self.len())));
        }
        if !queries.is_finite() {
            return Err(Error::NonFinite("query".into()));
        }
        const BLOCK: usize = 64;
        let mut out = Vec::with_capacity(queries.rows());
        for start in (0..queries.rows()).step_by(BLOCK) {
            let rows = BLOCK.min(queries.rows() - start);
            let block = DenseMatrix::from_vec(
                rows,
                queries.cols(),
                queries.as_slice()[start * queries.cols()..(start + rows) * queries.cols()].to_vec(),
            )?;
            let scores = matmul(&block, false, &self.vectors, true)?;
            let found: Vec<ScoredLabels> = (0..rows)
                .into_par_iter()
                .map(|r| {
                    let all = scores
                        .row(r)
                        .iter()
                        .enumerate()
                        .map(|(i, &score)| Cand { score, id: i as u32 });
                    let best = top_cands(all.collect(), k);
                    ScoredLabels {
                        label_ids: best.iter().map(|c| c.id).collect(),
                        scores: best.iter().map(|c| c.score).collect(),
                    }
                })
                .collect();
            out.extend(found);
        }
        Ok(out)
    }

    /// The `k` best ids by inner product, best first. Graph search falls back
    /// to a scan of unvisited ids when the beam reaches fewer than `k` nodes.
    pub fn query_topk(&self, query: &[f32], k: usize, query_beam: usize) -> Result<ScoredLabels> {
        if query.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "query of length {} for index dimension {}",
                query.len(),
                self.dim()
            )));
        }
        if k > self.len() {
            return Err(Error::invalid(format!("k = {k} exceeds index size {}", self.len())));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query".into()));
        }
        let found = match &self.graph {
            None => self.exact_topk(query, k),
            Some(g) => {
                let mut found = g.search(&self.vectors, query, query_beam.max(k));
                if found.len() < k {
                    let seen: std::collections::HashSet<u32> = found.iter().map(|c| c.id).collect();
                    found.extend((0..self.len() as u32).filter(|i| !seen.contains(i)).map(|i| Cand {
                        score: dot(self.vectors.row(i as usize), query),
                        id: i,
                    }));
                    sort_best_first(&mut found);
                }
                found.truncate(k);
                found
            }
        };
        Ok(ScoredLabels {
            label_ids: found.iter().map(|c| c.id).collect(),
            scores: found.iter().map(|c| c.score).collect(),
        })
    }
}

/// Mean over queries of `|approx ∩ exact| / k` for the top-`k` sets.
pub fn measure_recall(
    approx: &AnnsIndex,
    exact: &AnnsIndex,
    queries: &DenseMatrix<f32>,
    k: usize,
    query_beam: usize,
) -> Result<f64> {
    if approx.vectors.as_slice() != exact.vectors.as_slice() || approx.dim() != exact.dim() {
        return Err(Error::invalid("recall needs both indices built from the same snapshot"));
    }
    if k == 0 || queries.rows() == 0 {
        return Err(Error::invalid("recall needs k >= 1 and at least one query"));
    }
    let hits: Vec<usize> = (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let a = approx.query_topk(queries.row(q), k, query_beam)?;
            let e = exact.query_topk(queries.row(q), k, query_beam)?;
            let truth: std::collections::HashSet<u32> = e.label_ids.into_iter().collect();
            Ok(a.label_ids.iter().filter(|l| truth.contains(l)).count())
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / (k * queries.rows()) as f64)
}

/// Per row: the top `k_h + |positives|` ids with the row's positives removed,
/// truncated to `k_h`. The cache is stamped with the index snapshot epoch.
pub fn retrieve_hard_negatives(
    index: &AnnsIndex,
    embeddings: &DenseMatrix<f32>,
    positives: &[Vec<u32>],
    k_h: usize,
    query_beam: usize,
) -> Result<NegativeCache> {
    if embeddings.rows() != positives.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} positive sets",
            embeddings.rows(),
            positives.len()
        )));
    }
    let max_pos = positives.iter().map(Vec::len).max().unwrap_or(0);
    if k_h + max_pos > index.len() {
        return Err(Error::invalid(format!(
            "k_h {k_h} plus {max_pos} positives exceeds the {} indexed labels",
            index.len()
        )));
    }
    if k_h == 0 {
        return NegativeCache::from_rows(
            0,
            &vec![Vec::new(); embeddings.rows()],
            index.snapshot_epoch(),
            index.len(),
        );
    }
    let top = index.query_topk_batch(embeddings, k_h + max_pos, query_beam)?;
    let rows: Vec<Vec<u32>> = top
        .into_iter()
        .zip(positives)
        .map(|(t, pos)| t.label_ids.into_iter().filter(|l| !pos.contains(l)).take(k_h).collect())
        .collect();
    NegativeCache::from_rows(k_h, &rows, index.snapshot_epoch(), index.len())
}
