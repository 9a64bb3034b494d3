//! Exact Euclidean k-nearest-neighbor search with a KD-tree.
//!
//! Results are ordered by distance, ties broken by the lower row index, so
//! the output is a pure function of the input matrix.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// KD-tree over the rows of a matrix.
#[derive(Debug, Clone)]
pub struct KdIndex {
    points: Array2<f64>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Squared Euclidean distance, accumulated in coordinate order.
pub fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn build_index(m: &EmbeddingMatrix) -> Result<KdIndex> {
    KdIndex::new(m.data().clone())
}

impl KdIndex {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptyMatrix);
        }
        let mut index = KdIndex {
            perm: (0..points.nrows()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.perm.len();
        index.build(0, n);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        // split along the widest coordinate
        let dims = self.points.ncols();
        let mut best = (0, f64::NEG_INFINITY);
        for d in 0..dims {
            let (lo, hi) = self.perm[start..end]
                .iter()
                .map(|&i| self.points[[i, d]])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let dim = best.0;
        if best.1 <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[[a, dim]].total_cmp(&points[[b, dim]])
        });
        let value = self.points[[self.perm[mid], dim]];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[slot] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        slot
    }

    /// Exact k nearest rows to an arbitrary query vector, skipping `exclude`.
    pub fn knn_point(&self, query: ArrayView1<'_, f64>, k: usize, exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.points.ncols() {
            return Err(Error::Shape(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.points.ncols()
            )));
        }
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available {
            return Err(Error::KTooLarge { k, available });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|c| (c.id, c.dist2.sqrt())).collect())
    }

    fn search(
        &self,
        node: usize,
        query: ArrayView1<'_, f64>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.perm[start..end] {
                    if Some(id) == exclude {
                        continue;
                    }
                    let cand = Candidate {
                        dist2: squared_distance(query, self.points.row(id)),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("k > 0") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, heap);
                // equal bounds may still hold a lower-index tie
                if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").dist2 {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}

/// The k nearest rows of the indexed matrix to row `query_id`.
pub fn knn(index: &KdIndex, query_id: usize, k: usize, exclude_self: bool) -> Result<Vec<(usize, f64)>> {
    if query_id >= index.len() {
        return Err(Error::IndexOutOfBounds {
            index: query_id,
            len: index.len(),
        });
    }
    index.knn_point(index.points.row(query_id), k, exclude_self.then_some(query_id))
}

/// k nearest neighbors of every row, self excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub neighbor_ids: Array2<usize>,
    pub distances: Array2<f64>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbor_ids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_ids.nrows() == 0
    }

    pub fn neighbors(&self, i: usize) -> ArrayView1<'_, usize> {
        self.neighbor_ids.row(i)
    }

    /// `id<TAB>neighbor_id<TAB>distance` rows, one per edge.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            for r in 0..self.k {
                let _ = writeln!(out, "{i}\t{}\t{}", self.neighbor_ids[[i, r]], self.distances[[i, r]]);
            }
        }
        out
    }
}

pub fn build_graph(index: &KdIndex, k: usize) -> Result<NeighborGraph> {
    let n = index.len();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| knn(index, i, k, true))
        .collect::<Result<_>>()?;
    let mut neighbor_ids = Array2::zeros((n, k));
    let mut distances = Array2::zeros((n, k));
    for (i, row) in rows.iter().enumerate() {
        for (r, &(id, d)) in row.iter().enumerate() {
            neighbor_ids[[i, r]] = id;
            distances[[i, r]] = d;
        }
    }
    Ok(NeighborGraph {
        k,
        neighbor_ids,
        distances,
    })
}
