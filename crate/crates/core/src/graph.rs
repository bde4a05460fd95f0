//! k-nearest-neighbor graphs and all-pairs geodesic distances.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Undirected weighted kNN graph, symmetrized by union.
///
/// Adjacency lists are sorted by neighbor index and each undirected edge is
/// stored once in each endpoint's list with the same weight.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
    k: usize,
}

impl NeighborGraph {
    /// Builds a graph from an explicit undirected edge list.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize, f64)], k: usize) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v, w) in edges {
            if u >= node_count || v >= node_count {
                return Err(Error::Index(format!("edge ({u}, {v}) with {node_count} nodes")));
            }
            if u == v {
                return Err(Error::Data(format!("self-loop at node {u}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Data(format!("edge ({u}, {v}) has weight {w}")));
            }
            insert_edge(&mut adjacency[u], v, w);
            insert_edge(&mut adjacency[v], u, w);
        }
        Ok(Self { adjacency, k })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.adjacency[u]
    }

    /// Every undirected edge once, as `(u, v, w)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, adj)| {
                adj.iter()
                    .filter(move |&&(v, _)| u < v)
                    .map(move |&(v, w)| (u, v, w))
            })
            .collect()
    }

    /// Writes the edge list as `u,v,w` lines.
    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(path)?);
            writeln!(out, "u,v,w")?;
            for (u, v, w) in self.edges() {
                writeln!(out, "{u},{v},{w:?}")?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

fn insert_edge(list: &mut Vec<(usize, f64)>, v: usize, w: f64) {
    match list.binary_search_by(|&(n, _)| n.cmp(&v)) {
        Ok(_) => {}
        Err(pos) => list.insert(pos, (v, w)),
    }
}

pub(crate) fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Connects each row to its `k` nearest rows (ties to the lower index),
/// then symmetrizes by union. Weights are Euclidean distances.
pub fn build_knn_graph(features: ArrayView2<f64>, k: usize) -> Result<NeighborGraph> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Param(format!("kNN graph needs at least 2 points, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Param(format!("k must be in 1..{n}, got {k}")));
    }

    let directed: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, euclidean(features.row(i), features.row(j))))
                .collect();
            cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            cand.truncate(k);
            cand
        })
        .collect();

    let mut adjacency = vec![Vec::new(); n];
    for (u, list) in directed.into_iter().enumerate() {
        for (v, w) in list {
            insert_edge(&mut adjacency[u], v, w);
            insert_edge(&mut adjacency[v], u, w);
        }
    }
    Ok(NeighborGraph { adjacency, k })
}

/// Component labels numbered in order of each component's smallest node.
pub fn connected_components(graph: &NeighborGraph) -> Vec<usize> {
    let n = graph.node_count();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in graph.neighbors(u) {
                if label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    label
}

/// Dense all-pairs shortest path lengths on a [`NeighborGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicMatrix {
    dist: Array2<f64>,
    component_id: Vec<usize>,
}

impl GeodesicMatrix {
    /// Wraps an arbitrary symmetric dissimilarity matrix with zero diagonal.
    /// Components are derived from which entries are finite.
    pub fn from_distances(dist: Array2<f64>) -> Result<Self> {
        let n = dist.nrows();
        if dist.ncols() != n {
            return Err(Error::Shape(format!("distance matrix is {}x{}", n, dist.ncols())));
        }
        for i in 0..n {
            if dist[[i, i]] != 0.0 {
                return Err(Error::Data(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let d = dist[[i, j]];
                if d != dist[[j, i]] || d.is_nan() || d < 0.0 {
                    return Err(Error::Data(format!("invalid or asymmetric entry ({i}, {j})")));
                }
            }
        }
        let mut component_id = vec![usize::MAX; n];
        let mut next = 0;
        for i in 0..n {
            if component_id[i] == usize::MAX {
                for j in i..n {
                    if component_id[j] == usize::MAX && dist[[i, j]].is_finite() {
                        component_id[j] = next;
                    }
                }
                next += 1;
            }
        }
        Ok(Self { dist, component_id })
    }

    pub fn len(&self) -> usize {
        self.dist.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[[i, j]]
    }

    pub fn dist(&self) -> ArrayView2<'_, f64> {
        self.dist.view()
    }

    pub fn component_id(&self) -> &[usize] {
        &self.component_id
    }

    /// Restriction to the given rows/columns, in that order.
    pub fn submatrix(&self, rows: &[usize]) -> Self {
        let dist = Array2::from_shape_fn((rows.len(), rows.len()), |(a, b)| {
            self.dist[[rows[a], rows[b]]]
        });
        // relabel components by first appearance
        let mut remap = std::collections::BTreeMap::new();
        let component_id = rows
            .iter()
            .map(|&r| {
                let next = remap.len();
                *remap.entry(self.component_id[r]).or_insert(next)
            })
            .collect();
        Self { dist, component_id }
    }
}

#[derive(Copy, Clone, PartialEq)]
struct State {
    dist: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(graph: &NeighborGraph, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; graph.node_count()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State { dist: 0.0, node: source });
    while let Some(State { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in graph.neighbors(u) {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(State { dist: nd, node: v });
            }
        }
    }
    dist
}

/// Runs Dijkstra from every node. The result is made exactly symmetric by
/// keeping the smaller of the two directed path sums, which can differ in
/// the last bit through summation order.
pub fn geodesic_all_pairs(graph: &NeighborGraph) -> GeodesicMatrix {
    let n = graph.node_count();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(graph, s)).collect();
    let mut dist = Array2::<f64>::zeros((n, n));
    for (i, row) in rows.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            dist[[i, j]] = d;
        }
    }
    for i in 0..n {
        for j in 0..i {
            let d = dist[[i, j]].min(dist[[j, i]]);
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    GeodesicMatrix {
        dist,
        component_id: connected_components(graph),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn collinear_points_k1() {
        let x = array![[0.0], [1.0], [3.0]];
        let g = build_knn_graph(x.view(), 1).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0), (1, 2, 2.0)]);
    }

    #[test]
    fn identical_points_give_zero_weight() {
        let x = array![[2.0, 2.0], [2.0, 2.0]];
        let g = build_knn_graph(x.view(), 1).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 0.0)]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        // node 1 is equidistant from 0 and 2
        let x = array![[0.0], [1.0], [2.0]];
        let g = build_knn_graph(x.view(), 1).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0), (1, 2, 1.0)]);
        let x = array![[0.0], [1.0], [2.0], [10.0]];
        let g = build_knn_graph(x.view(), 1).unwrap();
        // 1 picks 0 (tie with 2), 2 picks 1, 3 picks 2
        assert_eq!(g.edges(), vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 8.0)]);
    }

    #[test]
    fn rejects_bad_k() {
        let x = array![[0.0], [1.0]];
        assert!(build_knn_graph(x.view(), 2).is_err());
        assert!(build_knn_graph(x.view(), 0).is_err());
        assert!(build_knn_graph(array![[0.0]].view(), 1).is_err());
    }

    #[test]
    fn path_graph_geodesic() {
        let g = NeighborGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)], 1).unwrap();
        let m = geodesic_all_pairs(&g);
        assert_eq!(m.get(0, 2), 2.0);
        assert_eq!(m.get(2, 0), 2.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn disconnected_edges() {
        let g = NeighborGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)], 1).unwrap();
        let m = geodesic_all_pairs(&g);
        assert!(m.get(0, 2).is_infinite());
        assert_eq!(m.component_id(), &[0, 0, 1, 1]);
    }

    #[test]
    fn component_labels() {
        let full = NeighborGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)], 2).unwrap();
        assert_eq!(connected_components(&full), vec![0, 0, 0]);
        let isolated = NeighborGraph::from_edges(4, &[], 0).unwrap();
        assert_eq!(connected_components(&isolated), vec![0, 1, 2, 3]);
        let mixed = NeighborGraph::from_edges(5, &[(4, 1, 1.0), (0, 3, 1.0)], 1).unwrap();
        assert_eq!(connected_components(&mixed), vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn edge_list_dump() {
        let g = NeighborGraph::from_edges(3, &[(2, 0, 0.5), (0, 1, 1.0)], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        g.write_edge_list(&path).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "u,v,w\n0,1,1.0\n0,2,0.5\n");
    }

    #[test]
    fn from_distances_validates() {
        assert!(GeodesicMatrix::from_distances(array![[0.0, 1.0], [2.0, 0.0]]).is_err());
        let m = GeodesicMatrix::from_distances(array![
            [0.0, 1.0, f64::INFINITY],
            [1.0, 0.0, f64::INFINITY],
            [f64::INFINITY, f64::INFINITY, 0.0]
        ])
        .unwrap();
        assert_eq!(m.component_id(), &[0, 0, 1]);
        let sub = m.submatrix(&[2, 0]);
        assert_eq!(sub.component_id(), &[0, 1]);
    }
}
