//! Random geometric networks: uniform nodes, Delaunay edges, directed
//! links and shortest-path routing of randomly chosen OD pairs.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RoutingMatrix;

/// Directed link between two nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub id: usize,
    pub from: usize,
    pub to: usize,
}

/// An origin-destination flow and its link path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub src: usize,
    pub dst: usize,
    pub path: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub nodes: Vec<[f64; 2]>,
    /// Undirected edges `(u, v)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Edge `e` yields link `2e` (u to v) and link `2e + 1` (v to u).
    pub links: Vec<Link>,
    pub flows: Vec<Flow>,
}

/// `n` i.i.d. uniform points in the unit square.
pub fn generate_nodes(n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if n < 3 {
        return Err(Error::Parameter(format!("need at least 3 nodes, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect())
}

/// Delaunay triangles as node-index triples.
pub fn triangulate(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("{} points cannot be triangulated", points.len())));
    }
    let pts: Vec<delaunator::Point> = points
        .iter()
        .map(|p| delaunator::Point { x: p[0], y: p[1] })
        .collect();
    let tri = delaunator::triangulate(&pts);
    if tri.triangles.is_empty() {
        return Err(Error::Degenerate("all points are collinear".into()));
    }
    Ok(tri
        .triangles
        .chunks_exact(3)
        .map(|t| [t[0], t[1], t[2]])
        .collect())
}

/// Undirected Delaunay edge set, `(u, v)` with `u < v`, sorted.
pub fn delaunay(points: &[[f64; 2]]) -> Result<Vec<(usize, usize)>> {
    let mut edges = BTreeSet::new();
    for t in triangulate(points)? {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    Ok(edges.into_iter().collect())
}

impl Network {
    /// Triangulates the given nodes and creates two directed links per edge.
    pub fn from_nodes(nodes: Vec<[f64; 2]>) -> Result<Self> {
        let edges = delaunay(&nodes)?;
        let links = edges
            .iter()
            .enumerate()
            .flat_map(|(e, &(u, v))| {
                [
                    Link { id: 2 * e, from: u, to: v },
                    Link { id: 2 * e + 1, from: v, to: u },
                ]
            })
            .collect();
        Ok(Self {
            nodes,
            edges,
            links,
            flows: Vec::new(),
        })
    }

    pub fn generate(n: usize, seed: u64) -> Result<Self> {
        Self::from_nodes(generate_nodes(n, seed)?)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn link_length(&self, link: usize) -> f64 {
        let l = &self.links[link];
        let (p, q) = (self.nodes[l.from], self.nodes[l.to]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    /// Outgoing links per node, ascending by link id.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for link in &self.links {
            adj[link.from].push(link.id);
        }
        adj
    }

    pub fn routing_matrix(&self) -> Result<RoutingMatrix> {
        RoutingMatrix::new(
            self.links.len(),
            self.flows.iter().map(|f| f.path.clone()).collect(),
        )
    }
}

#[derive(PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    // min-heap on (dist, node)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source Dijkstra over Euclidean link lengths. Returns the incoming
/// link of every node on its shortest-path tree; equal-distance ties keep
/// the predecessor with the smaller node index.
fn shortest_path_tree(network: &Network, adjacency: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let n = network.num_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Frontier { dist: 0.0, node: src });
    while let Some(Frontier { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &link in &adjacency[u] {
            let v = network.links[link].to;
            if done[v] {
                continue;
            }
            let nd = d + network.link_length(link);
            let better = nd < dist[v]
                || (nd == dist[v] && via[v].is_some_and(|l| u < network.links[l].from));
            if better {
                dist[v] = nd;
                via[v] = Some(link);
                heap.push(Frontier { dist: nd, node: v });
            }
        }
    }
    via
}

fn trace_path(network: &Network, via: &[Option<usize>], src: usize, dst: usize) -> Result<Vec<usize>> {
    let mut path = Vec::new();
    let mut node = dst;
    while node != src {
        let link = via[node].ok_or(Error::Unreachable { src, dst })?;
        path.push(link);
        node = network.links[link].from;
    }
    path.reverse();
    Ok(path)
}

/// Minimum-length directed link path from `src` to `dst`.
pub fn shortest_path(network: &Network, src: usize, dst: usize) -> Result<Vec<usize>> {
    let n = network.num_nodes();
    if src >= n || dst >= n {
        return Err(Error::Parameter(format!("node index out of range (n = {n})")));
    }
    if src == dst {
        return Err(Error::Parameter(format!("source and destination are both node {src}")));
    }
    let via = shortest_path_tree(network, &network.adjacency(), src);
    trace_path(network, &via, src, dst)
}

/// Samples `flows` distinct ordered OD pairs, routes each on its shortest
/// path, stores them in the network and returns the routing matrix.
pub fn build_routing(network: &mut Network, flows: usize, seed: u64) -> Result<RoutingMatrix> {
    let n = network.num_nodes();
    let pairs = n * (n - 1);
    if flows == 0 {
        return Err(Error::Parameter("need at least one flow".into()));
    }
    if flows > pairs {
        return Err(Error::Parameter(format!(
            "{flows} flows requested but only {pairs} ordered node pairs exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let od: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, pairs, flows)
        .into_iter()
        .map(|k| {
            let src = k / (n - 1);
            let off = k % (n - 1);
            let dst = if off >= src { off + 1 } else { off };
            (src, dst)
        })
        .collect();

    let sources: BTreeSet<usize> = od.iter().map(|&(s, _)| s).collect();
    let adjacency = network.adjacency();
    let net = &*network;
    let trees: Vec<(usize, Vec<Option<usize>>)> = sources
        .into_par_iter()
        .map(|s| (s, shortest_path_tree(net, &adjacency, s)))
        .collect();
    let lookup = |s: usize| {
        let i = trees.binary_search_by_key(&s, |(k, _)| *k).expect("tree for source");
        &trees[i].1
    };
    let routed = od
        .iter()
        .map(|&(src, dst)| {
            Ok(Flow {
                src,
                dst,
                path: trace_path(net, lookup(src), src, dst)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    network.flows = routed;
    network.routing_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_points_one_triangle() {
        let pts = generate_nodes(3, 4).unwrap();
        assert_eq!(triangulate(&pts).unwrap().len(), 1);
        assert_eq!(delaunay(&pts).unwrap().len(), 3);
        assert!(generate_nodes(2, 4).is_err());
    }

    #[test]
    fn square_corners_five_edges() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(delaunay(&pts).unwrap().len(), 5);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(matches!(delaunay(&pts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn nodes_deterministic_per_seed() {
        assert_eq!(generate_nodes(20, 9).unwrap(), generate_nodes(20, 9).unwrap());
        assert_ne!(generate_nodes(20, 9).unwrap(), generate_nodes(20, 10).unwrap());
    }

    #[test]
    fn adjacent_nodes_single_link() {
        let net = Network::generate(30, 1).unwrap();
        let (u, v) = net.edges[0];
        let path = shortest_path(&net, u, v).unwrap();
        // a direct edge is the shortest path by the triangle inequality
        assert_eq!(path.len(), 1);
        assert_eq!(net.links[path[0]].from, u);
        assert_eq!(net.links[path[0]].to, v);
        assert!(shortest_path(&net, u, u).is_err());
    }

    #[test]
    fn paths_are_connected_and_cycle_free() {
        let mut net = Network::generate(40, 3).unwrap();
        build_routing(&mut net, 200, 5).unwrap();
        for flow in &net.flows {
            assert_eq!(net.links[flow.path[0]].from, flow.src);
            assert_eq!(net.links[*flow.path.last().unwrap()].to, flow.dst);
            let mut seen = BTreeSet::from([flow.src]);
            for w in flow.path.windows(2) {
                assert_eq!(net.links[w[0]].to, net.links[w[1]].from);
            }
            for &l in &flow.path {
                assert!(seen.insert(net.links[l].to), "revisited a node");
            }
        }
    }

    #[test]
    fn routing_columns_and_distinct_pairs() {
        let mut net = Network::generate(12, 2).unwrap();
        let r = build_routing(&mut net, 132, 1).unwrap();
        assert_eq!(r.num_flows(), 132);
        assert!(r.columns().iter().all(|c| !c.is_empty()));
        let pairs: BTreeSet<_> = net.flows.iter().map(|f| (f.src, f.dst)).collect();
        assert_eq!(pairs.len(), 132);
        assert!(build_routing(&mut net, 133, 1).is_err());
        assert!(build_routing(&mut net, 0, 1).is_err());
    }

    #[test]
    fn single_flow_on_three_nodes() {
        let mut net = Network::from_nodes(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let r = build_routing(&mut net, 1, 0).unwrap();
        let flow = &net.flows[0];
        assert_eq!(r.flow_links(0), &{
            let mut p = flow.path.clone();
            p.sort();
            p
        }[..]);
        assert_eq!(net.num_links(), 6);
    }
}
