//! Bounded line-graph neighborhoods and per-batch edge masking.

use rand::seq::index::sample;

use super::KnowledgeGraph;
use crate::rng;

/// Truncated edge-neighborhood index: for every edge, its line-graph
/// neighbors capped at `max_neighbors` by a seeded uniform sample without
/// replacement. Lists are ascending by edge id.
pub struct EdgeNeighborIndex {
    flat: Vec<u32>,
    offsets: Vec<usize>,
    max_neighbors: usize,
    seed: u64,
}

impl EdgeNeighborIndex {
    pub fn build(kg: &KnowledgeGraph, max_neighbors: usize, seed: u64) -> Self {
        assert!(max_neighbors >= 1, "max_neighbors must be >= 1");
        let num_edges = kg.num_edges();
        let mut flat = Vec::new();
        let mut offsets = Vec::with_capacity(num_edges + 1);
        offsets.push(0);
        for e in 0..num_edges as u32 {
            let full = kg.edge_neighbors(e);
            if full.len() <= max_neighbors {
                flat.extend_from_slice(&full);
            } else {
                let mut rng = rng::stream(seed, "edge-neighbors", &[u64::from(e)]);
                let mut picked: Vec<u32> = sample(&mut rng, full.len(), max_neighbors)
                    .into_iter()
                    .map(|i| full[i])
                    .collect();
                picked.sort_unstable();
                flat.extend_from_slice(&picked);
            }
            offsets.push(flat.len());
        }
        Self {
            flat,
            offsets,
            max_neighbors,
            seed,
        }
    }

    pub fn neighbors(&self, e: u32) -> &[u32] {
        &self.flat[self.offsets[e as usize]..self.offsets[e as usize + 1]]
    }

    pub fn num_edges(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn max_neighbors(&self) -> usize {
        self.max_neighbors
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Set of edges removed from the message-passing graph for one pass
/// (the facts being predicted, plus their inverse twins).
#[derive(Clone)]
pub struct EdgeMask {
    masked: Vec<bool>,
    count: usize,
}

impl EdgeMask {
    pub fn none(num_edges: usize) -> Self {
        Self {
            masked: vec![false; num_edges],
            count: 0,
        }
    }

    /// Mask the given edges and, when the graph carries inverses, their twins.
    pub fn for_edges(kg: &KnowledgeGraph, edges: impl IntoIterator<Item = u32>) -> Self {
        let mut m = Self::none(kg.num_edges());
        for e in edges {
            m.insert(e);
            if let Some(t) = kg.twin(e) {
                m.insert(t);
            }
        }
        m
    }

    fn insert(&mut self, e: u32) {
        if !self.masked[e as usize] {
            self.masked[e as usize] = true;
            self.count += 1;
        }
    }

    pub fn is_masked(&self, e: u32) -> bool {
        self.masked[e as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn len(&self) -> usize {
        self.count
    }
}

/// Incident CSR over all entities with masked edges removed; feeds the
/// node-update mean.
pub fn incident_csr_masked(kg: &KnowledgeGraph, mask: &EdgeMask) -> (Vec<u32>, Vec<usize>) {
    let n = kg.num_entities();
    let mut flat = Vec::with_capacity(kg.num_edges() * 2);
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for v in 0..n as u32 {
        for &e in kg.incident_edges(v) {
            if !mask.is_masked(e) {
                flat.push(e);
            }
        }
        offsets.push(flat.len());
    }
    (flat, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{surface, KnowledgeGraph};

    fn path_graph() -> KnowledgeGraph {
        // a - b - c, plain edges (no inverses) so counts match by hand.
        KnowledgeGraph::from_surface(
            &surface(&[("a", "r", "b"), ("b", "r", "c")]),
            &[],
            &[],
            false,
        )
        .unwrap()
    }

    fn star_graph() -> KnowledgeGraph {
        let rows = surface(&[
            ("hub", "r", "l1"),
            ("hub", "r", "l2"),
            ("hub", "r", "l3"),
            ("hub", "r", "l4"),
            ("hub", "r", "l5"),
        ]);
        KnowledgeGraph::from_surface(&rows, &[], &[], false).unwrap()
    }

    #[test]
    fn path_graph_edges_have_one_neighbor() {
        let kg = path_graph();
        let idx = EdgeNeighborIndex::build(&kg, 8, 0);
        assert_eq!(kg.num_edges(), 2);
        assert_eq!(idx.neighbors(0), &[1]);
        assert_eq!(idx.neighbors(1), &[0]);
    }

    #[test]
    fn star_edges_have_four_neighbors() {
        let kg = star_graph();
        // Oracle: enumerate shared-endpoint pairs by brute force.
        for e in 0..kg.num_edges() as u32 {
            let brute: Vec<u32> = (0..kg.num_edges() as u32)
                .filter(|&o| {
                    if o == e {
                        return false;
                    }
                    let (a, b) = (kg.edge(e), kg.edge(o));
                    a.head == b.head || a.head == b.tail || a.tail == b.head || a.tail == b.tail
                })
                .collect();
            assert_eq!(brute.len(), 4);
            assert_eq!(kg.edge_neighbors(e), brute);
        }
        let idx = EdgeNeighborIndex::build(&kg, 16, 0);
        for e in 0..kg.num_edges() as u32 {
            assert_eq!(idx.neighbors(e).len(), 4);
        }
    }

    #[test]
    fn truncation_samples_a_subset_reproducibly() {
        let kg = star_graph();
        let a = EdgeNeighborIndex::build(&kg, 2, 42);
        let b = EdgeNeighborIndex::build(&kg, 2, 42);
        let c = EdgeNeighborIndex::build(&kg, 2, 43);
        let mut any_differs = false;
        for e in 0..kg.num_edges() as u32 {
            let full = kg.edge_neighbors(e);
            assert_eq!(a.neighbors(e).len(), 2);
            assert!(a.neighbors(e).iter().all(|n| full.contains(n)));
            assert_eq!(a.neighbors(e), b.neighbors(e));
            any_differs |= a.neighbors(e) != c.neighbors(e);
        }
        assert!(any_differs, "different seeds should pick different subsets somewhere");
    }

    #[test]
    fn mask_covers_twins_when_inverses_exist() {
        let kg = KnowledgeGraph::from_surface(
            &surface(&[("a", "r", "b"), ("b", "r", "c")]),
            &[],
            &[],
            true,
        )
        .unwrap();
        assert_eq!(kg.num_edges(), 4);
        let mask = EdgeMask::for_edges(&kg, [0u32]);
        assert!(mask.is_masked(0));
        assert!(mask.is_masked(1)); // the inverse twin
        assert!(!mask.is_masked(2));
        let (flat, offsets) = incident_csr_masked(&kg, &mask);
        let b = kg.entities().id("b").unwrap() as usize;
        let incident_b: Vec<u32> = flat[offsets[b]..offsets[b + 1]].to_vec();
        assert_eq!(incident_b, vec![2, 3]);
    }
}
