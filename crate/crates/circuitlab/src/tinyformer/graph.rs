//! The component graph: which writer's activation reaches which reader.

use std::collections::{BTreeMap, BTreeSet};

use super::component::ComponentId;
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// A directed activation edge from a sender component to a receiver.
pub type Edge = (ComponentId, ComponentId);

/// Directed acyclic graph over components.
///
/// Residual-stream edges connect a writer (embedding, any `Wo`, any `Wdown`)
/// to every reader that consumes the stream after the writer has contributed:
/// `Wq`/`Wk`/`Wv` and `Wup` of later positions in the causal order, and the
/// unembedding. Structural edges carry intra-block intermediates:
/// `Wq/Wk/Wv -> Wo` within a head and `Wup -> Wdown` within an MLP.
#[derive(Clone, Debug)]
pub struct ComputationalGraph {
    nodes: Vec<ComponentId>,
    edges: Vec<Edge>,
    in_edges: BTreeMap<ComponentId, Vec<ComponentId>>,
    edge_set: BTreeSet<Edge>,
    digest: String,
}

impl ComputationalGraph {
    /// Enumerate the full graph licensed by a model configuration.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.n_layers as u32;
        let heads = config.n_heads as u32;

        let mut nodes = vec![ComponentId::Embed];
        for layer in 0..layers {
            for head in 0..heads {
                nodes.push(ComponentId::Wq { layer, head });
            }
            for head in 0..heads {
                nodes.push(ComponentId::Wk { layer, head });
            }
            for head in 0..heads {
                nodes.push(ComponentId::Wv { layer, head });
            }
            for head in 0..heads {
                nodes.push(ComponentId::Wo { layer, head });
            }
            nodes.push(ComponentId::Wup { layer });
            nodes.push(ComponentId::Wdown { layer });
        }
        nodes.push(ComponentId::Unembed);

        // Residual writers available to a reader at layer `l`:
        //   attention readers see everything written strictly before layer l,
        //   the MLP reader additionally sees its own layer's attention output.
        let written_before_attn = |l: u32| -> Vec<ComponentId> {
            let mut w = vec![ComponentId::Embed];
            for lp in 0..l {
                for head in 0..heads {
                    w.push(ComponentId::Wo { layer: lp, head });
                }
                w.push(ComponentId::Wdown { layer: lp });
            }
            w
        };

        let mut in_edges: BTreeMap<ComponentId, Vec<ComponentId>> = BTreeMap::new();
        for layer in 0..layers {
            let attn_writers = written_before_attn(layer);
            for head in 0..heads {
                for kind in [
                    ComponentId::Wq { layer, head },
                    ComponentId::Wk { layer, head },
                    ComponentId::Wv { layer, head },
                ] {
                    in_edges.insert(kind, attn_writers.clone());
                }
                // structural: the head's own projections feed its output matrix
                in_edges.insert(
                    ComponentId::Wo { layer, head },
                    vec![
                        ComponentId::Wq { layer, head },
                        ComponentId::Wk { layer, head },
                        ComponentId::Wv { layer, head },
                    ],
                );
            }
            let mut mlp_writers = attn_writers;
            for head in 0..heads {
                mlp_writers.push(ComponentId::Wo { layer, head });
            }
            in_edges.insert(ComponentId::Wup { layer }, mlp_writers);
            in_edges.insert(ComponentId::Wdown { layer }, vec![ComponentId::Wup { layer }]);
        }
        in_edges.insert(ComponentId::Unembed, written_before_attn(layers));

        let mut edges = Vec::new();
        for (receiver, senders) in &in_edges {
            for sender in senders {
                edges.push((*sender, *receiver));
            }
        }

        Ok(Self::assemble(nodes, edges, in_edges))
    }

    /// Build a graph from explicit nodes and edges (used by hand-built
    /// fixtures). Validates endpoints and acyclicity.
    pub fn custom(nodes: Vec<ComponentId>, edges: Vec<Edge>) -> Result<Self> {
        let node_set: BTreeSet<ComponentId> = nodes.iter().copied().collect();
        if node_set.len() != nodes.len() {
            return Err(Error::InvalidArgument("duplicate graph nodes".into()));
        }
        for (s, r) in &edges {
            if !node_set.contains(s) || !node_set.contains(r) {
                return Err(Error::InvalidArgument(format!(
                    "edge ({s}, {r}) references unknown node"
                )));
            }
        }

        // Kahn's algorithm for cycle detection.
        let mut indegree: BTreeMap<ComponentId, usize> =
            nodes.iter().map(|n| (*n, 0)).collect();
        let mut out: BTreeMap<ComponentId, Vec<ComponentId>> = BTreeMap::new();
        for (s, r) in &edges {
            *indegree.get_mut(r).unwrap() += 1;
            out.entry(*s).or_default().push(*r);
        }
        let mut queue: Vec<ComponentId> =
            indegree.iter().filter(|(_, &d)| d == 0).map(|(n, _)| *n).collect();
        let mut visited = 0;
        while let Some(n) = queue.pop() {
            visited += 1;
            for r in out.get(&n).cloned().unwrap_or_default() {
                let d = indegree.get_mut(&r).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push(r);
                }
            }
        }
        if visited != nodes.len() {
            return Err(Error::InvalidArgument("graph contains a cycle".into()));
        }

        let mut in_edges: BTreeMap<ComponentId, Vec<ComponentId>> = BTreeMap::new();
        for (s, r) in &edges {
            in_edges.entry(*r).or_default().push(*s);
        }
        for senders in in_edges.values_mut() {
            senders.sort();
        }
        let mut sorted_nodes = nodes;
        sorted_nodes.sort();
        let mut canonical_edges = Vec::new();
        for (receiver, senders) in &in_edges {
            for sender in senders {
                canonical_edges.push((*sender, *receiver));
            }
        }
        Ok(Self::assemble(sorted_nodes, canonical_edges, in_edges))
    }

    fn assemble(
        nodes: Vec<ComponentId>,
        edges: Vec<Edge>,
        in_edges: BTreeMap<ComponentId, Vec<ComponentId>>,
    ) -> Self {
        let edge_set: BTreeSet<Edge> = edges.iter().copied().collect();
        let mut repr = String::new();
        for n in &nodes {
            repr.push_str(&n.to_string());
            repr.push(';');
        }
        repr.push('|');
        for (s, r) in &edge_set {
            repr.push_str(&format!("{s}>{r};"));
        }
        let digest = sha256_hex(repr.as_bytes());
        ComputationalGraph { nodes, edges, in_edges, edge_set, digest }
    }

    pub fn nodes(&self) -> &[ComponentId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_edge(&self, e: &Edge) -> bool {
        self.edge_set.contains(e)
    }

    /// Senders feeding `receiver`, in canonical order.
    pub fn in_senders(&self, receiver: &ComponentId) -> &[ComponentId] {
        self.in_edges.get(receiver).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Receivers (nodes with at least one in-edge) ordered output-first.
    ///
    /// The canonical node enumeration is already topological, so the reverse
    /// enumeration is a reverse topological order.
    pub fn receivers_output_first(&self) -> Vec<ComponentId> {
        self.nodes
            .iter()
            .rev()
            .filter(|n| !self.in_senders(n).is_empty())
            .copied()
            .collect()
    }

    /// Content digest over nodes and edges.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}
