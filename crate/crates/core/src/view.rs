//! Hierarchical view structures.
//!
//! A view structure is an m-layer tree: layer-0 nodes (leaves) each reference
//! one feature block of the dataset, every node on layer i > 0 groups one or
//! more nodes from layer i-1, and layer m holds the single consensus root.
//! Grouping partitions each layer: every node has exactly one parent.
//!
//! Structures arrive either from a JSON description file or from the builders
//! on [`StructureSpec`], and must pass [`StructureSpec::validate`] against a
//! concrete dataset before training can use them.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// One node of a structure description.
///
/// Leaves (layer 0) carry `data`, the name of a dataset view, and no
/// children. Internal nodes carry children ids from the layer below and no
/// `data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

/// Unvalidated structure description, mirroring the JSON schema
/// `{"nodes": [{"id", "layer", "children": [...], "data"}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub nodes: Vec<NodeSpec>,
}

/// Index of a node within a validated [`ViewStructure`].
pub type NodeId = usize;

/// A validated node with resolved references.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub layer: usize,
    /// Children as node ids, in declaration order. Empty for leaves.
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
    /// Dataset view index for leaves.
    pub view_index: Option<usize>,
    /// Position within `leaves()` for leaves, within `internals()` otherwise.
    pub slot: usize,
}

/// A validated view structure bound to a dataset.
#[derive(Debug, Clone)]
pub struct ViewStructure {
    spec: StructureSpec,
    nodes: Vec<Node>,
    /// Node ids per layer, in declaration order; index 0 = leaves.
    layers: Vec<Vec<NodeId>>,
    /// Layer-0 nodes in declaration order.
    leaves: Vec<NodeId>,
    /// Nodes of layers 1..=m flattened bottom-up; children of any entry
    /// appear before it (they live one layer down).
    internals: Vec<NodeId>,
    root: NodeId,
    n_samples: usize,
}

impl StructureSpec {
    /// Parses a JSON structure description.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_named(text, "<structure json>")
    }

    pub(crate) fn from_json_named(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("structure spec serializes")
    }

    /// Single-layer structure: all named views sit directly under one root.
    pub fn flat<S: AsRef<str>>(view_names: &[S]) -> Self {
        let mut nodes: Vec<NodeSpec> = view_names
            .iter()
            .map(|name| NodeSpec {
                id: name.as_ref().to_string(),
                layer: 0,
                children: Vec::new(),
                data: Some(name.as_ref().to_string()),
            })
            .collect();
        nodes.push(NodeSpec {
            id: "root".into(),
            layer: 1,
            children: view_names.iter().map(|n| n.as_ref().to_string()).collect(),
            data: None,
        });
        StructureSpec { nodes }
    }

    /// Two-layer structure: `groups` maps group id to its member view names.
    pub fn two_layer<S: AsRef<str>>(groups: &[(S, Vec<S>)]) -> Self {
        let mut nodes = Vec::new();
        for (_, members) in groups {
            for m in members {
                nodes.push(NodeSpec {
                    id: m.as_ref().to_string(),
                    layer: 0,
                    children: Vec::new(),
                    data: Some(m.as_ref().to_string()),
                });
            }
        }
        for (gid, members) in groups {
            nodes.push(NodeSpec {
                id: gid.as_ref().to_string(),
                layer: 1,
                children: members.iter().map(|m| m.as_ref().to_string()).collect(),
                data: None,
            });
        }
        nodes.push(NodeSpec {
            id: "root".into(),
            layer: 2,
            children: groups.iter().map(|(g, _)| g.as_ref().to_string()).collect(),
            data: None,
        });
        StructureSpec { nodes }
    }

    /// Validates the description against a dataset and resolves references.
    ///
    /// Checks, each with its own diagnostic: unique node ids, contiguous
    /// non-empty layers with a single root on top, leaf/internal shape rules,
    /// child references one layer down, single parenthood, no orphans, and
    /// leaf data views present in the dataset with the right sample count.
    pub fn validate(&self, dataset: &Dataset) -> Result<ViewStructure> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyStructure {
                reason: "no nodes".into(),
            });
        }

        let mut index_of = std::collections::HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index_of.insert(n.id.clone(), i).is_some() {
                return Err(Error::DuplicateNodeId { id: n.id.clone() });
            }
        }

        let m = self.nodes.iter().map(|n| n.layer).max().unwrap();
        if m == 0 {
            return Err(Error::EmptyStructure {
                reason: "no agglomeration layer above the leaves".into(),
            });
        }

        let mut layers: Vec<Vec<NodeId>> = vec![Vec::new(); m + 1];
        for (i, n) in self.nodes.iter().enumerate() {
            layers[n.layer].push(i);
        }
        for (layer, ids) in layers.iter().enumerate() {
            if ids.is_empty() {
                return Err(Error::EmptyLayer { layer });
            }
        }
        if layers[m].len() != 1 {
            return Err(Error::RootCount {
                layer: m,
                count: layers[m].len(),
            });
        }
        let root = layers[m][0];

        // Shape rules per node.
        for n in &self.nodes {
            if n.layer == 0 {
                if !n.children.is_empty() {
                    return Err(Error::BadLeaf {
                        id: n.id.clone(),
                        reason: format!("has {} children; leaves must have none", n.children.len()),
                    });
                }
                if n.data.is_none() {
                    return Err(Error::BadLeaf {
                        id: n.id.clone(),
                        reason: "missing data view reference".into(),
                    });
                }
            } else {
                if n.children.is_empty() {
                    return Err(Error::BadInternalNode {
                        id: n.id.clone(),
                        reason: "has no children".into(),
                    });
                }
                if n.data.is_some() {
                    return Err(Error::BadInternalNode {
                        id: n.id.clone(),
                        reason: "carries a data reference; only leaves may".into(),
                    });
                }
            }
        }

        // Resolve children and assign parents.
        let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); self.nodes.len()];
        let mut parent: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for child_id in &n.children {
                let &c = index_of.get(child_id).ok_or_else(|| Error::UnknownChild {
                    parent: n.id.clone(),
                    child: child_id.clone(),
                })?;
                let child = &self.nodes[c];
                if child.layer + 1 != n.layer {
                    return Err(Error::ChildLayerMismatch {
                        parent: n.id.clone(),
                        parent_layer: n.layer,
                        child: child.id.clone(),
                        child_layer: child.layer,
                        expected: n.layer - 1,
                    });
                }
                if let Some(p) = parent[c] {
                    return Err(Error::MultipleParents {
                        child: child.id.clone(),
                        first: self.nodes[p].id.clone(),
                        second: n.id.clone(),
                    });
                }
                parent[c] = Some(i);
                children[i].push(c);
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if i != root && parent[i].is_none() {
                return Err(Error::OrphanNode {
                    id: n.id.clone(),
                    layer: n.layer,
                });
            }
        }

        // Bind leaves to dataset views.
        let mut view_index: Vec<Option<usize>> = vec![None; self.nodes.len()];
        for &i in &layers[0] {
            let n = &self.nodes[i];
            let name = n.data.as_ref().unwrap();
            let vi = dataset.view_position(name).ok_or_else(|| Error::UnknownView {
                id: n.id.clone(),
                view: name.clone(),
            })?;
            let rows = dataset.view_at(vi).1.nrows();
            if rows != dataset.n() {
                return Err(Error::SampleCountMismatch {
                    view: name.clone(),
                    expected: dataset.n(),
                    found: rows,
                });
            }
            view_index[i] = Some(vi);
        }

        let leaves = layers[0].clone();
        let internals: Vec<NodeId> = layers[1..].iter().flatten().copied().collect();

        let mut slot = vec![0usize; self.nodes.len()];
        for (s, &i) in leaves.iter().enumerate() {
            slot[i] = s;
        }
        for (s, &i) in internals.iter().enumerate() {
            slot[i] = s;
        }

        let nodes: Vec<Node> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Node {
                id: n.id.clone(),
                layer: n.layer,
                children: children[i].clone(),
                parent: parent[i],
                view_index: view_index[i],
                slot: slot[i],
            })
            .collect();

        Ok(ViewStructure {
            spec: self.clone(),
            nodes,
            layers,
            leaves,
            internals,
            root,
            n_samples: dataset.n(),
        })
    }
}

impl ViewStructure {
    /// The original description, for serialization.
    pub fn spec(&self) -> &StructureSpec {
        &self.spec
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of agglomeration layers m (leaves are layer 0).
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Layer-0 nodes in declaration order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// All internal nodes, bottom-up: any node's children precede it.
    pub fn internals(&self) -> &[NodeId] {
        &self.internals
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn layer(&self, i: usize) -> &[NodeId] {
        &self.layers[i]
    }

    pub fn find(&self, id: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Number of direct subviews of an internal node.
    ///
    /// Rejects leaves: a leaf has no subviews.
    pub fn subview_count(&self, id: &str) -> Result<usize> {
        let node_id = self.find(id).ok_or_else(|| Error::InvalidArgument {
            name: "id",
            reason: format!("unknown node `{id}`"),
        })?;
        let node = &self.nodes[node_id];
        if node.layer == 0 {
            return Err(Error::InvalidArgument {
                name: "id",
                reason: format!("node `{id}` is a leaf and has no subviews"),
            });
        }
        Ok(node.children.len())
    }

    /// Effective mixing weight of each leaf in the consensus when every
    /// parent averages its children uniformly: the product of 1/|children|
    /// along the path to the root. Indexed by leaf slot; sums to 1.
    pub fn leaf_mix_weights(&self) -> Vec<f64> {
        self.leaves
            .iter()
            .map(|&leaf| {
                let mut w = 1.0;
                let mut cur = leaf;
                while let Some(p) = self.nodes[cur].parent {
                    w /= self.nodes[p].children.len() as f64;
                    cur = p;
                }
                w
            })
            .collect()
    }
}
