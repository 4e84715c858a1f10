//! Two-level sampling ontology: an entity root covering the whole dataset and
//! one node per object class indexing the triplets that belong to it.
//!
//! A triplet belongs to an object node when its image detects the class and
//! its noun is one of the nouns mapped to that class. Membership is keyed by
//! the triplet's own class, so object nodes never overlap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ImageRecord, NounObjectMap, Triplet, TripletDataset};
use crate::{Error, Result};

pub const ENTITY_NODE_ID: &str = "entity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entity,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyNode {
    pub node_id: String,
    pub kind: NodeKind,
    /// Class name for object nodes, absent on the root.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub object_class: Option<String>,
    /// Positions into the triplet list, ascending. Empty on the root, which
    /// stands for the entire dataset.
    pub instance_index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    /// Root first, then object nodes sorted by class name.
    pub nodes: Vec<OntologyNode>,
    pub dataset_len: usize,
}

impl Ontology {
    pub fn object_nodes(&self) -> impl Iterator<Item = &OntologyNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Object)
    }

    pub fn node_for_class(&self, class: &str) -> Option<&OntologyNode> {
        self.object_nodes()
            .find(|n| n.object_class.as_deref() == Some(class))
    }

    /// Rebuilds the ontology over the subset of triplets listed in `keep`
    /// (sorted original positions). Instance indexes are remapped to positions
    /// within `keep`; object nodes left empty are dropped.
    pub fn restrict(&self, keep: &[usize]) -> Ontology {
        debug_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let remap: BTreeMap<usize, usize> =
            keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let mut nodes = vec![OntologyNode {
            node_id: ENTITY_NODE_ID.to_string(),
            kind: NodeKind::Entity,
            object_class: None,
            instance_index: Vec::new(),
        }];
        for node in self.object_nodes() {
            let index: Vec<usize> = node
                .instance_index
                .iter()
                .filter_map(|old| remap.get(old).copied())
                .collect();
            if !index.is_empty() {
                nodes.push(OntologyNode {
                    node_id: node.node_id.clone(),
                    kind: NodeKind::Object,
                    object_class: node.object_class.clone(),
                    instance_index: index,
                });
            }
        }
        Ontology {
            nodes,
            dataset_len: keep.len(),
        }
    }
}

/// The two-clause node membership rule.
pub fn is_member(noun: &str, class: &str, region_labels: &[String], map: &NounObjectMap) -> bool {
    region_labels.iter().any(|l| l == class) && map.noun_in_class(noun, class)
}

pub fn build_ontology(
    triplets: &[Triplet],
    images: &BTreeMap<String, ImageRecord>,
    map: &NounObjectMap,
) -> Result<Ontology> {
    let mut per_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in triplets.iter().enumerate() {
        let img = images.get(&t.image_id).ok_or_else(|| Error::UnknownImage {
            caption_id: t.caption_id.clone(),
            image_id: t.image_id.clone(),
        })?;
        if is_member(&t.noun, &t.object_class, &img.region_labels, map) {
            per_class.entry(&t.object_class).or_default().push(i);
        }
    }
    if per_class.contains_key(ENTITY_NODE_ID) {
        return Err(Error::MalformedRecord(format!(
            "object class named {ENTITY_NODE_ID:?} collides with the root node"
        )));
    }
    let mut nodes = vec![OntologyNode {
        node_id: ENTITY_NODE_ID.to_string(),
        kind: NodeKind::Entity,
        object_class: None,
        instance_index: Vec::new(),
    }];
    for (class, index) in per_class {
        nodes.push(OntologyNode {
            node_id: class.to_string(),
            kind: NodeKind::Object,
            object_class: Some(class.to_string()),
            instance_index: index,
        });
    }
    Ok(Ontology {
        nodes,
        dataset_len: triplets.len(),
    })
}

pub fn build_for_dataset(dataset: &TripletDataset) -> Result<Ontology> {
    build_ontology(&dataset.triplets, &dataset.images, &dataset.map)
}
