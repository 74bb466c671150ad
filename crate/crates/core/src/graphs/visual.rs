use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, top_k_indices, Matrix, Vector};

/// Learnable projections feeding the two visual graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWeights {
    /// `d × d`, applied to unmatched query embeddings.
    pub spatial: Matrix,
    /// `d × (d/R)`, applied to each channel group.
    pub channel: Matrix,
}

impl ProjectionWeights {
    /// Spatial projection starts at the identity; the channel projection is a
    /// seeded Gaussian matrix scaled by `1/√d`.
    pub fn init(d: usize, groups: usize, seed: u64) -> Result<Self> {
        let width = group_width(d, groups)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let values = (0..d * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(ProjectionWeights {
            spatial: Matrix::identity(d),
            channel: Matrix::new(d, width, values)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.spatial.rows()
    }

    pub fn groups(&self) -> usize {
        self.dim() / self.channel.cols()
    }
}

pub(crate) fn group_width(d: usize, groups: usize) -> Result<usize> {
    if groups == 0 || !d.is_multiple_of(groups) {
        return Err(Error::domain(format!(
            "channel groups R = {groups} must divide the embedding dimension {d}"
        )));
    }
    Ok(d / groups)
}

/// A query that was assigned to a ground-truth region.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedQuery {
    pub embedding: Vector,
    pub class: usize,
    /// Predicted probability of `class`; picks the class representative.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOrigin {
    /// Index into the unmatched query list.
    Query(usize),
    /// Channel group `group` of matched query `query`.
    ChannelGroup { query: usize, group: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualNode {
    /// Projected node embedding.
    pub embedding: Vector,
    /// The vector that was projected (query embedding or channel slice).
    pub input: Vector,
    pub class: usize,
    pub origin: NodeOrigin,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VisualGraph {
    pub nodes: Vec<VisualNode>,
    /// Same-class pairs `(a, b)`, `a < b`.
    pub edges: Vec<(usize, usize)>,
}

impl VisualGraph {
    fn from_nodes(nodes: Vec<VisualNode>) -> Self {
        let mut edges = Vec::new();
        for a in 0..nodes.len() {
            for b in a + 1..nodes.len() {
                if nodes[a].class == nodes[b].class {
                    edges.push((a, b));
                }
            }
        }
        VisualGraph { nodes, edges }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn class_nodes(&self, class: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].class == class)
            .collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut cs: Vec<usize> = self.nodes.iter().map(|n| n.class).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }
}

/// Per class, the matched query with the highest score (lowest index on
/// ties). Returned in ascending class order as `(class, matched index)`.
pub fn class_representatives(matched: &[MatchedQuery]) -> Vec<(usize, usize)> {
    let mut best: std::collections::BTreeMap<usize, usize> = Default::default();
    for (i, q) in matched.iter().enumerate() {
        best.entry(q.class)
            .and_modify(|b| {
                if q.score > matched[*b].score {
                    *b = i;
                }
            })
            .or_insert(i);
    }
    best.into_iter().collect()
}

/// For every class present among the matched queries, the `k - 1` unmatched
/// queries most similar to that class's representative, projected through
/// the spatial projection.
pub fn build_spatial_visual_graph(
    matched: &[MatchedQuery],
    unmatched: &[Vector],
    k: usize,
    weights: &ProjectionWeights,
) -> Result<VisualGraph> {
    if k < 2 {
        return Err(Error::domain(format!("k must be at least 2, got {k}")));
    }
    if matched.is_empty() {
        return Err(Error::domain(
            "spatial graph needs at least one matched query",
        ));
    }
    let mut nodes = Vec::new();
    for (class, rep) in class_representatives(matched) {
        let anchor = &matched[rep].embedding;
        let sims = unmatched
            .iter()
            .map(|u| cosine_similarity(u, anchor))
            .collect::<Result<Vec<f64>>>()?;
        for idx in top_k_indices(&sims, k - 1) {
            let input = unmatched[idx].clone();
            nodes.push(VisualNode {
                embedding: weights.spatial.matvec(input.as_slice())?,
                input,
                class,
                origin: NodeOrigin::Query(idx),
            });
        }
    }
    Ok(VisualGraph::from_nodes(nodes))
}

/// Splits each class representative into `R` contiguous channel groups and
/// maps every group back to `d` dimensions through the channel projection.
pub fn build_channel_visual_graph(
    matched: &[MatchedQuery],
    groups: usize,
    weights: &ProjectionWeights,
) -> Result<VisualGraph> {
    let width = group_width(weights.dim(), groups)?;
    if width != weights.channel.cols() {
        return Err(Error::shape(format!(
            "R = {groups} gives groups of {width} channels but the channel projection takes {}",
            weights.channel.cols()
        )));
    }
    let mut nodes = Vec::new();
    for (class, rep) in class_representatives(matched) {
        let q = matched[rep].embedding.as_slice();
        if q.len() != weights.dim() {
            return Err(Error::shape(format!(
                "query dimension {} vs projection dimension {}",
                q.len(),
                weights.dim()
            )));
        }
        for (group, slice) in q.chunks(width).enumerate() {
            let input = Vector::new(slice.to_vec())?;
            nodes.push(VisualNode {
                embedding: weights.channel.matvec(slice)?,
                input,
                class,
                origin: NodeOrigin::ChannelGroup { query: rep, group },
            });
        }
    }
    Ok(VisualGraph::from_nodes(nodes))
}
