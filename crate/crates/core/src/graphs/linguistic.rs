use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::knowledge::{KnowledgeBase, ModifierKind, PHRASE_KEY_SEPARATOR};
use crate::tensor::{EmbeddingSet, Vector};

/// Whether unseen classes take part in training-time linguistic graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Inductive,
    #[default]
    Transductive,
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inductive" => Ok(GraphMode::Inductive),
            "transductive" => Ok(GraphMode::Transductive),
            other => Err(Error::Validation(format!(
                "mode must be \"inductive\" or \"transductive\", got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for GraphMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraphMode::Inductive => "inductive",
            GraphMode::Transductive => "transductive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticNode {
    pub embedding: Vector,
    pub modifier: usize,
    pub class: usize,
}

/// Phrase nodes for the top-`M` modifiers of every included class.
///
/// Nodes are stored class-major: the `M` nodes of `classes[j]` occupy
/// indices `j*M .. (j+1)*M` in descending relation-score order.
#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticGraph {
    pub kind: ModifierKind,
    pub slots: usize,
    pub classes: Vec<usize>,
    pub nodes: Vec<LinguisticNode>,
    /// Undirected edges `(a, b)` with `a < b`.
    pub edges: Vec<(usize, usize)>,
}

impl LinguisticGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn embeddings(&self) -> EmbeddingSet {
        EmbeddingSet::new(self.nodes.iter().map(|n| n.embedding.clone()).collect())
            .expect("linguistic nodes share the knowledge-base dimension")
    }

    /// Node indices of one class's subgraph, empty if the class is absent.
    pub fn class_nodes(&self, class: usize) -> Vec<usize> {
        match self.classes.iter().position(|&c| c == class) {
            Some(col) => (col * self.slots..(col + 1) * self.slots).collect(),
            None => Vec::new(),
        }
    }

    pub fn contains_class(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

/// Selects the `m` highest-scoring modifiers of every included class and
/// connects selected nodes that share a class or a modifier.
pub fn build_linguistic_graph(
    kb: &KnowledgeBase,
    kind: ModifierKind,
    m: usize,
    mode: GraphMode,
) -> Result<LinguisticGraph> {
    let rel = kb.relation(kind);
    if m == 0 || m > rel.modifiers.len() {
        return Err(Error::domain(format!(
            "M = {m} must lie in 1..={} ({kind} vocabulary size)",
            rel.modifiers.len()
        )));
    }
    let classes: Vec<usize> = match mode {
        GraphMode::Transductive => (0..kb.num_classes()).collect(),
        GraphMode::Inductive => kb.seen_classes().collect(),
    };

    let mut nodes = Vec::with_capacity(classes.len() * m);
    for &c in &classes {
        let scores = &rel.scores[c];
        let mut order: Vec<usize> = (0..rel.modifiers.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| rel.modifiers[a].cmp(&rel.modifiers[b]))
        });
        for &modifier in &order[..m] {
            let embedding = rel.phrase(modifier, c).cloned().ok_or_else(|| {
                Error::Validation(format!(
                    "missing {kind} phrase embedding for selected pair \"{}{PHRASE_KEY_SEPARATOR}{}\"",
                    rel.modifiers[modifier],
                    kb.classes()[c]
                ))
            })?;
            nodes.push(LinguisticNode {
                embedding,
                modifier,
                class: c,
            });
        }
    }

    let mut edges = Vec::new();
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            if nodes[a].class == nodes[b].class || nodes[a].modifier == nodes[b].modifier {
                edges.push((a, b));
            }
        }
    }
    Ok(LinguisticGraph {
        kind,
        slots: m,
        classes,
        nodes,
        edges,
    })
}
