use crate::graphs::linguistic::LinguisticGraph;
use crate::losses::{Label, TriStateLabelMatrix};

/// The hard match of one visual node: the modifier of its most matched
/// linguistic node, and the class the visual node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeMatch {
    pub modifier: usize,
    pub visual_class: usize,
}

/// Labels every linguistic node for one visual node: positive when it
/// carries the matched modifier, negative when both modifier and class
/// differ, ignored when only the modifier differs.
pub fn supervision_mask(m: NodeMatch, graph: &LinguisticGraph) -> TriStateLabelMatrix {
    let cells = graph
        .nodes
        .iter()
        .map(|n| {
            if n.modifier == m.modifier {
                Label::Positive
            } else if n.class != m.visual_class {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    TriStateLabelMatrix::new(graph.slots, graph.classes.clone(), cells)
        .expect("linguistic graph has slots x classes nodes")
}

pub fn derive_supervision_mask(
    matches: &[NodeMatch],
    graph: &LinguisticGraph,
) -> Vec<TriStateLabelMatrix> {
    matches
        .iter()
        .map(|&m| supervision_mask(m, graph))
        .collect()
}
