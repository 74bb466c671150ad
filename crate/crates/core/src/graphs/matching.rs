use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graphs::linguistic::LinguisticGraph;
use crate::graphs::visual::VisualGraph;
use crate::sinkhorn::{
    affinity_matrix, argmax_match, argmax_rows, sinkhorn_normalize, MarginalSpec, SinkhornParams,
};
use crate::tensor::Vector;

/// How the affinity between two class subgraphs becomes hard matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatchStrategy {
    /// Entropic transport plan under the subgraph marginals, then row argmax.
    Sinkhorn(SinkhornParams),
    /// Row argmax of the raw affinity.
    RawArgmax,
}

/// Matches for one class. `linguistic[i]` is the graph index of the
/// linguistic node matched to visual node `visual[i]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassMatch {
    pub class: usize,
    pub visual: Vec<usize>,
    pub linguistic: Vec<usize>,
    /// Marginal error of the plan; `None` for raw argmax or skipped classes.
    pub marginal_error: Option<f64>,
    pub converged: bool,
}

impl ClassMatch {
    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }

    pub fn distinct_linguistic(&self) -> usize {
        let mut v = self.linguistic.clone();
        v.sort_unstable();
        v.dedup();
        v.len()
    }
}

/// Extracts the class-`class` subgraphs of both graphs, relaxes the matching
/// program between them, and returns the most matched linguistic node for
/// every visual node. A class missing from either graph yields an empty
/// match.
pub fn match_class_subgraphs(
    vgraph: &VisualGraph,
    lgraph: &LinguisticGraph,
    class: usize,
    strategy: &MatchStrategy,
) -> Result<ClassMatch> {
    let visual = vgraph.class_nodes(class);
    let linguistic = lgraph.class_nodes(class);
    if visual.is_empty() || linguistic.is_empty() {
        log::debug!(
            "class {class} skipped: {} visual / {} linguistic nodes",
            visual.len(),
            linguistic.len()
        );
        return Ok(ClassMatch {
            class,
            ..ClassMatch::default()
        });
    }
    let vis: Vec<Vector> = visual
        .iter()
        .map(|&i| vgraph.nodes[i].embedding.clone())
        .collect();
    let lin: Vec<Vector> = linguistic
        .iter()
        .map(|&j| lgraph.nodes[j].embedding.clone())
        .collect();
    let affinity = affinity_matrix(&vis, &lin)?;
    let (local, marginal_error, converged) = match strategy {
        MatchStrategy::Sinkhorn(params) => {
            let spec = MarginalSpec::for_subgraphs(vis.len(), lin.len())?;
            let plan = sinkhorn_normalize(&affinity, &spec, params)?;
            (
                argmax_match(&plan),
                Some(plan.marginal_error),
                plan.converged,
            )
        }
        MatchStrategy::RawArgmax => (argmax_rows(&affinity), None, true),
    };
    Ok(ClassMatch {
        class,
        linguistic: local.into_iter().map(|j| linguistic[j]).collect(),
        visual,
        marginal_error,
        converged,
    })
}
