//! Visual and linguistic graphs, subgraph matching, and supervision masks.

pub mod knowledge;
pub mod linguistic;
pub mod matching;
pub mod supervision;
pub mod visual;

pub use knowledge::{
    load_knowledge_base, KnowledgeBase, KnowledgeBaseFile, ModifierKind, Relation,
};
pub use linguistic::{build_linguistic_graph, GraphMode, LinguisticGraph, LinguisticNode};
pub use matching::{match_class_subgraphs, ClassMatch, MatchStrategy};
pub use supervision::{derive_supervision_mask, supervision_mask, NodeMatch};
pub use visual::{
    build_channel_visual_graph, build_spatial_visual_graph, class_representatives, MatchedQuery,
    NodeOrigin, ProjectionWeights, VisualGraph, VisualNode,
};
