use std::path::PathBuf;

use vlmatch::assignment::hungarian;
use vlmatch::graphs::*;
use vlmatch::losses::Label;
use vlmatch::sinkhorn::{affinity_matrix, SinkhornParams};
use vlmatch::tensor::{Matrix, Vector};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn toy_kb() -> KnowledgeBase {
    load_knowledge_base(fixture("toy_kb.json")).unwrap()
}

fn v(x: &[f64]) -> Vector {
    Vector::new(x.to_vec()).unwrap()
}

fn names(kb: &KnowledgeBase, g: &LinguisticGraph) -> Vec<(String, String)> {
    let rel = kb.relation(g.kind);
    g.nodes
        .iter()
        .map(|n| {
            (
                rel.modifiers[n.modifier].clone(),
                kb.classes()[n.class].clone(),
            )
        })
        .collect()
}

fn pairs(list: &[(&str, &str)]) -> Vec<(String, String)> {
    list.iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

#[test]
fn toy_kb_round_trips_bit_identically() {
    let kb = toy_kb();
    assert_eq!(kb.num_classes(), 4);
    assert_eq!(kb.num_seen(), 3);
    assert_eq!(kb.relation(ModifierKind::Part).modifiers.len(), 6);
    let once = kb.to_json();
    let again = KnowledgeBase::from_json(&once, "roundtrip".as_ref()).unwrap();
    assert_eq!(again, kb);
    assert_eq!(again.to_json(), once);
    for (a, b) in kb
        .text_embeddings()
        .iter()
        .zip(again.text_embeddings().iter())
    {
        let bits = |x: &Vector| x.as_slice().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn top_m_matches_hand_enumeration() {
    let kb = toy_kb();
    let g = build_linguistic_graph(&kb, ModifierKind::Part, 3, GraphMode::Transductive).unwrap();
    // person: leg and tail tie at 0.6, "leg" sorts first.
    let expected = pairs(&[
        ("eye", "person"),
        ("finger", "person"),
        ("leg", "person"),
        ("wing", "bird"),
        ("beak", "bird"),
        ("eye", "bird"),
        ("tail", "cat"),
        ("eye", "cat"),
        ("leg", "cat"),
        ("leg", "dog"),
        ("tail", "dog"),
        ("eye", "dog"),
    ]);
    assert_eq!(names(&kb, &g), expected);
    assert_eq!(g.len(), 3 * 4);

    // Edges: exactly the node pairs sharing a class or a part.
    let mut hand = Vec::new();
    for a in 0..expected.len() {
        for b in a + 1..expected.len() {
            if expected[a].0 == expected[b].0 || expected[a].1 == expected[b].1 {
                hand.push((a, b));
            }
        }
    }
    assert_eq!(g.edges, hand);
}

#[test]
fn single_slot_picks_the_top_part() {
    let kb = toy_kb();
    let g = build_linguistic_graph(&kb, ModifierKind::Part, 1, GraphMode::Transductive).unwrap();
    let bird = g.class_nodes(1);
    assert_eq!(bird.len(), 1);
    assert_eq!(
        kb.relation(ModifierKind::Part).modifiers[g.nodes[bird[0]].modifier],
        "wing"
    );
}

#[test]
fn inductive_drops_unseen_nodes() {
    let kb = toy_kb();
    for kind in [ModifierKind::Part, ModifierKind::State] {
        let t = build_linguistic_graph(&kb, kind, 2, GraphMode::Transductive).unwrap();
        let i = build_linguistic_graph(&kb, kind, 2, GraphMode::Inductive).unwrap();
        assert_eq!(i.len(), 2 * kb.num_seen());
        let t_seen: Vec<_> = t
            .nodes
            .iter()
            .filter(|n| kb.is_seen(n.class))
            .map(|n| (n.modifier, n.class))
            .collect();
        let i_all: Vec<_> = i.nodes.iter().map(|n| (n.modifier, n.class)).collect();
        assert_eq!(t_seen, i_all);
    }
}

#[test]
fn oversized_m_is_rejected() {
    let kb = toy_kb();
    assert!(build_linguistic_graph(&kb, ModifierKind::State, 5, GraphMode::Transductive).is_err());
    assert!(build_linguistic_graph(&kb, ModifierKind::State, 4, GraphMode::Transductive).is_ok());
}

#[test]
fn selection_with_missing_phrase_fails_naming_the_pair() {
    let mut file = toy_kb().to_file_repr();
    // Zero score keeps the file loadable; M = 6 then selects the pair.
    file.part_phrase_embeddings.remove("wing|dog");
    let kb = KnowledgeBase::from_file_repr(file).unwrap();
    assert!(build_linguistic_graph(&kb, ModifierKind::Part, 3, GraphMode::Transductive).is_ok());
    let err = build_linguistic_graph(&kb, ModifierKind::Part, 6, GraphMode::Transductive)
        .unwrap_err()
        .to_string();
    assert!(err.contains("wing|dog"), "{err}");
}

#[test]
fn supervision_example_from_cat_eye() {
    let kb = toy_kb();
    let g = build_linguistic_graph(&kb, ModifierKind::Part, 3, GraphMode::Transductive).unwrap();
    let rel = kb.relation(ModifierKind::Part);
    let idx = |n: &str| rel.modifiers.iter().position(|m| m == n).unwrap();
    let cls = |n: &str| kb.classes().iter().position(|m| m == n).unwrap();
    let mask = supervision_mask(
        NodeMatch {
            modifier: idx("eye"),
            visual_class: cls("cat"),
        },
        &g,
    );
    let label_of = |part: &str, class: &str| {
        let node = g
            .nodes
            .iter()
            .position(|n| n.modifier == idx(part) && n.class == cls(class))
            .unwrap();
        mask.at_node(node)
    };
    assert_eq!(label_of("eye", "person"), Label::Positive);
    assert_eq!(label_of("eye", "bird"), Label::Positive);
    assert_eq!(label_of("finger", "person"), Label::Negative);
    assert_eq!(label_of("wing", "bird"), Label::Negative);
    assert_eq!(label_of("tail", "cat"), Label::Ignore);
}

#[test]
fn all_nodes_sharing_the_modifier_are_positive() {
    let kb = toy_kb();
    let mut g =
        build_linguistic_graph(&kb, ModifierKind::Part, 2, GraphMode::Transductive).unwrap();
    for n in &mut g.nodes {
        n.modifier = 4;
    }
    let mask = supervision_mask(
        NodeMatch {
            modifier: 4,
            visual_class: 0,
        },
        &g,
    );
    assert!(mask.cells().iter().all(|l| *l == Label::Positive));
}

#[test]
fn spatial_graph_selects_top_k_minus_one_per_class() {
    let weights = ProjectionWeights::init(3, 1, 0).unwrap();
    let matched = vec![
        MatchedQuery {
            embedding: v(&[1., 0., 0.]),
            class: 0,
            score: 0.9,
        },
        MatchedQuery {
            embedding: v(&[0., 1., 0.]),
            class: 2,
            score: 0.8,
        },
    ];
    let unmatched = vec![
        v(&[0.9, 0.1, 0.0]),
        v(&[0.1, 0.9, 0.0]),
        v(&[0.5, 0.5, 0.7]),
        v(&[0.95, -0.3, 0.1]),
        v(&[-0.2, 0.8, 0.4]),
        v(&[0.0, 0.0, 1.0]),
    ];
    let k = 3;
    let g = build_spatial_visual_graph(&matched, &unmatched, k, &weights).unwrap();

    // Brute force: sort every unmatched query by cosine to the anchor.
    let brute = |anchor: &Vector| {
        let mut scored: Vec<(f64, usize)> = unmatched
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let c = u.dot(anchor).unwrap() / (u.norm() * anchor.norm());
                (c, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.iter().take(k - 1).map(|s| s.1).collect::<Vec<_>>()
    };
    let picked = |class: usize| {
        g.class_nodes(class)
            .into_iter()
            .map(|i| match g.nodes[i].origin {
                NodeOrigin::Query(q) => q,
                _ => unreachable!(),
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(picked(0), brute(&matched[0].embedding));
    assert_eq!(picked(2), brute(&matched[1].embedding));
    assert_eq!(picked(0), vec![0, 3]);
    assert_eq!(picked(2), vec![1, 4]);
    // Identity projection keeps the query embedding.
    for n in &g.nodes {
        assert_eq!(n.embedding, n.input);
    }
    assert_eq!(g.edges, vec![(0, 1), (2, 3)]);
}

#[test]
fn spatial_graph_k_two_and_empty_unmatched() {
    let weights = ProjectionWeights::init(2, 1, 0).unwrap();
    let matched = vec![MatchedQuery {
        embedding: v(&[1., 0.]),
        class: 5,
        score: 0.5,
    }];
    let g =
        build_spatial_visual_graph(&matched, &[v(&[1., 0.1]), v(&[-1., 0.])], 2, &weights).unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g.nodes[0].origin, NodeOrigin::Query(0));
    let empty = build_spatial_visual_graph(&matched, &[], 3, &weights).unwrap();
    assert!(empty.is_empty());
    assert!(build_spatial_visual_graph(&matched, &[], 1, &weights).is_err());
}

#[test]
fn channel_graph_hand_computation() {
    let mut weights = ProjectionWeights::init(4, 2, 9).unwrap();
    weights.channel =
        Matrix::from_rows(&[vec![1., 2.], vec![0., 1.], vec![-1., 0.], vec![3., -2.]]).unwrap();
    let matched = vec![
        MatchedQuery {
            embedding: v(&[1., 2., 3., 4.]),
            class: 1,
            score: 0.4,
        },
        MatchedQuery {
            embedding: v(&[9., 9., 9., 9.]),
            class: 1,
            score: 0.3,
        },
    ];
    let g = build_channel_visual_graph(&matched, 2, &weights).unwrap();
    assert_eq!(g.len(), 2);
    // Group (1,2): [1+4, 2, -1, 3-4]; group (3,4): [3+8, 4, -3, 9-8].
    assert_eq!(g.nodes[0].embedding.as_slice(), &[5., 2., -1., -1.]);
    assert_eq!(g.nodes[1].embedding.as_slice(), &[11., 4., -3., 1.]);
    assert_eq!(
        g.nodes[1].origin,
        NodeOrigin::ChannelGroup { query: 0, group: 1 }
    );
}

#[test]
fn channel_graph_counts_and_divisibility() {
    let weights = ProjectionWeights::init(8, 4, 1).unwrap();
    let matched: Vec<MatchedQuery> = (0..3)
        .map(|c| MatchedQuery {
            embedding: v(&[1., 2., 3., 4., 5., 6., 7., 8.]),
            class: c,
            score: 1.0,
        })
        .collect();
    let g = build_channel_visual_graph(&matched, 4, &weights).unwrap();
    for c in 0..3 {
        assert_eq!(g.class_nodes(c).len(), 4);
    }
    assert!(ProjectionWeights::init(8, 3, 1).is_err());
    assert!(build_channel_visual_graph(&matched, 3, &weights).is_err());

    // R = 1: one node per class, a fixed linear image of the query.
    let w1 = ProjectionWeights::init(8, 1, 1).unwrap();
    let g1 = build_channel_visual_graph(&matched[..1], 1, &w1).unwrap();
    assert_eq!(g1.len(), 1);
    assert_eq!(
        g1.nodes[0].embedding,
        w1.channel.matvec(matched[0].embedding.as_slice()).unwrap()
    );
}

fn one_class_linguistic(embeddings: Vec<Vector>, class: usize) -> LinguisticGraph {
    let slots = embeddings.len();
    LinguisticGraph {
        kind: ModifierKind::Part,
        slots,
        classes: vec![class],
        nodes: embeddings
            .into_iter()
            .enumerate()
            .map(|(m, embedding)| LinguisticNode {
                embedding,
                modifier: m,
                class,
            })
            .collect(),
        edges: vec![],
    }
}

fn one_class_visual(embeddings: Vec<Vector>, class: usize) -> VisualGraph {
    let weights = ProjectionWeights::init(embeddings[0].dim(), 1, 0).unwrap();
    let matched = vec![MatchedQuery {
        embedding: embeddings[0].clone(),
        class,
        score: 1.0,
    }];
    let mut g =
        build_spatial_visual_graph(&matched, &embeddings, embeddings.len() + 1, &weights).unwrap();
    g.nodes.sort_by_key(|n| match n.origin {
        NodeOrigin::Query(q) => q,
        _ => 0,
    });
    g
}

#[test]
fn single_visual_node_is_forced_onto_single_linguistic_node() {
    let vg = one_class_visual(vec![v(&[0.3, -0.8])], 0);
    let lg = one_class_linguistic(vec![v(&[-1.0, 0.2])], 0);
    let m = match_class_subgraphs(
        &vg,
        &lg,
        0,
        &MatchStrategy::Sinkhorn(SinkhornParams::default()),
    )
    .unwrap();
    assert_eq!(m.linguistic, vec![0]);
    assert!(m.converged);
}

#[test]
fn dominant_pairings_follow_hungarian_on_negated_affinity() {
    let e = |i: usize| {
        let mut x = vec![0.05; 4];
        x[i] = 1.0;
        v(&x)
    };
    let vis = vec![e(2), e(0), e(3), e(1)];
    let lin = vec![e(0), e(1), e(2), e(3)];
    let vg = one_class_visual(vis.clone(), 7);
    let lg = one_class_linguistic(lin.clone(), 7);
    let params = SinkhornParams {
        epsilon: 0.02,
        ..SinkhornParams::default()
    };
    let m = match_class_subgraphs(&vg, &lg, 7, &MatchStrategy::Sinkhorn(params)).unwrap();

    let mut neg = affinity_matrix(&vis, &lin).unwrap();
    neg.scale(-1.0);
    let oracle = hungarian(&neg).unwrap();
    let expected: Vec<usize> = oracle.pairs.iter().map(|p| p.1).collect();
    let got: Vec<usize> = m
        .visual
        .iter()
        .zip(&m.linguistic)
        .map(|(_, &l)| l)
        .collect();
    assert_eq!(got, expected);
    assert_eq!(got, vec![2, 0, 3, 1]);
}

#[test]
fn absent_class_yields_empty_match() {
    let vg = one_class_visual(vec![v(&[1.0, 0.0])], 0);
    let lg = one_class_linguistic(vec![v(&[1.0, 0.0])], 0);
    let m = match_class_subgraphs(&vg, &lg, 3, &MatchStrategy::RawArgmax).unwrap();
    assert!(m.is_empty());
}

#[test]
fn raw_argmax_can_collapse_where_sinkhorn_spreads() {
    // Two visual nodes both closest to linguistic node 0.
    let vg = one_class_visual(vec![v(&[1.0, 0.3]), v(&[1.0, 0.6])], 0);
    let lg = one_class_linguistic(vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])], 0);
    let raw = match_class_subgraphs(&vg, &lg, 0, &MatchStrategy::RawArgmax).unwrap();
    assert_eq!(raw.distinct_linguistic(), 1);
    let params = SinkhornParams {
        epsilon: 0.05,
        ..SinkhornParams::default()
    };
    let sk = match_class_subgraphs(&vg, &lg, 0, &MatchStrategy::Sinkhorn(params)).unwrap();
    assert_eq!(sk.distinct_linguistic(), 2);
}

#[test]
fn graph_construction_is_bit_deterministic() {
    let kb = toy_kb();
    let a = build_linguistic_graph(&kb, ModifierKind::State, 2, GraphMode::Transductive).unwrap();
    let b = build_linguistic_graph(&kb, ModifierKind::State, 2, GraphMode::Transductive).unwrap();
    assert_eq!(a, b);
    let w1 = ProjectionWeights::init(8, 4, 42).unwrap();
    let w2 = ProjectionWeights::init(8, 4, 42).unwrap();
    assert_eq!(w1, w2);
}
