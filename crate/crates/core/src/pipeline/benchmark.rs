//! Seeded synthetic benchmark: an ontology of classes built from shared
//! parts and states, grid scenes whose cells express one part of one object,
//! and the matching knowledge base.
//!
//! Visual prototypes live in feature space. Text prototypes are the same
//! concepts seen through a fixed random rotation blended with the identity
//! (`modality_gap` controls the blend), so a learned projection is needed
//! to carry features into the text space. Class prototypes are centered
//! over the whole label space and phrase embeddings over each relation
//! graph, as is usual for text embeddings.
//!
//! Draw order from the single generator: rotation noise, part prototypes,
//! state prototypes, class-specific directions, the no-object embedding,
//! knowledge-base distractor scores (class-major, parts then states),
//! training scenes, test scenes.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{KnowledgeBase, KnowledgeBaseFile};
use crate::tensor::{norm, Matrix};

/// Upper bound (exclusive) of the distractor noise added to relation scores.
pub const DISTRACTOR_MAX: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub parts: Vec<String>,
    pub states: Vec<String>,
}

/// Input description of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OntologySpec {
    pub dim: usize,
    pub parts: Vec<String>,
    pub states: Vec<String>,
    pub seen_classes: Vec<ClassSpec>,
    pub unseen_classes: Vec<ClassSpec>,
    /// Standard deviation of per-cell Gaussian feature noise.
    pub noise: f64,
    /// Grid `[height, width]` of every scene.
    pub grid: [usize; 2],
    /// Share of scenes held out for evaluation.
    pub test_fraction: f64,
    /// 0 = text space equals feature space, 1 = fully rotated.
    pub modality_gap: f64,
    /// Weight of the class's own random direction inside its prototype.
    pub identity_weight: f64,
    /// Weight of each owned part prototype inside a class prototype.
    pub part_weight: f64,
    /// Weight of each owned state prototype inside a class prototype.
    pub state_weight: f64,
    /// Query budget per scene; objects are dropped until their parts fit.
    pub max_queries: usize,
}

impl OntologySpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.seen_classes.is_empty() {
            return fail("at least one seen class is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for c in self.seen_classes.iter().chain(&self.unseen_classes) {
            if !names.insert(&c.name) {
                return fail(format!(
                    "class {:?} is declared twice (seen and unseen label spaces must be disjoint)",
                    c.name
                ));
            }
            if c.parts.len() < 2 || c.states.len() < 2 {
                return fail(format!(
                    "class {:?} must own at least 2 parts and 2 states",
                    c.name
                ));
            }
            for p in &c.parts {
                if !self.parts.contains(p) {
                    return fail(format!("class {:?} owns unknown part {p:?}", c.name));
                }
            }
            for s in &c.states {
                if !self.states.contains(s) {
                    return fail(format!("class {:?} owns unknown state {s:?}", c.name));
                }
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!(
                "test_fraction must lie in [0,1), got {}",
                self.test_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.modality_gap) {
            return fail(format!(
                "modality_gap must lie in [0,1], got {}",
                self.modality_gap
            ));
        }
        for (name, w) in [
            ("identity_weight", self.identity_weight),
            ("part_weight", self.part_weight),
            ("state_weight", self.state_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        let widest = self
            .seen_classes
            .iter()
            .chain(&self.unseen_classes)
            .map(|c| c.parts.len())
            .max()
            .unwrap_or(0);
        if widest > self.max_queries {
            return fail(format!(
                "max_queries {} cannot hold an object with {widest} parts",
                self.max_queries
            ));
        }
        let [h, w] = self.grid;
        if w < 3 || h < widest {
            return fail(format!(
                "grid {h}x{w} too small for 3 objects of {widest} parts"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyClass {
    pub name: String,
    pub seen: bool,
    pub parts: Vec<usize>,
    pub states: Vec<usize>,
    /// Unit-norm visual prototype.
    pub prototype: Vec<f64>,
}

/// The generated world: prototypes in feature space and in text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOntology {
    pub dim: usize,
    pub noise: f64,
    pub parts: Vec<String>,
    pub states: Vec<String>,
    /// Seen classes first.
    pub classes: Vec<OntologyClass>,
    pub part_prototypes: Vec<Vec<f64>>,
    pub state_prototypes: Vec<Vec<f64>>,
    /// Orthogonal map from feature space to text space.
    pub text_map: Matrix,
}

impl SyntheticOntology {
    pub fn num_seen(&self) -> usize {
        self.classes.iter().filter(|c| c.seen).count()
    }
}

/// One object in a scene and its part bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    /// `(part, cells)` bands, cells as row-major grid indices.
    pub regions: Vec<(usize, Vec<usize>)>,
}

impl SceneObject {
    pub fn cells(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .regions
            .iter()
            .flat_map(|(_, c)| c.iter().copied())
            .collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub height: usize,
    pub width: usize,
    /// Ground-truth class per cell.
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub objects: Vec<SceneObject>,
}

impl ToyScene {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSet {
    pub train: Vec<ToyScene>,
    pub test: Vec<ToyScene>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub ontology: SyntheticOntology,
    pub scenes: SceneSet,
    pub knowledge_base: KnowledgeBase,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Gram-Schmidt in place; rows must be linearly independent.
fn orthonormalize(rows: &mut [Vec<f64>]) {
    for i in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(i);
        let r = &mut rest[0];
        for prev in done.iter() {
            let proj: f64 = r.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (a, b) in r.iter_mut().zip(prev) {
                *a -= proj * b;
            }
        }
        let n = norm(r);
        r.iter_mut().for_each(|a| *a /= n);
    }
}

/// Orthonormalizes the rows of `(1-gap) I + gap G` by Gram-Schmidt.
fn text_rotation(rng: &mut ChaCha8Rng, d: usize, gap: f64) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in 0..d {
        let mut r: Vec<f64> = (0..d)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                gap * z / (d as f64).sqrt() + if i == j { 1.0 - gap } else { 0.0 }
            })
            .collect();
        for prev in &rows {
            let proj: f64 = r.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (a, b) in r.iter_mut().zip(prev) {
                *a -= proj * b;
            }
        }
        rows.push(normalize(r));
    }
    Matrix::from_rows(&rows).expect("square rotation")
}

fn apply(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.matvec(v).expect("dimension checked").into_inner()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn centroid<'a>(vs: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for v in vs {
        sum = add(&sum, v);
        n += 1;
    }
    sum.into_iter().map(|x| x / n.max(1) as f64).collect()
}

/// Splits `total` into `parts` contiguous lengths, each at least 1.
fn split_lengths(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

fn generate_scene(
    rng: &mut ChaCha8Rng,
    onto: &SyntheticOntology,
    pool: &[usize],
    spec: &OntologySpec,
    noise: &Normal<f64>,
) -> ToyScene {
    let [h, w] = spec.grid;
    let mut count = rng.random_range(1..=3usize).min(pool.len());
    let chosen: Vec<usize> = sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    while count > 1
        && chosen[..count]
            .iter()
            .map(|&c| onto.classes[c].parts.len())
            .sum::<usize>()
            > spec.max_queries
    {
        count -= 1;
    }
    let chosen = &chosen[..count];
    let widths = split_lengths(rng, w, count);

    let mut labels = vec![0; h * w];
    let mut features = vec![Vec::new(); h * w];
    let mut objects = Vec::with_capacity(count);
    let mut col0 = 0;
    for (&class, &width) in chosen.iter().zip(&widths) {
        let cls = &onto.classes[class];
        let heights = split_lengths(rng, h, cls.parts.len());
        let mut row0 = 0;
        let mut regions = Vec::new();
        for (&part, &height) in cls.parts.iter().zip(&heights) {
            let base = add(&cls.prototype, &onto.part_prototypes[part]);
            let mut cells = Vec::new();
            for r in row0..row0 + height {
                for c in col0..col0 + width {
                    let idx = r * w + c;
                    labels[idx] = class;
                    features[idx] = base.iter().map(|b| b + noise.sample(rng)).collect();
                    cells.push(idx);
                }
            }
            regions.push((part, cells));
            row0 += height;
        }
        objects.push(SceneObject { class, regions });
        col0 += width;
    }
    ToyScene {
        height: h,
        width: w,
        labels,
        features,
        objects,
    }
}

/// Builds the ontology, `scenes` scenes (the first share trains on seen
/// classes only, the rest mix all classes), and the knowledge base.
pub fn generate_benchmark(spec: &OntologySpec, scenes: usize, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let text_map = text_rotation(&mut rng, d, spec.modality_gap);
    let mut modifiers: Vec<Vec<f64>> = (0..spec.parts.len() + spec.states.len())
        .map(|_| unit_gaussian(&mut rng, d))
        .collect();
    if modifiers.len() <= d {
        orthonormalize(&mut modifiers);
    }
    let state_prototypes = modifiers.split_off(spec.parts.len());
    let part_prototypes = modifiers;
    let class_specs: Vec<(&ClassSpec, bool)> = spec
        .seen_classes
        .iter()
        .map(|c| (c, true))
        .chain(spec.unseen_classes.iter().map(|c| (c, false)))
        .collect();
    let part_idx: BTreeMap<&str, usize> = spec
        .parts
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let state_idx: BTreeMap<&str, usize> = spec
        .states
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();

    let mut classes = Vec::with_capacity(class_specs.len());
    for (cs, seen) in &class_specs {
        let unique = unit_gaussian(&mut rng, d);
        let parts: Vec<usize> = cs.parts.iter().map(|p| part_idx[p.as_str()]).collect();
        let states: Vec<usize> = cs.states.iter().map(|s| state_idx[s.as_str()]).collect();
        let mut proto: Vec<f64> = unique.iter().map(|v| spec.identity_weight * v).collect();
        for (members, protos, weight) in [
            (&parts, &part_prototypes, spec.part_weight),
            (&states, &state_prototypes, spec.state_weight),
        ] {
            for &i in members {
                let weighted: Vec<f64> = protos[i].iter().map(|v| weight * v).collect();
                proto = add(&proto, &weighted);
            }
        }
        classes.push(OntologyClass {
            name: cs.name.clone(),
            seen: *seen,
            parts,
            states,
            prototype: normalize(proto),
        });
    }
    // Centering keeps unrelated classes from sharing a common offset.
    let mean = centroid(classes.iter().map(|c| c.prototype.as_slice()), d);
    for c in classes.iter_mut() {
        let centered = sub(&c.prototype, &mean);
        if norm(&centered) < 1e-9 {
            return Err(Error::Validation(format!(
                "class {:?} coincides with the mean class prototype",
                c.name
            )));
        }
        c.prototype = normalize(centered);
    }
    let no_object = unit_gaussian(&mut rng, d);

    let onto = SyntheticOntology {
        dim: d,
        noise: spec.noise,
        parts: spec.parts.clone(),
        states: spec.states.clone(),
        classes,
        part_prototypes,
        state_prototypes,
        text_map,
    };

    // Knowledge base: ownership scores plus distractor noise.
    let n_classes = onto.classes.len();
    let mut part_scores = vec![vec![0.0; spec.parts.len()]; n_classes];
    let mut state_scores = vec![vec![0.0; spec.states.len()]; n_classes];
    for (c, cls) in onto.classes.iter().enumerate() {
        for (p, score) in part_scores[c].iter_mut().enumerate() {
            *score = if cls.parts.contains(&p) { 1.0 } else { 0.0 }
                + rng.random_range(0.0..DISTRACTOR_MAX);
        }
        for (s, score) in state_scores[c].iter_mut().enumerate() {
            *score = if cls.states.contains(&s) { 1.0 } else { 0.0 }
                + rng.random_range(0.0..DISTRACTOR_MAX);
        }
    }
    let text = |v: &[f64]| apply(&onto.text_map, v);
    let class_text: Vec<Vec<f64>> = onto.classes.iter().map(|c| text(&c.prototype)).collect();
    let mut class_embeddings = vec![no_object];
    class_embeddings.extend(class_text.iter().cloned());
    let mut part_phrases = BTreeMap::new();
    let mut state_phrases = BTreeMap::new();
    for (c, cls) in onto.classes.iter().enumerate() {
        for (p, name) in onto.parts.iter().enumerate() {
            part_phrases.insert(
                format!("{name}|{}", cls.name),
                add(&class_text[c], &text(&onto.part_prototypes[p])),
            );
        }
        for (s, name) in onto.states.iter().enumerate() {
            state_phrases.insert(
                format!("{name}|{}", cls.name),
                add(&class_text[c], &text(&onto.state_prototypes[s])),
            );
        }
    }
    for phrases in [&mut part_phrases, &mut state_phrases] {
        let mean = centroid(phrases.values().map(|v| v.as_slice()), d);
        for v in phrases.values_mut() {
            *v = sub(v, &mean);
        }
    }
    let kb = KnowledgeBase::from_file_repr(KnowledgeBaseFile {
        seen_classes: spec.seen_classes.iter().map(|c| c.name.clone()).collect(),
        unseen_classes: spec.unseen_classes.iter().map(|c| c.name.clone()).collect(),
        parts: spec.parts.clone(),
        states: spec.states.clone(),
        part_scores,
        state_scores,
        class_embeddings,
        part_phrase_embeddings: part_phrases,
        state_phrase_embeddings: state_phrases,
    })?;

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Validation(e.to_string()))?;
    let n_test = (scenes as f64 * spec.test_fraction).round() as usize;
    let n_train = scenes - n_test;
    let seen_pool: Vec<usize> = (0..onto.num_seen()).collect();
    let all_pool: Vec<usize> = (0..n_classes).collect();
    let train = (0..n_train)
        .map(|_| generate_scene(&mut rng, &onto, &seen_pool, spec, &noise))
        .collect();
    let test = (0..n_test)
        .map(|_| generate_scene(&mut rng, &onto, &all_pool, spec, &noise))
        .collect();

    Ok(Benchmark {
        ontology: onto,
        scenes: SceneSet { train, test },
        knowledge_base: kb,
    })
}
