//! Knowledge-base ingestion.
//!
//! A knowledge base lists object classes (seen first, then unseen), the part
//! and state vocabularies, relation scores between classes and modifiers,
//! and text embeddings for class names and for `(modifier, class)` phrases.
//! On disk it is a single JSON document; phrase maps are keyed by
//! `"<modifier>|<class>"`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{EmbeddingSet, Vector};

pub const PHRASE_KEY_SEPARATOR: char = '|';

/// Which modifier vocabulary a linguistic graph is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModifierKind {
    Part,
    State,
}

impl std::fmt::Display for ModifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModifierKind::Part => "part",
            ModifierKind::State => "state",
        })
    }
}

/// Serialized layout of a knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeBaseFile {
    pub seen_classes: Vec<String>,
    pub unseen_classes: Vec<String>,
    pub parts: Vec<String>,
    pub states: Vec<String>,
    pub part_scores: Vec<Vec<f64>>,
    pub state_scores: Vec<Vec<f64>>,
    /// Row 0 is the "no object" embedding, row `c + 1` belongs to class `c`.
    pub class_embeddings: Vec<Vec<f64>>,
    pub part_phrase_embeddings: BTreeMap<String, Vec<f64>>,
    pub state_phrase_embeddings: BTreeMap<String, Vec<f64>>,
}

/// Relation scores and phrase embeddings for one modifier vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub modifiers: Vec<String>,
    /// `scores[class][modifier]`, finite and non-negative.
    pub scores: Vec<Vec<f64>>,
    /// Phrase embedding keyed by `(modifier, class)`.
    pub phrases: BTreeMap<(usize, usize), Vector>,
}

impl Relation {
    pub fn phrase(&self, modifier: usize, class: usize) -> Option<&Vector> {
        self.phrases.get(&(modifier, class))
    }
}

/// A validated knowledge base. Classes are indexed `0..num_classes()`,
/// seen classes first.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    classes: Vec<String>,
    num_seen: usize,
    dim: usize,
    text_embeddings: EmbeddingSet,
    parts: Relation,
    states: Relation,
}

impl KnowledgeBase {
    pub fn from_file_repr(file: KnowledgeBaseFile) -> Result<Self> {
        let num_seen = file.seen_classes.len();
        let classes: Vec<String> = file
            .seen_classes
            .iter()
            .chain(&file.unseen_classes)
            .cloned()
            .collect();
        if classes.is_empty() {
            return Err(Error::Validation(
                "knowledge base declares no classes".into(),
            ));
        }
        check_unique("class", &classes)?;
        check_unique("part", &file.parts)?;
        check_unique("state", &file.states)?;

        if file.class_embeddings.len() != classes.len() + 1 {
            return Err(Error::Validation(format!(
                "class_embeddings needs {} rows (no-object + {} classes), got {}",
                classes.len() + 1,
                classes.len(),
                file.class_embeddings.len()
            )));
        }
        let text = file
            .class_embeddings
            .iter()
            .enumerate()
            .map(|(i, row)| {
                Vector::new(row.clone())
                    .map_err(|e| Error::Validation(format!("class_embeddings[{i}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = text[0].dim();
        let text_embeddings = EmbeddingSet::new(text)
            .map_err(|e| Error::Validation(format!("class_embeddings: {e}")))?;

        let parts = build_relation(
            ModifierKind::Part,
            &classes,
            file.parts,
            file.part_scores,
            file.part_phrase_embeddings,
            dim,
        )?;
        let states = build_relation(
            ModifierKind::State,
            &classes,
            file.states,
            file.state_scores,
            file.state_phrase_embeddings,
            dim,
        )?;
        Ok(KnowledgeBase {
            classes,
            num_seen,
            dim,
            text_embeddings,
            parts,
            states,
        })
    }

    pub fn to_file_repr(&self) -> KnowledgeBaseFile {
        let dump = |rel: &Relation| -> BTreeMap<String, Vec<f64>> {
            rel.phrases
                .iter()
                .map(|(&(m, c), v)| {
                    (
                        format!(
                            "{}{PHRASE_KEY_SEPARATOR}{}",
                            rel.modifiers[m], self.classes[c]
                        ),
                        v.as_slice().to_vec(),
                    )
                })
                .collect()
        };
        KnowledgeBaseFile {
            seen_classes: self.classes[..self.num_seen].to_vec(),
            unseen_classes: self.classes[self.num_seen..].to_vec(),
            parts: self.parts.modifiers.clone(),
            states: self.states.modifiers.clone(),
            part_scores: self.parts.scores.clone(),
            state_scores: self.states.scores.clone(),
            class_embeddings: self
                .text_embeddings
                .iter()
                .map(|v| v.as_slice().to_vec())
                .collect(),
            part_phrase_embeddings: dump(&self.parts),
            state_phrase_embeddings: dump(&self.states),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_repr()).expect("knowledge base serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: KnowledgeBaseFile =
            serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))?;
        Self::from_file_repr(file)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_seen(&self) -> usize {
        self.num_seen
    }

    pub fn is_seen(&self, class: usize) -> bool {
        class < self.num_seen
    }

    pub fn seen_classes(&self) -> std::ops::Range<usize> {
        0..self.num_seen
    }

    pub fn unseen_classes(&self) -> std::ops::Range<usize> {
        self.num_seen..self.classes.len()
    }

    /// All text embeddings; index 0 is "no object", index `c + 1` is class `c`.
    pub fn text_embeddings(&self) -> &EmbeddingSet {
        &self.text_embeddings
    }

    pub fn class_embedding(&self, class: usize) -> &Vector {
        &self.text_embeddings[class + 1]
    }

    pub fn relation(&self, kind: ModifierKind) -> &Relation {
        match kind {
            ModifierKind::Part => &self.parts,
            ModifierKind::State => &self.states,
        }
    }
}

fn check_unique(what: &str, names: &[String]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if n.contains(PHRASE_KEY_SEPARATOR) {
            return Err(Error::Validation(format!(
                "{what} name {n:?} contains the key separator"
            )));
        }
        if !seen.insert(n) {
            return Err(Error::Validation(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(())
}

fn build_relation(
    kind: ModifierKind,
    classes: &[String],
    modifiers: Vec<String>,
    scores: Vec<Vec<f64>>,
    phrases: BTreeMap<String, Vec<f64>>,
    dim: usize,
) -> Result<Relation> {
    if scores.len() != classes.len() {
        return Err(Error::Validation(format!(
            "{kind}_scores has {} rows, expected one per class ({})",
            scores.len(),
            classes.len()
        )));
    }
    for (c, row) in scores.iter().enumerate() {
        if row.len() != modifiers.len() {
            return Err(Error::Validation(format!(
                "{kind}_scores[{c}] has {} entries, expected {}",
                row.len(),
                modifiers.len()
            )));
        }
        if let Some(m) = row.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Validation(format!(
                "{kind}_scores[{c}][{m}] = {} is not a finite non-negative score",
                row[m]
            )));
        }
    }
    let mod_index: BTreeMap<&str, usize> = modifiers
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let class_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut parsed = BTreeMap::new();
    for (key, values) in phrases {
        let (m_name, c_name) = key.split_once(PHRASE_KEY_SEPARATOR).ok_or_else(|| {
            Error::Validation(format!("{kind} phrase key {key:?} lacks the '|' separator"))
        })?;
        let m = *mod_index.get(m_name).ok_or_else(|| {
            Error::Validation(format!(
                "{kind} phrase key {key:?} names unknown {kind} {m_name:?}"
            ))
        })?;
        let c = *class_index.get(c_name).ok_or_else(|| {
            Error::Validation(format!(
                "{kind} phrase key {key:?} names unknown class {c_name:?}"
            ))
        })?;
        if values.len() != dim {
            return Err(Error::Validation(format!(
                "{kind} phrase {key:?} has dimension {}, expected {dim}",
                values.len()
            )));
        }
        let v = Vector::new(values)
            .map_err(|e| Error::Validation(format!("{kind} phrase {key:?}: {e}")))?;
        if v.norm() == 0.0 {
            return Err(Error::Validation(format!(
                "{kind} phrase {key:?} is a zero vector"
            )));
        }
        parsed.insert((m, c), v);
    }
    // Every pair with a positive relation score is a selection candidate.
    for (c, row) in scores.iter().enumerate() {
        for (m, s) in row.iter().enumerate() {
            if *s > 0.0 && !parsed.contains_key(&(m, c)) {
                return Err(Error::Validation(format!(
                    "missing {kind} phrase embedding for \"{}{PHRASE_KEY_SEPARATOR}{}\"",
                    modifiers[m], classes[c]
                )));
            }
        }
    }
    Ok(Relation {
        modifiers,
        scores,
        phrases: parsed,
    })
}

pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KnowledgeBase::from_json(&text, path)
}
