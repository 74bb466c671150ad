use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{GraphMode, KnowledgeBase};
use crate::pipeline::benchmark::ToyScene;
use crate::pipeline::train::{ModelParams, TrainDiagnostics};
use crate::tensor::{cosine_similarity, Vector};

/// `2su / (s + u)`; both zero gives 0.
pub fn harmonic_mean(seen: f64, unseen: f64) -> Result<f64> {
    if !(seen >= 0.0 && unseen >= 0.0) || !seen.is_finite() || !unseen.is_finite() {
        return Err(Error::domain(format!(
            "harmonic mean needs finite non-negative inputs, got ({seen}, {unseen})"
        )));
    }
    if seen + unseen == 0.0 {
        log::warn!("seen and unseen mIoU are both zero; harmonic mean taken as 0");
        return Ok(0.0);
    }
    Ok(2.0 * seen * unseen / (seen + unseen))
}

/// Rounds to one decimal, the precision of reported percentages.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    pub seen: bool,
    /// Percent; `None` when the class never occurs in the ground truth.
    pub iou: Option<f64>,
    pub gt_cells: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingDiagnostics {
    pub mode: GraphMode,
    /// True when unseen classes were left out of both linguistic graphs.
    pub unseen_nodes_excluded: bool,
    pub part_graph_classes: Vec<String>,
    pub state_graph_classes: Vec<String>,
    pub spatial_mean_distinct: f64,
    pub channel_mean_distinct: f64,
    pub max_marginal_error: Option<f64>,
    pub mean_marginal_error: Option<f64>,
    pub unconverged_plans: usize,
}

impl MatchingDiagnostics {
    pub fn from_training(kb: &KnowledgeBase, mode: GraphMode, train: &TrainDiagnostics) -> Self {
        let names = |cs: &[usize]| {
            cs.iter()
                .map(|&c| kb.classes()[c].clone())
                .collect::<Vec<_>>()
        };
        let has_unseen = |cs: &[usize]| cs.iter().any(|&c| !kb.is_seen(c));
        let plans = train.spatial.plans + train.channel.plans;
        let total = train.spatial.marginal_error_total + train.channel.marginal_error_total;
        MatchingDiagnostics {
            mode,
            unseen_nodes_excluded: !has_unseen(&train.part_graph_classes)
                && !has_unseen(&train.state_graph_classes),
            part_graph_classes: names(&train.part_graph_classes),
            state_graph_classes: names(&train.state_graph_classes),
            spatial_mean_distinct: train.spatial.mean_distinct(),
            channel_mean_distinct: train.channel.mean_distinct(),
            max_marginal_error: (plans > 0).then(|| {
                train
                    .spatial
                    .max_marginal_error
                    .max(train.channel.max_marginal_error)
            }),
            mean_marginal_error: (plans > 0).then(|| total / plans as f64),
            unconverged_plans: train.spatial.unconverged + train.channel.unconverged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassIou>,
    pub seen_miou: f64,
    pub unseen_miou: f64,
    pub harmonic: f64,
    /// `confusion[gt][pred]` cell counts.
    pub confusion: Vec<Vec<u64>>,
    pub diagnostics: MatchingDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

impl MetricsReport {
    /// Human-readable table with one-decimal percentages.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>6} {:>8}\n", "class", "split", "IoU"));
        for c in &self.per_class {
            let iou = c.iou.map_or("n/a".to_string(), |v| format!("{v:.1}"));
            out.push_str(&format!(
                "{:<16} {:>6} {:>8}\n",
                c.name,
                if c.seen { "seen" } else { "unseen" },
                iou
            ));
        }
        out.push_str(&format!(
            "\n{:>8} {:>8} {:>8}\n{:>8.1} {:>8.1} {:>8.1}\n",
            "seen", "unseen", "hIoU", self.seen_miou, self.unseen_miou, self.harmonic
        ));
        out
    }
}

/// Per-class IoU (fraction) from a confusion matrix; `None` for classes
/// absent from the ground truth.
pub fn iou_from_confusion(confusion: &[Vec<u64>]) -> Vec<Option<f64>> {
    (0..confusion.len())
        .map(|c| {
            let gt: u64 = confusion[c].iter().sum();
            if gt == 0 {
                return None;
            }
            let tp = confusion[c][c];
            let fp: u64 = (0..confusion.len())
                .filter(|&r| r != c)
                .map(|r| confusion[r][c])
                .sum();
            let fn_ = gt - tp;
            Some(tp as f64 / (tp + fp + fn_) as f64)
        })
        .collect()
}

/// Classifies every cell by the most similar class embedding of its
/// projected feature and scores the result against the ground truth.
pub fn evaluate(
    params: &ModelParams,
    scenes: &[ToyScene],
    kb: &KnowledgeBase,
    mode: GraphMode,
    training: &TrainDiagnostics,
) -> Result<MetricsReport> {
    let n = kb.num_classes();
    let classes: Vec<&Vector> = (0..n).map(|c| kb.class_embedding(c)).collect();
    let mut confusion = vec![vec![0u64; n]; n];
    for scene in scenes {
        for (feature, &gt) in scene.features.iter().zip(&scene.labels) {
            if gt >= n {
                return Err(Error::Index { index: gt, len: n });
            }
            let q = params.project(feature)?;
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, t) in classes.iter().enumerate() {
                let s = cosine_similarity(&q, t)?;
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            confusion[gt][best] += 1;
        }
    }
    let ious = iou_from_confusion(&confusion);
    let per_class: Vec<ClassIou> = ious
        .iter()
        .enumerate()
        .map(|(c, iou)| {
            if iou.is_none() {
                log::info!(
                    "class {} never occurs in the ground truth; excluded from mIoU",
                    kb.classes()[c]
                );
            }
            ClassIou {
                name: kb.classes()[c].clone(),
                seen: kb.is_seen(c),
                iou: iou.map(|v| 100.0 * v),
                gt_cells: confusion[c].iter().sum(),
            }
        })
        .collect();
    let mean = |seen: bool| {
        let vals: Vec<f64> = per_class
            .iter()
            .filter(|c| c.seen == seen)
            .filter_map(|c| c.iou)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let seen_miou = mean(true);
    let unseen_miou = mean(false);
    Ok(MetricsReport {
        per_class,
        seen_miou,
        unseen_miou,
        harmonic: harmonic_mean(seen_miou, unseen_miou)?,
        confusion,
        diagnostics: MatchingDiagnostics::from_training(kb, mode, training),
        manifest_digest: None,
    })
}
