//! Candidate HOI targets. In weak mode every human detection is paired with
//! every detection of each labelled noun; in strong mode targets come straight
//! from the planted ground truth.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndtensor::{Real, Tensor};
use serde::Serialize;

use crate::boxes::BBox;
use crate::scenegen::{Detection, Scene, VocabConfig, HUMAN};

pub const DEFAULT_CAP: usize = 64;

/// Where a target row came from. For weak targets the indices point into the
/// scene's detections and label list; for strong targets into its instances
/// and interactions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub human: usize,
    pub object: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetRow {
    pub human: BBox,
    pub object: BBox,
    /// Sorted, deduplicated verb ids.
    pub verbs: Vec<usize>,
    pub noun: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetSet {
    pub rows: Vec<TargetRow>,
    pub num_verbs: usize,
    pub num_nouns: usize,
    /// Labels that could not be localized in the detections.
    pub warnings: Vec<String>,
}

impl TargetSet {
    pub fn empty(vocab: &VocabConfig) -> Self {
        Self {
            rows: Vec::new(),
            num_verbs: vocab.num_verbs,
            num_nouns: vocab.num_nouns,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn matrix<T: Real>(&self, cols: usize, f: impl Fn(&TargetRow, usize) -> f64) -> Tensor<T> {
        Tensor::from_fn(&[self.rows.len(), cols], |k| T::lit(f(&self.rows[k / cols], k % cols)))
    }

    /// T×4 human boxes.
    pub fn human_matrix<T: Real>(&self) -> Tensor<T> {
        self.matrix(4, |r, c| r.human.to_array()[c])
    }

    /// T×4 object boxes.
    pub fn object_matrix<T: Real>(&self) -> Tensor<T> {
        self.matrix(4, |r, c| r.object.to_array()[c])
    }

    /// T×V multi-hot verbs.
    pub fn verb_matrix<T: Real>(&self) -> Tensor<T> {
        self.matrix(self.num_verbs, |r, c| if r.verbs.contains(&c) { 1.0 } else { 0.0 })
    }

    /// T×N one-hot nouns.
    pub fn noun_matrix<T: Real>(&self) -> Tensor<T> {
        self.matrix(self.num_nouns, |r, c| if r.noun == c { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub cap: usize,
    /// Merge labels sharing a (human, object, noun) triple into one
    /// multi-hot row.
    pub merge_verbs: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            merge_verbs: true,
        }
    }
}

/// Exhaustively pairs human detections with detections of each labelled noun.
/// Rows are ranked by `human score × object score` (ties by human, object,
/// first label index) and truncated to `cfg.cap`.
pub fn build_targets(
    detections: &[Detection],
    labels: &[(usize, usize)],
    vocab: &VocabConfig,
    cfg: &TargetConfig,
) -> TargetSet {
    let mut set = TargetSet::empty(vocab);
    let humans: Vec<usize> = (0..detections.len())
        .filter(|&k| detections[k].category == HUMAN)
        .collect();

    // key: (human det, object det, noun) or, unmerged, plus the label index.
    let mut rows: BTreeMap<(usize, usize, usize, usize), TargetRow> = BTreeMap::new();
    for (li, &(verb, noun)) in labels.iter().enumerate() {
        if verb >= vocab.num_verbs || noun >= vocab.num_nouns {
            set.warnings.push(format!("label {li} ({verb},{noun}) outside vocabulary"));
            continue;
        }
        let objects: Vec<usize> = (0..detections.len())
            .filter(|&k| detections[k].category == noun)
            .collect();
        if objects.is_empty() {
            set.warnings.push(format!("label {li} ({verb},{noun}): no detection of noun {noun}"));
            continue;
        }
        if humans.is_empty() {
            set.warnings.push(format!("label {li} ({verb},{noun}): no human detection"));
            continue;
        }
        for &h in &humans {
            for &o in &objects {
                if o == h {
                    continue;
                }
                let key = (h, o, noun, if cfg.merge_verbs { 0 } else { li });
                let row = rows.entry(key).or_insert_with(|| TargetRow {
                    human: detections[h].bbox,
                    object: detections[o].bbox,
                    verbs: Vec::new(),
                    noun,
                    provenance: Provenance {
                        human: h,
                        object: o,
                        labels: Vec::new(),
                    },
                });
                if !row.verbs.contains(&verb) {
                    row.verbs.push(verb);
                    row.verbs.sort_unstable();
                }
                row.provenance.labels.push(li);
            }
        }
    }

    let mut rows: Vec<TargetRow> = rows.into_values().collect();
    let score = |r: &TargetRow| detections[r.provenance.human].score * detections[r.provenance.object].score;
    rows.sort_by(|a, b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(Ordering::Equal)
            .then(a.provenance.human.cmp(&b.provenance.human))
            .then(a.provenance.object.cmp(&b.provenance.object))
            .then(a.provenance.labels[0].cmp(&b.provenance.labels[0]))
    });
    rows.truncate(cfg.cap);
    set.rows = rows;
    set
}

/// One row per planted (human, object) pair with ground-truth boxes; verbs on
/// the same pair are merged.
pub fn build_targets_strong(scene: &Scene, vocab: &VocabConfig) -> TargetSet {
    let mut set = TargetSet::empty(vocab);
    for (k, it) in scene.interactions.iter().enumerate() {
        if let Some(row) = set
            .rows
            .iter_mut()
            .find(|r| r.provenance.human == it.human && r.provenance.object == it.object)
        {
            if !row.verbs.contains(&it.verb) {
                row.verbs.push(it.verb);
                row.verbs.sort_unstable();
            }
            row.provenance.labels.push(k);
            continue;
        }
        set.rows.push(TargetRow {
            human: scene.instances[it.human].bbox,
            object: scene.instances[it.object].bbox,
            verbs: vec![it.verb],
            noun: it.noun,
            provenance: Provenance {
                human: it.human,
                object: it.object,
                labels: vec![k],
            },
        });
    }
    set
}
