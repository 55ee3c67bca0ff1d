use serde::{Deserialize, Serialize};

use super::SensorWindow;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// An absent key means no held-out class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_subject: Option<usize>,
    /// Domain the train/validation data come from; all others are foreign.
    pub source_domain: usize,
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            held_out_class: Some(5),
            held_out_subject: Some(7),
            source_domain: 0,
            train_fraction: 0.8,
        }
    }
}

/// Train/validation plus the three shifted test sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioSet {
    pub train: Vec<SensorWindow>,
    pub validation: Vec<SensorWindow>,
    /// Label shift: only the held-out class.
    pub unseen_class: Vec<SensorWindow>,
    /// Covariate shift: the held-out subject, in-scope classes only.
    pub unseen_subject: Vec<SensorWindow>,
    /// Domain shift: every window from a foreign domain.
    pub unseen_dataset: Vec<SensorWindow>,
}

impl ScenarioSet {
    /// Sorted class ids present in the training split.
    pub fn train_labels(&self) -> Vec<usize> {
        let mut labels: Vec<usize> = self.train.iter().map(|w| w.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

pub fn build_scenarios(
    windows: &[SensorWindow],
    spec: &SplitSpec,
    rng: &mut RngState,
) -> Result<ScenarioSet> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {} must lie in (0, 1)",
            spec.train_fraction
        )));
    }
    let source = |w: &&SensorWindow| w.domain == spec.source_domain;
    if let Some(c) = spec.held_out_class {
        if !windows.iter().filter(source).any(|w| w.label == c) {
            return Err(Error::InvalidArgument(format!(
                "held-out class {c} does not occur in the source domain"
            )));
        }
    }
    if let Some(s) = spec.held_out_subject {
        if !windows.iter().filter(source).any(|w| w.subject == s) {
            return Err(Error::InvalidArgument(format!(
                "held-out subject {s} does not occur in the source domain"
            )));
        }
    }

    let is_class = |w: &SensorWindow| spec.held_out_class == Some(w.label);
    let is_subject = |w: &SensorWindow| spec.held_out_subject == Some(w.subject);

    let mut set = ScenarioSet::default();
    let mut eligible = Vec::new();
    for w in windows {
        if w.domain != spec.source_domain {
            set.unseen_dataset.push(w.clone());
        } else if is_class(w) {
            set.unseen_class.push(w.clone());
        } else if is_subject(w) {
            set.unseen_subject.push(w.clone());
        } else {
            eligible.push(w.clone());
        }
    }

    rng.shuffle(&mut eligible);
    let n_train = (eligible.len() as f64 * spec.train_fraction).round() as usize;
    set.validation = eligible.split_off(n_train);
    set.train = eligible;

    if set.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if set.validation.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    Ok(set)
}
