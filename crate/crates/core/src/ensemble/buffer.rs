use serde::{Deserialize, Serialize};

use super::acc_feature;
use crate::env::Transition;

/// One supervised example: input `[o_t; acc_t; a_t]`, target `delta_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl Sample {
    pub fn new(obs: &[f64], acc: &[f64], action: &[f64], delta: &[f64]) -> Self {
        Sample { input: model_input(obs, acc, action), target: delta.to_vec() }
    }
}

/// Concatenates `[o_t; acc_t; a_t]`.
pub fn model_input(obs: &[f64], acc: &[f64], action: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + acc.len() + action.len());
    v.extend_from_slice(obs);
    v.extend_from_slice(acc);
    v.extend_from_slice(action);
    v
}

/// Transitions grouped in contiguous segments (one per rollout). The
/// acceleration feature needs two steps of history, so only transitions at
/// position 2 onward within a segment yield samples.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    segments: Vec<Vec<Transition>>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { segments: Vec::new(), capacity }
    }

    /// Appends a contiguous rollout as a new segment, truncated to the
    /// remaining capacity.
    pub fn push_segment(&mut self, transitions: &[Transition]) {
        let room = self.capacity.saturating_sub(self.len());
        if room == 0 || transitions.is_empty() {
            return;
        }
        self.segments.push(transitions[..transitions.len().min(room)].to_vec());
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Transitions that have the two-step history the acc feature needs.
    pub fn usable_len(&self) -> usize {
        self.segments.iter().map(|s| s.len().saturating_sub(2)).sum()
    }

    /// Training samples in storage order.
    pub fn samples(&self) -> Vec<Sample> {
        let mut out = Vec::with_capacity(self.usable_len());
        for seg in &self.segments {
            for i in 2..seg.len() {
                let acc = acc_feature(seg[i].obs.as_slice(), seg[i - 1].obs.as_slice(), seg[i - 2].obs.as_slice())
                    .expect("observation dims fixed within a segment");
                out.push(Sample::new(seg[i].obs.as_slice(), &acc, seg[i].action.as_slice(), seg[i].delta.as_slice()));
            }
        }
        out
    }
}
