use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A window of up to `k` steps ending at `end` (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub end: usize,
    /// Fully padded steps before `start`.
    pub lead_pad: usize,
}

impl WindowSpan {
    pub fn ending_at(end: usize, k: usize) -> Self {
        let start = (end + 1).saturating_sub(k);
        Self {
            start,
            end,
            lead_pad: k - (end + 1 - start),
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One window ending at every step of a `steps`-long trajectory.
pub fn window_trajectory(steps: usize, k: usize) -> Vec<WindowSpan> {
    (0..steps).map(|t| WindowSpan::ending_at(t, k)).collect()
}

/// Hindsight goal index drawn uniformly from `t..steps`.
pub fn relabel_goal(t: usize, steps: usize, rng: &mut impl Rng) -> Result<usize> {
    if t >= steps {
        return Err(Error::Range {
            index: t,
            size: steps,
        });
    }
    Ok(rng.gen_range(t..steps))
}

/// Task conditioning of one example before encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<G> {
    pub instruction: u32,
    pub goal: Option<G>,
}

/// With both an instruction and a goal available, keep exactly one of them
/// with probability 1/2 each. Goal-only or instruction-only examples pass
/// through unchanged.
pub fn mask_modality<G>(c: Conditioning<G>, rng: &mut impl Rng) -> Conditioning<G> {
    if c.instruction == 0 || c.goal.is_none() {
        return c;
    }
    if rng.gen_bool(0.5) {
        Conditioning {
            instruction: 0,
            goal: c.goal,
        }
    } else {
        Conditioning {
            instruction: c.instruction,
            goal: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub dataset: String,
    pub weight: f64,
}

/// Dataset sampling weights; normalized once over the declared list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixtureSpec {
    pub entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn new(entries: &[(&str, f64)]) -> Self {
        Self {
            entries: entries
                .iter()
                .map(|(d, w)| MixtureEntry {
                    dataset: (*d).to_owned(),
                    weight: *w,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| !(e.weight >= 0.0 && e.weight.is_finite()))
        {
            return Err(Error::Config(format!(
                "dataset `{}` has invalid weight {}",
                e.dataset, e.weight
            )));
        }
        if !self.entries.iter().any(|e| e.weight > 0.0) {
            return Err(Error::Config("mixture has no positive weight".into()));
        }
        Ok(())
    }

    pub fn normalized(&self) -> Result<Vec<(String, f64)>> {
        self.validate()?;
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        Ok(self
            .entries
            .iter()
            .map(|e| (e.dataset.clone(), e.weight / total))
            .collect())
    }

    /// Restricts the mixture to `datasets`, keeping their relative weights.
    pub fn restricted(&self, datasets: &[&str]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| datasets.contains(&e.dataset.as_str()))
                .cloned()
                .collect(),
        }
    }
}

/// Prepared categorical sampler over a [`MixtureSpec`].
#[derive(Clone, Debug)]
pub struct MixtureSampler {
    names: Vec<String>,
    dist: WeightedIndex<f64>,
}

impl MixtureSampler {
    pub fn new(spec: &MixtureSpec) -> Result<Self> {
        spec.validate()?;
        let dist = WeightedIndex::new(spec.entries.iter().map(|e| e.weight))
            .map_err(|e| Error::Config(format!("mixture weights: {e}")))?;
        Ok(Self {
            names: spec.entries.iter().map(|e| e.dataset.clone()).collect(),
            dist,
        })
    }

    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> &str {
        &self.names[self.sample_index(rng)]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One categorical draw from `spec`.
pub fn sample_mixture(spec: &MixtureSpec, rng: &mut impl Rng) -> Result<String> {
    Ok(MixtureSampler::new(spec)?.sample(rng).to_owned())
}
