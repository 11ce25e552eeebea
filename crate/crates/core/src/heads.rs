//! Per-embodiment action heads and the masked losses.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::assembler::SlotLayout;
use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    SingleArm,
    Navigation,
    Bimanual,
    Quadruped,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::SingleArm,
        HeadKind::Navigation,
        HeadKind::Bimanual,
        HeadKind::Quadruped,
    ];

    /// Action dimension of the head's action space.
    pub fn action_dim(self) -> usize {
        match self {
            HeadKind::SingleArm => 7,
            HeadKind::Navigation => 2,
            HeadKind::Bimanual => 14,
            HeadKind::Quadruped => 12,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::SingleArm => "single-arm",
            HeadKind::Navigation => "navigation",
            HeadKind::Bimanual => "bimanual",
            HeadKind::Quadruped => "quadruped",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionHeadSpec {
    pub name: HeadKind,
    pub action_dim: usize,
    pub chunk_size: usize,
    /// Nominal control rate; informational only.
    #[serde(default)]
    pub control_hz: f64,
}

impl ActionHeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.action_dim != self.name.action_dim() {
            return Err(Error::Config(format!(
                "head {} has action dimension {}, not {}",
                self.name,
                self.name.action_dim(),
                self.action_dim
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config(format!("head {} has chunk size 0", self.name)));
        }
        Ok(())
    }
}

/// A predicted block of consecutive actions, `[chunk, action_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub head: HeadKind,
    pub values: Tensor<f32>,
}

impl ActionChunk {
    pub fn new(head: HeadKind, values: Tensor<f32>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != head.action_dim() {
            return Err(Error::dim(format!(
                "{head} chunk must be [C, {}], got {:?}",
                head.action_dim(),
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Execution(format!("{head} chunk has non-finite values")));
        }
        Ok(Self { head, values })
    }

    pub fn from_rows(head: HeadKind, rows: &[Vec<f32>]) -> Result<Self> {
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::new(head, Tensor::new(&[rows.len(), head.action_dim()], data)?)
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.values.row(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Mse,
}

/// Supervision for one valid timestep: a `[chunk, action_dim]` target and
/// a flag per entry (false past the episode end).
#[derive(Clone, Debug, PartialEq)]
pub struct StepTarget {
    pub step: usize,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

/// Targets of one batch element. `head` is the element's owning head.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementTarget {
    pub head: Option<HeadKind>,
    pub steps: Vec<StepTarget>,
}

#[derive(Clone, Debug)]
pub struct HeadBank {
    specs: BTreeMap<HeadKind, ActionHeadSpec>,
    decoders: BTreeMap<HeadKind, (ParamId, ParamId)>,
    d_model: usize,
}

impl HeadBank {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        specs: &[ActionHeadSpec],
        d_model: usize,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut decoders = BTreeMap::new();
        for spec in specs {
            spec.validate()?;
            if map.insert(spec.name, spec.clone()).is_some() {
                return Err(Error::Config(format!("head {} declared twice", spec.name)));
            }
            // zero projections: an untrained policy commands zero actions
            let w = store.insert(
                &format!("head.{}.w", spec.name),
                Tensor::zeros(&[d_model, spec.action_dim]),
                true,
            );
            let b = store.insert(
                &format!("head.{}.b", spec.name),
                Tensor::zeros(&[spec.action_dim]),
                true,
            );
            decoders.insert(spec.name, (w, b));
        }
        Ok(Self {
            specs: map,
            decoders,
            d_model,
        })
    }

    pub fn spec(&self, head: HeadKind) -> Result<&ActionHeadSpec> {
        self.specs.get(&head).ok_or_else(|| Error::Lookup {
            kind: "head",
            name: head.to_string(),
        })
    }

    pub fn params(&self, head: HeadKind) -> Result<(ParamId, ParamId)> {
        self.decoders.get(&head).copied().ok_or_else(|| Error::Lookup {
            kind: "head",
            name: head.to_string(),
        })
    }

    /// Row-wise affine projection of readout embeddings `[n, d_model]` to
    /// `[n, action_dim]`.
    pub fn decode<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        head: HeadKind,
        readouts: Var,
    ) -> Result<Var> {
        let s = graph.shape(readouts);
        if s.len() != 2 || s[1] != self.d_model {
            return Err(Error::dim(format!(
                "{head} head expects [n, {}] readouts, got {s:?}",
                self.d_model
            )));
        }
        let (w, b) = self.params(head)?;
        let w = graph.param(store, w);
        let x = graph.matmul(readouts, w)?;
        let b = graph.param(store, b);
        graph.add_bias(x, b)
    }

    /// Decodes one chunk of readouts and returns it as an [`ActionChunk`].
    pub fn decode_chunk<T: Real>(
        &self,
        store: &ParamStore<T>,
        head: HeadKind,
        readouts: &Tensor<T>,
    ) -> Result<ActionChunk> {
        let spec = self.spec(head)?;
        if readouts.shape() != [spec.chunk_size, self.d_model] {
            return Err(Error::dim(format!(
                "{head} decode expects [{}, {}], got {:?}",
                spec.chunk_size,
                self.d_model,
                readouts.shape()
            )));
        }
        let mut g = Graph::new();
        let r = g.constant(readouts.clone());
        let out = self.decode(&mut g, store, head, r)?;
        ActionChunk::new(head, g.value(out).cast())
    }

    /// Masked loss of one element against its own head only.
    pub fn element_loss<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        layout: &SlotLayout,
        embeddings: Var,
        target: &ElementTarget,
        kind: LossKind,
    ) -> Result<Var> {
        let head = target
            .head
            .ok_or_else(|| Error::Contract("batch element owns no action head".into()))?;
        let spec = self.spec(head)?;
        let per_step = spec.chunk_size * spec.action_dim;
        let ranges = layout.readout_ranges(head)?;
        let mut rows = Vec::with_capacity(target.steps.len() * spec.chunk_size);
        let mut values = Vec::with_capacity(target.steps.len() * per_step);
        let mut mask = Vec::with_capacity(target.steps.len() * per_step);
        for st in &target.steps {
            if st.values.len() != per_step || st.mask.len() != per_step {
                return Err(Error::dim(format!(
                    "{head} step target needs {per_step} values and flags"
                )));
            }
            let r = ranges.get(st.step).ok_or(Error::Range {
                index: st.step,
                size: ranges.len(),
            })?;
            rows.extend(r.clone());
            values.extend(st.values.iter().map(|&v| T::c(v as f64)));
            mask.extend_from_slice(&st.mask);
        }
        if rows.is_empty() {
            return Err(Error::Contract("batch element has no supervised step".into()));
        }
        let readouts = graph.gather_rows(embeddings, &rows)?;
        let pred = self.decode(graph, store, head, readouts)?;
        let target = Tensor::new(&[rows.len(), spec.action_dim], values)?;
        match kind {
            LossKind::L1 => graph.masked_l1(pred, target, mask),
            LossKind::Mse => graph.masked_mse(pred, target, mask),
        }
    }
}

/// Per-step action chunks predicted by every head for one element.
pub type ElementPredictions = BTreeMap<HeadKind, Vec<Tensor<f32>>>;

fn masked_mean(
    predictions: &[ElementPredictions],
    targets: &[ElementTarget],
    err: impl Fn(f64) -> f64,
) -> Result<f64> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (pred, target) in predictions.iter().zip(targets) {
        let head = target
            .head
            .ok_or_else(|| Error::Contract("batch element owns no action head".into()))?;
        let chunks = pred.get(&head).ok_or_else(|| Error::Lookup {
            kind: "head",
            name: head.to_string(),
        })?;
        let (mut sum, mut count) = (0.0, 0usize);
        for st in &target.steps {
            let chunk = chunks.get(st.step).ok_or(Error::Range {
                index: st.step,
                size: chunks.len(),
            })?;
            if chunk.numel() != st.values.len() || st.mask.len() != st.values.len() {
                return Err(Error::dim(format!(
                    "{head} prediction {:?} vs {} target values",
                    chunk.shape(),
                    st.values.len()
                )));
            }
            for ((&p, &t), &m) in chunk.data().iter().zip(&st.values).zip(&st.mask) {
                if m {
                    sum += err(p as f64 - t as f64);
                    count += 1;
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    Ok(total / targets.len() as f64)
}

/// Batch L1: per-element mean over its own head's supervised entries, then
/// the mean over elements.
pub fn training_loss(predictions: &[ElementPredictions], targets: &[ElementTarget]) -> Result<f64> {
    masked_mean(predictions, targets, f64::abs)
}

/// Same masking as [`training_loss`] with squared error.
pub fn validation_mse(predictions: &[ElementPredictions], targets: &[ElementTarget]) -> Result<f64> {
    masked_mean(predictions, targets, |e| e * e)
}
