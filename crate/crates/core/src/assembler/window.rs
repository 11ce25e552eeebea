use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;

use super::{build_attention_mask, AttentionMask, GroupKind, SlotLayout};
use crate::autodiff::{randn, Graph, ParamId, ParamStore, Real, Var};
use crate::encoders::{EncoderBank, GoalImage, ImageObservation, ProprioObservation};
use crate::error::{Error, Result};
use crate::heads::HeadKind;

#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Image(ImageObservation),
    Proprio(ProprioObservation),
}

/// Everything observed at one timestep, keyed by layout group name.
///
/// A group is present iff it has an entry in `observations`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame {
    pub embodiment: String,
    pub observations: BTreeMap<String, Observation>,
    /// Language instruction id; 0 is the null instruction.
    pub instruction: u32,
    /// Goal image stacked onto the image group of the same view.
    pub goal: Option<GoalImage>,
}

/// Learned positional table (one row per absolute token index) and one
/// learned embedding per readout group.
#[derive(Clone, Debug)]
pub struct AssemblerParams {
    positional: ParamId,
    readouts: BTreeMap<usize, ParamId>,
}

impl AssemblerParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        layout: &SlotLayout,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let positional = store.insert(
            "assembler.positional",
            randn(&[layout.context_len(), d_model], 0.02, rng),
            false,
        );
        let readouts = layout
            .groups()
            .iter()
            .enumerate()
            .filter(|(_, g)| g.kind.is_readout())
            .map(|(i, g)| {
                let id = store.insert(
                    &format!("assembler.readout.{}", g.name),
                    randn(&[g.tokens, d_model], 0.02, rng),
                    false,
                );
                (i, id)
            })
            .collect();
        Self {
            positional,
            readouts,
        }
    }

    pub fn positional(&self) -> ParamId {
        self.positional
    }

    pub fn readout(&self, group: usize) -> Option<ParamId> {
        self.readouts.get(&group).copied()
    }
}

/// One assembled `k`-step window inside a computation record.
#[derive(Clone, Debug)]
pub struct AssembledWindow {
    pub embodiment: String,
    /// `[k * S, d_model]`; padded rows are zero.
    pub tokens: Var,
    pub pad: Vec<bool>,
    pub mask: AttentionMask,
    /// Readout token ranges of every head at every step.
    pub readouts: BTreeMap<HeadKind, Vec<Range<usize>>>,
    pub valid_steps: Vec<bool>,
}

impl AssembledWindow {
    pub fn newest_valid_step(&self) -> Option<usize> {
        self.valid_steps.iter().rposition(|&v| v)
    }
}

/// Encodes up to `k` frames (oldest first) into a fixed-slot window.
pub fn assemble_window<T: Real>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    bank: &EncoderBank,
    params: &AssemblerParams,
    layout: &SlotLayout,
    frames: &[ObservationFrame],
) -> Result<AssembledWindow> {
    let k = layout.history();
    if frames.is_empty() || frames.len() > k {
        return Err(Error::Contract(format!(
            "a window takes 1..={k} frames, got {}",
            frames.len()
        )));
    }
    let embodiment = &frames[0].embodiment;
    if let Some(f) = frames.iter().find(|f| &f.embodiment != embodiment) {
        return Err(Error::Contract(format!(
            "window mixes embodiments `{embodiment}` and `{}`",
            f.embodiment
        )));
    }
    let n = layout.context_len();
    let lead = k - frames.len();
    let mut pad = vec![true; n];
    let mut valid_steps = vec![false; k];
    let mut blocks = Vec::new();
    let mut rows = Vec::new();
    let pos = graph.param(store, params.positional);
    let mut lang_cache: BTreeMap<u32, Option<Var>> = BTreeMap::new();

    for (i, frame) in frames.iter().enumerate() {
        let step = lead + i;
        valid_steps[step] = true;
        for name in frame.observations.keys() {
            layout.group_index(name)?;
        }
        let lang = match lang_cache.get(&frame.instruction) {
            Some(l) => *l,
            None => {
                let l = if frame.instruction == 0 {
                    // bounds check only; the null token never modulates
                    bank.embed_language(graph, store, 0)?;
                    None
                } else {
                    Some(bank.embed_language(graph, store, frame.instruction)?)
                };
                lang_cache.insert(frame.instruction, l);
                l
            }
        };
        for (gi, group) in layout.groups().iter().enumerate() {
            let content = match (group.kind, frame.observations.get(&group.name)) {
                (GroupKind::Readout(_), _) => {
                    let id = params.readout(gi).expect("readout groups have embeddings");
                    graph.param(store, id)
                }
                (_, None) => continue,
                (GroupKind::Image(view), Some(Observation::Image(img))) => {
                    if img.view != view {
                        return Err(Error::dim(format!(
                            "group `{}` holds {view} images, got {}",
                            group.name, img.view
                        )));
                    }
                    let goal = frame.goal.as_ref().filter(|g| g.view == view);
                    bank.encode_image(graph, store, img, goal, lang)?
                }
                (GroupKind::Proprio(kind), Some(Observation::Proprio(p))) => {
                    if p.kind != kind {
                        return Err(Error::dim(format!(
                            "group `{}` holds {kind} proprioception, got {}",
                            group.name, p.kind
                        )));
                    }
                    bank.encode_proprio(graph, store, p)?
                }
                (_, Some(_)) => {
                    return Err(Error::dim(format!(
                        "observation for group `{}` has the wrong modality",
                        group.name
                    )))
                }
            };
            let range = layout.range(step, gi);
            let idx: Vec<usize> = range.clone().collect();
            let p = graph.gather_rows(pos, &idx)?;
            blocks.push(graph.add(content, p)?);
            for r in range {
                pad[r] = false;
            }
            rows.extend(idx);
        }
    }
    let stacked = graph.concat_rows(&blocks)?;
    let tokens = graph.scatter_rows(stacked, &rows, n)?;
    let mask = build_attention_mask(layout, &pad)?;
    let readouts = layout
        .groups()
        .iter()
        .filter_map(|g| match g.kind {
            GroupKind::Readout(h) => Some(h),
            _ => None,
        })
        .map(|h| Ok((h, layout.readout_ranges(h)?)))
        .collect::<Result<_>>()?;
    Ok(AssembledWindow {
        embodiment: embodiment.clone(),
        tokens,
        pad,
        mask,
        readouts,
        valid_steps,
    })
}
