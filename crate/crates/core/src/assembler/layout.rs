use std::collections::BTreeSet;
use std::fmt::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ProprioKind, ViewKind};
use crate::error::{Error, Result};
use crate::heads::{ActionHeadSpec, HeadKind};

/// One token group as declared in the configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GroupConfig {
    ObsImage {
        name: String,
        view: ViewKind,
        tokens: usize,
    },
    ObsProprio {
        name: String,
        proprio: ProprioKind,
        tokens: usize,
    },
    Readout {
        name: String,
        head: HeadKind,
        tokens: usize,
    },
}

impl GroupConfig {
    pub fn name(&self) -> &str {
        match self {
            GroupConfig::ObsImage { name, .. }
            | GroupConfig::ObsProprio { name, .. }
            | GroupConfig::Readout { name, .. } => name,
        }
    }

    pub fn tokens(&self) -> usize {
        match self {
            GroupConfig::ObsImage { tokens, .. }
            | GroupConfig::ObsProprio { tokens, .. }
            | GroupConfig::Readout { tokens, .. } => *tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    /// History length k (timesteps per window).
    pub history: usize,
    pub groups: Vec<GroupConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Image(ViewKind),
    Proprio(ProprioKind),
    Readout(HeadKind),
}

impl GroupKind {
    pub fn is_readout(self) -> bool {
        matches!(self, GroupKind::Readout(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSlot {
    pub name: String,
    pub kind: GroupKind,
    pub tokens: usize,
    /// Offset of the group's first token within one timestep.
    pub offset: usize,
}

/// Position of one token inside a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSlot {
    pub step: usize,
    pub group: usize,
    pub within: usize,
}

/// Fixed per-timestep token map, identical at every step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    history: usize,
    groups: Vec<GroupSlot>,
    step_tokens: usize,
}

impl SlotLayout {
    /// Validates group declarations and computes offsets.
    ///
    /// Readout groups must hold exactly their head's chunk size; image groups
    /// must match the encoder's token count; proprio groups hold one token.
    pub fn build(
        layout: &LayoutConfig,
        heads: &[ActionHeadSpec],
        encoders: &EncoderConfig,
    ) -> Result<Self> {
        if layout.history == 0 {
            return Err(Error::Config("history length must be at least 1".into()));
        }
        let mut names = BTreeSet::new();
        let mut readout_heads = BTreeSet::new();
        let mut groups = Vec::with_capacity(layout.groups.len());
        let mut offset = 0;
        for g in &layout.groups {
            if !names.insert(g.name().to_owned()) {
                return Err(Error::Config(format!("duplicate group `{}`", g.name())));
            }
            if g.tokens() == 0 {
                return Err(Error::Config(format!("group `{}` has no tokens", g.name())));
            }
            let kind = match g {
                GroupConfig::ObsImage { view, tokens, name } => {
                    let expected = encoders.image_tokens();
                    if *tokens != expected {
                        return Err(Error::Config(format!(
                            "image group `{name}` declares {tokens} tokens but the encoder emits {expected}"
                        )));
                    }
                    GroupKind::Image(*view)
                }
                GroupConfig::ObsProprio {
                    proprio,
                    tokens,
                    name,
                } => {
                    if *tokens != 1 {
                        return Err(Error::Config(format!(
                            "proprio group `{name}` must hold exactly 1 token, not {tokens}"
                        )));
                    }
                    GroupKind::Proprio(*proprio)
                }
                GroupConfig::Readout { head, tokens, name } => {
                    let spec = heads.iter().find(|h| h.name == *head).ok_or_else(|| {
                        Error::Config(format!("readout group `{name}` names unknown head {head}"))
                    })?;
                    if spec.chunk_size != *tokens {
                        return Err(Error::Config(format!(
                            "readout group `{name}` has {tokens} tokens but head {head} predicts chunks of {}",
                            spec.chunk_size
                        )));
                    }
                    if !readout_heads.insert(*head) {
                        return Err(Error::Config(format!("head {head} has two readout groups")));
                    }
                    GroupKind::Readout(*head)
                }
            };
            groups.push(GroupSlot {
                name: g.name().to_owned(),
                kind,
                tokens: g.tokens(),
                offset,
            });
            offset += g.tokens();
        }
        for h in heads {
            if !readout_heads.contains(&h.name) {
                return Err(Error::Config(format!("head {} has no readout group", h.name)));
            }
        }
        Ok(Self {
            history: layout.history,
            groups,
            step_tokens: offset,
        })
    }

    pub fn history(&self) -> usize {
        self.history
    }

    /// Tokens per timestep (S).
    pub fn step_tokens(&self) -> usize {
        self.step_tokens
    }

    /// Window length `k * S`.
    pub fn context_len(&self) -> usize {
        self.history * self.step_tokens
    }

    pub fn groups(&self) -> &[GroupSlot] {
        &self.groups
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::Lookup {
                kind: "group",
                name: name.to_owned(),
            })
    }

    pub fn readout_group(&self, head: HeadKind) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.kind == GroupKind::Readout(head))
            .ok_or_else(|| Error::Lookup {
                kind: "head",
                name: head.to_string(),
            })
    }

    /// Absolute token range of `group` at `step`.
    pub fn range(&self, step: usize, group: usize) -> Range<usize> {
        let g = &self.groups[group];
        let start = step * self.step_tokens + g.offset;
        start..start + g.tokens
    }

    pub fn slot(&self, index: usize) -> TokenSlot {
        let step = index / self.step_tokens;
        let rem = index % self.step_tokens;
        let group = self
            .groups
            .iter()
            .rposition(|g| g.offset <= rem)
            .expect("offsets start at zero");
        TokenSlot {
            step,
            group,
            within: rem - self.groups[group].offset,
        }
    }

    pub fn is_readout(&self, index: usize) -> bool {
        self.groups[self.slot(index).group].kind.is_readout()
    }

    /// Readout ranges of `head` at every step.
    pub fn readout_ranges(&self, head: HeadKind) -> Result<Vec<Range<usize>>> {
        let g = self.readout_group(head)?;
        Ok((0..self.history).map(|s| self.range(s, g)).collect())
    }

    /// Canonical one-line form stored in checkpoints.
    pub fn canonical(&self) -> String {
        let mut s = format!("k={};S={}", self.history, self.step_tokens);
        for g in &self.groups {
            let kind = match g.kind {
                GroupKind::Image(v) => format!("image:{v}"),
                GroupKind::Proprio(p) => format!("proprio:{p}"),
                GroupKind::Readout(h) => format!("readout:{h}"),
            };
            write!(s, ";{}@{}+{}={kind}", g.name, g.offset, g.tokens).unwrap();
        }
        s
    }
}

/// Tokens per step implied by a history length and total context size.
pub fn step_tokens_for_context(history: usize, context: usize) -> Result<usize> {
    if history == 0 || context % history != 0 {
        return Err(Error::Config(format!(
            "context {context} is not a whole number of {history}-step windows"
        )));
    }
    Ok(context / history)
}
