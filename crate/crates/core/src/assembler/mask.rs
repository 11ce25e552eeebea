use std::fmt::Write;

use super::SlotLayout;
use crate::autodiff::KeyLists;
use crate::error::{Error, Result};

/// Dense boolean attention mask over a window, `true` = permitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

/// Block-wise causal mask with passive readouts.
///
/// `mask[i, j]` holds iff all of:
/// (a) `j` is not padding, or `j == i`;
/// (b) for an observation query, `j` is an observation at the same or an
///     earlier step;
/// (c) for a readout query, `j` is such an observation or `j == i`.
pub fn build_attention_mask(layout: &SlotLayout, pad: &[bool]) -> Result<AttentionMask> {
    let n = layout.context_len();
    if pad.len() != n {
        return Err(Error::dim(format!(
            "pad mask has {} flags for a {n}-token window",
            pad.len()
        )));
    }
    let info: Vec<(usize, bool)> = (0..n)
        .map(|i| (layout.slot(i).step, layout.is_readout(i)))
        .collect();
    let mut allowed = vec![false; n * n];
    for (i, &(si, ri)) in info.iter().enumerate() {
        let row = &mut allowed[i * n..(i + 1) * n];
        for (j, &(sj, rj)) in info.iter().enumerate() {
            let earlier_obs = !rj && sj <= si;
            row[j] = (j == i || !pad[j]) && (earlier_obs || (ri && j == i));
        }
    }
    Ok(AttentionMask { n, allowed })
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_dense(&self) -> &[bool] {
        &self.allowed
    }

    /// Key lists for the queries in `active`, re-indexed into `active`.
    ///
    /// Every key a selected query may attend to must itself be selected.
    pub fn key_lists(&self, active: &[usize]) -> Result<KeyLists> {
        let mut local = vec![u32::MAX; self.n];
        for (li, &g) in active.iter().enumerate() {
            local[g] = li as u32;
        }
        let rows = active
            .iter()
            .map(|&i| {
                let row = &self.allowed[i * self.n..(i + 1) * self.n];
                row.iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(j, _)| match local[j] {
                        u32::MAX => Err(Error::Contract(format!(
                            "token {i} attends to token {j} outside the computed set"
                        ))),
                        l => Ok(l),
                    })
                    .collect::<Result<Vec<u32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        KeyLists::new(rows)
    }

    /// Block-level picture: one row/column per (step, group); `#` all
    /// permitted, `+` some, `.` none.
    pub fn render(&self, layout: &SlotLayout) -> String {
        let blocks: Vec<(usize, usize)> = (0..layout.history())
            .flat_map(|s| (0..layout.groups().len()).map(move |g| (s, g)))
            .collect();
        let width = layout
            .groups()
            .iter()
            .map(|g| g.name.len())
            .max()
            .unwrap_or(0)
            + 4;
        let mut out = String::new();
        for &(si, gi) in &blocks {
            let label = format!("t{si} {}", layout.groups()[gi].name);
            write!(out, "{label:<width$} ").unwrap();
            for &(sj, gj) in &blocks {
                let (mut any, mut all) = (false, true);
                for i in layout.range(si, gi) {
                    for j in layout.range(sj, gj) {
                        let a = self.allowed(i, j);
                        any |= a;
                        all &= a;
                    }
                }
                out.push(if all {
                    '#'
                } else if any {
                    '+'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }
}
