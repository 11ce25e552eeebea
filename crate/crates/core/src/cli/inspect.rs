use std::collections::BTreeMap;
use std::fmt::Write;

use crate::assembler::{build_attention_mask, GroupKind};
use crate::config::Config;
use crate::envs::embodiment;
use crate::error::Result;
use crate::model::PolicyModel;
use crate::trainer::Checkpoint;

/// Layout table, parameter counts and, for an embodiment, its pad pattern
/// and block-level mask with a full history.
pub fn inspect(config: &Config, embodiment_name: Option<&str>) -> Result<String> {
    let (model, store) = PolicyModel::init::<f32>(config, 0)?;
    let layout = &model.layout;
    let mut out = String::new();
    writeln!(
        out,
        "history k = {}, tokens per step S = {}, context = {}",
        layout.history(),
        layout.step_tokens(),
        layout.context_len()
    )
    .unwrap();
    writeln!(out, "{:<22} {:<22} {:>6} {:>6}", "group", "kind", "offset", "tokens").unwrap();
    for g in layout.groups() {
        let kind = match g.kind {
            GroupKind::Image(v) => format!("image {v}"),
            GroupKind::Proprio(p) => format!("proprio {p}"),
            GroupKind::Readout(h) => format!("readout {h}"),
        };
        writeln!(out, "{:<22} {:<22} {:>6} {:>6}", g.name, kind, g.offset, g.tokens).unwrap();
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for id in store.ids() {
        let module = store.name(id).split('.').next().unwrap_or("");
        *counts.entry(module).or_default() += store.get(id).numel();
    }
    writeln!(out, "\nparameters: {}", store.numel()).unwrap();
    for (m, c) in &counts {
        writeln!(out, "  {m:<10} {c:>9}").unwrap();
    }

    if let Some(name) = embodiment_name {
        let spec = embodiment(name)?;
        let mut pad = vec![true; layout.context_len()];
        for step in 0..layout.history() {
            for (gi, g) in layout.groups().iter().enumerate() {
                let present = match g.kind {
                    GroupKind::Readout(_) => true,
                    _ => spec.groups.iter().any(|(n, _)| *n == g.name),
                };
                if present {
                    pad[layout.range(step, gi)].iter_mut().for_each(|p| *p = false);
                }
            }
        }
        let mask = build_attention_mask(layout, &pad)?;
        let real = pad.iter().filter(|p| !**p).count();
        writeln!(
            out,
            "\n{name}: head {}, {real} of {} slots filled; mask by (step, group), # all . none + some",
            spec.head,
            pad.len()
        )
        .unwrap();
        out += &mask.render(layout);
    }
    Ok(out)
}

/// Header summary of a checkpoint file.
pub fn describe_checkpoint(ckpt: &Checkpoint) -> String {
    let mut out = format!(
        "step {}, {} parameters, config {}\nlayout {}\n",
        ckpt.step,
        ckpt.params.numel(),
        ckpt.config.hash(),
        ckpt.layout
    );
    if let Some(v) = ckpt.metrics.mean_val_mse {
        writeln!(out, "mean validation MSE {v:.5}").unwrap();
    }
    for (d, v) in &ckpt.metrics.val_mse {
        writeln!(out, "  {d:<12} {v:.5}").unwrap();
    }
    out
}
