//! Fixed-slot token windows.
//!
//! Every timestep holds the same ordered token groups (image observations,
//! proprioception, then one readout group per action head) at fixed
//! offsets. Groups an embodiment lacks are zero-filled and flagged as
//! padding; leading steps before the episode start are fully padded.

mod layout;
mod mask;
mod window;

pub use layout::{
    step_tokens_for_context, GroupConfig, GroupKind, GroupSlot, LayoutConfig, SlotLayout, TokenSlot,
};
pub use mask::{build_attention_mask, AttentionMask};
pub use window::{assemble_window, AssembledWindow, AssemblerParams, Observation, ObservationFrame};
