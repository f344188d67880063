//! Bilinear sampling, reference-oriented deformable convolution and
//! patch-level attention.

mod attention;
mod bilinear;
mod deform;

pub use attention::{attention_matrix, patch_attention, AttentionVars};
