//! Dual text/graph encoders fused for task prediction, co-trained with a
//! bidirectional contrastive co-distillation objective, plus tools for
//! measuring how the two modalities relate in a shared projection space.

pub mod analysis;
pub mod diffmath;
pub mod encoders;
pub mod objective;
pub mod params;
pub mod sexpr;
pub mod taskgen;
pub mod trainer;
