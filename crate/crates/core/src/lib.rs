//! Geometric knowledge-quality metrics over per-layer representations,
//! teacher layer selection, and a small feature-distillation trainer.
//!
//! Representations are stored one layer per RDMP file (see [`repr`]); a
//! JSON manifest ties the layers of one model together.

pub mod error;
pub mod kd;
pub mod metrics;
pub mod plot;
pub mod repr;
pub mod select;

pub use error::{Error, Result};
pub use metrics::{
    analyze_layer, analyze_layers, knowledge_quality, packing_radius, LayerMetrics, PairStats,
};
pub use repr::{read_dump, write_dump, LayerManifest, ManifestEntry, RepresentationSet};
pub use select::{
    rank_layers, select_topk, stage_end_selection, variant_select, Criterion, Method,
    SelectionResult,
};
