//! Robustness and representation-quality metrics.

mod probe;
mod stats;
mod sweep;
mod ued;

pub use probe::{local_representation, speaker_probe, ProbeConfig, ProbeReport, Representation};
pub use stats::{nmi, phoneme_purity, unit_usage_stats, usage_from_counts, PurityReport, UsageStats};
pub use sweep::{noise_sweep, spearman, SweepCurve, SweepKind, SweepPoint};
pub use ued::{
    augmentation_for, levenshtein, ued_corpus, ued_from_pairs, ued_from_unit_files, unit_edit_distance,
    UedEntry, UedReport,
};
