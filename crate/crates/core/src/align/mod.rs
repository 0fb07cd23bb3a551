//! Class statistics and the mean-max / mean-std alignment transforms.

mod normalize;
mod scoremap;
mod stats;

pub use normalize::{
    apply_oracle_alignment, normalize_meanmax, normalize_meanstd, Calibrated, StatVariant,
    DEFAULT_EPS,
};
pub use scoremap::ScoreMap;
pub use stats::{fit_class_stats, read_class_stats_csv, write_class_stats_csv, ClassStats};
pub(crate) use stats::pooled_moments;
