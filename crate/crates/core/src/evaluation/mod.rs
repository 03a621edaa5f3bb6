//! Metrics, CSV reports, parameter sweeps and the identity-recovery attack.

pub mod attack;
pub mod metrics;
pub mod report;
pub mod sweep;

pub use attack::{attack_recover, AttackEmbedding, AttackOutcome};
pub use metrics::{attribute_distance, frechet_distance, identity_distance, re_id_rate, ReIdResult, EIGEN_CLAMP};
pub use report::{AggregateRow, AttributeDistances, CellReport, ImageRow, MetricsReport, ReportWriter, CSV_COLUMNS};
pub use sweep::{evaluate_pairs, run_sweep, GridSpec, InversionCache, Sweep};
