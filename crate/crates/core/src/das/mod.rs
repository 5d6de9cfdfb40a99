//! Disclosure-avoidance engine: noisy measurement of a geographic histogram
//! hierarchy and top-down reconciliation into consistent integer counts.

pub mod budget;
pub mod noise;
pub mod project;
pub mod round;
pub mod topdown;

pub use budget::{DasConfig, PassMode, PrivacyBudget, Variant, EPSILON_PERSONS_V22, EPSILON_POPULATION_V19_V20};
pub use noise::{sample_noise, NoiseFamily, NoiseModel};
pub use project::{kkt_residual, project_children, project_table};
pub use round::{controlled_round, controlled_round_table};
pub use topdown::{check_consistency, inject_noise, run_topdown, AuditEntry, DasAudit, NoisyMeasurements, TopDownOutput};
