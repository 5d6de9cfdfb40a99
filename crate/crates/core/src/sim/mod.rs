//! Simulation study: synthetic inputs, the data-generating process, and
//! replicated model comparison across denominator sources.

pub mod dgp;
pub mod metrics;
pub mod study;
pub mod synth;

pub use dgp::{generate_dataset, Dataset, Dgp, DgpConfig};
pub use metrics::{bias, mape, upward_fraction};
pub use study::{run_study, CellMetric, CoefBias, GroupMetric, ReplicateResult, SourceFit, StudyConfig, StudyReport, StudySeries};
pub use synth::{synthesize_population, PopulationConfig, SyntheticPopulation, POVERTY};
