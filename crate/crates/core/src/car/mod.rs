//! Multilevel spatial Poisson model: CAR prior, model design, MCMC fitting
//! and posterior summaries.

pub mod model;
pub mod prior;
pub mod sampler;
pub mod summary;

pub use model::{Cell, CovariateScale, ModelOptions, ModelSpec, Priors, Scaling, ZeroOffset};
pub use prior::{sample_car_prior, CarGraph, CarPrior};
pub use sampler::{fit, ChainMeta, McmcConfig, PosteriorDraws};
pub use summary::{geweke_z, mrr_summary, predict_counts, FitSummary, Mrr, ParamSummary, SmrEstimates};
