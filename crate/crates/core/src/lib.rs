//! Two-sample homogeneity testing under nonignorable nonresponse with
//! callback data.
//!
//! The outcome distributions are linked by a density ratio model
//! `dF1 = exp(theta' Q(y)) dF0`, nonresponse follows a callback model with
//! attempt-specific intercepts and a common slope, and the two are fitted
//! jointly by EM on the empirical likelihood. The homogeneity hypothesis
//! `theta = 0` is tested with the empirical likelihood ratio statistic,
//! which is asymptotically chi-square with `dim q` degrees of freedom.

pub mod baseline;
pub mod callback;
pub mod data;
pub mod drm;
pub mod elr;
pub mod em;
pub mod error;
pub mod io;
pub mod newton;
pub mod par;
pub mod sim;
pub mod stats;

pub use data::{Basis, CallbackDataset, CallbackUnit, FittedModel, Group, ModelSpec, ResponseParams, TestResult};
pub use elr::{bic_select, elr_test, ElrOptions, ElrOutcome};
pub use em::{fit_full, fit_null, EmOptions};
pub use error::{Error, Result};
pub use par::Execution;
