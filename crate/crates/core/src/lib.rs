//! Exact multivariate-normal maximum-likelihood estimation over data that is
//! partitioned across mutually distrusting nodes.
//!
//! A central node proposes parameters and data nodes return masked partial
//! log-likelihoods; only the joint total is ever recovered. The crate covers
//! the Gaussian math ([`mvn`]), model parameterizations ([`model`]), the
//! masked vertical protocol ([`protocol`]), partition planning for complex
//! layouts ([`partition`]), node runtimes and transports ([`transport`]),
//! optimization ([`optimizer`]), ground-truth evaluators ([`oracle`]) and a
//! transcript auditor ([`audit`]).

pub mod audit;
pub mod bench;
pub mod error;
pub mod model;
pub mod mvn;
pub mod optimizer;
pub mod oracle;
pub mod partition;
pub mod primitives;
pub mod protocol;
pub mod sim;
pub mod transport;

pub use error::{Error, Result};
pub use mvn::{DataPartition, ParameterSet};
