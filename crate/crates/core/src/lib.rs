//! Kernel-free Mamba-2 inference: chunked SSD prefill, constant-memory cached
//! decode, f64 reference oracles, a tensor bundle format and an analytic cost model.
//!
//! ```no_run
//! use ssd_engine::{bundle, cache, config::ModelConfig};
//!
//! let cfg = ModelConfig::tiny();
//! let params = bundle::random_init(&cfg, 0);
//! let out = cache::generate(&params, &[vec![1, 2, 3]], 8, cache::DecodeMode::Cached, &cfg, Default::default())?;
//! println!("{:?}", out.tokens);
//! # Ok::<(), ssd_engine::Error>(())
//! ```

pub mod bench;
pub mod bundle;
pub mod cache;
pub mod config;
pub mod cost;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod precision;
pub mod rng;
pub mod ssd;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ElemType, Scalar, Tensor};
