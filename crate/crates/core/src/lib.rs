//! Neural-network single-event-transient (SET) current modeling.
//!
//! The crate covers the whole modeling flow for a radiation-induced drain
//! current pulse `i(t, LET, Vd)`:
//!
//! - [`oracle`] generates double-exponential surrogate waveforms over a grid
//!   of LET and drain bias,
//! - [`dataset`] ingests, resamples (natural cubic spline), normalizes and
//!   partitions waveform samples,
//! - [`mlp`] is the feedforward regression network with its analytic Jacobian,
//! - [`trainer`] fits networks with Levenberg-Marquardt and runs the
//!   architecture sweep,
//! - [`vacodegen`] emits a trained network as a Verilog-A current source and
//!   checks the emitted text numerically,
//! - [`spicelet`] is a small transient simulator used to inject the modeled
//!   current into an inverter chain,
//! - [`metrics`] measures pulse peak and width for fit-quality checks.

pub mod dataset;
pub mod metrics;
pub mod mlp;
pub mod oracle;
pub mod spicelet;
pub mod trainer;
pub mod vacodegen;

pub(crate) mod par;

pub use dataset::{NormParams, Row, SetDataset, Split, Waveform};
pub use mlp::{Architecture, MlpModel, Transfer};
pub use oracle::OracleParams;
pub use trainer::{TrainConfig, TrainReport};

