//! Bayesian estimation of time-varying disease-transmission rates from daily
//! incidence counts.
//!
//! The model family is S(E_M)I_K R with Erlang-distributed stage durations
//! and a B-spline–parameterized log transmission rate. Inference runs a
//! generalized Hamiltonian Monte Carlo sampler whose gradients come from
//! forward-sensitivity integration of the ODE system, with a difference
//! penalty (P-spline) prior keeping the rate curve smooth.
//!
//! Typical flow: build a [`model::ModelSpec`], load an
//! [`data::IncidenceSeries`], choose [`posterior::PriorConfig`] and
//! [`sampler::HmcSettings`], then call [`sampler::run_chains`] and summarize
//! with the [`diagnostics`] module. The `epiwave` CLI wraps exactly that
//! pipeline.

// Validation sites write `!(x > 0.0)` rather than `x <= 0.0` on purpose: the
// negated form also rejects NaN, which the "simplified" comparison would let
// through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod io;
pub mod model;
pub mod ode;
pub mod par;
pub mod pipeline;
pub mod posterior;
pub mod sampler;
pub mod sensitivity;
pub mod solver;
pub mod spline;
pub mod synth;
pub mod transform;
