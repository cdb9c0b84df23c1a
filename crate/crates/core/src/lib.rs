//! Distributed leader-following consensus for networks of identical linear
//! agents communicating over switching directed topologies.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: dense matrix type, spectra, Kronecker products, Lyapunov solves.
//! * [`graph`]: leader-rooted directed graphs, their structure matrices, unions,
//!   connectivity tests, and Gershgorin localization.
//! * [`schedule`]: switching schedules over a graph collection, validation
//!   against dwell/interval bounds, averaged structure matrices, and the
//!   averaging stability margin.
//! * [`synthesis`]: stabilizability/detectability checks and Riccati-based
//!   synthesis of consensus feedback, observer, and local stabilizer gains.
//! * [`sim`]: closed-loop system matrices, a fixed-step switched integrator for
//!   state-feedback and observer protocols, diagnostic probes, and CSV output.
//!
//! A typical flow: build a [`graph::LeaderGraph`] collection, arrange it into a
//! [`schedule::SwitchingSchedule`], estimate the averaging margin, synthesize
//! gains with [`synthesis::synth_feedback`], and run [`sim::simulate`].

pub mod graph;
pub mod linalg;
pub mod schedule;
pub mod sim;
pub mod synthesis;
