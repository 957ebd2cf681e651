//! Side-channel attack workbench: synthetic AES power traces, DPA/CPA/template
//! attacks, a small autodiff engine with the SCNet architecture family, and
//! rank / guessing-entropy evaluation.

pub mod aes;
pub mod classical;
pub mod container;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod scnet;
pub mod synth;
pub mod trace;

pub use container::{read_container, write_container, ContainerError};
pub use trace::{
    intermediate_value, power_value, DType, Intermediate, LeakageSpec, PowerModel, Trace,
    TraceMeta, TraceSet,
};
