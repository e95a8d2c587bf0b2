//! Deterministic simulator and analysis toolkit for synchronizing two
//! clocks over fiber with two-photon interference.
//!
//! A pulsed photon-pair source feeds two fiber paths whose lengths drift
//! with temperature. A feedback loop dithers a motorized delay line around
//! the two-photon coincidence dip to hold the paths balanced; tap detectors
//! at the far ends timestamp photon arrivals against each local clock, and
//! the cross-correlation of the two timestamp streams yields the clock
//! offset. Stability is quantified as time deviation versus averaging
//! time.
//!
//! Everything is seeded and reproducible: identical seed and configuration
//! give byte-identical outputs.
//!
//! ```
//! use homsync::photonics::HomDipModel;
//! use homsync::timebase::Duration;
//!
//! let dip = HomDipModel::new(0.68, Duration::from_ps(3), 3000.0).unwrap();
//! assert!((dip.envelope(Duration::ZERO) - 0.32).abs() < 1e-12);
//! ```
//!
//! The book under `book/` walks through each subsystem; its code snippets
//! compile and run as doc-tests of this crate (see the `book` module at the
//! bottom of this file).

pub mod config;
pub mod control;
pub mod error;
pub mod metrology;
pub mod photonics;
pub mod plant;
pub mod scenario;
pub mod seeds;
pub mod sync;
pub mod timebase;

pub use error::{
    ConfigError, ControlError, MetrologyError, PhotonicsError, PlantError, ScenarioError,
    SyncError,
};

/// Book chapters double as doc-tests so the prose and the library cannot
/// drift apart. `cargo test --doc` runs every fenced Rust block.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/timebase.md")]
    mod timebase {}
    #[doc = include_str!("../../../book/src/hom-dip.md")]
    mod hom_dip {}
    #[doc = include_str!("../../../book/src/apparatus.md")]
    mod apparatus {}
    #[doc = include_str!("../../../book/src/locking.md")]
    mod locking {}
    #[doc = include_str!("../../../book/src/offsets.md")]
    mod offsets {}
    #[doc = include_str!("../../../book/src/stability.md")]
    mod stability {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
}
