pub mod error;
pub mod feasibility;
pub mod geometry;
pub mod link;
pub mod qkd;
pub mod source;

pub use error::{Error, Result};
pub mod mc;
pub mod rng;
pub mod timeline;
pub mod timetag;
pub mod coincidence;
pub mod pulsesync;
pub mod bell;
pub mod scenario;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/link_budget.md")]
    mod link_budget {}
    #[doc = include_str!("../../../book/src/sources.md")]
    mod sources {}
    #[doc = include_str!("../../../book/src/feasibility.md")]
    mod feasibility {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/coincidence.md")]
    mod coincidence {}
    #[doc = include_str!("../../../book/src/bell.md")]
    mod bell {}
    #[doc = include_str!("../../../book/src/qkd.md")]
    mod qkd {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
