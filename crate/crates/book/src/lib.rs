//! The guide's chapters, compiled so their listings run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}

#[doc = include_str!("../../../book/src/coarse.md")]
pub mod coarse {}

#[doc = include_str!("../../../book/src/flow.md")]
pub mod flow {}

#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}

#[doc = include_str!("../../../book/src/refinement.md")]
pub mod refinement {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
