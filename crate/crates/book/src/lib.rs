//! Compiles the guide in `book/src` so its code blocks run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/environments.md")]
pub mod environments {}
#[doc = include_str!("../../../book/src/policies.md")]
pub mod policies {}
#[doc = include_str!("../../../book/src/pivots.md")]
pub mod pivots {}
#[doc = include_str!("../../../book/src/optimization.md")]
pub mod optimization {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
