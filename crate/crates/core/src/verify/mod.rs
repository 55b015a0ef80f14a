//! Reference implementations and the randomized checks built on them.

pub mod gradcheck;
pub mod gradients;
pub mod oracles;
pub mod suites;
