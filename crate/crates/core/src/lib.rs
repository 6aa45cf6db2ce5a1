//! Desk-scale numerics for C^1 nonuniformly hyperbolic diffeomorphisms of the
//! 2-torus: derivative cocycles, resonance blocks, local invariant manifolds,
//! shadowing and closing of pseudo-orbits, horseshoes and spectrum matching.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod cloud;
pub mod cocycle;
pub mod error;
pub mod horseshoe;
pub mod manifolds;
pub mod shadowing;
pub mod spectrum;
pub mod systems;

pub use error::{Error, ErrorKind, Result};
pub use systems::{DiscreteMap, Splitting, TorusMap, TorusPoint};
