//! Deformable head fields for one-shot 4D head synthesis at desk scale.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datagen;
pub mod deform;
pub mod error;
pub mod geom;
pub mod headmodel;
pub mod imageio;
pub mod losses;
pub mod motionnet;
pub mod render;
pub mod spatial;
pub mod triplane;
pub mod verify;

pub use error::{Error, Result};
