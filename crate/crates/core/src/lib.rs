pub mod coarse;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geom;
pub mod image;
pub mod losses;
pub mod mesh;
pub mod refine;
pub mod render;
pub mod scene;
pub mod solver;

pub use error::{Error, Result};
