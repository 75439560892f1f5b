pub mod content;
pub mod error;
pub mod foe;
pub mod frameselect;
pub mod geom;
pub mod motion;
pub mod par;
pub mod raster;
pub mod render;
pub mod stab2d;
pub mod stab360;
pub mod tracking;
pub mod viewplan;

pub use error::{Error, Result};
