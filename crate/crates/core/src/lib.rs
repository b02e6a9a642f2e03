pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gp_layer;
pub mod kernels;
pub mod lv_layer;
pub mod model;
pub mod numerics;
pub mod predict;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
