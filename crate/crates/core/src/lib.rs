#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod coeffs;
pub mod delay;
pub mod density;
pub mod error;
pub mod flow;
pub mod hormander;
pub mod malliavin;
pub mod mastereq;
pub mod path;
pub mod rng;
pub mod roughpath;
pub mod scenario;
pub mod timegrid;

pub use error::{Error, Result};
pub use path::GridPath;
pub use timegrid::{Config, MeasureSpec, TimeGrid};
