pub mod bench;
pub mod dataset;
pub mod geom;
pub mod glimpse;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pyramid;
pub mod spatialize;
pub mod tensor;
pub mod trainer;

pub use geom::Point;
