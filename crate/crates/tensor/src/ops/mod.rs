mod conv;
mod elementwise;
mod linalg;
mod shape;

pub use elementwise::broadcast_shape;
pub use linalg::{bilinear_matrix, pool2_matrix};
