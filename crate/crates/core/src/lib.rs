pub mod checkpoint;
pub mod degrade;
pub mod eval;
pub mod image;
pub mod model;
pub mod tensor;
pub mod train;
pub mod wire;
