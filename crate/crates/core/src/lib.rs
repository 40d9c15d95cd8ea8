pub mod degrade;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;
