pub mod augment;
pub mod dsp;
pub mod metrics;
pub mod nn;
pub mod score_io;
pub mod tensor;
pub mod toy;
pub mod training;
