pub mod autodiff;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod features;
pub mod masking;
pub mod objectives;
pub mod matrix;
pub mod quantizer;
pub mod rng;
pub mod trainer;
pub mod verify;
