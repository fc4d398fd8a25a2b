pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod image;
pub mod imageproc;
pub mod metrics;
pub mod pipeline;
pub mod profiles;
pub mod real;
pub mod sampler;
pub mod seed;
pub mod store;
pub mod synthgen;
pub mod trainer;
