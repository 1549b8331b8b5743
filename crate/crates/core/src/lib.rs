//! Speech-driven gesture synthesis with an autoregressive conditional
//! normalizing flow.

pub mod bvh;
pub mod checkpoint;
pub mod config;
pub mod flow;
pub mod kinematics;
pub mod audio;
pub mod dataset;
pub mod evaluation;
pub mod matrix;
pub mod synthesis;
pub mod tensorfile;
pub mod toy;
pub mod training;
