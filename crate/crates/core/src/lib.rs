//! Localization metrics, attribution methods, fidelity checks and
//! nonparametric statistics for evaluating visual explanations against
//! ground-truth masks.

pub mod attribution;
pub mod io;
pub mod metrics;
pub mod model;
pub mod npy;
pub mod pipeline;
pub mod refnet;
pub mod sanity;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use model::{DifferentiableModel, LinearModel};
pub use refnet::RefNet;
pub use tensor::{BinaryMask, Heatmap, ImageTensor};
