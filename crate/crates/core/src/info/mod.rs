//! Entropy-based dependence measures estimated from samples.

mod digamma;
mod knn;

pub use digamma::{digamma, EULER_GAMMA};
pub use knn::{
    knn_cmi, knn_cmi_jittered, knn_mi, normalize_with, normalized_cmi, normalized_mi, self_information,
    MiEstimate, Sample3, Variable, JITTER_SCALE,
};
