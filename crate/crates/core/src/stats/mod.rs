//! Embedding and significance analysis: exact t-SNE, logistic regression
//! with Wald tests, and the Mantel distance-correlation test.

mod logistic;
mod mantel;
mod profile;
mod tsne;

pub use logistic::{logistic_fit, wald_test, LogisticFit, WaldTest};
pub use profile::acoustic_profiles;
pub use mantel::{euclidean_distances, mantel_test, MantelResult, DEFAULT_PERMUTATIONS};
pub use tsne::{conditional_affinities, silhouette, tsne, Embedding2D, TsneConfig};
