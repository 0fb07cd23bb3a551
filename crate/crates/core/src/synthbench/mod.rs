//! Synthetic multi-class benchmark with a controlled score-scale mismatch
//! between classes, and a memory-bank nearest-neighbour base scorer.
//!
//! Every class is an isotropic Gaussian cloud of feature vectors around its
//! own centre. Spreads differ between classes, so nearest-neighbour
//! distances (and therefore anomaly scores) differ in scale, while anomalies
//! are shifted by a multiple of the class spread so every class is equally
//! hard on its own.

mod coreset;
mod generate;

pub use coreset::{fit_coreset, score_knn, Coreset};
pub use generate::{
    generate, generate_in_memory, ClassParams, SynthConfig, SynthDataset, SynthImage,
    CLASSES_FILE, MANIFEST_FILE,
};
