//! Adversarial detection and defense through robust feature alignment.
//!
//! The library pairs an unprotected classifier with a robust-feature
//! extractor: an image's extracted features (wheel, beak, ...) are compared
//! against the features expected for its predicted class via Jaccard
//! similarity. Low overlap flags an attack; re-classifying against the
//! class-feature matrix rectifies the misclassification.
//!
//! Everything runs at desk scale on small synthetic images: gradient
//! attacks (PGD and momentum-iterative, in both L∞ and L2), an
//! adversarial-training baseline with an ε line search, usefulness and
//! robustness estimators for feature functions, and an evaluation harness
//! producing detection ROC curves and defense-accuracy grids.
//!
//! All randomness flows through explicit per-call seeds; there is no global
//! generator, and identical inputs produce identical outputs byte for byte.

pub mod advtrain;
pub mod alignment;
pub mod attacks;
pub mod config;
pub mod datagen;
pub mod evalharness;
pub mod extractor;
pub mod feature_matrix;
pub mod ingest;
pub mod robust_stats;
pub(crate) mod rng;
pub mod tinynet;

pub use alignment::{detect, jaccard, rectify, DefenseOutcome, Detection, Pipeline, PipelineMode, Verdict};
pub use attacks::{attack_batch, mia, pgd, project, AttackConfig, AttackMethod, AttackResult, Norm};
pub use datagen::{Dataset, Sample};
pub use feature_matrix::{ClassFeatureMatrix, ClassSet, FeatureSet, FeatureVocabulary};
pub use tinynet::TinyNet;
