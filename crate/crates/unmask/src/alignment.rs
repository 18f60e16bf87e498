//! Jaccard-similarity scoring between extracted and expected feature
//! sets, attack detection by distance threshold, and misclassification
//! rectification by best-matching class row.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Sample;
use crate::extractor::{to_feature_set, Extractor, ExtractorError};
use crate::feature_matrix::{ClassFeatureMatrix, FeatureSet, MatrixError};
use crate::tinynet::{NetError, TinyNet};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("class list is empty")]
    EmptyClassList,
    #[error("model class {0:?} is missing from the matrix")]
    ModelClassNotInMatrix(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Jaccard similarity |a∩b| / |a∪b|.
///
/// An empty extraction carries maximal evidence of attack, so any empty
/// operand (including both empty) scores 0.
pub fn jaccard(a: &FeatureSet, b: &FeatureSet) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    a.intersection_len(b) as f64 / a.union_len(b) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Benign,
    Adversarial,
}

impl Verdict {
    /// +1 benign, −1 adversarial.
    pub fn as_i8(self) -> i8 {
        match self {
            Verdict::Benign => 1,
            Verdict::Adversarial => -1,
        }
    }
}

/// Outcome of the similarity test between extracted and expected features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Jaccard similarity s.
    pub similarity: f64,
    /// Distance d = 1 − s.
    pub distance: f64,
    pub threshold: f64,
    /// Adversarial iff d ≥ t; the boundary counts as adversarial.
    pub verdict: Verdict,
}

/// Score one extraction against the expected features at threshold `t`.
pub fn detect(
    extracted: &FeatureSet,
    expected: &FeatureSet,
    t: f64,
) -> Result<Detection, AlignmentError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(AlignmentError::BadThreshold(t));
    }
    let s = jaccard(extracted, expected);
    let d = 1.0 - s;
    Ok(Detection {
        similarity: s,
        distance: d,
        threshold: t,
        verdict: if d >= t { Verdict::Adversarial } else { Verdict::Benign },
    })
}

/// Re-classify by feature overlap: the class of `class_names` whose matrix
/// row has the highest Jaccard similarity with the extracted features.
/// Ties break by class order in the matrix.
pub fn rectify(
    extracted: &FeatureSet,
    matrix: &ClassFeatureMatrix,
    class_names: &[String],
) -> Result<String, AlignmentError> {
    if class_names.is_empty() {
        return Err(AlignmentError::EmptyClassList);
    }
    for class in class_names {
        matrix.expected_features(class)?;
    }
    let keys: std::collections::HashSet<String> =
        class_names.iter().map(|c| crate::feature_matrix::normalize(c)).collect();
    let mut best: Option<(&String, f64)> = None;
    for class in matrix.classes() {
        if !keys.contains(&crate::feature_matrix::normalize(class)) {
            continue;
        }
        let s = jaccard(extracted, matrix.expected_features(class)?);
        if best.map_or(true, |(_, best_s)| s > best_s) {
            best = Some((class, s));
        }
    }
    Ok(best.expect("class list validated non-empty").0.clone())
}

/// Whether rectification replaces the model's prediction unconditionally
/// or only after a positive detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    DetectThenRectify,
    AlwaysRectify,
}

/// Full pipeline output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub detection: Detection,
    /// Final class: the model's prediction unless rectification replaced it.
    pub predicted_class: String,
    /// The model's own prediction ŷ.
    pub model_class: String,
    pub rectified: bool,
}

/// The assembled defense: unprotected model, feature extractor, expanded
/// matrix, and decision parameters.
pub struct Pipeline {
    model: TinyNet,
    extractor: Extractor,
    matrix: ClassFeatureMatrix,
    class_names: Vec<String>,
    pub threshold: f64,
    pub cutoff: f64,
    pub mode: PipelineMode,
}

impl Pipeline {
    /// Assemble a pipeline. The matrix is sub-feature-expanded here so row
    /// comparisons always happen over leaf features.
    pub fn new(
        model: TinyNet,
        extractor: Extractor,
        matrix: &ClassFeatureMatrix,
        class_names: &[String],
        threshold: f64,
        cutoff: f64,
        mode: PipelineMode,
    ) -> Result<Self, AlignmentError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(AlignmentError::BadThreshold(threshold));
        }
        if class_names.is_empty() {
            return Err(AlignmentError::EmptyClassList);
        }
        let matrix = matrix.expand_subfeatures();
        for label in model.labels() {
            if !matrix.contains_class(label) {
                return Err(AlignmentError::ModelClassNotInMatrix(label.clone()));
            }
        }
        Ok(Self {
            model,
            extractor,
            matrix,
            class_names: class_names.to_vec(),
            threshold,
            cutoff,
            mode,
        })
    }

    pub fn model(&self) -> &TinyNet {
        &self.model
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    /// Classify, extract, compare, and (maybe) rectify one sample.
    pub fn run(&self, sample: &Sample) -> Result<DefenseOutcome, AlignmentError> {
        let x = ndarray::Array1::from(sample.pixels_f64());
        let predicted = self.model.predict_class(x.view())?;
        let model_class = self.model.labels()[predicted].clone();

        let extracted = to_feature_set(&self.extractor.extract(sample)?, self.cutoff)?;
        let expected = self.matrix.expected_features(&model_class)?;
        let detection = detect(&extracted, expected, self.threshold)?;

        let rectify_now = match self.mode {
            PipelineMode::AlwaysRectify => true,
            PipelineMode::DetectThenRectify => detection.verdict == Verdict::Adversarial,
        };
        let predicted_class = if rectify_now {
            rectify(&extracted, &self.matrix, &self.class_names)?
        } else {
            model_class.clone()
        };
        Ok(DefenseOutcome { detection, predicted_class, model_class, rectified: rectify_now })
    }
}
