//! Robust-feature extraction behind one interface, with three
//! implementations: a ground-truth oracle with configurable miss/spurious
//! noise, a trained multi-label network reading pixels only, and a
//! file-backed reader of precomputed detections.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, Sample};
use crate::feature_matrix::{normalize, FeatureSet, FeatureVocabulary};
use crate::rng;
use crate::tinynet::{self, ArchSpec, Head, NetError, TinyNet, TrainOptions};

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("confidence {confidence} for {feature:?} outside [0, 1]")]
    BadConfidence { feature: String, confidence: f64 },
    #[error("duplicate detection for feature {0:?}")]
    DuplicateDetection(String),
    #[error("no precomputed detections for sample {0:?}")]
    MissingSample(String),
    #[error("detections line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("feature {0:?} is not in the vocabulary")]
    UnknownFeature(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cutoff {0} outside [0, 1]")]
    BadCutoff(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-feature detections with confidences in [0, 1]; at most one entry
/// per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionResult {
    detections: Vec<(String, f64)>,
}

impl ExtractionResult {
    pub fn new(detections: Vec<(String, f64)>) -> Result<Self, ExtractorError> {
        let mut seen = std::collections::HashSet::new();
        for (feature, confidence) in &detections {
            if !(0.0..=1.0).contains(confidence) {
                return Err(ExtractorError::BadConfidence {
                    feature: feature.clone(),
                    confidence: *confidence,
                });
            }
            if !seen.insert(normalize(feature)) {
                return Err(ExtractorError::DuplicateDetection(feature.clone()));
            }
        }
        Ok(Self { detections })
    }

    pub fn detections(&self) -> &[(String, f64)] {
        &self.detections
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Keep features detected at or above the cutoff.
pub fn to_feature_set(result: &ExtractionResult, cutoff: f64) -> Result<FeatureSet, ExtractorError> {
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(ExtractorError::BadCutoff(cutoff));
    }
    Ok(FeatureSet::from_validated(
        result
            .detections
            .iter()
            .filter(|(_, c)| *c >= cutoff)
            .map(|(f, _)| normalize(f))
            .collect(),
    ))
}

/// Oracle imperfection: drop a true feature with `p_miss`, inject an
/// absent feature from the pool with `p_spur`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorNoise {
    pub p_miss: f64,
    pub p_spur: f64,
}

impl Default for ExtractorNoise {
    fn default() -> Self {
        Self { p_miss: 0.2, p_spur: 0.05 }
    }
}

impl ExtractorNoise {
    pub fn noiseless() -> Self {
        Self { p_miss: 0.0, p_spur: 0.0 }
    }

    fn validate(&self) -> Result<(), ExtractorError> {
        for p in [self.p_miss, self.p_spur] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ExtractorError::BadProbability(p));
            }
        }
        Ok(())
    }
}

/// The extraction model K.
pub enum Extractor {
    /// Reads ground-truth features, degraded by noise; deterministic per
    /// (sample id, seed). Isolates alignment logic from representation
    /// learning.
    Oracle { noise: ExtractorNoise, pool: Vec<String>, seed: u64 },
    /// Multi-label network over pixels; sees exactly what the classifier
    /// sees, so attacks genuinely perturb its input too.
    Trained { net: TinyNet },
    /// Precomputed detections keyed by sample id, e.g. exported by a real
    /// part-segmentation model.
    File { detections: HashMap<String, Vec<(String, f64)>> },
}

impl Extractor {
    pub fn oracle(noise: ExtractorNoise, pool: Vec<String>, seed: u64) -> Result<Self, ExtractorError> {
        noise.validate()?;
        Ok(Self::Oracle { noise, pool: pool.iter().map(|f| normalize(f)).collect(), seed })
    }

    /// The feature names this extractor can emit.
    pub fn feature_names(&self) -> Vec<String> {
        match self {
            Extractor::Oracle { pool, .. } => pool.clone(),
            Extractor::Trained { net } => net.labels().to_vec(),
            Extractor::File { detections } => {
                let mut names: Vec<String> = detections
                    .values()
                    .flatten()
                    .map(|(f, _)| normalize(f))
                    .collect();
                names.sort();
                names.dedup();
                names
            }
        }
    }

    /// Extract robust features from one sample.
    pub fn extract(&self, sample: &Sample) -> Result<ExtractionResult, ExtractorError> {
        match self {
            Extractor::Oracle { noise, pool, seed } => {
                let mut r = rng::chacha(rng::derive_str(*seed, &sample.id));
                let mut detections = Vec::new();
                for f in pool {
                    if sample.truth_features.contains(f) {
                        if r.gen_bool(noise.p_miss) {
                            continue;
                        }
                        detections.push((f.clone(), 1.0));
                    } else if r.gen_bool(noise.p_spur) {
                        detections.push((f.clone(), 1.0));
                    }
                }
                ExtractionResult::new(detections)
            }
            Extractor::Trained { net } => {
                let x = ndarray::Array1::from(sample.pixels_f64());
                let conf = net.predict_confidences(x.view())?;
                let detections = net
                    .labels()
                    .iter()
                    .zip(conf.iter())
                    .map(|(f, &c)| (f.clone(), c.clamp(0.0, 1.0)))
                    .collect();
                ExtractionResult::new(detections)
            }
            Extractor::File { detections } => {
                let recs = detections
                    .get(&sample.id)
                    .ok_or_else(|| ExtractorError::MissingSample(sample.id.clone()))?;
                ExtractionResult::new(recs.clone())
            }
        }
    }
}

use rand::Rng;

/// Train a multi-label network to detect the features of `feature_names`
/// from pixels, using per-feature binary cross-entropy against the
/// ground-truth feature sets.
///
/// Most features are absent in most samples, which skews the learned
/// decision boundary toward the present cluster; after training, each
/// output bias is recentered on the midpoint of the mean present and mean
/// absent logits over the training set.
pub fn train_extractor(
    data: &Dataset,
    feature_names: &[String],
    hidden: &[usize],
    opts: &TrainOptions,
) -> Result<Extractor, ExtractorError> {
    if data.is_empty() {
        return Err(ExtractorError::EmptyDataset);
    }
    let batch = data.multilabel_batch(feature_names);
    let dim = batch.x.ncols();
    let arch = ArchSpec::mlp(dim, hidden, feature_names.len(), Head::SigmoidMultilabel);
    let net = tinynet::init(arch, feature_names.to_vec(), opts.seed)?;
    let (mut net, _) = tinynet::train(net, &batch, opts)?;

    if opts.epochs > 0 {
        let logits = net.logits(batch.x.view())?;
        let targets = match &batch.y {
            tinynet::Labels::MultiHot(t) => t,
            _ => unreachable!("multilabel batch"),
        };
        let mut deltas = vec![0.0; feature_names.len()];
        for j in 0..feature_names.len() {
            let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..logits.nrows() {
                if targets[[i, j]] > 0.5 {
                    pos += logits[[i, j]];
                    n_pos += 1;
                } else {
                    neg += logits[[i, j]];
                    n_neg += 1;
                }
            }
            if n_pos > 0 && n_neg > 0 {
                deltas[j] = -(pos / n_pos as f64 + neg / n_neg as f64) / 2.0;
            }
        }
        net.shift_output_biases(&deltas)?;
    }
    Ok(Extractor::Trained { net })
}

/// Macro-averaged per-feature F1 at the given cutoff. Features that never
/// occur and are never predicted are skipped.
pub fn mean_feature_f1(
    extractor: &Extractor,
    data: &Dataset,
    cutoff: f64,
    feature_names: &[String],
) -> Result<f64, ExtractorError> {
    if data.is_empty() {
        return Err(ExtractorError::EmptyDataset);
    }
    let mut tp = vec![0usize; feature_names.len()];
    let mut fp = vec![0usize; feature_names.len()];
    let mut fn_ = vec![0usize; feature_names.len()];
    for sample in &data.samples {
        let extracted = to_feature_set(&extractor.extract(sample)?, cutoff)?;
        for (j, f) in feature_names.iter().enumerate() {
            let truth = sample.truth_features.contains(f);
            let pred = extracted.contains(f);
            match (truth, pred) {
                (true, true) => tp[j] += 1,
                (false, true) => fp[j] += 1,
                (true, false) => fn_[j] += 1,
                (false, false) => {}
            }
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..feature_names.len() {
        let denom = 2 * tp[j] + fp[j] + fn_[j];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[j] as f64 / denom as f64;
        count += 1;
    }
    Ok(if count == 0 { 1.0 } else { sum / count as f64 })
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    id: String,
    detections: Vec<(String, f64)>,
}

/// Parse precomputed detections (one JSON record per line) against a
/// vocabulary.
pub fn parse_detections(text: &str, vocab: &FeatureVocabulary) -> Result<Extractor, ExtractorError> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| ExtractorError::BadRecord { line: line_no, message: e.to_string() })?;
        let mut detections = Vec::with_capacity(rec.detections.len());
        for (feature, confidence) in rec.detections {
            let f = normalize(&feature);
            if !vocab.contains(&f) {
                return Err(ExtractorError::UnknownFeature(feature));
            }
            detections.push((f, confidence));
        }
        // Surfaces duplicate features and bad confidences per record.
        ExtractionResult::new(detections.clone())?;
        if map.insert(rec.id.clone(), detections).is_some() {
            return Err(ExtractorError::BadRecord {
                line: line_no,
                message: format!("duplicate sample id {:?}", rec.id),
            });
        }
    }
    Ok(Extractor::File { detections: map })
}

/// Load precomputed detections from a JSON-lines file.
pub fn load_detections(
    path: impl AsRef<Path>,
    vocab: &FeatureVocabulary,
) -> Result<Extractor, ExtractorError> {
    let mut text = String::new();
    BufReader::new(std::fs::File::open(path)?).read_to_string(&mut text)?;
    parse_detections(&text, vocab)
}

use std::io::Read;

/// Export an extractor's detections over a dataset in the same JSON-lines
/// format, so external models can feed the pipeline.
pub fn export_detections(
    extractor: &Extractor,
    data: &Dataset,
    path: impl AsRef<Path>,
) -> Result<(), ExtractorError> {
    let mut out = std::fs::File::create(path)?;
    for sample in &data.samples {
        let result = extractor.extract(sample)?;
        let rec = DetectionRecord {
            id: sample.id.clone(),
            detections: result.detections().to_vec(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{feature_layout, feature_universe, generate_dataset, GridParams};
    use crate::feature_matrix::bundled_matrix;

    fn tiny_data() -> (Dataset, Vec<String>) {
        let m = bundled_matrix().expand_subfeatures();
        let classes = m.class_set_classes("CS3a").unwrap().to_vec();
        let layout = feature_layout(&m, &classes, GridParams::default(), 0).unwrap();
        let (train, _, _) =
            generate_dataset(&m, &classes, &layout, 4, 0.2, 5, (1.0, 0.0, 0.0)).unwrap();
        let universe = feature_universe(&m, &classes).unwrap();
        (train, universe)
    }

    #[test]
    fn noiseless_oracle_reproduces_truth_exactly() {
        let (data, universe) = tiny_data();
        let oracle = Extractor::oracle(ExtractorNoise::noiseless(), universe, 0).unwrap();
        for s in &data.samples {
            let result = oracle.extract(s).unwrap();
            assert!(result.detections().iter().all(|(_, c)| *c == 1.0));
            let set = to_feature_set(&result, 0.5).unwrap();
            assert_eq!(set, s.truth_features);
        }
    }

    #[test]
    fn all_miss_oracle_is_empty() {
        let (data, universe) = tiny_data();
        let oracle =
            Extractor::oracle(ExtractorNoise { p_miss: 1.0, p_spur: 0.0 }, universe, 0).unwrap();
        for s in &data.samples {
            assert!(oracle.extract(s).unwrap().is_empty());
        }
    }

    #[test]
    fn oracle_is_deterministic_per_sample_and_seed() {
        let (data, universe) = tiny_data();
        let a = Extractor::oracle(ExtractorNoise::default(), universe.clone(), 3).unwrap();
        let b = Extractor::oracle(ExtractorNoise::default(), universe, 3).unwrap();
        for s in &data.samples {
            assert_eq!(a.extract(s).unwrap(), b.extract(s).unwrap());
        }
    }

    #[test]
    fn file_extractor_reports_missing_ids() {
        let (data, universe) = tiny_data();
        let m = bundled_matrix();
        let line = format!(
            r#"{{"id":"{}","detections":[["head",0.9],["wheel",0.2]]}}"#,
            data.samples[0].id
        );
        let ex = parse_detections(&line, m.vocabulary()).unwrap();
        assert!(ex.extract(&data.samples[0]).is_ok());
        assert!(matches!(
            ex.extract(&data.samples[1]),
            Err(ExtractorError::MissingSample(_))
        ));
        drop(universe);
    }

    #[test]
    fn detections_are_validated_on_parse() {
        let m = bundled_matrix();
        let vocab = m.vocabulary();
        assert!(matches!(
            parse_detections(r#"{"id":"a","detections":[["wings2",0.9]]}"#, vocab),
            Err(ExtractorError::UnknownFeature(_))
        ));
        assert!(matches!(
            parse_detections(r#"{"id":"a","detections":[["head",1.5]]}"#, vocab),
            Err(ExtractorError::BadConfidence { .. })
        ));
        assert!(matches!(
            parse_detections(r#"{"id":"a","detections":[["head",0.5],["head",0.6]]}"#, vocab),
            Err(ExtractorError::DuplicateDetection(_))
        ));
        assert!(matches!(
            parse_detections("not json", vocab),
            Err(ExtractorError::BadRecord { line: 1, .. })
        ));
    }

    #[test]
    fn cutoff_filters_detections() {
        let result =
            ExtractionResult::new(vec![("wheel".into(), 0.9), ("beak".into(), 0.3)]).unwrap();
        let set = to_feature_set(&result, 0.5).unwrap();
        assert!(set.contains("wheel") && !set.contains("beak"));
        assert_eq!(to_feature_set(&result, 0.0).unwrap().len(), 2);
        // Cutoff 1 keeps confidences at exactly 1.0.
        let exact = ExtractionResult::new(vec![("wheel".into(), 1.0)]).unwrap();
        assert_eq!(to_feature_set(&exact, 1.0).unwrap().len(), 1);
        assert!(to_feature_set(&result, 1.5).is_err());
    }

    #[test]
    fn cutoff_is_monotone() {
        let result = ExtractionResult::new(vec![
            ("wheel".into(), 0.9),
            ("beak".into(), 0.3),
            ("head".into(), 0.6),
        ])
        .unwrap();
        let mut last = usize::MAX;
        for cutoff in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let n = to_feature_set(&result, cutoff).unwrap().len();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn oracle_f1_extremes() {
        let (data, universe) = tiny_data();
        let perfect =
            Extractor::oracle(ExtractorNoise::noiseless(), universe.clone(), 0).unwrap();
        assert_eq!(mean_feature_f1(&perfect, &data, 0.5, &universe).unwrap(), 1.0);
        let blind =
            Extractor::oracle(ExtractorNoise { p_miss: 1.0, p_spur: 0.0 }, universe.clone(), 0)
                .unwrap();
        assert_eq!(mean_feature_f1(&blind, &data, 0.5, &universe).unwrap(), 0.0);
    }

    #[test]
    fn untrained_extractor_sits_near_half_confidence() {
        let (data, universe) = tiny_data();
        let ex = train_extractor(
            &data,
            &universe,
            &[],
            &TrainOptions { epochs: 0, ..Default::default() },
        )
        .unwrap();
        // Zero-ish random weights: confidences scatter symmetrically
        // around 0.5, carrying no signal.
        let mut sum = 0.0;
        let mut count = 0.0;
        for s in &data.samples {
            for (_, c) in ex.extract(s).unwrap().detections() {
                assert!(*c > 0.0 && *c < 1.0);
                sum += c;
                count += 1.0;
            }
        }
        let mean = sum / count;
        assert!((mean - 0.5).abs() < 0.15, "mean confidence {mean} far from 0.5");
        let f1 = mean_feature_f1(&ex, &data, 0.5, &universe).unwrap();
        assert!(f1 < 0.75, "untrained extractor should not score well, f1 {f1}");
    }

    #[test]
    fn trained_extractor_depends_only_on_pixels() {
        let (data, universe) = tiny_data();
        let ex = train_extractor(&data, &universe, &[], &TrainOptions::default()).unwrap();
        let mut twin = data.samples[0].clone();
        twin.id = "different-id".into();
        twin.label = "Train".into();
        assert_eq!(
            ex.extract(&data.samples[0]).unwrap(),
            ex.extract(&twin).unwrap()
        );
    }
}
