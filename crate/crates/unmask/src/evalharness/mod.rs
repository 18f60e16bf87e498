//! Evaluation protocols: detection ROC/AUC at contamination 0.5, defense
//! accuracy at contamination 1, the multi-vector attack grid, and report
//! emission.

pub mod grid;
pub mod report;
pub mod svg;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignmentError, Pipeline};
use crate::attacks::AttackError;
use crate::datagen::{DataError, Dataset};
use crate::extractor::ExtractorError;
use crate::feature_matrix::MatrixError;
use crate::rng;
use crate::tinynet::NetError;

pub use grid::{attack_grid, EvalReport, GridCell, RocEntry};
pub use report::emit_report;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need both benign and adversarial scores")]
    SingleClass,
    #[error("evaluation pool is empty")]
    EmptyPool,
    #[error("report has no cells to emit")]
    EmptyReport,
    #[error("unknown class set {0:?}")]
    UnknownClassSet(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    AdvTrain(#[from] crate::advtrain::AdvTrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Stats(#[from] crate::robust_stats::StatsError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One operating point of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Receiver operating characteristic under the "d ≥ t ⇒ adversarial"
/// rule, swept over every distinct observed distance plus closing
/// endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Build the exact empirical ROC from (distance, is_adversarial) pairs.
/// AUC is the trapezoidal area over FPR.
pub fn roc(scored: &[(f64, bool)]) -> Result<RocCurve, EvalError> {
    let n_adv = scored.iter().filter(|(_, adv)| *adv).count();
    let n_ben = scored.len() - n_adv;
    if n_adv == 0 || n_ben == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut thresholds: Vec<f64> = scored.iter().map(|(d, _)| *d).collect();
    thresholds.push(0.0);
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    thresholds.dedup();
    // Closing endpoint above any admissible distance: nothing is flagged.
    thresholds.push(2.0);

    let mut points = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        let tp = scored.iter().filter(|(d, adv)| *adv && *d >= t).count();
        let fp = scored.iter().filter(|(d, adv)| !*adv && *d >= t).count();
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / n_adv as f64,
            fpr: fp as f64 / n_ben as f64,
        });
    }

    // Trapezoid over FPR ascending (points are threshold-ascending, hence
    // rate-descending).
    let mut auc = 0.0;
    for pair in points.windows(2) {
        let (hi, lo) = (&pair[0], &pair[1]);
        auc += (hi.fpr - lo.fpr) * (hi.tpr + lo.tpr) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// Probability-of-correct-ranking estimator (the Wilcoxon statistic):
/// P(d_adv > d_benign) + ½·P(ties). An independent route to the same AUC.
pub fn wilcoxon_auc(scored: &[(f64, bool)]) -> Result<f64, EvalError> {
    let adv: Vec<f64> = scored.iter().filter(|(_, a)| *a).map(|(d, _)| *d).collect();
    let ben: Vec<f64> = scored.iter().filter(|(_, a)| !*a).map(|(d, _)| *d).collect();
    if adv.is_empty() || ben.is_empty() {
        return Err(EvalError::SingleClass);
    }
    let mut score = 0.0;
    for &a in &adv {
        for &b in &ben {
            if a > b {
                score += 1.0;
            } else if a == b {
                score += 0.5;
            }
        }
    }
    Ok(score / (adv.len() as f64 * ben.len() as f64))
}

/// Seeded downsample of `data` to `n` samples (original order kept).
pub fn downsample(data: &Dataset, n: usize, seed: u64) -> Dataset {
    if data.len() <= n {
        return data.clone();
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::chacha(rng::derive(seed, &[0xd0f7]));
    indices.shuffle(&mut r);
    indices.truncate(n);
    indices.sort_unstable();
    Dataset {
        samples: indices.into_iter().map(|i| data.samples[i].clone()).collect(),
        vocab_hash: data.vocab_hash.clone(),
    }
}

/// Detection protocol at contamination 0.5: equal-sized benign and
/// adversarial pools (the larger is downsampled, seeded), per-sample
/// distances from the pipeline, exact ROC over the pool.
///
/// The attacked dataset is expected to contain only successfully attacked
/// samples; pair it with the success mask from `attack_batch`.
pub fn detection_eval(
    pipeline: &Pipeline,
    benign: &Dataset,
    attacked: &Dataset,
    seed: u64,
) -> Result<RocCurve, EvalError> {
    if benign.is_empty() || attacked.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let n = benign.len().min(attacked.len());
    let benign = downsample(benign, n, rng::derive(seed, &[0]));
    let attacked = downsample(attacked, n, rng::derive(seed, &[1]));
    let mut scored = Vec::with_capacity(2 * n);
    for s in &benign.samples {
        scored.push((pipeline.run(s)?.detection.distance, false));
    }
    for s in &attacked.samples {
        scored.push((pipeline.run(s)?.detection.distance, true));
    }
    roc(&scored)
}

/// Defense protocol at contamination 1: the fraction of attacked samples
/// the pipeline maps back to their true label.
pub fn defense_eval(pipeline: &Pipeline, attacked: &Dataset) -> Result<f64, EvalError> {
    if attacked.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut hits = 0usize;
    for s in &attacked.samples {
        let out = pipeline.run(s)?;
        if crate::feature_matrix::normalize(&out.predicted_class)
            == crate::feature_matrix::normalize(&s.label)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / attacked.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::PipelineMode;
    use crate::datagen::{feature_layout, feature_universe, generate_dataset, GridParams};
    use crate::extractor::{Extractor, ExtractorNoise};
    use crate::feature_matrix::bundled_matrix;
    use crate::tinynet::{init, ArchSpec, Head};
    use rand::Rng;

    #[test]
    fn perfect_separation_has_unit_auc() {
        let scored: Vec<(f64, bool)> = (0..20)
            .map(|i| if i < 10 { (0.9, true) } else { (0.1, false) })
            .collect();
        let curve = roc(&scored).unwrap();
        assert_eq!(curve.auc, 1.0);
    }

    #[test]
    fn identical_distributions_hover_near_half() {
        let mut r = rng::chacha(3);
        let scored: Vec<(f64, bool)> = (0..2000)
            .map(|i| (r.gen_range(0.0..1.0), i % 2 == 0))
            .collect();
        let curve = roc(&scored).unwrap();
        assert!((curve.auc - 0.5).abs() < 0.02, "auc {}", curve.auc);
    }

    #[test]
    fn zero_threshold_endpoint_flags_everything() {
        let scored = vec![(0.2, true), (0.8, true), (0.3, false)];
        let curve = roc(&scored).unwrap();
        let first = &curve.points[0];
        assert_eq!(first.threshold, 0.0);
        assert_eq!((first.tpr, first.fpr), (1.0, 1.0));
        let last = curve.points.last().unwrap();
        assert!(last.threshold > 1.0);
        assert_eq!((last.tpr, last.fpr), (0.0, 0.0));
    }

    #[test]
    fn single_class_input_is_an_error() {
        assert!(matches!(roc(&[(0.5, true)]), Err(EvalError::SingleClass)));
        assert!(matches!(wilcoxon_auc(&[(0.5, false)]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn trapezoid_matches_wilcoxon_with_ties() {
        let mut r = rng::chacha(17);
        // Quantized distances force plenty of ties.
        let scored: Vec<(f64, bool)> = (0..400)
            .map(|i| {
                let d = (r.gen_range(0u32..11) as f64) / 10.0;
                (d, i % 3 == 0)
            })
            .collect();
        let curve = roc(&scored).unwrap();
        let wilcoxon = wilcoxon_auc(&scored).unwrap();
        assert!((curve.auc - wilcoxon).abs() < 1e-9, "{} vs {wilcoxon}", curve.auc);
    }

    #[test]
    fn roc_points_are_monotone() {
        let mut r = rng::chacha(23);
        let scored: Vec<(f64, bool)> = (0..300)
            .map(|_| (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0) > 0.4))
            .collect();
        let curve = roc(&scored).unwrap();
        for pair in curve.points.windows(2) {
            assert!(pair[0].threshold < pair[1].threshold);
            assert!(pair[1].tpr <= pair[0].tpr);
            assert!(pair[1].fpr <= pair[0].fpr);
        }
    }

    #[test]
    fn downsampling_is_seed_deterministic() {
        let m = bundled_matrix().expand_subfeatures();
        let classes = m.class_set_classes("CS3a").unwrap().to_vec();
        let layout = feature_layout(&m, &classes, GridParams::default(), 0).unwrap();
        let (d, _, _) = generate_dataset(&m, &classes, &layout, 10, 0.2, 1, (1.0, 0.0, 0.0)).unwrap();
        let a = downsample(&d, 7, 5);
        let b = downsample(&d, 7, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        let c = downsample(&d, 7, 6);
        assert_ne!(a, c);
    }

    fn oracle_pipeline(threshold: f64) -> (Pipeline, Dataset) {
        let m = bundled_matrix();
        let expanded = m.expand_subfeatures();
        let classes = expanded.class_set_classes("CS3a").unwrap().to_vec();
        let layout = feature_layout(&expanded, &classes, GridParams::default(), 0).unwrap();
        let (train, _, test) =
            generate_dataset(&expanded, &classes, &layout, 40, 0.0, 2, (0.5, 0.0, 0.5)).unwrap();
        let batch = train.class_batch(&classes).unwrap();
        let net = init(
            ArchSpec::mlp(batch.x.ncols(), &[16], classes.len(), Head::SoftmaxClassifier),
            classes.clone(),
            3,
        )
        .unwrap();
        let (net, _) = crate::tinynet::train(
            net,
            &batch,
            &crate::tinynet::TrainOptions { epochs: 15, lr: 0.1, batch_size: 16, seed: 3 },
        )
        .unwrap();
        let universe = feature_universe(&expanded, &classes).unwrap();
        let oracle = Extractor::oracle(ExtractorNoise::noiseless(), universe, 0).unwrap();
        let pipeline = Pipeline::new(
            net,
            oracle,
            &m,
            &classes,
            threshold,
            0.5,
            PipelineMode::AlwaysRectify,
        )
        .unwrap();
        (pipeline, test)
    }

    #[test]
    fn noiseless_oracle_rectifies_perfectly() {
        let (pipeline, test) = oracle_pipeline(0.5);
        // Even on unattacked data, always-rectify recovers every label:
        // drop_p = 0 gives full rows and bundled rows are distinct.
        assert_eq!(defense_eval(&pipeline, &test).unwrap(), 1.0);
    }

    #[test]
    fn empty_pools_are_rejected() {
        let (pipeline, test) = oracle_pipeline(0.5);
        let empty = Dataset { samples: vec![], vocab_hash: test.vocab_hash.clone() };
        assert!(matches!(defense_eval(&pipeline, &empty), Err(EvalError::EmptyPool)));
        assert!(matches!(
            detection_eval(&pipeline, &empty, &test, 0),
            Err(EvalError::EmptyPool)
        ));
    }
}
