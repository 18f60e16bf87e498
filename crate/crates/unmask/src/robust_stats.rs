//! Empirical estimators for the feature taxonomy: usefulness (label
//! correlation in expectation), robustness (worst-case usefulness under a
//! bounded perturbation, reported as an upper bound on the true infimum),
//! and construction of a robust dataset in which only chosen features
//! retain label correlation.

use thiserror::Error;

use crate::attacks::{project, AttackConfig, Norm};
use crate::datagen::{gauss, stamp, Dataset, LayoutSpec, Sample};
use crate::feature_matrix::FeatureSet;
use crate::rng;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("labels must be ±1; got {0}")]
    BadLabel(f64),
    #[error("{labels} labels for {samples} samples")]
    LabelCount { labels: usize, samples: usize },
    #[error("sample {id:?} does not fit the layout grid")]
    LayoutMismatch { id: String },
    #[error("feature function {name:?} returned a non-finite value")]
    NonFiniteValue { name: String },
}

type EvalFn = Box<dyn Fn(&Sample) -> f64 + Sync>;
type GradFn = Box<dyn Fn(&Sample) -> Vec<f64> + Sync>;

/// A scalar feature of an image, optionally with its pixel gradient.
pub struct FeatureFunction {
    pub name: String,
    eval: EvalFn,
    grad: Option<GradFn>,
}

impl FeatureFunction {
    pub fn new(name: impl Into<String>, eval: EvalFn, grad: Option<GradFn>) -> Self {
        Self { name: name.into(), eval, grad }
    }

    /// Linear feature w·x + b over the flattened pixels.
    pub fn linear(name: impl Into<String>, weights: Vec<f64>, bias: f64) -> Self {
        let w = weights.clone();
        Self {
            name: name.into(),
            eval: Box::new(move |s: &Sample| {
                s.pixels.iter().zip(&weights).map(|(&p, &w)| p as f64 * w).sum::<f64>() + bias
            }),
            grad: Some(Box::new(move |_s: &Sample| w.clone())),
        }
    }

    /// Correlation of a feature's patch region with its stamp, scaled so a
    /// rendered patch scores 1. Linear in the pixels.
    pub fn patch_indicator(layout: &LayoutSpec, feature: &str) -> Option<Self> {
        let slot = layout.slots.get(feature)?.clone();
        let grid = layout.grid;
        let scale = 1.0 / (grid.contrast * (grid.patch * grid.patch) as f64);
        let mut weights = vec![0.0; grid.height * grid.width * grid.channels];
        for pr in 0..grid.patch {
            for pc in 0..grid.patch {
                let idx = (slot.row + pr) * grid.width + slot.col + pc;
                weights[idx] = slot.pattern[pr * grid.patch + pc] as f64 * scale;
            }
        }
        // b centers the score: w·(x − 0.5) = w·x − 0.5·Σw.
        let bias = -0.5 * weights.iter().sum::<f64>();
        Some(Self::linear(format!("indicator:{feature}"), weights, bias))
    }

    /// Reads the sample's stored label, not its pixels; constant under any
    /// pixel perturbation.
    pub fn label_oracle(positive_class: &str) -> Self {
        let class = crate::feature_matrix::normalize(positive_class);
        Self {
            name: format!("label:{class}"),
            eval: Box::new(move |s: &Sample| {
                if crate::feature_matrix::normalize(&s.label) == class {
                    1.0
                } else {
                    -1.0
                }
            }),
            grad: Some(Box::new(|s: &Sample| vec![0.0; s.pixel_count()])),
        }
    }

    pub fn eval(&self, sample: &Sample) -> f64 {
        (self.eval)(sample)
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }
}

/// ±1 labels for a one-vs-rest reduction against `positive_class`.
pub fn one_vs_rest_labels(samples: &[Sample], positive_class: &str) -> Vec<f64> {
    let class = crate::feature_matrix::normalize(positive_class);
    samples
        .iter()
        .map(|s| if crate::feature_matrix::normalize(&s.label) == class { 1.0 } else { -1.0 })
        .collect()
}

fn check_labels(samples: &[Sample], labels: &[f64]) -> Result<(), StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    if samples.len() != labels.len() {
        return Err(StatsError::LabelCount { labels: labels.len(), samples: samples.len() });
    }
    for &y in labels {
        if y != 1.0 && y != -1.0 {
            return Err(StatsError::BadLabel(y));
        }
    }
    Ok(())
}

/// Estimated usefulness p: the sample mean of y·f(X).
pub fn usefulness(
    f: &FeatureFunction,
    samples: &[Sample],
    labels: &[f64],
) -> Result<f64, StatsError> {
    check_labels(samples, labels)?;
    let mut sum = 0.0;
    for (s, &y) in samples.iter().zip(labels) {
        let v = f.eval(s);
        if !v.is_finite() {
            return Err(StatsError::NonFiniteValue { name: f.name.clone() });
        }
        sum += y * v;
    }
    Ok(sum / samples.len() as f64)
}

/// Robustness estimate γ plus whether the search was probe-only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessReport {
    pub gamma: f64,
    /// The feature exposed no gradient, so only random probes were used.
    pub probe_only: bool,
}

const CORNER_PROBES: usize = 32;

/// Estimated robustness γ: the sample mean of the smallest y·f(X+δ) found
/// over ‖δ‖ ≤ ε.
///
/// The infimum is approximated from above by first-order descent on y·f
/// (when a gradient is available) plus random sign-corner probes projected
/// onto the ball; δ = 0 is always a candidate, so γ ≤ p holds exactly.
pub fn robustness(
    f: &FeatureFunction,
    samples: &[Sample],
    labels: &[f64],
    perturber: &AttackConfig,
    seed: u64,
) -> Result<RobustnessReport, StatsError> {
    check_labels(samples, labels)?;
    let eps = perturber.epsilon_255 / 255.0;
    let probe_only = !f.has_gradient();
    let mut sum = 0.0;
    for (si, (s, &y)) in samples.iter().zip(labels).enumerate() {
        let mut worst = y * f.eval(s);
        if !worst.is_finite() {
            return Err(StatsError::NonFiniteValue { name: f.name.clone() });
        }
        if eps > 0.0 {
            let dim = s.pixel_count();
            let mut perturbed = s.clone();
            if let Some(grad) = &f.grad {
                // Sign/normalized descent on y·f with step 2ε/T reaches a
                // box corner; exact for linear features.
                let steps = perturber.steps.max(1);
                let step = 2.0 * eps / steps as f64;
                let mut delta = vec![0.0; dim];
                for _ in 0..steps {
                    write_perturbed(&mut perturbed, s, &delta);
                    let g = grad(&perturbed);
                    match perturber.norm {
                        Norm::Linf => {
                            for (d, &gv) in delta.iter_mut().zip(&g) {
                                *d -= step * sign(y * gv);
                            }
                        }
                        Norm::L2 => {
                            let n: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if n > 0.0 {
                                for (d, &gv) in delta.iter_mut().zip(&g) {
                                    *d -= step * y * gv / n;
                                }
                            }
                        }
                    }
                    project(&mut delta, perturber.norm, eps);
                    write_perturbed(&mut perturbed, s, &delta);
                    worst = worst.min(y * f.eval(&perturbed));
                }
            }
            let mut r = rng::chacha(rng::derive(seed, &[si as u64]));
            let mut delta = vec![0.0; dim];
            for _ in 0..CORNER_PROBES {
                for d in delta.iter_mut() {
                    *d = if rand::Rng::gen::<bool>(&mut r) { eps } else { -eps };
                }
                project(&mut delta, perturber.norm, eps);
                write_perturbed(&mut perturbed, s, &delta);
                worst = worst.min(y * f.eval(&perturbed));
            }
        }
        sum += worst;
    }
    Ok(RobustnessReport { gamma: sum / samples.len() as f64, probe_only })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn write_perturbed(out: &mut Sample, base: &Sample, delta: &[f64]) {
    for ((o, &b), &d) in out.pixels.iter_mut().zip(&base.pixels).zip(delta) {
        *o = (b as f64 + d) as f32;
    }
}

/// Taxonomy bucket of a feature, from its estimated p and γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureCategory {
    /// Useful and still useful under perturbation (p > p_min, γ > 0).
    GammaRobust,
    /// Useful but flippable (p > p_min, γ ≤ 0): the signal attacks exploit.
    UsefulNonRobust,
    /// Not usefully correlated with the label.
    Neither,
}

pub const DEFAULT_P_MIN: f64 = 0.05;

pub fn categorize(p: f64, gamma: f64, p_min: f64) -> FeatureCategory {
    if p <= p_min {
        FeatureCategory::Neither
    } else if gamma > 0.0 {
        FeatureCategory::GammaRobust
    } else {
        FeatureCategory::UsefulNonRobust
    }
}

/// Combined estimate for one feature function.
#[derive(Debug, Clone, PartialEq)]
pub struct UsefulnessReport {
    pub feature: String,
    pub p: f64,
    pub gamma: f64,
    pub category: FeatureCategory,
    pub probe_only: bool,
}

/// Estimate p and γ for one feature and bucket it.
pub fn evaluate_feature(
    f: &FeatureFunction,
    samples: &[Sample],
    labels: &[f64],
    perturber: &AttackConfig,
    seed: u64,
) -> Result<UsefulnessReport, StatsError> {
    let p = usefulness(f, samples, labels)?;
    let r = robustness(f, samples, labels, perturber, seed)?;
    Ok(UsefulnessReport {
        feature: f.name.clone(),
        p,
        gamma: r.gamma,
        category: categorize(p, r.gamma, DEFAULT_P_MIN),
        probe_only: r.probe_only,
    })
}

/// CSV rows `feature,p,gamma,category` (plus a probe-only marker).
pub fn reports_to_csv(reports: &[UsefulnessReport]) -> String {
    let mut out = String::from("feature,p,gamma,category,probe_only\n");
    for r in reports {
        let cat = match r.category {
            FeatureCategory::GammaRobust => "gamma-robust",
            FeatureCategory::UsefulNonRobust => "useful-non-robust",
            FeatureCategory::Neither => "neither",
        };
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            r.feature, r.p, r.gamma, cat, r.probe_only
        ));
    }
    out
}

/// Re-render a dataset keeping only the patches of `robust_features`;
/// every other pixel (background and excluded patches) becomes
/// label-independent noise, so excluded features lose their correlation.
pub fn build_robust_dataset(
    data: &Dataset,
    robust_features: &FeatureSet,
    layout: &LayoutSpec,
    seed: u64,
) -> Result<Dataset, StatsError> {
    if data.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let grid = &layout.grid;
    let dim = grid.height * grid.width * grid.channels;
    let mut samples = Vec::with_capacity(data.len());
    for s in &data.samples {
        if s.pixel_count() != dim || s.height != grid.height || s.width != grid.width {
            return Err(StatsError::LayoutMismatch { id: s.id.clone() });
        }
        let mut r = rng::chacha(rng::derive_str(rng::derive(seed, &[0xed8]), &s.id));
        let mut pixels = vec![0.0f64; dim];
        for p in pixels.iter_mut() {
            *p = (0.5 + grid.noise_sigma * gauss(&mut r)).clamp(0.0, 1.0);
        }
        let mut kept = std::collections::BTreeSet::new();
        for feature in s.truth_features.iter() {
            if !robust_features.contains(feature) {
                continue;
            }
            if let Some(slot) = layout.slots.get(feature) {
                stamp(&mut pixels, grid, slot, grid.contrast);
                kept.insert(feature.to_string());
            }
        }
        samples.push(Sample {
            truth_features: FeatureSet::from_validated(kept),
            pixels: pixels.iter().map(|&v| v as f32).collect(),
            ..s.clone()
        });
    }
    Ok(Dataset { samples, vocab_hash: data.vocab_hash.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{feature_layout, generate_dataset, GridParams};
    use crate::feature_matrix::bundled_matrix;

    fn toy_samples(n: usize, seed: u64) -> (Vec<Sample>, Vec<f64>) {
        // Half "pos", half "neg", 4-pixel images of pure noise.
        let mut r = rng::chacha(seed);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 { "pos" } else { "neg" };
            let pixels: Vec<f32> =
                (0..4).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0f64) as f32).collect();
            samples.push(Sample {
                id: format!("t{i}"),
                label: label.into(),
                truth_features: FeatureSet::empty(),
                height: 2,
                width: 2,
                channels: 1,
                pixels,
            });
            labels.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        (samples, labels)
    }

    #[test]
    fn label_oracle_has_unit_usefulness() {
        let (samples, labels) = toy_samples(50, 1);
        let f = FeatureFunction::label_oracle("pos");
        assert_eq!(usefulness(&f, &samples, &labels).unwrap(), 1.0);
    }

    #[test]
    fn negated_oracle_has_negative_unit_usefulness() {
        let (samples, labels) = toy_samples(50, 2);
        let f = FeatureFunction::label_oracle("neg");
        assert_eq!(usefulness(&f, &samples, &labels).unwrap(), -1.0);
    }

    #[test]
    fn independent_feature_is_nearly_useless() {
        let (samples, labels) = toy_samples(10_000, 3);
        let f = FeatureFunction::linear("first-pixel", {
            let mut w = vec![0.0; 4];
            w[0] = 2.0;
            w
        }, -1.0);
        let p = usefulness(&f, &samples, &labels).unwrap();
        assert!(p.abs() < 0.05, "independent feature p = {p}");
    }

    #[test]
    fn zero_epsilon_gamma_equals_usefulness_exactly() {
        let (samples, labels) = toy_samples(40, 4);
        let f = FeatureFunction::linear("w", vec![0.3, -0.7, 0.2, 0.9], 0.1);
        let p = usefulness(&f, &samples, &labels).unwrap();
        let cfg = AttackConfig { epsilon_255: 0.0, ..Default::default() };
        let r = robustness(&f, &samples, &labels, &cfg, 0).unwrap();
        assert_eq!(r.gamma, p);
        assert!(!r.probe_only);
    }

    #[test]
    fn linear_feature_matches_closed_form() {
        let (samples, labels) = toy_samples(60, 5);
        let w = vec![0.4, -1.1, 0.6, 0.25];
        let f = FeatureFunction::linear("w", w.clone(), -0.2);
        let p = usefulness(&f, &samples, &labels).unwrap();

        let eps_255 = 12.0;
        let eps = eps_255 / 255.0;
        let cfg = AttackConfig { epsilon_255: eps_255, steps: 10, ..Default::default() };
        let r = robustness(&f, &samples, &labels, &cfg, 0).unwrap();
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        assert!((r.gamma - (p - eps * l1)).abs() < 1e-3, "gamma {} vs closed form {}", r.gamma, p - eps * l1);

        // L2 ball: γ = p − ε‖w‖₂.
        let cfg2 = AttackConfig { norm: Norm::L2, epsilon_255: eps_255, steps: 10, ..Default::default() };
        let r2 = robustness(&f, &samples, &labels, &cfg2, 0).unwrap();
        let l2: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r2.gamma - (p - eps * l2)).abs() < 1e-3);
    }

    #[test]
    fn label_oracle_is_fully_robust() {
        let (samples, labels) = toy_samples(30, 6);
        let f = FeatureFunction::label_oracle("pos");
        let cfg = AttackConfig { epsilon_255: 64.0, steps: 5, ..Default::default() };
        let r = robustness(&f, &samples, &labels, &cfg, 0).unwrap();
        assert_eq!(r.gamma, 1.0);
    }

    #[test]
    fn gamma_never_exceeds_usefulness() {
        let (samples, labels) = toy_samples(40, 7);
        for eps in [0.0, 2.0, 8.0, 32.0] {
            let f = FeatureFunction::linear("w", vec![0.5, 0.5, -0.5, 0.1], 0.0);
            let cfg = AttackConfig { epsilon_255: eps, steps: 5, ..Default::default() };
            let p = usefulness(&f, &samples, &labels).unwrap();
            let r = robustness(&f, &samples, &labels, &cfg, 1).unwrap();
            assert!(r.gamma <= p + 0.01);
        }
    }

    #[test]
    fn gamma_is_monotone_in_epsilon_for_linear_features() {
        let (samples, labels) = toy_samples(40, 8);
        let f = FeatureFunction::linear("w", vec![1.0, -0.3, 0.2, 0.8], 0.05);
        let mut last = f64::INFINITY;
        for eps in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let cfg = AttackConfig { epsilon_255: eps, steps: 8, ..Default::default() };
            let g = robustness(&f, &samples, &labels, &cfg, 2).unwrap().gamma;
            assert!(g <= last + 1e-12);
            last = g;
        }
    }

    #[test]
    fn gradient_free_features_fall_back_to_probes() {
        let (samples, labels) = toy_samples(20, 9);
        let f = FeatureFunction::new(
            "step",
            Box::new(|s: &Sample| if s.pixels[0] > 0.5 { 1.0 } else { -1.0 }),
            None,
        );
        let cfg = AttackConfig { epsilon_255: 16.0, steps: 5, ..Default::default() };
        let r = robustness(&f, &samples, &labels, &cfg, 3).unwrap();
        assert!(r.probe_only);
        let p = usefulness(&f, &samples, &labels).unwrap();
        assert!(r.gamma <= p + 1e-12);
    }

    #[test]
    fn mismatched_or_invalid_labels_are_rejected() {
        let (samples, mut labels) = toy_samples(10, 10);
        assert!(matches!(
            usefulness(&FeatureFunction::label_oracle("pos"), &samples, &labels[..5]),
            Err(StatsError::LabelCount { .. })
        ));
        labels[0] = 0.5;
        assert!(matches!(
            usefulness(&FeatureFunction::label_oracle("pos"), &samples, &labels),
            Err(StatsError::BadLabel(_))
        ));
        assert!(matches!(
            usefulness(&FeatureFunction::label_oracle("pos"), &[], &[]),
            Err(StatsError::EmptyDataset)
        ));
    }

    #[test]
    fn robust_dataset_keeps_only_listed_patches() {
        let m = bundled_matrix().expand_subfeatures();
        let classes = m.class_set_classes("CS3b").unwrap().to_vec();
        let layout = feature_layout(&m, &classes, GridParams::default(), 0).unwrap();
        let (train, _, _) =
            generate_dataset(&m, &classes, &layout, 8, 0.0, 21, (1.0, 0.0, 0.0)).unwrap();

        // Keep everything: only the background texture changes.
        let universe = crate::datagen::feature_universe(&m, &classes).unwrap();
        let all = FeatureSet::from_names(m.vocabulary(), universe.iter()).unwrap();
        let kept = build_robust_dataset(&train, &all, &layout, 5).unwrap();
        for (orig, new) in train.samples.iter().zip(&kept.samples) {
            assert_eq!(orig.truth_features, new.truth_features);
            for feature in orig.truth_features.iter() {
                let slot = &layout.slots[feature];
                for pr in 0..layout.grid.patch {
                    for pc in 0..layout.grid.patch {
                        let idx = (slot.row + pr) * layout.grid.width + slot.col + pc;
                        assert_eq!(orig.pixels[idx], new.pixels[idx]);
                    }
                }
            }
        }

        // Keep nothing: pure noise, truth features emptied.
        let none = build_robust_dataset(&train, &FeatureSet::empty(), &layout, 5).unwrap();
        for s in &none.samples {
            assert!(s.truth_features.is_empty());
        }

        // Indicator usefulness survives for kept features.
        let feature = "beak";
        let f = FeatureFunction::patch_indicator(&layout, feature).unwrap();
        let labels = one_vs_rest_labels(&train.samples, "Bird");
        let before = usefulness(&f, &train.samples, &labels).unwrap();
        let after = usefulness(&f, &kept.samples, &labels).unwrap();
        assert!((before - after).abs() < 0.05, "before {before} after {after}");
        // And vanishes when the feature is excluded.
        let gone = usefulness(&f, &none.samples, &labels).unwrap();
        assert!(gone.abs() < 0.1, "excluded indicator p = {gone}");
    }
}
