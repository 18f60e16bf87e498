//! Synthetic feature-blob images: each robust feature of a class is a
//! fixed ±contrast patch stamped at a fixed location over a noisy
//! background, so ground-truth feature sets are known exactly and the
//! whole pipeline runs end to end at desk scale.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_matrix::{normalize, ClassFeatureMatrix, FeatureSet, MatrixError};
use crate::rng;
use crate::tinynet::{Batch, Labels};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("{features} features do not fit a grid with {capacity} patch slots")]
    TooManyFeatures { features: usize, capacity: usize },
    #[error("patch size must be positive and fit the grid")]
    BadPatch,
    #[error("drop probability must lie in [0, 1)")]
    BadDropProbability,
    #[error("per-class sample count must be at least 1")]
    EmptyPerClass,
    #[error("split fractions must be non-negative and sum to 1")]
    BadSplit,
    #[error("sample label {label:?} is not in the class list")]
    LabelNotInClassList { label: String },
    #[error("feature {0:?} has no slot in the layout")]
    MissingSlot(String),
}

/// Grid geometry and rendering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Side length of a square feature patch.
    pub patch: usize,
    /// Background Gaussian noise sigma around mid-gray.
    pub noise_sigma: f64,
    /// Patch contrast amplitude around mid-gray.
    pub contrast: f64,
    /// Amplitude of the per-class background texture. This is the
    /// useful-but-non-robust cue: a faint class-keyed ±texture shift on
    /// every background pixel that a classifier happily exploits and a
    /// small perturbation erases. Feature patches overwrite it, so
    /// extraction does not depend on it.
    pub texture: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            patch: 5,
            noise_sigma: 0.1,
            contrast: 0.1,
            texture: 0.02,
        }
    }
}

/// A feature's fixed patch slot: top-left corner plus its ±1 stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSlot {
    pub row: usize,
    pub col: usize,
    pub pattern: Vec<i8>,
}

/// Deterministic assignment of every feature to a distinct patch slot,
/// plus the per-class background textures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub grid: GridParams,
    pub slots: IndexMap<String, PatchSlot>,
    /// Class → full-grid ±1 texture pattern (keys normalized).
    pub watermarks: IndexMap<String, Vec<i8>>,
}

impl LayoutSpec {
    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }
}

/// One image with its ground truth. Pixels are stored as f32 in [0, 1],
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: String,
    pub truth_features: FeatureSet,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Sample {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixels_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }
}

/// An ordered collection of samples tied to a vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack all images into an (n × pixels) matrix.
    pub fn inputs(&self) -> Array2<f64> {
        let dim = self.samples.first().map_or(0, Sample::pixel_count);
        let mut x = Array2::zeros((self.samples.len(), dim));
        for (i, s) in self.samples.iter().enumerate() {
            for (j, &p) in s.pixels.iter().enumerate() {
                x[[i, j]] = p as f64;
            }
        }
        x
    }

    /// Classification batch with labels resolved against `class_names`.
    pub fn class_batch(&self, class_names: &[String]) -> Result<Batch, DataError> {
        let keys: Vec<String> = class_names.iter().map(|c| normalize(c)).collect();
        let y = self
            .samples
            .iter()
            .map(|s| {
                keys.iter()
                    .position(|k| *k == normalize(&s.label))
                    .ok_or_else(|| DataError::LabelNotInClassList { label: s.label.clone() })
            })
            .collect::<Result<Vec<usize>, _>>()?;
        Ok(Batch { x: self.inputs(), y: Labels::Classes(y) })
    }

    /// Multi-label batch: targets are truth-feature indicators over
    /// `feature_names`.
    pub fn multilabel_batch(&self, feature_names: &[String]) -> Batch {
        let mut targets = Array2::zeros((self.samples.len(), feature_names.len()));
        for (i, s) in self.samples.iter().enumerate() {
            for (j, f) in feature_names.iter().enumerate() {
                if s.truth_features.contains(f) {
                    targets[[i, j]] = 1.0;
                }
            }
        }
        Batch { x: self.inputs(), y: Labels::MultiHot(targets) }
    }
}

/// Sorted union of the expanded feature rows of `classes`: the feature
/// universe a layout must cover.
pub fn feature_universe(
    matrix: &ClassFeatureMatrix,
    classes: &[String],
) -> Result<Vec<String>, MatrixError> {
    let expanded;
    let m = if matrix.is_expanded() {
        matrix
    } else {
        expanded = matrix.expand_subfeatures();
        &expanded
    };
    let mut union: BTreeSet<String> = BTreeSet::new();
    for class in classes {
        union.extend(m.expected_features(class)?.iter().map(str::to_string));
    }
    Ok(union.into_iter().collect())
}

/// Assign every feature of the class set a distinct patch slot;
/// deterministic per seed.
pub fn feature_layout(
    matrix: &ClassFeatureMatrix,
    classes: &[String],
    grid: GridParams,
    seed: u64,
) -> Result<LayoutSpec, DataError> {
    if grid.patch == 0 || grid.patch > grid.height || grid.patch > grid.width || grid.channels != 1
    {
        return Err(DataError::BadPatch);
    }
    let features = feature_universe(matrix, classes)?;
    let slot_rows = grid.height / grid.patch;
    let slot_cols = grid.width / grid.patch;
    let capacity = slot_rows * slot_cols;
    if features.len() > capacity {
        return Err(DataError::TooManyFeatures { features: features.len(), capacity });
    }

    let mut slot_order: Vec<usize> = (0..capacity).collect();
    let mut r = rng::chacha(rng::derive(seed, &[0x6c61_796f_7574]));
    use rand::seq::SliceRandom;
    slot_order.shuffle(&mut r);

    let mut slots = IndexMap::with_capacity(features.len());
    for (k, feature) in features.into_iter().enumerate() {
        let slot = slot_order[k];
        let mut pattern_rng = rng::chacha(rng::derive_str(rng::derive(seed, &[1]), &feature));
        let pattern: Vec<i8> = (0..grid.patch * grid.patch)
            .map(|_| if pattern_rng.gen::<bool>() { 1 } else { -1 })
            .collect();
        slots.insert(
            feature,
            PatchSlot {
                row: (slot / slot_cols) * grid.patch,
                col: (slot % slot_cols) * grid.patch,
                pattern,
            },
        );
    }

    let mut watermarks = IndexMap::with_capacity(classes.len());
    for class in classes {
        let key = normalize(class);
        if watermarks.contains_key(&key) {
            continue;
        }
        let mut wm_rng = rng::chacha(rng::derive_str(rng::derive(seed, &[2]), &key));
        let wm: Vec<i8> = (0..grid.height * grid.width * grid.channels)
            .map(|_| if wm_rng.gen::<bool>() { 1 } else { -1 })
            .collect();
        watermarks.insert(key, wm);
    }
    Ok(LayoutSpec { grid, slots, watermarks })
}

pub(crate) fn stamp(pixels: &mut [f64], grid: &GridParams, slot: &PatchSlot, contrast: f64) {
    for pr in 0..grid.patch {
        for pc in 0..grid.patch {
            let idx = (slot.row + pr) * grid.width + (slot.col + pc);
            let v = 0.5 + contrast * slot.pattern[pr * grid.patch + pc] as f64;
            pixels[idx] = v.clamp(0.0, 1.0);
        }
    }
}

/// Render one sample of a class: each feature of its (expanded) row is
/// kept with probability 1 − drop_p, at least one feature is always
/// rendered, and the background is clamped Gaussian noise.
pub fn render_sample(
    class: &str,
    matrix: &ClassFeatureMatrix,
    layout: &LayoutSpec,
    drop_p: f64,
    seed: u64,
) -> Result<Sample, DataError> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(DataError::BadDropProbability);
    }
    let expanded;
    let m = if matrix.is_expanded() {
        matrix
    } else {
        expanded = matrix.expand_subfeatures();
        &expanded
    };
    let row: Vec<&str> = m.expected_features(class)?.iter().collect();
    let grid = &layout.grid;
    let mut r = rng::chacha(seed);

    // Keep-mask first so feature presence is independent of geometry.
    let mut kept: Vec<&str> =
        row.iter().copied().filter(|_| r.gen_range(0.0..1.0) >= drop_p).collect();
    if kept.is_empty() {
        kept.push(row[r.gen_range(0..row.len())]);
    }

    let mut pixels = vec![0.0f64; grid.height * grid.width * grid.channels];
    let watermark = layout.watermarks.get(&normalize(class));
    for (idx, p) in pixels.iter_mut().enumerate() {
        let texture = watermark.map_or(0.0, |wm| grid.texture * wm[idx] as f64);
        *p = (0.5 + texture + grid.noise_sigma * gauss(&mut r)).clamp(0.0, 1.0);
    }
    for feature in &kept {
        let slot = layout
            .slots
            .get(*feature)
            .ok_or_else(|| DataError::MissingSlot(feature.to_string()))?;
        stamp(&mut pixels, grid, slot, grid.contrast);
    }

    let truth = FeatureSet::from_validated(kept.iter().map(|f| f.to_string()).collect());
    Ok(Sample {
        id: format!("{}-{seed:016x}", slug(class)),
        label: class.to_string(),
        truth_features: truth,
        height: grid.height,
        width: grid.width,
        channels: grid.channels,
        // Pixels are quantized to f32 here; storage and transport are
        // exact from this point on.
        pixels: pixels.iter().map(|&v| v as f32).collect(),
    })
}

fn slug(name: &str) -> String {
    normalize(name).replace(' ', "_")
}

/// Standard normal via Box-Muller.
pub(crate) fn gauss<R: Rng>(r: &mut R) -> f64 {
    let u1: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Generate balanced, disjoint train/val/test datasets; deterministic per
/// seed.
pub fn generate_dataset(
    matrix: &ClassFeatureMatrix,
    classes: &[String],
    layout: &LayoutSpec,
    per_class: usize,
    drop_p: f64,
    seed: u64,
    split: (f64, f64, f64),
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if per_class == 0 {
        return Err(DataError::EmptyPerClass);
    }
    let (ft, fv, fe) = split;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::BadSplit);
    }
    let n_train = ((per_class as f64) * ft + 1e-9).floor() as usize;
    let n_val = ((per_class as f64) * fv + 1e-9).floor() as usize;
    let n_train = n_train.min(per_class);
    let n_val = n_val.min(per_class - n_train);

    let vocab_hash = matrix.vocabulary().hash();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let sample_seed = rng::derive(seed, &[ci as u64, i as u64]);
            let mut sample = render_sample(class, matrix, layout, drop_p, sample_seed)?;
            sample.id = format!("{}-{:08x}-{:04}", slug(class), seed as u32, i);
            if i < n_train {
                train.push(sample);
            } else if i < n_train + n_val {
                val.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    let wrap = |samples: Vec<Sample>| Dataset { samples, vocab_hash: vocab_hash.clone() };
    Ok((wrap(train), wrap(val), wrap(test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_matrix::{bundled_matrix, parse_matrix};
    use proptest::prelude::*;

    fn cs3a_layout(seed: u64) -> (ClassFeatureMatrix, Vec<String>, LayoutSpec) {
        let m = bundled_matrix().expand_subfeatures();
        let classes = m.class_set_classes("CS3a").unwrap().to_vec();
        let layout = feature_layout(&m, &classes, GridParams::default(), seed).unwrap();
        (m, classes, layout)
    }

    #[test]
    fn cs3a_gets_29_distinct_slots() {
        let (_, _, layout) = cs3a_layout(0);
        assert_eq!(layout.slots.len(), 29);
        let mut positions: Vec<(usize, usize)> =
            layout.slots.values().map(|s| (s.row, s.col)).collect();
        positions.sort();
        positions.dedup();
        assert_eq!(positions.len(), 29);
        for slot in layout.slots.values() {
            assert!(slot.row + 5 <= 32 && slot.col + 5 <= 32);
        }
    }

    #[test]
    fn layout_is_deterministic_per_seed() {
        let (_, _, a) = cs3a_layout(5);
        let (_, _, b) = cs3a_layout(5);
        let (_, _, c) = cs3a_layout(6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_features_for_grid_is_an_error() {
        // 40 single-feature classes on a 6×6 slot grid.
        let features: Vec<String> = (0..40).map(|i| format!("\"f{i}\"")).collect();
        let classes: Vec<String> =
            (0..40).map(|i| format!("\"C{i}\": [\"f{i}\"]")).collect();
        let json = format!(
            "{{\"features\": [{}], \"classes\": {{{}}}}}",
            features.join(", "),
            classes.join(", ")
        );
        let m = parse_matrix(&json).unwrap().expand_subfeatures();
        let names: Vec<String> = m.classes().to_vec();
        let err = feature_layout(&m, &names, GridParams::default(), 0).unwrap_err();
        assert!(matches!(err, DataError::TooManyFeatures { features: 40, capacity: 36 }));
    }

    #[test]
    fn zero_drop_renders_the_full_row() {
        let (m, _, layout) = cs3a_layout(1);
        let s = render_sample("Person", &m, &layout, 0.0, 99).unwrap();
        assert_eq!(&s.truth_features, m.expected_features("Person").unwrap());
        assert_eq!(s.pixels.len(), 32 * 32);
        assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn at_least_one_feature_survives_heavy_dropping() {
        let (m, _, layout) = cs3a_layout(2);
        for i in 0..200 {
            let s = render_sample("Train", &m, &layout, 0.99, i).unwrap();
            assert!(!s.truth_features.is_empty());
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let (m, _, layout) = cs3a_layout(3);
        let a = render_sample("Car", &m, &layout, 0.2, 7).unwrap();
        let b = render_sample("Car", &m, &layout, 0.2, 7).unwrap();
        assert_eq!(a, b);
        let c = render_sample("Car", &m, &layout, 0.2, 8).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn drop_probability_is_validated() {
        let (m, _, layout) = cs3a_layout(4);
        assert!(render_sample("Car", &m, &layout, 1.0, 0).is_err());
        assert!(render_sample("Car", &m, &layout, -0.1, 0).is_err());
    }

    #[test]
    fn split_counts_are_exact_and_balanced() {
        let (m, classes, layout) = cs3a_layout(5);
        let (train, val, test) =
            generate_dataset(&m, &classes, &layout, 100, 0.2, 11, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!(train.len(), 240);
        assert_eq!(val.len(), 30);
        assert_eq!(test.len(), 30);
        for class in &classes {
            for (ds, expected) in [(&train, 80), (&val, 10), (&test, 10)] {
                let count = ds.samples.iter().filter(|s| &s.label == class).count();
                assert_eq!(count, expected, "{class}");
            }
        }
        // Disjoint ids across splits.
        let mut ids: Vec<&str> = train
            .samples
            .iter()
            .chain(&val.samples)
            .chain(&test.samples)
            .map(|s| s.id.as_str())
            .collect();
        let total = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), total);
    }

    #[test]
    fn degenerate_split_puts_everything_in_train() {
        let (m, classes, layout) = cs3a_layout(6);
        let (train, val, test) =
            generate_dataset(&m, &classes, &layout, 10, 0.2, 1, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(train.len(), 30);
        assert!(val.is_empty());
        assert!(test.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let (m, classes, layout) = cs3a_layout(7);
        let a = generate_dataset(&m, &classes, &layout, 6, 0.2, 3, (0.5, 0.25, 0.25)).unwrap();
        let b = generate_dataset(&m, &classes, &layout, 6, 0.2, 3, (0.5, 0.25, 0.25)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn truth_features_never_leave_the_class_row(seed in 0u64..500, drop_p in 0.0f64..0.9) {
            let (m, _, layout) = cs3a_layout(8);
            let s = render_sample("Person", &m, &layout, drop_p, seed).unwrap();
            let row = m.expected_features("Person").unwrap();
            for f in s.truth_features.iter() {
                prop_assert!(row.contains(f));
            }
        }
    }
}
