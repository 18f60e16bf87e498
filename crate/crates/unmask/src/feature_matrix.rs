//! Robust-feature vocabulary, the class-feature matrix, and class-set
//! overlap statistics.
//!
//! The bundled matrix maps 16 object classes to their constituent parts
//! over a vocabulary that expands to 44 leaf features (two compound
//! features, `vehicle` and `coach`, stand for 4 and 5 positional
//! sub-features). Class sets (CS3a, CS3b, CS5a, CS5b) are named subsets of
//! classes whose feature overlap drives detection difficulty.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bundled class-feature matrix encoding the published part table.
pub const BUNDLED_MATRIX_JSON: &str = include_str!("../data/class_feature_matrix.json");

/// Variant with the bike/motorbike handlebar row restored; not used by
/// default (the bundled file preserves the released table verbatim).
pub const CORRECTED_MATRIX_JSON: &str = include_str!("../data/class_feature_matrix_corrected.json");

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("failed to read matrix file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse matrix file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("feature name is empty or blank")]
    EmptyFeatureName,
    #[error("duplicate feature {0:?}")]
    DuplicateFeature(String),
    #[error("sub-feature list for {0:?} is empty")]
    EmptySubfeatures(String),
    #[error("compound feature {0:?} is not in the feature list")]
    UnknownCompound(String),
    #[error("sub-feature {sub:?} of {compound:?} collides with a top-level feature")]
    SubfeatureClash { compound: String, sub: String },
    #[error("duplicate sub-feature {0:?}")]
    DuplicateSubfeature(String),
    #[error("duplicate class {0:?}")]
    DuplicateClass(String),
    #[error("class {class:?} references unknown feature {feature:?}")]
    UnknownFeature { class: String, feature: String },
    #[error("class {0:?} has an empty feature set")]
    EmptyRow(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("unknown class set {0:?}")]
    UnknownClassSet(String),
    #[error("class set {set:?} references unknown class {class:?}")]
    ClassSetUnknownClass { set: String, class: String },
    #[error("class list is empty")]
    EmptyClassList,
    #[error("matrix must be sub-feature-expanded first (row {class:?} still contains compound {feature:?})")]
    NotExpanded { class: String, feature: String },
    #[error("feature {0:?} is not in the vocabulary")]
    NotInVocabulary(String),
}

/// Canonical form used for all feature and class comparisons.
pub fn normalize(name: &str) -> String {
    name.trim().to_lowercase()
}

/// The robust-feature vocabulary: an ordered list of top-level feature
/// names plus a map from compound features to their sub-features.
#[derive(Debug, Clone)]
pub struct FeatureVocabulary {
    features: Vec<String>,
    subfeature_map: IndexMap<String, Vec<String>>,
    valid: HashSet<String>,
}

impl FeatureVocabulary {
    pub fn new(
        features: Vec<String>,
        subfeature_map: IndexMap<String, Vec<String>>,
    ) -> Result<Self, MatrixError> {
        let features: Vec<String> = features.iter().map(|f| normalize(f)).collect();
        let mut seen = HashSet::new();
        for f in &features {
            if f.is_empty() {
                return Err(MatrixError::EmptyFeatureName);
            }
            if !seen.insert(f.clone()) {
                return Err(MatrixError::DuplicateFeature(f.clone()));
            }
        }
        let mut normalized_map = IndexMap::new();
        let mut sub_seen = HashSet::new();
        for (compound, subs) in &subfeature_map {
            let compound = normalize(compound);
            if !seen.contains(&compound) {
                return Err(MatrixError::UnknownCompound(compound));
            }
            if subs.is_empty() {
                return Err(MatrixError::EmptySubfeatures(compound));
            }
            let mut normalized_subs = Vec::with_capacity(subs.len());
            for sub in subs {
                let sub = normalize(sub);
                if sub.is_empty() {
                    return Err(MatrixError::EmptyFeatureName);
                }
                if seen.contains(&sub) {
                    return Err(MatrixError::SubfeatureClash { compound, sub });
                }
                if !sub_seen.insert(sub.clone()) {
                    return Err(MatrixError::DuplicateSubfeature(sub));
                }
                normalized_subs.push(sub);
            }
            if normalized_map.insert(compound.clone(), normalized_subs).is_some() {
                return Err(MatrixError::DuplicateFeature(compound));
            }
        }
        let valid = seen.union(&sub_seen).cloned().collect();
        Ok(Self { features, subfeature_map: normalized_map, valid })
    }

    /// Top-level feature names, in matrix-file order.
    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn subfeatures(&self, compound: &str) -> Option<&[String]> {
        self.subfeature_map.get(&normalize(compound)).map(|v| v.as_slice())
    }

    pub fn is_compound(&self, name: &str) -> bool {
        self.subfeature_map.contains_key(&normalize(name))
    }

    /// True for any top-level feature or sub-feature name.
    pub fn contains(&self, name: &str) -> bool {
        self.valid.contains(&normalize(name))
    }

    /// Leaf features: the top-level list with every compound replaced
    /// in-place by its sub-features.
    pub fn expanded_features(&self) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.features {
            match self.subfeature_map.get(f) {
                Some(subs) => out.extend(subs.iter().cloned()),
                None => out.push(f.clone()),
            }
        }
        out
    }

    /// Checksum tying datasets and manifests to this vocabulary.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for f in self.expanded_features() {
            hasher.update(f.as_bytes());
            hasher.update(b"\n");
        }
        format!("{:x}", hasher.finalize())
    }
}

/// A set of feature identifiers drawn from one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureSet {
    members: BTreeSet<String>,
}

impl FeatureSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build from names, validating each against the vocabulary.
    pub fn from_names<I, S>(vocab: &FeatureVocabulary, names: I) -> Result<Self, MatrixError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut members = BTreeSet::new();
        for name in names {
            let n = normalize(name.as_ref());
            if !vocab.contains(&n) {
                return Err(MatrixError::NotInVocabulary(n));
            }
            members.insert(n);
        }
        Ok(Self { members })
    }

    /// Build from already-normalized, already-validated names.
    pub(crate) fn from_validated(members: BTreeSet<String>) -> Self {
        Self { members }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.members.contains(&normalize(name))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|s| s.as_str())
    }

    pub fn intersection_len(&self, other: &Self) -> usize {
        self.members.intersection(&other.members).count()
    }

    pub fn union_len(&self, other: &Self) -> usize {
        self.members.union(&other.members).count()
    }
}

impl<'a> IntoIterator for &'a FeatureSet {
    type Item = &'a String;
    type IntoIter = std::collections::btree_set::Iter<'a, String>;
    fn into_iter(self) -> Self::IntoIter {
        self.members.iter()
    }
}

/// Mapping class → feature set, with ordered classes and named class sets.
#[derive(Debug, Clone)]
pub struct ClassFeatureMatrix {
    vocab: Arc<FeatureVocabulary>,
    classes: Vec<String>,
    rows: HashMap<String, FeatureSet>,
    class_sets: IndexMap<String, Vec<String>>,
    expanded: bool,
}

#[derive(Debug, Deserialize)]
struct MatrixFile {
    features: Vec<String>,
    #[serde(default)]
    subfeatures: IndexMap<String, Vec<String>>,
    classes: IndexMap<String, Vec<String>>,
    #[serde(default)]
    class_sets: IndexMap<String, Vec<String>>,
}

impl ClassFeatureMatrix {
    pub fn vocabulary(&self) -> &FeatureVocabulary {
        &self.vocab
    }

    /// Class display names, in matrix-file order. Rectification ties break
    /// in this order.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn contains_class(&self, class: &str) -> bool {
        self.rows.contains_key(&normalize(class))
    }

    /// The expected features of a class (the matrix row).
    pub fn expected_features(&self, class: &str) -> Result<&FeatureSet, MatrixError> {
        self.rows
            .get(&normalize(class))
            .ok_or_else(|| MatrixError::UnknownClass(class.to_string()))
    }

    /// Names of the class sets bundled in the matrix file.
    pub fn class_set_names(&self) -> impl Iterator<Item = &str> {
        self.class_sets.keys().map(|s| s.as_str())
    }

    /// The member classes of a named class set.
    pub fn class_set_classes(&self, name: &str) -> Result<&[String], MatrixError> {
        let key = normalize(name);
        self.class_sets
            .iter()
            .find(|(k, _)| normalize(k) == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| MatrixError::UnknownClassSet(name.to_string()))
    }

    /// True once every compound feature has been replaced by its
    /// sub-features.
    pub fn is_expanded(&self) -> bool {
        self.expanded
    }

    /// Replace every compound feature in every row by its sub-features.
    /// Idempotent; all other members are unchanged.
    pub fn expand_subfeatures(&self) -> ClassFeatureMatrix {
        let mut rows = HashMap::with_capacity(self.rows.len());
        for (class, set) in &self.rows {
            let mut members = BTreeSet::new();
            for f in set.iter() {
                match self.vocab.subfeatures(f) {
                    Some(subs) => members.extend(subs.iter().cloned()),
                    None => {
                        members.insert(f.to_string());
                    }
                }
            }
            rows.insert(class.clone(), FeatureSet::from_validated(members));
        }
        ClassFeatureMatrix {
            vocab: Arc::clone(&self.vocab),
            classes: self.classes.clone(),
            rows,
            class_sets: self.class_sets.clone(),
            expanded: true,
        }
    }

    /// Parts and overlap statistics for a list of classes.
    ///
    /// `parts` is the size of the union of the classes' rows; `overlap` is
    /// the fraction of union features present in at least two rows. The
    /// matrix must already be sub-feature-expanded.
    pub fn class_set_stats(&self, name: &str, classes: &[String]) -> Result<ClassSet, MatrixError> {
        if classes.is_empty() {
            return Err(MatrixError::EmptyClassList);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for class in classes {
            let row = self.expected_features(class)?;
            for f in row.iter() {
                if self.vocab.is_compound(f) {
                    return Err(MatrixError::NotExpanded {
                        class: class.clone(),
                        feature: f.to_string(),
                    });
                }
            }
            for f in &row.members {
                *counts.entry(f.as_str()).or_insert(0) += 1;
            }
        }
        let parts = counts.len();
        let shared = counts.values().filter(|&&c| c >= 2).count();
        Ok(ClassSet {
            name: name.to_string(),
            classes: classes.to_vec(),
            parts,
            overlap: shared as f64 / parts as f64,
        })
    }

    /// Stats for a class set named in the matrix file.
    pub fn named_class_set(&self, name: &str) -> Result<ClassSet, MatrixError> {
        let classes = self.class_set_classes(name)?.to_vec();
        self.class_set_stats(name, &classes)
    }
}

/// A named subset of matrix classes with its feature-overlap statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub name: String,
    pub classes: Vec<String>,
    /// Unique expanded features across the member classes.
    pub parts: usize,
    /// Fraction of unique expanded features belonging to two or more
    /// member classes.
    pub overlap: f64,
}

/// Parse a matrix document, validating every invariant.
pub fn parse_matrix(json: &str) -> Result<ClassFeatureMatrix, MatrixError> {
    let file: MatrixFile = serde_json::from_str(json)?;
    let vocab = Arc::new(FeatureVocabulary::new(file.features, file.subfeatures)?);

    let mut classes = Vec::with_capacity(file.classes.len());
    let mut rows = HashMap::with_capacity(file.classes.len());
    for (class, features) in &file.classes {
        let display = class.trim().to_string();
        let key = normalize(class);
        if key.is_empty() {
            return Err(MatrixError::EmptyFeatureName);
        }
        if rows.contains_key(&key) {
            return Err(MatrixError::DuplicateClass(display));
        }
        let mut members = BTreeSet::new();
        for feature in features {
            let f = normalize(feature);
            // Rows may only reference top-level features; sub-features
            // enter through expand_subfeatures.
            if !vocab.features().contains(&f) {
                return Err(MatrixError::UnknownFeature {
                    class: display.clone(),
                    feature: feature.clone(),
                });
            }
            members.insert(f);
        }
        if members.is_empty() {
            return Err(MatrixError::EmptyRow(display));
        }
        classes.push(display);
        rows.insert(key, FeatureSet::from_validated(members));
    }

    let mut class_sets = IndexMap::new();
    let mut set_keys = HashSet::new();
    for (set_name, members) in &file.class_sets {
        let set_display = set_name.trim().to_string();
        if !set_keys.insert(normalize(set_name)) {
            return Err(MatrixError::DuplicateClass(set_display));
        }
        if members.is_empty() {
            return Err(MatrixError::EmptyClassList);
        }
        for class in members {
            if !rows.contains_key(&normalize(class)) {
                return Err(MatrixError::ClassSetUnknownClass {
                    set: set_display.clone(),
                    class: class.clone(),
                });
            }
        }
        class_sets.insert(set_display, members.iter().map(|c| c.trim().to_string()).collect());
    }

    Ok(ClassFeatureMatrix { vocab, classes, rows, class_sets, expanded: false })
}

/// Load and validate a matrix file from disk.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<ClassFeatureMatrix, MatrixError> {
    let text = std::fs::read_to_string(path)?;
    parse_matrix(&text)
}

/// The bundled matrix. Infallible: the embedded document is validated by
/// the test suite.
pub fn bundled_matrix() -> ClassFeatureMatrix {
    parse_matrix(BUNDLED_MATRIX_JSON).expect("bundled matrix is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bundled_matrix_rows_match_table() {
        let m = bundled_matrix();
        let bicycle = m.expected_features("Bicycle").unwrap();
        assert_eq!(bicycle.members, set(&["saddle", "wheel"]));
        let tv = m.expected_features("Television").unwrap();
        assert_eq!(tv.members, set(&["screen"]));
        let bird = m.expected_features("Bird").unwrap();
        assert_eq!(
            bird.members,
            set(&["beak", "eye", "foot", "head", "leg", "neck", "tail", "torso", "wing"])
        );
    }

    #[test]
    fn bundled_vocabulary_expands_to_44_features() {
        let m = bundled_matrix();
        assert_eq!(m.vocabulary().features().len(), 37);
        assert_eq!(m.vocabulary().expanded_features().len(), 44);
    }

    #[test]
    fn subfeature_names_stay_out_of_top_level_list() {
        let m = bundled_matrix();
        let vocab = m.vocabulary();
        for f in vocab.features() {
            if let Some(subs) = vocab.subfeatures(f) {
                for sub in subs {
                    assert!(!vocab.features().contains(sub));
                }
            }
        }
    }

    #[test]
    fn unknown_feature_is_rejected_by_name() {
        let json = r#"{
            "features": ["wheel"],
            "classes": {"Cart": ["wheel", "wings2"]}
        }"#;
        let err = parse_matrix(json).unwrap_err();
        match err {
            MatrixError::UnknownFeature { class, feature } => {
                assert_eq!(class, "Cart");
                assert_eq!(feature, "wings2");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn duplicate_class_is_rejected() {
        // Differ only by case; comparison is case-insensitive.
        let json = r#"{
            "features": ["wheel"],
            "classes": {"Cart": ["wheel"], "cart": ["wheel"]}
        }"#;
        assert!(matches!(parse_matrix(json), Err(MatrixError::DuplicateClass(_))));
    }

    #[test]
    fn empty_row_is_rejected() {
        let json = r#"{
            "features": ["wheel"],
            "classes": {"Cart": []}
        }"#;
        assert!(matches!(parse_matrix(json), Err(MatrixError::EmptyRow(_))));
    }

    #[test]
    fn expansion_replaces_compounds() {
        let m = bundled_matrix().expand_subfeatures();
        let car = m.expected_features("Car").unwrap();
        assert!(!car.contains("vehicle"));
        for sub in ["vehicle left", "vehicle right", "vehicle top", "vehicle back"] {
            assert!(car.contains(sub), "missing {sub}");
        }
        let train = m.expected_features("Train").unwrap();
        assert!(!train.contains("coach"));
        assert_eq!(train.iter().filter(|f| f.starts_with("coach ")).count(), 5);
    }

    #[test]
    fn expansion_is_idempotent_and_identity_without_compounds() {
        let m = bundled_matrix();
        let once = m.expand_subfeatures();
        let twice = once.expand_subfeatures();
        for class in m.classes() {
            assert_eq!(
                once.expected_features(class).unwrap(),
                twice.expected_features(class).unwrap()
            );
        }
        // A row without compound features is untouched.
        assert_eq!(
            m.expected_features("Bird").unwrap(),
            once.expected_features("Bird").unwrap()
        );
    }

    #[test]
    fn unknown_class_lookup_fails() {
        let m = bundled_matrix();
        assert!(matches!(
            m.expected_features("Unicorn"),
            Err(MatrixError::UnknownClass(_))
        ));
    }

    /// Independent brute-force union/overlap count over expanded rows.
    fn brute_force_stats(m: &ClassFeatureMatrix, classes: &[&str]) -> (usize, usize) {
        let rows: Vec<&FeatureSet> =
            classes.iter().map(|c| m.expected_features(c).unwrap()).collect();
        let mut union: BTreeSet<&str> = BTreeSet::new();
        for row in &rows {
            union.extend(row.iter());
        }
        let shared = union
            .iter()
            .filter(|f| rows.iter().filter(|r| r.contains(f)).count() >= 2)
            .count();
        (union.len(), shared)
    }

    #[test]
    fn class_set_stats_reproduce_published_table() {
        let m = bundled_matrix().expand_subfeatures();
        let expected = [
            ("CS3a", 29usize, 2usize),
            ("CS3b", 18, 9),
            ("CS5a", 34, 8),
            ("CS5b", 34, 10),
        ];
        for (name, parts, shared) in expected {
            let cs = m.named_class_set(name).unwrap();
            assert_eq!(cs.parts, parts, "{name} parts");
            assert_eq!(cs.overlap, shared as f64 / parts as f64, "{name} overlap");
            // Cross-check against the independent enumeration.
            let members: Vec<&str> =
                m.class_set_classes(name).unwrap().iter().map(|s| s.as_str()).collect();
            assert_eq!(brute_force_stats(&m, &members), (parts, shared), "{name} brute force");
        }
    }

    #[test]
    fn cs3a_shared_features_are_head_and_headlight() {
        let m = bundled_matrix().expand_subfeatures();
        let classes = ["Car", "Person", "Train"];
        let rows: Vec<&FeatureSet> =
            classes.iter().map(|c| m.expected_features(c).unwrap()).collect();
        let mut union: BTreeSet<&str> = BTreeSet::new();
        for row in &rows {
            union.extend(row.iter());
        }
        let shared: Vec<&str> = union
            .into_iter()
            .filter(|f| rows.iter().filter(|r| r.contains(f)).count() >= 2)
            .collect();
        assert_eq!(shared, vec!["head", "headlight"]);
    }

    #[test]
    fn singleton_class_set_has_zero_overlap() {
        let m = bundled_matrix().expand_subfeatures();
        for class in m.classes() {
            let cs = m.class_set_stats("single", &[class.clone()]).unwrap();
            assert_eq!(cs.overlap, 0.0);
            assert_eq!(cs.parts, m.expected_features(class).unwrap().len());
        }
    }

    #[test]
    fn stats_require_expanded_matrix_and_nonempty_list() {
        let m = bundled_matrix();
        assert!(matches!(
            m.class_set_stats("x", &["Car".to_string()]),
            Err(MatrixError::NotExpanded { .. })
        ));
        let m = m.expand_subfeatures();
        assert!(matches!(m.class_set_stats("x", &[]), Err(MatrixError::EmptyClassList)));
    }

    #[test]
    fn overlap_times_parts_is_integral() {
        let m = bundled_matrix().expand_subfeatures();
        for name in ["CS3a", "CS3b", "CS5a", "CS5b"] {
            let cs = m.named_class_set(name).unwrap();
            let product = cs.overlap * cs.parts as f64;
            assert!((product - product.round()).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&cs.overlap));
        }
    }

    #[test]
    fn corrected_matrix_adds_handlebar() {
        let m = parse_matrix(CORRECTED_MATRIX_JSON).unwrap();
        assert!(m.expected_features("Bicycle").unwrap().contains("handlebar"));
        assert!(m.expected_features("Motorbike").unwrap().contains("handlebar"));
        // The class sets are unaffected by the correction.
        let m = m.expand_subfeatures();
        assert_eq!(m.named_class_set("CS3a").unwrap().parts, 29);
    }

    #[test]
    fn feature_set_validates_against_vocabulary() {
        let m = bundled_matrix();
        let vocab = m.vocabulary();
        let ok = FeatureSet::from_names(vocab, ["Wheel ", "saddle"]).unwrap();
        assert!(ok.contains("wheel"));
        assert!(FeatureSet::from_names(vocab, ["wings2"]).is_err());
        // Sub-feature names are valid identifiers.
        assert!(FeatureSet::from_names(vocab, ["vehicle left"]).is_ok());
    }

    proptest! {
        /// Parts are monotone non-decreasing as classes are added.
        #[test]
        fn parts_monotone_in_class_count(indices in proptest::collection::vec(0usize..16, 1..8)) {
            let m = bundled_matrix().expand_subfeatures();
            let all: Vec<String> = m.classes().to_vec();
            let mut chosen: Vec<String> = Vec::new();
            let mut last_parts = 0usize;
            for i in indices {
                let class = all[i % all.len()].clone();
                if !chosen.contains(&class) {
                    chosen.push(class);
                }
                let cs = m.class_set_stats("t", &chosen).unwrap();
                prop_assert!(cs.parts >= last_parts);
                last_parts = cs.parts;
            }
        }
    }
}
