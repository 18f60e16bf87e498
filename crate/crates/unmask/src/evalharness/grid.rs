//! The full attack grid: {no defense, adversarial training, feature
//! alignment} × {no attack + 8 attack vectors} × class sets, plus
//! detection ROC curves per vector.
//!
//! Attacks are crafted against the model the attacker sees: the
//! undefended net for the no-defense and alignment rows (the attacker
//! knows the classifier, not the defense), and the hardened net for the
//! adversarial-training row.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{defense_eval, detection_eval, EvalError, RocCurve};
use crate::advtrain::adv_train;
use crate::alignment::{Pipeline, PipelineMode};
use crate::attacks::{attack_batch, rescale_l2_epsilon, AttackConfig, AttackMethod, Norm};
use crate::config::{ExperimentConfig, ExtractorKindName};
use crate::datagen::{feature_layout, feature_universe, generate_dataset, Dataset};
use crate::extractor::{load_detections, mean_feature_f1, train_extractor, Extractor, ExtractorNoise};
use crate::feature_matrix::{ClassFeatureMatrix, FeatureSet};
use crate::rng;
use crate::robust_stats::build_robust_dataset;
use crate::tinynet::{init, train, ArchSpec, Head, TinyNet};

/// One accuracy measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// "none", "at", or "unmask".
    pub defense: String,
    /// "none", "pgd", or "mia".
    pub attack: String,
    /// "-", "linf", or "l2".
    pub norm: String,
    /// Budget in published units (per-pixel for L∞, whole reference image
    /// for L2); 0 for the no-attack column.
    pub epsilon: f64,
    pub class_set: String,
    pub accuracy: f64,
}

/// Detection ROC for one (class set, attack vector) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocEntry {
    pub class_set: String,
    pub attack_label: String,
    pub curve: RocCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Effective config snapshot.
    pub config_toml: String,
    pub image_pixels: usize,
    /// Whole-image L2 budgets: (published, rescaled to this image area).
    pub l2_rescaled: Vec<(f64, f64)>,
    /// Extractor quality (macro F1 on held-out benign data) per class set.
    pub extractor_f1: Vec<(String, f64)>,
    /// Pipeline mode used for the alignment-defense cells.
    pub defense_mode: String,
}

/// Everything the grid measured; serializable so reports can be re-emitted
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<GridCell>,
    pub rocs: Vec<RocEntry>,
    pub meta: ReportMeta,
}

struct Vector {
    cfg: AttackConfig,
    method_name: &'static str,
    norm_name: &'static str,
    paper_eps: f64,
    label: String,
}

fn fmt_eps(eps: f64) -> String {
    if eps.fract() == 0.0 {
        format!("{}", eps as i64)
    } else {
        format!("{eps}")
    }
}

fn grid_vectors(cfg: &ExperimentConfig, pixels: usize) -> Vec<Vector> {
    let mut out = Vec::new();
    for (method, method_name) in [(AttackMethod::Pgd, "pgd"), (AttackMethod::Mia, "mia")] {
        for (norm, norm_name) in [(Norm::Linf, "linf"), (Norm::L2, "l2")] {
            let epsilons = match norm {
                Norm::Linf => &cfg.grid.linf_epsilons,
                Norm::L2 => &cfg.grid.l2_epsilons,
            };
            for &paper_eps in epsilons {
                let (epsilon_255, step_255) = match norm {
                    Norm::Linf => (paper_eps, cfg.grid.step),
                    Norm::L2 => {
                        let desk = rescale_l2_epsilon(paper_eps, pixels);
                        // Step sized to traverse the ball within the
                        // iteration budget.
                        (desk, 2.5 * desk / cfg.grid.steps as f64)
                    }
                };
                out.push(Vector {
                    cfg: AttackConfig {
                        method,
                        norm,
                        epsilon_255,
                        steps: cfg.grid.steps,
                        step_255,
                        decay: 1.0,
                        random_start: false,
                    },
                    method_name,
                    norm_name,
                    paper_eps,
                    label: format!("{method_name}_{norm_name}_eps{}", fmt_eps(paper_eps)),
                });
            }
        }
    }
    out
}

struct ClassSetRun {
    cells: Vec<GridCell>,
    rocs: Vec<RocEntry>,
    extractor_f1: (String, f64),
}

/// Components trained for one class set; reused by the acceptance suite
/// and the single-attack CLI commands.
pub struct TrainedStack {
    pub classes: Vec<String>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub model: TinyNet,
    pub hardened: TinyNet,
    pub extractor: Extractor,
    pub universe: Vec<String>,
}

/// Generate data and train the model, the hardened model, and the
/// extractor for one class set, all deterministically seeded by
/// (config seeds, class-set name).
pub fn train_stack(
    cfg: &ExperimentConfig,
    matrix: &ClassFeatureMatrix,
    class_set: &str,
) -> Result<TrainedStack, EvalError> {
    let expanded = matrix.expand_subfeatures();
    let classes = expanded
        .class_set_classes(class_set)
        .map_err(|_| EvalError::UnknownClassSet(class_set.to_string()))?
        .to_vec();
    let layout = feature_layout(
        &expanded,
        &classes,
        cfg.grid_params(),
        rng::derive_str(cfg.data.seed, class_set),
    )?;
    let (train_set, val, test) = generate_dataset(
        &expanded,
        &classes,
        &layout,
        cfg.data.per_class,
        cfg.data.drop_p,
        rng::derive_str(cfg.data.seed, class_set),
        (cfg.data.split[0], cfg.data.split[1], cfg.data.split[2]),
    )?;

    let batch = train_set.class_batch(&classes)?;
    let dim = batch.x.ncols();
    let arch = ArchSpec::mlp(dim, &cfg.model.hidden, classes.len(), Head::SoftmaxClassifier);
    let model_seed = rng::derive_str(cfg.model.seed, class_set);
    let fresh = init(arch, classes.clone(), model_seed)?;
    let mut model_opts = cfg.model_train_options();
    model_opts.seed = model_seed;
    let (model, _) = train(fresh.clone(), &batch, &model_opts)?;

    let mut at_opts = cfg.advtrain_options();
    at_opts.seed = rng::derive_str(cfg.advtrain.seed, class_set);
    let hardened = adv_train(fresh, &batch, &cfg.advtrain_inner_attack(), &at_opts)?;

    let universe = feature_universe(&expanded, &classes)?;
    let extractor = match cfg.extractor.kind {
        ExtractorKindName::Oracle => Extractor::oracle(
            ExtractorNoise { p_miss: cfg.extractor.p_miss, p_spur: cfg.extractor.p_spur },
            universe.clone(),
            rng::derive_str(cfg.extractor.seed, class_set),
        )?,
        ExtractorKindName::Trained => {
            let mut opts = cfg.extractor_train_options();
            opts.seed = rng::derive_str(cfg.extractor.seed, class_set);
            // The extractor trains on the robust re-render: every truth
            // patch kept, everything else replaced by label-independent
            // noise. It learns the patches and nothing else.
            let robust_all = FeatureSet::from_names(expanded.vocabulary(), universe.iter())
                .map_err(EvalError::Matrix)?;
            let robust_train =
                build_robust_dataset(&train_set, &robust_all, &layout, opts.seed)?;
            train_extractor(&robust_train, &universe, &cfg.extractor.hidden, &opts)?
        }
        ExtractorKindName::File => {
            load_detections(&cfg.extractor.path, expanded.vocabulary())?
        }
    };

    Ok(TrainedStack {
        classes,
        train: train_set,
        val,
        test,
        model,
        hardened,
        extractor,
        universe,
    })
}

fn run_class_set(
    cfg: &ExperimentConfig,
    matrix: &ClassFeatureMatrix,
    class_set: &str,
    vectors: &[Vector],
) -> Result<ClassSetRun, EvalError> {
    let stack = train_stack(cfg, matrix, class_set)?;
    let f1 = mean_feature_f1(&stack.extractor, &stack.test, cfg.extractor.cutoff, &stack.universe)?;

    let pipeline = Pipeline::new(
        stack.model.clone(),
        stack.extractor,
        matrix,
        &stack.classes,
        cfg.defense.threshold,
        cfg.extractor.cutoff,
        // Defense accuracy uses unconditional rectification; detection uses
        // the raw distances, so no threshold is assumed shared.
        PipelineMode::AlwaysRectify,
    )?;

    let test_batch = stack.test.class_batch(&stack.classes)?;
    let mut cells = Vec::new();
    let mut push = |defense: &str, attack: &str, norm: &str, eps: f64, acc: f64| {
        cells.push(GridCell {
            defense: defense.to_string(),
            attack: attack.to_string(),
            norm: norm.to_string(),
            epsilon: eps,
            class_set: class_set.to_string(),
            accuracy: acc,
        });
    };

    push("none", "none", "-", 0.0, stack.model.accuracy(&test_batch)?);
    push("at", "none", "-", 0.0, stack.hardened.accuracy(&test_batch)?);
    push("unmask", "none", "-", 0.0, defense_eval(&pipeline, &stack.test)?);

    let mut rocs = Vec::new();
    for v in vectors {
        let seed = rng::derive_str(cfg.grid.seed, &format!("{class_set}/{}", v.label));
        let (adv_vs_model, mask) = attack_batch(&stack.model, &stack.test, &v.cfg, seed)?;
        let (adv_vs_hardened, _) =
            attack_batch(&stack.hardened, &stack.test, &v.cfg, rng::derive(seed, &[1]))?;

        let none_acc = stack.model.accuracy(&adv_vs_model.class_batch(&stack.classes)?)?;
        let at_acc = stack.hardened.accuracy(&adv_vs_hardened.class_batch(&stack.classes)?)?;
        let um_acc = defense_eval(&pipeline, &adv_vs_model)?;
        push("none", v.method_name, v.norm_name, v.paper_eps, none_acc);
        push("at", v.method_name, v.norm_name, v.paper_eps, at_acc);
        push("unmask", v.method_name, v.norm_name, v.paper_eps, um_acc);

        // Detection pool: only successfully attacked samples.
        let successes = Dataset {
            samples: adv_vs_model
                .samples
                .iter()
                .zip(&mask)
                .filter(|(_, &ok)| ok)
                .map(|(s, _)| s.clone())
                .collect(),
            vocab_hash: adv_vs_model.vocab_hash.clone(),
        };
        if !successes.is_empty() {
            let curve =
                detection_eval(&pipeline, &stack.test, &successes, rng::derive(seed, &[2]))?;
            rocs.push(RocEntry {
                class_set: class_set.to_string(),
                attack_label: v.label.clone(),
                curve,
            });
        }
    }

    Ok(ClassSetRun { cells, rocs, extractor_f1: (class_set.to_string(), f1) })
}

/// Run the whole grid over the configured class sets. Class sets fan out
/// across `output.jobs` workers; results are reduced in class-set order,
/// so outputs do not depend on scheduling.
pub fn attack_grid(
    cfg: &ExperimentConfig,
    matrix: &ClassFeatureMatrix,
) -> Result<EvalReport, EvalError> {
    let pixels = cfg.data.height * cfg.data.width;
    let vectors = grid_vectors(cfg, pixels);
    let jobs = cfg.output.jobs.max(1);

    let runs: Result<Vec<ClassSetRun>, EvalError> = if jobs == 1 {
        cfg.grid
            .class_sets
            .iter()
            .map(|cs| run_class_set(cfg, matrix, cs, &vectors))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
        pool.install(|| {
            cfg.grid
                .class_sets
                .par_iter()
                .map(|cs| run_class_set(cfg, matrix, cs, &vectors))
                .collect()
        })
    };
    let runs = runs?;

    let mut cells = Vec::new();
    let mut rocs = Vec::new();
    let mut extractor_f1 = Vec::new();
    for run in runs {
        cells.extend(run.cells);
        rocs.extend(run.rocs);
        extractor_f1.push(run.extractor_f1);
    }
    Ok(EvalReport {
        cells,
        rocs,
        meta: ReportMeta {
            config_toml: cfg.to_toml_string()?,
            image_pixels: pixels,
            l2_rescaled: cfg
                .grid
                .l2_epsilons
                .iter()
                .map(|&e| (e, rescale_l2_epsilon(e, pixels)))
                .collect(),
            extractor_f1,
            defense_mode: "always_rectify".to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_matrix::bundled_matrix;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.per_class = 30;
        cfg.model.epochs = 8;
        cfg.advtrain.epochs = 3;
        cfg.advtrain.steps = 3;
        cfg.extractor.kind = ExtractorKindName::Oracle;
        cfg.grid.class_sets = vec!["CS3a".to_string(), "CS3b".to_string()];
        cfg.grid.linf_epsilons = vec![8.0];
        cfg.grid.l2_epsilons = vec![300.0];
        cfg.grid.steps = 5;
        cfg
    }

    #[test]
    fn grid_covers_every_requested_cell() {
        let cfg = tiny_cfg();
        let matrix = bundled_matrix();
        let report = attack_grid(&cfg, &matrix).unwrap();
        // 2 class sets × (1 no-attack + 4 vectors) × 3 defenses.
        assert_eq!(report.cells.len(), 2 * 5 * 3);
        for cell in &report.cells {
            assert!((0.0..=1.0).contains(&cell.accuracy), "{cell:?}");
        }
        // The no-attack accuracy bounds the attacked accuracy for the
        // undefended model.
        for cs in ["CS3a", "CS3b"] {
            let clean = report
                .cells
                .iter()
                .find(|c| c.defense == "none" && c.attack == "none" && c.class_set == cs)
                .unwrap()
                .accuracy;
            for cell in report.cells.iter().filter(|c| {
                c.defense == "none" && c.attack != "none" && c.class_set == cs
            }) {
                assert!(cell.accuracy <= clean + 1e-9);
            }
        }
        assert_eq!(report.meta.extractor_f1.len(), 2);
        assert_eq!(report.meta.l2_rescaled[0].0, 300.0);
    }

    #[test]
    fn grid_is_deterministic() {
        let cfg = tiny_cfg();
        let matrix = bundled_matrix();
        let a = attack_grid(&cfg, &matrix).unwrap();
        let b = attack_grid(&cfg, &matrix).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_class_set_is_reported() {
        let mut cfg = tiny_cfg();
        cfg.grid.class_sets = vec!["CS9".to_string()];
        assert!(matches!(
            attack_grid(&cfg, &bundled_matrix()),
            Err(EvalError::UnknownClassSet(_))
        ));
    }
}
