//! Subcommand implementations. Every run loads the config, applies
//! overrides, writes its artifacts under the output directory, and records
//! the effective config in `<out>/run.meta`.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use unmask::advtrain::{adv_train, epsilon_line_search};
use unmask::alignment::Pipeline;
use unmask::attacks::{attack_batch, rescale_l2_epsilon, AttackConfig, AttackMethod, Norm};
use unmask::config::{ConfigError, ExperimentConfig, ExtractorKindName};
use unmask::datagen::{feature_layout, feature_universe, generate_dataset, Dataset};
use unmask::evalharness::report::{emit_report, load_report};
use unmask::evalharness::{attack_grid, detection_eval, defense_eval};
use unmask::extractor::{load_detections, mean_feature_f1, train_extractor, Extractor, ExtractorNoise};
use unmask::feature_matrix::{bundled_matrix, load_matrix, ClassFeatureMatrix};
use unmask::tinynet::{init, train, ArchSpec, Head, TinyNet};

use crate::{CliError, RunArgs};

type CmdResult = Result<(), CliError>;

fn usage(e: ConfigError) -> CliError {
    CliError::Usage(e.to_string())
}

fn rt(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

pub fn run(name: &str, args: &RunArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(usage)?;
    let mut overrides = Vec::new();
    if let Some(out) = &args.out {
        overrides.push(format!("--output.dir={out}"));
    }
    if let Some(jobs) = args.jobs {
        overrides.push(format!("--output.jobs={jobs}"));
    }
    overrides.extend(args.overrides.iter().cloned());
    cfg = cfg.apply_overrides(&overrides).map_err(usage)?;

    write_run_meta(name, &cfg).map_err(rt)?;

    match name {
        "gen-data" => gen_data(&cfg),
        "train" => cmd_train(&cfg),
        "train-extractor" => cmd_train_extractor(&cfg),
        "attack" => cmd_attack(&cfg),
        "adv-train" => cmd_adv_train(&cfg),
        "sweep-epsilon" => cmd_sweep(&cfg),
        "detect" => cmd_detect(&cfg),
        "defend" => cmd_defend(&cfg),
        "grid" => cmd_grid(&cfg),
        "report" => cmd_report(&cfg),
        other => Err(CliError::Usage(format!("unknown subcommand {other:?}"))),
    }
}

fn write_run_meta(command: &str, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let snapshot = cfg.to_toml_string()?;
    let meta = format!(
        "command = {command:?}\nversion = {:?}\n\n{snapshot}",
        env!("CARGO_PKG_VERSION"),
    );
    std::fs::File::create(out.join("run.meta"))?.write_all(meta.as_bytes())?;
    Ok(())
}

fn load_config_matrix(cfg: &ExperimentConfig) -> Result<ClassFeatureMatrix, CliError> {
    if cfg.matrix.path.is_empty() {
        Ok(bundled_matrix())
    } else {
        load_matrix(&cfg.matrix.path).map_err(rt)
    }
}

fn class_names(cfg: &ExperimentConfig, matrix: &ClassFeatureMatrix) -> Result<Vec<String>, CliError> {
    matrix
        .class_set_classes(&cfg.matrix.class_set)
        .map(|c| c.to_vec())
        .map_err(rt)
}

fn data_dir(cfg: &ExperimentConfig, split: &str) -> PathBuf {
    cfg.out_dir().join("data").join(split)
}

fn models_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("models")
}

fn attacks_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("attacks")
}

fn reports_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("reports")
}

fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<Dataset, CliError> {
    let dir = data_dir(cfg, split);
    unmask::ingest::load_dataset(&dir)
        .with_context(|| format!("load {} (run `gen-data` first?)", dir.display()))
        .map_err(CliError::Runtime)
}

/// Attack budgets are configured in published units; whole-image L2
/// budgets are rescaled to the configured image area.
fn effective_attack(cfg: &ExperimentConfig) -> (AttackConfig, String) {
    let mut attack = cfg.attack_config();
    let label = attack_label(&cfg.attack.method, &cfg.attack.norm, cfg.attack.epsilon);
    if attack.norm == Norm::L2 {
        let pixels = cfg.data.height * cfg.data.width;
        attack.epsilon_255 = rescale_l2_epsilon(attack.epsilon_255, pixels);
        attack.step_255 = rescale_l2_epsilon(attack.step_255, pixels);
    }
    (attack, label)
}

fn attack_label(method: &AttackMethod, norm: &Norm, eps: f64) -> String {
    let m = match method {
        AttackMethod::Pgd => "pgd",
        AttackMethod::Mia => "mia",
    };
    let n = match norm {
        Norm::Linf => "linf",
        Norm::L2 => "l2",
    };
    if eps.fract() == 0.0 {
        format!("{m}_{n}_eps{}", eps as i64)
    } else {
        format!("{m}_{n}_eps{eps}")
    }
}

fn gen_data(cfg: &ExperimentConfig) -> CmdResult {
    let matrix = load_config_matrix(cfg)?.expand_subfeatures();
    let classes = class_names(cfg, &matrix)?;
    let layout =
        feature_layout(&matrix, &classes, cfg.grid_params(), cfg.data.seed).map_err(rt)?;
    let (train_set, val, test) = generate_dataset(
        &matrix,
        &classes,
        &layout,
        cfg.data.per_class,
        cfg.data.drop_p,
        cfg.data.seed,
        (cfg.data.split[0], cfg.data.split[1], cfg.data.split[2]),
    )
    .map_err(rt)?;
    for (split, data) in [("train", &train_set), ("val", &val), ("test", &test)] {
        unmask::ingest::save_dataset(data, data_dir(cfg, split)).map_err(rt)?;
        println!("{split}: {} samples -> {}", data.len(), data_dir(cfg, split).display());
    }
    Ok(())
}

fn model_arch(cfg: &ExperimentConfig, dim: usize, classes: usize) -> ArchSpec {
    ArchSpec::mlp(dim, &cfg.model.hidden, classes, Head::SoftmaxClassifier)
}

fn cmd_train(cfg: &ExperimentConfig) -> CmdResult {
    let matrix = load_config_matrix(cfg)?;
    let classes = class_names(cfg, &matrix)?;
    let train_set = load_split(cfg, "train")?;
    let batch = train_set.class_batch(&classes).map_err(rt)?;
    let net = init(model_arch(cfg, batch.x.ncols(), classes.len()), classes.clone(), cfg.model.seed)
        .map_err(rt)?;
    let (net, curve) = train(net, &batch, &cfg.model_train_options()).map_err(rt)?;
    std::fs::create_dir_all(models_dir(cfg)).map_err(rt)?;
    let path = models_dir(cfg).join("model.tnet");
    net.save(&path).map_err(rt)?;
    let train_acc = net.accuracy(&batch).map_err(rt)?;
    println!(
        "trained classifier: final loss {:.4}, train accuracy {:.4} -> {}",
        curve.last().copied().unwrap_or(f64::NAN),
        train_acc,
        path.display()
    );
    if let Ok(val) = load_split(cfg, "val") {
        if !val.is_empty() {
            let val_batch = val.class_batch(&classes).map_err(rt)?;
            println!("val accuracy {:.4}", net.accuracy(&val_batch).map_err(rt)?);
        }
    }
    Ok(())
}

fn cmd_train_extractor(cfg: &ExperimentConfig) -> CmdResult {
    let matrix = load_config_matrix(cfg)?.expand_subfeatures();
    let classes = class_names(cfg, &matrix)?;
    let universe = feature_universe(&matrix, &classes).map_err(rt)?;
    let train_set = load_split(cfg, "train")?;
    let extractor =
        train_extractor(&train_set, &universe, &cfg.extractor.hidden, &cfg.extractor_train_options())
            .map_err(rt)?;
    let Extractor::Trained { net } = &extractor else {
        return Err(rt(anyhow!("training produced an unexpected extractor kind")));
    };
    std::fs::create_dir_all(models_dir(cfg)).map_err(rt)?;
    let path = models_dir(cfg).join("extractor.tnet");
    net.save(&path).map_err(rt)?;
    let f1 = match load_split(cfg, "test") {
        Ok(test) if !test.is_empty() => {
            mean_feature_f1(&extractor, &test, cfg.extractor.cutoff, &universe).map_err(rt)?
        }
        _ => mean_feature_f1(&extractor, &train_set, cfg.extractor.cutoff, &universe).map_err(rt)?,
    };
    println!("trained extractor: macro F1 {:.4} at cutoff {} -> {}", f1, cfg.extractor.cutoff, path.display());
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, file: &str) -> Result<TinyNet, CliError> {
    let path = models_dir(cfg).join(file);
    TinyNet::load(&path)
        .with_context(|| format!("load {} (run `train`/`adv-train` first?)", path.display()))
        .map_err(CliError::Runtime)
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    label: String,
    seed: u64,
    success_rate: f64,
    mask: Vec<bool>,
}

fn cmd_attack(cfg: &ExperimentConfig) -> CmdResult {
    let model = load_model(cfg, "model.tnet")?;
    let test = load_split(cfg, "test")?;
    let (attack, label) = effective_attack(cfg);
    let (attacked, mask) = attack_batch(&model, &test, &attack, cfg.attack.seed).map_err(rt)?;
    let dir = attacks_dir(cfg).join(&label);
    unmask::ingest::save_dataset(&attacked, &dir).map_err(rt)?;
    let successes = mask.iter().filter(|&&m| m).count();
    let rate = successes as f64 / mask.len().max(1) as f64;
    let mask_file = MaskFile { label: label.clone(), seed: cfg.attack.seed, success_rate: rate, mask };
    let json = serde_json::to_string_pretty(&mask_file).map_err(rt)?;
    std::fs::File::create(dir.join("success_mask.json"))
        .and_then(|mut f| f.write_all(json.as_bytes()))
        .map_err(rt)?;
    println!(
        "attacked {} samples with {label}: success rate {:.4} -> {}",
        attacked.len(),
        rate,
        dir.display()
    );
    Ok(())
}

fn cmd_adv_train(cfg: &ExperimentConfig) -> CmdResult {
    let matrix = load_config_matrix(cfg)?;
    let classes = class_names(cfg, &matrix)?;
    let train_set = load_split(cfg, "train")?;
    let batch = train_set.class_batch(&classes).map_err(rt)?;
    let net = init(model_arch(cfg, batch.x.ncols(), classes.len()), classes.clone(), cfg.model.seed)
        .map_err(rt)?;
    let hardened =
        adv_train(net, &batch, &cfg.advtrain_inner_attack(), &cfg.advtrain_options()).map_err(rt)?;
    std::fs::create_dir_all(models_dir(cfg)).map_err(rt)?;
    let path = models_dir(cfg).join("model_at.tnet");
    hardened.save(&path).map_err(rt)?;
    println!(
        "adversarially trained at eps {} -> {} (train accuracy {:.4})",
        cfg.advtrain.epsilon,
        path.display(),
        hardened.accuracy(&batch).map_err(rt)?
    );
    Ok(())
}

fn sweep_eval_attacks(cfg: &ExperimentConfig) -> Vec<AttackConfig> {
    let pixels = cfg.data.height * cfg.data.width;
    let mut out = Vec::new();
    for method in [AttackMethod::Pgd, AttackMethod::Mia] {
        for norm in [Norm::Linf, Norm::L2] {
            let epsilons = match norm {
                Norm::Linf => &cfg.sweep.linf_epsilons,
                Norm::L2 => &cfg.sweep.l2_epsilons,
            };
            for &eps in epsilons {
                let (epsilon_255, step_255) = match norm {
                    Norm::Linf => (eps, cfg.sweep.step),
                    Norm::L2 => {
                        let desk = rescale_l2_epsilon(eps, pixels);
                        (desk, 2.5 * desk / cfg.sweep.steps as f64)
                    }
                };
                out.push(AttackConfig {
                    method,
                    norm,
                    epsilon_255,
                    steps: cfg.sweep.steps,
                    step_255,
                    decay: 1.0,
                    random_start: false,
                });
            }
        }
    }
    out
}

fn cmd_sweep(cfg: &ExperimentConfig) -> CmdResult {
    let matrix = load_config_matrix(cfg)?;
    let classes = class_names(cfg, &matrix)?;
    let train_set = load_split(cfg, "train")?;
    let val = load_split(cfg, "val")?;
    if val.is_empty() {
        return Err(rt(anyhow!("validation split is empty; adjust data.split")));
    }
    let train_batch = train_set.class_batch(&classes).map_err(rt)?;
    let val_batch = val.class_batch(&classes).map_err(rt)?;
    let net = init(
        model_arch(cfg, train_batch.x.ncols(), classes.len()),
        classes.clone(),
        cfg.model.seed,
    )
    .map_err(rt)?;
    let mut opts = cfg.advtrain_options();
    opts.epochs = cfg.sweep.epochs;
    let report = epsilon_line_search(
        &net,
        &train_batch,
        &val_batch,
        &cfg.sweep.grid,
        &cfg.advtrain_inner_attack(),
        &sweep_eval_attacks(cfg),
        &opts,
    )
    .map_err(rt)?;
    std::fs::create_dir_all(reports_dir(cfg)).map_err(rt)?;
    let csv = reports_dir(cfg).join("epsilon_sweep.csv");
    let svg = reports_dir(cfg).join("epsilon_sweep.svg");
    report.write_files(&csv, &svg).map_err(rt)?;
    println!("line search over {:?}: chose eps {}", report.grid, report.chosen);
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn build_extractor(cfg: &ExperimentConfig, matrix: &ClassFeatureMatrix) -> Result<Extractor, CliError> {
    match cfg.extractor.kind {
        ExtractorKindName::Oracle => {
            let classes = class_names(cfg, matrix)?;
            let universe = feature_universe(matrix, &classes).map_err(rt)?;
            Extractor::oracle(
                ExtractorNoise { p_miss: cfg.extractor.p_miss, p_spur: cfg.extractor.p_spur },
                universe,
                cfg.extractor.seed,
            )
            .map_err(rt)
        }
        ExtractorKindName::Trained => {
            let path = models_dir(cfg).join("extractor.tnet");
            let net = TinyNet::load(&path)
                .with_context(|| {
                    format!("load {} (run `train-extractor` first?)", path.display())
                })
                .map_err(CliError::Runtime)?;
            Ok(Extractor::Trained { net })
        }
        ExtractorKindName::File => {
            load_detections(&cfg.extractor.path, matrix.vocabulary()).map_err(rt)
        }
    }
}

fn build_pipeline(cfg: &ExperimentConfig) -> Result<(Pipeline, ClassFeatureMatrix), CliError> {
    let matrix = load_config_matrix(cfg)?;
    let classes = class_names(cfg, &matrix)?;
    let model = load_model(cfg, "model.tnet")?;
    let extractor = build_extractor(cfg, &matrix)?;
    let pipeline = Pipeline::new(
        model,
        extractor,
        &matrix,
        &classes,
        cfg.defense.threshold,
        cfg.extractor.cutoff,
        cfg.defense.mode,
    )
    .map_err(rt)?;
    Ok((pipeline, matrix))
}

fn load_attacked(cfg: &ExperimentConfig, label: &str) -> Result<(Dataset, MaskFile), CliError> {
    let dir = attacks_dir(cfg).join(label);
    let data = unmask::ingest::load_dataset(&dir)
        .with_context(|| format!("load {} (run `attack` first?)", dir.display()))
        .map_err(CliError::Runtime)?;
    let text = std::fs::read_to_string(dir.join("success_mask.json"))
        .with_context(|| format!("read success mask in {}", dir.display()))
        .map_err(CliError::Runtime)?;
    let mask: MaskFile = serde_json::from_str(&text).map_err(rt)?;
    Ok((data, mask))
}

fn cmd_detect(cfg: &ExperimentConfig) -> CmdResult {
    let (pipeline, _) = build_pipeline(cfg)?;
    let benign = load_split(cfg, "test")?;
    let (_, label) = effective_attack(cfg);
    let (attacked, mask_file) = load_attacked(cfg, &label)?;
    let successes = Dataset {
        samples: attacked
            .samples
            .iter()
            .zip(&mask_file.mask)
            .filter(|(_, &ok)| ok)
            .map(|(s, _)| s.clone())
            .collect(),
        vocab_hash: attacked.vocab_hash.clone(),
    };
    if successes.is_empty() {
        return Err(rt(anyhow!("no successfully attacked samples under {label}")));
    }
    let curve = detection_eval(&pipeline, &benign, &successes, cfg.attack.seed).map_err(rt)?;
    std::fs::create_dir_all(reports_dir(cfg)).map_err(rt)?;
    let csv_path = reports_dir(cfg).join(format!("roc_{label}.csv"));
    let mut csv = String::from("threshold,tpr,fpr\n");
    for p in &curve.points {
        csv.push_str(&format!("{:.9},{:.6},{:.6}\n", p.threshold, p.tpr, p.fpr));
    }
    std::fs::write(&csv_path, csv).map_err(rt)?;
    let svg_path = reports_dir(cfg).join(format!("roc_{label}.svg"));
    let series = vec![(
        format!("{label} (AUC {:.3})", curve.auc),
        curve.points.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>(),
    )];
    let svg = unmask::evalharness::svg::unit_line_chart(
        &format!("Detection ROC, {}", cfg.matrix.class_set),
        "false positive rate",
        "true positive rate",
        &series,
    );
    std::fs::write(&svg_path, svg).map_err(rt)?;
    println!("detection AUC {:.4} over {} pairs -> {}", curve.auc, mask_file.mask.len(), csv_path.display());
    Ok(())
}

fn cmd_defend(cfg: &ExperimentConfig) -> CmdResult {
    let (pipeline, _) = build_pipeline(cfg)?;
    let (_, label) = effective_attack(cfg);
    let (attacked, _) = load_attacked(cfg, &label)?;
    let accuracy = defense_eval(&pipeline, &attacked).map_err(rt)?;
    std::fs::create_dir_all(reports_dir(cfg)).map_err(rt)?;
    let path = reports_dir(cfg).join(format!("defense_{label}.json"));
    let body = serde_json::json!({
        "attack": label,
        "mode": match cfg.defense.mode {
            unmask::alignment::PipelineMode::DetectThenRectify => "detect_then_rectify",
            unmask::alignment::PipelineMode::AlwaysRectify => "always_rectify",
        },
        "threshold": cfg.defense.threshold,
        "accuracy": accuracy,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).map_err(rt)?).map_err(rt)?;
    println!("defense accuracy {:.4} under {label} -> {}", accuracy, path.display());
    Ok(())
}

fn cmd_grid(cfg: &ExperimentConfig) -> CmdResult {
    let matrix = load_config_matrix(cfg)?;
    let report = attack_grid(cfg, &matrix).map_err(rt)?;
    let files = emit_report(&report, reports_dir(cfg)).map_err(rt)?;
    for (class_set, f1) in &report.meta.extractor_f1 {
        println!("{class_set}: extractor macro F1 {f1:.4}");
    }
    for file in files {
        println!("wrote {}", file.display());
    }
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> CmdResult {
    let path = reports_dir(cfg).join("report.json");
    let report = load_report(&path)
        .map_err(|e| CliError::Runtime(anyhow!("{e} (run `grid` first?)")))?;
    let files = emit_report(&report, reports_dir(cfg)).map_err(rt)?;
    for file in files {
        println!("wrote {}", file.display());
    }
    Ok(())
}
