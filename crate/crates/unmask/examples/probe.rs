// Scratch probe for tuning bundled defaults; not part of the deliverable checks.
use unmask::attacks::{attack_batch, attack_inputs, AttackConfig};
use unmask::config::ExperimentConfig;
use unmask::datagen::Dataset;
use unmask::evalharness::grid::train_stack;
use unmask::evalharness::{defense_eval, detection_eval};
use unmask::alignment::{Pipeline, PipelineMode};
use unmask::extractor::{mean_feature_f1, Extractor, ExtractorNoise};
use unmask::feature_matrix::bundled_matrix;

fn cfg_from_env() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let get = |k: &str| -> Option<f64> { std::env::var(k).ok().and_then(|v| v.parse().ok()) };
    if let Some(v) = get("CONTRAST") { cfg.data.contrast = v; }
    if let Some(v) = get("SIGMA") { cfg.data.noise_sigma = v; }
    if let Some(v) = get("DROP") { cfg.data.drop_p = v; }
    if let Some(v) = get("TEXTURE") { cfg.data.texture = v; }
    if let Some(v) = get("PER_CLASS") { cfg.data.per_class = v as usize; }
    if let Some(v) = get("M_EPOCHS") { cfg.model.epochs = v as usize; }
    if let Some(v) = get("M_LR") { cfg.model.lr = v; }
    if let Ok(h) = std::env::var("M_HIDDEN") {
        cfg.model.hidden = if h.is_empty() {
            vec![]
        } else {
            h.split(',').map(|v| v.parse().unwrap()).collect()
        };
    }
    cfg.extractor.kind = unmask::config::ExtractorKindName::Trained;
    if let Some(v) = get("K_EPOCHS") { cfg.extractor.epochs = v as usize; }
    if let Some(v) = get("K_LR") { cfg.extractor.lr = v; }
    if let Ok(h) = std::env::var("K_HIDDEN") {
        cfg.extractor.hidden = if h.is_empty() {
            vec![]
        } else {
            h.split(',').map(|v| v.parse().unwrap()).collect()
        };
    }
    if let Some(v) = get("AT_EPOCHS") { cfg.advtrain.epochs = v as usize; }
    if let Some(v) = get("AT_STEPS") { cfg.advtrain.steps = v as usize; }
    if let Some(v) = get("AT_LR") { cfg.advtrain.lr = v; }
    cfg
}

fn main() {
    let t0 = std::time::Instant::now();
    let cfg = cfg_from_env();
    println!(
        "contrast {} sigma {} drop {} texture {} m_epochs {} k_epochs {} k_lr {} k_hidden {:?}",
        cfg.data.contrast, cfg.data.noise_sigma, cfg.data.drop_p, cfg.data.texture, cfg.model.epochs,
        cfg.extractor.epochs, cfg.extractor.lr, cfg.extractor.hidden
    );
    let matrix = bundled_matrix();

    let stack = train_stack(&cfg, &matrix, "CS3a").unwrap();
    println!("[{:?}] stack trained", t0.elapsed());
    let train_batch = stack.train.class_batch(&stack.classes).unwrap();
    {
        // Independent re-train to inspect the loss curve.
        let arch = unmask::tinynet::ArchSpec::mlp(
            train_batch.x.ncols(),
            &cfg.model.hidden,
            stack.classes.len(),
            unmask::tinynet::Head::SoftmaxClassifier,
        );
        let net = unmask::tinynet::init(arch, stack.classes.clone(), 1).unwrap();
        let (_, curve) =
            unmask::tinynet::train(net, &train_batch, &cfg.model_train_options()).unwrap();
        let shown: Vec<String> = curve
            .iter()
            .step_by((curve.len() / 8).max(1))
            .map(|l| format!("{l:.3}"))
            .collect();
        println!("loss curve: {shown:?}");
    }
    println!("train acc: {:.4}", stack.model.accuracy(&train_batch).unwrap());
    let test_batch = stack.test.class_batch(&stack.classes).unwrap();
    let clean = stack.model.accuracy(&test_batch).unwrap();
    println!("clean acc: {clean:.4}  (test n={})", stack.test.len());
    println!("AT clean acc: {:.4}", stack.hardened.accuracy(&test_batch).unwrap());
    let f1 = mean_feature_f1(&stack.extractor, &stack.test, 0.5, &stack.universe).unwrap();
    println!("extractor F1: {f1:.4}");

    let y: Vec<usize> = match &test_batch.y {
        unmask::tinynet::Labels::Classes(c) => c.clone(),
        _ => unreachable!(),
    };
    for eps in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let a = AttackConfig { epsilon_255: eps, ..Default::default() };
        let adv = attack_inputs(&stack.model, &test_batch.x, &y, &a, 0).unwrap();
        let acc = stack
            .model
            .accuracy(&unmask::tinynet::Batch { x: adv, y: test_batch.y.clone() })
            .unwrap();
        println!("PGD-Linf eps {eps}: none-acc {acc:.4}");
    }
    for eps in [4.0, 16.0] {
        let a = AttackConfig { epsilon_255: eps, ..Default::default() };
        let adv = attack_inputs(&stack.hardened, &test_batch.x, &y, &a, 0).unwrap();
        let acc = stack
            .hardened
            .accuracy(&unmask::tinynet::Batch { x: adv, y: test_batch.y.clone() })
            .unwrap();
        println!("PGD-Linf eps {eps}: AT-acc {acc:.4}");
    }
    let pipeline = Pipeline::new(
        stack.model.clone(),
        stack.extractor,
        &matrix,
        &stack.classes,
        0.5,
        0.5,
        PipelineMode::AlwaysRectify,
    )
    .unwrap();
    let a16 = AttackConfig { epsilon_255: 16.0, ..Default::default() };
    let (adv16, mask) = attack_batch(&stack.model, &stack.test, &a16, 0).unwrap();
    println!(
        "UM defense acc at eps16: {:.4} (attack success rate {:.4})",
        defense_eval(&pipeline, &adv16).unwrap(),
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    );
    // Extraction quality on attacked images: how many truth features are
    // missed, how many spurious appear.
    {
        let (mut miss, mut spur, mut n) = (0.0, 0.0, 0.0);
        for s in &adv16.samples {
            let got = unmask::extractor::to_feature_set(
                &pipeline.extractor().extract(s).unwrap(),
                0.5,
            )
            .unwrap();
            let truth = &s.truth_features;
            miss += truth.iter().filter(|f| !got.contains(f)).count() as f64
                / truth.len().max(1) as f64;
            spur += got.iter().filter(|f| !truth.contains(f)).count() as f64;
            n += 1.0;
        }
        println!("attacked extraction: miss rate {:.3}, spurious/sample {:.2}", miss / n, spur / n);
    }
    // Logit clusters for the trained extractor, benign vs attacked.
    if let unmask::extractor::Extractor::Trained { net } = pipeline.extractor() {
        let stats = |data: &Dataset| -> (f64, f64, f64, f64) {
            let x = data.inputs();
            let logits = net.logits(x.view()).unwrap();
            let (mut p, mut np, mut a, mut na) = (vec![], 0.0, vec![], 0.0);
            for (i, s) in data.samples.iter().enumerate() {
                for (j, f) in net.labels().iter().enumerate() {
                    if s.truth_features.contains(f) {
                        p.push(logits[[i, j]]);
                        np += 1.0;
                    } else {
                        a.push(logits[[i, j]]);
                        na += 1.0;
                    }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let sd = |v: &[f64], m: f64| {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64).sqrt()
            };
            let (mp, ma) = (mean(&p), mean(&a));
            let _ = (np, na);
            (mp, sd(&p, mp), ma, sd(&a, ma))
        };
        let (bp, bps, ba, bas) = stats(&stack.test);
        let (ap, aps, aa, aas) = stats(&adv16);
        println!("benign logits: present {bp:.2}±{bps:.2} absent {ba:.2}±{bas:.2}");
        println!("attacked logits: present {ap:.2}±{aps:.2} absent {aa:.2}±{aas:.2}");
    }
    println!("clean UM acc: {:.4}", defense_eval(&pipeline, &stack.test).unwrap());
    println!("[{:?}] single-set probe done", t0.elapsed());

    for set in ["CS3a", "CS3b", "CS5a", "CS5b"] {
        let mut aucs = Vec::new();
        let mut rates = Vec::new();
        for seed in 0..5u64 {
            let mut c = cfg_from_env();
            c.extractor.kind = unmask::config::ExtractorKindName::Oracle;
            c.data.seed = 100 + seed;
            c.model.seed = 200 + seed;
            c.extractor.seed = 300 + seed;
            let st = train_stack(&c, &matrix, set).unwrap();
            let oracle = Extractor::oracle(
                ExtractorNoise::default(),
                st.universe.clone(),
                300 + seed,
            )
            .unwrap();
            let p = Pipeline::new(
                st.model.clone(),
                oracle,
                &matrix,
                &st.classes,
                0.5,
                0.5,
                PipelineMode::AlwaysRectify,
            )
            .unwrap();
            let (adv, mask) = attack_batch(&st.model, &st.test, &a16, seed).unwrap();
            let successes = Dataset {
                samples: adv
                    .samples
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &ok)| ok)
                    .map(|(s, _)| s.clone())
                    .collect(),
                vocab_hash: adv.vocab_hash.clone(),
            };
            rates.push(successes.len() as f64 / adv.len() as f64);
            if successes.is_empty() {
                aucs.push(f64::NAN);
                continue;
            }
            let curve = detection_eval(&p, &st.test, &successes, seed).unwrap();
            aucs.push(curve.auc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let rate = rates.iter().sum::<f64>() / rates.len() as f64;
        println!("{set}: mean AUC {mean:.4} (success {rate:.2}) {aucs:?}");
    }
    println!("[{:?}] total", t0.elapsed());
}
