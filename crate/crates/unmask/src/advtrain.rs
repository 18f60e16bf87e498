//! Adversarial training (each mini-batch replaced by its attacked
//! counterpart before the gradient step) and the ε line-search harness
//! that picks the training budget.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{attack_inputs, AttackConfig, AttackError, AttackMethod};
use crate::evalharness::svg;
use crate::rng;
use crate::tinynet::{self, Batch, Labels, NetError, TinyNet, TrainOptions};

#[derive(Debug, Error)]
pub enum AdvTrainError {
    #[error("adversarial training uses a PGD inner attack, got {0:?}")]
    InnerAttackNotPgd(AttackMethod),
    #[error("the epsilon grid is empty")]
    EmptyGrid,
    #[error("no evaluation attacks were given")]
    NoEvalAttacks,
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Min-max training: every mini-batch is attacked against the current
/// weights with the inner PGD config, and the gradient step is taken on
/// the attacked inputs. With inner ε = 0 this is bit-identical to plain
/// training.
pub fn adv_train(
    net: TinyNet,
    data: &Batch,
    inner: &AttackConfig,
    opts: &TrainOptions,
) -> Result<TinyNet, AdvTrainError> {
    if inner.method != AttackMethod::Pgd {
        return Err(AdvTrainError::InnerAttackNotPgd(inner.method));
    }
    inner.validate()?;
    let mut attack_error = None;
    let (net, _) = tinynet::train_with_transform(net, data, opts, |current, xb, yb| {
        if attack_error.is_some() {
            return xb;
        }
        let y = match yb {
            Labels::Classes(c) => c.clone(),
            // Adversarial training targets the classifier head.
            Labels::MultiHot(_) => {
                attack_error = Some(AdvTrainError::Net(NetError::HeadMismatch));
                return xb;
            }
        };
        match attack_inputs(current, &xb, &y, inner, opts.seed) {
            Ok(adv) => adv,
            Err(e) => {
                attack_error = Some(e.into());
                xb
            }
        }
    })?;
    match attack_error {
        Some(e) => Err(e),
        None => Ok(net),
    }
}

/// Accuracy table of one adversarially trained net per grid ε, evaluated
/// against every attack vector on validation data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineSearchReport {
    pub grid: Vec<f64>,
    /// Per ε: (attack label, validation accuracy), in eval-attack order.
    pub per_epsilon: Vec<(f64, Vec<(String, f64)>)>,
    /// Grid member maximizing mean accuracy across attack vectors; ties go
    /// to the smaller ε.
    pub chosen: f64,
}

impl LineSearchReport {
    /// CSV table: rows ε, one column per attack vector, plus the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon");
        if let Some((_, row)) = self.per_epsilon.first() {
            for (label, _) in row {
                out.push(',');
                out.push_str(label);
            }
        }
        out.push_str(",mean\n");
        for (eps, row) in &self.per_epsilon {
            out.push_str(&format!("{eps}"));
            let mean = row.iter().map(|(_, a)| *a).sum::<f64>() / row.len().max(1) as f64;
            for (_, acc) in row {
                out.push_str(&format!(",{acc:.6}"));
            }
            out.push_str(&format!(",{mean:.6}\n"));
        }
        out
    }

    /// Grouped bar chart of per-vector validation accuracy by ε.
    pub fn to_svg(&self) -> String {
        let groups: Vec<(String, Vec<f64>)> = self
            .per_epsilon
            .iter()
            .map(|(eps, row)| {
                (format!("eps {eps}"), row.iter().map(|(_, a)| *a).collect())
            })
            .collect();
        let series: Vec<String> = self
            .per_epsilon
            .first()
            .map(|(_, row)| row.iter().map(|(l, _)| l.clone()).collect())
            .unwrap_or_default();
        svg::grouped_bar_chart(
            "Adversarial-training epsilon line search",
            "validation accuracy",
            &series,
            &groups,
        )
    }

    pub fn write_files(&self, csv_path: &Path, svg_path: &Path) -> Result<(), AdvTrainError> {
        let mut csv = std::fs::File::create(csv_path)?;
        csv.write_all(self.to_csv().as_bytes())?;
        let mut svg_file = std::fs::File::create(svg_path)?;
        svg_file.write_all(self.to_svg().as_bytes())?;
        Ok(())
    }
}

/// Train one adversarially hardened net per grid ε (same init and data per
/// run) and pick the ε with the best mean validation accuracy across the
/// evaluation attack vectors.
pub fn epsilon_line_search(
    init_net: &TinyNet,
    train_data: &Batch,
    val_data: &Batch,
    grid: &[f64],
    inner_template: &AttackConfig,
    eval_attacks: &[AttackConfig],
    opts: &TrainOptions,
) -> Result<LineSearchReport, AdvTrainError> {
    if grid.is_empty() {
        return Err(AdvTrainError::EmptyGrid);
    }
    if eval_attacks.is_empty() {
        return Err(AdvTrainError::NoEvalAttacks);
    }
    let val_y = match &val_data.y {
        Labels::Classes(c) => c.clone(),
        Labels::MultiHot(_) => return Err(AdvTrainError::Net(NetError::HeadMismatch)),
    };
    let mut per_epsilon = Vec::with_capacity(grid.len());
    for (gi, &eps) in grid.iter().enumerate() {
        let inner = AttackConfig { epsilon_255: eps, ..*inner_template };
        let net = adv_train(init_net.clone(), train_data, &inner, opts)?;
        let mut row = Vec::with_capacity(eval_attacks.len());
        for attack in eval_attacks {
            // Keyed by the attack label, not its position, so the selection
            // cannot depend on eval-attack order.
            let seed =
                rng::derive_str(rng::derive(opts.seed, &[0x6576_616c, gi as u64]), &attack.label());
            let adv = attack_inputs(&net, &val_data.x, &val_y, attack, seed)?;
            let acc = net.accuracy(&Batch { x: adv, y: val_data.y.clone() })?;
            row.push((attack.label(), acc));
        }
        per_epsilon.push((eps, row));
    }
    let mut chosen = grid[0];
    let mut best_mean = f64::NEG_INFINITY;
    for (eps, row) in &per_epsilon {
        let mean = row.iter().map(|(_, a)| *a).sum::<f64>() / row.len() as f64;
        if mean > best_mean || (mean == best_mean && *eps < chosen) {
            best_mean = mean;
            chosen = *eps;
        }
    }
    Ok(LineSearchReport { grid: grid.to_vec(), per_epsilon, chosen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::{init, train, ArchSpec, Head};
    use ndarray::Array2;

    fn toy_batch(n: usize) -> Batch {
        let x = Array2::from_shape_fn((n, 6), |(i, j)| {
            let class = i % 3;
            if j == class * 2 {
                0.9
            } else {
                0.1 + ((i * 7 + j) % 5) as f64 * 0.02
            }
        });
        Batch { x, y: Labels::Classes((0..n).map(|i| i % 3).collect()) }
    }

    fn fresh(seed: u64) -> TinyNet {
        init(
            ArchSpec::mlp(6, &[8], 3, Head::SoftmaxClassifier),
            vec!["a".into(), "b".into(), "c".into()],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_epsilon_matches_plain_training_bit_for_bit() {
        let data = toy_batch(30);
        let opts = TrainOptions { epochs: 6, lr: 0.1, batch_size: 8, seed: 5 };
        let inner = AttackConfig { epsilon_255: 0.0, ..Default::default() };
        let adv = adv_train(fresh(1), &data, &inner, &opts).unwrap();
        let (plain, _) = train(fresh(1), &data, &opts).unwrap();
        assert_eq!(adv.to_bytes(), plain.to_bytes());
    }

    #[test]
    fn zero_epochs_leaves_net_unchanged() {
        let data = toy_batch(12);
        let opts = TrainOptions { epochs: 0, ..Default::default() };
        let net = fresh(2);
        let before = net.to_bytes();
        let after = adv_train(net, &data, &AttackConfig::default(), &opts).unwrap();
        assert_eq!(after.to_bytes(), before);
    }

    #[test]
    fn non_pgd_inner_attack_is_rejected() {
        let data = toy_batch(12);
        let inner = AttackConfig { method: AttackMethod::Mia, ..Default::default() };
        assert!(matches!(
            adv_train(fresh(3), &data, &inner, &TrainOptions::default()),
            Err(AdvTrainError::InnerAttackNotPgd(AttackMethod::Mia))
        ));
    }

    #[test]
    fn single_epsilon_grid_is_chosen() {
        let train_data = toy_batch(24);
        let val_data = toy_batch(12);
        let opts = TrainOptions { epochs: 3, lr: 0.1, batch_size: 8, seed: 7 };
        let report = epsilon_line_search(
            &fresh(4),
            &train_data,
            &val_data,
            &[4.0],
            &AttackConfig::default(),
            &[AttackConfig { epsilon_255: 2.0, steps: 3, ..Default::default() }],
            &opts,
        )
        .unwrap();
        assert_eq!(report.chosen, 4.0);
        assert_eq!(report.per_epsilon.len(), 1);
    }

    #[test]
    fn report_shape_covers_grid_times_attacks() {
        let train_data = toy_batch(24);
        let val_data = toy_batch(12);
        let opts = TrainOptions { epochs: 2, lr: 0.1, batch_size: 8, seed: 8 };
        let attacks: Vec<AttackConfig> = [1.0, 4.0]
            .iter()
            .map(|&e| AttackConfig { epsilon_255: e, steps: 2, ..Default::default() })
            .collect();
        let report = epsilon_line_search(
            &fresh(5),
            &train_data,
            &val_data,
            &[1.0, 2.0, 4.0],
            &AttackConfig::default(),
            &attacks,
            &opts,
        )
        .unwrap();
        assert_eq!(report.per_epsilon.len(), 3);
        for (_, row) in &report.per_epsilon {
            assert_eq!(row.len(), 2);
        }
        assert!(report.grid.contains(&report.chosen));
        let csv = report.to_csv();
        assert!(csv.starts_with("epsilon,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn selection_ignores_eval_attack_order() {
        let train_data = toy_batch(24);
        let val_data = toy_batch(12);
        let opts = TrainOptions { epochs: 2, lr: 0.1, batch_size: 8, seed: 9 };
        let a1 = AttackConfig { epsilon_255: 1.0, steps: 2, ..Default::default() };
        let a2 = AttackConfig { epsilon_255: 8.0, steps: 2, ..Default::default() };
        let forward = epsilon_line_search(
            &fresh(6), &train_data, &val_data, &[1.0, 4.0],
            &AttackConfig::default(), &[a1, a2], &opts,
        )
        .unwrap();
        let backward = epsilon_line_search(
            &fresh(6), &train_data, &val_data, &[1.0, 4.0],
            &AttackConfig::default(), &[a2, a1], &opts,
        )
        .unwrap();
        assert_eq!(forward.chosen, backward.chosen);
    }
}
