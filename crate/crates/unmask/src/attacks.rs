//! Untargeted gradient attacks: projected gradient descent and the
//! momentum-iterative method, each under an L∞ or L2 budget.
//!
//! Budgets are quoted in 0–255 intensity units and divided by 255
//! internally. The accumulated perturbation is projected onto the ε-ball
//! after every step and the iterate is clipped back to [0, 1], so every
//! intermediate image satisfies both constraints.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, Sample};
use crate::rng;
use crate::tinynet::{Labels, NetError, TinyNet};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("epsilon must be non-negative")]
    NegativeEpsilon,
    #[error("attacks run for at least one step")]
    ZeroSteps,
    #[error("step size must be positive")]
    NonPositiveStep,
    #[error("decay must be non-negative")]
    NegativeDecay,
    #[error("config method {expected:?} required, got {actual:?}")]
    MethodMismatch { expected: AttackMethod, actual: AttackMethod },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample label {0:?} is not among the model's classes")]
    UnknownLabel(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Pgd,
    Mia,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// Attack parameters. `epsilon_255` and `step_255` are in 0–255 intensity
/// units; for [`Norm::L2`] the ε is a whole-image budget (see
/// [`rescale_l2_epsilon`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub norm: Norm,
    pub epsilon_255: f64,
    /// Iteration count T.
    pub steps: usize,
    /// Per-iteration step for PGD. The momentum attack uses α = ε/T.
    pub step_255: f64,
    /// Momentum decay μ (momentum attack only).
    pub decay: f64,
    /// Start from a uniform point in the ε-ball instead of the input.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Pgd,
            norm: Norm::Linf,
            epsilon_255: 16.0,
            steps: 20,
            step_255: 2.0,
            decay: 1.0,
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.epsilon_255 < 0.0 {
            return Err(AttackError::NegativeEpsilon);
        }
        if self.steps == 0 {
            return Err(AttackError::ZeroSteps);
        }
        if self.step_255 <= 0.0 {
            return Err(AttackError::NonPositiveStep);
        }
        if self.decay < 0.0 {
            return Err(AttackError::NegativeDecay);
        }
        Ok(())
    }

    /// Short label used in reports and artifact paths, e.g. `pgd_linf_eps16`.
    pub fn label(&self) -> String {
        let method = match self.method {
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mia => "mia",
        };
        let norm = match self.norm {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        };
        if self.epsilon_255.fract() == 0.0 {
            format!("{method}_{norm}_eps{}", self.epsilon_255 as i64)
        } else {
            format!("{method}_{norm}_eps{}", self.epsilon_255)
        }
    }
}

/// Reference image area for which the published whole-image L2 budgets
/// (ε of 300–900) were calibrated.
pub const REFERENCE_IMAGE_PIXELS: usize = 224 * 224;

/// Rescale a whole-image L2 budget to a different image area, keeping
/// per-pixel energy comparable: ε' = ε · √(pixels / reference).
pub fn rescale_l2_epsilon(epsilon_255: f64, pixels: usize) -> f64 {
    epsilon_255 * (pixels as f64 / REFERENCE_IMAGE_PIXELS as f64).sqrt()
}

/// Project a perturbation onto the ε-ball of the given norm, in place.
///
/// L∞ clamps each element to [−ε, +ε]; L2 rescales the whole vector onto
/// the sphere when its norm exceeds ε.
pub fn project(delta: &mut [f64], norm: Norm, eps: f64) {
    debug_assert!(eps >= 0.0);
    match norm {
        Norm::Linf => {
            for v in delta.iter_mut() {
                *v = v.clamp(-eps, eps);
            }
        }
        Norm::L2 => {
            let sq: f64 = delta.iter().map(|v| v * v).sum();
            let n = sq.sqrt();
            if n > eps {
                let scale = eps / n;
                for v in delta.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
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

/// Batched attack core. `y` gives the true class index per row. Calls
/// `on_iterate` with every intermediate iterate (including a random start,
/// when enabled) so invariants can be audited from outside.
pub fn attack_inputs_traced<F>(
    net: &TinyNet,
    x: &Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    mut on_iterate: F,
) -> Result<Array2<f64>, AttackError>
where
    F: FnMut(&Array2<f64>),
{
    cfg.validate()?;
    let eps = cfg.epsilon_255 / 255.0;
    let step = match cfg.method {
        AttackMethod::Pgd => cfg.step_255 / 255.0,
        AttackMethod::Mia => eps / cfg.steps as f64,
    };
    let dim = x.ncols();
    let mut x_p = x.to_owned();

    if cfg.random_start && eps > 0.0 {
        for (i, mut row) in x_p.rows_mut().into_iter().enumerate() {
            let mut rng = rng::chacha(rng::derive(seed, &[i as u64]));
            let mut delta = vec![0.0; dim];
            match cfg.norm {
                Norm::Linf => {
                    for d in delta.iter_mut() {
                        *d = rng.gen_range(-eps..=eps);
                    }
                }
                Norm::L2 => {
                    // Uniform in the ball: Gaussian direction, radius ∝ u^(1/d).
                    let mut sq = 0.0;
                    for d in delta.iter_mut() {
                        // Box-Muller from two uniforms.
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        *d = (-2.0 * u1.ln()).sqrt() * u2.cos();
                        sq += *d * *d;
                    }
                    let norm = sq.sqrt().max(f64::MIN_POSITIVE);
                    let radius = eps * rng.gen_range(0.0..1.0f64).powf(1.0 / dim as f64);
                    for d in delta.iter_mut() {
                        *d *= radius / norm;
                    }
                }
            }
            project(&mut delta, cfg.norm, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (x[[i, j]] + delta[j]).clamp(0.0, 1.0);
            }
        }
        on_iterate(&x_p);
    }

    let mut momentum = match cfg.method {
        AttackMethod::Mia => Some(Array2::<f64>::zeros(x.raw_dim())),
        AttackMethod::Pgd => None,
    };

    let labels = Labels::Classes(y.to_vec());
    for _ in 0..cfg.steps {
        let (_, grad) = net.loss_and_input_grad(x_p.view(), &labels)?;
        for i in 0..x.nrows() {
            let g_row = grad.row(i);
            let mut direction = vec![0.0; dim];
            match (&cfg.method, momentum.as_mut()) {
                (AttackMethod::Pgd, _) => match cfg.norm {
                    Norm::Linf => {
                        for (d, &g) in direction.iter_mut().zip(g_row.iter()) {
                            *d = sign(g);
                        }
                    }
                    Norm::L2 => {
                        let n: f64 = g_row.iter().map(|g| g * g).sum::<f64>().sqrt();
                        if n > 0.0 {
                            for (d, &g) in direction.iter_mut().zip(g_row.iter()) {
                                *d = g / n;
                            }
                        }
                    }
                },
                (AttackMethod::Mia, Some(m)) => {
                    let l1: f64 = g_row.iter().map(|g| g.abs()).sum();
                    let mut m_row = m.row_mut(i);
                    for (acc, &g) in m_row.iter_mut().zip(g_row.iter()) {
                        *acc *= cfg.decay;
                        // A vanished gradient leaves the momentum as-is.
                        if l1 > 0.0 {
                            *acc += g / l1;
                        }
                    }
                    match cfg.norm {
                        Norm::Linf => {
                            for (d, &a) in direction.iter_mut().zip(m_row.iter()) {
                                *d = sign(a);
                            }
                        }
                        Norm::L2 => {
                            let n: f64 = m_row.iter().map(|a| a * a).sum::<f64>().sqrt();
                            if n > 0.0 {
                                for (d, &a) in direction.iter_mut().zip(m_row.iter()) {
                                    *d = a / n;
                                }
                            }
                        }
                    }
                }
                (AttackMethod::Mia, None) => unreachable!(),
            }

            let mut delta: Vec<f64> = (0..dim)
                .map(|j| x_p[[i, j]] - x[[i, j]] + step * direction[j])
                .collect();
            project(&mut delta, cfg.norm, eps);
            for j in 0..dim {
                x_p[[i, j]] = (x[[i, j]] + delta[j]).clamp(0.0, 1.0);
            }
        }
        on_iterate(&x_p);
    }
    Ok(x_p)
}

/// Batched attack without iterate auditing.
pub fn attack_inputs(
    net: &TinyNet,
    x: &Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Array2<f64>, AttackError> {
    attack_inputs_traced(net, x, y, cfg, seed, |_| {})
}

/// Outcome of a single-sample attack.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub perturbed: Array1<f64>,
    /// The prediction moved away from the true label: it was `y` on the
    /// clean input and is not `y` on the perturbed one.
    pub success: bool,
    pub iterations_run: usize,
}

fn single(
    net: &TinyNet,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult, AttackError> {
    let batch = x.to_owned().insert_axis(ndarray::Axis(0));
    let adv = attack_inputs(net, &batch, &[y], cfg, seed)?;
    let clean_pred = net.predict_class(x)?;
    let adv_pred = net.predict_class(adv.row(0))?;
    Ok(AttackResult {
        perturbed: adv.row(0).to_owned(),
        success: clean_pred == y && adv_pred != y,
        iterations_run: cfg.steps,
    })
}

/// Projected gradient descent against one sample.
pub fn pgd(
    net: &TinyNet,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult, AttackError> {
    if cfg.method != AttackMethod::Pgd {
        return Err(AttackError::MethodMismatch { expected: AttackMethod::Pgd, actual: cfg.method });
    }
    single(net, x, y, cfg, seed)
}

/// Momentum-iterative attack against one sample.
pub fn mia(
    net: &TinyNet,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult, AttackError> {
    if cfg.method != AttackMethod::Mia {
        return Err(AttackError::MethodMismatch { expected: AttackMethod::Mia, actual: cfg.method });
    }
    single(net, x, y, cfg, seed)
}

/// Attack every sample of a dataset. Returns the attacked dataset (labels,
/// ids and ground-truth features carried over; the renderable parts of an
/// image survive the perturbation) and the per-sample success mask.
pub fn attack_batch(
    net: &TinyNet,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Dataset, Vec<bool>), AttackError> {
    if data.samples.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let x = data.inputs();
    let y = class_indices(net, data)?;
    let clean_preds = net.predict_classes(x.view())?;
    let adv = attack_inputs(net, &x, &y, cfg, seed)?;
    let adv_preds = net.predict_classes(adv.view())?;
    let mask: Vec<bool> = (0..y.len())
        .map(|i| clean_preds[i] == y[i] && adv_preds[i] != y[i])
        .collect();
    let samples: Vec<Sample> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pixels: Vec<f32> = adv.row(i).iter().map(|&v| v as f32).collect();
            Sample { pixels, ..s.clone() }
        })
        .collect();
    Ok((Dataset { samples, ..data.clone() }, mask))
}

/// Map dataset labels onto the model's class indices.
pub fn class_indices(net: &TinyNet, data: &Dataset) -> Result<Vec<usize>, AttackError> {
    data.samples
        .iter()
        .map(|s| {
            net.labels()
                .iter()
                .position(|l| crate::feature_matrix::normalize(l) == crate::feature_matrix::normalize(&s.label))
                .ok_or_else(|| AttackError::UnknownLabel(s.label.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::{init, ArchSpec, Head};
    use ndarray::array;

    fn logistic_net(w: f64) -> TinyNet {
        // Two-class logistic model over one input: logits [0, w·x].
        let mut net = init(
            ArchSpec::mlp(1, &[], 2, Head::SoftmaxClassifier),
            vec!["neg".into(), "pos".into()],
            0,
        )
        .unwrap();
        let bytes = net.to_bytes();
        drop(bytes);
        net = rebuild_with_weights(net, &[0.0, w, 0.0, 0.0]);
        net
    }

    fn rebuild_with_weights(net: TinyNet, flat: &[f64]) -> TinyNet {
        // Round-trips through the checkpoint to set exact weights.
        let mut bytes = net.to_bytes();
        let blob_start = bytes.len() - flat.len() * 4;
        for (k, v) in flat.iter().enumerate() {
            let le = (*v as f32).to_le_bytes();
            bytes[blob_start + 4 * k..blob_start + 4 * k + 4].copy_from_slice(&le);
        }
        TinyNet::from_bytes(&bytes).unwrap()
    }

    #[test]
    fn project_clamps_linf() {
        let mut d = vec![0.3, -0.01];
        project(&mut d, Norm::Linf, 0.1);
        assert_eq!(d, vec![0.1, -0.01]);
    }

    #[test]
    fn project_rescales_l2_onto_sphere() {
        let eps = 0.25;
        let mut d = vec![0.3, 0.4]; // norm 0.5 = 2·eps
        project(&mut d, Norm::L2, eps);
        let n: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - eps).abs() < 1e-12);
        // Inside the ball: untouched.
        let mut inside = vec![0.01, 0.02];
        project(&mut inside, Norm::L2, eps);
        assert_eq!(inside, vec![0.01, 0.02]);
    }

    #[test]
    fn project_with_zero_eps_zeroes_everything() {
        for norm in [Norm::Linf, Norm::L2] {
            let mut d = vec![0.5, -0.2, 0.0];
            project(&mut d, norm, 0.0);
            assert_eq!(d, vec![0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn zero_epsilon_attack_is_identity() {
        let net = logistic_net(3.0);
        let cfg = AttackConfig { epsilon_255: 0.0, ..Default::default() };
        let x = array![0.7];
        let res = pgd(&net, x.view(), 1, &cfg, 0).unwrap();
        assert_eq!(res.perturbed[0], 0.7);
        assert!(!res.success);
    }

    #[test]
    fn pgd_single_step_on_logistic_model_moves_against_weight() {
        // Positive weight, true class positive: the loss gradient w.r.t. x
        // is negative, so one L∞ step moves x down by the step size.
        let net = logistic_net(2.5);
        let cfg = AttackConfig {
            epsilon_255: 25.5,
            steps: 1,
            step_255: 12.75,
            ..Default::default()
        };
        let x = array![0.6];
        let res = pgd(&net, x.view(), 1, &cfg, 0).unwrap();
        assert!((res.perturbed[0] - (0.6 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn mia_without_momentum_is_one_fgsm_step() {
        let net = logistic_net(1.7);
        let eps = 8.0;
        let cfg = AttackConfig {
            method: AttackMethod::Mia,
            decay: 0.0,
            steps: 1,
            epsilon_255: eps,
            ..Default::default()
        };
        let x = array![0.4];
        let res = mia(&net, x.view(), 1, &cfg, 0).unwrap();
        // One signed step of size α = ε/T = ε.
        let expected = (0.4f64 - eps / 255.0).clamp(0.0, 1.0);
        assert!((res.perturbed[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn mia_zero_epsilon_is_identity() {
        let net = logistic_net(1.0);
        let cfg = AttackConfig {
            method: AttackMethod::Mia,
            epsilon_255: 0.0,
            ..Default::default()
        };
        let x = array![0.5];
        let res = mia(&net, x.view(), 1, &cfg, 0).unwrap();
        assert_eq!(res.perturbed[0], 0.5);
    }

    #[test]
    fn zero_gradient_keeps_iterate_fixed() {
        // All-zero weights: softmax is uniform and the input gradient
        // vanishes, so neither attack moves.
        let net = rebuild_with_weights(logistic_net(0.0), &[0.0, 0.0, 0.0, 0.0]);
        for method in [AttackMethod::Pgd, AttackMethod::Mia] {
            let cfg = AttackConfig { method, epsilon_255: 16.0, steps: 3, ..Default::default() };
            let x = array![0.3];
            let res = single(&net, x.view(), 1, &cfg, 0).unwrap();
            assert_eq!(res.perturbed[0], 0.3);
        }
    }

    #[test]
    fn method_mismatch_is_rejected() {
        let net = logistic_net(1.0);
        let cfg = AttackConfig { method: AttackMethod::Mia, ..Default::default() };
        assert!(matches!(
            pgd(&net, array![0.5].view(), 1, &cfg, 0),
            Err(AttackError::MethodMismatch { .. })
        ));
    }

    #[test]
    fn iterates_respect_bounds_with_random_start() {
        let net = logistic_net(4.0);
        for norm in [Norm::Linf, Norm::L2] {
            let cfg = AttackConfig {
                norm,
                epsilon_255: 16.0,
                steps: 5,
                random_start: true,
                ..Default::default()
            };
            let eps = cfg.epsilon_255 / 255.0;
            let x = array![[0.98], [0.01], [0.5]];
            let mut audited = 0;
            attack_inputs_traced(&net, &x, &[1, 1, 0], &cfg, 9, |iterate| {
                audited += 1;
                for i in 0..x.nrows() {
                    let d = iterate[[i, 0]] - x[[i, 0]];
                    assert!(d.abs() <= eps + 1e-9);
                    assert!((0.0..=1.0).contains(&iterate[[i, 0]]));
                }
            })
            .unwrap();
            assert_eq!(audited, cfg.steps + 1);
        }
    }

    #[test]
    fn same_seed_gives_identical_random_start_attacks() {
        let net = logistic_net(2.0);
        let cfg = AttackConfig { random_start: true, steps: 4, ..Default::default() };
        let x = array![[0.3], [0.8]];
        let a = attack_inputs(&net, &x, &[1, 0], &cfg, 42).unwrap();
        let b = attack_inputs(&net, &x, &[1, 0], &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = attack_inputs(&net, &x, &[1, 0], &cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn l2_rescale_keeps_per_pixel_energy() {
        let desk = rescale_l2_epsilon(300.0, 32 * 32);
        // 224² scaled down to 32²: linear factor 32/224 = 1/7.
        assert!((desk - 300.0 / 7.0).abs() < 1e-9);
        assert_eq!(rescale_l2_epsilon(600.0, REFERENCE_IMAGE_PIXELS), 600.0);
    }
}
