//! The converge algorithm: extract the true label from the captured
//! classifier gradient, initialize dummy data, and minimize the distance
//! between the dummy gradients and the capture with L-BFGS, recording
//! gradient distance and image RMSE per iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{backward, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, param_gradients, DropoutMask, Gradients, MaskPolicy, Model};
use crate::tensor::Tensor;

/// The victim's shared gradients plus the metadata the experiments vary.
#[derive(Debug, Clone)]
pub struct GradientCapture {
    pub grads: Gradients,
    pub dropout_rate: f64,
    pub victim_seed: u64,
    /// The single mask the victim sampled (present iff the model has
    /// dropout); only the "oracle" attacker policy may read it.
    pub mask: Option<DropoutMask>,
}

/// Produce a victim capture: one forward/backward on one example, with one
/// sampled dropout mask (a real federated worker shares one gradient).
pub fn capture_gradients(
    model: &Model,
    x: &Tensor,
    label: usize,
    victim_seed: u64,
) -> Result<GradientCapture> {
    let mut rng = ChaCha8Rng::seed_from_u64(victim_seed);
    let policy = if model.has_dropout() {
        MaskPolicy::Resample(&mut rng)
    } else {
        MaskPolicy::Expected
    };
    let (grads, mask) = param_gradients(model, x, label, policy)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite { op: "capture" });
    }
    Ok(GradientCapture {
        grads,
        dropout_rate: model.dropout_rate,
        victim_seed,
        mask,
    })
}

/// Analytic label recovery: with cross-entropy and strictly positive encoder
/// activations, the classifier weight-gradient row of the true class is
/// (p_y − 1)·h ≤ 0 while every other row is p_i·h ≥ 0, so the true label is
/// the argmin of the row sums.
pub fn extract_label(capture: &GradientCapture) -> Result<usize> {
    let wg = capture
        .grads
        .get("fc.weight")
        .ok_or_else(|| Error::MissingGradient("fc.weight".to_string()))?;
    let shape = wg.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "extract_label",
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (classes, features) = (shape[0], shape[1]);
    let mut best = 0usize;
    let mut best_sum = f64::INFINITY;
    let mut tie: Option<usize> = None;
    for class in 0..classes {
        let row_sum: f64 = wg.data()[class * features..(class + 1) * features]
            .iter()
            .sum();
        if row_sum < best_sum {
            best = class;
            best_sum = row_sum;
            tie = None;
        } else if row_sum == best_sum {
            tie = Some(class);
        }
    }
    if let Some(other) = tie {
        return Err(Error::AmbiguousLabel(best, other));
    }
    Ok(best)
}

/// Sum over all parameters of elementwise squared differences (detached
/// value form).
pub fn gradient_distance(dummy: &Gradients, target: &Gradients) -> Result<f64> {
    if dummy.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient key sets differ: {} vs {} entries",
            dummy.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for ((na, ta), (nb, tb)) in dummy.iter().zip(target.iter()) {
        if na != nb {
            return Err(Error::MissingGradient(nb.to_string()));
        }
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "gradient_distance",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        total += ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Tape form of the distance: D = Σ_θ ‖g_θ − target_θ‖², differentiable
/// w.r.t. everything feeding the dummy gradients.
fn gradient_distance_var(
    tape: &Tape,
    dummy: &[(String, Var)],
    target: &GradientCapture,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, g) in dummy {
        let t = target
            .grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let term = g.sub(&tape.leaf(t.clone()))?.square()?.sum()?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("empty gradient set".into()))
}

/// How the attacker simulates the victim's dropout mask each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerPolicy {
    /// Fresh mask per iteration — the realistic attacker.
    Resample,
    /// Identity dropout (eval mode).
    Expected,
    /// The attacker knows the victim's mask; mechanism ablation only.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// iDLG: extract the label analytically, then keep it fixed.
    Extracted,
    /// DLG: optimize a soft label jointly with the dummy image.
    JointlyOptimized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Lbfgs { history: usize, lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub policy: AttackerPolicy,
    pub label_mode: LabelMode,
    pub init_seed: u64,
    /// Project the dummy image onto [0,1] after each step (ablation);
    /// metrics always clamp regardless.
    pub clamp_pixels: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 5_800,
            optimizer: OptimizerKind::Lbfgs {
                history: 100,
                lr: 1.0,
            },
            policy: AttackerPolicy::Resample,
            label_mode: LabelMode::Extracted,
            init_seed: 0,
            clamp_pixels: false,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<()> {
        let ok = match self.optimizer {
            OptimizerKind::Lbfgs { history, lr } => history >= 1 && lr > 0.0,
            OptimizerKind::Adam { lr, .. } => lr > 0.0,
        };
        if self.iterations == 0 || !ok {
            return Err(Error::InvalidArgument(
                "attack config: iterations > 0, lr > 0, history >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub distance: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct AttackTrace {
    pub records: Vec<TraceRecord>,
    /// Final dummy image, clamped to [0,1].
    pub reconstruction: Tensor,
    pub label_used: usize,
    pub diverged: bool,
    /// Iterations whose accepted step did not decrease D.
    pub non_monotone_steps: usize,
}

impl AttackTrace {
    pub fn final_rmse(&self) -> f64 {
        self.records.last().map(|r| r.rmse).unwrap_or(f64::NAN)
    }

    pub fn final_distance(&self) -> f64 {
        self.records.last().map(|r| r.distance).unwrap_or(f64::NAN)
    }

    pub fn csv_rows(&self) -> Vec<(usize, f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.iteration, r.distance, r.rmse))
            .collect()
    }
}

/// Root-mean-square error between two images on the [0,1] pixel scale.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "rmse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.numel() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sum / n).sqrt())
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// One evaluation of the attack objective at a candidate dummy image:
/// simulate the victim's forward/backward under `mask`, then D against the
/// capture. Returns (D value, optional gradient of D w.r.t. the variable
/// vector).
struct Objective<'a> {
    model: &'a Model,
    capture: &'a GradientCapture,
    label_mode: LabelMode,
    hard_label: usize,
    num_classes: usize,
    pixel_count: usize,
}

impl Objective<'_> {
    // Variable layout: [pixels..., soft-label logits... (joint mode only)].
    fn eval(&self, vars: &[f64], mask: Option<&DropoutMask>, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let (c, h, w) = self.model.input_shape;
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::new(
            vec![1, c, h, w],
            vars[..self.pixel_count].to_vec(),
        )?);
        let policy = match mask {
            Some(m) => MaskPolicy::Fixed(m),
            None => MaskPolicy::Expected,
        };
        let out = self.model.forward(&tape, &xv, policy)?;

        let (loss, label_var) = match self.label_mode {
            LabelMode::Extracted => (cross_entropy(&out.logits, self.hard_label)?, None),
            LabelMode::JointlyOptimized => {
                // Soft cross-entropy against q = softmax(label logits):
                // loss = Σ q·(lse(z) − z)
                let lv = tape.leaf(Tensor::new(
                    vec![1, self.num_classes],
                    vars[self.pixel_count..].to_vec(),
                )?);
                let q = lv.softmax()?;
                let z = out.logits.reshape(&[1, self.num_classes])?;
                let lse = z.logsumexp()?;
                let ones = tape.leaf(Tensor::ones(&[1, self.num_classes]));
                let loss = q.mul(&lse.mul(&ones)?.sub(&z)?)?.sum()?;
                (loss, Some(lv))
            }
        };

        let param_targets: Vec<Var> = out.param_vars.iter().map(|(_, v)| v.clone()).collect();
        let dummy_grads = backward(&loss, &param_targets, true)?;
        let named: Vec<(String, Var)> = out
            .param_vars
            .iter()
            .map(|(n, _)| n.clone())
            .zip(dummy_grads)
            .collect();
        let dist = gradient_distance_var(&tape, &named, self.capture)?;
        let d_value = dist.value().item();
        if !want_grad {
            return Ok((d_value, None));
        }
        let mut targets = vec![xv];
        if let Some(lv) = label_var {
            targets.push(lv);
        }
        let grads = backward(&dist, &targets, false)?;
        let mut flat = grads[0].value().into_data();
        if grads.len() > 1 {
            flat.extend(grads[1].value().into_data());
        }
        Ok((d_value, Some(flat)))
    }
}

/// ∇_{x'} D at a dummy image, under the given mask policy resolved to a
/// concrete mask (None = expected). Exposed for oracle tests.
pub fn attack_objective_grad(
    model: &Model,
    dummy_x: &Tensor,
    label: usize,
    capture: &GradientCapture,
    mask: Option<&DropoutMask>,
) -> Result<(f64, Tensor)> {
    let obj = Objective {
        model,
        capture,
        label_mode: LabelMode::Extracted,
        hard_label: label,
        num_classes: model.num_classes,
        pixel_count: dummy_x.numel(),
    };
    let (d, g) = obj.eval(dummy_x.data(), mask, true)?;
    let grad = Tensor::new(dummy_x.shape().to_vec(), g.unwrap())?;
    Ok((d, grad))
}

enum OptState {
    Lbfgs(crate::optim::Lbfgs),
    Adam(crate::optim::Adam),
}

/// Run the full attack: label extraction, dummy init, iterative gradient
/// matching, per-iteration trace.
pub fn run_attack(
    model: &Model,
    capture: &GradientCapture,
    ground_truth: &Tensor,
    config: &AttackConfig,
) -> Result<AttackTrace> {
    config.validate()?;
    // Architecture check: identical key sets and shapes.
    for (name, p) in model.params() {
        let g = capture
            .grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "run_attack",
                lhs: g.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    if capture.grads.len() != model.params().count() {
        return Err(Error::InvalidArgument(
            "capture has gradients for unknown parameters".into(),
        ));
    }
    if config.policy == AttackerPolicy::Oracle && model.has_dropout() && capture.mask.is_none() {
        return Err(Error::InvalidArgument(
            "oracle policy requires the victim mask in the capture".into(),
        ));
    }

    let label = match config.label_mode {
        LabelMode::Extracted | LabelMode::JointlyOptimized => extract_label(capture)?,
    };

    let (c, h, w) = model.input_shape;
    let pixel_count = c * h * w;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut vars: Vec<f64> = (0..pixel_count)
        .map(|_| StandardNormal.sample(&mut init_rng))
        .collect();
    if config.label_mode == LabelMode::JointlyOptimized {
        vars.extend((0..model.num_classes).map(|_| {
            let v: f64 = StandardNormal.sample(&mut init_rng);
            v
        }));
    }

    // Separate stream for attacker mask resampling.
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    mask_rng.set_stream(1);

    let obj = Objective {
        model,
        capture,
        label_mode: config.label_mode,
        hard_label: label,
        num_classes: model.num_classes,
        pixel_count,
    };

    let mut opt = match config.optimizer {
        OptimizerKind::Lbfgs { history, lr } => OptState::Lbfgs(crate::optim::Lbfgs::new(history, lr)),
        OptimizerKind::Adam { lr, beta1, beta2 } => {
            OptState::Adam(crate::optim::Adam::new(lr, beta1, beta2))
        }
    };

    let mask_shape = model.dropout_input_shape(1);
    let mut records = Vec::with_capacity(config.iterations);
    let mut diverged = false;
    let mut non_monotone = 0usize;

    for iteration in 0..config.iterations {
        // Resolve this iteration's mask once; line-search evals reuse it.
        let iter_mask: Option<DropoutMask> = match config.policy {
            AttackerPolicy::Expected => None,
            AttackerPolicy::Oracle => capture.mask.clone(),
            AttackerPolicy::Resample => mask_shape
                .as_ref()
                .map(|s| DropoutMask::sample(s, capture.dropout_rate, &mut mask_rng)),
        };

        let evaluated = obj.eval(&vars, iter_mask.as_ref(), true);
        let (d, grad) = match evaluated {
            Ok((d, Some(g))) if d.is_finite() && g.iter().all(|v| v.is_finite()) => (d, g),
            Ok(_) | Err(Error::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        let current = Tensor::new(vec![c, h, w], vars[..pixel_count].to_vec())?;
        records.push(TraceRecord {
            iteration,
            distance: d,
            rmse: rmse(&clamp01(&current), ground_truth)?,
        });

        match &mut opt {
            OptState::Lbfgs(lbfgs) => {
                let outcome = lbfgs.step(&mut vars, d, &grad, |trial| {
                    Ok(obj.eval(trial, iter_mask.as_ref(), false)?.0)
                })?;
                if !outcome.decreased {
                    non_monotone += 1;
                }
            }
            OptState::Adam(adam) => adam.step(&mut vars, &grad),
        }

        if config.clamp_pixels {
            for v in vars[..pixel_count].iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    let reconstruction = clamp01(&Tensor::new(vec![c, h, w], vars[..pixel_count].to_vec())?);
    Ok(AttackTrace {
        records,
        reconstruction,
        label_used: label,
        diverged,
        non_monotone_steps: non_monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_image_sized, SynthKind};
    use crate::nn::{build_lenet, build_lenet_for_input};
    use rand::Rng;

    fn micro_model(seed: u64) -> Model {
        build_lenet_for_input(2, 0.0, seed, (1, 4, 4)).unwrap()
    }

    fn rand_image(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn label_extraction_on_micro_model_row_signs() {
        let model = micro_model(1);
        let x = rand_image(2, &[1, 1, 4, 4]);
        let true_label = 1usize;
        let capture = capture_gradients(&model, &x, true_label, 0).unwrap();
        let wg = capture.grads.get("fc.weight").unwrap();
        let features = wg.shape()[1];
        let row_sum = |cls: usize| -> f64 {
            wg.data()[cls * features..(cls + 1) * features].iter().sum()
        };
        assert!(row_sum(true_label) < 0.0);
        assert!(row_sum(1 - true_label) > 0.0);
        assert_eq!(extract_label(&capture).unwrap(), true_label);
    }

    #[test]
    fn label_extraction_brute_force_cross_check() {
        // Independent oracle: compare the capture against all candidate
        // label gradients; the matching candidate must agree with
        // extract_label.
        let model = build_lenet_for_input(4, 0.0, 3, (1, 4, 4)).unwrap();
        let x = rand_image(9, &[1, 1, 4, 4]);
        for true_label in 0..4 {
            let capture = capture_gradients(&model, &x, true_label, 0).unwrap();
            let mut matching = None;
            for candidate in 0..4 {
                let (g, _) =
                    param_gradients(&model, &x, candidate, MaskPolicy::Expected).unwrap();
                if gradient_distance(&g, &capture.grads).unwrap() < 1e-20 {
                    matching = Some(candidate);
                }
            }
            assert_eq!(matching, Some(true_label));
            assert_eq!(extract_label(&capture).unwrap(), true_label);
        }
    }

    #[test]
    fn label_extraction_missing_classifier_gradient() {
        let capture = GradientCapture {
            grads: Gradients::new(vec![]),
            dropout_rate: 0.0,
            victim_seed: 0,
            mask: None,
        };
        assert!(matches!(
            extract_label(&capture),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn label_extraction_reports_ties() {
        let capture = GradientCapture {
            grads: Gradients::new(vec![(
                "fc.weight".to_string(),
                Tensor::new(vec![2, 2], vec![1.0, -1.0, -0.5, 0.5]).unwrap(),
            )]),
            dropout_rate: 0.0,
            victim_seed: 0,
            mask: None,
        };
        assert!(matches!(
            extract_label(&capture),
            Err(Error::AmbiguousLabel(0, 1))
        ));
    }

    #[test]
    fn gradient_distance_examples() {
        let a = Gradients::new(vec![(
            "p".to_string(),
            Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
        )]);
        let b = Gradients::new(vec![(
            "p".to_string(),
            Tensor::new(vec![2], vec![1.0, 4.0]).unwrap(),
        )]);
        assert_eq!(gradient_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(gradient_distance(&a, &b).unwrap(), 4.0);
        assert_eq!(
            gradient_distance(&a, &b).unwrap(),
            gradient_distance(&b, &a).unwrap()
        );
        let c = Gradients::new(vec![(
            "q".to_string(),
            Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
        )]);
        assert!(gradient_distance(&a, &c).is_err());
    }

    #[test]
    fn objective_zero_at_ground_truth() {
        let model = micro_model(5);
        let x = rand_image(11, &[1, 1, 4, 4]);
        let capture = capture_gradients(&model, &x, 0, 0).unwrap();
        let (d, g) = attack_objective_grad(&model, &x, 0, &capture, None).unwrap();
        assert!(d < 1e-24, "d = {d}");
        assert!(g.data().iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn objective_grad_matches_finite_differences() {
        let model = micro_model(7);
        let x_true = rand_image(13, &[1, 1, 4, 4]);
        let capture = capture_gradients(&model, &x_true, 1, 0).unwrap();
        let dummy = rand_image(14, &[1, 1, 4, 4]);
        let (_, analytic) = attack_objective_grad(&model, &dummy, 1, &capture, None).unwrap();
        let eps = 1e-5;
        for i in 0..dummy.numel() {
            let mut hi = dummy.clone();
            hi.data_mut()[i] += eps;
            let mut lo = dummy.clone();
            lo.data_mut()[i] -= eps;
            let (dh, _) = attack_objective_grad(&model, &hi, 1, &capture, None)
                .map(|(d, g)| (d, g))
                .unwrap();
            let (dl, _) = attack_objective_grad(&model, &lo, 1, &capture, None).unwrap();
            let numeric = (dh - dl) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-3, "pixel {i}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn objective_is_deterministic() {
        let model = micro_model(3);
        let x_true = rand_image(4, &[1, 1, 4, 4]);
        let capture = capture_gradients(&model, &x_true, 0, 0).unwrap();
        let dummy = rand_image(5, &[1, 1, 4, 4]);
        let a = attack_objective_grad(&model, &dummy, 0, &capture, None).unwrap();
        let b = attack_objective_grad(&model, &dummy, 0, &capture, None).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rmse_reference_values() {
        let a = Tensor::zeros(&[3, 2, 2]);
        let b = Tensor::ones(&[3, 2, 2]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);
        let p = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let q = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        assert!((rmse(&p, &q).unwrap() - 0.125f64.sqrt()).abs() < 1e-12);
        assert!(rmse(&p, &a).is_err());
    }

    #[test]
    fn micro_attack_recovers_image() {
        let model = micro_model(23);
        let x = rand_image(29, &[1, 1, 4, 4]);
        let capture = capture_gradients(&model, &x, 1, 0).unwrap();
        let config = AttackConfig {
            iterations: 120,
            optimizer: OptimizerKind::Lbfgs {
                history: 50,
                lr: 1.0,
            },
            policy: AttackerPolicy::Expected,
            label_mode: LabelMode::Extracted,
            init_seed: 7,
            clamp_pixels: false,
        };
        let gt = Tensor::new(vec![1, 4, 4], x.data().to_vec()).unwrap();
        let trace = run_attack(&model, &capture, &gt, &config).unwrap();
        assert_eq!(trace.label_used, 1);
        assert!(!trace.diverged);
        assert_eq!(trace.records.len(), 120);
        assert!(
            trace.final_distance() < 1e-8,
            "final D = {}",
            trace.final_distance()
        );
        assert!(trace.final_rmse() < 0.05, "rmse = {}", trace.final_rmse());
    }

    #[test]
    fn trace_is_deterministic() {
        let model = build_lenet_for_input(2, 0.3, 31, (1, 4, 4)).unwrap();
        let x = rand_image(33, &[1, 1, 4, 4]);
        let capture = capture_gradients(&model, &x, 0, 41).unwrap();
        let gt = Tensor::new(vec![1, 4, 4], x.data().to_vec()).unwrap();
        let config = AttackConfig {
            iterations: 20,
            init_seed: 3,
            ..Default::default()
        };
        let t1 = run_attack(&model, &capture, &gt, &config).unwrap();
        let t2 = run_attack(&model, &capture, &gt, &config).unwrap();
        assert_eq!(t1.records, t2.records);
        assert_eq!(t1.reconstruction, t2.reconstruction);
    }

    #[test]
    fn oracle_policy_with_dropout_matches_p0_behavior() {
        // With the oracle mask the attack sees the exact masked network the
        // victim used, so D can be driven to ~0 on a micro model.
        let model = build_lenet_for_input(2, 0.5, 37, (1, 4, 4)).unwrap();
        let x = rand_image(39, &[1, 1, 4, 4]);
        let capture = capture_gradients(&model, &x, 1, 43).unwrap();
        assert!(capture.mask.is_some());
        let gt = Tensor::new(vec![1, 4, 4], x.data().to_vec()).unwrap();
        let config = AttackConfig {
            iterations: 150,
            optimizer: OptimizerKind::Lbfgs {
                history: 50,
                lr: 1.0,
            },
            policy: AttackerPolicy::Oracle,
            label_mode: LabelMode::Extracted,
            init_seed: 11,
            clamp_pixels: false,
        };
        let trace = run_attack(&model, &capture, &gt, &config).unwrap();
        assert!(
            trace.final_distance() < 1e-6,
            "final D = {}",
            trace.final_distance()
        );
    }

    #[test]
    fn label_extraction_survives_dropout_on_lenet() {
        // Spot check at full scale (the 100-trial version lives in the
        // acceptance suite).
        for seed in 0..5u64 {
            let model = build_lenet(10, 0.5, 100 + seed).unwrap();
            let x = synth_image_sized(seed, SynthKind::Noise, 32, 32);
            let label = (seed % 10) as usize;
            let capture = capture_gradients(&model, &x, label, seed).unwrap();
            assert_eq!(extract_label(&capture).unwrap(), label);
        }
    }

    #[test]
    fn joint_label_mode_runs_and_converges_on_micro() {
        let model = micro_model(47);
        let x = rand_image(51, &[1, 1, 4, 4]);
        let capture = capture_gradients(&model, &x, 0, 0).unwrap();
        let gt = Tensor::new(vec![1, 4, 4], x.data().to_vec()).unwrap();
        let config = AttackConfig {
            iterations: 150,
            optimizer: OptimizerKind::Lbfgs {
                history: 50,
                lr: 1.0,
            },
            policy: AttackerPolicy::Expected,
            label_mode: LabelMode::JointlyOptimized,
            init_seed: 2,
            clamp_pixels: false,
        };
        let trace = run_attack(&model, &capture, &gt, &config).unwrap();
        assert!(!trace.diverged);
        assert!(
            trace.final_distance() < 1e-8,
            "final D = {}",
            trace.final_distance()
        );
    }
}
