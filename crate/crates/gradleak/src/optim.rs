//! Optimizers over flat f64 parameter vectors: L-BFGS with a backtracking
//! fallback (the attack's optimizer), Adam (ablation option), and SGD with
//! momentum (classifier training).

use std::collections::VecDeque;

use crate::error::Result;

const CURVATURE_MIN: f64 = 1e-10;
const MAX_BACKTRACKS: usize = 10;

/// Limited-memory BFGS with two-loop recursion. Pairs violating the
/// curvature condition sᵀy > 1e-10 are skipped; a non-finite or non-descent
/// direction falls back to steepest descent for that step.
pub struct Lbfgs {
    history_cap: usize,
    lr: f64,
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>, // (s, y, 1/sᵀy)
    prev: Option<(Vec<f64>, Vec<f64>)>,           // (x, grad) from last step
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    /// Objective value at the accepted point.
    pub f_new: f64,
    /// Whether the accepted point did not increase the objective.
    pub decreased: bool,
    /// Whether the direction was reset to steepest descent.
    pub reset: bool,
}

impl Lbfgs {
    pub fn new(history: usize, lr: f64) -> Self {
        assert!(history >= 1 && lr > 0.0);
        Lbfgs {
            history_cap: history,
            lr,
            history: VecDeque::new(),
            prev: None,
        }
    }

    /// Advance `x` one step. `f0`/`grad` are the objective and gradient at
    /// the current `x`; `eval` re-evaluates the objective at a trial point
    /// (same mask/inputs as `f0` — the caller fixes stochastic state per
    /// step).
    pub fn step(
        &mut self,
        x: &mut Vec<f64>,
        f0: f64,
        grad: &[f64],
        mut eval: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<StepOutcome> {
        if let Some((px, pg)) = self.prev.take() {
            let s: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.iter().zip(&pg).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > CURVATURE_MIN {
                if self.history.len() == self.history_cap {
                    self.history.pop_front();
                }
                self.history.push_back((s, y, 1.0 / sy));
            } else {
                // Negative/zero curvature along the last step: the stored
                // model no longer describes the local landscape. Restart
                // from (scaled) steepest descent instead of iterating with
                // a frozen history.
                self.history.clear();
            }
        }

        let mut direction = self.two_loop(grad);
        let mut reset = false;
        let descent = dot(&direction, grad);
        if !direction.iter().all(|v| v.is_finite()) || descent >= 0.0 {
            direction = grad.iter().map(|g| -g).collect();
            self.history.clear();
            reset = true;
        }

        let mut t = self.lr;
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..=MAX_BACKTRACKS {
            let trial: Vec<f64> = x
                .iter()
                .zip(&direction)
                .map(|(xi, di)| xi + t * di)
                .collect();
            let ft = eval(&trial)?;
            if ft.is_finite() && best.as_ref().map_or(true, |(fb, _)| ft < *fb) {
                best = Some((ft, trial));
            }
            if ft.is_finite() && ft <= f0 {
                break;
            }
            t *= 0.5;
        }
        let (f_new, accepted) = best.unwrap_or_else(|| (f0, x.clone()));

        self.prev = Some((x.clone(), grad.to_vec()));
        *x = accepted;
        Ok(StepOutcome {
            f_new,
            decreased: f_new <= f0,
            reset,
        })
    }

    fn two_loop(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let alpha = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= alpha * yi;
            }
            alphas.push(alpha);
        }
        // Initial inverse-Hessian scaling from the most recent pair.
        if let Some((s, y, _)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), alpha) in self.history.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alpha - beta) * si;
            }
        }
        for qi in q.iter_mut() {
            *qi = -*qi;
        }
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        if self.m.is_empty() {
            self.m = vec![0.0; x.len()];
            self.v = vec![0.0; x.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Plain momentum SGD.
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, dim: usize) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        for i in 0..x.len() {
            self.velocity[i] = self.momentum * self.velocity[i] + grad[i];
            x[i] -= self.lr * self.velocity[i];
        }
    }
}
