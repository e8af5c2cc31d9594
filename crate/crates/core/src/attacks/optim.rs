//! First- and quasi-second-order optimizers over flat vectors.

use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::error::Result;

/// Cosine decay from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(lr: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let frac = step as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * frac).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with a backtracking Armijo line search.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
    iterations: usize,
}

/// Outcome of one L-BFGS iteration.
pub enum LbfgsStep {
    Moved { x: Vec<f64>, f: f64, g: Vec<f64> },
    /// Gradient is already zero; nothing to do.
    Converged,
    /// No step length gave sufficient decrease.
    LineSearchFailed,
}

impl Lbfgs {
    pub fn new(capacity: usize) -> Self {
        Lbfgs {
            history: VecDeque::with_capacity(capacity),
            capacity,
            iterations: 0,
        }
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    pub fn step(
        &mut self,
        x: &[f64],
        f: f64,
        g: &[f64],
        lr: f64,
        mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    ) -> Result<LbfgsStep> {
        let gnorm1: f64 = g.iter().map(|v| v.abs()).sum();
        if gnorm1 == 0.0 {
            return Ok(LbfgsStep::Converged);
        }
        let mut d = self.direction(g);
        let mut slope = dot(g, &d);
        if !(slope < 0.0) {
            // Curvature history went bad; restart from steepest descent.
            self.history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(g, g);
        }
        let mut t = if self.history.is_empty() { lr * (1.0f64).min(1.0 / gnorm1) } else { lr };
        self.iterations += 1;
        for _ in 0..30 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Ok((fnew, gnew)) = eval(&xn) {
                if fnew.is_finite() && fnew <= f + 1e-4 * t * slope {
                    let s: Vec<f64> = xn.iter().zip(x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = gnew.iter().zip(g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-10 {
                        if self.history.len() == self.capacity {
                            self.history.pop_front();
                        }
                        self.history.push_back((s, y, 1.0 / sy));
                    }
                    return Ok(LbfgsStep::Moved { x: xn, f: fnew, g: gnew });
                }
            }
            t *= 0.5;
        }
        Ok(LbfgsStep::LineSearchFailed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut x = vec![-1.2, 1.0];
        let (mut f, mut g) = rosenbrock(&x).unwrap();
        let mut opt = Lbfgs::new(10);
        for _ in 0..200 {
            match opt.step(&x, f, &g, 1.0, rosenbrock).unwrap() {
                LbfgsStep::Moved { x: xn, f: fnew, g: gn } => {
                    x = xn;
                    f = fnew;
                    g = gn;
                }
                _ => break,
            }
        }
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] - 1.0).abs() < 1e-5, "{x:?}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for i in 0..3000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g, cosine_lr(0.1, 0.001, i, 3000));
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn schedule_endpoints() {
        assert!((cosine_lr(0.01, 0.001, 0, 100) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(0.01, 0.001, 99, 100) - 0.001).abs() < 1e-15);
    }
}
