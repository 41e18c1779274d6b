//! Weighted ℓ1-penalized least squares
//! `min ½‖Ax − b‖² + α Σ w_i |x_i|` with `w_i ≥ 0` (zero weight leaves a
//! coordinate unpenalized).
//!
//! Accelerated proximal gradient drives the iterate toward the optimal
//! signed support; an active-set refinement then solves the optimality
//! system on that support exactly and accepts it only when the full KKT
//! conditions hold.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::convex::{sign0, soft_threshold, RealVec};
use crate::operators::RANK_TOL;

pub(crate) struct Lasso<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a RealVec,
    pub alpha: f64,
    pub weights: &'a [f64],
}

/// Final iterate; callers re-verify optimality themselves.
pub(crate) struct LassoResult {
    pub x: RealVec,
    pub iterations: usize,
}

impl Lasso<'_> {
    fn n(&self) -> usize {
        self.a.ncols()
    }

    /// Scaled correlation `Aᵀ(b − Ax)/α`.
    fn correlation(&self, x: &RealVec) -> RealVec {
        self.a.tr_mul(&(self.b - self.a * x)) / self.alpha
    }

    pub fn kkt_residual(&self, x: &RealVec) -> f64 {
        let c = self.correlation(x);
        (0..self.n())
            .map(|i| {
                let w = self.weights[i];
                if w == 0.0 {
                    c[i].abs()
                } else if x[i] != 0.0 {
                    (c[i] - w * sign0(x[i])).abs()
                } else {
                    (c[i].abs() - w).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, tol: f64, max_iter: usize, warm: Option<&RealVec>) -> LassoResult {
        let n = self.n();
        let mut x = warm.cloned().unwrap_or_else(|| RealVec::zeros(n));

        let kkt0 = self.kkt_residual(&x);
        if kkt0 <= tol {
            return LassoResult {
                x,
                iterations: 0,
            };
        }
        if let Some(done) = self.refine(&x, tol) {
            return done;
        }

        let lipschitz = 1.01 * crate::operators::LinOp::new(self.a.clone()).map_or(0.0, |k| k.op_norm_squared());
        if lipschitz == 0.0 {
            // A = 0: only the penalty matters.
            let x = RealVec::from_fn(n, |i, _| if self.weights[i] == 0.0 { x[i] } else { 0.0 });
            return LassoResult { x, iterations: 0 };
        }
        let step = 1.0 / lipschitz;

        let mut best = (kkt0, x.clone());
        let mut y = x.clone();
        let mut t = 1.0_f64;
        let mut next_refine = 10;
        for it in 1..=max_iter {
            let grad = self.a.tr_mul(&(self.a * &y - self.b));
            let z = &y - grad * step;
            let x_new = RealVec::from_fn(n, |i, _| soft_threshold(z[i], step * self.alpha * self.weights[i]));

            // Gradient-based adaptive restart.
            if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
                t = 1.0;
                y = x_new.clone();
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                y = &x_new + (&x_new - &x) * ((t - 1.0) / t_next);
                t = t_next;
            }
            x = x_new;

            if it % 5 == 0 || it == max_iter {
                let kkt = self.kkt_residual(&x);
                if kkt < best.0 {
                    best = (kkt, x.clone());
                }
                if kkt <= tol {
                    return LassoResult {
                        x,
                        iterations: it,
                    };
                }
            }
            if it >= next_refine {
                next_refine = (next_refine + 10).max(next_refine * 3 / 2);
                if let Some(mut done) = self.refine(&x, tol) {
                    done.iterations = it;
                    return done;
                }
            }
        }
        LassoResult {
            x: best.1,
            iterations: max_iter,
        }
    }

    /// Active-set refinement started from the signed support of `start`.
    fn refine(&self, start: &RealVec, tol: f64) -> Option<LassoResult> {
        let n = self.n();
        // Sign 0 marks an unpenalized coordinate, which is always free.
        let mut support: BTreeMap<usize, f64> = (0..n)
            .filter_map(|i| {
                if self.weights[i] == 0.0 {
                    Some((i, 0.0))
                } else if start[i] != 0.0 {
                    Some((i, sign0(start[i])))
                } else {
                    None
                }
            })
            .collect();

        for _ in 0..(4 * n + 20) {
            let cols: Vec<usize> = support.keys().copied().collect();
            let x = self.restricted_solve(&cols, &support)?;

            let wrong: Vec<usize> = support
                .iter()
                .filter(|(i, s)| **s != 0.0 && x[**i] * **s <= 0.0)
                .map(|(i, _)| *i)
                .collect();
            if !wrong.is_empty() {
                for i in wrong {
                    support.remove(&i);
                }
                continue;
            }

            let c = self.correlation(&x);
            let entering = (0..n)
                .filter(|i| !support.contains_key(i))
                .map(|i| (i, c[i].abs() - self.weights[i]))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match entering {
                Some((i, viol)) if viol > 0.5 * tol => {
                    support.insert(i, sign0(c[i]));
                }
                _ => {
                    let kkt = self.kkt_residual(&x);
                    return (kkt <= tol).then_some(LassoResult {
                        x,
                        iterations: 0,
                    });
                }
            }
        }
        None
    }

    /// Solves `AᵀA y = Aᵀb − α (w∘s)` on the listed columns via QR.
    fn restricted_solve(&self, cols: &[usize], signs: &BTreeMap<usize, f64>) -> Option<RealVec> {
        let mut x = RealVec::zeros(self.n());
        if cols.is_empty() {
            return Some(x);
        }
        let sub = self.a.select_columns(cols);
        let (m, k) = sub.shape();
        if k > m {
            return None;
        }
        let qr = sub.qr();
        let r = qr.r();
        let diag_max = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let diag_min = (0..k).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if diag_max == 0.0 || diag_min <= RANK_TOL * diag_max {
            return None;
        }
        let g = RealVec::from_iterator(k, cols.iter().map(|i| self.alpha * self.weights[*i] * signs[i]));
        // RᵀR y = RᵀQᵀb − g  ⇔  R y = Qᵀb − R⁻ᵀg
        let rt_inv_g = r.transpose().solve_lower_triangular(&g)?;
        let rhs = qr.q().tr_mul(self.b) - rt_inv_g;
        let y = r.solve_upper_triangular(&rhs)?;
        for (c, &i) in cols.iter().enumerate() {
            x[i] = y[c];
        }
        Some(x)
    }
}
