//! Binary C-SVM with an RBF kernel, trained by sequential minimal optimization.
//!
//! The dual problem solved is
//!
//! ```text
//! min_a  1/2 a^T Q a - e^T a   s.t.  y^T a = 0,  0 <= a_i <= C
//! Q_ij = y_i y_j exp(-gamma |p_i - p_j|^2)
//! ```
//!
//! Working pairs are chosen with the second-order rule of Fan, Chen and Lin
//! (the LIBSVM default). Kernel rows are computed on demand and kept in a
//! bounded cache.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub type Point2<T> = [T; 2];

#[derive(Debug, Error, PartialEq)]
pub enum SvmError {
    #[error("SMO did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iterations: usize,
    /// Upper bound on cached kernel entries.
    pub cache_entries: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            gamma: 0.01,
            tol: 1e-6,
            max_iterations: 10_000_000,
            cache_entries: 32 << 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel<T> {
    pub support_points: Vec<Point2<T>>,
    /// `alpha_i * y_i` for each support point.
    pub dual_coefficients: Vec<T>,
    pub bias: T,
    pub gamma: T,
    pub c: T,
    pub iterations: usize,
    /// Maximal violating-pair gap `m(a) - M(a)` at termination.
    pub max_violation: T,
}

#[inline]
fn rbf<T: Scalar>(gamma: T, a: &Point2<T>, b: &Point2<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (-gamma * (dx * dx + dy * dy)).exp()
}

impl<T: Scalar> SvmModel<T> {
    /// `f(p) = sum_i alpha_i y_i K(p, p_i) + b`.
    pub fn decision_value(&self, point: &Point2<T>) -> T {
        let mut acc = self.bias;
        for (sp, coef) in self.support_points.iter().zip(&self.dual_coefficients) {
            acc += *coef * rbf(self.gamma, point, sp);
        }
        acc
    }

    pub fn predict(&self, point: &Point2<T>) -> i8 {
        if self.decision_value(point) >= T::zero() {
            1
        } else {
            -1
        }
    }

    /// Dual objective `sum a_i - 1/2 sum_ij a_i a_j y_i y_j K_ij` (to be maximized).
    pub fn dual_objective(&self) -> T {
        let n = self.support_points.len();
        let mut quad = T::zero();
        for i in 0..n {
            for j in 0..n {
                quad += self.dual_coefficients[i]
                    * self.dual_coefficients[j]
                    * rbf(self.gamma, &self.support_points[i], &self.support_points[j]);
            }
        }
        let linear: T = self.dual_coefficients.iter().map(|c| c.abs()).sum();
        linear - quad / T::lit(2.0)
    }
}

/// Kernel rows `Q_i. = y_i y_. K(p_i, p_.)`, cached FIFO.
struct KernelRows<'a, T> {
    points: &'a [Point2<T>],
    labels: &'a [T],
    gamma: T,
    rows: HashMap<usize, Vec<T>>,
    order: VecDeque<usize>,
    max_rows: usize,
}

impl<'a, T: Scalar> KernelRows<'a, T> {
    fn new(points: &'a [Point2<T>], labels: &'a [T], gamma: T, cache_entries: usize) -> Self {
        let max_rows = (cache_entries / points.len().max(1)).max(2);
        Self {
            points,
            labels,
            gamma,
            rows: HashMap::new(),
            order: VecDeque::new(),
            max_rows,
        }
    }

    fn row(&mut self, i: usize) -> &[T] {
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.max_rows {
                if let Some(old) = self.order.pop_front() {
                    self.rows.remove(&old);
                }
            }
            let pi = self.points[i];
            let yi = self.labels[i];
            let row = self
                .points
                .iter()
                .zip(self.labels)
                .map(|(pj, yj)| yi * *yj * rbf(self.gamma, &pi, pj))
                .collect();
            self.rows.insert(i, row);
            self.order.push_back(i);
        }
        &self.rows[&i]
    }
}

/// Trains the SVM. `labels` must be `-1` or `+1`.
pub fn fit_rbf_svm<T: Scalar>(
    points: &[Point2<T>],
    labels: &[i8],
    params: &SvmParams,
) -> Result<SvmModel<T>, SvmError> {
    if points.len() != labels.len() {
        return Err(SvmError::DegenerateInput(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(SvmError::DegenerateInput("labels must be -1 or +1".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos < 2 || neg < 2 {
        return Err(SvmError::DegenerateInput(format!(
            "need at least two points per class (got {pos} positive, {neg} negative)"
        )));
    }
    if !(params.c > 0.0 && params.gamma > 0.0 && params.tol > 0.0) {
        return Err(SvmError::DegenerateInput("c, gamma and tol must be positive".into()));
    }

    let n = points.len();
    let c = T::lit(params.c);
    let gamma = T::lit(params.gamma);
    let tol = T::lit(params.tol);
    let tau = T::lit(1e-12);
    let y: Vec<T> = labels.iter().map(|&v| T::lit(v as f64)).collect();
    let mut alpha = vec![T::zero(); n];
    // gradient of the minimization objective: Q a - e
    let mut grad = vec![-T::one(); n];
    let mut kernel = KernelRows::new(points, &y, gamma, params.cache_entries);
    let two = T::lit(2.0);

    let in_up = |a: T, yi: T| (yi > T::zero() && a < c) || (yi < T::zero() && a > T::zero());
    let in_low = |a: T, yi: T| (yi > T::zero() && a > T::zero()) || (yi < T::zero() && a < c);

    let mut iterations = 0;
    let max_violation = loop {
        // i = argmax_{t in I_up} -y_t g_t
        let mut gmax = T::neg_infinity();
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let mut gmin = T::infinity();
        for t in 0..n {
            if in_low(alpha[t], y[t]) {
                gmin = gmin.min(-y[t] * grad[t]);
            }
        }
        let violation = gmax - gmin;
        let Some(i) = i_sel else { break T::zero() };
        if violation < tol {
            break violation;
        }
        if iterations >= params.max_iterations {
            return Err(SvmError::NotConverged(params.max_iterations));
        }
        iterations += 1;

        // second-order choice of j among I_low with -y_t g_t < gmax
        let qi: Vec<T> = kernel.row(i).to_vec();
        let mut j_sel = None;
        let mut best = T::infinity();
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b > T::zero() {
                // K_ii = K_tt = 1 for the RBF kernel
                let a = two - two * y[i] * y[t] * qi[t];
                let a = if a > T::zero() { a } else { tau };
                let score = -(b * b) / a;
                if score < best {
                    best = score;
                    j_sel = Some(t);
                }
            }
        }
        let Some(j) = j_sel else { break violation };
        let qj: Vec<T> = kernel.row(j).to_vec();

        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        // Two-variable subproblem, following LIBSVM's update with box clipping.
        if y[i] != y[j] {
            let quad = {
                let q = two + two * qi[j];
                if q > T::zero() { q } else { tau }
            };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > T::zero() {
                if alpha[j] < T::zero() {
                    alpha[j] = T::zero();
                    alpha[i] = diff;
                }
            } else if alpha[i] < T::zero() {
                alpha[i] = T::zero();
                alpha[j] = -diff;
            }
            if diff > T::zero() {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = {
                let q = two - two * qi[j];
                if q > T::zero() { q } else { tau }
            };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < T::zero() {
                alpha[j] = T::zero();
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < T::zero() {
                alpha[i] = T::zero();
                alpha[j] = sum;
            }
        }

        let dai = alpha[i] - old_ai;
        let daj = alpha[j] - old_aj;
        for t in 0..n {
            grad[t] += qi[t] * dai + qj[t] * daj;
        }
    };

    // bias from free vectors, or the midpoint of the feasible interval
    let mut free_sum = T::zero();
    let mut free_n = 0usize;
    let mut ub = T::infinity();
    let mut lb = T::neg_infinity();
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > T::zero() && alpha[t] < c {
            free_sum += yg;
            free_n += 1;
        } else if (alpha[t] >= c && y[t] < T::zero()) || (alpha[t] <= T::zero() && y[t] > T::zero()) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free_n > 0 {
        free_sum / T::lit(free_n as f64)
    } else {
        (ub + lb) / two
    };

    let mut support_points = Vec::new();
    let mut dual_coefficients = Vec::new();
    for t in 0..n {
        if alpha[t] > T::zero() {
            support_points.push(points[t]);
            dual_coefficients.push(alpha[t] * y[t]);
        }
    }
    Ok(SvmModel {
        support_points,
        dual_coefficients,
        bias: -rho,
        gamma,
        c,
        iterations,
        max_violation,
    })
}
