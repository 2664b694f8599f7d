//! Regularized cross-entropy minimization with L-BFGS.
//!
//! The objective is the (sample-weighted) mean cross-entropy plus an L2
//! penalty on the weight matrix, `||W||_F^2 / (2 * C * N_eff)`; biases are
//! not penalized. `N_eff` is the number of scored entries (`N * D` for the
//! elementwise sigmoid link, `N` for softmax), which matches fitting each
//! output as an L2-regularized logistic regression with inverse
//! regularization strength `C`.
//!
//! The L-BFGS implementation follows Nocedal & Wright (Numerical
//! Optimization, 2nd ed.): two-loop recursion with history scaling and a
//! strong-Wolfe bracketing line search. Everything is sequential and
//! deterministic for fixed inputs.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::links::sigmoid;

/// Inverse link applied to the affine scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// Independent binary outputs; targets are an `N x D` 0/1 matrix.
    ElementwiseSigmoid,
    /// Mutually exclusive classes; targets are class indices.
    Softmax,
}

/// Training targets for [`minimize_regularized_cross_entropy`].
#[derive(Debug, Clone)]
pub enum Targets {
    /// `N x D` binary indicator matrix (multilabel).
    Binary(Array2<u8>),
    /// Per-sample class index out of `num_classes` (powerset).
    Class {
        classes: Vec<usize>,
        num_classes: usize,
    },
}

impl Targets {
    pub fn num_samples(&self) -> usize {
        match self {
            Targets::Binary(y) => y.nrows(),
            Targets::Class { classes, .. } => classes.len(),
        }
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            Targets::Binary(y) => y.ncols(),
            Targets::Class { num_classes, .. } => *num_classes,
        }
    }
}

/// Options for the fit. Defaults follow the standard logistic-regression
/// setup: C = 1.0, at most 1000 iterations, convergence when the gradient
/// infinity norm drops below 1e-6.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub l2_c: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Starting point `(weights, bias)`; zeros when absent.
    pub init: Option<(Array2<f64>, Array1<f64>)>,
    /// Optional non-negative per-sample weights.
    pub sample_weights: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2_c: 1.0,
            max_iter: 1000,
            grad_tol: 1e-6,
            init: None,
            sample_weights: None,
        }
    }
}

/// Fitted parameters and fit diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// `D x F` weight matrix.
    pub weights: Array2<f64>,
    /// Length-`D` bias vector.
    pub bias: Array1<f64>,
    /// Final penalized objective value.
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct CeProblem<'a> {
    features: &'a Array2<f64>,
    targets: &'a Targets,
    link: Link,
    l2_c: f64,
    sample_weights: Option<&'a [f64]>,
    num_outputs: usize,
    /// Total weight of scored entries; divides both the CE sum and the penalty.
    n_eff: f64,
}

impl<'a> CeProblem<'a> {
    fn new(
        features: &'a Array2<f64>,
        targets: &'a Targets,
        link: Link,
        l2_c: f64,
        sample_weights: Option<&'a [f64]>,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::Contract("empty training set".into()));
        }
        if targets.num_samples() != n {
            return Err(Error::Contract(format!(
                "feature rows ({n}) and target rows ({}) differ",
                targets.num_samples()
            )));
        }
        if !(l2_c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "l2_c must be positive, got {l2_c}"
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("features contain non-finite values".into()));
        }
        match (link, targets) {
            (Link::ElementwiseSigmoid, Targets::Binary(_)) => {}
            (Link::Softmax, Targets::Class { classes, num_classes }) => {
                if let Some(&bad) = classes.iter().find(|&&c| c >= *num_classes) {
                    return Err(Error::Contract(format!(
                        "class index {bad} exceeds num_classes {num_classes}"
                    )));
                }
            }
            _ => {
                return Err(Error::Contract(
                    "link and target types do not match".into(),
                ));
            }
        }
        if let Some(w) = sample_weights {
            if w.len() != n {
                return Err(Error::Contract("sample weight length mismatch".into()));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Contract(
                    "sample weights must be finite and non-negative".into(),
                ));
            }
        }
        let weight_sum = match sample_weights {
            Some(w) => w.iter().sum::<f64>(),
            None => n as f64,
        };
        if weight_sum <= 0.0 {
            return Err(Error::Contract("total sample weight is zero".into()));
        }
        let num_outputs = targets.num_outputs();
        let n_eff = match link {
            Link::ElementwiseSigmoid => weight_sum * num_outputs as f64,
            Link::Softmax => weight_sum,
        };
        Ok(Self {
            features,
            targets,
            link,
            l2_c,
            sample_weights,
            num_outputs,
            n_eff,
        })
    }

    fn num_features(&self) -> usize {
        self.features.ncols()
    }

    fn dims(&self) -> (usize, usize) {
        (self.num_outputs, self.num_features())
    }

    /// Penalized objective and its gradient at `(weights, bias)`.
    fn eval(&self, weights: &Array2<f64>, bias: &Array1<f64>) -> (f64, Array2<f64>, Array1<f64>) {
        let n = self.features.nrows();
        let d = self.num_outputs;
        // N x D affine scores
        let mut scores = self.features.dot(&weights.t());
        for mut row in scores.rows_mut() {
            row += bias;
        }

        let mut ce_sum = 0.0;
        // dL/dscores, already scaled by sample weight
        let mut delta = Array2::<f64>::zeros((n, d));
        match (self.link, self.targets) {
            (Link::ElementwiseSigmoid, Targets::Binary(y)) => {
                for i in 0..n {
                    let w = self.sample_weights.map_or(1.0, |sw| sw[i]);
                    for j in 0..d {
                        let z = scores[[i, j]];
                        let t = f64::from(y[[i, j]]);
                        ce_sum += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
                        delta[[i, j]] = w * (sigmoid(z) - t);
                    }
                }
            }
            (Link::Softmax, Targets::Class { classes, .. }) => {
                for i in 0..n {
                    let w = self.sample_weights.map_or(1.0, |sw| sw[i]);
                    let row = scores.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for &z in row.iter() {
                        sum += (z - max).exp();
                    }
                    let lse = max + sum.ln();
                    ce_sum += w * (lse - row[classes[i]]);
                    for j in 0..d {
                        let p = (row[j] - lse).exp();
                        delta[[i, j]] = w * (p - f64::from(j == classes[i]));
                    }
                }
            }
            _ => unreachable!("validated in CeProblem::new"),
        }

        let pen_scale = 1.0 / (self.l2_c * self.n_eff);
        let penalty = 0.5 * pen_scale * weights.iter().map(|v| v * v).sum::<f64>();
        let loss = ce_sum / self.n_eff + penalty;

        let mut grad_w = delta.t().dot(self.features);
        grad_w.mapv_inplace(|v| v / self.n_eff);
        grad_w += &weights.mapv(|v| v * pen_scale);
        let grad_b = delta.sum_axis(ndarray::Axis(0)).mapv(|v| v / self.n_eff);
        (loss, grad_w, grad_b)
    }
}

/// Unpenalized mean cross-entropy of fixed parameters on a dataset.
pub fn mean_cross_entropy(
    features: &Array2<f64>,
    targets: &Targets,
    link: Link,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    sample_weights: Option<&[f64]>,
) -> Result<f64> {
    let problem = CeProblem::new(features, targets, link, 1.0, sample_weights)?;
    let n = features.nrows();
    let mut scores = features.dot(&weights.t());
    for mut row in scores.rows_mut() {
        row += bias;
    }
    let mut ce_sum = 0.0;
    match (link, targets) {
        (Link::ElementwiseSigmoid, Targets::Binary(y)) => {
            for i in 0..n {
                let w = sample_weights.map_or(1.0, |sw| sw[i]);
                for j in 0..problem.num_outputs {
                    let z = scores[[i, j]];
                    let t = f64::from(y[[i, j]]);
                    ce_sum += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
                }
            }
        }
        (Link::Softmax, Targets::Class { classes, .. }) => {
            for i in 0..n {
                let w = sample_weights.map_or(1.0, |sw| sw[i]);
                let row = scores.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                ce_sum += w * (max + sum.ln() - row[classes[i]]);
            }
        }
        _ => unreachable!(),
    }
    Ok(ce_sum / problem.n_eff)
}

/// Penalized objective and gradient at an arbitrary point; used by the
/// finite-difference checks.
pub fn objective_with_grad(
    features: &Array2<f64>,
    targets: &Targets,
    link: Link,
    l2_c: f64,
    sample_weights: Option<&[f64]>,
    weights: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let problem = CeProblem::new(features, targets, link, l2_c, sample_weights)?;
    let (d, f) = problem.dims();
    if weights.dim() != (d, f) || bias.len() != d {
        return Err(Error::Contract("parameter shape mismatch".into()));
    }
    Ok(problem.eval(weights, bias))
}

/// Fits `link(W x + b)` to the targets by minimizing the regularized
/// cross-entropy with L-BFGS and analytic gradients. Deterministic for
/// fixed inputs; starts from zeros unless `opts.init` is given.
pub fn minimize_regularized_cross_entropy(
    features: &Array2<f64>,
    targets: &Targets,
    link: Link,
    opts: &FitOptions,
) -> Result<FitResult> {
    if opts.max_iter < 1 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    let problem = CeProblem::new(
        features,
        targets,
        link,
        opts.l2_c,
        opts.sample_weights.as_deref(),
    )?;
    let (d, f) = problem.dims();
    let dim = d * f + d;

    let mut x = vec![0.0f64; dim];
    if let Some((w0, b0)) = &opts.init {
        if w0.dim() != (d, f) || b0.len() != d {
            return Err(Error::Contract(format!(
                "init shape mismatch: expected {d}x{f} weights and {d} biases"
            )));
        }
        x[..d * f].copy_from_slice(w0.as_slice().expect("contiguous"));
        x[d * f..].copy_from_slice(b0.as_slice().expect("contiguous"));
    }

    let unpack = |x: &[f64]| -> (Array2<f64>, Array1<f64>) {
        let w = Array2::from_shape_vec((d, f), x[..d * f].to_vec()).expect("shape");
        let b = Array1::from_vec(x[d * f..].to_vec());
        (w, b)
    };

    let mut evals = 0usize;
    let mut eval = |x: &[f64], iter: usize| -> Result<(f64, Vec<f64>)> {
        evals += 1;
        let (w, b) = unpack(x);
        let (loss, gw, gb) = problem.eval(&w, &b);
        if !loss.is_finite() {
            return Err(Error::Optimization {
                iteration: iter,
                message: format!("non-finite loss {loss}"),
            });
        }
        let mut g: Vec<f64> = Vec::with_capacity(dim);
        g.extend(gw.iter().copied());
        g.extend(gb.iter().copied());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Optimization {
                iteration: iter,
                message: "non-finite gradient".into(),
            });
        }
        Ok((loss, g))
    };

    let memory = 10usize;
    let c1 = 1e-4;
    let c2 = 0.9;
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new(); // (s, y, rho)

    let (mut fx, mut gx) = eval(&x, 0)?;
    let inf_norm = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut iterations = 0usize;

    while iterations < opts.max_iter {
        if inf_norm(&gx) < opts.grad_tol {
            break;
        }

        // Two-loop recursion for the search direction.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dg = dot(&dir, &gx);
        if dg >= 0.0 {
            // not a descent direction; fall back to steepest descent
            history.clear();
            dir = gx.iter().map(|v| -v).collect();
            dg = dot(&dir, &gx);
        }

        // Strong-Wolfe line search (bracket + bisection zoom).
        let phi0 = fx;
        let dphi0 = dg;
        let mut alpha_prev = 0.0f64;
        let mut phi_prev = phi0;
        let mut alpha = 1.0f64;
        let alpha_max = 1e6;
        let trial = |a: f64, x: &[f64], dir: &[f64]| -> Vec<f64> {
            x.iter().zip(dir).map(|(xi, di)| xi + a * di).collect()
        };
        let mut accepted: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None; // (alpha, f, x, g)
        let mut bracket: Option<(f64, f64, f64)> = None; // (lo, f_lo, hi)

        for ls_iter in 0..25 {
            let xt = trial(alpha, &x, &dir);
            let (ft, gt) = eval(&xt, iterations)?;
            let dphit = dot(&gt, &dir);
            if ft > phi0 + c1 * alpha * dphi0 || (ls_iter > 0 && ft >= phi_prev) {
                bracket = Some((alpha_prev, phi_prev, alpha));
                break;
            }
            if dphit.abs() <= -c2 * dphi0 {
                accepted = Some((alpha, ft, xt, gt));
                break;
            }
            if dphit >= 0.0 {
                bracket = Some((alpha, ft, alpha_prev));
                break;
            }
            alpha_prev = alpha;
            phi_prev = ft;
            alpha = (alpha * 2.0).min(alpha_max);
            if alpha >= alpha_max {
                accepted = Some((alpha, ft, xt, gt));
                break;
            }
        }

        if accepted.is_none() {
            if let Some((mut lo, mut f_lo, mut hi)) = bracket {
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    let xt = trial(mid, &x, &dir);
                    let (ft, gt) = eval(&xt, iterations)?;
                    let dphit = dot(&gt, &dir);
                    if ft > phi0 + c1 * mid * dphi0 || ft >= f_lo {
                        hi = mid;
                    } else {
                        if dphit.abs() <= -c2 * dphi0 {
                            accepted = Some((mid, ft, xt, gt));
                            break;
                        }
                        if dphit * (hi - lo) >= 0.0 {
                            hi = lo;
                        }
                        lo = mid;
                        f_lo = ft;
                    }
                    if (hi - lo).abs() < 1e-16 * lo.abs().max(1.0) {
                        if ft <= phi0 + c1 * mid * dphi0 {
                            accepted = Some((mid, ft, xt, gt));
                        }
                        break;
                    }
                }
                if accepted.is_none() && f_lo < phi0 && lo > 0.0 {
                    let xt = trial(lo, &x, &dir);
                    let (ft, gt) = eval(&xt, iterations)?;
                    accepted = Some((lo, ft, xt, gt));
                }
            }
        }

        let Some((step, fnew, xnew, gnew)) = accepted else {
            break; // no further progress possible
        };
        if !(fnew < fx) && step > 0.0 {
            break;
        }

        let s: Vec<f64> = xnew.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gnew.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-10 * norm2(&s) * norm2(&yv) {
            if history.len() == memory {
                history.remove(0);
            }
            let rho = 1.0 / sy;
            history.push((s, yv, rho));
        }

        let f_change = (fx - fnew).abs();
        x = xnew;
        fx = fnew;
        gx = gnew;
        iterations += 1;

        if f_change <= 1e-15 * fx.abs().max(1.0) {
            break;
        }
    }

    let converged = inf_norm(&gx) < opts.grad_tol;
    let (weights, bias) = unpack(&x);
    Ok(FitResult {
        weights,
        bias,
        final_loss: fx,
        iterations,
        converged,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::links::logit;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn fd_check(link: Link, seed: u64) -> f64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = 20;
        let f = 3;
        let d = match link {
            Link::ElementwiseSigmoid => 2,
            Link::Softmax => 3,
        };
        let features = Array2::from_shape_fn((n, f), |_| rng.gen_range(-2.0..2.0));
        let targets = match link {
            Link::ElementwiseSigmoid => {
                Targets::Binary(Array2::from_shape_fn((n, d), |_| rng.gen_range(0..2u8)))
            }
            Link::Softmax => Targets::Class {
                classes: (0..n).map(|_| rng.gen_range(0..d)).collect(),
                num_classes: d,
            },
        };
        let w = Array2::from_shape_fn((d, f), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let (_, gw, gb) =
            objective_with_grad(&features, &targets, link, 1.0, None, &w, &b).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        let mut check = |analytic: f64, perturb: &dyn Fn(f64) -> (Array2<f64>, Array1<f64>)| {
            let (wp, bp) = perturb(h);
            let (wm, bm) = perturb(-h);
            let (fp, _, _) =
                objective_with_grad(&features, &targets, link, 1.0, None, &wp, &bp).unwrap();
            let (fm, _, _) =
                objective_with_grad(&features, &targets, link, 1.0, None, &wm, &bm).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        };
        for i in 0..d {
            for j in 0..f {
                check(gw[[i, j]], &|eps| {
                    let mut wp = w.clone();
                    wp[[i, j]] += eps;
                    (wp, b.clone())
                });
            }
            check(gb[i], &|eps| {
                let mut bp = b.clone();
                bp[i] += eps;
                (w.clone(), bp)
            });
        }
        max_rel
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        for seed in 0..5 {
            assert!(fd_check(Link::ElementwiseSigmoid, seed) < 1e-5);
            assert!(fd_check(Link::Softmax, 100 + seed) < 1e-5);
        }
    }

    #[test]
    fn intercept_only_fit_matches_closed_form() {
        // one all-zero feature: the optimum bias is the log-odds of the
        // empirical rate and the weight stays at zero
        let n = 1000;
        let features = Array2::zeros((n, 1));
        let mut y = Array2::<u8>::zeros((n, 1));
        for i in 0..300 {
            y[[i, 0]] = 1;
        }
        let targets = Targets::Binary(y);
        let fit = minimize_regularized_cross_entropy(
            &features,
            &targets,
            Link::ElementwiseSigmoid,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert!((fit.bias[0] - logit(0.3, 1e-12)).abs() < 1e-3);
        assert!(fit.weights[[0, 0]].abs() < 1e-6);
    }

    /// Independent oracle: damped Newton iteration for plain binary logistic
    /// regression on one feature plus intercept.
    fn newton_binary(x: &[f64], y: &[u8], l2: f64) -> (f64, f64) {
        let n = x.len() as f64;
        let (mut w, mut b) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (xi, yi) in x.iter().zip(y) {
                let p = sigmoid(w * xi + b);
                let r = p - f64::from(*yi);
                gw += r * xi;
                gb += r;
                let v = p * (1.0 - p);
                hww += v * xi * xi;
                hwb += v * xi;
                hbb += v;
            }
            gw = gw / n + w * l2;
            gb /= n;
            hww = hww / n + l2;
            hwb /= n;
            hbb /= n;
            let det = hww * hbb - hwb * hwb;
            let dw = (hbb * gw - hwb * gb) / det;
            let db = (hww * gb - hwb * gw) / det;
            w -= dw;
            b -= db;
            if gw.abs().max(gb.abs()) < 1e-12 {
                break;
            }
        }
        (w, b)
    }

    #[test]
    fn softmax_with_two_classes_reduces_to_binary_logistic() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 400;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<u8> = x
            .iter()
            .map(|&xi| u8::from(rng.gen::<f64>() < sigmoid(1.5 * xi - 0.4)))
            .collect();

        let features = Array2::from_shape_vec((n, 1), x.clone()).unwrap();
        let targets = Targets::Class {
            classes: y.iter().map(|&v| v as usize).collect(),
            num_classes: 2,
        };
        let opts = FitOptions {
            grad_tol: 1e-10,
            ..Default::default()
        };
        let fit =
            minimize_regularized_cross_entropy(&features, &targets, Link::Softmax, &opts).unwrap();

        // At the optimum the softmax weights satisfy w0 = -w1, so the penalty
        // (w0^2+w1^2)/(2N) equals delta^2/(4N) for delta = w1-w0, matching a
        // binary fit with penalty coefficient 1/(2N).
        let (w_ref, b_ref) = newton_binary(&x, &y, 1.0 / (2.0 * n as f64));
        for &xi in x.iter().take(50) {
            let z1 = fit.weights[[1, 0]] * xi + fit.bias[1];
            let z0 = fit.weights[[0, 0]] * xi + fit.bias[0];
            let p_softmax = sigmoid(z1 - z0);
            let p_binary = sigmoid(w_ref * xi + b_ref);
            assert!(
                (p_softmax - p_binary).abs() < 1e-6,
                "x={xi} softmax={p_softmax} binary={p_binary}"
            );
        }
    }

    #[test]
    fn objective_is_start_independent() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 200;
        let features = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let targets = Targets::Binary(Array2::from_shape_fn((n, 2), |_| rng.gen_range(0..2u8)));
        let opts_a = FitOptions {
            grad_tol: 1e-9,
            ..Default::default()
        };
        let fit_a = minimize_regularized_cross_entropy(
            &features,
            &targets,
            Link::ElementwiseSigmoid,
            &opts_a,
        )
        .unwrap();
        let opts_b = FitOptions {
            grad_tol: 1e-9,
            init: Some((Array2::from_elem((2, 2), 2.5), Array1::from_elem(2, -1.0))),
            ..Default::default()
        };
        let fit_b = minimize_regularized_cross_entropy(
            &features,
            &targets,
            Link::ElementwiseSigmoid,
            &opts_b,
        )
        .unwrap();
        assert!((fit_a.final_loss - fit_b.final_loss).abs() < 1e-8);
    }

    #[test]
    fn single_class_targets_do_not_fail() {
        let features = Array2::from_elem((50, 1), 0.7);
        let targets = Targets::Binary(Array2::from_elem((50, 1), 1u8));
        let fit = minimize_regularized_cross_entropy(
            &features,
            &targets,
            Link::ElementwiseSigmoid,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(fit.final_loss.is_finite());
        // all-positive targets push the probabilities toward 1
        assert!(sigmoid(fit.weights[[0, 0]] * 0.7 + fit.bias[0]) > 0.99);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let features = Array2::<f64>::zeros((10, 1));
        let targets = Targets::Binary(Array2::<u8>::zeros((9, 1)));
        assert!(minimize_regularized_cross_entropy(
            &features,
            &targets,
            Link::ElementwiseSigmoid,
            &FitOptions::default()
        )
        .is_err());
        let targets = Targets::Class {
            classes: vec![0; 10],
            num_classes: 2,
        };
        assert!(minimize_regularized_cross_entropy(
            &features,
            &targets,
            Link::ElementwiseSigmoid,
            &FitOptions::default()
        )
        .is_err());
    }
}
