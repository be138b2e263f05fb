//! Derivatives of the clustering solution `C*(W)` with respect to the weights.
//!
//! Three backends:
//! - unrolled: reverse sweep through every recorded iteration of the forward solve;
//! - implicit: `(I - dF/dC)^{-1} dF/dW` at the fixed point, the inverse found by an
//!   averaged fixed-point iteration with step halving on divergence;
//! - jfb: the zeroth-order Neumann truncation, `dF/dW` alone.
//!
//! Codebooks are flattened row-major (`j*d + r`) and weights sub-vector-major
//! (`i*d + r`, identical to the layer's flat order), so every Jacobian here is
//! `(k*d) x (m*d)` or `(k*d) x (k*d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{eval_map, solve_fixed_point, FixedPointResult, MapEval};
use crate::matrix::Matrix;
use crate::pq::{attention_backward, Codebook, WeightMatrix};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Unrolled,
    Implicit,
    Jfb,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::Unrolled, BackendKind::Implicit, BackendKind::Jfb];

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Unrolled => "unrolled",
            BackendKind::Implicit => "implicit",
            BackendKind::Jfb => "jfb",
        }
    }

    /// Whether the forward solve must keep every iterate.
    pub fn needs_trace(self) -> bool {
        self == BackendKind::Unrolled
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unrolled" => Ok(BackendKind::Unrolled),
            "implicit" => Ok(BackendKind::Implicit),
            "jfb" => Ok(BackendKind::Jfb),
            other => Err(Error::param(format!("unknown backend '{other}'"))),
        }
    }
}

/// Gradient backend and the settings of the adjoint iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradBackend {
    pub kind: BackendKind,
    /// Initial averaging weight, in (0, 1].
    pub alpha0: f64,
    pub max_adjoint_iters: usize,
    pub max_restarts: usize,
    pub adjoint_eps: f64,
}

impl Default for GradBackend {
    fn default() -> Self {
        Self {
            kind: BackendKind::Implicit,
            alpha0: 0.25,
            max_adjoint_iters: 500,
            max_restarts: 5,
            adjoint_eps: 1e-8,
        }
    }
}

impl GradBackend {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(Error::param(format!("alpha0 must lie in (0, 1], got {}", self.alpha0)));
        }
        if !(self.adjoint_eps > 0.0) {
            return Err(Error::param("adjoint_eps must be positive"));
        }
        if self.max_adjoint_iters == 0 {
            return Err(Error::param("max_adjoint_iters must be >= 1"));
        }
        Ok(())
    }
}

/// `dF/dC` and `dF/dW` at one point.
#[derive(Debug, Clone)]
pub struct ClusterJacobians<T> {
    /// `(k*d) x (k*d)`.
    pub j_c: Matrix<T>,
    /// `(k*d) x (m*d)`.
    pub j_w: Matrix<T>,
}

/// One evaluation of `F` with everything needed for reverse-mode products.
pub struct MapLinearization<'a, T> {
    w: &'a WeightMatrix<T>,
    c: Codebook<T>,
    eval: MapEval<T>,
}

impl<'a, T: Real> MapLinearization<'a, T> {
    pub fn new(w: &'a WeightMatrix<T>, c: &Codebook<T>, tau: T) -> Result<Self> {
        let eval = eval_map(w, c, tau)?;
        Ok(Self {
            w,
            c: c.clone(),
            eval,
        })
    }

    /// `F(C, W)`.
    pub fn output(&self) -> &Codebook<T> {
        &self.eval.out
    }

    pub fn kd(&self) -> usize {
        self.c.k() * self.c.dim()
    }

    pub fn md(&self) -> usize {
        self.w.count() * self.w.dim()
    }

    /// Returns `(g^T dF/dC, g^T dF/dW)` for a flattened upstream `g` of length `k*d`.
    pub fn vjp(&self, upstream: &[T]) -> (Vec<T>, Vec<T>) {
        let w = self.w;
        let (m, k, d) = (w.count(), self.c.k(), w.dim());
        debug_assert_eq!(upstream.len(), k * d);
        let ev = &self.eval;
        let mut grad_c = vec![T::zero(); k * d];
        let mut grad_w = vec![T::zero(); m * d];
        let mut grad_att = Matrix::zeros(m, k);

        // per-cluster scaled upstream G_j / s_j and G_j . F_j / s_j
        let mut scaled = vec![T::zero(); k * d];
        let mut offset = vec![T::zero(); k];
        for j in 0..k {
            let g = &upstream[j * d..(j + 1) * d];
            if ev.degenerate[j] {
                for r in 0..d {
                    grad_c[j * d + r] += g[r];
                }
                continue;
            }
            let inv = T::one() / ev.sums[j];
            let fj = ev.out.row(j);
            let mut dot = T::zero();
            for r in 0..d {
                scaled[j * d + r] = g[r] * inv;
                dot += g[r] * fj[r];
            }
            offset[j] = dot * inv;
        }
        for i in 0..m {
            let wi = w.column(i);
            let a_row = ev.att.data.row(i);
            for j in 0..k {
                if ev.degenerate[j] {
                    continue;
                }
                let sj = &scaled[j * d..(j + 1) * d];
                let mut dot = T::zero();
                for r in 0..d {
                    dot += sj[r] * wi[r];
                    grad_w[i * d + r] += a_row[j] * sj[r];
                }
                grad_att[(i, j)] = dot - offset[j];
            }
        }
        attention_backward(w, &self.c, &ev.dist, &ev.att, &grad_att, &mut grad_w, &mut grad_c);
        (grad_c, grad_w)
    }

    pub fn jacobians(&self) -> Result<ClusterJacobians<T>> {
        let (kd, md) = (self.kd(), self.md());
        let mut j_c = Matrix::zeros(kd, kd);
        let mut j_w = Matrix::zeros(kd, md);
        let mut e = vec![T::zero(); kd];
        for r in 0..kd {
            e[r] = T::one();
            let (gc, gw) = self.vjp(&e);
            e[r] = T::zero();
            j_c.row_mut(r).copy_from_slice(&gc);
            j_w.row_mut(r).copy_from_slice(&gw);
        }
        if !j_c.is_finite() || !j_w.is_finite() {
            return Err(Error::numerics("non-finite Jacobian of the fixed-point map"));
        }
        Ok(ClusterJacobians { j_c, j_w })
    }

    /// `dF/dW` only.
    pub fn weight_jacobian(&self) -> Result<Matrix<T>> {
        let (kd, md) = (self.kd(), self.md());
        let mut j_w = Matrix::zeros(kd, md);
        let mut e = vec![T::zero(); kd];
        for r in 0..kd {
            e[r] = T::one();
            let (_, gw) = self.vjp(&e);
            e[r] = T::zero();
            j_w.row_mut(r).copy_from_slice(&gw);
        }
        if !j_w.is_finite() {
            return Err(Error::numerics("non-finite Jacobian of the fixed-point map"));
        }
        Ok(j_w)
    }
}

/// Both partial Jacobians of `F` at `(C*, W)`.
pub fn jacobians_of_f<T: Real>(w: &WeightMatrix<T>, c_star: &Codebook<T>, tau: T) -> Result<ClusterJacobians<T>> {
    MapLinearization::new(w, c_star, tau)?.jacobians()
}

/// Outcome of the averaged adjoint iteration.
#[derive(Debug, Clone)]
pub struct NeumannSolution<T> {
    pub inverse: Matrix<T>,
    pub iterations: usize,
    pub restarts: usize,
    pub residual: T,
    pub alpha: T,
}

const DIVERGENCE_STREAK: usize = 10;
const DIVERGENCE_CEILING: f64 = 1e8;

enum Attempt<X> {
    Converged(X, usize, f64),
    Diverged(f64),
    /// Iteration cap reached while still contracting; a smaller step would not help.
    Stalled(f64),
}

/// Runs `x <- x + alpha (G(x) - x)` from `x0` with restarts at half the step.
///
/// `step` returns `G(x) - x`. Divergence means ten consecutive residual
/// increases, a residual above 1e8, or a non-finite residual. Running out of
/// iterations without diverging fails immediately.
fn averaged_iteration<X: Clone, T: Real>(
    x0: &X,
    backend: &GradBackend,
    mut step: impl FnMut(&X) -> (X, f64),
    mut axpy: impl FnMut(&mut X, &X, T),
) -> Result<(X, usize, usize, f64, f64)> {
    backend.validate()?;
    let mut alpha = backend.alpha0;
    let mut restarts = 0;
    loop {
        let attempt = (|| {
            let mut x = x0.clone();
            let mut prev = f64::INFINITY;
            let mut streak = 0;
            for it in 0..backend.max_adjoint_iters {
                let (delta, res) = step(&x);
                if res < backend.adjoint_eps {
                    return Attempt::Converged(x, it, res);
                }
                if !res.is_finite() || res > DIVERGENCE_CEILING {
                    return Attempt::Diverged(res);
                }
                streak = if res > prev { streak + 1 } else { 0 };
                if streak >= DIVERGENCE_STREAK {
                    return Attempt::Diverged(res);
                }
                prev = res;
                axpy(&mut x, &delta, T::lit(alpha));
            }
            Attempt::Stalled(prev)
        })();
        match attempt {
            Attempt::Converged(x, it, res) => return Ok((x, it, restarts, res, alpha)),
            Attempt::Stalled(res) => {
                return Err(Error::AdjointDivergence {
                    restarts,
                    residual: res,
                    alpha,
                })
            }
            Attempt::Diverged(res) => {
                if restarts >= backend.max_restarts {
                    return Err(Error::AdjointDivergence {
                        restarts,
                        residual: res,
                        alpha,
                    });
                }
                restarts += 1;
                alpha *= 0.5;
                log::debug!("adjoint iteration diverged (residual {res:e}); restarting with alpha {alpha}");
            }
        }
    }
}

/// Solves `M = j_c M + I` by averaged iteration, i.e. `M = (I - j_c)^{-1}`.
pub fn neumann_inverse_report<T: Real>(j_c: &Matrix<T>, backend: &GradBackend) -> Result<NeumannSolution<T>> {
    let n = j_c.rows();
    if j_c.cols() != n {
        return Err(Error::shape("j_c must be square"));
    }
    if !j_c.is_finite() {
        return Err(Error::numerics("non-finite j_c"));
    }
    let eye = Matrix::<T>::identity(n);
    let (inverse, iterations, restarts, residual, alpha) = averaged_iteration(
        &eye,
        backend,
        |m: &Matrix<T>| {
            // G(M) - M = j_c M + I - M
            let mut delta = j_c.matmul(m);
            for (dv, (&mv, &iv)) in delta.as_mut_slice().iter_mut().zip(m.as_slice().iter().zip(eye.as_slice())) {
                *dv += iv - mv;
            }
            let res = delta.frobenius().as_f64();
            (delta, res)
        },
        |m: &mut Matrix<T>, delta: &Matrix<T>, a: T| {
            for (mv, &dv) in m.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *mv += a * dv;
            }
        },
    )?;
    Ok(NeumannSolution {
        inverse,
        iterations,
        restarts,
        residual: T::lit(residual),
        alpha: T::lit(alpha),
    })
}

pub fn neumann_inverse<T: Real>(j_c: &Matrix<T>, backend: &GradBackend) -> Result<Matrix<T>> {
    neumann_inverse_report(j_c, backend).map(|s| s.inverse)
}

/// `dC*/dW = (I - dF/dC)^{-1} dF/dW` at a fixed point.
pub fn implicit_dc_dw<T: Real>(
    w: &WeightMatrix<T>,
    c_star: &Codebook<T>,
    tau: T,
    backend: &GradBackend,
) -> Result<Matrix<T>> {
    let jac = jacobians_of_f(w, c_star, tau)?;
    let m_star = neumann_inverse(&jac.j_c, backend)?;
    Ok(m_star.matmul(&jac.j_w))
}

/// Jacobian-free approximation `dC*/dW ~ dF/dW`.
pub fn jfb_dc_dw<T: Real>(w: &WeightMatrix<T>, c_star: &Codebook<T>, tau: T) -> Result<Matrix<T>> {
    MapLinearization::new(w, c_star, tau)?.weight_jacobian()
}

/// Exact derivative of the final codebook of a recorded solve, by reverse sweep.
///
/// The starting codebook is treated as a constant.
pub fn unrolled_from_trace<T: Real>(w: &WeightMatrix<T>, result: &FixedPointResult<T>, tau: T) -> Result<Matrix<T>> {
    let trace = result
        .trace
        .as_ref()
        .ok_or_else(|| Error::param("unrolled differentiation needs a recorded trace"))?;
    let kd = result.codebook.k() * result.codebook.dim();
    let md = w.count() * w.dim();
    // adjoint[r] = d C_T[r] / d C_t, swept backwards
    let mut adjoint = Matrix::<T>::identity(kd);
    let mut out = Matrix::zeros(kd, md);
    for c_t in trace.iter().rev() {
        let lin = MapLinearization::new(w, c_t, tau)?;
        let mut next = Matrix::zeros(kd, kd);
        for r in 0..kd {
            let (gc, gw) = lin.vjp(adjoint.row(r));
            for (o, g) in out.row_mut(r).iter_mut().zip(gw) {
                *o += g;
            }
            next.row_mut(r).copy_from_slice(&gc);
        }
        adjoint = next;
    }
    if !out.is_finite() {
        return Err(Error::numerics("non-finite unrolled derivative"));
    }
    Ok(out)
}

/// Runs a recorded forward solve from `c0` and differentiates through every iteration.
pub fn unrolled_dc_dw<T: Real>(
    w: &WeightMatrix<T>,
    c0: &Codebook<T>,
    tau: T,
    eps: T,
    max_iters: usize,
) -> Result<Matrix<T>> {
    let result = solve_fixed_point(w, c0, tau, eps, max_iters, true)?;
    unrolled_from_trace(w, &result, tau)
}

/// `upstream^T dC*/dW` without materialising the inverse.
///
/// Solves `v = upstream + v^T dF/dC` by the same averaged iteration and
/// returns `v^T dF/dW`. The jfb backend skips the solve (`v = upstream`);
/// the other kinds use the adjoint solve.
pub fn vjp_dc_dw<T: Real>(
    upstream: &[T],
    w: &WeightMatrix<T>,
    c_star: &Codebook<T>,
    tau: T,
    backend: &GradBackend,
) -> Result<Vec<T>> {
    let lin = MapLinearization::new(w, c_star, tau)?;
    if upstream.len() != lin.kd() {
        return Err(Error::shape(format!(
            "upstream has length {}, expected k*d = {}",
            upstream.len(),
            lin.kd()
        )));
    }
    if upstream.iter().all(|&x| x == T::zero()) {
        return Ok(vec![T::zero(); lin.md()]);
    }
    let v = match backend.kind {
        BackendKind::Jfb => upstream.to_vec(),
        BackendKind::Implicit | BackendKind::Unrolled => {
            let start = upstream.to_vec();
            let (v, ..) = averaged_iteration(
                &start,
                backend,
                |v: &Vec<T>| {
                    let (gc, _) = lin.vjp(v);
                    let delta: Vec<T> = gc
                        .iter()
                        .zip(upstream)
                        .zip(v)
                        .map(|((&g, &u), &x)| u + g - x)
                        .collect();
                    let res = crate::matrix::frobenius(&delta).as_f64();
                    (delta, res)
                },
                |v: &mut Vec<T>, delta: &Vec<T>, a: T| {
                    for (x, &dv) in v.iter_mut().zip(delta) {
                        *x += a * dv;
                    }
                },
            )?;
            v
        }
    };
    let (_, gw) = lin.vjp(&v);
    Ok(gw)
}
