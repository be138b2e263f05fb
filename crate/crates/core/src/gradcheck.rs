//! Self-contained gradient checks on seeded instances.
//!
//! Compares the implicit derivative against the unrolled one, both against
//! central differences, and the averaged Neumann iteration against a direct
//! inverse by Gaussian elimination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grad::{
    jacobians_of_f, jfb_dc_dw, neumann_inverse, unrolled_from_trace, BackendKind, GradBackend,
};
use crate::kmeans::{fixed_point_map, init_codebook, solve_fixed_point, InitStrategy};
use crate::matrix::{frobenius, Matrix};
use crate::pq::{Codebook, WeightMatrix};
use crate::report::text_table;

pub const TOL_IMPLICIT_VS_UNROLLED: f64 = 1e-4;
pub const TOL_SOLUTION_FD: f64 = 1e-3;
pub const TOL_MAP_FD: f64 = 1e-5;
pub const TOL_NEUMANN_LU: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOptions {
    pub seeds: usize,
    pub first_seed: u64,
    /// Replace `M*` by the identity in the implicit derivative.
    pub inject_bug: bool,
    pub adjoint: GradBackend,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            inject_bug: false,
            adjoint: GradBackend {
                max_adjoint_iters: 50_000,
                adjoint_eps: 1e-12,
                ..GradBackend::new(BackendKind::Implicit)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .checks
            .iter()
            .map(|c| {
                vec![
                    c.name.clone(),
                    c.instances.to_string(),
                    format!("{:.3e}", c.max_error),
                    format!("{:.0e}", c.tolerance),
                    if c.passed { "PASS" } else { "FAIL" }.to_string(),
                ]
            })
            .collect();
        text_table(&["check", "instances", "max_rel_err", "tol", "result"], &rows)
    }
}

pub struct CheckInstance {
    pub w: WeightMatrix<f64>,
    pub c0: Codebook<f64>,
    pub tau: f64,
}

/// Points scattered around `k` random centers, `tau` at 5% of the median pairwise distance.
pub fn check_instance(seed: u64) -> Result<CheckInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(7));
    let k = [2usize, 4, 8][rng.random_range(0..3)];
    let d = rng.random_range(1..=2usize);
    let m = rng.random_range(k.max(8)..=48);
    let centers: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data: Vec<f64> = (0..m * d)
        .map(|i| centers[(i / d % k) * d + i % d] + 0.2 * (rng.random::<f64>() - 0.5))
        .collect();
    let w = WeightMatrix::from_subvectors(data, d)?;
    let mut dists = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let diff: Vec<f64> = w.column(i).iter().zip(w.column(j)).map(|(a, b)| a - b).collect();
            dists.push(frobenius(&diff));
        }
    }
    dists.sort_by(f64::total_cmp);
    let tau = 0.05 * dists[dists.len() / 2];
    let c0 = init_codebook(&w, k, &InitStrategy::kmeans_pp(seed))?;
    Ok(CheckInstance { w, c0, tau })
}

fn rel_err(a: &[f64], b: &[f64], scale: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    frobenius(&diff) / scale.max(f64::MIN_POSITIVE)
}

fn nudge_w(w: &WeightMatrix<f64>, idx: usize, h: f64) -> Result<WeightMatrix<f64>> {
    let mut flat = w.as_padded_slice().to_vec();
    flat[idx] += h;
    WeightMatrix::from_subvectors(flat, w.dim())
}

fn nudge_c(c: &Codebook<f64>, idx: usize, h: f64) -> Result<Codebook<f64>> {
    let mut flat = c.as_slice().to_vec();
    flat[idx] += h;
    Codebook::new(flat, c.k(), c.dim())
}

/// Central differences of `F` at `(c, w)` as `(dF/dC, dF/dW)`.
pub fn fd_map(w: &WeightMatrix<f64>, c: &Codebook<f64>, tau: f64, h: f64) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let kd = c.k() * c.dim();
    let md = w.count() * w.dim();
    let mut jc = Matrix::zeros(kd, kd);
    for col in 0..kd {
        let p = fixed_point_map(w, &nudge_c(c, col, h)?, tau)?;
        let q = fixed_point_map(w, &nudge_c(c, col, -h)?, tau)?;
        for r in 0..kd {
            jc[(r, col)] = (p.as_slice()[r] - q.as_slice()[r]) / (2.0 * h);
        }
    }
    let mut jw = Matrix::zeros(kd, md);
    for col in 0..md {
        let p = fixed_point_map(&nudge_w(w, col, h)?, c, tau)?;
        let q = fixed_point_map(&nudge_w(w, col, -h)?, c, tau)?;
        for r in 0..kd {
            jw[(r, col)] = (p.as_slice()[r] - q.as_slice()[r]) / (2.0 * h);
        }
    }
    Ok((jc, jw))
}

/// Central differences of the converged solution, perturbed solves warm-started at `c_star`.
pub fn fd_solution(w: &WeightMatrix<f64>, c_star: &Codebook<f64>, tau: f64, h: f64) -> Result<Matrix<f64>> {
    let kd = c_star.k() * c_star.dim();
    let md = w.count() * w.dim();
    let mut out = Matrix::zeros(kd, md);
    for col in 0..md {
        let p = solve_fixed_point(&nudge_w(w, col, h)?, c_star, tau, 1e-13, 100_000, false)?;
        let q = solve_fixed_point(&nudge_w(w, col, -h)?, c_star, tau, 1e-13, 100_000, false)?;
        for r in 0..kd {
            out[(r, col)] = (p.codebook.as_slice()[r] - q.codebook.as_slice()[r]) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn direct_inverse(a: &Matrix<f64>) -> Result<Matrix<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("inverse of a non-square matrix"));
    }
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        if m[(pivot, col)].abs() < 1e-300 {
            return Err(Error::numerics("singular matrix"));
        }
        for c in 0..n {
            let (x, y) = (m[(col, c)], m[(pivot, c)]);
            m[(col, c)] = y;
            m[(pivot, c)] = x;
            let (x, y) = (inv[(col, c)], inv[(pivot, c)]);
            inv[(col, c)] = y;
            inv[(pivot, c)] = x;
        }
        let p = m[(col, col)];
        for c in 0..n {
            m[(col, c)] /= p;
            inv[(col, c)] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[(r, col)];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m[(r, c)] -= f * m[(col, c)];
                inv[(r, c)] -= f * inv[(col, c)];
            }
        }
    }
    Ok(inv)
}

/// Random matrix scaled so its infinity norm, and hence its spectral radius, is at most `bound`.
pub fn contraction(seed: u64, n: usize, bound: f64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let norm = (0..n)
        .map(|r| a.row(r).iter().map(|x: &f64| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    a.scale(bound / norm)
}

struct Acc {
    name: &'static str,
    tol: f64,
    max: f64,
    n: usize,
}

impl Acc {
    fn new(name: &'static str, tol: f64) -> Self {
        Self { name, tol, max: 0.0, n: 0 }
    }

    fn push(&mut self, err: f64) {
        self.n += 1;
        self.max = if err.is_nan() { f64::INFINITY } else { self.max.max(err) };
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            instances: self.n,
            max_error: self.max,
            tolerance: self.tol,
            passed: self.n > 0 && self.max <= self.tol,
        }
    }
}

/// Runs every check over `opts.seeds` instances.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    opts.adjoint.validate()?;
    let mut vs_unrolled = Acc::new("implicit_vs_unrolled", TOL_IMPLICIT_VS_UNROLLED);
    let mut vs_fd = Acc::new("implicit_vs_finite_diff", TOL_SOLUTION_FD);
    let mut map_fd = Acc::new("map_jacobians_vs_finite_diff", TOL_MAP_FD);
    let mut jfb = Acc::new("jfb_vs_jfb", 1e-12);
    let mut neumann = Acc::new("neumann_vs_direct_inverse", TOL_NEUMANN_LU);

    for s in 0..opts.seeds as u64 {
        let seed = opts.first_seed + s;
        let inst = check_instance(seed)?;
        let res = solve_fixed_point(&inst.w, &inst.c0, inst.tau, 1e-10, 10_000, true)?;
        let c_star = &res.codebook;
        let jac = jacobians_of_f(&inst.w, c_star, inst.tau)?;
        let implicit = if opts.inject_bug {
            jac.j_w.clone()
        } else {
            neumann_inverse(&jac.j_c, &opts.adjoint)?.matmul(&jac.j_w)
        };
        let unrolled = unrolled_from_trace(&inst.w, &res, inst.tau)?;
        vs_unrolled.push(rel_err(implicit.as_slice(), unrolled.as_slice(), unrolled.frobenius()));

        let fd = fd_solution(&inst.w, c_star, inst.tau, 1e-5)?;
        vs_fd.push(rel_err(implicit.as_slice(), fd.as_slice(), fd.frobenius()));

        let (fd_c, fd_w) = fd_map(&inst.w, c_star, inst.tau, 1e-6)?;
        let scale = fd_c.frobenius().max(fd_w.frobenius());
        map_fd.push(rel_err(jac.j_w.as_slice(), fd_w.as_slice(), scale).max(rel_err(
            jac.j_c.as_slice(),
            fd_c.as_slice(),
            scale,
        )));

        let j = jfb_dc_dw(&inst.w, c_star, inst.tau)?;
        jfb.push(rel_err(j.as_slice(), jac.j_w.as_slice(), jac.j_w.frobenius()));

        let n = 1 + (seed as usize % 16);
        let a = contraction(seed, n, 0.8);
        let lu = direct_inverse(&Matrix::identity(n).sub(&a))?;
        let iter = neumann_inverse(&a, &opts.adjoint)?;
        neumann.push(rel_err(iter.as_slice(), lu.as_slice(), lu.frobenius()));
    }
    Ok(GradcheckReport {
        checks: vec![
            vs_unrolled.finish(),
            vs_fd.finish(),
            map_fd.finish(),
            jfb.finish(),
            neumann.finish(),
        ],
    })
}
