//! Instance generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use idkm::kmeans::{fixed_point_map, init_codebook, solve_fixed_point};
use idkm::pq::soft_quantize;
use idkm::{Codebook, InitStrategy, Matrix, WeightMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub w: WeightMatrix<f64>,
    pub c0: Codebook<f64>,
    pub k: usize,
    pub d: usize,
    pub tau: f64,
}

/// Median of all pairwise sub-vector distances.
pub fn median_pairwise(w: &WeightMatrix<f64>) -> f64 {
    let m = w.count();
    let mut ds = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let d: f64 = w
                .column(i)
                .iter()
                .zip(w.column(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            ds.push(d);
        }
    }
    ds.sort_by(f64::total_cmp);
    let n = ds.len();
    if n % 2 == 1 {
        ds[n / 2]
    } else {
        0.5 * (ds[n / 2 - 1] + ds[n / 2])
    }
}

/// Seeded instance: `m` in 8..=64, `k` from {2,4,8}, `d` from {1,2},
/// points drawn around `k` random centers, `tau = 0.05 * median pairwise distance`.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = [2usize, 4, 8][rng.random_range(0..3)];
    let d = rng.random_range(1..=2usize);
    let m = rng.random_range(k.max(8)..=64);
    instance_with(seed, m, k, d)
}

pub fn instance_with(seed: u64, m: usize, k: usize, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let centers: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m {
        let c = i % k;
        for r in 0..d {
            data.push(centers[c * d + r] + 0.2 * (rng.random::<f64>() - 0.5));
        }
    }
    let w = WeightMatrix::from_subvectors(data, d).unwrap();
    let tau = 0.05 * median_pairwise(&w);
    let c0 = init_codebook(&w, k, &InitStrategy::kmeans_pp(seed)).unwrap();
    Instance { w, c0, k, d, tau }
}

pub fn perturbed(w: &WeightMatrix<f64>, idx: usize, h: f64) -> WeightMatrix<f64> {
    let mut flat = w.as_padded_slice().to_vec();
    flat[idx] += h;
    WeightMatrix::from_subvectors(flat, w.dim()).unwrap()
}

pub fn perturbed_codebook(c: &Codebook<f64>, idx: usize, h: f64) -> Codebook<f64> {
    let mut flat = c.as_slice().to_vec();
    flat[idx] += h;
    Codebook::new(flat, c.k(), c.dim()).unwrap()
}

/// Central-difference Jacobians of `F` at `(c, w)`: returns `(dF/dC, dF/dW)`.
pub fn fd_map_jacobians(w: &WeightMatrix<f64>, c: &Codebook<f64>, tau: f64, h: f64) -> (Matrix<f64>, Matrix<f64>) {
    let kd = c.k() * c.dim();
    let md = w.count() * w.dim();
    let mut jc = Matrix::zeros(kd, kd);
    for col in 0..kd {
        let fp = fixed_point_map(w, &perturbed_codebook(c, col, h), tau).unwrap();
        let fm = fixed_point_map(w, &perturbed_codebook(c, col, -h), tau).unwrap();
        for row in 0..kd {
            jc[(row, col)] = (fp.as_slice()[row] - fm.as_slice()[row]) / (2.0 * h);
        }
    }
    let mut jw = Matrix::zeros(kd, md);
    for col in 0..md {
        let fp = fixed_point_map(&perturbed(w, col, h), c, tau).unwrap();
        let fm = fixed_point_map(&perturbed(w, col, -h), c, tau).unwrap();
        for row in 0..kd {
            jw[(row, col)] = (fp.as_slice()[row] - fm.as_slice()[row]) / (2.0 * h);
        }
    }
    (jc, jw)
}

/// Central differences of the converged solve, each perturbed solve warm-started at `c_star`.
pub fn fd_solution_jacobian(w: &WeightMatrix<f64>, c_star: &Codebook<f64>, tau: f64, h: f64) -> Matrix<f64> {
    let kd = c_star.k() * c_star.dim();
    let md = w.count() * w.dim();
    let mut out = Matrix::zeros(kd, md);
    for col in 0..md {
        let sp = solve_fixed_point(&perturbed(w, col, h), c_star, tau, 1e-13, 100_000, false).unwrap();
        let sm = solve_fixed_point(&perturbed(w, col, -h), c_star, tau, 1e-13, 100_000, false).unwrap();
        for row in 0..kd {
            out[(row, col)] = (sp.codebook.as_slice()[row] - sm.codebook.as_slice()[row]) / (2.0 * h);
        }
    }
    out
}

/// Central differences of `<upstream, soft_quantize(W, C)>` in W and C.
pub fn fd_soft_quantize(
    up: &WeightMatrix<f64>,
    w: &WeightMatrix<f64>,
    c: &Codebook<f64>,
    tau: f64,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let objective = |w: &WeightMatrix<f64>, c: &Codebook<f64>| -> f64 {
        let q = soft_quantize(w, c, tau).unwrap();
        q.as_padded_slice().iter().zip(up.as_padded_slice()).map(|(a, b)| a * b).sum()
    };
    let gw = (0..w.as_padded_slice().len())
        .map(|i| (objective(&perturbed(w, i, h), c) - objective(&perturbed(w, i, -h), c)) / (2.0 * h))
        .collect();
    let gc = (0..c.as_slice().len())
        .map(|i| (objective(w, &perturbed_codebook(c, i, h)) - objective(w, &perturbed_codebook(c, i, -h))) / (2.0 * h))
        .collect();
    (gw, gc)
}

/// Dense LU solve of `(I - j) X = I` via nalgebra.
pub fn lu_inverse(j: &Matrix<f64>) -> Matrix<f64> {
    let n = j.rows();
    let a = nalgebra::DMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } - j[(r, c)]);
    let inv = a.lu().try_inverse().expect("I - j singular");
    Matrix::from_fn(n, n, |r, c| inv[(r, c)])
}

/// Random matrix rescaled to the given spectral radius (eigenvalues via nalgebra).
pub fn matrix_with_spectral_radius(seed: u64, n: usize, radius: f64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let rho = raw
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0f64, f64::max);
    Matrix::from_fn(n, n, |r, c| raw[(r, c)] * radius / rho)
}

pub fn spectral_radius(j: &Matrix<f64>) -> f64 {
    let n = j.rows();
    let a = nalgebra::DMatrix::from_fn(n, n, |r, c| j[(r, c)]);
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0f64, f64::max)
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Implicit backend with enough adjoint iterations for spectral radii near 1.
pub fn tight_backend() -> idkm::GradBackend {
    idkm::GradBackend {
        max_adjoint_iters: 50_000,
        adjoint_eps: 1e-12,
        ..idkm::GradBackend::default()
    }
}

/// Error of `block` against its finite-difference estimate, relative to the
/// larger of that block's norm and the companion block's norm.
pub fn block_rel_err(block: &Matrix<f64>, fd_block: &Matrix<f64>, fd_other: &Matrix<f64>) -> f64 {
    let num: f64 = block
        .as_slice()
        .iter()
        .zip(fd_block.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = fd_block.frobenius().max(fd_other.frobenius());
    num / scale.max(1e-300)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn abs_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
