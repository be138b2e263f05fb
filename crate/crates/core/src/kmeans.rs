//! Soft k-means as repeated application of the fixed-point map `F`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pq::{check_shapes, soft_assign, AttentionMatrix, Codebook, DistanceMatrix, WeightMatrix};
use crate::scalar::Real;

/// Attention column sums below this are treated as an empty cluster.
pub const DEGENERATE_FLOOR: f64 = 1e-12;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    KmeansPp,
    RandomSubset,
    WarmStart,
}

/// How the first codebook of a solve is chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct InitStrategy<T> {
    pub kind: InitKind,
    pub seed: u64,
    pub warm_codebook: Option<Codebook<T>>,
}

impl<T: Real> InitStrategy<T> {
    pub fn kmeans_pp(seed: u64) -> Self {
        Self {
            kind: InitKind::KmeansPp,
            seed,
            warm_codebook: None,
        }
    }

    pub fn random_subset(seed: u64) -> Self {
        Self {
            kind: InitKind::RandomSubset,
            seed,
            warm_codebook: None,
        }
    }

    pub fn warm_start(codebook: Codebook<T>) -> Self {
        Self {
            kind: InitKind::WarmStart,
            seed: 0,
            warm_codebook: Some(codebook),
        }
    }
}

/// Output of [`solve_fixed_point`].
#[derive(Debug, Clone)]
pub struct FixedPointResult<T> {
    pub codebook: Codebook<T>,
    /// Number of applications of `F`.
    pub iterations: usize,
    /// Frobenius norm of the last update.
    pub residual: T,
    pub converged: bool,
    /// Input codebook of every iteration, oldest first. Only kept on request.
    pub trace: Option<Vec<Codebook<T>>>,
    /// Empty-cluster events over the whole solve.
    pub degenerate_clusters: usize,
}

impl<T: Real> FixedPointResult<T> {
    /// Codebook snapshots this result holds for a backward pass.
    pub fn retained_iterates(&self) -> usize {
        self.trace.as_ref().map_or(1, Vec::len)
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Picks the starting codebook.
pub fn init_codebook<T: Real>(w: &WeightMatrix<T>, k: usize, strategy: &InitStrategy<T>) -> Result<Codebook<T>> {
    let m = w.count();
    if k == 0 || k > m {
        return Err(Error::param(format!("need 1 <= k <= m, got k = {k}, m = {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
    let indices: Vec<usize> = match strategy.kind {
        InitKind::WarmStart => {
            let c = strategy
                .warm_codebook
                .as_ref()
                .ok_or_else(|| Error::param("warm start without a codebook"))?;
            if c.k() != k || c.dim() != w.dim() {
                return Err(Error::shape(format!(
                    "warm codebook is {}x{}, expected {}x{}",
                    c.k(),
                    c.dim(),
                    k,
                    w.dim()
                )));
            }
            return Ok(c.clone());
        }
        InitKind::RandomSubset => sample(&mut rng, m, k).into_vec(),
        InitKind::KmeansPp => {
            let mut chosen = vec![rng.random_range(0..m)];
            let mut nearest: Vec<T> = w.columns().map(|col| sq_dist(col, w.column(chosen[0]))).collect();
            while chosen.len() < k {
                let total: T = nearest.iter().copied().sum();
                let next = if total > T::zero() {
                    let target = T::lit(rng.random::<f64>()) * total;
                    let mut acc = T::zero();
                    let mut pick = None;
                    for (i, &dd) in nearest.iter().enumerate() {
                        acc += dd;
                        if dd > T::zero() && acc >= target {
                            pick = Some(i);
                            break;
                        }
                    }
                    // rounding can leave acc just short of target
                    pick.unwrap_or_else(|| nearest.iter().rposition(|&dd| dd > T::zero()).unwrap())
                } else {
                    // every remaining point duplicates a chosen one; fall back to unused indices
                    let unused: Vec<usize> = (0..m).filter(|i| !chosen.contains(i)).collect();
                    unused[rng.random_range(0..unused.len())]
                };
                chosen.push(next);
                for (i, col) in w.columns().enumerate() {
                    let dd = sq_dist(col, w.column(next));
                    if dd < nearest[i] {
                        nearest[i] = dd;
                    }
                }
            }
            chosen
        }
    };
    let rows: Vec<Vec<T>> = indices.iter().map(|&i| w.column(i).to_vec()).collect();
    Codebook::from_rows(&rows)
}

/// Every intermediate of one evaluation of `F`, kept for differentiation.
pub(crate) struct MapEval<T> {
    pub dist: DistanceMatrix<T>,
    pub att: AttentionMatrix<T>,
    /// Attention column sums.
    pub sums: Vec<T>,
    /// True where the cluster was empty and the stale center was kept.
    pub degenerate: Vec<bool>,
    pub out: Codebook<T>,
}

pub(crate) fn eval_map<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>, tau: T) -> Result<MapEval<T>> {
    check_shapes(w, c)?;
    let (dist, att) = soft_assign(w, c, tau)?;
    let (m, k, d) = (w.count(), c.k(), w.dim());
    let mut sums = vec![T::zero(); k];
    let mut num = vec![T::zero(); k * d];
    for i in 0..m {
        let wi = w.column(i);
        for (j, &a) in att.data.row(i).iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            sums[j] += a;
            for r in 0..d {
                num[j * d + r] += a * wi[r];
            }
        }
    }
    let floor = T::lit(DEGENERATE_FLOOR);
    let mut degenerate = vec![false; k];
    for j in 0..k {
        if sums[j] < floor {
            degenerate[j] = true;
            num[j * d..(j + 1) * d].copy_from_slice(c.row(j));
        } else {
            for v in &mut num[j * d..(j + 1) * d] {
                *v /= sums[j];
            }
        }
    }
    if !num.iter().all(|x| x.is_finite()) {
        return Err(Error::numerics("fixed-point map produced non-finite centers"));
    }
    let out = Codebook::new(num, k, d)?;
    Ok(MapEval {
        dist,
        att,
        sums,
        degenerate,
        out,
    })
}

/// One soft k-means update: row `j` becomes `sum_i A_ij w_i / sum_i A_ij`.
///
/// A cluster whose attention mass falls below [`DEGENERATE_FLOOR`] keeps its
/// previous center; `degenerate` is incremented once per such cluster.
pub fn fixed_point_map_counted<T: Real>(
    w: &WeightMatrix<T>,
    c: &Codebook<T>,
    tau: T,
    degenerate: &mut usize,
) -> Result<Codebook<T>> {
    let eval = eval_map(w, c, tau)?;
    *degenerate += eval.degenerate.iter().filter(|&&b| b).count();
    Ok(eval.out)
}

pub fn fixed_point_map<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>, tau: T) -> Result<Codebook<T>> {
    let mut sink = 0;
    fixed_point_map_counted(w, c, tau, &mut sink)
}

/// Iterates `C <- F(C, W)` until `||C+ - C||_F < eps` or `max_iters` updates.
///
/// Returns the last update `C+`. With `record_trace` every input codebook is
/// retained, which is exactly what unrolled differentiation needs.
pub fn solve_fixed_point<T: Real>(
    w: &WeightMatrix<T>,
    c0: &Codebook<T>,
    tau: T,
    eps: T,
    max_iters: usize,
    record_trace: bool,
) -> Result<FixedPointResult<T>> {
    iterate(w, c0, tau, eps, max_iters, record_trace, true)
}

/// Applies `F` exactly `iters` times, ignoring the stopping rule.
///
/// `converged` still reports whether the last residual is below `eps`.
pub fn solve_fixed_iterations<T: Real>(
    w: &WeightMatrix<T>,
    c0: &Codebook<T>,
    tau: T,
    eps: T,
    iters: usize,
    record_trace: bool,
) -> Result<FixedPointResult<T>> {
    iterate(w, c0, tau, eps, iters, record_trace, false)
}

fn iterate<T: Real>(
    w: &WeightMatrix<T>,
    c0: &Codebook<T>,
    tau: T,
    eps: T,
    max_iters: usize,
    record_trace: bool,
    stop_early: bool,
) -> Result<FixedPointResult<T>> {
    if !(eps > T::zero()) {
        return Err(Error::param("eps must be positive"));
    }
    if max_iters == 0 {
        return Err(Error::param("max_iters must be >= 1"));
    }
    let mut trace = record_trace.then(|| Vec::with_capacity(max_iters.min(1024)));
    let mut degenerate = 0;
    let mut current = c0.clone();
    let mut iterations = 0;
    let mut residual = T::infinity();
    while iterations < max_iters {
        let next = fixed_point_map_counted(w, &current, tau, &mut degenerate)?;
        iterations += 1;
        residual = next.distance_to(&current);
        if let Some(t) = trace.as_mut() {
            t.push(current);
        }
        current = next;
        if stop_early && residual < eps {
            break;
        }
    }
    Ok(FixedPointResult {
        codebook: current,
        iterations,
        residual,
        converged: residual < eps,
        trace,
        degenerate_clusters: degenerate,
    })
}
