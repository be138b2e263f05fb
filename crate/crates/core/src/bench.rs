//! Wall-time and retained-iterate measurements for the three backends.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::grad::{implicit_dc_dw, jfb_dc_dw, unrolled_from_trace, BackendKind, GradBackend};
use crate::kmeans::{init_codebook, solve_fixed_iterations, InitStrategy};
use crate::pq::{partition_weights, WeightMatrix};
use crate::report::text_table;

/// Weight count of the reference MNIST network.
pub const MNIST_SCALE_WEIGHTS: usize = 2298;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCell {
    pub k: usize,
    pub d: usize,
    pub t: usize,
    pub backend: String,
    pub weights: usize,
    pub t_forward_s: f64,
    pub t_backward_s: f64,
    pub retained_iterates: usize,
    /// The adjoint iteration failed; `t_backward_s` is the time spent before giving up.
    pub adjoint_diverged: bool,
}

/// Seeded layer-like weights: normal with standard deviation 0.1.
pub fn bench_weights(seed: u64, n: usize, d: usize) -> Result<WeightMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let flat: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    partition_weights(&flat, d, true)
}

/// Times one solve plus `dC*/dW` for exactly `t` iterations, keeping the fastest of `repeats`.
pub fn run_cell(
    w: &WeightMatrix<f64>,
    k: usize,
    t: usize,
    kind: BackendKind,
    tau: f64,
    repeats: usize,
    seed: u64,
) -> Result<BenchCell> {
    let c0 = init_codebook(w, k, &InitStrategy::kmeans_pp(seed))?;
    let backend = GradBackend::new(kind);
    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut retained = 0;
    let mut diverged = false;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let res = solve_fixed_iterations(w, &c0, tau, 1e-6, t, kind.needs_trace())?;
        let fwd = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let jac = match kind {
            BackendKind::Unrolled => unrolled_from_trace(w, &res, tau),
            BackendKind::Implicit => implicit_dc_dw(w, &res.codebook, tau, &backend),
            BackendKind::Jfb => jfb_dc_dw(w, &res.codebook, tau),
        };
        let bwd = t1.elapsed().as_secs_f64();
        match jac {
            Ok(j) => {
                std::hint::black_box(&j);
            }
            Err(e) if e.is_adjoint_divergence() => diverged = true,
            Err(e) => return Err(e),
        }
        best = (best.0.min(fwd), best.1.min(bwd));
        retained = res.retained_iterates();
    }
    Ok(BenchCell {
        k,
        d: w.dim(),
        t,
        backend: kind.name().to_string(),
        weights: w.original_len(),
        t_forward_s: best.0,
        t_backward_s: best.1,
        retained_iterates: retained,
        adjoint_diverged: diverged,
    })
}

/// Every `(k, d, t, backend)` combination on a `weights`-sized instance.
pub fn run_grid(
    ks: &[usize],
    ds: &[usize],
    ts: &[usize],
    weights: usize,
    tau: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchCell>> {
    let mut out = Vec::new();
    for &d in ds {
        let w = bench_weights(seed, weights, d)?;
        for &k in ks {
            for &t in ts {
                for kind in BackendKind::ALL {
                    out.push(run_cell(&w, k, t, kind, tau, repeats, seed)?);
                }
            }
        }
    }
    Ok(out)
}

/// Rows where backward time is not `jfb < implicit < unrolled`, or a backend failed.
pub fn ordering_violations(cells: &[BenchCell]) -> Vec<String> {
    let mut out = Vec::new();
    let find = |k, d, t, name: &str| {
        cells
            .iter()
            .find(|c| c.k == k && c.d == d && c.t == t && c.backend == name)
    };
    let mut seen = Vec::new();
    for c in cells {
        let key = (c.k, c.d, c.t);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        if let (Some(jc), Some(ic), Some(uc)) = (
            find(c.k, c.d, c.t, "jfb"),
            find(c.k, c.d, c.t, "implicit"),
            find(c.k, c.d, c.t, "unrolled"),
        ) {
            let (j, i, u) = (jc.t_backward_s, ic.t_backward_s, uc.t_backward_s);
            if ic.adjoint_diverged {
                out.push(format!("k={} d={} t={}: implicit adjoint iteration diverged", c.k, c.d, c.t));
            } else if !(j < i && i < u) {
                out.push(format!(
                    "k={} d={} t={}: jfb {j:.3e}s, implicit {i:.3e}s, unrolled {u:.3e}s",
                    c.k, c.d, c.t
                ));
            }
        }
    }
    out
}

pub fn bench_table(cells: &[BenchCell]) -> String {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.k.to_string(),
                c.d.to_string(),
                c.t.to_string(),
                c.backend.clone(),
                format!("{:.3e}", c.t_forward_s),
                format!("{:.3e}", c.t_backward_s),
                c.retained_iterates.to_string(),
                if c.adjoint_diverged { "diverged" } else { "ok" }.to_string(),
            ]
        })
        .collect();
    text_table(
        &["k", "d", "t", "backend", "forward_s", "backward_s", "retained_iterates", "status"],
        &rows,
    )
}
