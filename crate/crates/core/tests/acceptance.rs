//! Acceptance criteria, one PASS/FAIL line each.
//!
//! MNIST (criterion 6) runs when `IDKM_DATA_DIR` points at the IDX files and
//! takes tens of minutes on one core. Set `IDKM_SKIP_MNIST=1` to skip it.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::*;
use idkm::bench::{ordering_violations, run_grid, MNIST_SCALE_WEIGHTS};
use idkm::data::{load_mnist, synthetic_blobs};
use idkm::grad::{implicit_dc_dw, jacobians_of_f, neumann_inverse, neumann_inverse_report, unrolled_dc_dw};
use idkm::kmeans::solve_fixed_point;
use idkm::nn::{Network, NetworkSpec};
use idkm::pq::{attention, distance_matrix, hard_quantize, soft_quantize};
use idkm::train::{accuracy, pretrain, quantized_train_step, train, PretrainConfig, QuantState};
use idkm::{BackendKind, Codebook, GradBackend, Matrix, TrainConfig, WeightMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: &'static str,
    status: Status,
    detail: String,
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Reproduction target missed while every property criterion holds.
    Gap,
    Skip,
    OutOfScope,
}

fn verdict(id: &'static str, ok: bool, detail: String) -> Outcome {
    Outcome {
        id,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn c1_oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = random_instance(seed);
        let sol = solve_fixed_point(&inst.w, &inst.c0, inst.tau, 1e-10, 100_000, false).unwrap();
        let imp = implicit_dc_dw(&inst.w, &sol.codebook, inst.tau, &tight_backend()).unwrap();
        let unr = unrolled_dc_dw(&inst.w, &inst.c0, inst.tau, 1e-10, 100_000).unwrap();
        worst = worst.max(rel_l2(imp.as_slice(), unr.as_slice()));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "C1",
        worst <= 1e-4 && secs <= 60.0,
        format!("implicit vs unrolled over 20 seeds: max rel L2 {worst:.2e} (tol 1e-4), {secs:.1} s (limit 60 s)"),
    )
}

fn c2_finite_differences() -> Outcome {
    let (mut sol_err, mut map_err): (f64, f64) = (0.0, 0.0);
    for seed in 0..20 {
        let inst = random_instance(seed);
        let sol = solve_fixed_point(&inst.w, &inst.c0, inst.tau, 1e-10, 100_000, false).unwrap();
        let imp = implicit_dc_dw(&inst.w, &sol.codebook, inst.tau, &tight_backend()).unwrap();
        let fd = fd_solution_jacobian(&inst.w, &sol.codebook, inst.tau, 1e-5);
        sol_err = sol_err.max(rel_l2(imp.as_slice(), fd.as_slice()));
        let jac = jacobians_of_f(&inst.w, &sol.codebook, inst.tau).unwrap();
        let (fc, fw) = fd_map_jacobians(&inst.w, &sol.codebook, inst.tau, 1e-6);
        map_err = map_err
            .max(rel_l2(jac.j_w.as_slice(), fw.as_slice()))
            .max(block_rel_err(&jac.j_c, &fc, &fw));
    }
    verdict(
        "C2",
        sol_err <= 1e-3 && map_err <= 1e-5,
        format!("dC*/dW vs central differences {sol_err:.2e} (tol 1e-3); dF blocks {map_err:.2e} (tol 1e-5)"),
    )
}

fn c3_neumann() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut radius: f64 = 0.0;
    for seed in 0..10 {
        let n = 2 + (seed as usize % 5) * 3;
        let j = matrix_with_spectral_radius(100 + seed, n, 0.9);
        radius = radius.max(spectral_radius(&j));
        let m = neumann_inverse(&j, &GradBackend { max_adjoint_iters: 20_000, ..GradBackend::default() }).unwrap();
        worst = worst.max(max_abs(m.sub(&lu_inverse(&j)).as_slice()));
    }
    // spectrum in the disc |z + 0.6| <= 0.9: alpha = 1 diverges, alpha = 1/2 contracts
    let base = matrix_with_spectral_radius(7, 6, 0.9);
    let forced = base.scale(-1.0).sub(&Matrix::identity(6).scale(0.6));
    let backend = GradBackend { alpha0: 1.0, max_adjoint_iters: 20_000, ..GradBackend::default() };
    let (restarts, alpha, forced_err) = match neumann_inverse_report(&forced, &backend) {
        Ok(s) => (s.restarts, s.alpha, max_abs(s.inverse.sub(&lu_inverse(&forced)).as_slice())),
        Err(e) => return verdict("C3", false, format!("forced restart case failed: {e}")),
    };
    verdict(
        "C3",
        worst <= 1e-6 && radius <= 0.9 + 1e-9 && restarts >= 1 && forced_err <= 1e-6,
        format!(
            "Neumann vs LU on 10 matrices (rho <= {radius:.3}): {worst:.2e} (tol 1e-6); \
             alpha0 = 1 restart case: {restarts} restart(s), alpha {alpha}, error {forced_err:.2e}"
        ),
    )
}

fn c4_retained_iterates() -> Outcome {
    let net = Network::new(NetworkSpec::mlp(4, 16, 3)).unwrap();
    let ds = synthetic_blobs(0, 3, 30, 4, 6.0).unwrap();
    let (x, y) = ds.gather(&(0..ds.len()).collect::<Vec<_>>());
    let mut seen = Vec::new();
    let mut ok = true;
    for t in [5, 30, 100] {
        for kind in BackendKind::ALL {
            let cfg = TrainConfig {
                max_cluster_iters: t,
                fixed_iterations: true,
                backend: GradBackend::new(kind),
                ..TrainConfig::default()
            };
            let mut p = net.init_params(0);
            let m = quantized_train_step(&net, &mut p, &x, &y, &mut QuantState::new(&net), &cfg).unwrap();
            let want = if kind == BackendKind::Unrolled { t } else { 1 };
            let got: Vec<usize> = m.layers.iter().map(|l| l.retained_iterates).collect();
            ok &= got.iter().all(|&g| g == want) && m.layers.iter().all(|l| l.cluster_iters == t);
            seen.push(format!("{kind}@{t}={}", m.retained_iterates()));
        }
    }
    verdict("C4", ok, format!("retained iterates per layer: {}", seen.join(" ")))
}

fn c5_timing_order() -> Outcome {
    // the quantization setting of the MNIST runs: k = 4, d = 1
    let cells = run_grid(&[4], &[1], &[30], MNIST_SCALE_WEIGHTS, 5e-4, 20, 0).unwrap();
    let bad = ordering_violations(&cells);
    let ms = |name: &str| cells.iter().find(|c| c.backend == name).unwrap().t_backward_s * 1e3;
    verdict(
        "C5",
        bad.is_empty(),
        format!(
            "backward ms at k=4 d=1 t=30, {MNIST_SCALE_WEIGHTS} weights: jfb {:.3} < implicit {:.3} < unrolled {:.3}{}",
            ms("jfb"),
            ms("implicit"),
            ms("unrolled"),
            if bad.is_empty() { String::new() } else { format!("; violated: {}", bad.join("; ")) }
        ),
    )
}

fn mnist_dir() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("IDKM_DATA_DIR")?);
    [root.clone(), root.join("mnist")]
        .into_iter()
        .find(|d| d.join("train-images-idx3-ubyte").is_file())
}

fn c6_mnist() -> Outcome {
    if std::env::var_os("IDKM_SKIP_MNIST").is_some() {
        return Outcome { id: "C6", status: Status::Skip, detail: "IDKM_SKIP_MNIST set".into() };
    }
    let Some(dir) = mnist_dir() else {
        return Outcome { id: "C6", status: Status::Skip, detail: "MNIST not found under IDKM_DATA_DIR".into() };
    };
    let t0 = Instant::now();
    let train_ds = load_mnist(&dir, true).unwrap();
    let test_ds = load_mnist(&dir, false).unwrap();
    let net = Network::new(NetworkSpec::mnist_small_cnn()).unwrap();
    let n_params = net.init_params::<f64>(0).count();
    let pre_cfg = PretrainConfig { learning_rate: 0.05, epochs: 30, batch_size: 32, ..PretrainConfig::default() };
    let (float, _) = pretrain(&net, &pre_cfg, &train_ds, &test_ds, net.init_params(0), &mut |_| {}).unwrap();
    let float_top1 = accuracy(&net, &float, &test_ds).unwrap();
    let mut results = Vec::new();
    for (kind, target) in [(BackendKind::Implicit, 0.9501), (BackendKind::Jfb, 0.9503)] {
        let cfg = TrainConfig {
            k: 4,
            d: 1,
            tau: 5e-4,
            learning_rate: 1e-4,
            epochs: 100,
            backend: GradBackend::new(kind),
            ..TrainConfig::default()
        };
        let out = train(&net, &cfg, &train_ds, &test_ds, float.clone(), &mut |_| {}).unwrap();
        results.push((kind, target, out.history.last().unwrap().top1_hard));
    }
    let pretrain_ok = float_top1 >= 0.97;
    let within = results.iter().all(|&(_, target, got)| (got - target).abs() <= 0.03);
    let detail = format!(
        "{n_params}-parameter CNN, float top-1 {float_top1:.4} (floor 0.97); {}; {:.0} s",
        results
            .iter()
            .map(|(k, target, got)| format!("{k} {got:.4} (target {target} +/- 0.03)"))
            .collect::<Vec<_>>()
            .join(", "),
        t0.elapsed().as_secs_f64()
    );
    let status = match (pretrain_ok, within) {
        (true, true) => Status::Pass,
        (true, false) => Status::Gap,
        (false, _) => Status::Fail,
    };
    Outcome { id: "C6", status, detail }
}

fn c7_blobs() -> Outcome {
    let t0 = Instant::now();
    let all = synthetic_blobs(1, 4, 250, 2, 6.0).unwrap();
    let (test, tr) = all.split_at(250);
    let net = Network::new(NetworkSpec::mlp(2, 16, 4)).unwrap();
    let pre_cfg = PretrainConfig { epochs: 20, ..PretrainConfig::default() };
    let (float, _) = pretrain(&net, &pre_cfg, &tr, &test, net.init_params(0), &mut |_| {}).unwrap();
    let float_top1 = accuracy(&net, &float, &test).unwrap();
    let cfg = TrainConfig { k: 4, d: 1, epochs: 30, ..TrainConfig::default() };
    let out = train(&net, &cfg, &tr, &test, float, &mut |_| {}).unwrap();
    let hard = out.history.last().unwrap().top1_hard;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "C7",
        hard >= float_top1 - 0.05 && secs < 60.0,
        format!("blobs float {float_top1:.4}, hard-quantized k4 d1 after 30 epochs {hard:.4} (floor float - 0.05), {secs:.1} s (limit 60 s)"),
    )
}

fn c8_hard_limit_and_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut row_err, mut limit_err): (f64, f64) = (0.0, 0.0);
    let mut cases = 0;
    for _ in 0..500 {
        let d = rng.random_range(1..=3);
        let m = rng.random_range(2..=40);
        let k = rng.random_range(2..=m.min(8));
        let w = WeightMatrix::from_subvectors((0..m * d).map(|_| rng.random_range(-3.0..3.0)).collect(), d).unwrap();
        let c = Codebook::new((0..k * d).map(|_| rng.random_range(-3.0..3.0)).collect(), k, d).unwrap();
        let dist = distance_matrix(&w, &c).unwrap();
        for tau in [1e-6, 5e-4, 0.1, 10.0] {
            let att = attention(&dist, tau).unwrap();
            for i in 0..m {
                row_err = row_err.max((att.data.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let gap = (0..m)
            .map(|i| {
                let mut r = dist.data.row(i).to_vec();
                r.sort_by(f64::total_cmp);
                r[1] - r[0]
            })
            .fold(f64::INFINITY, f64::min);
        if gap > 0.0 {
            let soft = soft_quantize(&w, &c, gap / 40.0).unwrap();
            let hard = hard_quantize(&w, &c).unwrap();
            let e = max_abs(&soft.as_padded_slice().iter().zip(hard.as_padded_slice()).map(|(a, b)| a - b).collect::<Vec<_>>());
            limit_err = limit_err.max(e);
            cases += 1;
        }
    }
    verdict(
        "C8",
        row_err <= 1e-9 && limit_err <= 1e-9,
        format!("500 instances: max |row sum - 1| {row_err:.1e}; soft vs hard at tau = gap/40 over {cases} cases {limit_err:.1e} (tol 1e-9)"),
    )
}

fn c9_scope() -> Outcome {
    Outcome {
        id: "C9",
        status: Status::OutOfScope,
        detail: "ResNet18/CIFAR10 not reproduced at desk scale; C4 covers the memory claim".into(),
    }
}

fn main() -> std::process::ExitCode {
    let checks: [fn() -> Outcome; 9] = [
        c1_oracle_equivalence,
        c2_finite_differences,
        c3_neumann,
        c4_retained_iterates,
        c5_timing_order,
        c6_mnist,
        c7_blobs,
        c8_hard_limit_and_rows,
        c9_scope,
    ];
    let mut failed = Vec::new();
    for check in checks {
        let o = check();
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Gap => "FAIL (reconstruction gap)",
            Status::Skip => "SKIP",
            Status::OutOfScope => "OUT OF SCOPE",
        };
        println!("{} {tag}: {}", o.id, o.detail);
        if o.status == Status::Fail {
            failed.push(o.id);
        }
    }
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        eprintln!("failed: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
