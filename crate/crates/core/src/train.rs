//! Quantization-aware training: per-layer soft k-means inside an SGD loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{implicit_dc_dw, jfb_dc_dw, unrolled_from_trace, BackendKind, GradBackend};
use crate::kmeans::{init_codebook, solve_fixed_iterations, solve_fixed_point, FixedPointResult, InitKind, InitStrategy};
use crate::matrix::Matrix;
use crate::nn::{LossKind, Network, Params, Targets};
use crate::pq::{bits_per_weight, hard_quantize, partition_weights, soft_quantize, soft_quantize_vjp, Codebook, QuantizeMode, WeightMatrix};
use crate::report::ReportRecord;

/// Per-layer codebook shape override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub layer: usize,
    pub k: Option<usize>,
    pub d: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub d: usize,
    pub tau: f64,
    pub eps: f64,
    pub max_cluster_iters: usize,
    pub backend: GradBackend,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub init: InitKind,
    pub seed: u64,
    /// Retry a diverged implicit solve with the jfb backend instead of failing.
    pub fallback_jfb: bool,
    /// Keep the clustering trace for every backend, not only unrolled.
    pub record_trace: bool,
    /// Include the gradient through the attention with the codebook held fixed.
    pub direct_path: bool,
    /// Always run `max_cluster_iters` iterations instead of stopping at `eps`.
    pub fixed_iterations: bool,
    pub layers: Vec<LayerOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d: 1,
            tau: 5e-4,
            eps: 1e-6,
            max_cluster_iters: 30,
            backend: GradBackend::default(),
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 128,
            loss: LossKind::CrossEntropy,
            init: InitKind::KmeansPp,
            seed: 0,
            fallback_jfb: false,
            record_trace: false,
            direct_path: true,
            fixed_iterations: false,
            layers: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate must be positive"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::param("tau must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps must be positive"));
        }
        if self.max_cluster_iters == 0 || self.batch_size == 0 {
            return Err(Error::param("max_cluster_iters and batch_size must be >= 1"));
        }
        if self.init == InitKind::WarmStart {
            return Err(Error::param("init must be kmeans_pp or random_subset"));
        }
        for l in std::iter::once((self.k, self.d)).chain(self.layers.iter().map(|o| (o.k.unwrap_or(1), o.d.unwrap_or(1)))) {
            if l.0 == 0 || l.1 == 0 {
                return Err(Error::param("k and d must be >= 1"));
            }
        }
        self.backend.validate()
    }

    /// `(k, d)` for a layer after overrides.
    pub fn layer_kd(&self, layer: usize) -> (usize, usize) {
        let o = self.layers.iter().find(|o| o.layer == layer);
        (
            o.and_then(|o| o.k).unwrap_or(self.k),
            o.and_then(|o| o.d).unwrap_or(self.d),
        )
    }
}

/// Codebooks carried between steps, indexed by layer.
#[derive(Debug, Clone, Default)]
pub struct QuantState {
    pub codebooks: Vec<Option<Codebook<f64>>>,
    pub steps: usize,
    pub fallbacks: usize,
}

impl QuantState {
    pub fn new(net: &Network) -> Self {
        Self {
            codebooks: vec![None; net.spec().layers.len()],
            steps: 0,
            fallbacks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStepMetrics {
    pub layer: usize,
    pub k: usize,
    pub d: usize,
    pub cluster_iters: usize,
    pub residual: f64,
    pub converged: bool,
    pub retained_iterates: usize,
    pub degenerate_clusters: usize,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub layers: Vec<LayerStepMetrics>,
    /// Clustering solves.
    pub t_forward_s: f64,
    /// Gradient through the clustering.
    pub t_backward_s: f64,
}

impl StepMetrics {
    pub fn retained_iterates(&self) -> usize {
        self.layers.iter().map(|l| l.retained_iterates).max().unwrap_or(0)
    }

    pub fn cluster_iters(&self) -> usize {
        self.layers.iter().map(|l| l.cluster_iters).max().unwrap_or(0)
    }

    pub fn residual(&self) -> f64 {
        self.layers.iter().map(|l| l.residual).fold(0.0, f64::max)
    }
}

fn layer_weights(params: &Params<f64>, layer: usize) -> Result<&[f64]> {
    params.layers[layer]
        .as_ref()
        .map(|p| p.weight.as_slice())
        .ok_or_else(|| Error::shape(format!("layer {layer} has no weights to quantize")))
}

fn wrap(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Layer { .. } => e,
        e => Error::Layer {
            layer,
            source: Box::new(e),
        },
    }
}

/// Soft k-means on one layer, warm-started from `prev` when its shape fits.
pub fn solve_layer(
    w: &WeightMatrix<f64>,
    k: usize,
    prev: Option<&Codebook<f64>>,
    cfg: &TrainConfig,
    layer: usize,
    record_trace: bool,
) -> Result<FixedPointResult<f64>> {
    let c0 = match prev {
        Some(c) if c.k() == k && c.dim() == w.dim() => c.clone(),
        _ => {
            let strategy = InitStrategy {
                kind: cfg.init,
                seed: cfg.seed.wrapping_add(layer as u64),
                warm_codebook: None,
            };
            init_codebook(w, k, &strategy)?
        }
    };
    if cfg.fixed_iterations {
        solve_fixed_iterations(w, &c0, cfg.tau, cfg.eps, cfg.max_cluster_iters, record_trace)
    } else {
        solve_fixed_point(w, &c0, cfg.tau, cfg.eps, cfg.max_cluster_iters, record_trace)
    }
}

/// Dense `dC*/dW` for a solved layer, with optional fallback to jfb.
fn cluster_jacobian(
    w: &WeightMatrix<f64>,
    res: &FixedPointResult<f64>,
    cfg: &TrainConfig,
    layer: usize,
) -> Result<(Matrix<f64>, bool)> {
    let attempt = match cfg.backend.kind {
        BackendKind::Unrolled => unrolled_from_trace(w, res, cfg.tau),
        BackendKind::Implicit => implicit_dc_dw(w, &res.codebook, cfg.tau, &cfg.backend),
        BackendKind::Jfb => jfb_dc_dw(w, &res.codebook, cfg.tau),
    };
    match attempt {
        Ok(j) => Ok((j, false)),
        Err(e) if e.is_adjoint_divergence() && cfg.fallback_jfb => {
            log::warn!("layer {layer}: {e}; falling back to jfb");
            Ok((jfb_dc_dw(w, &res.codebook, cfg.tau).map_err(wrap(layer))?, true))
        }
        Err(e) => Err(wrap(layer)(e)),
    }
}

/// One SGD step on the soft-quantized objective. Updates `params` and `state` in place.
pub fn quantized_train_step(
    net: &Network,
    params: &mut Params<f64>,
    inputs: &[f64],
    labels: &[usize],
    state: &mut QuantState,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    if state.codebooks.len() != net.spec().layers.len() {
        state.codebooks.resize(net.spec().layers.len(), None);
    }
    let mut effective = params.clone();
    let mut solved = Vec::new();
    let record = cfg.record_trace || cfg.backend.kind.needs_trace();

    let t0 = Instant::now();
    for layer in net.quantized_layers() {
        let (k, d) = cfg.layer_kd(layer);
        let w = partition_weights(layer_weights(params, layer)?, d, true).map_err(wrap(layer))?;
        let res = solve_layer(&w, k, state.codebooks[layer].as_ref(), cfg, layer, record).map_err(wrap(layer))?;
        let w_hat = soft_quantize(&w, &res.codebook, cfg.tau).map_err(wrap(layer))?;
        effective.layers[layer].as_mut().unwrap().weight = w_hat.flatten();
        solved.push((layer, w, res));
    }
    let t_forward_s = t0.elapsed().as_secs_f64();

    let (loss, mut grads) = net.loss_and_grad(&effective, inputs, Targets::Labels(labels), cfg.loss)?;

    let t1 = Instant::now();
    let mut metrics = Vec::with_capacity(solved.len());
    for (layer, w, res) in solved {
        let d = w.dim();
        let g_layer = grads.layers[layer].as_mut().unwrap();
        let upstream = partition_weights(&g_layer.weight, d, true).map_err(wrap(layer))?;
        let sq = soft_quantize_vjp(&upstream, &w, &res.codebook, cfg.tau).map_err(wrap(layer))?;
        let (jac, fell_back) = cluster_jacobian(&w, &res, cfg, layer)?;
        let mut total = jac.left_mul_vec(sq.grad_c.as_slice());
        if cfg.direct_path {
            for (t, &g) in total.iter_mut().zip(sq.grad_w.as_padded_slice()) {
                *t += g;
            }
        }
        total.truncate(w.original_len());
        g_layer.weight = total;
        if fell_back {
            state.fallbacks += 1;
        }
        metrics.push(LayerStepMetrics {
            layer,
            k: res.codebook.k(),
            d,
            cluster_iters: res.iterations,
            residual: res.residual,
            converged: res.converged,
            retained_iterates: res.retained_iterates(),
            degenerate_clusters: res.degenerate_clusters,
            fell_back,
        });
        state.codebooks[layer] = Some(res.codebook);
    }
    let t_backward_s = t1.elapsed().as_secs_f64();

    if !grads.is_finite() {
        return Err(Error::numerics("non-finite gradient in quantized step"));
    }
    params.sgd_step(&grads, cfg.learning_rate);
    state.steps += 1;
    Ok(StepMetrics {
        loss,
        layers: metrics,
        t_forward_s,
        t_backward_s,
    })
}

/// Codebooks solved at the current weights, warm-started from `state`.
pub fn current_codebooks(
    net: &Network,
    params: &Params<f64>,
    state: &QuantState,
    cfg: &TrainConfig,
) -> Result<Vec<Option<Codebook<f64>>>> {
    let mut out = vec![None; net.spec().layers.len()];
    for layer in net.quantized_layers() {
        let (k, d) = cfg.layer_kd(layer);
        let w = partition_weights(layer_weights(params, layer)?, d, true).map_err(wrap(layer))?;
        let prev = state.codebooks.get(layer).and_then(Option::as_ref);
        out[layer] = Some(solve_layer(&w, k, prev, cfg, layer, false).map_err(wrap(layer))?.codebook);
    }
    Ok(out)
}

/// Replaces every layer that has a codebook by its quantized weights.
pub fn quantize_params(
    params: &Params<f64>,
    codebooks: &[Option<Codebook<f64>>],
    mode: QuantizeMode,
    tau: f64,
) -> Result<Params<f64>> {
    let mut out = params.clone();
    for (layer, c) in codebooks.iter().enumerate() {
        let Some(c) = c else { continue };
        let p = out.layers.get_mut(layer).and_then(Option::as_mut).ok_or_else(|| {
            Error::shape(format!("codebook given for layer {layer}, which has no weights"))
        })?;
        let w = partition_weights(&p.weight, c.dim(), true)?;
        let q = match mode {
            QuantizeMode::Hard => hard_quantize(&w, c)?,
            QuantizeMode::Soft => soft_quantize(&w, c, tau)?,
        };
        p.weight = q.flatten();
    }
    Ok(out)
}

const EVAL_CHUNK: usize = 1000;

/// Top-1 accuracy of the given (already quantized or float) weights.
pub fn accuracy(net: &Network, params: &Params<f64>, ds: &Dataset) -> Result<f64> {
    if ds.sample_len() != net.input_len() {
        return Err(Error::shape("dataset samples do not match the network input"));
    }
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk);
        let pred = net.predict(params, &x)?;
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean loss over a dataset.
pub fn mean_loss(net: &Network, params: &Params<f64>, ds: &Dataset, loss: LossKind) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk);
        let (l, _) = net.loss_and_grad(params, &x, Targets::Labels(&y), loss)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    /// `(layer, log2(k) / d)` for every quantized layer.
    pub bits_per_weight: Vec<(usize, f64)>,
}

/// Accuracy with hard-quantized weights.
pub fn evaluate(
    net: &Network,
    params: &Params<f64>,
    codebooks: &[Option<Codebook<f64>>],
    ds: &Dataset,
) -> Result<EvalReport> {
    let q = quantize_params(params, codebooks, QuantizeMode::Hard, 1.0)?;
    Ok(EvalReport {
        top1: accuracy(net, &q, ds)?,
        bits_per_weight: codebooks
            .iter()
            .enumerate()
            .filter_map(|(l, c)| c.as_ref().map(|c| (l, bits_per_weight(c.k(), c.dim()))))
            .collect(),
    })
}

/// Accuracy with soft-quantized weights at temperature `tau`.
pub fn evaluate_soft(
    net: &Network,
    params: &Params<f64>,
    codebooks: &[Option<Codebook<f64>>],
    tau: f64,
    ds: &Dataset,
) -> Result<f64> {
    accuracy(net, &quantize_params(params, codebooks, QuantizeMode::Soft, tau)?, ds)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params<f64>,
    pub codebooks: Vec<Option<Codebook<f64>>>,
    pub history: Vec<ReportRecord>,
}

fn check_dataset(net: &Network, ds: &Dataset) -> Result<()> {
    if ds.sample_len() != net.input_len() {
        return Err(Error::shape(format!(
            "dataset sample shape {:?} does not match network input",
            ds.sample_shape
        )));
    }
    if ds.num_classes > net.output_len() {
        return Err(Error::shape("dataset has more classes than network outputs"));
    }
    Ok(())
}

/// Runs quantization-aware training from `params`.
///
/// Record `0` evaluates the starting weights; with `epochs = 0` it is the only one.
/// `on_record` sees each record as soon as it is produced.
pub fn train(
    net: &Network,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    mut params: Params<f64>,
    on_record: &mut dyn FnMut(&ReportRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.check_params(&params)?;
    check_dataset(net, train_ds)?;
    check_dataset(net, eval_ds)?;
    if train_ds.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let mut state = QuantState::new(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();

    let record = |epoch: usize,
                      step: usize,
                      loss: f64,
                      params: &Params<f64>,
                      state: &QuantState,
                      last: Option<&StepMetrics>,
                      times: (f64, f64)|
     -> Result<(ReportRecord, Vec<Option<Codebook<f64>>>)> {
        let books = current_codebooks(net, params, state, cfg)?;
        Ok((
            ReportRecord {
                epoch,
                step,
                loss,
                top1_hard: evaluate(net, params, &books, eval_ds)?.top1,
                top1_soft: evaluate_soft(net, params, &books, cfg.tau, eval_ds)?,
                backend: cfg.backend.kind.name().to_string(),
                k: cfg.k,
                d: cfg.d,
                tau: cfg.tau,
                cluster_iters: last.map_or(0, StepMetrics::cluster_iters),
                residual: last.map_or(0.0, StepMetrics::residual),
                retained_iterates: last.map_or(0, StepMetrics::retained_iterates),
                t_forward_s: times.0,
                t_backward_s: times.1,
            },
            books,
        ))
    };

    let initial_books = current_codebooks(net, &params, &state, cfg)?;
    let initial_loss = mean_loss(
        net,
        &quantize_params(&params, &initial_books, QuantizeMode::Soft, cfg.tau)?,
        train_ds,
        cfg.loss,
    )?;
    let (r0, mut books) = record(0, 0, initial_loss, &params, &state, None, (0.0, 0.0))?;
    on_record(&r0);
    history.push(r0);

    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut times = (0.0, 0.0);
        let mut last = None;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train_ds.gather(batch);
            let m = quantized_train_step(net, &mut params, &x, &y, &mut state, cfg)?;
            loss_sum += m.loss * batch.len() as f64;
            times.0 += m.t_forward_s;
            times.1 += m.t_backward_s;
            last = Some(m);
        }
        let (r, b) = record(
            epoch,
            state.steps,
            loss_sum / train_ds.len() as f64,
            &params,
            &state,
            last.as_ref(),
            times,
        )?;
        books = b;
        log::info!(
            "epoch {epoch}: loss {:.4} top1_hard {:.4} top1_soft {:.4}",
            r.loss,
            r.top1_hard,
            r.top1_soft
        );
        on_record(&r);
        history.push(r);
    }
    Ok(TrainOutcome {
        params,
        codebooks: books,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 32,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
}

/// Plain float SGD without quantization.
pub fn pretrain(
    net: &Network,
    cfg: &PretrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    mut params: Params<f64>,
    on_record: &mut dyn FnMut(&PretrainRecord),
) -> Result<(Params<f64>, Vec<PretrainRecord>)> {
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::param("learning_rate must be positive and batch_size >= 1"));
    }
    net.check_params(&params)?;
    check_dataset(net, train_ds)?;
    check_dataset(net, eval_ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train_ds.gather(batch);
            let (loss, grads) = net.loss_and_grad(&params, &x, Targets::Labels(&y), cfg.loss)?;
            params.sgd_step(&grads, cfg.learning_rate);
            loss_sum += loss * batch.len() as f64;
        }
        let r = PretrainRecord {
            epoch,
            loss: loss_sum / train_ds.len().max(1) as f64,
            top1: accuracy(net, &params, eval_ds)?,
        };
        log::info!("pretrain epoch {epoch}: loss {:.4} top1 {:.4}", r.loss, r.top1);
        on_record(&r);
        history.push(r);
    }
    Ok((params, history))
}
