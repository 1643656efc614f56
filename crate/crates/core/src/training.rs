//! Losses, optimizers, regularization, pruning, fake quantization and the
//! mini-batch training loop.

use crate::autodiff::{NodeId, Tape, Value};
use crate::error::{arg, config, Error, Result};
use crate::signal::SymbolFrame;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Role of a parameter block; selects regularization and quantization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Complex CD filter taps stored as `(re, im)` pairs.
    CdTaps,
    /// Nonlinear phase scalings.
    NlScale,
    /// Subband intensity-coupling tensors.
    Coupling,
    /// Rotation angles of PMD stages.
    Rotation,
    /// Real fractional-delay taps.
    FdTaps,
    /// Real 4×4 MIMO equalizer taps.
    MimoTaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// `true` marks an entry frozen at zero by pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

/// Named flat collection of real parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, shape: Vec<usize>, values: Vec<f64>) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return arg(format!("duplicate parameter name '{name}'"));
        }
        if shape.iter().product::<usize>() != values.len() {
            return arg(format!("parameter '{name}' shape {shape:?} does not match {} values", values.len()));
        }
        self.entries.push(ParamEntry {
            name,
            group,
            shape,
            values,
            mask: None,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.entries[i].values
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.values.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.dimension() {
            return Err(Error::Contract("flat parameter length mismatch".into()));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.values.len();
            e.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every entry as a leaf node, in entry order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| tape.leaf(Value::vector(e.values.clone())))
            .collect()
    }

    fn same_shape(&self, g: &GradRecord) -> bool {
        self.entries.len() == g.values.len()
            && self.entries.iter().zip(&g.values).all(|(e, v)| e.values.len() == v.len())
    }

    /// Zeroes every entry of the selected groups with `|θ| < ε` and freezes all
    /// zeros of those groups through a mask.
    pub fn prune(&mut self, groups: &[ParamGroup], eps: f64) -> PruneReport {
        let mut zeros = 0;
        let mut total = 0;
        for e in self.entries.iter_mut().filter(|e| groups.contains(&e.group)) {
            let (vals, mask, _) = prune_values(&e.values, eps);
            zeros += mask.iter().filter(|m| **m).count();
            total += vals.len();
            e.values = vals;
            e.mask = Some(mask);
        }
        PruneReport {
            zeros,
            total,
            fraction: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        }
    }

    /// Fraction of exact zeros across the selected groups.
    pub fn sparsity(&self, groups: &[ParamGroup]) -> PruneReport {
        let (mut zeros, mut total) = (0, 0);
        for e in self.entries.iter().filter(|e| groups.contains(&e.group)) {
            zeros += e.values.iter().filter(|v| **v == 0.0).count();
            total += e.values.len();
        }
        PruneReport {
            zeros,
            total,
            fraction: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        }
    }

    fn apply_masks(&mut self) {
        for e in &mut self.entries {
            if let Some(m) = &e.mask {
                for (v, frozen) in e.values.iter_mut().zip(m) {
                    if *frozen {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub zeros: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Gradient of a scalar loss, shaped like its [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub values: Vec<Vec<f64>>,
}

impl GradRecord {
    pub fn zeros_like(p: &ParamSet) -> Self {
        Self {
            values: p.entries.iter().map(|e| vec![0.0; e.values.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradRecord, c: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Collects the gradients of the leaves created by [`ParamSet::leaves`].
    pub fn from_tape(grads: &crate::autodiff::Gradients, leaves: &[NodeId], p: &ParamSet) -> Self {
        Self {
            values: leaves
                .iter()
                .zip(&p.entries)
                .map(|(id, e)| grads.vector(*id, e.values.len()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Constant,
    /// Halve the step size at every third of the iteration budget.
    HalveThirds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub step_size: f64,
    pub decay: Decay,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_size: 1e-3,
            decay: Decay::HalveThirds,
            batch_size: 4,
            max_iterations: 1000,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.batch_size < 1 {
            return config("step size must be > 0 and batch size >= 1");
        }
        Ok(())
    }

    pub fn step_size_at(&self, iteration: usize) -> f64 {
        match self.decay {
            Decay::Constant => self.step_size,
            Decay::HalveThirds => {
                let third = (self.max_iterations / 3).max(1);
                self.step_size * 0.5f64.powi((iteration / third).min(2) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One optimizer update with step size `alpha`.
pub fn step(
    params: &mut ParamSet,
    grad: &GradRecord,
    kind: OptimizerKind,
    alpha: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    if !params.same_shape(grad) {
        return Err(Error::Contract("gradient shape does not match parameters".into()));
    }
    state.t += 1;
    match kind {
        OptimizerKind::Sgd => {
            for (e, g) in params.entries.iter_mut().zip(&grad.values) {
                for (p, gv) in e.values.iter_mut().zip(g) {
                    *p -= alpha * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = GradRecord::zeros_like(params).values;
                state.v = state.m.clone();
            }
            let t = state.t as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((e, g), m), v) in params
                .entries
                .iter_mut()
                .zip(&grad.values)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                for i in 0..g.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    e.values[i] -= alpha * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
    params.apply_masks();
    Ok(())
}

pub(crate) fn mse_raw(rx: &[Vec<Complex64>], tx: &[Vec<Complex64>]) -> f64 {
    let count: usize = tx.iter().map(|c| c.len()).sum();
    let sum: f64 = rx
        .iter()
        .zip(tx)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()))
        .sum();
    sum / count as f64
}

pub(crate) fn cma_raw(u: &[Vec<Complex64>], radius: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return arg("CMA modulus must be positive");
    }
    if u.iter().any(|c| c.is_empty()) {
        return arg("CMA loss of an empty signal");
    }
    Ok(u.iter()
        .map(|c| c.iter().map(|v| (v.norm_sqr() - radius).powi(2)).sum::<f64>() / c.len() as f64)
        .sum())
}

/// Mean of `|rx − tx|²` over all symbols and polarizations.
pub fn mse_loss(rx: &SymbolFrame, tx: &SymbolFrame) -> Result<f64> {
    if rx.is_empty() || tx.is_empty() {
        return arg("MSE of an empty frame");
    }
    if rx.n_pols() != tx.n_pols() || rx.len() != tx.len() {
        return arg("MSE frames differ in shape");
    }
    Ok(mse_raw(&rx.symbols, &tx.symbols))
}

/// Constant-modulus loss, summed over polarizations.
pub fn cma_loss(sig: &crate::signal::ComplexSignal, radius: f64) -> Result<f64> {
    let pols: Vec<Vec<Complex64>> = sig.pols().cloned().collect();
    cma_raw(&pols, radius)
}

/// `λ·Σ|θᵢ|` and its subgradient `λ·sign(θᵢ)` (zero at zero).
pub fn l1_penalty(values: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let p = weight * values.iter().map(|v| v.abs()).sum::<f64>();
    let g = values
        .iter()
        .map(|v| if *v == 0.0 { 0.0 } else { weight * v.signum() })
        .collect();
    (p, g)
}

/// Zeroes entries with `|θ| < ε`. Returns the values, the frozen mask and the
/// fraction of zeros in the result.
pub fn prune_values(values: &[f64], eps: f64) -> (Vec<f64>, Vec<bool>, f64) {
    let out: Vec<f64> = values
        .iter()
        .map(|v| if v.abs() < eps { 0.0 } else { *v })
        .collect();
    let mask: Vec<bool> = out.iter().map(|v| *v == 0.0).collect();
    let frac = if out.is_empty() {
        0.0
    } else {
        mask.iter().filter(|m| **m).count() as f64 / out.len() as f64
    };
    (out, mask, frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FakeQuantConfig {
    pub bits: u32,
    pub enabled: bool,
}

impl FakeQuantConfig {
    pub fn new(bits: u32) -> Result<Self> {
        let c = Self { bits, enabled: true };
        c.validate()?;
        Ok(c)
    }

    pub fn disabled() -> Self {
        Self {
            bits: 16,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return config(format!("quantizer bit width {} outside [2, 16]", self.bits));
        }
        Ok(())
    }
}

/// Largest absolute value, the per-filter quantizer scale.
pub fn max_abs_scale(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Symmetric mid-tread quantize-dequantize with `2^{b−1} − 1` positive codes.
pub fn fake_quantize_value(x: f64, bits: u32, scale: f64) -> Result<f64> {
    if !(2..=16).contains(&bits) {
        return config(format!("quantizer bit width {bits} outside [2, 16]"));
    }
    if scale <= 0.0 {
        return Ok(0.0);
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let delta = scale / levels;
    Ok((x / delta).round().clamp(-levels, levels) * delta)
}

pub fn fake_quantize(x: f64, cfg: &FakeQuantConfig, scale: f64) -> Result<f64> {
    cfg.validate()?;
    fake_quantize_value(x, cfg.bits, scale)
}

/// Quantizes every entry of the selected groups with its own max-abs scale.
pub fn quantize_params(params: &ParamSet, groups: &[ParamGroup], bits: u32) -> Result<ParamSet> {
    let mut out = params.clone();
    for e in out.entries.iter_mut().filter(|e| groups.contains(&e.group)) {
        let s = max_abs_scale(&e.values);
        for v in e.values.iter_mut() {
            *v = fake_quantize_value(*v, bits, s)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub l1_weight: f64,
    pub prune_threshold: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            l1_weight: 0.0,
            prune_threshold: 0.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite())
            || !(self.prune_threshold >= 0.0 && self.prune_threshold.is_finite())
        {
            return config("L1 weight and prune threshold must be finite and >= 0");
        }
        Ok(())
    }
}

/// A receiver architecture: records the data loss of one example on a tape.
pub trait Objective: Sync {
    type Example: Sync;

    /// `params` holds one node per [`ParamSet`] entry, already fake-quantized
    /// where quantization is enabled.
    fn loss(&self, tape: &mut Tape, params: &[NodeId], example: &Self::Example) -> Result<NodeId>;
}

/// Deterministic mini-batch provider addressed by iteration number.
pub trait DataSource: Sync {
    type Example: Sync + Send;
    fn batch(&self, iteration: usize, batch_size: usize) -> Vec<Self::Example>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub opt: OptimizerConfig,
    pub reg: RegularizerConfig,
    pub fq: FakeQuantConfig,
    pub l1_groups: Vec<ParamGroup>,
    pub quant_groups: Vec<ParamGroup>,
    /// Fraction of the budget after which a single hard prune happens and the
    /// remaining iterations fine-tune with the mask (and without L1).
    pub prune_at_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            opt: OptimizerConfig::default(),
            reg: RegularizerConfig::default(),
            fq: FakeQuantConfig::disabled(),
            l1_groups: vec![ParamGroup::Coupling],
            quant_groups: vec![ParamGroup::CdTaps],
            prune_at_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.opt.validate()?;
        self.reg.validate()?;
        if self.fq.enabled {
            self.fq.validate()?;
        }
        Ok(())
    }

    fn prune_iteration(&self) -> Option<usize> {
        (self.reg.prune_threshold > 0.0)
            .then(|| (self.prune_at_fraction * self.opt.max_iterations as f64).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub data_loss: f64,
    pub l1_penalty: f64,
    pub total_loss: f64,
    pub wall_seconds: f64,
}

mod loss_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Complete resumable state of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub params: ParamSet,
    pub opt_state: OptimizerState,
    pub best_params: ParamSet,
    /// Infinite until the first iteration; stored as `null` in JSON.
    #[serde(with = "loss_or_null")]
    pub best_loss: f64,
    pub history: Vec<HistoryRow>,
    pub pruned: Option<PruneReport>,
}

impl TrainState {
    pub fn new(init: ParamSet) -> Self {
        Self {
            iteration: 0,
            best_params: init.clone(),
            params: init,
            opt_state: OptimizerState::default(),
            best_loss: f64::INFINITY,
            history: vec![],
            pruned: None,
        }
    }
}

/// Data loss and gradient of one example.
pub fn example_gradient<O: Objective>(
    objective: &O,
    params: &ParamSet,
    fq: &FakeQuantConfig,
    quant_groups: &[ParamGroup],
    example: &O::Example,
) -> Result<(f64, GradRecord)> {
    let mut tape = Tape::new();
    let leaves = params.leaves(&mut tape);
    let mut nodes = leaves.clone();
    if fq.enabled {
        for (i, e) in params.entries().iter().enumerate() {
            if quant_groups.contains(&e.group) {
                let s = max_abs_scale(&e.values);
                nodes[i] = tape.fake_quant(leaves[i], fq, vec![s], e.values.len())?;
            }
        }
    }
    let loss = objective.loss(&mut tape, &nodes, example)?;
    let l = tape.value(loss).as_scalar()?;
    let grads = tape.backward(loss)?;
    Ok((l, GradRecord::from_tape(&grads, &leaves, params)))
}

/// Mean data loss and gradient over a batch. Examples are processed in
/// parallel; the reduction runs in batch order.
pub fn batch_gradient<O: Objective>(
    objective: &O,
    params: &ParamSet,
    fq: &FakeQuantConfig,
    quant_groups: &[ParamGroup],
    batch: &[O::Example],
) -> Result<(f64, GradRecord)> {
    let per: Vec<Result<(f64, GradRecord)>> = batch
        .par_iter()
        .map(|ex| example_gradient(objective, params, fq, quant_groups, ex))
        .collect();
    let mut total = GradRecord::zeros_like(params);
    let mut loss = 0.0;
    let w = 1.0 / batch.len().max(1) as f64;
    for r in per {
        let (l, g) = r?;
        loss += l * w;
        total.add_scaled(&g, w);
    }
    Ok((loss, total))
}

/// Runs iterations until `state.iteration == stop_at` (clamped to the budget).
pub fn train_until<O, D>(
    objective: &O,
    data: &D,
    cfg: &TrainConfig,
    state: &mut TrainState,
    stop_at: usize,
) -> Result<()>
where
    O: Objective,
    D: DataSource<Example = O::Example>,
{
    cfg.validate()?;
    let start = Instant::now();
    let elapsed0 = state.history.last().map_or(0.0, |h| h.wall_seconds);
    let stop = stop_at.min(cfg.opt.max_iterations);
    let prune_at = cfg.prune_iteration();
    while state.iteration < stop {
        let t = state.iteration;
        if prune_at == Some(t) && state.pruned.is_none() {
            let rep = state.params.prune(&cfg.l1_groups, cfg.reg.prune_threshold);
            state.pruned = Some(rep);
            // the moments of frozen entries must not move them
            state.opt_state = OptimizerState::default();
            state.best_loss = f64::INFINITY;
        }
        let batch = data.batch(t, cfg.opt.batch_size);
        let (data_loss, mut grad) =
            batch_gradient(objective, &state.params, &cfg.fq, &cfg.quant_groups, &batch)?;
        let mut penalty = 0.0;
        if cfg.reg.l1_weight > 0.0 && state.pruned.is_none() {
            for (i, e) in state.params.entries().iter().enumerate() {
                if cfg.l1_groups.contains(&e.group) {
                    let (p, g) = l1_penalty(&e.values, cfg.reg.l1_weight);
                    penalty += p;
                    for (a, b) in grad.values[i].iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        let total = data_loss + penalty;
        if !total.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                loss: total,
            });
        }
        for (e, g) in state.params.entries().iter().zip(grad.values.iter_mut()) {
            if let Some(m) = &e.mask {
                for (gv, frozen) in g.iter_mut().zip(m) {
                    if *frozen {
                        *gv = 0.0;
                    }
                }
            }
        }
        if total < state.best_loss {
            state.best_loss = total;
            state.best_params = state.params.clone();
        }
        state.history.push(HistoryRow {
            iteration: t,
            data_loss,
            l1_penalty: penalty,
            total_loss: total,
            wall_seconds: elapsed0 + start.elapsed().as_secs_f64(),
        });
        step(
            &mut state.params,
            &grad,
            cfg.opt.kind,
            cfg.opt.step_size_at(t),
            &mut state.opt_state,
        )?;
        state.iteration += 1;
    }
    Ok(())
}

/// Full training run from `init`.
pub fn train<O, D>(objective: &O, data: &D, init: ParamSet, cfg: &TrainConfig) -> Result<TrainState>
where
    O: Objective,
    D: DataSource<Example = O::Example>,
{
    let mut state = TrainState::new(init);
    train_until(objective, data, cfg, &mut state, cfg.opt.max_iterations)?;
    Ok(state)
}
