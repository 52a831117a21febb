//! Joint multilingual training: the per-step objective, SGD with
//! segment-length learning-rate scaling, and the validation schedule.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::corpus::{batchify, next_multilingual_segment, sample_segment_plan, BatchStream, Segment, VariableLength};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::graph::{Graph, Var};
use crate::model::{LanguageModel, SharingPattern};
use crate::params::{Gradients, ParamStore};
use crate::rng::{seeded, stream, Rng};
use crate::rnn::{DropoutConfig, DropoutMaskSet, LstmState};
use crate::tensor::Tensor;

/// The three model configurations compared in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    MonoLstm,
    MonoAwd,
    MultiAwd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MonoLstm, Variant::MonoAwd, Variant::MultiAwd];

    pub fn is_multilingual(self) -> bool {
        self == Variant::MultiAwd
    }

    /// Monolingual variants keep every layer language-specific.
    pub fn pattern(self, multilingual: SharingPattern) -> SharingPattern {
        if self.is_multilingual() {
            multilingual
        } else {
            SharingPattern::NONE_SHARED
        }
    }

    /// The plain LSTM baseline keeps only (per-timestep) input and output
    /// dropout and drops the activation penalties.
    pub fn configure(self, base: &TrainingConfig) -> TrainingConfig {
        let mut cfg = base.clone();
        if self == Variant::MonoLstm {
            cfg.dropout = DropoutConfig {
                input: base.dropout.input,
                output: base.dropout.output,
                hidden: 0.0,
                embedding: 0.0,
                embedding_per_batch_row: false,
                weight: 0.0,
                locked: false,
            };
            cfg.alpha = 0.0;
            cfg.beta = 0.0;
        }
        cfg
    }

    /// Row label in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::MonoLstm => "mono-LSTM",
            Variant::MonoAwd => "mono-AWD-LSTM",
            Variant::MultiAwd => "multi-AWD-LSTM",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MonoLstm => "mono-lstm",
            Variant::MonoAwd => "mono-awd",
            Variant::MultiAwd => "multi-awd",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mono-lstm" => Ok(Variant::MonoLstm),
            "mono-awd" | "mono-awd-lstm" => Ok(Variant::MonoAwd),
            "multi-awd" | "multi-awd-lstm" => Ok(Variant::MultiAwd),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected mono-lstm, mono-awd or multi-awd)"
            ))),
        }
    }
}

/// What happens when validation stops improving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Divide the learning rate by `anneal_factor`.
    Anneal,
    /// Switch to iterate averaging once, then stop.
    Averaging,
    /// Stop at the first plateau.
    EarlyStop,
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "anneal" => Ok(ScheduleMode::Anneal),
            "averaging" | "asgd" => Ok(ScheduleMode::Averaging),
            "early-stop" => Ok(ScheduleMode::EarlyStop),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Anneal => "anneal",
            ScheduleMode::Averaging => "averaging",
            ScheduleMode::EarlyStop => "early-stop",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub batch: usize,
    /// Base segment length.
    pub bptt: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub dropout: DropoutConfig,
    pub alpha: f64,
    pub beta: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub patience: usize,
    pub anneal_factor: f64,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    pub variable_length: bool,
    pub schedule: ScheduleMode,
    /// Batch size for validation perplexity.
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch: 20,
            bptt: 70,
            lr: 30.0,
            max_epochs: 200,
            dropout: DropoutConfig {
                input: 0.65,
                hidden: 0.3,
                output: 0.4,
                embedding: 0.1,
                embedding_per_batch_row: false,
                weight: 0.5,
                locked: true,
            },
            alpha: 2.0,
            beta: 1.0,
            clip: 0.25,
            patience: 5,
            anneal_factor: 4.0,
            min_lr: 1e-3,
            variable_length: true,
            schedule: ScheduleMode::Anneal,
            eval_batch: 10,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.dropout.validate()?;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.batch == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.bptt < VariableLength::default().min_len {
            return bad("base segment length must be at least 5");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip norm must be positive");
        }
        if self.anneal_factor.is_nan() || self.anneal_factor <= 1.0 {
            return bad("anneal factor must exceed 1");
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be at least 1");
        }
        Ok(())
    }
}

/// Scalar terms of one joint step, per language.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTerms {
    pub ce: Vec<f64>,
    pub ar: Vec<f64>,
    pub tar: Vec<f64>,
    pub total: f64,
}

/// Graph handles of the joint objective.
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub loss: Var,
    pub ce: Vec<Var>,
    pub ar: Vec<Option<Var>>,
    pub tar: Vec<Option<Var>>,
    /// Final `(h, c)` per language and layer.
    pub final_states: Vec<Vec<(Var, Var)>>,
}

impl JointLoss {
    pub fn terms(&self, g: &Graph<'_>) -> StepTerms {
        let val = |v: &Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
        StepTerms {
            ce: self.ce.iter().map(|&v| g.value(v).data()[0]).collect(),
            ar: self.ar.iter().map(val).collect(),
            tar: self.tar.iter().map(val).collect(),
            total: g.value(self.loss).data()[0],
        }
    }
}

/// Builds `(1/M)·Σ CE_l + Σ (AR_l + TAR_l)` over one segment per language.
///
/// AR is `(alpha/M)·mean(dropped²)` on the top-layer output after output
/// dropout; TAR is `(beta/M)·mean((h_{t+1} − h_t)²)` on the output before it.
pub fn joint_loss<M: LanguageModel>(
    g: &mut Graph<'_>,
    model: &M,
    segments: &[Segment],
    states: &[Vec<LstmState>],
    masks: &[DropoutMaskSet],
    alpha: f64,
    beta: f64,
) -> Result<JointLoss> {
    let m = model.num_languages();
    if segments.len() != m || states.len() != m || masks.len() != m {
        return Err(Error::Dimension {
            op: "joint_loss",
            lhs: vec![segments.len(), states.len(), masks.len()],
            rhs: vec![m],
        });
    }
    let len = segments[0].len;
    if let Some(bad) = segments.iter().find(|s| s.len != len) {
        return Err(Error::Dimension {
            op: "joint_loss(segment length)",
            lhs: vec![bad.len],
            rhs: vec![len],
        });
    }
    let per = 1.0 / m as f64;
    let mut ce = Vec::with_capacity(m);
    let mut ar = Vec::with_capacity(m);
    let mut tar = Vec::with_capacity(m);
    let mut final_states = Vec::with_capacity(m);
    let mut ce_sum: Option<Var> = None;
    let mut reg_sum: Option<Var> = None;
    for l in 0..m {
        let seg = &segments[l];
        let fwd = model.forward_language(g, l, seg, &states[l], &masks[l])?;
        let ce_l = g.softmax_cross_entropy(fwd.logits, &seg.targets)?;
        ce_sum = Some(match ce_sum {
            None => ce_l,
            Some(acc) => g.add(acc, ce_l)?,
        });
        ce.push(ce_l);

        let ar_l = if alpha > 0.0 {
            let ms = g.mean_square(fwd.dropped_output)?;
            Some(g.scale(ms, alpha * per)?)
        } else {
            None
        };
        let tar_l = if beta > 0.0 && seg.len > 1 {
            let rows = g.shape(fwd.raw_output)[0];
            let next = g.slice_rows(fwd.raw_output, seg.batch, rows)?;
            let prev = g.slice_rows(fwd.raw_output, 0, rows - seg.batch)?;
            let diff = g.sub(next, prev)?;
            let ms = g.mean_square(diff)?;
            Some(g.scale(ms, beta * per)?)
        } else {
            None
        };
        let reg_l = match (ar_l, tar_l) {
            (Some(a), Some(t)) => Some(g.add(a, t)?),
            (a, t) => a.or(t),
        };
        if let Some(r) = reg_l {
            reg_sum = Some(match reg_sum {
                None => r,
                Some(acc) => g.add(acc, r)?,
            });
        }
        ar.push(ar_l);
        tar.push(tar_l);
        final_states.push(fwd.final_states);
    }
    let ce_term = g.scale(ce_sum.expect("at least one language"), per)?;
    let loss = match reg_sum {
        Some(r) => g.add(ce_term, r)?,
        None => ce_term,
    };
    Ok(JointLoss {
        loss,
        ce,
        ar,
        tar,
        final_states,
    })
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub grads: Gradients,
    pub terms: StepTerms,
    /// Detached final states per language, to carry into the next segment.
    pub states: Vec<Vec<LstmState>>,
}

/// Forward and backward of the joint objective. `at` is `(epoch, step)`
/// for the diagnostic raised on a non-finite loss.
#[allow(clippy::too_many_arguments)]
pub fn joint_step<M: LanguageModel>(
    model: &M,
    segments: &[Segment],
    states: &[Vec<LstmState>],
    masks: &[DropoutMaskSet],
    alpha: f64,
    beta: f64,
    at: (usize, usize),
) -> Result<StepResult> {
    let mut g = Graph::with_params(model.store());
    let jl = joint_loss(&mut g, model, segments, states, masks, alpha, beta)?;
    let terms = jl.terms(&g);
    if !terms.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: at.0,
            step: at.1,
            losses: terms.ce.clone(),
        });
    }
    let states = jl
        .final_states
        .iter()
        .map(|layers| {
            layers
                .iter()
                .map(|&(h, c)| LstmState {
                    h: g.value(h).clone(),
                    c: g.value(c).clone(),
                })
                .collect()
        })
        .collect();
    let grads = g.backward(jl.loss)?;
    Ok(StepResult { grads, terms, states })
}

/// `p ← p − lr·g` for every parameter with a gradient.
pub fn sgd_update(store: &mut ParamStore, grads: &Gradients, lr: f64) {
    for (id, grad) in grads.iter() {
        let p = store.get_mut(id);
        for (w, d) in p.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * d;
        }
    }
}

/// Running mean of parameters, for the averaging tail of the schedule.
#[derive(Clone, Debug)]
pub struct ParamAverage {
    sum: Vec<Tensor>,
    count: usize,
}

impl ParamAverage {
    pub fn new(store: &ParamStore) -> Self {
        ParamAverage {
            sum: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
            count: 0,
        }
    }

    pub fn accumulate(&mut self, store: &ParamStore) {
        for (acc, id) in self.sum.iter_mut().zip(store.ids()) {
            for (a, v) in acc.data_mut().iter_mut().zip(store.get(id).data()) {
                *a += v;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// A copy of `store` holding the averaged values.
    pub fn averaged(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        if self.count == 0 {
            return out;
        }
        let ids: Vec<_> = out.ids().collect();
        for (acc, id) in self.sum.iter().zip(ids) {
            let n = self.count as f64;
            let avg = acc.map(|v| v / n);
            out.get_mut(id).data_mut().copy_from_slice(avg.data());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Continue,
    Anneal,
    SwitchToAveraging,
    Stop,
}

/// Epoch-level patience schedule over a validation metric (lower is better).
#[derive(Clone, Debug)]
pub struct Scheduler {
    mode: ScheduleMode,
    patience: usize,
    factor: f64,
    min_lr: f64,
    max_epochs: usize,
    history: Vec<f64>,
    best: Option<usize>,
    since_best: usize,
    averaging: bool,
}

impl Scheduler {
    pub fn new(cfg: &TrainingConfig) -> Self {
        Scheduler {
            mode: cfg.schedule,
            patience: cfg.patience,
            factor: cfg.anneal_factor,
            min_lr: cfg.min_lr,
            max_epochs: cfg.max_epochs,
            history: Vec::new(),
            best: None,
            since_best: 0,
            averaging: false,
        }
    }

    /// Records one epoch's metric and decides what to do next; may lower `lr`.
    pub fn observe(&mut self, metric: f64, lr: &mut f64) -> Action {
        self.history.push(metric);
        let improved = match self.best {
            None => true,
            Some(b) => metric < self.history[b],
        };
        if improved {
            self.best = Some(self.history.len() - 1);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        if self.history.len() >= self.max_epochs {
            return Action::Stop;
        }
        if self.patience > 0 && self.since_best >= self.patience {
            self.since_best = 0;
            return match self.mode {
                ScheduleMode::Anneal => {
                    *lr /= self.factor;
                    if *lr < self.min_lr {
                        Action::Stop
                    } else {
                        Action::Anneal
                    }
                }
                ScheduleMode::Averaging if !self.averaging => {
                    self.averaging = true;
                    Action::SwitchToAveraging
                }
                ScheduleMode::Averaging | ScheduleMode::EarlyStop => Action::Stop,
            };
        }
        Action::Continue
    }

    pub fn averaging(&self) -> bool {
        self.averaging
    }

    /// 1-based epoch with the lowest metric (earliest on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b + 1)
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

/// Which validation perplexity drives the schedule and model selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Mean over all languages.
    MeanAll,
    /// One language only (the sweep target).
    Language(usize),
}

impl Selection {
    pub fn metric(self, ppl: &[f64]) -> f64 {
        match self {
            Selection::MeanAll => ppl.iter().sum::<f64>() / ppl.len() as f64,
            Selection::Language(l) => ppl[l],
        }
    }
}

/// Mutable state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    plan_rng: Rng,
    dropout_rng: Rng,
    pub average: Option<ParamAverage>,
}

impl TrainState {
    pub fn new(cfg: &TrainingConfig) -> Self {
        TrainState {
            epoch: 0,
            lr: cfg.lr,
            steps: 0,
            plan_rng: seeded(cfg.seed, stream::SEGMENT_PLAN),
            dropout_rng: seeded(cfg.seed, stream::DROPOUT),
            average: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy per language over the epoch's steps.
    pub train_ce: Vec<f64>,
    /// Mean over steps of `(1/M)·Σ CE_l`.
    pub mean_ce_term: f64,
    /// Mean of the full objective.
    pub mean_objective: f64,
    pub steps: usize,
    /// Largest pre-clip gradient norm seen.
    pub max_grad_norm: f64,
    pub seconds: f64,
}

/// One pass over the data: as many segments as the longest stream's row
/// needs, with shorter streams wrapping around.
pub fn train_epoch<M: LanguageModel>(
    model: &mut M,
    streams: &mut [BatchStream],
    cfg: &TrainingConfig,
    state: &mut TrainState,
) -> Result<EpochStats> {
    let m = model.num_languages();
    if streams.len() != m {
        return Err(Error::Dimension {
            op: "train_epoch(streams)",
            lhs: vec![streams.len()],
            rhs: vec![m],
        });
    }
    let start = Instant::now();
    state.epoch += 1;
    streams.iter_mut().for_each(BatchStream::reset);
    let longest = streams.iter().map(BatchStream::row_len).max().unwrap_or(0);
    let order = model.canonical_order();
    let scheme = VariableLength::default();
    let mut hidden: Vec<Vec<LstmState>> = (0..m).map(|_| model.zero_state(cfg.batch)).collect();

    let mut ce_sum = vec![0.0; m];
    let mut ce_term_sum = 0.0;
    let mut objective_sum = 0.0;
    let mut max_norm: f64 = 0.0;
    let mut consumed = 0;
    let mut steps = 0;
    while consumed < longest {
        let plan = sample_segment_plan(&mut state.plan_rng, cfg.bptt, !cfg.variable_length, &scheme)?;
        let segments = next_multilingual_segment(streams, &plan)?;
        let masks = (0..m)
            .map(|l| {
                DropoutMaskSet::sample(&cfg.dropout, &model.mask_shapes(l, cfg.batch, plan.len), &mut state.dropout_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = joint_step(
            &*model,
            &segments,
            &hidden,
            &masks,
            cfg.alpha,
            cfg.beta,
            (state.epoch, steps + 1),
        )?;
        let norm = out.grads.clip_in_order(&order, cfg.clip);
        max_norm = max_norm.max(norm);
        sgd_update(model.store_mut(), &out.grads, state.lr * plan.lr_scale);
        if let Some(avg) = state.average.as_mut() {
            avg.accumulate(model.store());
        }
        hidden = std::mem::take(&mut out.states);

        let mut step_ce = 0.0;
        for (acc, &c) in ce_sum.iter_mut().zip(&out.terms.ce) {
            *acc += c;
            step_ce += c;
        }
        ce_term_sum += step_ce / m as f64;
        objective_sum += out.terms.total;
        consumed += plan.len;
        steps += 1;
        state.steps += 1;
    }
    let n = steps as f64;
    Ok(EpochStats {
        epoch: state.epoch,
        train_ce: ce_sum.iter().map(|s| s / n).collect(),
        mean_ce_term: ce_term_sum / n,
        mean_objective: objective_sum / n,
        steps,
        max_grad_norm: max_norm,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Validation perplexity per language, using averaged parameters when
/// averaging is active. Languages the selection does not look at are skipped
/// and reported as NaN.
pub fn validate<M: LanguageModel>(
    model: &mut M,
    valid: &[&[u32]],
    cfg: &TrainingConfig,
    state: &TrainState,
    selection: Selection,
) -> Result<Vec<f64>> {
    let swapped = state.average.as_ref().map(|avg| avg.averaged(model.store()));
    let mut saved = None;
    if let Some(avg) = swapped {
        saved = Some(std::mem::replace(model.store_mut(), avg));
    }
    let result = valid
        .iter()
        .enumerate()
        .map(|(l, s)| match selection {
            Selection::Language(t) if t != l => Ok(f64::NAN),
            _ => perplexity(&*model, l, s, cfg.eval_batch, cfg.bptt),
        })
        .collect::<Result<Vec<_>>>();
    if let Some(orig) = saved {
        *model.store_mut() = orig;
    }
    result
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_ce: Vec<f64>,
    pub valid_ppl: Vec<f64>,
    pub lr: f64,
    pub action: Action,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Parameters of the best epoch (already written back into the model).
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_valid: Vec<f64>,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

/// Trains until the schedule stops, then restores the best epoch's
/// parameters into `model`.
pub fn train<M: LanguageModel>(
    model: &mut M,
    train_streams: &[&[u32]],
    valid_streams: &[&[u32]],
    cfg: &TrainingConfig,
    selection: Selection,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let m = model.num_languages();
    if train_streams.len() != m || valid_streams.len() != m {
        return Err(Error::Config(format!(
            "{} languages in the model but {} training and {} validation streams",
            m,
            train_streams.len(),
            valid_streams.len()
        )));
    }
    if let Selection::Language(l) = selection {
        if l >= m {
            return Err(Error::UnknownLanguage(format!("#{l}")));
        }
    }
    let mut streams = train_streams
        .iter()
        .enumerate()
        .map(|(l, s)| batchify(s, cfg.batch, l))
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrainState::new(cfg);
    let mut scheduler = Scheduler::new(cfg);
    let mut best: Option<(ParamStore, Vec<f64>)> = None;
    let mut log = Vec::new();
    loop {
        let stats = train_epoch(model, &mut streams, cfg, &mut state)?;
        let valid_ppl = validate(model, valid_streams, cfg, &state, selection)?;
        let lr_used = state.lr;
        let metric = selection.metric(&valid_ppl);
        let action = scheduler.observe(metric, &mut state.lr);
        if scheduler.best_epoch() == Some(state.epoch) {
            let params = match &state.average {
                Some(avg) => avg.averaged(model.store()),
                None => model.store().clone(),
            };
            best = Some((params, valid_ppl.clone()));
        }
        if action == Action::SwitchToAveraging {
            state.average = Some(ParamAverage::new(model.store()));
        }
        let entry = EpochLog {
            epoch: state.epoch,
            train_ce: stats.train_ce,
            valid_ppl,
            lr: lr_used,
            action,
            seconds: stats.seconds,
        };
        on_epoch(&entry);
        log.push(entry);
        if action == Action::Stop {
            break;
        }
    }
    let (best_params, best_valid) = best.expect("the first epoch is always an improvement");
    *model.store_mut() = best_params.clone();
    Ok(RunOutcome {
        best_params,
        best_epoch: scheduler.best_epoch().unwrap_or(1),
        best_valid,
        epochs_run: state.epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LanguageSpec, ModelConfig, MultilingualModel};

    fn tiny(m: usize) -> MultilingualModel {
        let languages = (0..m)
            .map(|l| LanguageSpec {
                name: format!("l{l}"),
                vocab: 6 + l,
            })
            .collect();
        MultilingualModel::build(
            ModelConfig {
                embedding: 4,
                hidden: 5,
                pattern: SharingPattern::PROPOSED,
                languages,
            },
            3,
        )
        .unwrap()
    }

    fn seg(batch: usize, len: usize, vocab: usize, offset: usize) -> Segment {
        Segment {
            batch,
            len,
            inputs: (0..batch * len).map(|i| (i + offset) % vocab).collect(),
            targets: (0..batch * len).map(|i| (i * 7 + offset + 1) % vocab).collect(),
        }
    }

    #[test]
    fn loss_is_mean_of_language_ce_without_penalties() {
        let model = tiny(2);
        let segs = vec![seg(2, 3, 6, 0), seg(2, 3, 7, 1)];
        let states: Vec<_> = (0..2).map(|_| model.zero_state(2)).collect();
        let masks = vec![DropoutMaskSet::none(3), DropoutMaskSet::none(3)];
        let mut g = Graph::with_params(model.store());
        let jl = joint_loss(&mut g, &model, &segs, &states, &masks, 0.0, 0.0).unwrap();
        let t = jl.terms(&g);
        assert_eq!(t.total, (t.ce[0] + t.ce[1]) * 0.5);
        assert!(jl.ar.iter().all(Option::is_none));
    }

    #[test]
    fn unequal_segment_lengths_rejected() {
        let model = tiny(2);
        let segs = vec![seg(2, 3, 6, 0), seg(2, 4, 7, 1)];
        let states: Vec<_> = (0..2).map(|_| model.zero_state(2)).collect();
        let masks = vec![DropoutMaskSet::none(3), DropoutMaskSet::none(3)];
        let mut g = Graph::with_params(model.store());
        assert!(joint_loss(&mut g, &model, &segs, &states, &masks, 0.0, 0.0).is_err());
    }

    #[test]
    fn ar_on_known_activations() {
        // alpha·mean(square) with activations ±0.5 and M = 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![0.5, -0.5, 0.5, -0.5]).unwrap());
        let ms = g.mean_square(x).unwrap();
        let ar = g.scale(ms, 2.0).unwrap();
        assert_eq!(g.value(ar).data()[0], 0.5);
    }

    #[test]
    fn scheduler_continues_while_improving() {
        let cfg = TrainingConfig::default();
        let mut s = Scheduler::new(&cfg);
        let mut lr = 30.0;
        for e in 0..20 {
            assert_eq!(s.observe(100.0 - e as f64, &mut lr), Action::Continue);
        }
        assert_eq!(lr, 30.0);
    }

    #[test]
    fn scheduler_anneals_after_patience() {
        let cfg = TrainingConfig::default();
        let mut s = Scheduler::new(&cfg);
        let mut lr = 30.0;
        for e in 1..=10 {
            assert_eq!(s.observe(100.0 - e as f64, &mut lr), Action::Continue);
        }
        for e in 11..=14 {
            assert_eq!(s.observe(95.0, &mut lr), Action::Continue, "epoch {e}");
        }
        assert_eq!(s.observe(95.0, &mut lr), Action::Anneal);
        assert_eq!(lr, 7.5);
        assert_eq!(s.best_epoch(), Some(10));
    }

    #[test]
    fn scheduler_stops_on_lr_underflow_and_max_epochs() {
        let cfg = TrainingConfig {
            patience: 1,
            ..TrainingConfig::default()
        };
        let mut s = Scheduler::new(&cfg);
        let mut lr = 30.0;
        s.observe(1.0, &mut lr);
        let mut anneals = 0;
        loop {
            match s.observe(2.0, &mut lr) {
                Action::Anneal => anneals += 1,
                Action::Stop => break,
                other => panic!("{other:?}"),
            }
        }
        // 30 / 4^8 < 1e-3 <= 30 / 4^7
        assert_eq!(anneals, 7);

        let cfg = TrainingConfig {
            max_epochs: 3,
            ..TrainingConfig::default()
        };
        let mut s = Scheduler::new(&cfg);
        assert_eq!(s.observe(3.0, &mut lr), Action::Continue);
        assert_eq!(s.observe(2.0, &mut lr), Action::Continue);
        assert_eq!(s.observe(1.0, &mut lr), Action::Stop);
    }

    #[test]
    fn scheduler_averaging_mode() {
        let cfg = TrainingConfig {
            patience: 2,
            schedule: ScheduleMode::Averaging,
            ..TrainingConfig::default()
        };
        let mut s = Scheduler::new(&cfg);
        let mut lr = 30.0;
        let actions: Vec<_> = [5.0, 6.0, 6.0, 6.0, 6.0].iter().map(|&v| s.observe(v, &mut lr)).collect();
        assert_eq!(
            actions,
            [Action::Continue, Action::Continue, Action::SwitchToAveraging, Action::Continue, Action::Stop]
        );
        assert!(s.averaging());
        assert_eq!(lr, 30.0);
    }

    #[test]
    fn best_epoch_is_argmin() {
        let cfg = TrainingConfig::default();
        let mut s = Scheduler::new(&cfg);
        let mut lr = 30.0;
        for v in [120.0, 110.0, 115.0] {
            s.observe(v, &mut lr);
        }
        assert_eq!(s.best_epoch(), Some(2));
    }

    #[test]
    fn lr_scaled_by_segment_length() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.0]));
        let grads = Gradients::new(vec![Some(Tensor::vector(vec![1.0]))]);
        let plan = crate::corpus::SegmentPlan::from_draw(70, 35.0, &VariableLength::default());
        sgd_update(&mut store, &grads, 30.0 * plan.lr_scale);
        assert_eq!(store.get(id).data()[0], -15.0);
    }

    #[test]
    fn epoch_segment_count() {
        let mut model = tiny(1);
        let data: Vec<u32> = (0..1400).map(|i| (i % 6) as u32).collect();
        let cfg = TrainingConfig {
            batch: 2,
            variable_length: false,
            ..TrainingConfig::default()
        };
        let mut streams = vec![batchify(&data, 2, 0).unwrap()];
        let mut state = TrainState::new(&cfg);
        let stats = train_epoch(&mut model, &mut streams, &cfg, &mut state).unwrap();
        assert_eq!(stats.steps, 10);
        assert!(stats.train_ce.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn variant_parsing_and_configuration() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        let base = TrainingConfig::default();
        let lstm = Variant::MonoLstm.configure(&base);
        assert_eq!((lstm.alpha, lstm.beta, lstm.dropout.weight), (0.0, 0.0, 0.0));
        assert!(!lstm.dropout.locked);
        assert_eq!(lstm.dropout.input, 0.65);
        assert_eq!(Variant::MonoAwd.configure(&base), base);
        assert_eq!(Variant::MonoAwd.pattern(SharingPattern::PROPOSED), SharingPattern::NONE_SHARED);
    }
}
