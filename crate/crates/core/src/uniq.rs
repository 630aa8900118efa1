//! Ratio-corrected inverse soft-Q learning with weighted behaviour cloning.
//!
//! The trainer minimises, over a Q-table,
//!
//! ```text
//! F̃(Q) = Σᵢ wᵢ [τ(sᵢ,aᵢ) rᵢ + ψ(rᵢ)] − (1 − γ) mean_heads V(s₀)
//! rᵢ   = Q(sᵢ,aᵢ) − γ (1 − doneᵢ) V(s'ᵢ)
//! ```
//!
//! over the mixed dataset, where `τ ≈ ρ_un/ρ_mix` comes from [`crate::ratio`],
//! and extracts a policy by maximising `Σ N̂(s,a) min(e^{A(s,a)}, cap) log π(a|s)`
//! alongside the Q updates.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{transition_weights, OccupancyWeighting, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::mdp::{logsumexp, softmax_policy, QTable, Table, TabularPolicy};
use crate::optim::{OptimizerKind, Stepper};
use crate::psi::Regularizer;
use crate::ratio::{fit_ratio, RatioConfig, RatioEstimate};

/// Objective magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

/// Which actions enter `V^Q(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    /// Log-sum-exp over the whole action set.
    #[default]
    Full,
    /// Log-sum-exp over the actions observed at `s` in the training data
    /// (all actions for states with no observations).
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniqConfig {
    pub steps: usize,
    pub lr_q: f64,
    pub lr_policy: f64,
    /// Overrides the datasets' discount when set.
    pub discount: Option<f64>,
    pub psi: Regularizer,
    pub wbc_weight_cap: f64,
    pub occupancy_weighting: OccupancyWeighting,
    pub value_mode: ValueMode,
    pub optimizer: OptimizerKind,
    /// Minibatch size; full batch when unset.
    pub batch_size: Option<usize>,
    pub checkpoint_every: usize,
    pub ratio: RatioConfig,
}

impl Default for UniqConfig {
    fn default() -> Self {
        Self {
            steps: 3_000,
            lr_q: 0.05,
            lr_policy: 1.0,
            discount: None,
            psi: Regularizer::quadratic(0.5),
            wbc_weight_cap: 10f64.exp(),
            occupancy_weighting: OccupancyWeighting::Discounted,
            value_mode: ValueMode::Full,
            optimizer: OptimizerKind::Adam,
            batch_size: None,
            checkpoint_every: 100,
            ratio: RatioConfig::default(),
        }
    }
}

impl UniqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.lr_q > 0.0) || !(self.lr_policy > 0.0) || !(self.ratio.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(g) = self.discount {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("discount {g} outside (0, 1)")));
            }
        }
        if !(self.wbc_weight_cap > 0.0) {
            return Err(Error::Config("wbc_weight_cap must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn discount_for(&self, dataset: &TrajectoryDataset) -> f64 {
        self.discount.unwrap_or(dataset.discount())
    }
}

/// A unique `(s, a, s', done)` with its summed occupancy weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub done: bool,
    pub weight: f64,
}

/// Weighted transitions and initial states in the form the objectives consume.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    items: Vec<BatchItem>,
    heads: Vec<(usize, f64)>,
    action_mask: Option<Array2<bool>>,
    num_states: usize,
    num_actions: usize,
}

impl TransitionBatch {
    /// Aggregates a dataset with [`transition_weights`]; heads are weighted
    /// equally per trajectory. Terminated episodes are not renormalised, so
    /// on them `Σ w r − (1 − γ) mean V(s₀)` telescopes to `Σ w (Q − V)`.
    pub fn from_dataset(dataset: &TrajectoryDataset, weighting: OccupancyWeighting, mode: ValueMode) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("transition batch"));
        }
        let weights = transition_weights(dataset, weighting);
        let mut agg: BTreeMap<(usize, usize, usize, bool), f64> = BTreeMap::new();
        for ((_, tr), w) in dataset.steps().zip(weights) {
            *agg.entry((tr.s, tr.a, tr.s_next, tr.done)).or_insert(0.0) += w;
        }
        let items = agg
            .into_iter()
            .map(|((s, a, s_next, done), weight)| BatchItem {
                s,
                a,
                s_next,
                done,
                weight,
            })
            .collect();
        let starts: Vec<usize> = dataset
            .trajectories()
            .iter()
            .filter_map(|t| t.initial_state())
            .collect();
        let mut head_agg: BTreeMap<usize, f64> = BTreeMap::new();
        for &s in &starts {
            *head_agg.entry(s).or_insert(0.0) += 1.0 / starts.len() as f64;
        }
        Self::from_parts(
            items,
            head_agg.into_iter().collect(),
            dataset.num_states(),
            dataset.num_actions(),
            mode,
        )
    }

    /// Builds a batch from explicit items and heads. In [`ValueMode::Sampled`]
    /// the action sets come from the items.
    pub fn from_parts(
        items: Vec<BatchItem>,
        heads: Vec<(usize, f64)>,
        num_states: usize,
        num_actions: usize,
        mode: ValueMode,
    ) -> Result<Self> {
        if items.is_empty() || heads.is_empty() {
            return Err(Error::EmptyDataset("transition batch"));
        }
        let in_range = |s: usize| s < num_states;
        if items
            .iter()
            .any(|it| !in_range(it.s) || !in_range(it.s_next) || it.a >= num_actions || !(it.weight >= 0.0))
            || heads.iter().any(|&(s, w)| !in_range(s) || !(w >= 0.0))
        {
            return Err(Error::Domain("batch entry out of range".into()));
        }
        let action_mask = match mode {
            ValueMode::Full => None,
            ValueMode::Sampled => {
                let mut m = Array2::from_elem((num_states, num_actions), false);
                for it in &items {
                    m[[it.s, it.a]] = true;
                }
                Some(m)
            }
        };
        Ok(Self {
            items,
            heads,
            action_mask,
            num_states,
            num_actions,
        })
    }

    pub fn items(&self) -> &[BatchItem] {
        &self.items
    }
    pub fn heads(&self) -> &[(usize, f64)] {
        &self.heads
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Summed item weight per `(s, a)`.
    pub fn pair_weights(&self) -> Table {
        let mut w = Array2::zeros((self.num_states, self.num_actions));
        for it in &self.items {
            w[[it.s, it.a]] += it.weight;
        }
        w
    }

    fn allowed(&self, s: usize) -> Option<ndarray::ArrayView1<'_, bool>> {
        self.action_mask
            .as_ref()
            .map(|m| m.row(s))
            .filter(|row| row.iter().any(|&b| b))
    }

    /// `V^Q` under this batch's value mode.
    pub fn values(&self, q: &Table) -> Array1<f64> {
        (0..self.num_states)
            .map(|s| match self.allowed(s) {
                None => logsumexp(q.row(s).iter().copied()),
                Some(mask) => logsumexp(q.row(s).iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&x, _)| x)),
            })
            .collect()
    }

    /// `∂V^Q(s)/∂Q(s, ·)`: the softmax over the admissible actions.
    pub fn value_gradients(&self, q: &Table, v: &Array1<f64>) -> Table {
        Array2::from_shape_fn((self.num_states, self.num_actions), |(s, a)| match self.allowed(s) {
            Some(mask) if !mask[a] => 0.0,
            _ => (q[[s, a]] - v[s]).exp(),
        })
    }

    /// Implied rewards `Q(s,a) − γ(1 − done)V(s')`, one per item.
    pub fn implied_rewards(&self, q: &Table, v: &Array1<f64>, discount: f64) -> Vec<f64> {
        self.items
            .iter()
            .map(|it| {
                let next = if it.done { 0.0 } else { v[it.s_next] };
                q[[it.s, it.a]] - discount * next
            })
            .collect()
    }

    /// `Σ_h w_h V(h)`.
    pub fn head_value(&self, v: &Array1<f64>) -> f64 {
        self.heads.iter().map(|&(s, w)| w * v[s]).sum()
    }

    /// Gradient of `Σᵢ cᵢ rᵢ − head_coef · Σ_h w_h V(h)` with respect to `Q`,
    /// given per-item coefficients `cᵢ`.
    pub fn chain_gradient(&self, q: &Table, v: &Array1<f64>, coefs: &[f64], discount: f64, head_coef: f64) -> Table {
        let dv = self.value_gradients(q, v);
        let mut grad = Array2::zeros((self.num_states, self.num_actions));
        let mut through_v = Array1::<f64>::zeros(self.num_states);
        for (it, &c) in self.items.iter().zip(coefs) {
            grad[[it.s, it.a]] += c;
            if !it.done {
                through_v[it.s_next] -= discount * c;
            }
        }
        for &(s, w) in &self.heads {
            through_v[s] -= head_coef * w;
        }
        for s in 0..self.num_states {
            if through_v[s] != 0.0 {
                for a in 0..self.num_actions {
                    grad[[s, a]] += through_v[s] * dv[[s, a]];
                }
            }
        }
        grad
    }

    /// `b` items drawn with replacement proportionally to weight, each with
    /// weight `1/b`; heads are kept whole.
    pub fn subsample(&self, b: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = WeightedIndex::new(self.items.iter().map(|it| it.weight)).expect("positive batch weights");
        let items = (0..b)
            .map(|_| BatchItem {
                weight: 1.0 / b as f64,
                ..self.items[dist.sample(rng)]
            })
            .collect();
        Self {
            items,
            heads: self.heads.clone(),
            action_mask: self.action_mask.clone(),
            num_states: self.num_states,
            num_actions: self.num_actions,
        }
    }
}

/// `F̃(Q)` on a batch, with `ψ` applied per sample.
pub fn f_objective(
    q: &QTable,
    ratio: &RatioEstimate,
    batch: &TransitionBatch,
    discount: f64,
    psi: &Regularizer,
) -> f64 {
    let q = q.values();
    let v = batch.values(q);
    let r = batch.implied_rewards(q, &v, discount);
    let data: f64 = batch
        .items()
        .iter()
        .zip(&r)
        .map(|(it, &ri)| it.weight * (ratio.tau[[it.s, it.a]] * ri + psi.value(ri)))
        .sum();
    data - (1.0 - discount) * batch.head_value(&v)
}

/// `∇_Q F̃`.
pub fn f_gradient(
    q: &QTable,
    ratio: &RatioEstimate,
    batch: &TransitionBatch,
    discount: f64,
    psi: &Regularizer,
) -> Table {
    f_value_and_gradient(q.values(), &ratio.tau, batch, discount, psi).1
}

fn f_value_and_gradient(
    q: &Table,
    tau: &Table,
    batch: &TransitionBatch,
    discount: f64,
    psi: &Regularizer,
) -> (f64, Table) {
    let v = batch.values(q);
    let r = batch.implied_rewards(q, &v, discount);
    let mut value = 0.0;
    let coefs: Vec<f64> = batch
        .items()
        .iter()
        .zip(&r)
        .map(|(it, &ri)| {
            let t = tau[[it.s, it.a]];
            value += it.weight * (t * ri + psi.value(ri));
            it.weight * (t + psi.derivative(ri))
        })
        .collect();
    value -= (1.0 - discount) * batch.head_value(&v);
    (value, batch.chain_gradient(q, &v, &coefs, discount, 1.0 - discount))
}

/// Q-table with its objective trace.
#[derive(Debug, Clone, PartialEq)]
pub struct QFit {
    pub q: QTable,
    /// `(step, F̃)` at every checkpoint.
    pub trace: Vec<(usize, f64)>,
}

/// Gradient descent on `F̃` alone.
pub fn train_q(dataset_mix: &TrajectoryDataset, ratio: &RatioEstimate, config: &UniqConfig, seed: u64) -> Result<QFit> {
    config.validate()?;
    let batch = TransitionBatch::from_dataset(dataset_mix, config.occupancy_weighting, config.value_mode)?;
    check_ratio_shape(ratio, &batch)?;
    let discount = config.discount_for(dataset_mix);
    let psi = config.psi;
    let run = descend_q(&batch, config, seed, false, |q, b| {
        f_value_and_gradient(q, &ratio.tau, b, discount, &psi)
    })?;
    Ok(QFit {
        q: run.q,
        trace: run.trace.iter().map(|p| (p.step, p.f_value)).collect(),
    })
}

fn check_ratio_shape(ratio: &RatioEstimate, batch: &TransitionBatch) -> Result<()> {
    if ratio.tau.dim() != (batch.num_states(), batch.num_actions()) {
        return Err(Error::InvalidTable(format!(
            "ratio shape {:?} does not match data {}×{}",
            ratio.tau.dim(),
            batch.num_states(),
            batch.num_actions()
        )));
    }
    Ok(())
}

/// WBC weights `N̂(s,a) · min(e^{A(s,a)}, cap)` with `A = Q − V`.
pub fn wbc_weights(q: &Table, v: &Array1<f64>, counts: &Table, weight_cap: f64) -> Table {
    Array2::from_shape_fn(q.dim(), |(s, a)| {
        let n = counts[[s, a]];
        if n == 0.0 {
            0.0
        } else {
            n * (q[[s, a]] - v[s]).exp().min(weight_cap)
        }
    })
}

/// Maximiser of `Σ W(s,a) log π(a|s)`: rows proportional to `W`, rows without
/// weight taken from `fallback`.
pub fn weighted_mle(weights: &Table, fallback: &TabularPolicy) -> TabularPolicy {
    let mut probs = fallback.probs().clone();
    for (s, row) in weights.outer_iter().enumerate() {
        let z: f64 = row.sum();
        if z > 0.0 {
            probs.row_mut(s).assign(&row.mapv(|w| w / z));
        }
    }
    TabularPolicy::new(probs).expect("normalised rows")
}

/// WBC where every `(s, a)` carries weight one. Its maximiser is exactly
/// `softmax_policy(q)`.
pub fn wbc_exact(q: &QTable, weight_cap: f64) -> TabularPolicy {
    let v = crate::mdp::soft_value_of_q(q);
    let ones = Array2::ones(q.values().dim());
    weighted_mle(&wbc_weights(q.values(), &v, &ones, weight_cap), &softmax_policy(q))
}

/// Closed-form data-weighted WBC: `π(a|s) ∝ N̂(s,a) e^{A(s,a)}`, rows with no
/// data falling back to `softmax_policy(q)`.
pub fn wbc_closed_form(q: &QTable, counts: &Table, weight_cap: f64) -> TabularPolicy {
    let v = crate::mdp::soft_value_of_q(q);
    weighted_mle(&wbc_weights(q.values(), &v, counts, weight_cap), &softmax_policy(q))
}

/// Normalised weighted negative log-likelihood `−Σ W log π / Σ W`.
pub fn weighted_nll(weights: &Table, probs: &Table) -> f64 {
    let z = weights.sum();
    if z == 0.0 {
        return 0.0;
    }
    -weights
        .iter()
        .zip(probs.iter())
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &p)| w * p.ln())
        .sum::<f64>()
        / z
}

/// One ascent step on the per-state normalised log-likelihood
/// `Σ_s Σ_a W̄(s,a) log π(a|s)`, `W̄` being `W` with rows scaled to sum to one.
/// Same maximiser as the unnormalised objective; rows without weight are left
/// untouched.
pub(crate) fn policy_logit_step(logits: &mut Table, weights: &Table, lr: f64) {
    for (mut lrow, wrow) in logits.outer_iter_mut().zip(weights.outer_iter()) {
        let z: f64 = wrow.sum();
        if z <= 0.0 {
            continue;
        }
        let m = lrow.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let e = lrow.mapv(|x| (x - m).exp());
        let ez = e.sum();
        for a in 0..lrow.len() {
            lrow[a] += lr * (wrow[a] / z - e[a] / ez);
        }
    }
}

/// Policy from logits; rows without data copy `fallback`.
pub(crate) fn finish_policy(logits: &Table, counts: &Table, fallback: &TabularPolicy) -> TabularPolicy {
    let learned = TabularPolicy::from_logits(logits);
    let mut probs = learned.probs().clone();
    for s in 0..probs.nrows() {
        if counts.row(s).sum() == 0.0 {
            probs.row_mut(s).assign(&fallback.probs().row(s));
        }
    }
    TabularPolicy::new(probs).expect("normalised rows")
}

/// Gradient-based data-weighted WBC for a fixed Q, from uniform logits.
pub fn wbc_extract(
    q: &QTable,
    dataset: &TrajectoryDataset,
    weighting: OccupancyWeighting,
    lr: f64,
    steps: usize,
    weight_cap: f64,
) -> Result<TabularPolicy> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("weighted behaviour cloning"));
    }
    let counts = crate::dataset::empirical_occupancy(dataset, weighting)?;
    let v = crate::mdp::soft_value_of_q(q);
    let w = wbc_weights(q.values(), &v, &counts, weight_cap);
    let mut logits = Array2::zeros(q.values().dim());
    for _ in 0..steps {
        policy_logit_step(&mut logits, &w, lr);
    }
    Ok(finish_policy(&logits, &counts, &softmax_policy(q)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub f_value: f64,
    pub wbc_loss: f64,
}

/// Renders a trace as `step,f_value,wbc_loss` CSV.
pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,f_value,wbc_loss\n");
    for p in trace {
        out.push_str(&format!(
            "{},{},{}\n",
            p.step,
            crate::json::format_f64(p.f_value),
            crate::json::format_f64(p.wbc_loss)
        ));
    }
    out
}

/// Result of a joint Q / policy run.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct QRun {
    pub q: QTable,
    pub policy: TabularPolicy,
    pub trace: Vec<TracePoint>,
}

/// Shared training loop: descent on Q with the objective supplied by
/// `eval` (returning the reported value and the descent gradient), and,
/// when `with_policy` is set, a WBC step on the batch's own data after every
/// Q step.
pub(crate) fn descend_q<F>(
    batch: &TransitionBatch,
    config: &UniqConfig,
    seed: u64,
    with_policy: bool,
    eval: F,
) -> Result<QRun>
where
    F: Fn(&Table, &TransitionBatch) -> (f64, Table),
{
    let shape = (batch.num_states(), batch.num_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::zeros(shape);
    let mut logits = Array2::zeros(shape);
    let counts = batch.pair_weights();
    let mut stepper = Stepper::new(config.optimizer, config.lr_q, shape);
    let every = config.checkpoint_every.max(1);
    let mut trace = Vec::new();
    for step in 0..=config.steps {
        let checkpoint = step % every == 0 || step == config.steps;
        let full = if checkpoint || config.batch_size.is_none() {
            Some(eval(&q, batch))
        } else {
            None
        };
        if let Some((value, _)) = &full {
            if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { step, value: *value });
            }
        }
        if checkpoint {
            let value = full.as_ref().map(|f| f.0).unwrap_or(f64::NAN);
            let wbc_loss = if with_policy {
                let v = batch.values(&q);
                let w = wbc_weights(&q, &v, &counts, config.wbc_weight_cap);
                weighted_nll(&w, TabularPolicy::from_logits(&logits).probs())
            } else {
                0.0
            };
            trace.push(TracePoint {
                step,
                f_value: value,
                wbc_loss,
            });
        }
        if step == config.steps {
            break;
        }
        let grad = match (config.batch_size, full) {
            (None, Some((_, g))) => g,
            (Some(b), _) => eval(&q, &batch.subsample(b, &mut rng)).1,
            (None, None) => unreachable!("full-batch objective is evaluated every step"),
        };
        stepper.descend(&mut q, &grad);
        if with_policy {
            let v = batch.values(&q);
            let w = wbc_weights(&q, &v, &counts, config.wbc_weight_cap);
            policy_logit_step(&mut logits, &w, config.lr_policy);
        }
    }
    let q = QTable::new(q)?;
    let policy = finish_policy(&logits, &counts, &softmax_policy(&q));
    Ok(QRun { q, policy, trace })
}

/// Output of [`train_uniq`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedUniq {
    pub q: QTable,
    pub policy: TabularPolicy,
    pub ratio: RatioEstimate,
    pub loss_trace: Vec<TracePoint>,
}

impl TrainedUniq {
    pub fn loss_trace_csv(&self) -> String {
        trace_csv(&self.loss_trace)
    }
}

/// Fits the ratio, then runs Q descent on `F̃` with a WBC policy step after
/// every Q step.
pub fn train_uniq(
    dataset_un: &TrajectoryDataset,
    dataset_mix: &TrajectoryDataset,
    config: &UniqConfig,
    seed: u64,
) -> Result<TrainedUniq> {
    config.validate()?;
    let mut ratio_cfg = config.ratio;
    ratio_cfg.occupancy_weighting = config.occupancy_weighting;
    let fit = fit_ratio(dataset_un, dataset_mix, &ratio_cfg, seed)?;
    let ratio = fit.estimate();
    let batch = TransitionBatch::from_dataset(dataset_mix, config.occupancy_weighting, config.value_mode)?;
    let discount = config.discount_for(dataset_mix);
    let psi = config.psi;
    let run = descend_q(&batch, config, seed, true, |q, b| {
        f_value_and_gradient(q, &ratio.tau, b, discount, &psi)
    })?;
    Ok(TrainedUniq {
        q: run.q,
        policy: run.policy,
        ratio,
        loss_trace: run.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetRole, Trajectory, Transition};
    use ndarray::array;

    fn bandit_dataset(actions: &[usize], role: DatasetRole) -> TrajectoryDataset {
        let trajs = actions
            .iter()
            .map(|&a| {
                Trajectory::new(vec![Transition {
                    s: 0,
                    a,
                    r: 0.0,
                    c: if a == 0 { 1.0 } else { 0.0 },
                    s_next: 0,
                    done: true,
                }])
                .unwrap()
            })
            .collect();
        let threshold = (role == DatasetRole::Undesired).then_some(0.5);
        TrajectoryDataset::new(trajs, role, (0, actions.len()), 1, 2, 0.9, threshold).unwrap()
    }

    fn bandit_batch() -> TransitionBatch {
        let ds = bandit_dataset(&[0, 1], DatasetRole::Mix);
        TransitionBatch::from_dataset(&ds, OccupancyWeighting::Uniform, ValueMode::Full).unwrap()
    }

    #[test]
    fn single_state_zero_discount_value() {
        let ratio = RatioEstimate::ones(array![[true, true]]);
        let f = f_objective(&QTable::zeros(1, 2), &ratio, &bandit_batch(), 0.0, &Regularizer::chi2());
        assert!((f + 2f64.ln()).abs() < 1e-15);

        let q = QTable::new(array![[0.3, -1.2]]).unwrap();
        let lse = logsumexp([0.3f64, -1.2].into_iter());
        let expected = 0.5 * (2.0 * 0.3 - 0.09) + 0.5 * (2.0 * -1.2 - 1.44) - lse;
        let f = f_objective(&q, &ratio, &bandit_batch(), 0.0, &Regularizer::chi2());
        assert!((f - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_q_constants() {
        let g: f64 = 0.7;
        let trajs = vec![Trajectory::new(vec![
            Transition {
                s: 0,
                a: 1,
                r: 0.0,
                c: 0.0,
                s_next: 1,
                done: false,
            },
            Transition {
                s: 1,
                a: 2,
                r: 0.0,
                c: 0.0,
                s_next: 0,
                done: false,
            },
        ])
        .unwrap()];
        let ds = TrajectoryDataset::new(trajs, DatasetRole::Mix, (1, 0), 2, 3, g, None).unwrap();
        let batch = TransitionBatch::from_dataset(&ds, OccupancyWeighting::Discounted, ValueMode::Full).unwrap();
        let ratio = RatioEstimate::ones(Array2::from_elem((2, 3), true));
        let psi = Regularizer::chi2();
        let r0 = -g * 3f64.ln();
        let expected = r0 + psi.value(r0) - (1.0 - g) * 3f64.ln();
        let f = f_objective(&QTable::zeros(2, 3), &ratio, &batch, g, &psi);
        assert!((f - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_ratio_leaves_regulariser_and_value() {
        let batch = bandit_batch();
        let q = QTable::new(array![[0.4, 0.1]]).unwrap();
        let zero = RatioEstimate {
            tau: Array2::zeros((1, 2)),
            support_mask: array![[true, true]],
        };
        let psi = Regularizer::quadratic(0.5);
        let expected = 0.5 * (psi.value(0.4) + psi.value(0.1)) - logsumexp([0.4f64, 0.1].into_iter());
        assert!((f_objective(&q, &zero, &batch, 0.0, &psi) - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let trajs = vec![Trajectory::new(vec![
            Transition {
                s: 0,
                a: 1,
                r: 0.0,
                c: 0.0,
                s_next: 2,
                done: false,
            },
            Transition {
                s: 2,
                a: 0,
                r: 0.0,
                c: 0.0,
                s_next: 1,
                done: false,
            },
            Transition {
                s: 1,
                a: 1,
                r: 0.0,
                c: 0.0,
                s_next: 3,
                done: true,
            },
        ])
        .unwrap()];
        let ds = TrajectoryDataset::new(trajs, DatasetRole::Mix, (1, 0), 4, 2, 0.8, None).unwrap();
        for mode in [ValueMode::Full, ValueMode::Sampled] {
            let batch = TransitionBatch::from_dataset(&ds, OccupancyWeighting::Discounted, mode).unwrap();
            let ratio = RatioEstimate {
                tau: array![[0.0, 1.5], [0.0, 0.2], [2.0, 0.0], [0.0, 0.0]],
                support_mask: Array2::from_elem((4, 2), true),
            };
            let q = QTable::new(array![[0.1, -0.4], [0.7, 0.2], [-0.3, 0.5], [0.0, 1.0]]).unwrap();
            let psi = Regularizer::chi2();
            let grad = f_gradient(&q, &ratio, &batch, 0.8, &psi);
            let h = 1e-6;
            for s in 0..4 {
                for a in 0..2 {
                    let mut qp = q.clone();
                    qp.values_mut()[[s, a]] += h;
                    let mut qm = q.clone();
                    qm.values_mut()[[s, a]] -= h;
                    let fd = (f_objective(&qp, &ratio, &batch, 0.8, &psi)
                        - f_objective(&qm, &ratio, &batch, 0.8, &psi))
                        / (2.0 * h);
                    assert!(
                        (fd - grad[[s, a]]).abs() < 1e-7,
                        "{mode:?} ({s},{a}): {fd} vs {}",
                        grad[[s, a]]
                    );
                }
            }
        }
    }

    #[test]
    fn exact_wbc_is_softmax() {
        let q = QTable::new(array![[2f64.ln(), 0.0], [1.0, -3.0]]).unwrap();
        let pi = wbc_exact(&q, 10f64.exp());
        assert!((pi.prob(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!(crate::mdp::sup_distance(pi.probs(), softmax_policy(&q).probs()) < 1e-12);
    }

    #[test]
    fn uniform_counts_wbc_is_softmax() {
        let q = QTable::new(array![[0.5, -0.25, 1.0]]).unwrap();
        let pi = wbc_closed_form(&q, &Array2::from_elem((1, 3), 7.0), 10f64.exp());
        assert!(crate::mdp::sup_distance(pi.probs(), softmax_policy(&q).probs()) < 1e-9);
    }

    #[test]
    fn saturated_cap_gives_plain_bc() {
        let q = QTable::new(array![[3.0, -2.0]]).unwrap();
        let counts = array![[3.0, 1.0]];
        let pi = wbc_closed_form(&q, &counts, 1e-12);
        assert!((pi.prob(0, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gradient_wbc_approaches_closed_form() {
        let ds = bandit_dataset(&[0, 0, 0, 1], DatasetRole::Mix);
        let q = QTable::new(array![[0.2, 0.9]]).unwrap();
        let pi = wbc_extract(&q, &ds, OccupancyWeighting::Uniform, 1.0, 5_000, 10f64.exp()).unwrap();
        let counts = ds.visit_counts();
        let exact = wbc_closed_form(&q, &counts, 10f64.exp());
        assert!(crate::mdp::sup_distance(pi.probs(), exact.probs()) < 1e-6);
    }

    #[test]
    fn bandit_avoids_undesired_action() {
        let un = bandit_dataset(&[0; 10], DatasetRole::Undesired);
        let mix = bandit_dataset(&[0, 1, 0, 1], DatasetRole::Mix);
        let cfg = UniqConfig {
            discount: Some(0.5),
            ..UniqConfig::default()
        };
        let trained = train_uniq(&un, &mix, &cfg, 0).unwrap();
        assert!((trained.ratio.tau[[0, 0]] - 2.0).abs() < 1e-3);
        assert!(trained.ratio.tau[[0, 1]] < 1e-3);
        assert!(trained.policy.prob(0, 1) > 0.9, "{:?}", trained.policy.probs());
        assert!(trained
            .loss_trace
            .iter()
            .all(|p| p.f_value.is_finite() && p.wbc_loss.is_finite()));
    }

    #[test]
    fn concave_regulariser_diverges() {
        let un = bandit_dataset(&[0; 4], DatasetRole::Undesired);
        let mix = bandit_dataset(&[0, 1], DatasetRole::Mix);
        let cfg = UniqConfig {
            psi: Regularizer::chi2(),
            optimizer: OptimizerKind::Sgd,
            lr_q: 1.0,
            steps: 100_000,
            ..UniqConfig::default()
        };
        assert!(matches!(train_uniq(&un, &mix, &cfg, 0), Err(Error::Divergence { .. })));
    }

    #[test]
    fn deterministic_under_seed() {
        let un = bandit_dataset(&[0; 4], DatasetRole::Undesired);
        let mix = bandit_dataset(&[0, 1, 1], DatasetRole::Mix);
        let cfg = UniqConfig {
            batch_size: Some(2),
            steps: 200,
            ..UniqConfig::default()
        };
        let a = train_uniq(&un, &mix, &cfg, 9).unwrap();
        let b = train_uniq(&un, &mix, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_undesired_rejected() {
        let un = TrajectoryDataset::new(vec![], DatasetRole::Undesired, (0, 0), 1, 2, 0.9, Some(0.5)).unwrap();
        let mix = bandit_dataset(&[0, 1], DatasetRole::Mix);
        assert!(matches!(
            train_uniq(&un, &mix, &UniqConfig::default(), 0),
            Err(Error::EmptyDataset(_))
        ));
    }
}
