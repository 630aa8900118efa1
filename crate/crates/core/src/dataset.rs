//! Trajectory collection, cost-threshold labelling, mixing, state
//! normalisation, empirical occupancies and the on-disk dataset format.
//!
//! The file format is one JSON header line followed by one line per
//! transition: `s a r c s_next done traj_id t`. Reals use 17 significant
//! digits so a write/read cycle is bit-exact.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::json;
use crate::mdp::{FiniteMdp, Table, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub c: f64,
    pub s_next: usize,
    pub done: bool,
}

/// An episode with its undiscounted reward and cost totals.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    transitions: Vec<Transition>,
    total_cost: f64,
    total_return: f64,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>) -> Result<Self> {
        for pair in transitions.windows(2) {
            if pair[0].done {
                return Err(Error::Domain("transition after a terminal step".into()));
            }
            if pair[0].s_next != pair[1].s {
                return Err(Error::Domain(format!(
                    "broken trajectory: s_next {} followed by s {}",
                    pair[0].s_next, pair[1].s
                )));
            }
        }
        if transitions.iter().any(|t| !(t.c >= 0.0) || !t.r.is_finite()) {
            return Err(Error::Domain(
                "transition with negative cost or non-finite reward".into(),
            ));
        }
        let total_cost = transitions.iter().map(|t| t.c).sum();
        let total_return = transitions.iter().map(|t| t.r).sum();
        Ok(Self {
            transitions,
            total_cost,
            total_return,
        })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }
    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }
    pub fn total_return(&self) -> f64 {
        self.total_return
    }
    pub fn len(&self) -> usize {
        self.transitions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
    pub fn initial_state(&self) -> Option<usize> {
        self.transitions.first().map(|t| t.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Undesired,
    Mix,
}

/// How transitions are weighted when datasets are turned into expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OccupancyWeighting {
    /// `(1 − γ)γᵗ` per step.
    #[default]
    Discounted,
    /// Every transition counts the same.
    Uniform,
}

/// Feature-wise standardisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are replaced by 1.
pub const MIN_STD: f64 = 1e-8;

impl Normalization {
    /// Population mean and standard deviation of `features`.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::EmptyDataset("no features to fit a normalization"));
        }
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - m) * (x - m) / n as f64;
            }
        }
        Ok(Self::new(mean, var.into_iter().map(f64::sqrt).collect()))
    }

    /// Clamps degenerate standard deviations to 1.
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let std = std.into_iter().map(|s| if s < MIN_STD { 1.0 } else { s }).collect();
        Self { mean, std }
    }

    /// `(s − μ) / σ`.
    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// A labelled bag of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    trajectories: Vec<Trajectory>,
    role: DatasetRole,
    /// `(from constrained expert, from unconstrained expert)`.
    source_counts: (usize, usize),
    normalization: Option<Normalization>,
    num_states: usize,
    num_actions: usize,
    discount: f64,
    cost_threshold: Option<f64>,
}

impl TrajectoryDataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        role: DatasetRole,
        source_counts: (usize, usize),
        num_states: usize,
        num_actions: usize,
        discount: f64,
        cost_threshold: Option<f64>,
    ) -> Result<Self> {
        for t in &trajectories {
            for tr in t.transitions() {
                if tr.s >= num_states || tr.s_next >= num_states || tr.a >= num_actions {
                    return Err(Error::Domain(format!("transition {tr:?} out of range")));
                }
            }
        }
        if role == DatasetRole::Undesired {
            let threshold =
                cost_threshold.ok_or_else(|| Error::Domain("undesired dataset needs its cost threshold".into()))?;
            if let Some(t) = trajectories.iter().find(|t| !(t.total_cost() > threshold)) {
                return Err(Error::Domain(format!(
                    "undesired dataset holds a trajectory with cost {} ≤ threshold {threshold}",
                    t.total_cost()
                )));
            }
        }
        Ok(Self {
            trajectories,
            role,
            source_counts,
            normalization: None,
            num_states,
            num_actions,
            discount,
            cost_threshold,
        })
    }

    /// An undesired dataset of trajectories drawn from the unconstrained expert.
    pub fn undesired(trajectories: Vec<Trajectory>, threshold: f64, mdp: &FiniteMdp) -> Result<Self> {
        let n = trajectories.len();
        Self::new(
            trajectories,
            DatasetRole::Undesired,
            (0, n),
            mdp.num_states(),
            mdp.num_actions(),
            mdp.discount(),
            Some(threshold),
        )
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
    pub fn role(&self) -> DatasetRole {
        self.role
    }
    pub fn source_counts(&self) -> (usize, usize) {
        self.source_counts
    }
    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn discount(&self) -> f64 {
        self.discount
    }
    pub fn cost_threshold(&self) -> Option<f64> {
        self.cost_threshold
    }
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }
    pub fn is_empty(&self) -> bool {
        self.trajectories.iter().all(Trajectory::is_empty)
    }
    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Iterates `(t, transition)` over every trajectory.
    pub fn steps(&self) -> impl Iterator<Item = (usize, &Transition)> {
        self.trajectories
            .iter()
            .flat_map(|traj| traj.transitions().iter().enumerate())
    }

    /// Unweighted `(s, a)` visit counts.
    pub fn visit_counts(&self) -> Table {
        let mut counts = Array2::zeros((self.num_states, self.num_actions));
        for (_, tr) in self.steps() {
            counts[[tr.s, tr.a]] += 1.0;
        }
        counts
    }

    pub fn to_text(&self) -> Result<String> {
        let normalization = match &self.normalization {
            Some(n) => serde_json::json!({
                "mean": n.mean.iter().map(|&x| json::num(x)).collect::<Result<Vec<_>>>()?,
                "std": n.std.iter().map(|&x| json::num(x)).collect::<Result<Vec<_>>>()?,
            }),
            None => Value::Null,
        };
        let header = serde_json::json!({
            "kind": "trajectory-dataset",
            "role": self.role,
            "discount": json::num(self.discount)?,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_trajectories": self.trajectories.len(),
            "source_counts": [self.source_counts.0, self.source_counts.1],
            "cost_threshold": match self.cost_threshold { Some(c) => json::num(c)?, None => Value::Null },
            "normalization": normalization,
        });
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for (id, traj) in self.trajectories.iter().enumerate() {
            for (t, tr) in traj.transitions().iter().enumerate() {
                writeln!(
                    out,
                    "{} {} {} {} {} {} {} {}",
                    tr.s,
                    tr.a,
                    json::format_f64(tr.r),
                    json::format_f64(tr.c),
                    tr.s_next,
                    u8::from(tr.done),
                    id,
                    t
                )
                .expect("writing to a String cannot fail");
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header_line = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let header: Value = serde_json::from_str(header_line).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let role: DatasetRole = serde_json::from_value(json::field(&header, "role")?.clone())?;
        let ns = json::get_usize(&header, "num_states")?;
        let na = json::get_usize(&header, "num_actions")?;
        let n_traj = json::get_usize(&header, "num_trajectories")?;
        let discount = json::get_f64(&header, "discount")?;
        let counts = json::field(&header, "source_counts")?;
        let source_counts = (
            counts[0].as_u64().unwrap_or_default() as usize,
            counts[1].as_u64().unwrap_or_default() as usize,
        );
        let cost_threshold = match json::field(&header, "cost_threshold")? {
            Value::Null => None,
            v => Some(json::as_f64(v)?),
        };
        let normalization = match json::field(&header, "normalization")? {
            Value::Null => None,
            v => {
                let parse = |key: &str| -> Result<Vec<f64>> {
                    json::field(v, key)?
                        .as_array()
                        .ok_or_else(|| Error::InvalidTable(format!("`{key}` must be an array")))?
                        .iter()
                        .map(json::as_f64)
                        .collect()
                };
                Some(Normalization {
                    mean: parse("mean")?,
                    std: parse("std")?,
                })
            }
        };

        let mut per_traj: Vec<Vec<Transition>> = vec![Vec::new(); n_traj];
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: lineno, message };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", fields.len())));
            }
            let int = |k: usize| fields[k].parse::<usize>().map_err(|e| err(format!("field {k}: {e}")));
            let real = |k: usize| fields[k].parse::<f64>().map_err(|e| err(format!("field {k}: {e}")));
            let done = match fields[5] {
                "0" => false,
                "1" => true,
                other => return Err(err(format!("done flag must be 0 or 1, got {other}"))),
            };
            let id = int(6)?;
            let t = int(7)?;
            let traj = per_traj
                .get_mut(id)
                .ok_or_else(|| err(format!("trajectory id {id} ≥ {n_traj}")))?;
            if t != traj.len() {
                return Err(err(format!("step {t} out of order in trajectory {id}")));
            }
            traj.push(Transition {
                s: int(0)?,
                a: int(1)?,
                r: real(2)?,
                c: real(3)?,
                s_next: int(4)?,
                done,
            });
        }
        let trajectories = per_traj.into_iter().map(Trajectory::new).collect::<Result<Vec<_>>>()?;
        let mut ds = Self::new(trajectories, role, source_counts, ns, na, discount, cost_threshold)?;
        ds.normalization = normalization;
        Ok(ds)
    }
}

fn sample_index<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// One episode of at most `horizon` steps.
pub fn rollout_one<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    horizon: usize,
    rng: &mut R,
) -> Trajectory {
    let mut s = sample_index(mdp.initial_dist().iter().copied(), rng);
    let mut transitions = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = sample_index(policy.probs().row(s).iter().copied(), rng);
        let sp = sample_index(mdp.transition().slice(ndarray::s![s, a, ..]).iter().copied(), rng);
        let done = mdp.is_terminal(sp);
        transitions.push(Transition {
            s,
            a,
            r: mdp.reward()[[s, a]],
            c: mdp.cost()[[s, a]],
            s_next: sp,
            done,
        });
        if done {
            break;
        }
        s = sp;
    }
    Trajectory::new(transitions).expect("rollouts are well-formed")
}

/// RNG for trajectory `index` of a batch seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` episodes, each on its own RNG stream so the result does not depend on
/// thread scheduling.
pub fn rollout(mdp: &FiniteMdp, policy: &TabularPolicy, horizon: usize, n: usize, seed: u64) -> Vec<Trajectory> {
    assert!(horizon >= 1, "horizon must be at least 1");
    (0..n)
        .into_par_iter()
        .map(|i| rollout_one(mdp, policy, horizon, &mut stream_rng(seed, i as u64)))
        .collect()
}

/// Splits into `(cost > threshold, rest)`, preserving order.
pub fn label_undesired(trajs: Vec<Trajectory>, cost_threshold: f64) -> (Vec<Trajectory>, Vec<Trajectory>) {
    trajs.into_iter().partition(|t| t.total_cost() > cost_threshold)
}

/// Samples `n_safe` and `n_undesired` trajectories without replacement and
/// concatenates them into an unlabeled mix.
pub fn build_mix(
    safe: &[Trajectory],
    undesired_pool: &[Trajectory],
    n_safe: usize,
    n_undesired: usize,
    seed: u64,
    mdp: &FiniteMdp,
) -> Result<TrajectoryDataset> {
    if n_safe > safe.len() {
        return Err(Error::InsufficientPool {
            requested: n_safe,
            available: safe.len(),
        });
    }
    if n_undesired > undesired_pool.len() {
        return Err(Error::InsufficientPool {
            requested: n_undesired,
            available: undesired_pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Trajectory> = sample(&mut rng, safe.len(), n_safe)
        .into_iter()
        .map(|i| safe[i].clone())
        .collect();
    picked.extend(
        sample(&mut rng, undesired_pool.len(), n_undesired)
            .into_iter()
            .map(|i| undesired_pool[i].clone()),
    );
    TrajectoryDataset::new(
        picked,
        DatasetRole::Mix,
        (n_safe, n_undesired),
        mdp.num_states(),
        mdp.num_actions(),
        mdp.discount(),
        None,
    )
}

/// Attaches feature standardisation statistics. Tabular state ids are left
/// untouched; the statistics apply to any state features a consumer derives.
pub fn normalize_states(dataset: TrajectoryDataset, mean: Vec<f64>, std: Vec<f64>) -> TrajectoryDataset {
    TrajectoryDataset {
        normalization: Some(Normalization::new(mean, std)),
        ..dataset
    }
}

/// Per-transition weights.
///
/// `Uniform` gives every step `1/n_steps`. `Discounted` gives step `t` of each
/// trajectory `(1 − γ)γᵗ / n_traj`. A trajectory that ends in a terminal
/// state keeps only this mass; the remaining `γᵀ / n_traj` belongs to the
/// absorbing state, which has no recorded transitions. A truncated
/// trajectory is rescaled to total `1/n_traj`.
pub fn transition_weights(dataset: &TrajectoryDataset, weighting: OccupancyWeighting) -> Vec<f64> {
    match weighting {
        OccupancyWeighting::Uniform => {
            let n = dataset.num_transitions() as f64;
            vec![1.0 / n; dataset.num_transitions()]
        }
        OccupancyWeighting::Discounted => {
            let g = dataset.discount();
            let n_traj = dataset.trajectories().iter().filter(|t| !t.is_empty()).count() as f64;
            let mut out = Vec::with_capacity(dataset.num_transitions());
            for traj in dataset.trajectories() {
                let terminated = traj.transitions().last().is_some_and(|t| t.done);
                let scale = if terminated {
                    1.0
                } else {
                    1.0 / (1.0 - g.powi(traj.len() as i32))
                };
                out.extend((0..traj.len()).map(|t| scale * (1.0 - g) * g.powi(t as i32) / n_traj));
            }
            out
        }
    }
}

/// Weighted empirical `(s, a)` distribution of a dataset: the
/// [`transition_weights`] accumulated per pair and normalised to sum to one.
pub fn empirical_occupancy(dataset: &TrajectoryDataset, weighting: OccupancyWeighting) -> Result<Table> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("empirical occupancy of an empty dataset"));
    }
    let mut rho = Array2::<f64>::zeros((dataset.num_states(), dataset.num_actions()));
    for ((_, tr), w) in dataset.steps().zip(transition_weights(dataset, weighting)) {
        rho[[tr.s, tr.a]] += w;
    }
    let z = rho.sum();
    Ok(rho / z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::occupancy_of;
    use ndarray::{array, Array3};

    fn loop_mdp(reward: f64) -> FiniteMdp {
        FiniteMdp::new(
            Array3::ones((1, 1, 1)),
            array![[reward]],
            array![[0.0]],
            0.9,
            array![1.0],
        )
        .unwrap()
    }

    fn traj_with_cost(c: f64) -> Trajectory {
        Trajectory::new(vec![Transition {
            s: 0,
            a: 0,
            r: 0.0,
            c,
            s_next: 0,
            done: false,
        }])
        .unwrap()
    }

    #[test]
    fn self_loop_returns() {
        let mdp = loop_mdp(1.0);
        let trajs = rollout(&mdp, &TabularPolicy::uniform(1, 1), 10, 5, 0);
        assert_eq!(trajs.len(), 5);
        for t in &trajs {
            assert_eq!(t.total_return(), 10.0);
        }
    }

    #[test]
    fn rollouts_are_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = FiniteMdp::random(4, 3, 0.9, &mut rng);
        let pol = TabularPolicy::uniform(4, 3);
        assert_eq!(rollout(&mdp, &pol, 20, 30, 7), rollout(&mdp, &pol, 20, 30, 7));
        assert_ne!(rollout(&mdp, &pol, 20, 30, 7), rollout(&mdp, &pol, 20, 30, 8));
    }

    #[test]
    fn deterministic_everything_gives_identical_trajectories() {
        let mut p = Array3::zeros((3, 2, 3));
        for s in 0..3 {
            p[[s, 0, (s + 1) % 3]] = 1.0;
            p[[s, 1, s]] = 1.0;
        }
        let mdp = FiniteMdp::new(
            p,
            Array2::ones((3, 2)),
            Array2::zeros((3, 2)),
            0.9,
            array![1.0, 0.0, 0.0],
        )
        .unwrap();
        let pol = TabularPolicy::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let trajs = rollout(&mdp, &pol, 6, 4, 3);
        assert!(trajs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn labeling_examples() {
        let trajs: Vec<_> = [10.0, 30.0, 25.0].iter().map(|&c| traj_with_cost(c)).collect();
        let (bad, rest) = label_undesired(trajs.clone(), 25.0);
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].total_cost(), 30.0);
        assert_eq!(rest.len(), 2);
        let (bad, _) = label_undesired(trajs.clone(), f64::INFINITY);
        assert!(bad.is_empty());
        let (bad, _) = label_undesired(trajs, -1.0);
        assert_eq!(bad.len(), 3);
    }

    #[test]
    fn undesired_role_enforces_threshold() {
        let mdp = loop_mdp(0.0);
        assert!(TrajectoryDataset::undesired(vec![traj_with_cost(1.0)], 1.0, &mdp).is_err());
        assert!(TrajectoryDataset::undesired(vec![traj_with_cost(1.5)], 1.0, &mdp).is_ok());
    }

    #[test]
    fn mixing_ratios() {
        let mdp = loop_mdp(0.0);
        let safe: Vec<_> = (0..1600).map(|_| traj_with_cost(0.0)).collect();
        let bad: Vec<_> = (0..1600).map(|_| traj_with_cost(5.0)).collect();
        let mix = build_mix(&safe, &bad, 400, 1600, 1, &mdp).unwrap();
        assert_eq!(mix.len(), 2000);
        assert_eq!(mix.source_counts(), (400, 1600));
        assert_eq!(mix.role(), DatasetRole::Mix);
        let mix = build_mix(&safe, &bad, 100, 1600, 1, &mdp).unwrap();
        assert_eq!(mix.source_counts().1 / mix.source_counts().0, 16);
        let pure = build_mix(&safe, &bad, 0, 7, 1, &mdp).unwrap();
        assert!(pure.trajectories().iter().all(|t| t.total_cost() == 5.0));
        assert!(matches!(
            build_mix(&safe[..10], &bad, 11, 0, 1, &mdp),
            Err(Error::InsufficientPool {
                requested: 11,
                available: 10
            })
        ));
    }

    #[test]
    fn normalization_examples() {
        let n = Normalization::fit(&[vec![0.0, 3.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(n.apply(&[0.0, 3.0]), vec![-1.0, 0.0]);
        assert_eq!(n.apply(&[2.0, 3.0]), vec![1.0, 0.0]);
        assert_eq!(n.std[1], 1.0);
        let already = Normalization::new(vec![0.0], vec![1.0]);
        assert!((already.apply(&[0.37])[0] - 0.37).abs() < 1e-9);
    }

    #[test]
    fn normalize_keeps_states() {
        let ds = TrajectoryDataset::new(vec![traj_with_cost(0.0)], DatasetRole::Mix, (1, 0), 1, 1, 0.9, None).unwrap();
        let normed = normalize_states(ds.clone(), vec![0.0], vec![0.0]);
        assert_eq!(normed.trajectories(), ds.trajectories());
        assert_eq!(normed.normalization().unwrap().std, vec![1.0]);
    }

    #[test]
    fn empirical_occupancy_examples() {
        let mdp = loop_mdp(1.0);
        let trajs = rollout(&mdp, &TabularPolicy::uniform(1, 1), 5, 1, 0);
        let ds = TrajectoryDataset::new(trajs, DatasetRole::Mix, (1, 0), 1, 1, 0.9, None).unwrap();
        let rho = empirical_occupancy(&ds, OccupancyWeighting::Discounted).unwrap();
        assert!((rho[[0, 0]] - 1.0).abs() < 1e-12);

        // two disjoint two-step trajectories: weights (1-γ), (1-γ)γ each, normalised
        let g: f64 = 0.5;
        let t1 = Trajectory::new(vec![
            Transition {
                s: 0,
                a: 0,
                r: 0.0,
                c: 0.0,
                s_next: 1,
                done: false,
            },
            Transition {
                s: 1,
                a: 0,
                r: 0.0,
                c: 0.0,
                s_next: 1,
                done: false,
            },
        ])
        .unwrap();
        let t2 = Trajectory::new(vec![
            Transition {
                s: 2,
                a: 1,
                r: 0.0,
                c: 0.0,
                s_next: 3,
                done: false,
            },
            Transition {
                s: 3,
                a: 1,
                r: 0.0,
                c: 0.0,
                s_next: 3,
                done: false,
            },
        ])
        .unwrap();
        let ds = TrajectoryDataset::new(vec![t1, t2], DatasetRole::Mix, (2, 0), 4, 2, g, None).unwrap();
        let rho = empirical_occupancy(&ds, OccupancyWeighting::Discounted).unwrap();
        let z = 2.0 * ((1.0 - g) + (1.0 - g) * g);
        assert!((rho[[0, 0]] - (1.0 - g) / z).abs() < 1e-12);
        assert!((rho[[1, 0]] - (1.0 - g) * g / z).abs() < 1e-12);
        assert!((rho[[2, 1]] - (1.0 - g) / z).abs() < 1e-12);
        assert!((rho.sum() - 1.0).abs() < 1e-9);
        let empty = TrajectoryDataset::new(vec![], DatasetRole::Mix, (0, 0), 4, 2, g, None).unwrap();
        assert!(empirical_occupancy(&empty, OccupancyWeighting::Discounted).is_err());
    }

    #[test]
    fn empirical_occupancy_converges_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mdp = FiniteMdp::random(3, 2, 0.6, &mut rng);
        let pol = TabularPolicy::new(array![[0.3, 0.7], [0.5, 0.5], [0.9, 0.1]]).unwrap();
        // horizon long enough that the truncated tail weight γ^H is negligible
        let trajs = rollout(&mdp, &pol, 40, 10_000, 5);
        let ds = TrajectoryDataset::new(trajs, DatasetRole::Mix, (0, 0), 3, 2, 0.6, None).unwrap();
        let emp = empirical_occupancy(&ds, OccupancyWeighting::Discounted).unwrap();
        let exact = occupancy_of(&mdp, &pol).unwrap();
        let kl: f64 = exact
            .rho()
            .iter()
            .zip(emp.iter())
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q).ln())
            .sum();
        assert!(kl < 0.01, "KL {kl}");
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = FiniteMdp::random(4, 2, 0.95, &mut rng);
        let trajs = rollout(&mdp, &TabularPolicy::uniform(4, 2), 7, 5, 1);
        let ds = TrajectoryDataset::new(trajs, DatasetRole::Mix, (2, 3), 4, 2, 0.95, None).unwrap();
        let ds = normalize_states(ds, vec![1.5, -0.1], vec![0.3, 2.0]);
        let text = ds.to_text().unwrap();
        let back = TrajectoryDataset::from_text(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let ds = TrajectoryDataset::new(vec![traj_with_cost(0.0)], DatasetRole::Mix, (1, 0), 1, 1, 0.9, None).unwrap();
        let mut text = ds.to_text().unwrap();
        text.push_str("0 0 x 0 0 0 0 1\n");
        match TrajectoryDataset::from_text(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
