//! Finite MDPs and the exact dynamic-programming primitives used everywhere
//! else: occupancy measures, soft values, softmax policies and the soft
//! Bellman / inverse Bellman operators.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::json;

/// A dense `|S|×|A|` table of reals.
pub type Table = Array2<f64>;

const PROB_TOL: f64 = 1e-9;

/// Above this many state-action pairs the occupancy solve switches from a
/// dense LU factorisation to power iteration.
pub const DENSE_SOLVE_LIMIT: usize = 10_000;

/// `⟨S, A, r, c, P, γ, p₀⟩` plus a mask of terminal (absorbing) states that end
/// an episode when entered.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    transition: Array3<f64>,
    reward: Table,
    cost: Table,
    discount: f64,
    initial_dist: Array1<f64>,
    terminal: Vec<bool>,
}

fn check_distribution(p: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut total = 0.0;
    for x in p {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::InvalidMdp(format!("{what} has invalid entry {x}")));
        }
        total += x;
    }
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidMdp(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl FiniteMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Table,
        cost: Table,
        discount: f64,
        initial_dist: Array1<f64>,
    ) -> Result<Self> {
        let ns = transition.shape()[0];
        Self::with_terminals(transition, reward, cost, discount, initial_dist, vec![false; ns])
    }

    pub fn with_terminals(
        transition: Array3<f64>,
        reward: Table,
        cost: Table,
        discount: f64,
        initial_dist: Array1<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let (ns, na, ns2) = transition.dim();
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        if ns2 != ns {
            return Err(Error::InvalidMdp(format!(
                "transition tensor has shape {ns}×{na}×{ns2}"
            )));
        }
        if reward.dim() != (ns, na) || cost.dim() != (ns, na) {
            return Err(Error::InvalidMdp("reward/cost shape mismatch".into()));
        }
        if initial_dist.len() != ns || terminal.len() != ns {
            return Err(Error::InvalidMdp(
                "initial distribution / terminal mask length mismatch".into(),
            ));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidMdp(format!("discount {discount} outside (0, 1)")));
        }
        for s in 0..ns {
            for a in 0..na {
                check_distribution(
                    transition.slice(ndarray::s![s, a, ..]).iter().copied(),
                    &format!("P[{s}][{a}]"),
                )?;
            }
        }
        check_distribution(initial_dist.iter().copied(), "initial distribution")?;
        if reward.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMdp("non-finite reward".into()));
        }
        if cost.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidMdp("cost must be finite and non-negative".into()));
        }
        Ok(Self {
            num_states: ns,
            num_actions: na,
            transition,
            reward,
            cost,
            discount,
            initial_dist,
            terminal,
        })
    }

    /// Random MDP with dense transition rows, rewards in `[-1, 1]`, costs in
    /// `[0, 1]` and a random initial distribution. Used by tests and oracles.
    pub fn random<R: Rng + ?Sized>(ns: usize, na: usize, discount: f64, rng: &mut R) -> Self {
        let mut transition = Array3::zeros((ns, na, ns));
        for s in 0..ns {
            for a in 0..na {
                let raw: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 0.05).collect();
                let z: f64 = raw.iter().sum();
                for (sp, x) in raw.iter().enumerate() {
                    transition[[s, a, sp]] = x / z;
                }
            }
        }
        let reward = Array2::from_shape_fn((ns, na), |_| rng.random_range(-1.0..1.0));
        let cost = Array2::from_shape_fn((ns, na), |_| rng.random::<f64>());
        let raw: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 0.05).collect();
        let z: f64 = raw.iter().sum();
        let p0 = Array1::from_iter(raw.iter().map(|x| x / z));
        Self::new(transition, reward, cost, discount, p0).expect("random MDP is valid")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }
    pub fn reward(&self) -> &Table {
        &self.reward
    }
    pub fn cost(&self) -> &Table {
        &self.cost
    }
    pub fn discount(&self) -> f64 {
        self.discount
    }
    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }
    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// `Σ_{s'} P[s][a][s'] · v[s']`.
    pub fn expected_next(&self, s: usize, a: usize, v: &Array1<f64>) -> f64 {
        self.transition
            .slice(ndarray::s![s, a, ..])
            .iter()
            .zip(v.iter())
            .map(|(p, x)| p * x)
            .sum()
    }

    /// Copy of this MDP with a replaced reward table.
    pub fn with_reward(&self, reward: Table) -> Result<Self> {
        Self::with_terminals(
            self.transition.clone(),
            reward,
            self.cost.clone(),
            self.discount,
            self.initial_dist.clone(),
            self.terminal.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "kind": "finite-mdp",
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "discount": json::num(self.discount)?,
            "initial_dist": json::vec1(&self.initial_dist)?,
            "terminal": self.terminal,
            "reward": json::vec2(&self.reward)?,
            "cost": json::vec2(&self.cost)?,
            "transition": json::vec3(&self.transition)?,
        });
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        let ns = json::get_usize(&doc, "num_states")?;
        let na = json::get_usize(&doc, "num_actions")?;
        let terminal = json::field(&doc, "terminal")?
            .as_array()
            .ok_or_else(|| Error::InvalidMdp("`terminal` must be an array".into()))?
            .iter()
            .map(|v| {
                v.as_bool()
                    .ok_or_else(|| Error::InvalidMdp("`terminal` entries must be booleans".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_terminals(
            json::parse_vec3(json::field(&doc, "transition")?, ns, na, ns)?,
            json::parse_vec2(json::field(&doc, "reward")?, ns, na)?,
            json::parse_vec2(json::field(&doc, "cost")?, ns, na)?,
            json::get_f64(&doc, "discount")?,
            json::parse_vec1(json::field(&doc, "initial_dist")?, ns)?,
            terminal,
        )
    }
}

/// Row-stochastic `|S|×|A|` action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Table,
}

impl TabularPolicy {
    pub fn new(probs: Table) -> Result<Self> {
        for (s, row) in probs.outer_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidPolicy(format!(
                    "row {s} has a negative or non-finite entry"
                )));
            }
            let total: f64 = row.sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {total}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(ns: usize, na: usize) -> Self {
        Self {
            probs: Array2::from_elem((ns, na), 1.0 / na as f64),
        }
    }

    /// Row-wise softmax of arbitrary logits.
    pub fn from_logits(logits: &Table) -> Self {
        let mut probs = logits.clone();
        for mut row in probs.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Table {
        &self.probs
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    /// Most likely action in `s`; ties go to the lowest index.
    pub fn greedy_action(&self, s: usize) -> usize {
        argmax(self.probs.row(s).iter().copied())
    }

    pub fn to_json(&self) -> Result<String> {
        json::table_to_json("policy", &self.probs)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(json::table_from_json("policy", text)?)
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Discounted state-action visitation distribution (normalised to sum 1).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    rho: Table,
}

impl OccupancyMeasure {
    pub fn rho(&self) -> &Table {
        &self.rho
    }

    /// `Σ_a ρ(s, a)`.
    pub fn state_marginal(&self) -> Array1<f64> {
        self.rho.sum_axis(Axis(1))
    }

    /// `E_ρ[f]`.
    pub fn expect(&self, f: &Table) -> f64 {
        (&self.rho * f).sum()
    }

    /// Largest violation of the Bellman-flow constraint on `mdp`.
    pub fn flow_residual(&self, mdp: &FiniteMdp) -> f64 {
        let g = mdp.discount();
        let marg = self.state_marginal();
        let mut worst: f64 = 0.0;
        for s in 0..mdp.num_states() {
            let mut inflow = 0.0;
            for sp in 0..mdp.num_states() {
                for ap in 0..mdp.num_actions() {
                    inflow += mdp.transition()[[sp, ap, s]] * self.rho[[sp, ap]];
                }
            }
            let rhs = (1.0 - g) * mdp.initial_dist()[s] + g * inflow;
            worst = worst.max((marg[s] - rhs).abs());
        }
        worst
    }
}

/// Finite `|S|×|A|` Q-function.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    q: Table,
}

impl QTable {
    pub fn new(q: Table) -> Result<Self> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidTable("Q-table has non-finite entries".into()));
        }
        Ok(Self { q })
    }

    pub fn zeros(ns: usize, na: usize) -> Self {
        Self {
            q: Array2::zeros((ns, na)),
        }
    }

    pub fn values(&self) -> &Table {
        &self.q
    }

    pub fn values_mut(&mut self) -> &mut Table {
        &mut self.q
    }

    pub fn into_inner(self) -> Table {
        self.q
    }

    pub fn to_json(&self) -> Result<String> {
        json::table_to_json("q-table", &self.q)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(json::table_from_json("q-table", text)?)
    }
}

/// Max-shifted `log Σ exp`.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `V^Q(s) = logsumexp_a Q(s, a)`.
pub fn soft_value_of_q(q: &QTable) -> Array1<f64> {
    soft_values(q.values())
}

pub(crate) fn soft_values(q: &Table) -> Array1<f64> {
    q.outer_iter().map(|row| logsumexp(row.iter().copied())).collect()
}

/// `π^Q(a|s) = exp(Q(s,a) − V^Q(s))`.
pub fn softmax_policy(q: &QTable) -> TabularPolicy {
    TabularPolicy::from_logits(q.values())
}

/// `P_π[s][s'] = Σ_a π(a|s) P[s][a][s']`.
pub fn state_transition_under(mdp: &FiniteMdp, policy: &TabularPolicy) -> Array2<f64> {
    let ns = mdp.num_states();
    let mut p = Array2::zeros((ns, ns));
    for s in 0..ns {
        for a in 0..mdp.num_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for sp in 0..ns {
                p[[s, sp]] += pa * mdp.transition()[[s, a, sp]];
            }
        }
    }
    p
}

fn check_policy_shape(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.probs().dim() != (mdp.num_states(), mdp.num_actions()) {
        return Err(Error::InvalidPolicy(format!(
            "policy shape {:?} does not match MDP {}×{}",
            policy.probs().dim(),
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    Ok(())
}

/// Exact occupancy measure: `ρ(s,a) = d(s)π(a|s)` with
/// `(I − γP_πᵀ) d = (1 − γ) p₀`.
pub fn occupancy_of(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<OccupancyMeasure> {
    check_policy_shape(mdp, policy)?;
    let ns = mdp.num_states();
    let g = mdp.discount();
    let p_pi = state_transition_under(mdp, policy);
    let d = if ns * mdp.num_actions() <= DENSE_SOLVE_LIMIT {
        let a = DMatrix::from_fn(ns, ns, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - g * p_pi[[j, i]]
        });
        let b = DVector::from_iterator(ns, mdp.initial_dist().iter().map(|x| (1.0 - g) * x));
        let sol = a.lu().solve(&b).ok_or(Error::Singular)?;
        Array1::from_iter(sol.iter().copied())
    } else {
        state_distribution_power(mdp, &p_pi)
    };
    let mut rho = Array2::zeros((ns, mdp.num_actions()));
    for s in 0..ns {
        // tiny negative round-off from the solve is clamped
        let ds = d[s].max(0.0);
        for a in 0..mdp.num_actions() {
            rho[[s, a]] = ds * policy.prob(s, a);
        }
    }
    let z = rho.sum();
    rho.mapv_inplace(|x| x / z);
    Ok(OccupancyMeasure { rho })
}

fn state_distribution_power(mdp: &FiniteMdp, p_pi: &Array2<f64>) -> Array1<f64> {
    let g = mdp.discount();
    let base = mdp.initial_dist().mapv(|x| (1.0 - g) * x);
    let mut d = base.clone();
    loop {
        let next = &base + &(p_pi.t().dot(&d) * g);
        let diff = (&next - &d).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        d = next;
        if diff < 1e-14 {
            return d;
        }
    }
}

/// Expected discounted sum `E[Σ_t γᵗ f(s_t, a_t)]` from `p₀`, i.e. `E_ρ[f]/(1−γ)`.
pub fn discounted_value(mdp: &FiniteMdp, policy: &TabularPolicy, f: &Table) -> Result<f64> {
    let occ = occupancy_of(mdp, policy)?;
    Ok(occ.expect(f) / (1.0 - mdp.discount()))
}

/// `ℬ^π_r[Q](s,a) = r(s,a) + γ E_{s'}[V^π(s')]` with
/// `V^π(s) = E_{a∼π}[Q(s,a) − log π(a|s)]`.
pub fn soft_bellman(mdp: &FiniteMdp, reward: &Table, policy: &TabularPolicy, q: &QTable) -> Result<QTable> {
    check_policy_shape(mdp, policy)?;
    let v = policy_soft_values(policy, q)?;
    let g = mdp.discount();
    let out = Array2::from_shape_fn((mdp.num_states(), mdp.num_actions()), |(s, a)| {
        reward[[s, a]] + g * mdp.expected_next(s, a, &v)
    });
    QTable::new(out)
}

/// `V^π(s) = Σ_a π(a|s)(Q(s,a) − log π(a|s))`; zero probabilities are a domain error.
pub fn policy_soft_values(policy: &TabularPolicy, q: &QTable) -> Result<Array1<f64>> {
    let mut v = Array1::zeros(policy.num_states());
    for s in 0..policy.num_states() {
        let mut acc = 0.0;
        for a in 0..policy.num_actions() {
            let p = policy.prob(s, a);
            if p <= 0.0 {
                return Err(Error::Domain(format!("π({a}|{s}) = 0 makes log π undefined")));
            }
            acc += p * (q.values()[[s, a]] - p.ln());
        }
        v[s] = acc;
    }
    Ok(v)
}

/// `r^Q(s,a) = Q(s,a) − γ Σ_{s'} P(s'|s,a) V^Q(s')`.
pub fn inverse_bellman(mdp: &FiniteMdp, q: &QTable) -> Table {
    inverse_bellman_with_discount(mdp, q, mdp.discount())
}

/// [`inverse_bellman`] with an explicit discount, which may be `0`.
pub fn inverse_bellman_with_discount(mdp: &FiniteMdp, q: &QTable, discount: f64) -> Table {
    let v = soft_value_of_q(q);
    Array2::from_shape_fn((mdp.num_states(), mdp.num_actions()), |(s, a)| {
        q.values()[[s, a]] - discount * mdp.expected_next(s, a, &v)
    })
}

/// Iterates `Q ← r + γ P · logsumexp(Q)` until the sup-norm residual drops below `tol`.
pub fn soft_value_iteration(mdp: &FiniteMdp, reward: &Table, tol: f64) -> QTable {
    assert!(tol > 0.0, "tolerance must be positive");
    let g = mdp.discount();
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut q = Array2::zeros((ns, na));
    loop {
        let v = soft_values(&q);
        let next = Array2::from_shape_fn((ns, na), |(s, a)| reward[[s, a]] + g * mdp.expected_next(s, a, &v));
        let resid = (&next - &q).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        q = next;
        // residual of the returned iterate is at most γ·resid
        if g * resid < tol {
            return QTable { q };
        }
    }
}

/// Sup-norm distance between two tables.
pub fn sup_distance(a: &Table, b: &Table) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
