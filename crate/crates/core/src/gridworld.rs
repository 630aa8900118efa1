//! Constrained gridworlds with goal rewards and hazard costs, and the pair of
//! soft-optimal experts (cost-blind and cost-penalised) that generate data.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{soft_value_iteration, softmax_policy, FiniteMdp, TabularPolicy};

/// Up, right, down, left.
pub const NUM_ACTIONS: usize = 4;
const MOVES: [(i64, i64); NUM_ACTIONS] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

/// Tolerance used for the experts' soft value iteration.
pub const EXPERT_VI_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub start: (usize, usize),
    pub goal_cells: Vec<(usize, usize)>,
    pub goal_reward: f64,
    #[serde(default)]
    pub hazard_cells: Vec<(usize, usize)>,
    #[serde(default = "default_hazard_cost")]
    pub hazard_cost: f64,
    /// Extra hazard cells placed uniformly at random (avoiding start and goals).
    #[serde(default)]
    pub random_hazards: usize,
    #[serde(default)]
    pub slip_prob: f64,
    pub discount: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hazard_cost() -> f64 {
    1.0
}

impl GridworldSpec {
    pub fn state_of(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_of(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGridworld("empty grid".into()));
        }
        let inside = |&(x, y): &(usize, usize)| x < self.width && y < self.height;
        if !inside(&self.start) {
            return Err(Error::InvalidGridworld("start cell outside the grid".into()));
        }
        if let Some(c) = self.goal_cells.iter().chain(&self.hazard_cells).find(|c| !inside(c)) {
            return Err(Error::InvalidGridworld(format!("cell {c:?} outside the grid")));
        }
        if self.goal_cells.contains(&self.start) || self.hazard_cells.contains(&self.start) {
            return Err(Error::InvalidGridworld("goal or hazard overlaps the start cell".into()));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(Error::InvalidGridworld(format!(
                "slip_prob {} outside [0, 1)",
                self.slip_prob
            )));
        }
        if self.hazard_cost < 0.0 {
            return Err(Error::InvalidGridworld("hazard_cost must be non-negative".into()));
        }
        Ok(())
    }

    /// Hazard cells after adding the seeded random ones.
    pub fn resolved_hazards(&self) -> Vec<(usize, usize)> {
        let mut hazards = self.hazard_cells.clone();
        if self.random_hazards > 0 {
            let mut free: Vec<(usize, usize)> = (0..self.height)
                .flat_map(|y| (0..self.width).map(move |x| (x, y)))
                .filter(|c| *c != self.start && !self.goal_cells.contains(c) && !hazards.contains(c))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            free.shuffle(&mut rng);
            hazards.extend(free.into_iter().take(self.random_hazards));
        }
        hazards
    }
}

fn step(spec: &GridworldSpec, (x, y): (usize, usize), action: usize) -> (usize, usize) {
    let (dx, dy) = MOVES[action];
    let nx = x as i64 + dx;
    let ny = y as i64 + dy;
    if nx < 0 || ny < 0 || nx >= spec.width as i64 || ny >= spec.height as i64 {
        (x, y)
    } else {
        (nx as usize, ny as usize)
    }
}

/// Builds the gridworld MDP.
///
/// With probability `1 − slip_prob` the intended move happens, otherwise the
/// agent moves in one of the two perpendicular directions. Moves off the grid
/// leave the agent in place. `r(s,a)` and `c(s,a)` are the expected goal
/// reward and hazard cost of the destination; goal cells absorb with zero
/// reward and cost and are marked terminal.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<FiniteMdp> {
    spec.validate()?;
    let ns = spec.width * spec.height;
    let hazards = spec.resolved_hazards();
    let mut is_goal = vec![false; ns];
    for &(x, y) in &spec.goal_cells {
        is_goal[spec.state_of(x, y)] = true;
    }
    let mut is_hazard = vec![false; ns];
    for &(x, y) in &hazards {
        is_hazard[spec.state_of(x, y)] = true;
    }

    let mut p = Array3::zeros((ns, NUM_ACTIONS, ns));
    let mut reward = Array2::zeros((ns, NUM_ACTIONS));
    let mut cost = Array2::zeros((ns, NUM_ACTIONS));
    for s in 0..ns {
        let cell = spec.cell_of(s);
        for a in 0..NUM_ACTIONS {
            if is_goal[s] {
                p[[s, a, s]] = 1.0;
                continue;
            }
            let perpendicular = [(a + 1) % NUM_ACTIONS, (a + 3) % NUM_ACTIONS];
            let outcomes = [
                (a, 1.0 - spec.slip_prob),
                (perpendicular[0], spec.slip_prob / 2.0),
                (perpendicular[1], spec.slip_prob / 2.0),
            ];
            for (dir, prob) in outcomes {
                if prob == 0.0 {
                    continue;
                }
                let (nx, ny) = step(spec, cell, dir);
                let sp = spec.state_of(nx, ny);
                p[[s, a, sp]] += prob;
                if is_goal[sp] {
                    reward[[s, a]] += prob * spec.goal_reward;
                }
                if is_hazard[sp] {
                    cost[[s, a]] += prob * spec.hazard_cost;
                }
            }
        }
    }
    let mut p0 = Array1::zeros(ns);
    p0[spec.state_of(spec.start.0, spec.start.1)] = 1.0;
    FiniteMdp::with_terminals(p, reward, cost, spec.discount, p0, is_goal)
}

/// The two data-generating policies.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPair {
    pub unconstrained: TabularPolicy,
    pub constrained: TabularPolicy,
    pub lambda_cost: f64,
}

/// Soft-optimal policy for `reward / temperature`.
pub fn soft_optimal_policy(mdp: &FiniteMdp, reward: &Array2<f64>, temperature: f64) -> TabularPolicy {
    let scaled = reward.mapv(|x| x / temperature);
    softmax_policy(&soft_value_iteration(mdp, &scaled, EXPERT_VI_TOL))
}

/// Cost-blind expert on `r` and Lagrangian expert on `r − λc`, both soft-optimal
/// at the given temperature.
pub fn synthesize_experts(mdp: &FiniteMdp, lambda_cost: f64, temperature: f64) -> Result<ExpertPair> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(lambda_cost >= 0.0) {
        return Err(Error::Config(format!(
            "lambda_cost must be non-negative, got {lambda_cost}"
        )));
    }
    let unconstrained = soft_optimal_policy(mdp, mdp.reward(), temperature);
    let penalised = mdp.reward() - &(mdp.cost() * lambda_cost);
    let constrained = soft_optimal_policy(mdp, &penalised, temperature);
    Ok(ExpertPair {
        unconstrained,
        constrained,
        lambda_cost,
    })
}

/// The 8×8 layout used by the bundled experiments: start bottom-left, goal
/// top-left, a two-row hazard river between them with a gap on the right edge.
pub fn river_crossing(discount: f64, slip_prob: f64) -> GridworldSpec {
    let hazard_cells = (0..6).flat_map(|x| [(x, 3), (x, 4)]).collect();
    GridworldSpec {
        width: 8,
        height: 8,
        start: (0, 0),
        goal_cells: vec![(0, 7)],
        goal_reward: 10.0,
        hazard_cells,
        hazard_cost: 1.0,
        random_hazards: 0,
        slip_prob,
        discount,
        seed: 0,
    }
}
