//! Policy evaluation: Monte-Carlo episodic statistics, CVaR of cost, exact
//! discounted values and method comparison tables.
//!
//! Episodic sums are undiscounted. The exact values are discounted
//! (`E_ρ[f]/(1 − γ)`); the two are different quantities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{rollout_one, stream_rng};
use crate::error::{Error, Result};
use crate::mdp::{discounted_value, FiniteMdp, TabularPolicy};

pub const MIN_EPISODES: usize = 20;

pub const CSV_HEADER: &str = "method,mean_return,std_return,mean_cost,std_cost,cvar10_cost,n_episodes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub cvar10_cost: f64,
    pub n_episodes: usize,
    pub exact_return: Option<f64>,
    pub exact_cost: Option<f64>,
}

impl EvalReport {
    /// Statistics of a list of episode returns and costs.
    pub fn from_episodes(returns: &[f64], costs: &[f64]) -> Result<Self> {
        if returns.len() != costs.len() {
            return Err(Error::Domain("returns and costs differ in length".into()));
        }
        if returns.is_empty() {
            return Err(Error::Domain("no episodes".into()));
        }
        let (mean_return, std_return) = mean_std(returns);
        let (mean_cost, std_cost) = mean_std(costs);
        Ok(Self {
            mean_return,
            std_return,
            mean_cost,
            std_cost,
            cvar10_cost: cvar_upper(costs, 0.1),
            n_episodes: returns.len(),
            exact_return: None,
            exact_cost: None,
        })
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean of the `⌈α·n⌉` largest values (at least one).
pub fn cvar_upper(xs: &[f64], alpha: f64) -> f64 {
    assert!(!xs.is_empty(), "CVaR of an empty sample");
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((alpha * xs.len() as f64).ceil() as usize).clamp(1, xs.len());
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; zero when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Rolls out `n_episodes` episodes of at most `horizon` steps and attaches
/// the exact discounted return and cost.
pub fn evaluate(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes < MIN_EPISODES {
        return Err(Error::Config(format!(
            "evaluation needs at least {MIN_EPISODES} episodes"
        )));
    }
    if horizon == 0 {
        return Err(Error::Config("evaluation horizon must be positive".into()));
    }
    let episodes: Vec<(f64, f64)> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let t = rollout_one(mdp, policy, horizon, &mut stream_rng(seed, i as u64));
            (t.total_return(), t.total_cost())
        })
        .collect();
    let (returns, costs): (Vec<f64>, Vec<f64>) = episodes.into_iter().unzip();
    let mut report = EvalReport::from_episodes(&returns, &costs)?;
    report.exact_return = Some(discounted_value(mdp, policy, mdp.reward())?);
    report.exact_cost = Some(discounted_value(mdp, policy, mdp.cost())?);
    Ok(report)
}

/// Reports keyed by method, with the lowest-mean-cost method flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: BTreeMap<String, EvalReport>,
    pub lowest_cost: String,
}

/// Flags the method with the lowest mean cost; ties go to the
/// lexicographically smallest name.
pub fn compare(reports: BTreeMap<String, EvalReport>) -> Result<Comparison> {
    let lowest_cost = reports
        .iter()
        .fold(None::<(&String, f64)>, |best, (name, r)| match best {
            Some((_, c)) if c <= r.mean_cost => best,
            _ => Some((name, r.mean_cost)),
        })
        .map(|(name, _)| name.clone())
        .ok_or_else(|| Error::Domain("nothing to compare".into()))?;
    Ok(Comparison {
        rows: reports,
        lowest_cost,
    })
}

impl Comparison {
    /// Full-precision CSV.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (name, r) in &self.rows {
            writeln!(
                out,
                "{name},{},{},{},{},{},{}",
                r.mean_return, r.std_return, r.mean_cost, r.std_cost, r.cvar10_cost, r.n_episodes
            )
            .unwrap();
        }
        out
    }

    /// Aligned table with one decimal; the lowest-cost row is starred.
    pub fn to_text(&self) -> String {
        let width = self.rows.keys().map(String::len).max().unwrap_or(0).max("method".len());
        let mut out = format!(
            "{:<width$}  {:>16}  {:>16}  {:>8}\n",
            "method", "return", "cost", "cvar10"
        );
        for (name, r) in &self.rows {
            let mark = if *name == self.lowest_cost { " *" } else { "" };
            writeln!(
                out,
                "{name:<width$}  {:>16}  {:>16}  {:>8.1}{mark}",
                format!("{:.1} ± {:.1}", r.mean_return, r.std_return),
                format!("{:.1} ± {:.1}", r.mean_cost, r.std_cost),
                r.cvar10_cost
            )
            .unwrap();
        }
        out
    }
}
