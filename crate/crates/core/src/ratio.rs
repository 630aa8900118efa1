//! Occupancy-ratio estimation with a two-head discriminator.
//!
//! Two tables `μ₁, μ₂ ∈ (0, 1)` are fitted by gradient ascent on
//!
//! ```text
//! g(μ₁, μ₂) = E_mix[log(μ₂ − μ₁μ₂)] + E_un[log(μ₁ − μ₁μ₂)]
//! ```
//!
//! whose unique maximiser satisfies `μ₁/μ₂ = ρ_un/ρ_mix`. Expectations are
//! weighted means over the empirical occupancies of the two datasets.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::{empirical_occupancy, OccupancyWeighting, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::json;
use crate::mdp::Table;
use crate::psi::sigmoid;

/// Clip level for the discriminator heads.
pub const MU_EPS: f64 = 1e-6;

fn clip_mu(x: f64) -> f64 {
    x.clamp(MU_EPS, 1.0 - MU_EPS)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logit tables for the two discriminator heads.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    logits1: Table,
    logits2: Table,
}

impl RatioTable {
    /// Zero logits: `μ₁ = μ₂ = 0.5`, so `τ = 1` everywhere.
    pub fn neutral(ns: usize, na: usize) -> Self {
        Self {
            logits1: Array2::zeros((ns, na)),
            logits2: Array2::zeros((ns, na)),
        }
    }

    pub fn from_logits(logits1: Table, logits2: Table) -> Result<Self> {
        if logits1.dim() != logits2.dim() {
            return Err(Error::InvalidTable("logit tables differ in shape".into()));
        }
        if logits1.iter().chain(logits2.iter()).any(|x| x.is_nan()) {
            return Err(Error::InvalidTable("NaN logit".into()));
        }
        Ok(Self { logits1, logits2 })
    }

    /// Tables holding the given head values (clipped into `[ε, 1 − ε]`).
    pub fn from_mu(mu1: &Table, mu2: &Table) -> Result<Self> {
        Self::from_logits(mu1.mapv(|m| logit(clip_mu(m))), mu2.mapv(|m| logit(clip_mu(m))))
    }

    pub fn logits1(&self) -> &Table {
        &self.logits1
    }
    pub fn logits2(&self) -> &Table {
        &self.logits2
    }

    pub fn mu1(&self) -> Table {
        self.logits1.mapv(|l| clip_mu(sigmoid(l)))
    }

    pub fn mu2(&self) -> Table {
        self.logits2.mapv(|l| clip_mu(sigmoid(l)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.logits1.dim()
    }

    /// Same JSON-table layout as a Q-table, with two value blocks.
    pub fn to_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "kind": "ratio-table",
            "num_states": self.logits1.nrows(),
            "num_actions": self.logits1.ncols(),
            "logits1": json::vec2(&self.logits1)?,
            "logits2": json::vec2(&self.logits2)?,
        });
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text)?;
        let ns = json::get_usize(&doc, "num_states")?;
        let na = json::get_usize(&doc, "num_actions")?;
        Self::from_logits(
            json::parse_vec2(json::field(&doc, "logits1")?, ns, na)?,
            json::parse_vec2(json::field(&doc, "logits2")?, ns, na)?,
        )
    }
}

/// `τ(s,a)` on the support of the mixed data, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimate {
    pub tau: Table,
    pub support_mask: Array2<bool>,
}

impl RatioEstimate {
    /// `τ ≡ 1` on `support_mask`.
    pub fn ones(support_mask: Array2<bool>) -> Self {
        Self {
            tau: support_mask.mapv(|m| if m { 1.0 } else { 0.0 }),
            support_mask,
        }
    }
}

/// `g(μ₁, μ₂)` for occupancy weights `w_mix`, `w_un`.
pub fn g_objective(rt: &RatioTable, w_mix: &Table, w_un: &Table) -> f64 {
    let mu1 = rt.mu1();
    let mu2 = rt.mu2();
    g_of_mu(&mu1, &mu2, w_mix, w_un)
}

/// `g` evaluated directly on head values (no logit parameterisation).
pub fn g_of_mu(mu1: &Table, mu2: &Table, w_mix: &Table, w_un: &Table) -> f64 {
    let mut total = 0.0;
    Zip::from(mu1)
        .and(mu2)
        .and(w_mix)
        .and(w_un)
        .for_each(|&m1, &m2, &wm, &wu| {
            if wm > 0.0 {
                total += wm * (m2 * (1.0 - m1)).ln();
            }
            if wu > 0.0 {
                total += wu * (m1 * (1.0 - m2)).ln();
            }
        });
    total
}

/// `∂g/∂logits₁`, `∂g/∂logits₂`. Heads sitting on a clip boundary have zero
/// gradient.
pub fn g_gradient(rt: &RatioTable, w_mix: &Table, w_un: &Table) -> (Table, Table) {
    let grad_head = |l: f64, own: f64, other: f64| {
        let m = sigmoid(l);
        if !(MU_EPS..=1.0 - MU_EPS).contains(&m) {
            0.0
        } else {
            own * (1.0 - m) - other * m
        }
    };
    let mut g1 = Array2::zeros(rt.dim());
    let mut g2 = Array2::zeros(rt.dim());
    Zip::from(&mut g1)
        .and(&mut g2)
        .and(&rt.logits1)
        .and(&rt.logits2)
        .and(w_mix)
        .and(w_un)
        .for_each(|d1, d2, &l1, &l2, &wm, &wu| {
            *d1 = grad_head(l1, wu, wm);
            *d2 = grad_head(l2, wm, wu);
        });
    (g1, g2)
}

/// Exact maximiser of `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioOptimum {
    pub mu1: Table,
    pub mu2: Table,
}

impl RatioOptimum {
    /// `μ₁*/μ₂*`, zero where `μ₂* = 0`.
    pub fn tau(&self) -> Table {
        Zip::from(&self.mu1)
            .and(&self.mu2)
            .map_collect(|&a, &b| if b > 0.0 { a / b } else { 0.0 })
    }
}

/// `μ₁* = ρ_un/(ρ_un + ρ_mix)`, `μ₂* = ρ_mix/(ρ_un + ρ_mix)`. Pairs carrying no
/// mass in either distribution do not affect `g`; they get `0.5`.
pub fn closed_form_optimum(w_un: &Table, w_mix: &Table) -> RatioOptimum {
    let split = |own: f64, other: f64| {
        let z = own + other;
        if z > 0.0 {
            own / z
        } else {
            0.5
        }
    };
    RatioOptimum {
        mu1: Zip::from(w_un).and(w_mix).map_collect(|&u, &m| split(u, m)),
        mu2: Zip::from(w_un).and(w_mix).map_collect(|&u, &m| split(m, u)),
    }
}

/// `τ = μ₁/μ₂` on the support, `0` off it.
pub fn tau_of(rt: &RatioTable, support_mask: &Array2<bool>) -> RatioEstimate {
    let mu1 = rt.mu1();
    let mu2 = rt.mu2();
    let tau = Zip::from(&mu1)
        .and(&mu2)
        .and(support_mask)
        .map_collect(|&a, &b, &on| if on { a / b } else { 0.0 });
    RatioEstimate {
        tau,
        support_mask: support_mask.clone(),
    }
}

/// Undesired mass that falls outside the support of the mixed data.
pub fn coverage_violation(w_un: &Table, w_mix: &Table) -> f64 {
    Zip::from(w_un)
        .and(w_mix)
        .fold(0.0, |acc, &u, &m| if m == 0.0 && u > 0.0 { acc + u } else { acc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatioConfig {
    pub steps: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub occupancy_weighting: OccupancyWeighting,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            lr: 2.0,
            checkpoint_every: 1_000,
            occupancy_weighting: OccupancyWeighting::Discounted,
        }
    }
}

/// Result of [`fit_ratio`].
#[derive(Debug, Clone, PartialEq)]
pub struct RatioFit {
    pub table: RatioTable,
    /// `(step, g)` at every checkpoint, including step 0 and the final step.
    pub trace: Vec<(usize, f64)>,
    pub w_un: Table,
    pub w_mix: Table,
}

impl RatioFit {
    /// Support of the mixed data.
    pub fn support_mask(&self) -> Array2<bool> {
        self.w_mix.mapv(|w| w > 0.0)
    }

    pub fn estimate(&self) -> RatioEstimate {
        tau_of(&self.table, &self.support_mask())
    }
}

/// Full-batch gradient ascent on `g` from zero logits.
pub fn fit_ratio_weights(w_un: &Table, w_mix: &Table, cfg: &RatioConfig) -> RatioTable {
    fit_ratio_traced(w_un, w_mix, cfg).0
}

fn fit_ratio_traced(w_un: &Table, w_mix: &Table, cfg: &RatioConfig) -> (RatioTable, Vec<(usize, f64)>) {
    let (ns, na) = w_un.dim();
    let mut rt = RatioTable::neutral(ns, na);
    let every = cfg.checkpoint_every.max(1);
    let mut trace = vec![(0, g_objective(&rt, w_mix, w_un))];
    for step in 1..=cfg.steps {
        let (d1, d2) = g_gradient(&rt, w_mix, w_un);
        rt.logits1.scaled_add(cfg.lr, &d1);
        rt.logits2.scaled_add(cfg.lr, &d2);
        if step % every == 0 || step == cfg.steps {
            trace.push((step, g_objective(&rt, w_mix, w_un)));
        }
    }
    (rt, trace)
}

/// Fits the discriminator on the empirical occupancies of `dataset_un` and
/// `dataset_mix`.
///
/// The ascent is full-batch and starts from zero logits, so the result does
/// not depend on `seed`; the argument is kept for interface parity with the
/// other trainers.
pub fn fit_ratio(
    dataset_un: &TrajectoryDataset,
    dataset_mix: &TrajectoryDataset,
    cfg: &RatioConfig,
    _seed: u64,
) -> Result<RatioFit> {
    if dataset_un.is_empty() {
        return Err(Error::EmptyDataset("undesired dataset"));
    }
    if dataset_mix.is_empty() {
        return Err(Error::EmptyDataset("mixed dataset"));
    }
    if dataset_un.num_states() != dataset_mix.num_states() || dataset_un.num_actions() != dataset_mix.num_actions() {
        return Err(Error::Domain("datasets disagree on state/action counts".into()));
    }
    let w_un = empirical_occupancy(dataset_un, cfg.occupancy_weighting)?;
    let w_mix = empirical_occupancy(dataset_mix, cfg.occupancy_weighting)?;
    let violation = coverage_violation(&w_un, &w_mix);
    if violation > 0.0 {
        log::warn!("undesired occupancy mass {violation:.3e} lies outside the mixed data support");
    }
    let (table, trace) = fit_ratio_traced(&w_un, &w_mix, cfg);
    Ok(RatioFit {
        table,
        trace,
        w_un,
        w_mix,
    })
}
