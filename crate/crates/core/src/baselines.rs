//! Comparison methods: behaviour cloning on the mix or against the undesired
//! data, inverse soft-Q imitation on either dataset, and a tabular
//! discriminator-weighted BC with positive-unlabelled weighting.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::{empirical_occupancy, OccupancyWeighting, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::mdp::{QTable, Table, TabularPolicy};
use crate::optim::{OptimizerKind, Stepper};
use crate::psi::{sigmoid, Regularizer};
use crate::ratio::RatioEstimate;
use crate::uniq::{descend_q, policy_logit_step, weighted_mle, TrainedUniq, TransitionBatch, UniqConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    BcMix,
    BcUn,
    IqMix,
    IqUn,
    Dwbc,
}

impl BaselineKind {
    pub const ALL: [Self; 5] = [Self::BcMix, Self::BcUn, Self::IqMix, Self::IqUn, Self::Dwbc];

    pub fn name(self) -> &'static str {
        match self {
            Self::BcMix => "bc-mix",
            Self::BcUn => "bc-un",
            Self::IqMix => "iq-mix",
            Self::IqUn => "iq-un",
            Self::Dwbc => "dwbc",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcMode {
    /// Maximise the log-likelihood of the data.
    Maximize,
    /// Minimise it, keeping every probability above a floor.
    Minimize,
}

/// Probability floor for likelihood minimisation.
pub const BC_UN_FLOOR: f64 = 0.01;

/// Behaviour cloning. `Maximize` is the closed-form MLE (visit frequencies,
/// uniform on unvisited states); `Minimize` runs projected gradient descent
/// on the probabilities from the uniform policy.
pub fn train_bc(dataset: &TrajectoryDataset, mode: BcMode, lr: f64, steps: usize) -> Result<TabularPolicy> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("behaviour cloning"));
    }
    let counts = dataset.visit_counts();
    let uniform = TabularPolicy::uniform(dataset.num_states(), dataset.num_actions());
    match mode {
        BcMode::Maximize => Ok(weighted_mle(&counts, &uniform)),
        BcMode::Minimize => Ok(minimize_likelihood(&counts, lr, steps, BC_UN_FLOOR)),
    }
}

/// Maximum likelihood by gradient ascent on logits, one state at a time with
/// the state's counts normalised to sum to one.
pub fn train_bc_gradient(dataset: &TrajectoryDataset, lr: f64, steps: usize) -> Result<TabularPolicy> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("behaviour cloning"));
    }
    let counts = dataset.visit_counts();
    let mut logits = Array2::zeros(counts.dim());
    for _ in 0..steps {
        policy_logit_step(&mut logits, &counts, lr);
    }
    Ok(TabularPolicy::from_logits(&logits))
}

fn minimize_likelihood(counts: &Table, lr: f64, steps: usize, floor: f64) -> TabularPolicy {
    let (ns, na) = counts.dim();
    let mut probs = Array2::from_elem((ns, na), 1.0 / na as f64);
    for s in 0..ns {
        let n: f64 = counts.row(s).sum();
        if n == 0.0 {
            continue;
        }
        let target = counts.row(s).mapv(|c| c / n);
        let mut p = probs.row(s).to_owned();
        for _ in 0..steps {
            // ∂/∂π Σ n̄ log π = n̄/π; step against it
            let y = Zip::from(&p).and(&target).map_collect(|&pi, &t| pi - lr * t / pi);
            p = project_capped_simplex(&y, floor);
        }
        probs.row_mut(s).assign(&p);
    }
    TabularPolicy::new(probs).expect("projection keeps rows on the simplex")
}

/// Euclidean projection onto `{x : Σx = 1, x ≥ floor}`.
pub fn project_capped_simplex(y: &Array1<f64>, floor: f64) -> Array1<f64> {
    let n = y.len();
    let mass = 1.0 - floor * n as f64;
    assert!(mass >= 0.0, "floor too large for {n} entries");
    let shifted = y.mapv(|v| v - floor);
    let mut sorted = shifted.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        acc += u;
        let t = (acc - mass) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    shifted.mapv(|v| (v - theta).max(0.0) + floor)
}

/// `Φ(Q) = Σ w r − (1 − γ) Σ_h w_h V(h) − Σ w ψ(r)`, the imitation objective
/// maximised by inverse soft-Q learning.
pub fn iq_objective(q: &QTable, batch: &TransitionBatch, discount: f64, psi: &Regularizer) -> f64 {
    iq_value_and_gradient(q.values(), batch, discount, psi).0
}

/// `∇_Q Φ`.
pub fn iq_gradient(q: &QTable, batch: &TransitionBatch, discount: f64, psi: &Regularizer) -> Table {
    iq_value_and_gradient(q.values(), batch, discount, psi).1
}

fn iq_value_and_gradient(q: &Table, batch: &TransitionBatch, discount: f64, psi: &Regularizer) -> (f64, Table) {
    let v = batch.values(q);
    let mut value = -(1.0 - discount) * batch.head_value(&v);
    let mut coefs = Vec::with_capacity(batch.items().len());
    for it in batch.items() {
        let next = if it.done { 0.0 } else { v[it.s_next] };
        let r = q[[it.s, it.a]] - discount * next;
        value += it.weight * (r - psi.value(r));
        coefs.push(it.weight * (1.0 - psi.derivative(r)));
    }
    (value, batch.chain_gradient(q, &v, &coefs, discount, 1.0 - discount))
}

/// Which dataset plays the expert and which way the objective is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IqRole {
    /// Maximise `Φ` on the mix (imitation).
    Imitate,
    /// Minimise the `τ ≡ 1` ratio-corrected objective on the undesired data.
    Avoid,
}

/// Inverse soft-Q learning on one dataset, with the same interleaved WBC
/// policy extraction as the main trainer. `config.psi` is the regulariser of
/// whichever objective `role` selects.
pub fn train_iq(dataset: &TrajectoryDataset, role: IqRole, config: &UniqConfig, seed: u64) -> Result<TrainedUniq> {
    config.validate()?;
    let batch = TransitionBatch::from_dataset(dataset, config.occupancy_weighting, config.value_mode)?;
    let discount = config.discount_for(dataset);
    let psi = config.psi;
    let support = batch.pair_weights().mapv(|w| w > 0.0);
    let ratio = RatioEstimate::ones(support);
    let tau = ratio.tau.clone();
    let run = match role {
        IqRole::Imitate => descend_q(&batch, config, seed, true, |q, b| {
            let (value, grad) = iq_value_and_gradient(q, b, discount, &psi);
            (value, -grad)
        })?,
        IqRole::Avoid => descend_q(&batch, config, seed, true, |q, b| {
            let est = RatioEstimate {
                tau: tau.clone(),
                support_mask: tau.mapv(|t| t > 0.0),
            };
            let qt = QTable::new(q.clone()).expect("finite Q during descent");
            (
                crate::uniq::f_objective(&qt, &est, b, discount, &psi),
                crate::uniq::f_gradient(&qt, &est, b, discount, &psi),
            )
        })?,
    };
    Ok(TrainedUniq {
        q: run.q,
        policy: run.policy,
        ratio,
        loss_trace: run.trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DwbcConfig {
    /// Weight of the undesired (positive) data in the discriminator loss.
    pub eta: f64,
    /// Clamp each pair's unlabelled-risk coefficient at zero.
    pub pu_clamp: bool,
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub occupancy_weighting: OccupancyWeighting,
}

impl Default for DwbcConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            pu_clamp: false,
            lr: 0.05,
            steps: 2_000,
            optimizer: OptimizerKind::Adam,
            occupancy_weighting: OccupancyWeighting::Uniform,
        }
    }
}

/// Clip level for the DWBC discriminator.
pub const DWBC_EPS: f64 = 1e-6;

/// Discriminator and policy from [`train_dwbc`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDwbc {
    /// `d(s,a)`, the estimated probability that a pair is undesired.
    pub discriminator: Table,
    pub policy: TabularPolicy,
}

impl TrainedDwbc {
    /// Policy weights `1/d − 1`.
    pub fn weights(&self) -> Table {
        self.discriminator.mapv(|d| 1.0 / d - 1.0)
    }
}

/// Discriminator loss
/// `η E_un[−log d] + E_mix[−log(1 − d)] − η E_un[−log(1 − d)]`.
pub fn dwbc_loss(d: &Table, w_un: &Table, w_mix: &Table, eta: f64, pu_clamp: bool) -> f64 {
    let mut total = 0.0;
    Zip::from(d).and(w_un).and(w_mix).for_each(|&d, &u, &m| {
        let unlabeled = if pu_clamp { (m - eta * u).max(0.0) } else { m - eta * u };
        if u > 0.0 {
            total -= eta * u * d.ln();
        }
        if unlabeled != 0.0 {
            total -= unlabeled * (1.0 - d).ln();
        }
    });
    total
}

fn dwbc_logit_gradient(logits: &Table, w_un: &Table, w_mix: &Table, eta: f64, pu_clamp: bool) -> Table {
    Zip::from(logits).and(w_un).and(w_mix).map_collect(|&l, &u, &m| {
        let d = sigmoid(l);
        if !(DWBC_EPS..=1.0 - DWBC_EPS).contains(&d) {
            return 0.0;
        }
        let unlabeled = if pu_clamp { (m - eta * u).max(0.0) } else { m - eta * u };
        -eta * u * (1.0 - d) + unlabeled * d
    })
}

/// Fits a tabular `d(s,a)` on the loss above, then the policy maximising
/// `E_mix[(1/d − 1) log π]`; states without mixed data get uniform rows.
pub fn train_dwbc(
    dataset_un: &TrajectoryDataset,
    dataset_mix: &TrajectoryDataset,
    cfg: &DwbcConfig,
) -> Result<TrainedDwbc> {
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        return Err(Error::Config(format!("eta {} outside (0, 1]", cfg.eta)));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config("DWBC learning rate must be positive".into()));
    }
    if dataset_un.is_empty() {
        return Err(Error::EmptyDataset("undesired dataset"));
    }
    if dataset_mix.is_empty() {
        return Err(Error::EmptyDataset("mixed dataset"));
    }
    let w_un = empirical_occupancy(dataset_un, cfg.occupancy_weighting)?;
    let w_mix = empirical_occupancy(dataset_mix, cfg.occupancy_weighting)?;
    let mut logits = Array2::zeros(w_un.dim());
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr, w_un.dim());
    for _ in 0..cfg.steps {
        let g = dwbc_logit_gradient(&logits, &w_un, &w_mix, cfg.eta, cfg.pu_clamp);
        stepper.descend(&mut logits, &g);
    }
    let discriminator = logits.mapv(|l| sigmoid(l).clamp(DWBC_EPS, 1.0 - DWBC_EPS));
    let weights = Zip::from(&w_mix)
        .and(&discriminator)
        .map_collect(|&m, &d| m * (1.0 / d - 1.0));
    let uniform = TabularPolicy::uniform(w_un.nrows(), w_un.ncols());
    Ok(TrainedDwbc {
        discriminator,
        policy: weighted_mle(&weights, &uniform),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetRole, Trajectory, Transition};
    use crate::mdp::sup_distance;
    use ndarray::array;

    fn dataset(pairs: &[(usize, usize)], role: DatasetRole, ns: usize, na: usize) -> TrajectoryDataset {
        let trajs = pairs
            .iter()
            .map(|&(s, a)| {
                Trajectory::new(vec![Transition {
                    s,
                    a,
                    r: 0.0,
                    c: 1.0,
                    s_next: s,
                    done: true,
                }])
                .unwrap()
            })
            .collect();
        let threshold = (role == DatasetRole::Undesired).then_some(0.5);
        TrajectoryDataset::new(trajs, role, (0, pairs.len()), ns, na, 0.9, threshold).unwrap()
    }

    #[test]
    fn bc_counts_and_unvisited_rows() {
        let ds = dataset(&[(0, 0), (0, 0), (0, 0), (0, 1)], DatasetRole::Mix, 2, 2);
        let pi = train_bc(&ds, BcMode::Maximize, 0.0, 0).unwrap();
        assert_eq!(pi.probs().row(0).to_vec(), vec![0.75, 0.25]);
        assert_eq!(pi.probs().row(1).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn gradient_bc_matches_closed_form() {
        let ds = dataset(&[(0, 0), (0, 1), (0, 1), (1, 2), (1, 0)], DatasetRole::Mix, 3, 3);
        let exact = train_bc(&ds, BcMode::Maximize, 0.0, 0).unwrap();
        let grad = train_bc_gradient(&ds, 1.5, 2_000_000).unwrap();
        assert!(sup_distance(exact.probs(), grad.probs()) < 1e-6);
    }

    #[test]
    fn likelihood_minimisation_hits_floor() {
        let ds = dataset(&[(0, 0); 5], DatasetRole::Undesired, 1, 3);
        let pi = train_bc(&ds, BcMode::Minimize, 0.01, 1_000).unwrap();
        assert!(pi.prob(0, 0) <= BC_UN_FLOOR + 1e-12);
        assert!((pi.prob(0, 1) - pi.prob(0, 2)).abs() < 1e-12);
    }

    #[test]
    fn capped_projection() {
        let p = project_capped_simplex(&array![2.0, -5.0, 0.0], 0.01);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.01 - 1e-15));
        let inside = array![0.2, 0.3, 0.5];
        assert!((&project_capped_simplex(&inside, 0.01) - &inside)
            .iter()
            .all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn iq_single_transition_without_regulariser() {
        let ds = dataset(&[(0, 1)], DatasetRole::Mix, 1, 2);
        let batch =
            TransitionBatch::from_dataset(&ds, OccupancyWeighting::Uniform, crate::uniq::ValueMode::Full).unwrap();
        let q = QTable::new(array![[0.3, -0.6]]).unwrap();
        let g = 0.9;
        let v = crate::mdp::logsumexp([0.3f64, -0.6].into_iter());
        let expected = -0.6 - (1.0 - g) * v;
        assert!((iq_objective(&q, &batch, g, &Regularizer::zero()) - expected).abs() < 1e-12);
        let grad = iq_gradient(&q, &batch, g, &Regularizer::zero());
        let h = 1e-6;
        for a in 0..2 {
            let mut qp = q.clone();
            qp.values_mut()[[0, a]] += h;
            let mut qm = q.clone();
            qm.values_mut()[[0, a]] -= h;
            let fd = (iq_objective(&qp, &batch, g, &Regularizer::zero())
                - iq_objective(&qm, &batch, g, &Regularizer::zero()))
                / (2.0 * h);
            assert!((fd - grad[[0, a]]).abs() < 1e-8);
        }
    }

    #[test]
    fn dwbc_symmetric_data_is_bc() {
        let pairs = [(0, 0), (0, 1), (0, 1), (1, 1)];
        let un = dataset(&pairs, DatasetRole::Undesired, 2, 2);
        let mix = dataset(&pairs, DatasetRole::Mix, 2, 2);
        let trained = train_dwbc(&un, &mix, &DwbcConfig::default()).unwrap();
        let bc = train_bc(&mix, BcMode::Maximize, 0.0, 0).unwrap();
        for s in 0..2 {
            let tv: f64 = (0..2)
                .map(|a| (trained.policy.prob(s, a) - bc.prob(s, a)).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02);
        }
    }

    #[test]
    fn dwbc_untrained_weights_are_one() {
        let un = dataset(&[(0, 0)], DatasetRole::Undesired, 1, 2);
        let mix = dataset(&[(0, 0), (0, 1)], DatasetRole::Mix, 1, 2);
        let cfg = DwbcConfig {
            steps: 0,
            ..DwbcConfig::default()
        };
        let trained = train_dwbc(&un, &mix, &cfg).unwrap();
        assert!(trained.weights().iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dwbc_undesired_only_pair_is_down_weighted() {
        let un = dataset(&[(0, 0), (0, 0)], DatasetRole::Undesired, 1, 2);
        let mix = dataset(&[(0, 1), (0, 1)], DatasetRole::Mix, 1, 2);
        let trained = train_dwbc(&un, &mix, &DwbcConfig::default()).unwrap();
        let w = trained.weights();
        assert!(w[[0, 0]] < w[[0, 1]]);
        assert!(trained.policy.prob(0, 1) > 0.99);
    }

    #[test]
    fn iq_imitation_recovers_expert() {
        use crate::dataset::rollout;
        use crate::mdp::FiniteMdp;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mdp = FiniteMdp::random(3, 2, 0.7, &mut rng);
        let expert = TabularPolicy::new(array![[0.8, 0.2], [0.3, 0.7], [0.5, 0.5]]).unwrap();
        let trajs = rollout(&mdp, &expert, 20, 500, 1);
        let ds = TrajectoryDataset::new(trajs, DatasetRole::Mix, (500, 0), 3, 2, 0.7, None).unwrap();
        assert!(ds.num_transitions() >= 10_000);
        let cfg = UniqConfig {
            psi: Regularizer::quadratic(0.05),
            ..UniqConfig::default()
        };
        let trained = train_iq(&ds, IqRole::Imitate, &cfg, 0).unwrap();
        let recovered = crate::mdp::softmax_policy(&trained.q);
        for s in 0..3 {
            let tv: f64 = (0..2)
                .map(|a| (recovered.prob(s, a) - expert.prob(s, a)).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.05, "state {s}: {:?}", recovered.probs());
        }
    }
}
