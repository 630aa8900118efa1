//! First-order update rules for table-valued parameters.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain fixed-step gradient descent.
    Sgd,
    /// Adam with `β = (0.9, 0.999)`, `ε = 1e-8`.
    #[default]
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimiser state for one table. [`Stepper::descend`] moves against the
/// gradient; pass a negated gradient to ascend.
#[derive(Debug, Clone)]
pub struct Stepper {
    kind: OptimizerKind,
    lr: f64,
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Stepper {
    pub fn new(kind: OptimizerKind, lr: f64, shape: (usize, usize)) -> Self {
        Self {
            kind,
            lr,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    pub fn descend(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        match self.kind {
            OptimizerKind::Sgd => params.scaled_add(-self.lr, grad),
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                let lr = self.lr;
                Zip::from(params)
                    .and(&mut self.m)
                    .and(&mut self.v)
                    .and(grad)
                    .for_each(|p, m, v, &g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn both_rules_minimise_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut x = array![[3.0, -2.0]];
            let mut st = Stepper::new(kind, 0.05, (1, 2));
            for _ in 0..5000 {
                let g = x.mapv(|v| 2.0 * (v - 1.0));
                st.descend(&mut x, &g);
            }
            assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-3), "{kind:?}: {x}");
        }
    }

    #[test]
    fn first_adam_step_has_learning_rate_length() {
        let mut x = array![[0.0]];
        let mut st = Stepper::new(OptimizerKind::Adam, 0.1, (1, 1));
        st.descend(&mut x, &array![[123.0]]);
        assert!((x[[0, 0]] + 0.1).abs() < 1e-9);
    }
}
