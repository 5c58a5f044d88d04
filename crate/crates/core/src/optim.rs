//! First-order optimizers over flat parameter vectors.
//!
//! Both training loops (the transfer stage and supervised training) drive a
//! mutable flat vector through `step_masked`, which multiplies the update by
//! the mask so masked coordinates stay bit-identical between refreshes even
//! for stateful optimizers whose moments could otherwise keep moving them.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimSpec {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimSpec {
    pub fn sgd(lr: f64) -> Self {
        OptimSpec::Sgd { lr }
    }

    /// Adam with the conventional moment constants.
    pub fn adam(lr: f64) -> Self {
        OptimSpec::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimSpec::Sgd { lr } | OptimSpec::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optim {
    spec: OptimSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optim {
    pub fn new(spec: OptimSpec, dim: usize) -> Self {
        let state = match spec {
            OptimSpec::Sgd { .. } => 0,
            OptimSpec::Adam { .. } => dim,
        };
        Optim { spec, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    pub fn spec(&self) -> OptimSpec {
        self.spec
    }

    /// One update. With a mask, the per-coordinate update is multiplied by
    /// the mask value, so masked entries are left exactly untouched.
    pub fn step_masked(&mut self, params: &mut [f64], grad: &[f64], mask: Option<&[f64]>) {
        assert_eq!(params.len(), grad.len());
        match self.spec {
            OptimSpec::Sgd { lr } => {
                for i in 0..params.len() {
                    let gate = mask.map(|m| m[i]).unwrap_or(1.0);
                    params[i] -= lr * gate * grad[i];
                }
            }
            OptimSpec::Adam { lr, beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    let gate = mask.map(|m| m[i]).unwrap_or(1.0);
                    params[i] -= lr * gate * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
