//! Empirical neural tangent kernels, network linearization, and the
//! closed-form dynamics of linearized training.
//!
//! The empirical NTK over a batch is the Gram matrix of per-(sample, logit)
//! parameter gradients: full mode treats every (sample, logit) pair as one
//! function output, giving an (n*c) x (n*c) matrix; trace mode sums over the
//! logit dimension, giving n x n. Both are built here from materialized
//! Jacobian rows so the Gram-consistency property holds by construction.

use crate::autodiff::{Feeds, NodeId};
use crate::error::{Error, Result};
use crate::network::{Mask, Mode, NetGraph, Network};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtkMode {
    Full,
    Trace,
}

/// Reusable per-sample Jacobian machinery: a batch-1 forward graph with one
/// appended gradient per logit.
pub struct JacobianEngine {
    bundle: NetGraph,
    grad_nodes: Vec<Option<NodeId>>,
    classes: usize,
    params: usize,
}

impl JacobianEngine {
    pub fn new(net: &Network) -> Self {
        let mut bundle = net.build_graph(1, Mode::Eval);
        let c = net.class_count();
        let flat = bundle.graph.reshape(bundle.logits, vec![c]);
        let mut grad_nodes = Vec::with_capacity(c);
        for k in 0..c {
            let fk = bundle.graph.slice_flat(flat, k, 1);
            grad_nodes.push(bundle.graph.append_gradient(fk, &[bundle.theta])[0]);
        }
        JacobianEngine { bundle, grad_nodes, classes: c, params: net.param_count() }
    }

    /// Jacobian rows for one sample: row k = d logit_k / d theta, length P.
    pub fn rows(&self, params: &Tensor, mask: &Tensor, x_row: &Tensor) -> Result<Vec<Tensor>> {
        let mut feeds = Feeds::new(&self.bundle.graph);
        feeds.set(&self.bundle.graph, self.bundle.theta, params);
        feeds.set(&self.bundle.graph, self.bundle.mask, mask);
        feeds.set(&self.bundle.graph, self.bundle.x, x_row);
        let targets: Vec<NodeId> = self.grad_nodes.iter().filter_map(|g| *g).collect();
        let mut got = self.bundle.graph.eval(&feeds, &targets)?.into_iter();
        Ok(self
            .grad_nodes
            .iter()
            .map(|g| match g {
                Some(_) => got.next().expect("evaluated"),
                None => Tensor::new(vec![self.params], vec![0.0; self.params]),
            })
            .collect())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Per-sample Jacobian of the masked network: row (i*c + k) is the gradient
/// of logit k on sample i with respect to the flat parameter vector.
pub fn per_sample_jacobian(
    net: &Network,
    params: &Tensor,
    mask: Option<&Mask>,
    x: &Tensor,
) -> Result<Tensor> {
    let engine = JacobianEngine::new(net);
    let n = x.rows();
    let c = engine.classes();
    let p = net.param_count();
    let mask_t = match mask {
        Some(m) => m.values().clone(),
        None => crate::network::ones_mask_tensor(net),
    };
    let mut out = vec![0.0; n * c * p];
    for i in 0..n {
        let xi = Tensor::matrix(1, x.cols(), x.row(i).to_vec());
        let rows = engine.rows(params, &mask_t, &xi)?;
        for (k, row) in rows.iter().enumerate() {
            out[(i * c + k) * p..(i * c + k + 1) * p].copy_from_slice(row.data());
        }
    }
    Ok(Tensor::matrix(n * c, p, out))
}

/// Empirical NTK over a batch. Full mode: H[(i,k),(j,l)] = <dF_ik, dF_jl>;
/// trace mode sums the logit-diagonal, giving an n x n matrix.
pub fn empirical_ntk(
    net: &Network,
    params: &Tensor,
    mask: Option<&Mask>,
    x: &Tensor,
    mode: NtkMode,
) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(Error::Shape("batch must be non-empty".into()));
    }
    let j = per_sample_jacobian(net, params, mask, x)?;
    Ok(gram_from_jacobian(&j, x.rows(), net.class_count(), mode))
}

/// Gram matrix of Jacobian rows. In trace mode the c rows of each sample are
/// treated as one concatenated gradient (dot products sum over logits).
pub fn gram_from_jacobian(j: &Tensor, n: usize, c: usize, mode: NtkMode) -> Tensor {
    let p = j.cols();
    match mode {
        NtkMode::Full => {
            let m = n * c;
            let mut out = vec![0.0; m * m];
            tensor::gemm_nt(m, p, m, j.data(), j.data(), &mut out);
            Tensor::matrix(m, m, out)
        }
        NtkMode::Trace => {
            let mut out = vec![0.0; n * n];
            tensor::gemm_nt(n, c * p, n, j.data(), j.data(), &mut out);
            Tensor::matrix(n, n, out)
        }
    }
}

/// First-order model around reference parameters: f(theta) = f0 + J.(theta -
/// theta0). With a mask, Jacobian columns at masked indices are zero, so
/// masked coordinates never influence the linearized outputs.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    pub theta0: Tensor,
    pub f0: Tensor,
    pub jacobian: Tensor,
    pub mask: Option<Mask>,
}

pub fn linearize(
    net: &Network,
    params0: &Tensor,
    mask: Option<&Mask>,
    x: &Tensor,
) -> Result<LinearizedModel> {
    let f0 = crate::network::forward_logits(net, params0, mask, x, None)?;
    let jacobian = per_sample_jacobian(net, params0, mask, x)?;
    Ok(LinearizedModel {
        theta0: params0.clone(),
        f0,
        jacobian,
        mask: mask.cloned(),
    })
}

impl LinearizedModel {
    pub fn samples(&self) -> usize {
        self.f0.rows()
    }

    pub fn classes(&self) -> usize {
        self.f0.cols()
    }

    /// Evaluate f_lin at arbitrary parameters.
    pub fn eval(&self, theta: &Tensor) -> Tensor {
        let p = self.jacobian.cols();
        let m = self.jacobian.rows();
        let delta: Vec<f64> =
            theta.data().iter().zip(self.theta0.data()).map(|(&a, &b)| a - b).collect();
        let mut shift = vec![0.0; m];
        tensor::gemm(m, p, 1, self.jacobian.data(), &delta, &mut shift);
        let out: Vec<f64> = self.f0.data().iter().zip(&shift).map(|(&f, &s)| f + s).collect();
        Tensor::matrix(self.f0.rows(), self.f0.cols(), out)
    }

    /// The model's full-mode NTK, J.J^T.
    pub fn ntk(&self) -> Tensor {
        gram_from_jacobian(&self.jacobian, self.samples(), self.classes(), NtkMode::Full)
    }
}

/// Symmetric eigendecomposition by the cyclic Jacobi method. Returns the
/// eigenvalues and the orthogonal matrix whose columns are the eigenvectors:
/// A = V diag(lambda) V^T. Deterministic sweep order.
pub fn symmetric_eigh(a: &Tensor) -> (Vec<f64>, Tensor) {
    let m = a.rows();
    assert_eq!(m, a.cols(), "eigh expects a square matrix");
    let mut s = a.data().to_vec();
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let norm: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..m {
            for q in p + 1..m {
                off += s[p * m + q] * s[p * m + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = s[p * m + q];
                if apq.abs() <= tol / (m as f64) {
                    continue;
                }
                let app = s[p * m + p];
                let aqq = s[q * m + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let skp = s[k * m + p];
                    let skq = s[k * m + q];
                    s[k * m + p] = c * skp - sn * skq;
                    s[k * m + q] = sn * skp + c * skq;
                }
                for k in 0..m {
                    let spk = s[p * m + k];
                    let sqk = s[q * m + k];
                    s[p * m + k] = c * spk - sn * sqk;
                    s[q * m + k] = sn * spk + c * sqk;
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = c * vkp - sn * vkq;
                    v[k * m + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..m).map(|i| s[i * m + i]).collect();
    (eig, Tensor::matrix(m, m, v))
}

/// Analytic solution of the linearized-dynamics ODE at time t:
/// f(t) = e^{-tH} f0 + (I - e^{-tH}) y, via symmetric eigendecomposition
/// with negative eigenvalues clamped to zero.
pub fn analytic_linear_dynamics(h0: &Tensor, f0: &Tensor, y: &Tensor, t: f64) -> Result<Tensor> {
    if t < 0.0 {
        return Err(Error::Config(format!("time must be non-negative, got {t}")));
    }
    let m = h0.rows();
    if h0.cols() != m || f0.len() != m || y.len() != m {
        return Err(Error::Shape(format!(
            "dimension mismatch: H {}x{}, f0 {}, y {}",
            h0.rows(),
            h0.cols(),
            f0.len(),
            y.len()
        )));
    }
    let (eig, v) = symmetric_eigh(h0);
    // residual in eigenbasis: r = V^T (f0 - y)
    let resid: Vec<f64> = f0.data().iter().zip(y.data()).map(|(&a, &b)| a - b).collect();
    let vd = v.data();
    let mut r = vec![0.0; m];
    for j in 0..m {
        let mut acc = 0.0;
        for i in 0..m {
            acc += vd[i * m + j] * resid[i];
        }
        r[j] = acc;
    }
    for (j, rj) in r.iter_mut().enumerate() {
        let lambda = eig[j].max(0.0);
        *rj *= (-t * lambda).exp();
    }
    let mut out = y.data().to_vec();
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            acc += vd[i * m + j] * r[j];
        }
        out[i] += acc;
    }
    Ok(Tensor::new(f0.shape().to_vec(), out))
}

/// Discrete gradient descent on the quadratic loss of a linearized model,
/// simulated in output space: f <- f - lr * H (f - y). Returns the output
/// trajectory including the initial point, so the entry at index s is the
/// output after s steps.
pub fn simulate_linear_dynamics(
    lin: &LinearizedModel,
    y: &Tensor,
    learning_rate: f64,
    steps: usize,
) -> Result<Vec<Tensor>> {
    if learning_rate < 0.0 {
        return Err(Error::Config("learning rate must be non-negative".into()));
    }
    let m = lin.jacobian.rows();
    if y.len() != m {
        return Err(Error::Shape(format!("targets length {} vs {} outputs", y.len(), m)));
    }
    let h = lin.ntk();
    let hd = h.data();
    let mut f: Vec<f64> = lin.f0.data().to_vec();
    let shape = lin.f0.shape().to_vec();
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(Tensor::new(shape.clone(), f.clone()));
    for _ in 0..steps {
        let resid: Vec<f64> = f.iter().zip(y.data()).map(|(&a, &b)| a - b).collect();
        let mut hf = vec![0.0; m];
        tensor::gemm(m, m, 1, hd, &resid, &mut hf);
        for i in 0..m {
            f[i] -= learning_rate * hf[i];
        }
        if f.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e12 {
            return Err(Error::Numerical("linearized dynamics diverged".into()));
        }
        traj.push(Tensor::new(shape.clone(), f.clone()));
    }
    Ok(traj)
}
