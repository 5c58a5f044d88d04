//! Neural tangent transfer: label-free preparation of trainable sparse
//! networks by matching a masked student's outputs and empirical tangent
//! kernel to those of its dense teacher at initialization.
//!
//! The objective over a batch X of n samples is
//!
//!     J = (1/n)  * || f(X, m.theta~) - f(X, theta0) ||^2
//!       + (g2/n^2) * || H_student - H_teacher ||_F^2
//!
//! and one transfer iteration takes an optimizer step on dJ/dtheta~ followed
//! by decoupled weight decay on the surviving entries.
//!
//! The kernel term's gradient is computed without ever materializing a
//! Jacobian: for each logit k, an in-graph adjoint chain produces the
//! backpropagated factors b_k at every layer, the masked kernel entries are
//! gathered as products of those factors with the layer inputs, and the
//! chain rule is closed by feeding the (numerically evaluated) residual
//! matrix back into a second sweep as constant coefficients. Since the
//! residual R is symmetric, the gradient of ||G G^T - H||^2 equals the
//! gradient of <G, V> with V = (4 g2 / n^2) R G held fixed, which is exactly
//! what the second sweep evaluates. Masked coordinates receive exactly zero
//! gradient because every path runs through the in-graph mask product.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::autodiff::{Feeds, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{kept_weight_coords, Mask, Mode, NetGraph, Network, Scheme};
use crate::ntk::{gram_from_jacobian, per_sample_jacobian, NtkMode};
use crate::optim::{Optim, OptimSpec};
use crate::pruning::{logit_snip_scores, select_mask, SensitivityScores};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::training::fmt_f64;

/// A batch of inputs with no label channel. The transfer loop accepts only
/// this type, so label-freedom is enforced at the signature.
#[derive(Debug, Clone)]
pub struct Unlabeled {
    pub inputs: Tensor,
}

impl Unlabeled {
    pub fn new(inputs: Tensor) -> Self {
        Unlabeled { inputs }
    }

    /// Drop the labels of a dataset, keeping only its inputs.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Unlabeled { inputs: ds.inputs.clone() }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam_default() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn to_spec(self, lr: f64) -> OptimSpec {
        match self {
            OptimKind::Sgd => OptimSpec::Sgd { lr },
            OptimKind::Adam { beta1, beta2, eps } => OptimSpec::Adam { lr, beta1, beta2, eps },
        }
    }
}

#[derive(Debug, Clone)]
pub struct NttConfig {
    pub gamma_sq: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_update_every: usize,
    pub scheme: Scheme,
    pub optimizer: OptimKind,
    pub ntk_mode: NtkMode,
    pub seed: u64,
    /// Whether the global scheme's mask is also refreshed by magnitude during
    /// the loop (the layerwise scheme always refreshes).
    pub refresh_global_mask: bool,
}

impl NttConfig {
    pub fn new(scheme: Scheme) -> Self {
        NttConfig {
            gamma_sq: 1e-3,
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 20,
            mask_update_every: 100,
            scheme,
            optimizer: OptimKind::adam_default(),
            ntk_mode: NtkMode::Full,
            seed: 0,
            refresh_global_mask: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_sq <= 0.0 {
            return Err(Error::Config(format!("gamma_sq must be positive, got {}", self.gamma_sq)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.mask_update_every == 0 {
            return Err(Error::Config("mask_update_every must be at least 1".into()));
        }
        self.scheme.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NttRow {
    pub iteration: u64,
    pub j: f64,
    pub output_term: f64,
    pub kernel_term: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NttReport {
    pub rows: Vec<NttRow>,
    /// Total loop wall time. Reported in logs, never in the CSV, so CSV
    /// outputs stay byte-reproducible.
    pub wall_time_secs: f64,
}

impl NttReport {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("iteration,J,output_term,kernel_term,density\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration,
                fmt_f64(r.j),
                fmt_f64(r.output_term),
                fmt_f64(r.kernel_term),
                fmt_f64(r.density)
            );
        }
        out
    }
}

/// Keep the largest-magnitude weights at exact counts (per layer or
/// globally); biases always survive; ties prune the lower flat index first.
pub fn magnitude_mask(net: &Network, params: &Tensor, scheme: Scheme) -> Result<Mask> {
    let scores: Vec<f64> = params.data().iter().map(|v| v.abs()).collect();
    let scores = SensitivityScores::new(net, scores)?;
    select_mask(net, &scores, scheme)
}

// ---------------------------------------------------------------------------
// Kernel engine internals.

/// Forward bundle plus, for each logit k, the in-graph adjoint of every
/// layer preactivation under the seed e_k (one-hot over the output columns).
struct Chains {
    bundle: NetGraph,
    /// badj[k][l]: [n * positions_l, out_l] backward factors.
    badj: Vec<Vec<NodeId>>,
}

fn build_chains(net: &Network, batch: usize) -> Chains {
    let mut bundle = net.build_graph(batch, Mode::Eval);
    let c = net.class_count();
    let wrt: Vec<NodeId> = bundle.taps.iter().map(|t| t.preact).collect();
    let mut badj = Vec::with_capacity(c);
    for k in 0..c {
        let mut seed = vec![0.0; batch * c];
        for i in 0..batch {
            seed[i * c + k] = 1.0;
        }
        let seed = bundle.graph.constant(Tensor::new(vec![batch, c], seed));
        let adj = bundle.graph.append_vjp(bundle.logits, seed, &wrt);
        badj.push(
            adj.into_iter()
                .map(|o| o.expect("every preactivation reaches the logits"))
                .collect(),
        );
    }
    Chains { bundle, badj }
}

/// Teacher-side evaluator: dense per-layer kernel factorization when every
/// parameterized layer is positionless (dense), otherwise a materialized
/// Jacobian Gram (only viable at small scale, e.g. conv unit tests).
struct TeacherEval {
    chains: Option<Chains>,
    ones: Tensor,
}

impl TeacherEval {
    fn new(net: &Network, batch: usize) -> Self {
        let all_dense = net.layout().iter().all(|l| l.positions == 1);
        TeacherEval {
            chains: if all_dense { Some(build_chains(net, batch)) } else { None },
            ones: crate::network::ones_mask_tensor(net),
        }
    }

    fn eval(
        &self,
        net: &Network,
        theta0: &Tensor,
        x: &Tensor,
        mode: NtkMode,
    ) -> Result<(Tensor, Vec<f64>)> {
        match &self.chains {
            Some(chains) => self.eval_factored(net, chains, theta0, x, mode),
            None => {
                let f0 = crate::network::forward_logits(net, theta0, None, x, None)?;
                let j = per_sample_jacobian(net, theta0, None, x)?;
                let h = gram_from_jacobian(&j, x.rows(), net.class_count(), mode);
                Ok((f0, h.into_data()))
            }
        }
    }

    /// H as a sum over layers of elementwise products of an activation Gram
    /// and a backward-factor Gram (plus the bias contribution, which has
    /// activation factor one).
    fn eval_factored(
        &self,
        net: &Network,
        chains: &Chains,
        theta0: &Tensor,
        x: &Tensor,
        mode: NtkMode,
    ) -> Result<(Tensor, Vec<f64>)> {
        let n = x.rows();
        let c = net.class_count();
        let layers = net.layout();
        let mut targets = vec![chains.bundle.logits];
        for tap in &chains.bundle.taps {
            targets.push(tap.patches);
        }
        for k in 0..c {
            for l in 0..layers.len() {
                targets.push(chains.badj[k][l]);
            }
        }
        let mut feeds = Feeds::new(&chains.bundle.graph);
        feeds.set(&chains.bundle.graph, chains.bundle.theta, theta0);
        feeds.set(&chains.bundle.graph, chains.bundle.mask, &self.ones);
        feeds.set(&chains.bundle.graph, chains.bundle.x, x);
        let mut values = chains.bundle.graph.eval(&feeds, &targets)?.into_iter();
        let f0 = values.next().expect("logits value");
        let patches: Vec<Tensor> = (0..layers.len()).map(|_| values.next().unwrap()).collect();
        let mut badj: Vec<Vec<Tensor>> = Vec::with_capacity(c);
        for _ in 0..c {
            badj.push((0..layers.len()).map(|_| values.next().unwrap()).collect());
        }

        let dim = match mode {
            NtkMode::Full => n * c,
            NtkMode::Trace => n,
        };
        let mut h = vec![0.0; dim * dim];
        let mut aa = vec![0.0; n * n];
        for (l, layer) in layers.iter().enumerate() {
            let fan = layer.rows;
            tensor::gemm_nt(n, fan, n, patches[l].data(), patches[l].data(), &mut aa);
            let bias = if layer.bias_len > 0 { 1.0 } else { 0.0 };
            let out = layer.cols;
            match mode {
                NtkMode::Full => {
                    // Stack backward factors as rows (i, k).
                    let mut bs = vec![0.0; n * c * out];
                    for (k, per_layer) in badj.iter().enumerate() {
                        for i in 0..n {
                            bs[(i * c + k) * out..(i * c + k + 1) * out]
                                .copy_from_slice(per_layer[l].row(i));
                        }
                    }
                    let mut bb = vec![0.0; dim * dim];
                    tensor::gemm_nt(dim, out, dim, &bs, &bs, &mut bb);
                    for r1 in 0..dim {
                        for r2 in 0..dim {
                            h[r1 * dim + r2] +=
                                bb[r1 * dim + r2] * (aa[(r1 / c) * n + (r2 / c)] + bias);
                        }
                    }
                }
                NtkMode::Trace => {
                    // Concatenate the c factors per sample: the row Gram then
                    // sums the per-class backward Grams in one product.
                    let mut bs = vec![0.0; n * c * out];
                    for i in 0..n {
                        for (k, per_layer) in badj.iter().enumerate() {
                            bs[(i * c + k) * out..(i * c + k + 1) * out]
                                .copy_from_slice(per_layer[l].row(i));
                        }
                    }
                    let mut bb = vec![0.0; n * n];
                    tensor::gemm_nt(n, c * out, n, &bs, &bs, &mut bb);
                    for i in 0..n {
                        for j in 0..n {
                            h[i * n + j] += bb[i * n + j] * (aa[i * n + j] + bias);
                        }
                    }
                }
            }
        }
        Ok((f0, h))
    }
}

/// Which evaluated tensor lands where in the student's kernel-entry matrix.
enum Block {
    Logits,
    Weight { layer: usize, class: usize },
    Bias { layer: usize, class: usize },
}

/// Student-side engine for one (mask, batch size) pair: a single graph whose
/// first sweep yields the kernel entries G and whose second sweep yields the
/// full objective gradient given the residual coefficients.
struct StudentEngine {
    bundle: NetGraph,
    f0_slot: NodeId,
    grad: NodeId,
    targets: Vec<NodeId>,
    blocks: Vec<Block>,
    /// Per layer: (weight column start, kept count, bias column start).
    cols: Vec<(usize, usize, usize)>,
    /// Per (layer, class): V feed slots, None when the block is absent.
    v_slots: Vec<Vec<Option<NodeId>>>,
    vb_slots: Vec<Vec<Option<NodeId>>>,
    width: usize,
}

fn build_student_engine(net: &Network, mask: &Mask, batch: usize) -> StudentEngine {
    let Chains { mut bundle, badj } = build_chains(net, batch);
    let c = net.class_count();
    let layers = net.layout();
    let n_inv = 1.0 / batch as f64;

    let f0_slot = bundle.graph.input(vec![batch, c]);
    let diff = bundle.graph.sub(bundle.logits, f0_slot);
    let sq = bundle.graph.square(diff);
    let total = bundle.graph.sum(sq);
    let mut phi = bundle.graph.scale(total, n_inv);

    let mut targets = vec![bundle.logits];
    let mut blocks = vec![Block::Logits];
    let mut cols = Vec::with_capacity(layers.len());
    let mut v_slots = vec![vec![None; c]; layers.len()];
    let mut vb_slots = vec![vec![None; c]; layers.len()];
    let mut width = 0usize;

    for (l, layer) in layers.iter().enumerate() {
        let tap = bundle.taps[l];
        let (us, vs) = kept_weight_coords(layer, mask);
        let kept = us.len();
        let wstart = width;
        width += kept;
        let bstart = width;
        width += layer.bias_len;
        cols.push((wstart, kept, bstart));

        let gathered_patches = if kept > 0 {
            Some(bundle.graph.gather_cols(tap.patches, Arc::new(us)))
        } else {
            None
        };
        let vs = Arc::new(vs);
        for k in 0..c {
            if let Some(gp) = gathered_patches {
                let gb = bundle.graph.gather_cols(badj[k][l], Arc::clone(&vs));
                let prod = bundle.graph.mul(gp, gb);
                let entries = bundle.graph.seg_sum_rows(prod, tap.positions);
                targets.push(entries);
                blocks.push(Block::Weight { layer: l, class: k });
                let v = bundle.graph.input(vec![batch, kept]);
                v_slots[l][k] = Some(v);
                let weighted = bundle.graph.mul(entries, v);
                let term = bundle.graph.sum(weighted);
                phi = bundle.graph.add(phi, term);
            }
            if layer.bias_len > 0 {
                let entries = bundle.graph.seg_sum_rows(badj[k][l], tap.positions);
                targets.push(entries);
                blocks.push(Block::Bias { layer: l, class: k });
                let v = bundle.graph.input(vec![batch, layer.bias_len]);
                vb_slots[l][k] = Some(v);
                let weighted = bundle.graph.mul(entries, v);
                let term = bundle.graph.sum(weighted);
                phi = bundle.graph.add(phi, term);
            }
        }
    }

    let grad = bundle.graph.append_gradient(phi, &[bundle.theta])[0]
        .expect("objective depends on the parameters");
    StudentEngine { bundle, f0_slot, grad, targets, blocks, cols, v_slots, vb_slots, width }
}

/// One engine instance serves many iterations at a fixed batch size; it is
/// rebuilt whenever the mask changes (the gather index lists are baked in).
struct TransferEngine {
    student: StudentEngine,
    n: usize,
    c: usize,
}

struct EngineOutput {
    j: f64,
    output_term: f64,
    kernel_term: f64,
    grad: Option<Tensor>,
}

impl TransferEngine {
    fn new(net: &Network, mask: &Mask, batch: usize) -> Self {
        TransferEngine { student: build_student_engine(net, mask, batch), n: batch, c: net.class_count() }
    }

    fn evaluate(
        &self,
        net: &Network,
        teacher: &TeacherEval,
        theta0: &Tensor,
        student_params: &Tensor,
        mask: &Mask,
        x: &Tensor,
        gamma_sq: f64,
        mode: NtkMode,
        want_grad: bool,
    ) -> Result<EngineOutput> {
        let (n, c) = (self.n, self.c);
        let width = self.student.width;
        let eng = &self.student;

        let (f0, h_teacher) = teacher.eval(net, theta0, x, mode)?;

        // Sweep 1: student logits and kernel entries.
        let mut feeds = Feeds::new(&eng.bundle.graph);
        feeds.set(&eng.bundle.graph, eng.bundle.theta, student_params);
        feeds.set(&eng.bundle.graph, eng.bundle.mask, mask.values());
        feeds.set(&eng.bundle.graph, eng.bundle.x, x);
        let values = eng.bundle.graph.eval(&feeds, &eng.targets)?;

        // Assemble G with rows (i*c + k) and the per-layer column blocks.
        let mut g = vec![0.0; n * c * width];
        let mut logits = None;
        for (value, block) in values.into_iter().zip(&eng.blocks) {
            match *block {
                Block::Logits => logits = Some(value),
                Block::Weight { layer, class } => {
                    let (wstart, kept, _) = eng.cols[layer];
                    for i in 0..n {
                        let row = (i * c + class) * width + wstart;
                        g[row..row + kept].copy_from_slice(value.row(i));
                    }
                }
                Block::Bias { layer, class } => {
                    let (_, _, bstart) = eng.cols[layer];
                    let blen = value.cols();
                    for i in 0..n {
                        let row = (i * c + class) * width + bstart;
                        g[row..row + blen].copy_from_slice(value.row(i));
                    }
                }
            }
        }
        let logits = logits.expect("logits block present");

        let output_term =
            logits.data().iter().zip(f0.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / n as f64;

        // Student kernel and residual.
        let dim = match mode {
            NtkMode::Full => n * c,
            NtkMode::Trace => n,
        };
        let mut h_student = vec![0.0; dim * dim];
        match mode {
            NtkMode::Full => {
                tensor::gemm_nt(dim, width, dim, &g, &g, &mut h_student);
            }
            NtkMode::Trace => {
                let mut gk = vec![0.0; n * width];
                let mut tmp = vec![0.0; n * n];
                for k in 0..c {
                    for i in 0..n {
                        gk[i * width..(i + 1) * width].copy_from_slice(
                            &g[(i * c + k) * width..(i * c + k + 1) * width],
                        );
                    }
                    tensor::gemm_nt(n, width, n, &gk, &gk, &mut tmp);
                    for (acc, t) in h_student.iter_mut().zip(&tmp) {
                        *acc += t;
                    }
                }
            }
        }
        let scale = gamma_sq / (n as f64 * n as f64);
        let mut r = h_student;
        let mut frob = 0.0;
        for (rv, ht) in r.iter_mut().zip(&h_teacher) {
            *rv -= ht;
            frob += *rv * *rv;
        }
        let kernel_term = scale * frob;
        let j = output_term + kernel_term;
        if !want_grad {
            return Ok(EngineOutput { j, output_term, kernel_term, grad: None });
        }

        // Residual coefficients V = (4 g2 / n^2) R G, rows aligned with G.
        for rv in r.iter_mut() {
            *rv *= 4.0 * scale;
        }
        let mut v = vec![0.0; n * c * width];
        match mode {
            NtkMode::Full => {
                tensor::gemm(dim, dim, width, &r, &g, &mut v);
            }
            NtkMode::Trace => {
                let mut gk = vec![0.0; n * width];
                let mut vk = vec![0.0; n * width];
                for k in 0..c {
                    for i in 0..n {
                        gk[i * width..(i + 1) * width].copy_from_slice(
                            &g[(i * c + k) * width..(i * c + k + 1) * width],
                        );
                    }
                    tensor::gemm(n, n, width, &r, &gk, &mut vk);
                    for i in 0..n {
                        v[(i * c + k) * width..(i * c + k + 1) * width]
                            .copy_from_slice(&vk[i * width..(i + 1) * width]);
                    }
                }
            }
        }

        // Sweep 2: the full gradient, with V fed as constants.
        let mut v_feeds: Vec<(NodeId, Tensor)> = Vec::new();
        for (l, layer) in net.layout().iter().enumerate() {
            let (wstart, kept, bstart) = eng.cols[l];
            for k in 0..c {
                if let Some(slot) = eng.v_slots[l][k] {
                    let mut data = Vec::with_capacity(n * kept);
                    for i in 0..n {
                        let row = (i * c + k) * width;
                        data.extend_from_slice(&v[row + wstart..row + wstart + kept]);
                    }
                    v_feeds.push((slot, Tensor::new(vec![n, kept], data)));
                }
                if let Some(slot) = eng.vb_slots[l][k] {
                    let blen = layer.bias_len;
                    let mut data = Vec::with_capacity(n * blen);
                    for i in 0..n {
                        let row = (i * c + k) * width;
                        data.extend_from_slice(&v[row + bstart..row + bstart + blen]);
                    }
                    v_feeds.push((slot, Tensor::new(vec![n, blen], data)));
                }
            }
        }
        let mut feeds = Feeds::new(&eng.bundle.graph);
        feeds.set(&eng.bundle.graph, eng.bundle.theta, student_params);
        feeds.set(&eng.bundle.graph, eng.bundle.mask, mask.values());
        feeds.set(&eng.bundle.graph, eng.bundle.x, x);
        feeds.set(&eng.bundle.graph, eng.f0_slot, &f0);
        for (slot, t) in &v_feeds {
            feeds.set(&eng.bundle.graph, *slot, t);
        }
        let grad = eng.bundle.graph.eval(&feeds, &[eng.grad])?.remove(0);
        Ok(EngineOutput { j, output_term, kernel_term, grad: Some(grad) })
    }
}

fn check_shapes(net: &Network, theta0: &Tensor, student: &Tensor, x: &Tensor) -> Result<()> {
    if theta0.len() != net.param_count() || student.len() != net.param_count() {
        return Err(Error::Shape(format!(
            "teacher/student parameter counts {}/{} do not match the architecture ({})",
            theta0.len(),
            student.len(),
            net.param_count()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Shape("batch must be non-empty".into()));
    }
    if x.cols() != net.input_shape().flat_len() {
        return Err(Error::Shape(format!(
            "batch input width {} does not match the architecture ({})",
            x.cols(),
            net.input_shape().flat_len()
        )));
    }
    Ok(())
}

/// The transfer objective over one batch: (J, output term, kernel term).
pub fn ntt_objective(
    net: &Network,
    theta0: &Tensor,
    student: &Tensor,
    mask: &Mask,
    x: &Tensor,
    gamma_sq: f64,
    mode: NtkMode,
) -> Result<(f64, f64, f64)> {
    check_shapes(net, theta0, student, x)?;
    if gamma_sq <= 0.0 {
        return Err(Error::Config("gamma_sq must be positive".into()));
    }
    let engine = TransferEngine::new(net, mask, x.rows());
    let teacher = TeacherEval::new(net, x.rows());
    let out = engine.evaluate(net, &teacher, theta0, student, mask, x, gamma_sq, mode, false)?;
    Ok((out.j, out.output_term, out.kernel_term))
}

/// Exact gradient of the transfer objective with respect to the student's
/// stored parameters. Masked coordinates are exactly zero.
pub fn ntt_gradient(
    net: &Network,
    theta0: &Tensor,
    student: &Tensor,
    mask: &Mask,
    x: &Tensor,
    gamma_sq: f64,
    mode: NtkMode,
) -> Result<Tensor> {
    check_shapes(net, theta0, student, x)?;
    if gamma_sq <= 0.0 {
        return Err(Error::Config("gamma_sq must be positive".into()));
    }
    let engine = TransferEngine::new(net, mask, x.rows());
    let teacher = TeacherEval::new(net, x.rows());
    let out = engine.evaluate(net, &teacher, theta0, student, mask, x, gamma_sq, mode, true)?;
    Ok(out.grad.expect("gradient requested"))
}

/// How many samples score the global scheme's initial mask.
const SCORE_BATCH: usize = 128;

/// The full transfer loop: initialize the student at the teacher's weights,
/// pick the initial mask (layerwise: by magnitude; global: by the label-free
/// logit saliency), then iterate optimizer steps on J with decoupled decay
/// and periodic magnitude-based mask refreshes.
pub fn ntt_transfer(
    net: &Network,
    theta0: &Tensor,
    stream: &Unlabeled,
    cfg: &NttConfig,
) -> Result<(Mask, Tensor, NttReport)> {
    cfg.validate()?;
    check_shapes(net, theta0, theta0, &stream.inputs)?;
    let started = Instant::now();
    let n_total = stream.len();
    let mut theta = theta0.clone();
    let mut mask = match cfg.scheme {
        Scheme::Layerwise(_) => magnitude_mask(net, &theta, cfg.scheme)?,
        Scheme::Global(_) => {
            let take: Vec<usize> = (0..SCORE_BATCH.min(n_total)).collect();
            let scoring = stream.inputs.gather_rows(&take);
            let scores = logit_snip_scores(net, &theta, &scoring)?;
            select_mask(net, &scores, cfg.scheme)?
        }
    };
    let refresh_enabled = match cfg.scheme {
        Scheme::Layerwise(_) => true,
        Scheme::Global(_) => cfg.refresh_global_mask,
    };

    let mut opt = Optim::new(cfg.optimizer.to_spec(cfg.learning_rate), theta.len());
    let rng = Rng::new(cfg.seed);
    let mut engines: BTreeMap<usize, TransferEngine> = BTreeMap::new();
    let mut teachers: BTreeMap<usize, TeacherEval> = BTreeMap::new();
    let mut report = NttReport::default();
    let mut iteration: u64 = 0;
    let full_batch = cfg.batch_size >= n_total;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_total).collect();
        if !full_batch {
            rng.stream(1 + epoch as u64).shuffle(&mut order);
        }
        for chunk in order.chunks(cfg.batch_size.min(n_total)) {
            let x = stream.inputs.gather_rows(chunk);
            let teacher =
                teachers.entry(chunk.len()).or_insert_with(|| TeacherEval::new(net, chunk.len()));
            let engine = engines
                .entry(chunk.len())
                .or_insert_with(|| TransferEngine::new(net, &mask, chunk.len()));
            let out = engine
                .evaluate(net, teacher, theta0, &theta, &mask, &x, cfg.gamma_sq, cfg.ntk_mode, true)
                .map_err(|e| {
                    Error::Numerical(format!("transfer aborted at iteration {iteration}: {e}"))
                })?;
            if !out.j.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite objective at iteration {iteration}: J={} (output {}, kernel {})",
                    out.j, out.output_term, out.kernel_term
                )));
            }
            report.rows.push(NttRow {
                iteration,
                j: out.j,
                output_term: out.output_term,
                kernel_term: out.kernel_term,
                density: mask.density(net),
            });
            let grad = out.grad.expect("gradient requested");
            opt.step_masked(theta.data_mut(), grad.data(), Some(mask.values().data()));
            if cfg.weight_decay > 0.0 {
                let m = mask.values().data();
                for (i, t) in theta.data_mut().iter_mut().enumerate() {
                    *t -= cfg.weight_decay * m[i] * *t;
                }
            }
            iteration += 1;
            if refresh_enabled && iteration % cfg.mask_update_every as u64 == 0 {
                mask = magnitude_mask(net, &theta, cfg.scheme)?;
                engines.clear();
            }
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((mask, theta, report))
}

// ---------------------------------------------------------------------------
// Checkpoint container.

const CKPT_MAGIC: &[u8; 8] = b"NTTCKPT1";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub seed: u64,
    pub mask_bits: Vec<bool>,
    pub theta: Tensor,
}

impl Checkpoint {
    /// Reconstruct the mask against an architecture, recomputing its density
    /// from the stored bits.
    pub fn mask(&self, net: &Network) -> Result<Mask> {
        if self.mask_bits.len() != net.param_count() || self.theta.len() != net.param_count() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, architecture {} has {}",
                self.theta.len(),
                net.name(),
                net.param_count()
            )));
        }
        let mask = Mask::from_weight_bits(net, &self.mask_bits, 0.0);
        let density = mask.density(net);
        Ok(Mask::from_weight_bits(net, &self.mask_bits, density))
    }
}

/// Serialize (arch, seed, mask, theta) into the NTTCKPT1 container:
/// a 16-byte header (magic, little-endian version, padding), a
/// length-prefixed architecture name, the seed, the mask as a bit-count plus
/// LSB-first packed bits, and the parameters as little-endian f64.
pub fn save_checkpoint(
    path: &Path,
    arch: &str,
    seed: u64,
    mask: &Mask,
    theta: &Tensor,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    let bits = mask.values().data();
    out.extend_from_slice(&(bits.len() as u64).to_le_bytes());
    let mut packed = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0.0 {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&packed);
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for &v in theta.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.at..e];
                self.at = e;
                Ok(s)
            }
            None => Err(Error::Data("truncated checkpoint".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    if cur.take(8)? != CKPT_MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    cur.take(4)?;
    let name_len = cur.u32()? as usize;
    let arch = String::from_utf8(cur.take(name_len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint architecture name is not UTF-8".into()))?;
    let seed = cur.u64()?;
    let bit_count = cur.u64()? as usize;
    let packed = cur.take(bit_count.div_ceil(8))?;
    let mask_bits: Vec<bool> =
        (0..bit_count).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    let count = cur.u64()? as usize;
    let raw = cur.take(count * 8)?;
    let theta: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if cur.at != bytes.len() {
        return Err(Error::Data("trailing bytes in checkpoint".into()));
    }
    if bit_count != count {
        return Err(Error::Data("checkpoint mask and parameter counts differ".into()));
    }
    Ok(Checkpoint { arch, seed, mask_bits, theta: Tensor::from_vec(theta) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Padding;
    use crate::network::{mlp, InputShape, LayerSpec, Network};
    use crate::ntk::empirical_ntk;

    fn mask_keep(net: &Network, keep: &[bool], p: f64) -> Mask {
        Mask::from_weight_bits(net, keep, p)
    }

    #[test]
    fn objective_identity_case() {
        let net = mlp("m", &[3, 4, 2], true).unwrap();
        let mut rng = Rng::new(1);
        let theta = net.init_glorot(&mut rng);
        let mask = Mask::ones(&net);
        let x = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64 / 4.0).sin()).collect());
        let (j, out, kern) =
            ntt_objective(&net, &theta, &theta, &mask, &x, 1.0, NtkMode::Full).unwrap();
        // The output term is exactly zero (identical graphs); the kernel term
        // only differs by summation order between the two evaluation paths.
        assert_eq!(out, 0.0);
        assert!(kern < 1e-18, "kernel term {kern}");
        assert!(j < 1e-18);
    }

    #[test]
    fn objective_hand_example_linear_model() {
        let net = mlp("lin", &[2, 1], false).unwrap();
        let theta = Tensor::from_vec(vec![1.0, 1.0]);
        let mask = mask_keep(&net, &[true, false], 0.5);
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]);
        let (j, out, kern) =
            ntt_objective(&net, &theta, &theta, &mask, &x, 1.0, NtkMode::Full).unwrap();
        assert!((out - 1.0).abs() < 1e-12, "output term {out}");
        assert!((kern - 1.0).abs() < 1e-12, "kernel term {kern}");
        assert!((j - 2.0).abs() < 1e-12);
    }

    #[test]
    fn objective_invariant_to_sample_order() {
        let net = mlp("m", &[4, 5, 3], true).unwrap();
        let mut rng = Rng::new(3);
        let theta0 = net.init_glorot(&mut rng);
        let mut student = theta0.clone();
        for v in student.data_mut().iter_mut() {
            *v += 0.01;
        }
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 2 == 0).collect();
        let mask = mask_keep(&net, &keep, 0.5);
        let x = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 / 7.0).cos()).collect());
        let xp = x.gather_rows(&[2, 0, 3, 1]);
        let (j1, _, _) = ntt_objective(&net, &theta0, &student, &mask, &x, 0.5, NtkMode::Full).unwrap();
        let (j2, _, _) =
            ntt_objective(&net, &theta0, &student, &mask, &xp, 0.5, NtkMode::Full).unwrap();
        assert!((j1 - j2).abs() < 1e-12 * j1.abs().max(1.0));
    }

    /// Independent oracle: the objective recomputed from public pieces (the
    /// masked forward pass and materialized-Jacobian kernels).
    fn brute_objective(
        net: &Network,
        theta0: &Tensor,
        student: &Tensor,
        mask: &Mask,
        x: &Tensor,
        gamma_sq: f64,
        mode: NtkMode,
    ) -> (f64, f64, f64) {
        let n = x.rows() as f64;
        let f_teacher = crate::network::forward_logits(net, theta0, None, x, None).unwrap();
        let f_student = crate::network::forward_logits(net, student, Some(mask), x, None).unwrap();
        let out = f_student
            .data()
            .iter()
            .zip(f_teacher.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let h_t = empirical_ntk(net, theta0, None, x, mode).unwrap();
        let h_s = empirical_ntk(net, student, Some(mask), x, mode).unwrap();
        let frob: f64 =
            h_s.data().iter().zip(h_t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let kern = gamma_sq / (n * n) * frob;
        (out + kern, out, kern)
    }

    #[test]
    fn objective_matches_bruteforce_dense_both_modes() {
        let net = mlp("m", &[3, 4, 2], true).unwrap();
        let mut rng = Rng::new(5);
        let theta0 = net.init_glorot(&mut rng);
        let mut student = theta0.clone();
        for (i, v) in student.data_mut().iter_mut().enumerate() {
            *v += 0.02 * ((i % 7) as f64 - 3.0);
        }
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 3 != 1).collect();
        let mask = mask_keep(&net, &keep, 0.66);
        let x = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64 / 3.0).sin()).collect());
        for mode in [NtkMode::Full, NtkMode::Trace] {
            let (j, out, kern) =
                ntt_objective(&net, &theta0, &student, &mask, &x, 0.7, mode).unwrap();
            let (jb, outb, kernb) = brute_objective(&net, &theta0, &student, &mask, &x, 0.7, mode);
            assert!((out - outb).abs() < 1e-12, "{mode:?} out {out} vs {outb}");
            assert!((kern - kernb).abs() < 1e-10 * kernb.max(1.0), "{mode:?} kern {kern} vs {kernb}");
            assert!((j - jb).abs() < 1e-10 * jb.max(1.0));
        }
    }

    fn small_conv_net() -> Network {
        Network::new(
            "convtest",
            InputShape::Image { ch: 1, h: 6, w: 6 },
            vec![
                LayerSpec::Conv2d {
                    in_ch: 1,
                    out_ch: 2,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Valid,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 8, outputs: 2, bias: true },
            ],
        )
        .unwrap()
    }

    #[test]
    fn objective_matches_bruteforce_conv_both_modes() {
        let net = small_conv_net();
        let mut rng = Rng::new(7);
        let theta0 = net.init_glorot(&mut rng);
        let mut student = theta0.clone();
        for (i, v) in student.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i % 5) as f64 - 2.0);
        }
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 2 == 0).collect();
        let mask = mask_keep(&net, &keep, 0.5);
        let x = Tensor::matrix(3, 36, (0..108).map(|i| ((i * i) as f64 / 50.0).sin().abs()).collect());
        for mode in [NtkMode::Full, NtkMode::Trace] {
            let (j, out, kern) =
                ntt_objective(&net, &theta0, &student, &mask, &x, 0.3, mode).unwrap();
            let (jb, outb, kernb) = brute_objective(&net, &theta0, &student, &mask, &x, 0.3, mode);
            assert!((out - outb).abs() < 1e-12);
            assert!((kern - kernb).abs() < 1e-10 * kernb.max(1.0), "{mode:?} {kern} vs {kernb}");
            assert!((j - jb).abs() < 1e-10 * jb.max(1.0));
        }
    }

    fn fd_objective_gradient(
        net: &Network,
        theta0: &Tensor,
        student: &Tensor,
        mask: &Mask,
        x: &Tensor,
        gamma_sq: f64,
        mode: NtkMode,
        eps: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; student.len()];
        for i in 0..student.len() {
            let mut hi = student.clone();
            let mut lo = student.clone();
            hi.data_mut()[i] += eps;
            lo.data_mut()[i] -= eps;
            let (jh, _, _) = ntt_objective(net, theta0, &hi, mask, x, gamma_sq, mode).unwrap();
            let (jl, _, _) = ntt_objective(net, theta0, &lo, mask, x, gamma_sq, mode).unwrap();
            g[i] = (jh - jl) / (2.0 * eps);
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences_dense() {
        let net = mlp("m", &[3, 3, 2], true).unwrap();
        let mut rng = Rng::new(11);
        let theta0 = net.init_glorot(&mut rng);
        let mut student = theta0.clone();
        for (i, v) in student.data_mut().iter_mut().enumerate() {
            *v += 0.03 * (((i * 13) % 11) as f64 / 11.0 - 0.5);
        }
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 4 != 2).collect();
        let mask = mask_keep(&net, &keep, 0.75);
        let x = Tensor::matrix(3, 3, (0..9).map(|i| 0.4 * (i as f64).cos()).collect());
        for mode in [NtkMode::Full, NtkMode::Trace] {
            let grad = ntt_gradient(&net, &theta0, &student, &mask, &x, 0.5, mode).unwrap();
            let fd = fd_objective_gradient(&net, &theta0, &student, &mask, &x, 0.5, mode, 1e-5);
            let denom = fd.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-8);
            for (i, (&a, &b)) in grad.data().iter().zip(&fd).enumerate() {
                assert!(
                    (a - b).abs() / denom < 1e-6,
                    "{mode:?} coord {i}: engine {a} fd {b}"
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_conv() {
        let net = small_conv_net();
        let mut rng = Rng::new(17);
        let theta0 = net.init_glorot(&mut rng);
        let mut student = theta0.clone();
        for (i, v) in student.data_mut().iter_mut().enumerate() {
            *v += 0.04 * (((i * 7) % 9) as f64 / 9.0 - 0.4);
        }
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 3 != 0).collect();
        let mask = mask_keep(&net, &keep, 0.66);
        let x = Tensor::matrix(2, 36, (0..72).map(|i| ((i as f64) / 9.0).sin() * 0.5 + 0.5).collect());
        let grad = ntt_gradient(&net, &theta0, &student, &mask, &x, 0.4, NtkMode::Full).unwrap();
        let fd =
            fd_objective_gradient(&net, &theta0, &student, &mask, &x, 0.4, NtkMode::Full, 1e-5);
        let denom = fd.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-8);
        for (i, (&a, &b)) in grad.data().iter().zip(&fd).enumerate() {
            assert!((a - b).abs() / denom < 1e-6, "coord {i}: engine {a} fd {b}");
        }
    }

    #[test]
    fn gradient_is_zero_at_the_global_minimum() {
        let net = mlp("m", &[3, 4, 2], true).unwrap();
        let mut rng = Rng::new(19);
        let theta = net.init_glorot(&mut rng);
        let mask = Mask::ones(&net);
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 / 5.0).cos()).collect());
        let grad = ntt_gradient(&net, &theta, &theta, &mask, &x, 1.0, NtkMode::Full).unwrap();
        // The output residual is exactly zero; the kernel residual is pure
        // roundoff between the two summation orders.
        let linf = grad.data().iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(linf < 1e-12, "gradient norm {linf}");
    }

    #[test]
    fn masked_coordinates_have_exactly_zero_gradient() {
        let net = mlp("m", &[4, 5, 2], true).unwrap();
        let mut rng = Rng::new(23);
        let theta0 = net.init_glorot(&mut rng);
        let mut student = theta0.clone();
        for v in student.data_mut().iter_mut() {
            *v *= 1.1;
        }
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 2 == 1).collect();
        let mask = mask_keep(&net, &keep, 0.5);
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).sin()).collect());
        let grad = ntt_gradient(&net, &theta0, &student, &mask, &x, 0.9, NtkMode::Full).unwrap();
        for (i, &m) in mask.values().data().iter().enumerate() {
            if m == 0.0 {
                assert_eq!(grad.data()[i], 0.0, "coord {i}");
            }
        }
    }

    #[test]
    fn magnitude_mask_examples() {
        let net = mlp("t", &[4, 1], false).unwrap();
        let params = Tensor::from_vec(vec![0.5, -0.1, 0.3, 0.2]);
        let m = magnitude_mask(&net, &params, Scheme::Layerwise(0.5)).unwrap();
        assert_eq!(m.values().data(), &[1.0, 0.0, 1.0, 0.0]);
        let equal = Tensor::from_vec(vec![0.3; 4]);
        let m2 = magnitude_mask(&net, &equal, Scheme::Layerwise(0.5)).unwrap();
        assert_eq!(m2.values().data(), &[0.0, 0.0, 1.0, 1.0]);
        let m3 = magnitude_mask(&net, &params, Scheme::Layerwise(1.0)).unwrap();
        assert!(m3.values().data().iter().all(|&v| v == 1.0));
    }

    fn tiny_stream(n: usize, d: usize, seed: u64) -> Unlabeled {
        let mut rng = Rng::new(seed);
        Unlabeled::new(Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal(1.0)).collect()))
    }

    #[test]
    fn transfer_decreases_objective_and_keeps_density() {
        let net = mlp("m", &[4, 6, 2], true).unwrap();
        let mut rng = Rng::new(29);
        let theta0 = net.init_glorot(&mut rng);
        let stream = tiny_stream(12, 4, 31);
        let mut cfg = NttConfig::new(Scheme::Layerwise(0.4));
        cfg.learning_rate = 5e-3;
        cfg.weight_decay = 0.0;
        cfg.batch_size = 6;
        cfg.epochs = 12;
        cfg.mask_update_every = 5;
        cfg.gamma_sq = 1e-2;
        cfg.seed = 33;
        let (mask, theta, report) = ntt_transfer(&net, &theta0, &stream, &cfg).unwrap();
        assert!(mask.check_counts(&net, cfg.scheme).is_ok());
        assert_eq!(report.rows.len(), 24);
        for row in &report.rows {
            assert!(row.j.is_finite());
            assert!((row.density - 0.4).abs() < 0.05);
        }
        let first = report.rows.first().unwrap().j;
        let last = report.rows.last().unwrap().j;
        assert!(last < first, "J did not decrease: {first} -> {last}");
        // The student is a genuine sparse solution: final objective on the
        // full stream is finite and the mask holds exact counts.
        let (j, _, _) = ntt_objective(
            &net,
            &theta0,
            &theta,
            &mask,
            &stream.inputs,
            cfg.gamma_sq,
            cfg.ntk_mode,
        )
        .unwrap();
        assert!(j.is_finite());
    }

    #[test]
    fn transfer_without_pruning_stays_at_the_minimum() {
        let net = mlp("m", &[3, 4, 2], true).unwrap();
        let mut rng = Rng::new(37);
        let theta0 = net.init_glorot(&mut rng);
        let stream = tiny_stream(8, 3, 41);
        let mut cfg = NttConfig::new(Scheme::Layerwise(1.0));
        // SGD: a gradient at roundoff scale keeps the iterate at roundoff
        // scale (Adam's normalizer would amplify it to lr-sized steps).
        cfg.optimizer = OptimKind::Sgd;
        cfg.learning_rate = 1e-4;
        cfg.weight_decay = 0.0;
        cfg.batch_size = 8;
        cfg.epochs = 5;
        cfg.gamma_sq = 1e-3;
        let (_, _, report) = ntt_transfer(&net, &theta0, &stream, &cfg).unwrap();
        for row in &report.rows {
            assert!(row.j < 1e-10, "iteration {} J {}", row.iteration, row.j);
        }
    }

    #[test]
    fn frozen_masked_entries_survive_decay_and_steps() {
        let net = mlp("m", &[4, 5, 2], true).unwrap();
        let mut rng = Rng::new(43);
        let theta0 = net.init_glorot(&mut rng);
        let stream = tiny_stream(10, 4, 47);
        let mut cfg = NttConfig::new(Scheme::Layerwise(0.5));
        cfg.learning_rate = 1e-2;
        cfg.weight_decay = 0.05;
        cfg.batch_size = 10;
        cfg.epochs = 7;
        cfg.mask_update_every = 1000; // never refresh
        let initial_mask = magnitude_mask(&net, &theta0, cfg.scheme).unwrap();
        let (mask, theta, _) = ntt_transfer(&net, &theta0, &stream, &cfg).unwrap();
        assert_eq!(mask.values(), initial_mask.values());
        let mut moved = 0;
        for (i, &m) in mask.values().data().iter().enumerate() {
            if m == 0.0 {
                assert_eq!(theta0.data()[i].to_bits(), theta.data()[i].to_bits(), "coord {i}");
            } else if theta0.data()[i] != theta.data()[i] {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn global_scheme_initial_mask_comes_from_logit_saliency() {
        let net = mlp("m", &[4, 6, 2], true).unwrap();
        let mut rng = Rng::new(53);
        let theta0 = net.init_glorot(&mut rng);
        let stream = tiny_stream(16, 4, 59);
        let mut cfg = NttConfig::new(Scheme::Global(0.5));
        cfg.epochs = 0; // only initialization
        let (mask, theta, report) = ntt_transfer(&net, &theta0, &stream, &cfg).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(theta.data(), theta0.data());
        let scores = logit_snip_scores(&net, &theta0, &stream.inputs).unwrap();
        let expect = select_mask(&net, &scores, cfg.scheme).unwrap();
        assert_eq!(mask.values(), expect.values());
        assert!(mask.check_counts(&net, cfg.scheme).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let net = mlp("m", &[5, 3, 2], true).unwrap();
        let mut rng = Rng::new(61);
        let theta = net.init_glorot(&mut rng);
        let mask = magnitude_mask(&net, &theta, Scheme::Layerwise(0.3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.ntt");
        save_checkpoint(&path, net.name(), 99, &mask, &theta).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.arch, "m");
        assert_eq!(ckpt.seed, 99);
        assert_eq!(ckpt.theta.len(), theta.len());
        for (a, b) in ckpt.theta.data().iter().zip(theta.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mask2 = ckpt.mask(&net).unwrap();
        assert_eq!(mask2.values(), mask.values());
        assert!((mask2.target_density() - mask.density(&net)).abs() < 1e-12);

        // Corrupt the magic: load must fail.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Data(_))));
    }

    #[test]
    fn report_csv_format_pinned() {
        let report = NttReport {
            rows: vec![NttRow {
                iteration: 3,
                j: 0.5,
                output_term: 0.25,
                kernel_term: 0.25,
                density: 0.1,
            }],
            wall_time_secs: 123.0,
        };
        assert_eq!(
            report.to_csv(),
            "iteration,J,output_term,kernel_term,density\n3,5.00000000e-1,2.50000000e-1,2.50000000e-1,1.00000000e-1\n"
        );
    }
}
