//! Label-dependent training and evaluation of dense and masked networks.
//!
//! The trainer runs plain minibatch descent: per-epoch seeded reshuffling
//! (full-batch runs keep the dataset order fixed), gradients taken through
//! the masked forward graph, and updates gated by the mask so pruned weights
//! are bit-identical before and after training.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{Feeds, Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{dropout_draws, eval_logits, Mask, Mode, NetGraph, Network};
use crate::optim::{Optim, OptimSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Quadratic,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// ½·Σ(f−y)², summed over the whole batch.
pub fn quadratic_loss(outputs: &Tensor, targets: &Tensor) -> Result<f64> {
    if outputs.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "quadratic loss shapes {:?} vs {:?}",
            outputs.shape(),
            targets.shape()
        )));
    }
    let s: f64 = outputs.data().iter().zip(targets.data()).map(|(f, y)| (f - y) * (f - y)).sum();
    Ok(0.5 * s)
}

/// Mean over the batch of −log softmax(logits)[true class].
pub fn softmax_cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Result<f64> {
    if logits.shape() != one_hot.shape() {
        return Err(Error::Shape(format!(
            "cross-entropy shapes {:?} vs {:?}",
            logits.shape(),
            one_hot.shape()
        )));
    }
    let n = logits.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
        let z_true: f64 = row.iter().zip(one_hot.row(i)).map(|(&z, &y)| z * y).sum();
        total += lse - z_true;
    }
    Ok(total / n as f64)
}

/// Append ½·Σ(pred − target)² to the graph.
pub fn append_quadratic_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> NodeId {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 0.5)
}

/// Append softmax cross-entropy over one-hot targets to the graph, with the
/// requested batch reduction. The row-max shift keeps exp() in range and has
/// no effect on either the value or the gradient.
pub fn append_softmax_cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    one_hot: NodeId,
    reduction: Reduction,
) -> NodeId {
    let shape = g.shape(logits).to_vec();
    let (n, c) = (shape[0], shape[1]);
    let m = g.row_max(logits);
    let mb = g.broadcast_col(m, c);
    let shifted = g.sub(logits, mb);
    let e = g.exp(shifted);
    let se = g.row_sum(e);
    let lse = g.log(se);
    let zy = g.mul(shifted, one_hot);
    let z_true = g.row_sum(zy);
    let per_sample = g.sub(lse, z_true);
    let total = g.sum(per_sample);
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / n as f64),
    }
}

/// Append the configured training loss; targets are an [n, c] matrix.
pub fn append_loss(g: &mut Graph, kind: LossKind, logits: NodeId, target: NodeId) -> NodeId {
    match kind {
        LossKind::Quadratic => append_quadratic_loss(g, logits, target),
        LossKind::SoftmaxCrossEntropy => {
            append_softmax_cross_entropy(g, logits, target, Reduction::Mean)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Record a History row every this many optimizer steps.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.learning_rate() <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

/// 9 significant digits, locale-free; the pinned CSV float format.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

impl History {
    pub fn final_row(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,train_loss,train_acc,test_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.iteration,
                fmt_f64(r.train_loss),
                fmt_f64(r.train_acc),
                fmt_f64(r.test_acc)
            );
        }
        out
    }
}

struct StepGraphs {
    bundle: NetGraph,
    target: NodeId,
    loss: NodeId,
    grad: NodeId,
}

fn build_step_graphs(net: &Network, batch: usize, kind: LossKind, mode: Mode) -> StepGraphs {
    let mut bundle = net.build_graph(batch, mode);
    let c = net.class_count();
    let target = bundle.graph.input(vec![batch, c]);
    let loss = append_loss(&mut bundle.graph, kind, bundle.logits, target);
    let grad = bundle.graph.append_gradient(loss, &[bundle.theta])[0].expect("loss depends on theta");
    StepGraphs { bundle, target, loss, grad }
}

fn batch_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Minibatch training. Returns the final parameters (masked entries
/// bit-identical to `init`) and the recorded History.
pub fn train(
    net: &Network,
    init: &Tensor,
    mask: Option<&Mask>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Tensor, History)> {
    cfg.validate()?;
    let n = train_ds.len();
    if n == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let targets = train_ds.target_matrix();
    let mut theta = init.clone();
    let mut opt = Optim::new(cfg.optimizer, theta.len());
    let rng = Rng::new(cfg.seed);
    let mask_tensor = match mask {
        Some(m) => m.values().clone(),
        None => crate::network::ones_mask_tensor(net),
    };
    let mask_slice = mask.map(|m| m.values().data().to_vec());

    let mut graphs: BTreeMap<usize, StepGraphs> = BTreeMap::new();
    let mut history = History::default();
    let record = |theta: &Tensor, iteration: u64, history: &mut History| -> Result<()> {
        let train_loss = dataset_loss(net, theta, mask, train_ds, cfg.loss)?;
        let train_acc = evaluate(net, theta, mask, train_ds)?;
        let test_acc = evaluate(net, theta, mask, test_ds)?;
        history.rows.push(HistoryRow { iteration, train_loss, train_acc, test_acc });
        Ok(())
    };

    record(&theta, 0, &mut history)?;
    let full_batch = cfg.batch_size >= n;
    let mut iteration: u64 = 0;
    let mut dropout_rng = rng.stream(7);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if !full_batch {
            rng.stream(1 + epoch as u64).shuffle(&mut order);
        }
        for chunk in order.chunks(cfg.batch_size.min(n)) {
            let sg = graphs
                .entry(chunk.len())
                .or_insert_with(|| build_step_graphs(net, chunk.len(), cfg.loss, Mode::Train));
            let x = batch_rows(&train_ds.inputs, chunk);
            let y = batch_rows(&targets, chunk);
            let draws = dropout_draws(net, &sg.bundle, &mut dropout_rng);
            let mut feeds = Feeds::new(&sg.bundle.graph);
            feeds.set(&sg.bundle.graph, sg.bundle.theta, &theta);
            feeds.set(&sg.bundle.graph, sg.bundle.mask, &mask_tensor);
            feeds.set(&sg.bundle.graph, sg.bundle.x, &x);
            feeds.set(&sg.bundle.graph, sg.target, &y);
            for (&slot, t) in sg.bundle.dropout_slots.iter().zip(&draws) {
                feeds.set(&sg.bundle.graph, slot, t);
            }
            let out = sg
                .bundle
                .graph
                .eval(&feeds, &[sg.loss, sg.grad])
                .map_err(|e| Error::Numerical(format!("aborted at iteration {iteration}: {e}")))?;
            let loss_val = out[0].item();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss {loss_val} at iteration {iteration}"
                )));
            }
            opt.step_masked(theta.data_mut(), out[1].data(), mask_slice.as_deref());
            iteration += 1;
            if iteration % cfg.eval_every as u64 == 0 {
                record(&theta, iteration, &mut history)?;
            }
        }
    }
    if history.rows.last().map(|r| r.iteration) != Some(iteration) {
        record(&theta, iteration, &mut history)?;
    }
    Ok((theta, history))
}

const EVAL_CHUNK: usize = 256;

/// Evaluation-mode loss over a whole dataset (same reduction as training:
/// quadratic sums, cross-entropy averages).
pub fn dataset_loss(
    net: &Network,
    params: &Tensor,
    mask: Option<&Mask>,
    ds: &Dataset,
    kind: LossKind,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let targets = ds.target_matrix();
    let mut total = 0.0;
    let mut done = 0;
    while done < ds.len() {
        let take = EVAL_CHUNK.min(ds.len() - done);
        let idx: Vec<usize> = (done..done + take).collect();
        let x = batch_rows(&ds.inputs, &idx);
        let y = batch_rows(&targets, &idx);
        let logits = crate::network::forward_logits(net, params, mask, &x, None)?;
        total += match kind {
            LossKind::Quadratic => quadratic_loss(&logits, &y)?,
            LossKind::SoftmaxCrossEntropy => softmax_cross_entropy(&logits, &y)? * take as f64,
        };
        done += take;
    }
    Ok(match kind {
        LossKind::Quadratic => total,
        LossKind::SoftmaxCrossEntropy => total / ds.len() as f64,
    })
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of argmax-correct predictions; ties go to the lower class index.
pub fn evaluate(net: &Network, params: &Tensor, mask: Option<&Mask>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut done = 0;
    while done < ds.len() {
        let take = EVAL_CHUNK.min(ds.len() - done);
        let idx: Vec<usize> = (done..done + take).collect();
        let x = batch_rows(&ds.inputs, &idx);
        let logits = crate::network::forward_logits(net, params, mask, &x, None)?;
        for (r, &i) in idx.iter().enumerate() {
            if argmax_lowest(logits.row(r)) == ds.label(i) {
                correct += 1;
            }
        }
        done += take;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// For each parameter snapshot and each input group, the mean output vector
/// over that group (evaluation mode).
pub fn output_trace(
    net: &Network,
    snapshots: &[Tensor],
    mask: Option<&Mask>,
    groups: &[Tensor],
) -> Result<Vec<Vec<Vec<f64>>>> {
    for g in groups {
        if g.rows() == 0 {
            return Err(Error::Data("empty input group in output trace".into()));
        }
    }
    let mut trace = Vec::with_capacity(snapshots.len());
    let mut bundles: BTreeMap<usize, NetGraph> = BTreeMap::new();
    let ones = crate::network::ones_mask_tensor(net);
    let mask_tensor = mask.map(|m| m.values().clone()).unwrap_or(ones);
    for params in snapshots {
        let mut per_group = Vec::with_capacity(groups.len());
        for g in groups {
            let bundle = bundles
                .entry(g.rows())
                .or_insert_with(|| net.build_graph(g.rows(), Mode::Eval));
            let logits = eval_logits(bundle, params, &mask_tensor, g)?;
            let c = logits.cols();
            let mut mean = vec![0.0; c];
            for i in 0..logits.rows() {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += logits.row(i)[k];
                }
            }
            for m in mean.iter_mut() {
                *m /= logits.rows() as f64;
            }
            per_group.push(mean);
        }
        trace.push(per_group);
    }
    Ok(trace)
}
