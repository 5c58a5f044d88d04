//! Baseline mask generators: random, SNIP, Layerwise-SNIP, Logit-SNIP.
//!
//! All scoring happens at the initialization (foresight pruning): one forward
//! and backward pass of a scoring batch through the dense network, no
//! training. Selection keeps the highest-scoring weights at exact counts;
//! biases are never pruned.

use std::sync::Arc;

use crate::autodiff::Feeds;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{round_half_up, Mask, Mode, Network, Scheme};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{append_loss, LossKind};

/// Per-parameter sensitivity scores aligned with the flat layout. Bias
/// entries carry +inf so they can never fall into the pruned set.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityScores {
    values: Vec<f64>,
}

impl SensitivityScores {
    /// Wrap a full-layout score vector, forcing bias entries to +inf and
    /// rejecting non-finite weight scores.
    pub fn new(net: &Network, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != net.param_count() {
            return Err(Error::Shape(format!(
                "{} scores for {} parameters",
                values.len(),
                net.param_count()
            )));
        }
        for layer in net.layout() {
            for i in layer.weight_offset..layer.weight_offset + layer.weight_len {
                if !values[i].is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite sensitivity score at weight {i}"
                    )));
                }
            }
            for i in layer.bias_offset..layer.bias_offset + layer.bias_len {
                values[i] = f64::INFINITY;
            }
        }
        Ok(SensitivityScores { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Uniformly random mask with exact per-layer kept counts round(p * layer
/// weight count). The per-layer rule applies to both schemes.
pub fn random_mask(net: &Network, scheme: Scheme, rng: &mut Rng) -> Result<Mask> {
    scheme.validate()?;
    let p = scheme.density();
    let mut keep = vec![false; net.param_count()];
    for layer in net.layout() {
        let k = round_half_up(p * layer.weight_len as f64);
        for pick in rng.choose_indices(layer.weight_len, k) {
            keep[layer.weight_offset + pick] = true;
        }
    }
    Ok(Mask::from_weight_bits(net, &keep, p))
}

/// |theta . dL/dtheta| from one labeled batch, with L the summed batch loss.
pub fn snip_scores(
    net: &Network,
    params: &Tensor,
    batch: &Dataset,
    loss: LossKind,
) -> Result<SensitivityScores> {
    if batch.is_empty() {
        return Err(Error::Data("scoring batch is empty".into()));
    }
    // The trainer's cross-entropy averages over the batch; SNIP is defined on
    // the summed loss, so rescale. The quadratic loss already sums.
    let scale = match loss {
        LossKind::Quadratic => 1.0,
        LossKind::SoftmaxCrossEntropy => batch.len() as f64,
    };
    let targets = batch.target_matrix();
    let grad = loss_gradient(net, params, &batch.inputs, &targets, loss)?;
    scores_from_gradient(net, params, grad.data(), scale)
}

/// |theta . dZ/dtheta| with the label-free saliency Z = sum_i ||f(x_i)||^2.
pub fn logit_snip_scores(net: &Network, params: &Tensor, inputs: &Tensor) -> Result<SensitivityScores> {
    if inputs.rows() == 0 {
        return Err(Error::Data("scoring batch is empty".into()));
    }
    let mut bundle = net.build_graph(inputs.rows(), Mode::Eval);
    let sq = bundle.graph.square(bundle.logits);
    let z = bundle.graph.sum(sq);
    let grad = bundle.graph.append_gradient(z, &[bundle.theta])[0].expect("z depends on theta");
    let ones = crate::network::ones_mask_tensor(net);
    let mut feeds = Feeds::new(&bundle.graph);
    feeds.set(&bundle.graph, bundle.theta, params);
    feeds.set(&bundle.graph, bundle.mask, &ones);
    feeds.set(&bundle.graph, bundle.x, inputs);
    let g = bundle.graph.eval(&feeds, &[grad])?.remove(0);
    scores_from_gradient(net, params, g.data(), 1.0)
}

fn loss_gradient(
    net: &Network,
    params: &Tensor,
    inputs: &Tensor,
    targets: &Tensor,
    loss: LossKind,
) -> Result<Tensor> {
    let mut bundle = net.build_graph(inputs.rows(), Mode::Eval);
    let target = bundle.graph.input(vec![targets.rows(), targets.cols()]);
    let loss_node = append_loss(&mut bundle.graph, loss, bundle.logits, target);
    let grad =
        bundle.graph.append_gradient(loss_node, &[bundle.theta])[0].expect("loss depends on theta");
    let ones = crate::network::ones_mask_tensor(net);
    let mut feeds = Feeds::new(&bundle.graph);
    feeds.set(&bundle.graph, bundle.theta, params);
    feeds.set(&bundle.graph, bundle.mask, &ones);
    feeds.set(&bundle.graph, bundle.x, inputs);
    feeds.set(&bundle.graph, target, targets);
    Ok(bundle.graph.eval(&feeds, &[grad])?.remove(0))
}

fn scores_from_gradient(
    net: &Network,
    params: &Tensor,
    grad: &[f64],
    scale: f64,
) -> Result<SensitivityScores> {
    let values: Vec<f64> =
        params.data().iter().zip(grad).map(|(&t, &g)| (t * g * scale).abs()).collect();
    SensitivityScores::new(net, values)
}

/// Keep the highest-scoring weights at exact counts, per layer or globally.
/// Ties are broken by pruning the lower flat index first.
pub fn select_mask(net: &Network, scores: &SensitivityScores, scheme: Scheme) -> Result<Mask> {
    scheme.validate()?;
    if scores.values.len() != net.param_count() {
        return Err(Error::Shape("scores do not match the parameter layout".into()));
    }
    let p = scheme.density();
    let mut keep = vec![false; net.param_count()];
    let keep_top = |candidates: &mut Vec<usize>, kept: usize, keep: &mut Vec<bool>| {
        // Ascending by (score, index): the pruned set is the prefix.
        candidates.sort_by(|&a, &b| {
            scores.values[a]
                .partial_cmp(&scores.values[b])
                .expect("scores validated finite")
                .then(a.cmp(&b))
        });
        for &i in candidates.iter().skip(candidates.len() - kept) {
            keep[i] = true;
        }
    };
    match scheme {
        Scheme::Layerwise(_) => {
            for layer in net.layout() {
                let kept = round_half_up(p * layer.weight_len as f64);
                let mut idx: Vec<usize> =
                    (layer.weight_offset..layer.weight_offset + layer.weight_len).collect();
                keep_top(&mut idx, kept, &mut keep);
            }
        }
        Scheme::Global(_) => {
            let mut idx: Vec<usize> = Vec::with_capacity(net.weight_count());
            for layer in net.layout() {
                idx.extend(layer.weight_offset..layer.weight_offset + layer.weight_len);
            }
            let kept = round_half_up(p * net.weight_count() as f64);
            keep_top(&mut idx, kept, &mut keep);
        }
    }
    Ok(Mask::from_weight_bits(net, &keep, p))
}

/// Shared index arcs are handy when callers turn masks into gather lists.
pub fn kept_indices(net: &Network, mask: &Mask) -> Arc<Vec<usize>> {
    let mut idx = Vec::new();
    let data = mask.values().data();
    for layer in net.layout() {
        for i in layer.weight_offset..layer.weight_offset + layer.weight_len {
            if data[i] != 0.0 {
                idx.push(i);
            }
        }
    }
    Arc::new(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitTag, Targets};
    use crate::network::mlp;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn scalar_model() -> (Network, Tensor) {
        let net = mlp("s", &[1, 1], false).unwrap();
        (net, Tensor::from_vec(vec![1.0]))
    }

    fn one_sample(x: f64, y: f64) -> Dataset {
        Dataset::new(
            Tensor::matrix(1, 1, vec![x]),
            Targets::Real(Tensor::matrix(1, 1, vec![y])),
            1,
            SplitTag::Train,
        )
        .unwrap()
    }

    #[test]
    fn snip_hand_example() {
        let (net, theta) = scalar_model();
        let ds = one_sample(2.0, 0.0);
        let s = snip_scores(&net, &theta, &ds, LossKind::Quadratic).unwrap();
        assert!((s.values()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn logit_snip_hand_example() {
        let (net, theta) = scalar_model();
        let x = Tensor::matrix(1, 1, vec![2.0]);
        let s = logit_snip_scores(&net, &theta, &x).unwrap();
        assert!((s.values()[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_theta_zero_scores() {
        let (net, _) = scalar_model();
        let theta = Tensor::from_vec(vec![0.0]);
        let ds = one_sample(2.0, 1.0);
        assert_eq!(snip_scores(&net, &theta, &ds, LossKind::Quadratic).unwrap().values()[0], 0.0);
        let x = Tensor::matrix(1, 1, vec![2.0]);
        assert_eq!(logit_snip_scores(&net, &theta, &x).unwrap().values()[0], 0.0);
    }

    #[test]
    fn zero_inputs_zero_logit_scores() {
        let net = mlp("m", &[3, 4, 2], true).unwrap();
        let mut rng = Rng::new(8);
        let theta = net.init_glorot(&mut rng);
        let x = Tensor::matrix(2, 3, vec![0.0; 6]);
        let s = logit_snip_scores(&net, &theta, &x).unwrap();
        for layer in net.layout() {
            // First-layer weights see zero activations; with zero biases the
            // whole forward is zero, so every weight score vanishes.
            for i in layer.weight_offset..layer.weight_offset + layer.weight_len {
                assert_eq!(s.values()[i], 0.0);
            }
        }
    }

    #[test]
    fn perfect_predictions_zero_snip_scores() {
        let net = mlp("m", &[2, 2], false).unwrap();
        let theta = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        // Targets equal predictions: residual is zero.
        let inputs = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.5, 0.25]);
        let ds = Dataset::new(
            inputs.clone(),
            Targets::Real(crate::network::forward_logits(&net, &theta, None, &inputs, None).unwrap()),
            2,
            SplitTag::Train,
        )
        .unwrap();
        let s = snip_scores(&net, &theta, &ds, LossKind::Quadratic).unwrap();
        for i in 0..4 {
            assert_eq!(s.values()[i], 0.0);
        }
    }

    #[test]
    fn select_mask_hand_examples() {
        let net = mlp("t", &[2, 1, 2], false).unwrap();
        let scores =
            SensitivityScores::new(&net, vec![0.9, 0.1, 0.5, 0.4]).unwrap();
        let global = select_mask(&net, &scores, Scheme::Global(0.5)).unwrap();
        assert_eq!(global.values().data(), &[1.0, 0.0, 1.0, 0.0]);
        let layerwise = select_mask(&net, &scores, Scheme::Layerwise(0.5)).unwrap();
        assert_eq!(layerwise.values().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn uniform_scores_tie_break_keeps_high_indices() {
        let net = mlp("t", &[4, 1], false).unwrap();
        let scores = SensitivityScores::new(&net, vec![0.5; 4]).unwrap();
        let mask = select_mask(&net, &scores, Scheme::Layerwise(0.5)).unwrap();
        assert_eq!(mask.values().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn random_mask_exact_counts_and_seed_dependence() {
        let net = mlp("t", &[10, 10, 5], true).unwrap();
        let m1 = random_mask(&net, Scheme::Layerwise(0.03), &mut Rng::new(1)).unwrap();
        for (kept, total) in m1.per_layer_kept(&net) {
            assert_eq!(kept, round_half_up(0.03 * total as f64));
        }
        let m2 = random_mask(&net, Scheme::Layerwise(0.03), &mut Rng::new(2)).unwrap();
        assert_ne!(m1.values().data(), m2.values().data());
        let all = random_mask(&net, Scheme::Layerwise(1.0), &mut Rng::new(3)).unwrap();
        assert!(all.values().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn logit_scores_ignore_labels_by_construction() {
        // The signature admits no labels; repeated calls are byte-identical.
        let net = mlp("m", &[3, 3, 2], true).unwrap();
        let mut rng = Rng::new(21);
        let theta = net.init_glorot(&mut rng);
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64).sin()).collect());
        let a = logit_snip_scores(&net, &theta, &x).unwrap();
        let b = logit_snip_scores(&net, &theta, &x).unwrap();
        let bits =
            |s: &SensitivityScores| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn select_full_density_is_all_ones(raw in proptest::collection::vec(0.0f64..10.0, 10)) {
            let net = mlp("t", &[5, 2], false).unwrap();
            let scores = SensitivityScores::new(&net, raw).unwrap();
            let mask = select_mask(&net, &scores, Scheme::Global(1.0)).unwrap();
            prop_assert!(mask.values().data().iter().all(|&v| v == 1.0));
        }

        #[test]
        fn select_mask_counts_exact(
            raw in proptest::collection::vec(0.0f64..10.0, 26),
            p in 0.05f64..1.0,
            global in proptest::bool::ANY,
        ) {
            let net = mlp("t", &[4, 5, 2], true).unwrap();
            prop_assert_eq!(net.param_count(), 37);
            let mut values = raw;
            values.extend([0.0; 11]); // bias slots, overwritten with +inf
            // Interleave: layout is [w1 (20), b1 (5), w2 (10), b2 (2)].
            let mut full = vec![0.0; 37];
            full[..20].copy_from_slice(&values[..20]);
            full[25..35].copy_from_slice(&values[20..30]);
            let scores = SensitivityScores::new(&net, full).unwrap();
            let scheme = if global { Scheme::Global(p) } else { Scheme::Layerwise(p) };
            let mask = select_mask(&net, &scores, scheme).unwrap();
            prop_assert!(mask.check_counts(&net, scheme).is_ok());
        }

        #[test]
        fn random_mask_counts_exact(p in 0.05f64..1.0, seed in 0u64..1000) {
            let net = mlp("t", &[6, 4, 3], true).unwrap();
            let mask = random_mask(&net, Scheme::Layerwise(p), &mut Rng::new(seed)).unwrap();
            prop_assert!(mask.check_counts(&net, Scheme::Layerwise(p)).is_ok());
        }
    }
}
