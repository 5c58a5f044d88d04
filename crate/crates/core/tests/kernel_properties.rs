//! Property tests for the kernel and the transfer objective on randomly
//! drawn architectures, masks, and batches.

use ntt_core::network::{mlp, Mask, Network};
use ntt_core::ntk::{empirical_ntk, symmetric_eigh, NtkMode};
use ntt_core::rng::Rng;
use ntt_core::transfer::ntt_objective;
use ntt_core::Tensor;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    widths: Vec<usize>,
    bias: bool,
    batch: usize,
    seed: u64,
    keep_stride: usize,
}

fn instances() -> impl Strategy<Value = Instance> {
    (
        proptest::collection::vec(2usize..6, 2..4),
        any::<bool>(),
        2usize..5,
        0u64..1_000_000,
        2usize..5,
    )
        .prop_map(|(widths, bias, batch, seed, keep_stride)| Instance {
            widths,
            bias,
            batch,
            seed,
            keep_stride,
        })
}

fn build(inst: &Instance) -> (Network, Tensor, Mask, Tensor) {
    let net = mlp("p", &inst.widths, inst.bias).unwrap();
    let mut rng = Rng::new(inst.seed);
    let theta = net.init_glorot(&mut rng);
    let keep: Vec<bool> = (0..net.param_count()).map(|i| i % inst.keep_stride != 0).collect();
    let mask = Mask::from_weight_bits(&net, &keep, 0.5);
    let d = inst.widths[0];
    let x = Tensor::new(
        vec![inst.batch, d],
        (0..inst.batch * d).map(|_| rng.normal(1.0)).collect(),
    );
    (net, theta, mask, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The kernel is a Gram matrix: symmetric and positive semidefinite,
    /// dense or masked, in both modes.
    #[test]
    fn kernel_is_symmetric_psd(inst in instances()) {
        let (net, theta, mask, x) = build(&inst);
        for mask in [None, Some(&mask)] {
            for mode in [NtkMode::Full, NtkMode::Trace] {
                let h = empirical_ntk(&net, &theta, mask, &x, mode).unwrap();
                let m = h.rows();
                let scale = h.data().iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
                for i in 0..m {
                    for j in 0..m {
                        let gap = (h.data()[i * m + j] - h.data()[j * m + i]).abs();
                        prop_assert!(gap < 1e-12 * scale);
                    }
                }
                let (eigs, _) = symmetric_eigh(&h);
                let max = eigs.iter().fold(0.0f64, |a, &v| a.max(v));
                for &e in &eigs {
                    prop_assert!(e >= -1e-8 * max.max(1e-300), "eig {e} of max {max}");
                }
            }
        }
    }

    /// Trace mode is the sum of the full kernel's logit-diagonal blocks.
    #[test]
    fn trace_sums_full_diagonal_blocks(inst in instances()) {
        let (net, theta, mask, x) = build(&inst);
        let c = net.class_count();
        let n = x.rows();
        let full = empirical_ntk(&net, &theta, Some(&mask), &x, NtkMode::Full).unwrap();
        let tr = empirical_ntk(&net, &theta, Some(&mask), &x, NtkMode::Trace).unwrap();
        let dim = n * c;
        for i in 0..n {
            for j in 0..n {
                let want: f64 =
                    (0..c).map(|k| full.data()[(i * c + k) * dim + (j * c + k)]).sum();
                let got = tr.data()[i * n + j];
                prop_assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
            }
        }
    }

    /// The objective splits into two non-negative terms and vanishes for the
    /// unmasked student at the teacher's parameters.
    #[test]
    fn objective_nonnegative_and_zero_at_identity(inst in instances()) {
        let (net, theta, mask, x) = build(&inst);
        let mut student = theta.clone();
        for (i, v) in student.data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i % 5) as f64 - 2.0);
        }
        let (j, out, kern) =
            ntt_objective(&net, &theta, &student, &mask, &x, 0.5, NtkMode::Full).unwrap();
        prop_assert!(out >= 0.0 && kern >= 0.0);
        prop_assert!((j - (out + kern)).abs() <= 1e-15 * j.max(1.0));

        let ones = Mask::ones(&net);
        let (j0, out0, _) =
            ntt_objective(&net, &theta, &theta, &ones, &x, 0.5, NtkMode::Full).unwrap();
        prop_assert_eq!(out0, 0.0);
        prop_assert!(j0 < 1e-16, "identity objective {}", j0);
    }
}
