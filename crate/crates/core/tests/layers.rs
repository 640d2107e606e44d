use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use chirality_core::accounting::chiral_weight_count;
use chirality_core::harness::suite::{random_layout, random_tensor};
use chirality_core::layers::{
    ActivationKind, ChiralBatchNorm, ChiralConv1dSpec, ChiralLinearSpec, Dropout,
};
use chirality_core::{JointLayout, Tensor};

fn layout_strategy(prefix: &'static str) -> impl Strategy<Value = JointLayout> {
    (0usize..4, 0usize..3, 1usize..5, any::<u8>())
        .prop_filter("at least one joint", |(p, c, _, _)| p + c > 0)
        .prop_map(move |(p, c, d, mask)| {
            let neg: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
            JointLayout::synthetic(prefix, p, c, d, &neg).unwrap()
        })
}

/// Dimension of `{W : T_out W = W T_in}` by counting orbits of the signed
/// permutation action on matrix entries.
fn brute_commutant(a: &JointLayout, b: &JointLayout) -> usize {
    let (ti, to) = (a.transform(), b.transform());
    let mut seen = vec![false; a.size() * b.size()];
    let mut free = 0;
    for r in 0..b.size() {
        for c in 0..a.size() {
            if seen[r * a.size() + c] {
                continue;
            }
            let (pr, pc) = (to.perm()[r], ti.perm()[c]);
            seen[r * a.size() + c] = true;
            seen[pr * a.size() + pc] = true;
            let fixed = pr == r && pc == c;
            let sign = to.sign()[r] * ti.sign()[c];
            if !fixed || sign == 1 {
                free += 1;
            }
        }
    }
    free
}

fn seed_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn transform_follows_joint_names() {
    let l = JointLayout::build(["LHip", "LKnee"], ["RHip", "RKnee"], ["Spine"], 2, &[0]).unwrap();
    let t = l.transform();
    let x: Vec<f64> = (0..l.size()).map(|i| i as f64 + 1.0).collect();
    let y = t.apply_vec(&x);
    for (side, joint, dim) in [(0usize, 0usize, 0usize), (0, 1, 1), (2, 0, 0), (2, 0, 1)] {
        let sides = [
            chirality_core::Side::Left,
            chirality_core::Side::Right,
            chirality_core::Side::Center,
        ];
        let s = sides[side];
        let i = l.feature_index(s, joint, dim);
        let j = l.feature_index(s.mirror(), joint, dim);
        let expected = if dim == 0 { -x[j] } else { x[j] };
        assert_eq!(y[i], expected, "feature {i}");
    }
    assert_eq!(t.apply_vec(&y), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_space_is_commutant_minus_zeroed_center_block(a in layout_strategy("i"), b in layout_strategy("o")) {
        let spec = ChiralLinearSpec::zeros(&a, &b);
        let n_w = spec.plan().n_weights();
        prop_assert_eq!(n_w, chiral_weight_count(&a, &b));
        let zeroed = b.num_center() * b.num_positive() * a.num_pairs() * a.num_negated();
        prop_assert_eq!(n_w + zeroed, brute_commutant(&a, &b));
    }

    #[test]
    fn random_weights_commute(a in layout_strategy("i"), b in layout_strategy("o"), seed in any::<u64>()) {
        let spec = ChiralLinearSpec::random(&a, &b, &mut seed_rng(seed));
        let w = spec.materialize_weight();
        let lhs = b.transform().to_dense().matmul(&w).unwrap();
        let rhs = w.matmul(&a.transform().to_dense()).unwrap();
        prop_assert_eq!(lhs.max_abs_diff(&rhs), 0.0);
        let bias = spec.materialize_bias();
        prop_assert_eq!(b.transform().apply_vec(bias.data()), bias.data().to_vec());
    }

    #[test]
    fn symmetric_matvec_matches_dense(a in layout_strategy("i"), b in layout_strategy("o"), seed in any::<u64>()) {
        let mut rng = seed_rng(seed);
        let spec = ChiralLinearSpec::random(&a, &b, &mut rng);
        let x: Vec<f64> = (0..a.size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = spec.materialize_weight();
        let bias = spec.materialize_bias();
        let oracle: Vec<f64> = (0..b.size())
            .map(|r| bias.data()[r] + (0..a.size()).map(|c| w.get2(r, c) * x[c]).sum::<f64>())
            .collect();
        let (y, mults) = spec.symmetric_matvec(&x).unwrap();
        prop_assert_eq!(mults as usize, spec.plan().n_weights());
        for (p, q) in y.iter().zip(&oracle) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = seed_rng(3);
    for (k, d, s) in [(3, 1, 1), (3, 3, 1), (2, 2, 2), (1, 1, 3)] {
        let a = random_layout(&mut rng, "i", 8, 3);
        let b = random_layout(&mut rng, "o", 8, 3);
        let conv = ChiralConv1dSpec::random(&a, &b, k, d, s, &mut rng).unwrap();
        let t = (k - 1) * d + 1 + 5;
        let x = random_tensor(&mut rng, vec![2, t, a.size()]);
        let y = conv.forward(&x).unwrap();
        let t_out = ((t - (k - 1) * d - 1) / s) + 1;
        assert_eq!(y.shape(), &[2, t_out, b.size()]);
        let taps: Vec<Tensor> = (0..k)
            .map(|tau| conv.tap(tau).materialize_weight())
            .collect();
        let bias = conv.tap(0).materialize_bias();
        for batch in 0..2 {
            for j in 0..t_out {
                for r in 0..b.size() {
                    let mut acc = bias.data()[r];
                    for (tau, w) in taps.iter().enumerate() {
                        let frame = (k - 1) * d + j * s - tau * d;
                        for c in 0..a.size() {
                            acc += w.get2(r, c) * x.data()[(batch * t + frame) * a.size() + c];
                        }
                    }
                    let got = y.data()[(batch * t_out + j) * b.size() + r];
                    assert!((got - acc).abs() < 1e-12, "k={k} d={d} s={s}");
                }
            }
        }
    }
}

/// Batch norm over the batch concatenated with its mirrored copy.
fn augmented_bn_oracle(bn: &ChiralBatchNorm, x: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let t = bn.layout().transform();
    let n = x.cols();
    let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row_slice(r).to_vec()).collect();
    rows.extend((0..x.rows()).map(|r| t.apply_vec(x.row_slice(r))));
    let m = rows.len() as f64;
    let mean: Vec<f64> = (0..n)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / m)
        .collect();
    let var: Vec<f64> = (0..n)
        .map(|c| rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / m)
        .collect();
    let (g, b) = (bn.materialize_gamma(), bn.materialize_beta());
    let out: Vec<f64> = (0..x.rows())
        .flat_map(|r| {
            let row = x.row_slice(r).to_vec();
            let (mean, var, g, b) = (&mean, &var, &g, &b);
            (0..n).map(move |c| g[c] * (row[c] - mean[c]) / (var[c] + bn.epsilon()).sqrt() + b[c])
        })
        .collect();
    (Tensor::new(x.shape().to_vec(), out).unwrap(), mean, var)
}

#[test]
fn batchnorm_uses_augmented_batch_statistics() {
    let mut rng = seed_rng(4);
    for _ in 0..20 {
        let l = random_layout(&mut rng, "b", 8, 4);
        let mut bn = ChiralBatchNorm::new(&l, 0.2, 1e-5).unwrap();
        for v in bn.theta_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let x = random_tensor(&mut rng, vec![7, l.size()]).map(|v| 3.0 * v + 0.5);
        let (oracle, mean, var) = augmented_bn_oracle(&bn, &x);
        let y = bn.forward(&x, true).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-12);

        let n = 14.0;
        for c in 0..l.size() {
            assert!((bn.running_mean()[c] - 0.2 * mean[c]).abs() < 1e-12);
            let expected = 0.8 + 0.2 * var[c] * n / (n - 1.0);
            assert!((bn.running_var()[c] - expected).abs() < 1e-12);
        }
        let (g, b) = (bn.materialize_gamma(), bn.materialize_beta());
        let eval = bn.forward(&x, false).unwrap();
        for r in 0..x.rows() {
            for c in 0..l.size() {
                let expected = g[c] * (x.get2(r, c) - bn.running_mean()[c])
                    / (bn.running_var()[c] + bn.epsilon()).sqrt()
                    + b[c];
                assert!((eval.get2(r, c) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dropout_masks_are_uniform_across_positions() {
    let p = 0.3;
    let d = Dropout::new(p).unwrap();
    let mut rng = seed_rng(5);
    let (width, draws) = (40, 3000);
    let mut kept = vec![0u64; width];
    for _ in 0..draws {
        for (k, m) in kept.iter_mut().zip(d.mask(&mut rng, width)) {
            assert!(m == 0.0 || (m - 1.0 / (1.0 - p)).abs() < 1e-15);
            if m != 0.0 {
                *k += 1;
            }
        }
    }
    // goodness of fit of each position's keep count to Binomial(draws, 1 - p)
    let e_keep = draws as f64 * (1.0 - p);
    let e_drop = draws as f64 * p;
    let stat: f64 = kept
        .iter()
        .map(|&k| {
            let k = k as f64;
            (k - e_keep).powi(2) / e_keep + (draws as f64 - k - e_drop).powi(2) / e_drop
        })
        .sum();
    let critical = ChiSquared::new(width as f64).unwrap().inverse_cdf(0.999);
    assert!(stat < critical, "chi-square {stat} vs {critical}");
}

#[test]
fn activations_match_closed_forms() {
    let x = Tensor::row(vec![-3.0, -1.0, -0.25, 0.0, 0.5, 1.0, 2.5]);
    type Case = (ActivationKind, fn(f64) -> f64);
    let cases: [Case; 4] = [
        (ActivationKind::Tanh, f64::tanh),
        (ActivationKind::HardTanh, |v| v.clamp(-1.0, 1.0)),
        (ActivationKind::Softsign, |v| v / (1.0 + v.abs())),
        (ActivationKind::Relu, |v| v.max(0.0)),
    ];
    for (kind, f) in cases {
        let y = kind.apply(&x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - f(*b)).abs() < 1e-15, "{}", kind.name());
        }
        let odd = x.data().iter().all(|v| (f(-v) + f(*v)).abs() < 1e-15);
        assert_eq!(kind.is_odd(), odd, "{}", kind.name());
    }
}
