use mtcmtm::contrastive::*;
use mtcmtm::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(n: usize, p: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        let row: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, p], data).unwrap()
}

fn eval(f: impl for<'t> Fn(&'t Tape<f64>) -> mtcmtm::Result<Var<'t, f64>>) -> f64 {
    let tape = Tape::new();
    f(&tape).unwrap().item().unwrap()
}

/// Symmetric InfoNCE written directly from the similarity matrix.
fn info_nce_oracle(zi: &Tensor<f64>, zt: &Tensor<f64>, tau: f64) -> f64 {
    let (n, p) = (zi.dim(0), zi.dim(1));
    let s: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| (0..p).map(|k| zi.data()[a * p + k] * zt.data()[b * p + k]).sum::<f64>() / tau)
                .collect()
        })
        .collect();
    let lse = |v: Vec<f64>| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let rows: f64 = (0..n).map(|k| lse(s[k].clone()) - s[k][k]).sum::<f64>() / n as f64;
    let cols: f64 = (0..n).map(|k| lse((0..n).map(|a| s[a][k]).collect()) - s[k][k]).sum::<f64>() / n as f64;
    0.5 * rows + 0.5 * cols
}

#[test]
fn info_nce_uniform_similarities_give_ln_n() {
    for n in [2, 5, 16] {
        let u = unit_rows(1, 4, n as u64);
        let v = unit_rows(1, 4, 99);
        let zi = Tensor::new(vec![n, 4], u.data().repeat(n)).unwrap();
        let zt = Tensor::new(vec![n, 4], v.data().repeat(n)).unwrap();
        let l = eval(|t| info_nce(t.constant(zi.clone()), t.constant(zt.clone()), 0.1));
        assert!((l - (n as f64).ln()).abs() < 1e-10, "n={n}: {l}");
    }
}

#[test]
fn info_nce_two_sample_closed_form() {
    let e = Tensor::<f64>::eye(2);
    let l = eval(|t| info_nce(t.constant(e.clone()), t.constant(e.clone()), 1.0));
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((l - expected).abs() < 1e-12);
    assert!((l - 0.31326).abs() < 1e-5);
}

#[test]
fn info_nce_matches_oracle() {
    for seed in 0..5 {
        let zi = unit_rows(6, 3, seed);
        let zt = unit_rows(6, 3, seed + 100);
        let l = eval(|t| info_nce(t.constant(zi.clone()), t.constant(zt.clone()), 0.2));
        assert!((l - info_nce_oracle(&zi, &zt, 0.2)).abs() < 1e-10);
    }
}

#[test]
fn info_nce_rejects_bad_input() {
    let tape = Tape::new();
    let one = tape.constant(unit_rows(1, 3, 0));
    assert!(info_nce(one, one, 0.1).is_err());
    let two = tape.constant(unit_rows(2, 3, 0));
    assert!(info_nce(two, two, 0.0).is_err());
    let other = tape.constant(unit_rows(3, 3, 1));
    assert!(info_nce(two, other, 0.1).is_err());
}

#[test]
fn clip_at_matched_temperature_equals_info_nce() {
    let tau = 0.1;
    let zi = unit_rows(8, 5, 3);
    let zt = unit_rows(8, 5, 4);
    let a = eval(|t| info_nce(t.constant(zi.clone()), t.constant(zt.clone()), tau));
    let b = eval(|t| clip(t.constant(zi.clone()), t.constant(zt.clone()), t.scalar((1.0 / tau).ln())));
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn simsiam_perfect_alignment_is_minus_one() {
    let z = unit_rows(4, 3, 5);
    let l = eval(|t| {
        let v = t.constant(z.clone());
        simsiam(v, v, v, v)
    });
    assert!((l + 1.0).abs() < 1e-12);
}

#[test]
fn simsiam_targets_get_no_gradient() {
    let tape = Tape::new();
    let p = tape.param("p", unit_rows(4, 3, 1));
    let z = tape.param("z", unit_rows(4, 3, 2));
    let l = simsiam(p, p, z, z).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(z).data().iter().all(|&v| v == 0.0));
    assert!(g.wrt(p).data().iter().any(|&v| v != 0.0));
}

#[test]
fn barlow_twins_is_zero_for_decorrelated_identical_batches() {
    // columns are centered, unit variance and mutually orthogonal
    let z = Tensor::new(vec![4, 2], vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]).unwrap();
    let l = eval(|t| barlow_twins(t.constant(z.clone()), t.constant(z.clone()), BARLOW_LAMBDA_OFF));
    assert!(l.abs() < 1e-12);
}

#[test]
fn barlow_twins_rejects_constant_dimension() {
    let z = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let v = tape.constant(z);
    assert!(barlow_twins(v, v, BARLOW_LAMBDA_OFF).is_err());
}

fn regression(pred: Vec<f64>, target: Vec<f64>, kind: DownstreamLoss) -> f64 {
    let n = pred.len();
    let y = Tensor::new(vec![n, 1], target).unwrap();
    eval(|t| downstream_loss(kind, t.constant(Tensor::new(vec![n, 1], pred.clone()).unwrap()), Target::Regression(&y), None))
}

fn classification(logits: Vec<f64>, k: usize, y: &[usize], kind: DownstreamLoss, w: Option<&[f64]>) -> f64 {
    let n = y.len();
    eval(|t| downstream_loss(kind, t.constant(Tensor::new(vec![n, k], logits.clone()).unwrap()), Target::Classes(y), w))
}

#[test]
fn regression_losses_match_hand_values() {
    assert_eq!(regression(vec![1.0, 2.0], vec![1.0, 2.0], DownstreamLoss::Mse), 0.0);
    assert_eq!(regression(vec![3.0, 4.0], vec![1.0, 2.0], DownstreamLoss::L1), 2.0);
    assert!((regression(vec![0.5], vec![0.0], DownstreamLoss::Huber) - 0.125).abs() < 1e-12);
    // linear zone: |d| - delta / 2
    assert!((regression(vec![3.0], vec![0.0], DownstreamLoss::Huber) - 2.5).abs() < 1e-12);
}

#[test]
fn classification_losses_match_hand_values() {
    let k = 4;
    let ce = classification(vec![0.0; 8], k, &[0, 3], DownstreamLoss::Ce, None);
    assert!((ce - (k as f64).ln()).abs() < 1e-12);

    let logits = vec![2.0, 0.0, 0.0, 1.0];
    let p0 = 2f64.exp() / (2f64.exp() + 1.0);
    let p1 = 1f64.exp() / (1.0 + 1f64.exp());
    let ce = classification(logits.clone(), 2, &[0, 1], DownstreamLoss::Ce, None);
    assert!((ce - 0.5 * (-p0.ln() - p1.ln())).abs() < 1e-12);

    let focal = classification(logits.clone(), 2, &[0, 1], DownstreamLoss::Focal, None);
    let fl = |p: f64| -(1.0 - p).powi(2) * p.ln();
    assert!((focal - 0.5 * (fl(p0) + fl(p1))).abs() < 1e-12);

    let bce = classification(logits, 2, &[0, 1], DownstreamLoss::BalancedCe, Some(&[1.5, 0.5]));
    assert!((bce - 0.5 * (-1.5 * p0.ln() - 0.5 * p1.ln())).abs() < 1e-12);
}

#[test]
fn class_weights_are_inverse_frequency_with_unit_mean() {
    let w = balanced_class_weights(&[0, 0, 0, 1, 2, 2], 4).unwrap();
    // inverse counts 1/3, 1, 1/2 with mean 11/18; class 3 is absent
    let scale = 18.0 / 11.0;
    let expected = [scale / 3.0, scale, scale / 2.0, 0.0];
    for (a, b) in w.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(balanced_class_weights(&[5], 3).is_err());
}

#[test]
fn losses_reject_mismatched_targets() {
    let tape = Tape::new();
    let pred = tape.constant(Tensor::<f64>::zeros(vec![2, 3]));
    let y = Tensor::zeros(vec![2, 2]);
    assert!(downstream_loss(DownstreamLoss::Mse, pred, Target::Regression(&y), None).is_err());
    assert!(downstream_loss(DownstreamLoss::Ce, pred, Target::Classes(&[0, 3]), None).is_err());
    assert!(downstream_loss(DownstreamLoss::Ce, pred, Target::Regression(&y), None).is_err());
}

#[test]
fn multitask_trivial_combinations() {
    let fixed = eval(|t| {
        combine_multitask(
            t.scalar(2.0),
            t.scalar(4.0),
            MultiTaskWeights::Fixed { lambda_c: 0.5, lambda_m: 0.5 },
        )
    });
    assert_eq!(fixed, 3.0);
    let unc = eval(|t| {
        combine_multitask(
            t.scalar(2.0),
            t.scalar(4.0),
            MultiTaskWeights::Uncertainty { s_c: t.scalar(0.0), s_m: t.scalar(0.0) },
        )
    });
    assert_eq!(unc, 6.0);
    let tape = Tape::new();
    let bad = combine_multitask(
        tape.scalar(f64::NAN),
        tape.scalar(1.0),
        MultiTaskWeights::Fixed { lambda_c: 0.5, lambda_m: 0.5 },
    );
    assert!(bad.unwrap_err().is_numeric());
    let neg = combine_multitask(
        tape.scalar(1.0),
        tape.scalar(1.0),
        MultiTaskWeights::Fixed { lambda_c: -1.0, lambda_m: 0.5 },
    );
    assert!(neg.is_err());
}

proptest! {
    #[test]
    fn info_nce_is_permutation_invariant(seed in 0u64..1000, n in 2usize..7) {
        let zi = unit_rows(n, 3, seed);
        let zt = unit_rows(n, 3, seed + 7);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1);
        let permute = |z: &Tensor<f64>| {
            let data: Vec<f64> = perm.iter().flat_map(|&i| z.data()[i * 3..i * 3 + 3].to_vec()).collect();
            Tensor::new(vec![n, 3], data).unwrap()
        };
        let (pi, pt) = (permute(&zi), permute(&zt));
        let a = eval(|t| info_nce(t.constant(zi.clone()), t.constant(zt.clone()), 0.1));
        let b = eval(|t| info_nce(t.constant(pi.clone()), t.constant(pt.clone()), 0.1));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn info_nce_falls_as_a_positive_similarity_grows(
        m in prop::collection::vec(-2.0f64..2.0, 16),
        k in 0usize..4,
        bump in 0.01f64..3.0,
    ) {
        // with z_i = I the similarity matrix is z_t itself (tau = 1)
        let eye = Tensor::<f64>::eye(4);
        let before = Tensor::new(vec![4, 4], m.clone()).unwrap();
        let mut raised = m.clone();
        raised[k * 4 + k] += bump;
        let after = Tensor::new(vec![4, 4], raised).unwrap();
        let a = eval(|t| info_nce(t.constant(eye.clone()), t.constant(before.clone()), 1.0));
        let b = eval(|t| info_nce(t.constant(eye.clone()), t.constant(after.clone()), 1.0));
        prop_assert!(b < a);
        prop_assert!((a - info_nce_oracle(&eye, &before, 1.0)).abs() < 1e-10);
    }

    #[test]
    fn uncertainty_gradient_matches_closed_form(l_c in 0.0f64..5.0, l_m in 0.0f64..5.0, s_c in -3.0f64..3.0, s_m in -3.0f64..3.0) {
        let tape = Tape::new();
        let sc = tape.param("s_c", Tensor::scalar(s_c));
        let sm = tape.param("s_m", Tensor::scalar(s_m));
        let l = combine_multitask(tape.scalar(l_c), tape.scalar(l_m), MultiTaskWeights::Uncertainty { s_c: sc, s_m: sm }).unwrap();
        let expected = (-s_c).exp() * l_c + s_c + (-s_m).exp() * l_m + s_m;
        prop_assert!((l.item().unwrap() - expected).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        prop_assert!((g.wrt(sc).item().unwrap() - (1.0 - (-s_c).exp() * l_c)).abs() < 1e-12);
        prop_assert!((g.wrt(sm).item().unwrap() - (1.0 - (-s_m).exp() * l_m)).abs() < 1e-12);
    }
}
