mod oracles;

use lipcde_core::metrics::{covsim, rmse};
use lipcde_core::nn::ParamSet;
use lipcde_core::outcome::{
    decode_outcomes, percentile, stabilized_step_weight, truncate_weights, weighted_mse, Decoder,
};
use lipcde_core::tape::Mat;
use oracles::{covsim_eigen, lstm_step};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn decoder_matches_two_step_unroll() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ps = ParamSet::new();
    let dec = Decoder::new(&mut ps, &mut rng, 2, [3, 2]);
    for id in ps.ids().collect::<Vec<_>>() {
        for v in ps.get_mut(id).iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let latent = Mat::from_row_slice(2, 2, &[0.4, -0.9, 1.2, 0.3]);
    let got = decode_outcomes(&dec, &ps, &latent).unwrap();
    assert_eq!(got.len(), 2);

    let (mut h1, mut c1) = (vec![0.0; 3], vec![0.0; 3]);
    let (mut h2, mut c2) = (vec![0.0; 2], vec![0.0; 2]);
    for t in 0..2 {
        let x = [latent[(t, 0)], latent[(t, 1)]];
        (h1, c1) = lstm_step(ps.get(dec.lstm1.wx), ps.get(dec.lstm1.wh), ps.get(dec.lstm1.bias), &x, &h1, &c1);
        (h2, c2) = lstm_step(ps.get(dec.lstm2.wx), ps.get(dec.lstm2.wh), ps.get(dec.lstm2.bias), &h1, &h2, &c2);
        let w = ps.get(dec.head.weight);
        let y = ps.get(dec.head.bias)[(0, 0)] + h2[0] * w[(0, 0)] + h2[1] * w[(1, 0)];
        assert!((got[t] - y).abs() <= 1e-8);
    }
    assert!(decode_outcomes(&dec, &ps, &Mat::zeros(2, 3)).is_err());
}

#[test]
fn covsim_matches_eigen_route_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a = Mat::from_fn(50, 5, |_, _| rng.gen_range(-1.0..1.0));
        let b = Mat::from_fn(50, 5, |_, _| rng.gen_range(-1.0..1.0));
        let got = covsim(&a, &b).unwrap();
        let want = covsim_eigen(&a, &b);
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }
}

#[test]
fn covsim_identities() {
    let u = Mat::from_fn(30, 1, |r, _| (r as f64 * 0.37).sin());
    let v = Mat::from_fn(1, 4, |_, c| c as f64 - 1.3);
    let rank1 = &u * &v;
    assert!((covsim(&rank1, &rank1).unwrap() - 1.0).abs() <= 1e-8);
    // disjoint row supports give orthogonal column spaces
    let a = Mat::from_fn(8, 2, |r, c| if r < 4 { (r + c) as f64 + 1.0 } else { 0.0 });
    let b = Mat::from_fn(8, 3, |r, c| if r >= 4 { (r * c) as f64 - 2.0 } else { 0.0 });
    assert!(covsim(&a, &b).unwrap().abs() <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covsim_is_symmetric_and_bounded(seed in 0u64..10_000, n in 3usize..20, ca in 1usize..5, cb in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::from_fn(n, ca, |_, _| rng.gen_range(-2.0..2.0));
        let b = Mat::from_fn(n, cb, |_, _| rng.gen_range(-2.0..2.0));
        let ab = covsim(&a, &b).unwrap();
        let ba = covsim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-10);
        prop_assert!((0.0..=1.0 + 1e-10).contains(&ab));
    }

    #[test]
    fn unit_weights_reduce_to_per_patient_mse(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..6)).collect();
        let y: Vec<Vec<f64>> = lens.iter().map(|l| (0..*l).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let p: Vec<Vec<f64>> = lens.iter().map(|l| (0..*l).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let s: Vec<Vec<bool>> = lens.iter().map(|l| vec![true; *l]).collect();
        let got = weighted_mse(&p, &y, &s, &vec![1.0; n]).unwrap();
        let mut want = 0.0;
        for i in 0..n {
            want += p[i].iter().zip(&y[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / lens[i] as f64;
        }
        prop_assert!((got - want / n as f64).abs() <= 1e-12);
        prop_assert!(rmse(&p, &y, &s).unwrap() >= 0.0);
    }

    #[test]
    fn truncated_weights_stay_within_percentiles(ws in proptest::collection::vec(1e-3f64..1e3, 2..40)) {
        let out = truncate_weights(&ws, 1.0, 99.0);
        let (lo, hi) = (percentile(&ws, 1.0), percentile(&ws, 99.0));
        prop_assert!(out.iter().all(|w| *w >= lo && *w <= hi));
    }

    #[test]
    fn step_weight_is_one_at_the_marginals(m in proptest::collection::vec(0.01f64..0.99, 1..4), bits in 0u8..16) {
        let a: Vec<f64> = (0..m.len()).map(|j| f64::from((bits >> j) & 1)).collect();
        prop_assert!((stabilized_step_weight(&m, &m, &a) - 1.0).abs() <= 1e-12);
    }
}
