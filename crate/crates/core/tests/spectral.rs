mod oracles;

use lipcde_core::nn::ParamSet;
use lipcde_core::spectral::{
    gaussian_filter_response, spectral_norm_project, Bands, BoundaryBranch, FilterKind, LipschitzLinear,
    SpectralConfig,
};
use lipcde_core::tape::{Mat, Tape};
use oracles::{centered_dft, inverse_centered_at, spectral_norm, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gaussian_pair_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let d = rng.gen_range(0.0..200.0);
        let d0 = rng.gen_range(1e-3..100.0);
        let h = gaussian_filter_response(d, d0, FilterKind::High).unwrap();
        let l = gaussian_filter_response(d, d0, FilterKind::Low).unwrap();
        assert!((h + l - 1.0).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&l));
    }
}

#[test]
fn projection_agrees_with_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let r = rng.gen_range(1..=64);
        let c = rng.gen_range(1..=64);
        let scale = rng.gen_range(0.01..10.0);
        let w = Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0) * scale);
        let before = spectral_norm(&w);
        let p = spectral_norm_project(&w, 3).unwrap();
        let after = spectral_norm(&p);
        assert!(after <= 1.0 + 1e-6, "{r}x{c}: {after}");
        if before <= 1.0 {
            assert!((&p - &w).amax() <= 1e-12);
        } else {
            assert!((after - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn projected_head_is_empirically_one_lipschitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let mut head = LipschitzLinear::new(&mut ps, &mut rng, "head", 12, 4);
    *ps.get_mut(head.weight) *= 25.0;
    head.project(&mut ps, 3);

    let n = 10_000;
    let xs = Mat::from_fn(n, 12, |_, _| rng.gen_range(-3.0..3.0));
    let ys = Mat::from_fn(n, 12, |_, _| rng.gen_range(-3.0..3.0));
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape);
    let xv = tape.constant(xs.clone());
    let yv = tape.constant(ys.clone());
    let fx = head.forward(&mut tape, &p, xv);
    let fy = head.forward(&mut tape, &p, yv);
    let (fx, fy) = (tape.value(fx).clone(), tape.value(fy).clone());
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let num = (fx.row(i) - fy.row(i)).norm();
        let den = (xs.row(i) - ys.row(i)).norm();
        worst = worst.max(num / den);
    }
    assert!(worst <= 1.0 + 1e-4, "ratio {worst}");
}

/// Straight-line boundary branch: naive DFT, filtering, kernel-3 spectral
/// convolution, inverse transform, tanh RNN and the linear head.
fn reference_branch(ps: &ParamSet, br: &BoundaryBranch, hist: &[Vec<f64>], causal: bool, hidden: usize) -> Vec<f64> {
    let c = hist[0].len();
    let k = ps.get(br.conv_weight);
    let bh = ps.get(br.conv_bias_high);
    let bl = ps.get(br.conv_bias_low);
    let wx = ps.get(br.rnn.wx);
    let wh = ps.get(br.rnn.wh);
    let rb = ps.get(br.rnn.bias);
    let hw = ps.get(br.head.weight);
    let hb = ps.get(br.head.bias);

    let conv = |prefix: &[Vec<f64>]| -> Vec<Vec<C64>> {
        let n = prefix.len();
        let s = centered_dft(prefix);
        let d0 = n as f64 / 8.0;
        let mut y = vec![vec![C64::default(); c]; n];
        for (f, kind) in [FilterKind::High, FilterKind::Low].into_iter().enumerate() {
            let g = |j: usize| gaussian_filter_response((j as f64 - (n / 2) as f64).abs(), d0, kind).unwrap();
            let bias = if f == 0 { bh } else { bl };
            for j in 0..n {
                for oc in 0..c {
                    let mut acc = C64::new(bias[(0, oc)], bias[(0, c + oc)]);
                    for o in 0..3 {
                        let src = j as isize + o as isize - 1;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            let v = s[src][ch].scale(g(src));
                            let row_re = ((f * 3 + o) * 2) * c + ch;
                            let row_im = row_re + c;
                            acc.re += v.re * k[(row_re, oc)] + v.im * k[(row_im, oc)];
                            acc.im += v.re * k[(row_re, c + oc)] + v.im * k[(row_im, c + oc)];
                        }
                    }
                    y[j][oc] = y[j][oc].add(acc);
                }
            }
        }
        y
    };

    let full = if causal { None } else { Some(conv(hist)) };
    let mut h = vec![0.0; hidden];
    let mut out = Vec::new();
    for t in 0..hist.len() {
        let x = match &full {
            Some(y) => inverse_centered_at(y, t),
            None => inverse_centered_at(&conv(&hist[..=t]), t),
        };
        let mut next = vec![0.0; hidden];
        for u in 0..hidden {
            let mut s = rb[(0, u)];
            for i in 0..c {
                s += x[i] * wx[(i, u)];
            }
            for i in 0..hidden {
                s += h[i] * wh[(i, u)];
            }
            next[u] = s.tanh();
        }
        h = next;
        let mut z = hb[(0, 0)];
        for i in 0..hidden {
            z += h[i] * hw[(i, 0)];
        }
        out.push(z);
    }
    out
}

#[test]
fn boundary_branch_matches_reference_on_pinned_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for causal in [true, false] {
        let cfg = SpectralConfig {
            hidden: 3,
            z_dim: 1,
            causal,
            ..SpectralConfig::default()
        };
        let mut ps = ParamSet::new();
        let br = BoundaryBranch::new(&mut ps, &mut rng, 2, &cfg, Bands::BOTH);
        for id in ps.ids().collect::<Vec<_>>() {
            let m = ps.get_mut(id);
            for v in m.iter_mut() {
                *v = rng.gen_range(-0.8..0.8);
            }
        }
        let hist = vec![vec![0.3, 1.0], vec![-0.2, 0.0], vec![0.5, 1.0], vec![0.1, 1.0]];
        let got = br
            .forward_single(&ps, &Mat::from_fn(4, 2, |r, c| hist[r][c]), &cfg)
            .unwrap();
        let want = reference_branch(&ps, &br, &hist, causal, 3);
        for t in 0..4 {
            assert!((got.z_hat[(t, 0)] - want[t]).abs() <= 1e-8, "causal={causal} t={t}");
        }
    }
}

