use proptest::prelude::*;
use savt::attention::{attend, attend_grad_logits, multi_head_attend, AttentionConfig, AttentionWeights};
use savt::normalizers::{normalize, normalize_rows, support_stats, Normalizer};
use savt::numerics::{Rng, Tensor};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn random_weights(d: usize, rng: &mut Rng) -> AttentionWeights<f64> {
    let mut w = AttentionWeights::init(d, 0.5, rng);
    for b in [&mut w.b_q, &mut w.b_k, &mut w.b_v, &mut w.b_o] {
        *b = Some((0..d).map(|_| 0.1 * rng.normal()).collect());
    }
    w
}

/// Multi-head attention assembled with explicit loops.
fn loop_oracle(cfg: &AttentionConfig, w: &AttentionWeights<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let (t, d) = (x.dim(0), cfg.d_model);
    let dh = cfg.d_head();
    let proj = |m: &Tensor<f64>, b: &Option<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| {
                (0..d)
                    .map(|o| {
                        let mut s = 0.0;
                        for c in 0..d {
                            s += x.at(&[i, c]) * m.at(&[c, o]);
                        }
                        s + b.as_ref().map_or(0.0, |b| b[o])
                    })
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (proj(&w.w_q, &w.b_q), proj(&w.w_k, &w.b_k), proj(&w.w_v, &w.b_v));
    let mut merged = vec![vec![0.0; d]; t];
    for h in 0..cfg.n_heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = normalize(cfg.normalizer, &logits).unwrap().into_p();
            for c in 0..dh {
                merged[i][h * dh + c] = (0..t).map(|j| a[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(t * d);
    for row in &merged {
        for o in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += row[c] * w.w_o.at(&[c, o]);
            }
            out.push(s + w.b_o.as_ref().map_or(0.0, |b| b[o]));
        }
    }
    out
}

#[test]
fn multi_head_matches_loop_oracle() {
    let mut rng = Rng::new(21);
    for normalizer in [Normalizer::Softmax, Normalizer::Entmax15] {
        let cfg = AttentionConfig::new(8, 2, normalizer).unwrap();
        let w = random_weights(8, &mut rng);
        let x = random(&[4, 8], &mut rng);
        let (y, a) = multi_head_attend(&cfg, &w, &x).unwrap();
        assert_eq!(a.shape(), &[2, 4, 4]);
        for (got, want) in y.data().iter().zip(loop_oracle(&cfg, &w, &x)) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn attend_examples() {
    let mut rng = Rng::new(4);
    for normalizer in [Normalizer::Softmax, Normalizer::Entmax15] {
        let cfg = AttentionConfig::new(3, 1, normalizer).unwrap();
        let v = random(&[1, 3], &mut rng);
        let (y, a) = attend(&cfg, &random(&[1, 3], &mut rng), &random(&[1, 3], &mut rng), &v).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(y, v);
    }
    // Queries orthogonal to every key.
    let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
    let k = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0]]).unwrap();
    let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
    let cfg = |n| AttentionConfig::new(2, 1, n).unwrap();
    let (ys, as_) = attend(&cfg(Normalizer::Softmax), &q, &k, &v).unwrap();
    let (ye, ae) = attend(&cfg(Normalizer::Entmax15), &q, &k, &v).unwrap();
    assert_eq!((&ys, &as_), (&ye, &ae));
    assert_eq!(ys.row(0), &[2.0, 4.0]);

    // Logit gap 3 > 2 after scaling: exact one-hot.
    let g = 3.0 * 2f64.sqrt();
    let q = Tensor::from_rows(&[vec![g, 0.0], vec![0.0, g]]).unwrap();
    let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (y, a) = attend(&cfg(Normalizer::Entmax15), &q, &k, &v).unwrap();
    assert_eq!(a.data(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(y, v);
}

#[test]
fn zero_query_key_identity_value_gives_column_mean() {
    let d = 4;
    let mut w = AttentionWeights::<f64>::zeros(d);
    w.w_v = Tensor::eye(d);
    w.w_o = Tensor::eye(d);
    let x = random(&[5, d], &mut Rng::new(8));
    let mean = x.mean_axis(0).unwrap();
    for normalizer in [Normalizer::Softmax, Normalizer::Entmax15] {
        let cfg = AttentionConfig::new(d, 2, normalizer).unwrap();
        let (y, _) = multi_head_attend(&cfg, &w, &x).unwrap();
        for row in y.rows() {
            for (a, b) in row.iter().zip(mean.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn grad_logits_matches_finite_differences() {
    let mut rng = Rng::new(17);
    let cfg = AttentionConfig::new(4, 1, Normalizer::Entmax15).unwrap();
    let mut checked = 0;
    while checked < 10 {
        let logits = random(&[3, 3], &mut rng);
        let v = random(&[3, 4], &mut rng);
        let dy = random(&[3, 4], &mut rng);
        let (_, base) = normalize_rows(Normalizer::Entmax15, &logits).unwrap();
        let loss = |l: &Tensor<f64>| {
            let (a, r) = normalize_rows(Normalizer::Entmax15, l).unwrap();
            let y = a.matmul(&v).unwrap();
            let stable = r.iter().zip(&base).all(|(x, y)| x.support() == y.support());
            (y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>(), stable)
        };
        let analytic = attend_grad_logits(&cfg, &logits, &v, &dy).unwrap();
        let mut ok = true;
        let mut worst = 0.0f64;
        for i in 0..9 {
            let (mut lp, mut lm) = (logits.clone(), logits.clone());
            lp.data_mut()[i] += 1e-6;
            lm.data_mut()[i] -= 1e-6;
            let ((fp, sp), (fm, sm)) = (loss(&lp), loss(&lm));
            ok &= sp && sm;
            worst = worst.max(((fp - fm) / 2e-6 - analytic.data()[i]).abs());
        }
        if ok {
            assert!(worst < 1e-5, "{worst}");
            checked += 1;
        }
    }
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    x.gather_rows(perm).unwrap()
}

proptest! {
    #[test]
    fn multi_head_is_permutation_equivariant(t in 1usize..8, seed in any::<u64>(), entmax in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let normalizer = if entmax { Normalizer::Entmax15 } else { Normalizer::Softmax };
        let cfg = AttentionConfig::new(6, 3, normalizer).unwrap();
        let w = random_weights(6, &mut rng);
        let x = random(&[t, 6], &mut rng);
        let mut perm: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut perm);
        let (y, _) = multi_head_attend(&cfg, &w, &x).unwrap();
        let (yp, _) = multi_head_attend(&cfg, &w, &permute_rows(&x, &perm)).unwrap();
        let want = permute_rows(&y, &perm);
        for (a, b) in yp.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_on_simplex(t in 1usize..10, scale in prop::sample::select(vec![1.0, 8.0]), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        for normalizer in [Normalizer::Softmax, Normalizer::Entmax15] {
            let cfg = AttentionConfig::new(4, 1, normalizer).unwrap();
            let q = random(&[t, 4], &mut rng).scale(scale);
            let k = random(&[t, 4], &mut rng);
            let (_, a) = attend(&cfg, &q, &k, &random(&[t, 4], &mut rng)).unwrap();
            for row in a.rows() {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn equal_logit_rows_agree_exactly(t in 1usize..10, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = random(&[t, 3], &mut rng);
        let v = random(&[t, 3], &mut rng);
        let q = Tensor::zeros(&[t, 3]);
        let soft = attend(&AttentionConfig::new(3, 1, Normalizer::Softmax).unwrap(), &q, &k, &v).unwrap();
        let ent = attend(&AttentionConfig::new(3, 1, Normalizer::Entmax15).unwrap(), &q, &k, &v).unwrap();
        prop_assert_eq!(soft, ent);
    }
}

#[test]
fn sharpened_entmax_is_sparse_softmax_dense() {
    let mut rng = Rng::new(12);
    let mut rows = Vec::new();
    for normalizer in [Normalizer::Softmax, Normalizer::Entmax15] {
        let cfg = AttentionConfig::new(8, 1, normalizer).unwrap();
        let mut r = Rng::new(99);
        let q = random(&[16, 8], &mut r).scale(8.0);
        let (_, a) = attend(&cfg, &q, &random(&[16, 8], &mut r), &random(&[16, 8], &mut rng)).unwrap();
        rows.push(support_stats(&a).unwrap().mean);
    }
    assert_eq!(rows[0], 1.0);
    assert!(rows[1] < 1.0);
}
