use proptest::prelude::*;
use savt::numerics::{cosine_similarity, gelu, gelu_scalar, layer_norm, Rng, Tensor};

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a.at(&[i, l]) * b.at(&[l, j]);
            }
            out[i * m + j] = s;
        }
    }
    out
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn matmul_hand_cases() {
    let i2 = Tensor::<f64>::eye(2);
    assert_eq!(i2.matmul(&i2).unwrap(), i2);
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(7);
    let a = random(&[7, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let got = a.matmul(&b).unwrap();
    for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 2]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

proptest! {
    #[test]
    fn matmul_oracle_up_to_16(n in 1usize..=16, k in 1usize..=16, m in 1usize..=16, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = random(&[n, k], &mut rng);
        let b = random(&[k, m], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(a.matmul_t(&b.transpose().unwrap()).unwrap(), got);
    }

    #[test]
    fn matmul_is_associative(n in 1usize..6, k in 1usize..6, m in 1usize..6, p in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (random(&[n, k], &mut rng), random(&[k, m], &mut rng), random(&[m, p], &mut rng));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn ops_are_pure(seed in any::<u64>()) {
        let x = random(&[3, 4], &mut Rng::new(seed));
        let y = random(&[3, 4], &mut Rng::new(seed));
        prop_assert_eq!(&x, &y);
        let g = vec![1.0; 4];
        let b = vec![0.0; 4];
        prop_assert_eq!(layer_norm(&x, &g, &b, 1e-6).unwrap(), layer_norm(&y, &g, &b, 1e-6).unwrap());
        prop_assert_eq!(gelu(&x), gelu(&y));
        prop_assert_eq!(x.matmul(&x.transpose().unwrap()).unwrap(), y.matmul(&y.transpose().unwrap()).unwrap());
    }
}

#[test]
fn layer_norm_examples() {
    let x = Tensor::from_vec(vec![3.0; 5]);
    let out = layer_norm(&x, &[1.0; 5], &[0.0; 5], 1e-6).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    let x = Tensor::from_vec(vec![1.0, -1.0]);
    let out = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-300).unwrap();
    assert_eq!(out.data(), &[1.0, -1.0]);
    assert!(layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-6).is_err());
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let mut rng = Rng::new(3);
    let x = random(&[4, 8], &mut rng);
    let gamma: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let beta: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let eps = 1e-6;
    let got = layer_norm(&x, &gamma, &beta, eps).unwrap();
    for r in 0..4 {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let want = (row[j] - mean) / (var + eps).sqrt() * gamma[j] + beta[j];
            assert!((got.row(r)[j] - want).abs() < 1e-12);
        }
    }
}

/// Φ(x) by composite Simpson quadrature of the Gaussian density from 0.
fn normal_cdf_quadrature(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(0.0) + phi(x);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * phi(i as f64 * h);
    }
    0.5 + s * h / 3.0
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    assert!((gelu_scalar(40.0f64) - 40.0).abs() < 1e-9);
    let want = normal_cdf_quadrature(1.0);
    assert!((gelu_scalar(1.0f64) - want).abs() < 1e-9);
    assert!((gelu_scalar(-1.0f64) + 1.0 - want).abs() < 1e-9);
}

#[test]
fn tensor_plumbing() {
    let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
    let p = x.permute(&[2, 0, 1]).unwrap();
    assert_eq!(p.shape(), &[4, 2, 3]);
    assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
    assert_eq!(x.reshape(&[6, 4]).unwrap().row(5), x.data()[20..24].to_vec().as_slice());
    assert!(x.reshape(&[5, 5]).is_err());

    let m = Tensor::from_rows(&[vec![1.0, 5.0, 5.0], vec![-2.0, -3.0, -1.0]]).unwrap();
    assert_eq!(m.sum_axis(0).unwrap().data(), &[-1.0, 2.0, 4.0]);
    assert_eq!(m.mean_axis(1).unwrap().data(), &[11.0 / 3.0, -2.0]);
    assert_eq!(m.max_axis(1).unwrap().data(), &[5.0, -1.0]);
    assert_eq!(m.argmax_axis(1).unwrap(), vec![1, 2]);
    let c = Tensor::concat(&[&m, &m], 0).unwrap();
    assert_eq!(c.shape(), &[4, 3]);
    assert_eq!(c.gather_rows(&[3, 0]).unwrap().row(0), m.row(1));
    assert_eq!(m.add(&m).unwrap(), m.scale(2.0));
    assert_eq!(m.mul(&m).unwrap().at(&[1, 1]), 9.0);
}

#[test]
fn cosine_similarity_cases() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let s = cosine_similarity(&a, &b).unwrap();
    assert_eq!(s.shape(), &[2, 3]);
    assert_eq!(s.row(0), &[1.0, -1.0, 0.0]);
    assert_eq!(s.row(1), &[0.0, 0.0, 0.0]);
}
