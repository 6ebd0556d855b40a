use proptest::prelude::*;
use savt::acceptance::{pca_oracle_projection, pearson, pib_brute_force, separable_blobs, spectral_features};
use savt::analysis::{
    cls_patch_similarity, layer_sweep, layer_sweep_features, mean_iou, pca_rgb, pib, rmse, top1, train_linear_probe,
    BoxAnnotation, DenseSample, ProbeHyper, ProbeTargets, ProbeTask,
};
use savt::data::scenes;
use savt::normalizers::Normalizer;
use savt::numerics::{Rng, Tensor};
use savt::vit::{LayerFeatures, TokenLayout, VitConfig, VitModel};
use savt::Error;

const LAYOUT: TokenLayout = TokenLayout {
    n_registers: 0,
    grid: 3,
    patch_size: 4,
};

fn features_from(layers: Vec<Tensor<f64>>) -> LayerFeatures<f64> {
    let fin = layers[0].clone();
    LayerFeatures::new(layers, fin, LAYOUT).unwrap()
}

fn random_features(n_layers: usize, d: usize, rng: &mut Rng) -> LayerFeatures<f64> {
    features_from((0..n_layers).map(|_| Tensor::from_fn(&[10, d], |_| rng.normal())).collect())
}

fn whole_box(id: &str) -> BoxAnnotation {
    BoxAnnotation {
        image_id: id.into(),
        x0: 0,
        y0: 0,
        x1: 4,
        y1: 4,
    }
}

/// CLS = e0; `target` patch = e0; every other token orthogonal to e0.
fn planted(target: usize, rng: &mut Rng) -> LayerFeatures<f64> {
    let mut x = Tensor::from_fn(&[10, 5], |i| if i % 5 == 0 { 0.0 } else { rng.normal() });
    x.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0]);
    x.row_mut(1 + target).copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0]);
    features_from(vec![x])
}

#[test]
fn pib_planted_inside_and_outside() {
    let mut rng = Rng::new(1);
    // Box covers only the top-left patch (centre (2, 2)).
    let inside = vec![("a".to_string(), planted(0, &mut rng)), ("b".to_string(), planted(0, &mut rng))];
    let boxes = vec![whole_box("a"), whole_box("b")];
    let r = pib(&inside, &boxes).unwrap();
    assert_eq!((r.layers[0].hits, r.layers[0].fraction), (2, 1.0));
    assert_eq!(r.layers[0].argmax, vec![(0, 0), (0, 0)]);

    let outside = vec![("a".to_string(), planted(8, &mut rng))];
    assert_eq!(pib(&outside, &boxes).unwrap().layers[0].fraction, 0.0);

    let err = pib(&outside, &[whole_box("zzz")]).unwrap_err();
    assert!(matches!(err, Error::MissingAnnotation { ref image_id } if image_id == "a"));
}

#[test]
fn pib_ties_go_to_lowest_index() {
    let x = Tensor::from_fn(&[10, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    let r = pib(&[("t".to_string(), features_from(vec![x]))], &[whole_box("t")]).unwrap();
    assert_eq!(r.layers[0].argmax, vec![(0, 0)]);
    assert_eq!(r.layers[0].hits, 1);
}

#[test]
fn box_validation_and_centre_rule() {
    assert!(whole_box("a").validate(12).is_ok());
    let empty = BoxAnnotation { x1: 0, ..whole_box("a") };
    assert!(empty.validate(12).is_err());
    let outside = BoxAnnotation { x1: 13, ..whole_box("a") };
    assert!(outside.validate(12).is_err());
    // A box ending exactly at the centre does not contain it.
    let b = BoxAnnotation { x1: 2, ..whole_box("a") };
    assert!(!b.contains_center_of((0, 0, 4, 4)));
    assert!(whole_box("a").contains_center_of((0, 0, 4, 4)));
}

#[test]
fn similarity_map_cases() {
    let mut x = Tensor::from_fn(&[10, 3], |i| if i % 3 == 0 { 0.0 } else { 1.0 + (i % 7) as f64 });
    x.row_mut(0).copy_from_slice(&[2.0, 0.0, 0.0]);
    x.row_mut(1).copy_from_slice(&[5.0, 0.0, 0.0]);
    x.row_mut(9).copy_from_slice(&[-1.0, 0.0, 0.0]);
    let f = features_from(vec![x]);
    let s = cls_patch_similarity(&f, 1).unwrap();
    assert_eq!(s.shape(), &[3, 3]);
    assert!((s.at(&[0, 0]) - 1.0).abs() < 1e-15);
    assert!((s.at(&[2, 2]) + 1.0).abs() < 1e-15);
    assert!((1..8).all(|i| s.data()[i].abs() < 1e-12));
    assert!(cls_patch_similarity(&f, 2).is_err());
}

#[test]
fn pib_matches_brute_force() {
    let mut rng = Rng::new(8);
    let items: Vec<_> = (0..32).map(|i| (format!("i{i}"), random_features(3, 6, &mut rng))).collect();
    let boxes: Vec<_> = (0..32)
        .map(|i| BoxAnnotation {
            image_id: format!("i{i}"),
            x0: rng.below(6),
            y0: rng.below(6),
            x1: 6 + rng.below(6) + 1,
            y1: 6 + rng.below(6) + 1,
        })
        .collect();
    let fast: Vec<usize> = pib(&items, &boxes).unwrap().layers.iter().map(|l| l.hits).collect();
    assert_eq!(fast, pib_brute_force(&items, &boxes));
}

proptest! {
    #[test]
    fn pib_invariant_to_positive_rescaling(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = Rng::new(seed);
        let items: Vec<_> = (0..6).map(|i| (format!("i{i}"), random_features(2, 4, &mut rng))).collect();
        let scaled: Vec<_> = items
            .iter()
            .enumerate()
            .map(|(k, (id, f))| {
                let s = scale * (1.0 + k as f64);
                let layers = (1..=2).map(|l| f.layer(l).unwrap().scale(s)).collect();
                (id.clone(), features_from(layers))
            })
            .collect();
        let boxes: Vec<_> = (0..6).map(|i| BoxAnnotation { x1: 8, y1: 8, ..whole_box(&format!("i{i}")) }).collect();
        let a = pib(&items, &boxes).unwrap();
        let b = pib(&scaled, &boxes).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            prop_assert_eq!(&x.argmax, &y.argmax);
            prop_assert_eq!(x.hits, y.hits);
        }
    }

    #[test]
    fn pca_rgb_invariant_to_feature_permutation(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = spectral_features(16, 6, &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let xp = Tensor::from_fn(&[16, 6], |i| x.row(i / 6)[perm[i % 6]]);
        prop_assert_eq!(pca_rgb(&x, (4, 4)).unwrap(), pca_rgb(&xp, (4, 4)).unwrap());
    }

    #[test]
    fn pca_rgb_in_unit_cube(seed in any::<u64>()) {
        let x = spectral_features(12, 5, &mut Rng::new(seed));
        let img = pca_rgb(&x, (3, 4)).unwrap();
        prop_assert_eq!(img.shape(), &[3, 4, 3]);
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn pca_recovers_axis_aligned_coordinates() {
    // Orthogonal ±1 columns with distinct scales: diagonal covariance.
    let walsh = |i: usize, k: usize| if (i >> k) & 1 == 0 { 1.0 } else { -1.0 };
    let x = Tensor::from_fn(&[8, 3], |i| {
        let (r, c) = (i / 3, i % 3);
        (3 - c) as f64 * walsh(r, c) + 0.25 * (c as f64)
    });
    let img = pca_rgb(&x, (2, 4)).unwrap();
    for ch in 0..3 {
        let got: Vec<f64> = (0..8).map(|i| img.data()[i * 3 + ch]).collect();
        let want: Vec<f64> = (0..8).map(|i| x.row(i)[ch]).collect();
        assert!((pearson(&got, &want).abs() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pca_duplicated_rows_give_duplicated_pixels() {
    let x = spectral_features(8, 5, &mut Rng::new(2));
    let doubled = Tensor::from_fn(&[16, 5], |i| x.row((i / 5) % 8)[i % 5]);
    let img = pca_rgb(&doubled, (4, 4)).unwrap();
    for r in 0..8 {
        assert_eq!(img.data()[r * 3..r * 3 + 3], img.data()[(r + 8) * 3..(r + 8) * 3 + 3]);
    }
}

#[test]
fn pca_matches_power_iteration_oracle() {
    let mut rng = Rng::new(31);
    let x = spectral_features(64, 16, &mut rng);
    let img = pca_rgb(&x, (8, 8)).unwrap();
    for (ch, o) in pca_oracle_projection(&x, 3).iter().enumerate() {
        let got: Vec<f64> = (0..64).map(|i| img.data()[i * 3 + ch]).collect();
        assert!(pearson(&got, o).abs() > 0.999);
    }
}

#[test]
fn pca_errors() {
    let rank_one = Tensor::from_fn(&[9, 4], |i| ((i / 4) as f64) * (1.0 + (i % 4) as f64));
    assert!(matches!(pca_rgb(&rank_one, (3, 3)), Err(Error::DegenerateRank { rank: 1 })));
    let x = spectral_features(9, 4, &mut Rng::new(0));
    assert!(pca_rgb(&x, (2, 4)).is_err());
    let narrow = Tensor::from_fn(&[9, 2], |i| i as f64);
    assert!(pca_rgb(&narrow, (3, 3)).is_err());
}

#[test]
fn metrics() {
    assert_eq!(top1(&[0, 1, 1, 2], &[0, 1, 2, 2]), 0.75);
    // class 0: 1/1, class 1: 1/2, class 2: 1/2
    assert!((mean_iou(&[0, 1, 1, 2], &[0, 1, 2, 2], 3) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(rmse(&[1.0, 2.0], &[1.0, 4.0]), 2f64.sqrt());
}

#[test]
fn probe_examples() {
    let mut rng = Rng::new(3);
    let (x, labels) = separable_blobs(200, 8, &mut rng);
    let hyper = ProbeHyper {
        lr: 0.1,
        iters: 2000,
        batch: 32,
        ..ProbeHyper::default()
    };
    let targets = ProbeTargets::Classes { labels, n_classes: 2 };
    let r = train_linear_probe(ProbeTask::Classification, &x, &targets, None, &hyper).unwrap();
    assert!(r.metric >= 0.99);
    assert_eq!(r.loss_curve.len(), 2000 / hyper.log_every);
    assert!(r.loss_curve.last() < r.loss_curve.first());

    let w: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let xd = Tensor::from_fn(&[150, 5], |_| rng.normal());
    let y: Vec<f64> = xd.rows().map(|r| 8.0 + r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect();
    let hyper = ProbeHyper {
        lr: 0.05,
        iters: 3000,
        batch: 32,
        ..ProbeHyper::default()
    };
    let r = train_linear_probe(ProbeTask::DenseDepth, &xd, &ProbeTargets::Depth(y), None, &hyper).unwrap();
    assert!(r.metric < 1e-3, "{}", r.metric);
}

#[test]
fn lr_grid_picks_best_member() {
    let (x, labels) = separable_blobs(120, 4, &mut Rng::new(4));
    let (ex, el) = separable_blobs(60, 4, &mut Rng::new(4));
    let t = ProbeTargets::Classes { labels, n_classes: 2 };
    let et = ProbeTargets::Classes { labels: el, n_classes: 2 };
    let hyper = ProbeHyper {
        iters: 200,
        batch: 16,
        lr_grid: Some(vec![1e-5, 1e-2, 1e-1]),
        ..ProbeHyper::default()
    };
    let r = train_linear_probe(ProbeTask::Classification, &x, &t, Some((&ex, &et)), &hyper).unwrap();
    let grid = r.grid.as_ref().unwrap();
    assert_eq!(grid.len(), 3);
    let best = grid.iter().map(|g| g.metric.unwrap_or(f64::NEG_INFINITY)).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.metric, best);
}

#[test]
fn dense_seg_loss_decreases_on_scenes() {
    let model = VitModel::<f64>::init(VitConfig::tiny(), &mut Rng::new(0)).unwrap();
    let s = scenes(12, 32, 2, 5);
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for sc in &s {
        let f = model.forward_features(&sc.image).unwrap();
        parts.push(f.final_patches());
        labels.extend(sc.patch_labels(8));
    }
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    let x = Tensor::concat(&refs, 0).unwrap();
    let hyper = ProbeHyper {
        lr: 0.05,
        iters: 200,
        batch: 32,
        ..ProbeHyper::default()
    };
    let r = train_linear_probe(ProbeTask::DenseSeg, &x, &ProbeTargets::Classes { labels, n_classes: 3 }, None, &hyper)
        .unwrap();
    assert!(r.loss_curve.last() < r.loss_curve.first());
    assert!((0.0..=1.0).contains(&r.metric));
}

#[test]
fn layer_sweep_shapes() {
    let hyper = ProbeHyper {
        iters: 20,
        batch: 8,
        lr: 0.01,
        log_every: 5,
        ..ProbeHyper::default()
    };
    let s = scenes(3, 32, 2, 1);
    let samples: Vec<_> = s
        .iter()
        .map(|sc| DenseSample {
            image: sc.image.clone(),
            labels: sc.patch_labels(8),
        })
        .collect();
    let one = VitModel::<f64>::init(VitConfig { n_layers: 1, ..VitConfig::tiny() }, &mut Rng::new(0)).unwrap();
    assert_eq!(layer_sweep(&one, &samples, &[], 3, false, &hyper).unwrap().len(), 1);

    let model = VitModel::<f64>::init(VitConfig::tiny().with_normalizer(Normalizer::Entmax15), &mut Rng::new(0)).unwrap();
    let plain = layer_sweep(&model, &samples, &samples, 3, false, &hyper).unwrap();
    let concat = layer_sweep(&model, &samples, &samples, 3, true, &hyper).unwrap();
    assert_eq!(plain.len(), 2);
    for (p, c) in plain.iter().zip(&concat) {
        assert_eq!(c.report.input_dim, 2 * p.report.input_dim);
        assert_eq!(p.layer, c.layer);
        assert!(c.concat_cls && !p.concat_cls);
    }
    let feats: Vec<_> = samples.iter().map(|d| model.forward_features(&d.image).unwrap()).collect();
    let labels: Vec<&[usize]> = samples.iter().map(|d| d.labels.as_slice()).collect();
    let direct = layer_sweep_features(&feats, &labels, &feats, &labels, 3, false, &hyper).unwrap();
    assert_eq!(direct, plain);
}
