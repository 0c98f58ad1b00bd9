use se2cnn::data::{synth_curve_segmentation, synth_rotated_patterns, LabeledPatchSet};
use se2cnn::equivariance::random_tensor;
use se2cnn::network::{Head, Model, NetworkConfig};
use se2cnn::tensor::Tensor;
use se2cnn::training::{
    augment_rot90, augment_transpose, dihedral_inverse, dihedral_variant, predict_probs, rot90_image, train,
    transpose_image, Augmentation, TrainSettings,
};

/// A small network so that hundreds of iterations take seconds.
fn tiny(n: usize) -> NetworkConfig {
    let mut c = NetworkConfig::new(n);
    c.channels = [3, 3, 3, 3, 3, 1];
    c.kernel_sizes = [3, 3, 3, 3, 1, 1];
    c.precision = se2cnn::tensor::Precision::Double;
    c
}

/// Bright versus dark 8x8 patches with noise.
fn separable(count: usize) -> LabeledPatchSet {
    let noise = random_tensor::<f32>(&[count, 8, 8, 3], 17);
    let labels: Vec<f32> = (0..count).map(|i| (i % 2) as f32).collect();
    let patches = Tensor::from_fn(&[count, 8, 8, 3], |k| {
        let i = k / (8 * 8 * 3);
        labels[i] * 1.5 - 0.75 + 0.1 * noise.data()[k]
    });
    LabeledPatchSet::new(patches, Tensor::new(&[count, 1], labels).unwrap(), 0, "separable").unwrap()
}

#[test]
fn rot90_augmentation_is_the_dihedral_orbit() {
    let x = random_tensor::<f64>(&[2, 5, 5, 2], 3);
    let out = augment_rot90(&x).unwrap();
    assert_eq!(out.shape(), &[16, 5, 5, 2]);
    for b in 0..2 {
        let img = x.index_axis0(b);
        let mut orbit: Vec<Vec<u64>> = Vec::new();
        for q in 0..4 {
            let r = rot90_image(&img, q).unwrap();
            orbit.push(r.data().iter().map(|v| v.to_bits()).collect());
            let t = rot90_image(&transpose_image(&img).unwrap(), q).unwrap();
            orbit.push(t.data().iter().map(|v| v.to_bits()).collect());
        }
        let mut got: Vec<Vec<u64>> = (0..8)
            .map(|v| out.index_axis0(v * 2 + b).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        orbit.sort();
        got.sort();
        assert_eq!(got, orbit);
    }
    let t = augment_transpose(&x).unwrap();
    assert_eq!(t.index_axis0(2).data(), transpose_image(&x.index_axis0(0)).unwrap().data());
}

#[test]
fn dihedral_inverse_undoes_every_variant() {
    let x = random_tensor::<f32>(&[6, 6, 1], 4);
    for v in 0..8 {
        let y = dihedral_variant(&dihedral_variant(&x, v).unwrap(), dihedral_inverse(v)).unwrap();
        assert_eq!(y.data(), x.data(), "variant {v}");
    }
}

#[test]
fn separable_toy_task_is_learned() {
    let data = separable(64);
    let mut model = Model::<f64>::new(tiny(4)).unwrap();
    model.init_weights(1);
    let settings = TrainSettings {
        batch_size: 16,
        iterations: 500,
        log_every: 10,
        seed: 2,
        ..TrainSettings::default()
    };
    let report = train(&mut model, &data, &settings).unwrap();
    let first_below = report.losses.iter().find(|r| r.loss < 0.1);
    assert!(first_below.is_some(), "final loss {:?}", report.losses.last());
}

#[test]
fn same_seed_training_is_reproducible() {
    let data = synth_rotated_patterns(32, 5).unwrap();
    let run = || {
        let mut model = Model::<f32>::new({
            let mut c = tiny(4);
            c.precision = se2cnn::tensor::Precision::Single;
            c
        })
        .unwrap();
        model.init_weights(8);
        let settings = TrainSettings {
            batch_size: 8,
            iterations: 6,
            log_every: 2,
            augmentation: Augmentation::Transpose,
            seed: 3,
            ..TrainSettings::default()
        };
        let report = train(&mut model, &data, &settings).unwrap();
        (model.to_bytes(), report.log_lines())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn transpose_averaging_keeps_symmetric_predictions() {
    let mut model = Model::<f64>::new(tiny(4)).unwrap();
    model.init_weights(4);
    let x = random_tensor::<f32>(&[3, 8, 8, 3], 9);
    let symmetric: Vec<Tensor<f32>> = (0..3)
        .map(|i| {
            let img = x.index_axis0(i);
            let t = transpose_image(&img).unwrap();
            Tensor::new(img.shape(), img.data().iter().zip(t.data()).map(|(a, b)| a + b).collect()).unwrap()
        })
        .collect();
    let batch = Tensor::stack(&symmetric).unwrap();
    let plain = predict_probs(&model, &batch, 2, false).unwrap();
    let tta = predict_probs(&model, &batch, 2, true).unwrap();
    for (p, q) in plain.iter().zip(&tta) {
        assert_eq!(*p >= 0.5, *q >= 0.5);
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn per_pixel_head_trains_on_segmentation() {
    let data = synth_curve_segmentation(8, 2).unwrap();
    let mut model = Model::<f32>::new({
        let mut c = tiny(2).with_head(Head::PerPixel);
        c.precision = se2cnn::tensor::Precision::Single;
        c
    })
    .unwrap();
    model.init_weights(1);
    let settings = TrainSettings {
        batch_size: 4,
        iterations: 3,
        log_every: 1,
        ..TrainSettings::default()
    };
    let report = train(&mut model, &data, &settings).unwrap();
    assert_eq!(report.losses.len(), 3);
    assert!(report.losses.iter().all(|r| r.loss.is_finite()));
}
