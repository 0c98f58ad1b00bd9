//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Everything runs inside a single test so the timed criteria do not share
//! the CPU with each other.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use se2cnn::data::synth_rotated_patterns;
use se2cnn::equivariance::{
    chain_invariance_check, gaussian_blobs, gconv_covariance_error, gradient_audit, lifting_covariance_error,
    projection_covariance_error, random_tensor, smooth_kernel_weights, AuditTarget, EquivarianceReport,
};
use se2cnn::geometry::{DiscreteGroupElement, OrientationSampling};
use se2cnn::kernel_rotation::RotationOperator;
use se2cnn::layers::{group_correlate, lift_correlate, GroupKernelSet, LiftingKernelSet, Projection, SE2Image};
use se2cnn::metrics::{f1_score, rand_index, roc_auc};
use se2cnn::network::{Head, Model, NetworkConfig};
use se2cnn::tensor::{Precision, Scalar, Tensor};
use se2cnn::training::{evaluate_classification, train, Augmentation, TrainSettings};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("weight counts", weight_counts),
        ("oracle equivalence", oracle_equivalence),
        ("gradient audit", gradient_audit_all),
        ("equivariance", equivariance_suite),
        ("degeneration to plain CNN", degeneration),
        ("behavioral comparison", behavior),
        ("metric units", metric_units),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        println!(
            "criterion {} [{}] {}: {} ({:.1}s)",
            k + 1,
            if o.passed { "PASS" } else { "FAIL" },
            name,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.passed {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

const TABLE: [(usize, [usize; 6], usize); 5] = [
    (1, [1040, 5408, 5408, 21632, 1056, 17], 34561),
    (2, [845, 7124, 7124, 17536, 1056, 17], 33702),
    (4, [650, 8420, 8420, 13472, 1056, 17], 32035),
    (8, [520, 10768, 10768, 10768, 1056, 17], 33897),
    (16, [390, 12108, 12108, 8072, 1056, 17], 33751),
];

fn weight_counts() -> Outcome {
    let t = Instant::now();
    let mut mismatches = Vec::new();
    for (n, per_layer, total) in TABLE {
        let model = Model::<f32>::new(NetworkConfig::new(n)).unwrap();
        let counts = model.count_weights();
        if counts.per_layer != per_layer || counts.total != total {
            mismatches.push(format!("N={n}: {:?} total {}", counts.per_layer, counts.total));
        }
    }
    let fast = t.elapsed() < Duration::from_secs(1);
    let ok = mismatches.is_empty() && fast;
    outcome(
        ok,
        if mismatches.is_empty() {
            "30 layer cells and 5 totals exact".to_string()
        } else {
            mismatches.join("; ")
        },
    )
}

fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64_lossy() - y).abs())
        .fold(0.0, f64::max)
}

/// Tensor of independent `U(-1, 1)` draws.
fn uniform<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

/// Worst `(lifting, group)` deviation from the brute-force oracles.
fn oracle_errors<T: Scalar>(seed: u64) -> (f64, f64) {
    let (mut lift_err, mut group_err) = (0.0f64, 0.0f64);
    for (k, nn) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let op = Arc::new(RotationOperator::new(3, nn).unwrap());
        let m = op.mask().len();
        let s = seed + 10 * k as u64;
        let f = uniform::<T>(&[2, 8, 8, 2], s);
        let lw = uniform::<T>(&[2, 2, m], s + 1);
        let lifted = lift_correlate(&f, &LiftingKernelSet::new(op.clone(), lw.clone()).unwrap()).unwrap();
        lift_err = lift_err.max(max_abs_diff(lifted.tensor(), &common::brute_lift(&f, &lw, 3, nn)));

        let x = uniform::<T>(&[2, 8, 8, nn, 2], s + 2);
        let gw = uniform::<T>(&[2, 2, nn, m], s + 3);
        let image = SE2Image::new(x.clone(), OrientationSampling::new(nn).unwrap()).unwrap();
        let out = group_correlate(&image, &GroupKernelSet::new(op, gw.clone()).unwrap()).unwrap();
        group_err = group_err.max(max_abs_diff(out.tensor(), &common::brute_gconv(&x, &gw, 3)));
    }
    (lift_err, group_err)
}

fn oracle_equivalence() -> Outcome {
    let (l32, g32) = oracle_errors::<f32>(11);
    let (l64, g64) = oracle_errors::<f64>(11);
    let ok = l32 <= 1e-5 && g32 <= 1e-5 && l64 <= 1e-12 && g64 <= 1e-12;
    outcome(
        ok,
        format!("f32 lift {l32:.1e} group {g32:.1e} (<= 1e-5); f64 lift {l64:.1e} group {g64:.1e} (<= 1e-12)"),
    )
}

fn gradient_audit_all() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut blocks = 0;
    let mut skipped = 0;
    for target in AuditTarget::all() {
        match gradient_audit(target, 7) {
            Ok(reports) => {
                for r in reports {
                    blocks += 1;
                    skipped += r.skipped;
                    worst = worst.max(r.max_rel_error);
                    if !r.passed() {
                        failures.push(format!("{} {}", r.target, r.block));
                    }
                }
            }
            Err(e) => failures.push(format!("{target}: {e}")),
        }
    }
    let fast = t.elapsed() < Duration::from_secs(60);
    outcome(
        failures.is_empty() && fast,
        format!(
            "{blocks} blocks, max relative error {worst:.2e} (< 1e-6), {skipped} kink coordinates skipped{}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

fn equivariance_suite() -> Outcome {
    let t = Instant::now();
    let mut grid: Vec<EquivarianceReport> = Vec::new();
    let g = DiscreteGroupElement::new;

    // Layers, quarter turns combined with integer translations.
    for nn in [4usize, 8] {
        let op = Arc::new(RotationOperator::new(5, nn).unwrap());
        let m = op.mask().len();
        let sampling = OrientationSampling::new(nn).unwrap();
        let lk = LiftingKernelSet::new(op.clone(), random_tensor::<f32>(&[3, 2, m], 1)).unwrap();
        let gk = GroupKernelSet::new(op.clone(), random_tensor::<f32>(&[2, 3, nn, m], 2)).unwrap();
        let f = random_tensor::<f32>(&[2, 21, 21, 2], 3);
        let feats = SE2Image::new(random_tensor::<f32>(&[2, 21, 21, nn, 3], 4), sampling).unwrap();
        for q in 0..4 {
            for t in [[0, 0], [2, -1]] {
                let e = g(t, q * nn / 4);
                grid.push(lifting_covariance_error(&f, &lk, e, None).unwrap());
                grid.push(gconv_covariance_error(&feats, &gk, e, None).unwrap());
                grid.push(projection_covariance_error(&feats, Projection::Max, e, None).unwrap());
            }
        }
    }
    // Pooling-free chains: invariance of the patch logit, covariance of the
    // per-pixel logit map.
    let f = random_tensor::<f32>(&[2, 24, 24, 3], 5);
    for head in [Head::GlobalMax, Head::PerPixel] {
        let mut model = Model::<f32>::new(NetworkConfig::new(4).with_head(head)).unwrap();
        model.init_weights(6);
        for q in 1..4 {
            grid.push(chain_invariance_check(&model, &f, g([0, 0], q), None).unwrap());
        }
        if head == Head::PerPixel {
            grid.push(chain_invariance_check(&model, &f, g([3, -2], 1), None).unwrap());
        }
    }
    let grid_worst = grid.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let grid_ok = grid.iter().all(|r| r.passed() && r.rel_error <= 1e-5);

    // Eighth turn at N = 8 on band-limited inputs with smooth kernels.
    let eighth = g([0, 0], 1);
    let interpolated = |n: usize| {
        let op = Arc::new(RotationOperator::new(n, 8).unwrap());
        let m = op.mask().len();
        let lk = LiftingKernelSet::new(op.clone(), smooth_kernel_weights::<f32>(&op, 4, 21).reshape(&[2, 2, m]).unwrap()).unwrap();
        let f = gaussian_blobs::<f32>(33, 33, 2, 2.0, 6, 22);
        let lift = lifting_covariance_error(&f, &lk, eighth, None).unwrap();
        let gk = GroupKernelSet::new(op.clone(), smooth_kernel_weights::<f32>(&op, 32, 23).reshape(&[2, 2, 8, m]).unwrap()).unwrap();
        let feats = lift_correlate(&f, &lk).unwrap();
        let group = gconv_covariance_error(&feats, &gk, eighth, None).unwrap();
        (lift, group)
    };
    let (lift9, group9) = interpolated(9);
    let (lift5, group5) = interpolated(5);
    let interp_ok = lift9.rel_error <= 5e-2 && group9.rel_error <= 5e-2;

    let fast = t.elapsed() < Duration::from_secs(60);
    outcome(
        grid_ok && interp_ok && fast,
        format!(
            "{} grid-exact checks, worst relative error {grid_worst:.1e} (<= 1e-5); N=8 eighth turn, 9x9 smooth kernels: lifting {:.1e}, group {:.1e} (<= 5e-2); 5x5 for reference: {:.1e}, {:.1e}",
            grid.len(),
            lift9.rel_error,
            group9.rel_error,
            lift5.rel_error,
            group5.rel_error
        ),
    )
}

/// Forward of an N = 1 model rebuilt from scratch with plain convolutions.
fn plain_cnn(model: &Model<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let config = model.config();
    let params = model.named_params();
    let weight = |name: &str| params.iter().find(|(n, _)| n == name).unwrap().1.clone();
    let mut h = x.clone();
    for l in 0..5 {
        let w = weight(&format!("layer{}.weight", l + 1));
        // Group weights carry a singleton orientation axis at N = 1.
        let w = if l == 0 {
            w
        } else {
            let s = w.shape().to_vec();
            w.reshape(&[s[0], s[1], s[3]]).unwrap()
        };
        h = common::plain_conv(&h, &common::dense_from_mask(&w, config.kernel_sizes[l]));
        let bn = &model.norms()[l];
        h = common::batch_norm_inference(
            &h,
            bn.scale.data(),
            bn.shift.data(),
            &bn.running_mean,
            &bn.running_var,
            config.bn_epsilon,
        );
        h = common::relu(&h);
        if config.pool_layers.contains(&(l + 1)) {
            h = common::max_pool2(&h);
        }
    }
    let out = common::plain_conv(&h, &weight("layer6.weight"));
    let bias = weight("layer6.bias").data()[0];
    let [b, ..] = out.shape()[..] else { unreachable!() };
    let logits = (0..b)
        .map(|i| out.index_axis0(i).data().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v)) + bias)
        .collect();
    Tensor::new(&[b, 1], logits).unwrap()
}

fn degeneration() -> Outcome {
    let mut config = NetworkConfig::new(1).with_pool_layers(&[1, 2]);
    config.precision = Precision::Double;
    let mut model = Model::<f64>::new(config).unwrap();
    model.init_weights(31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for bn in model.norms_mut() {
        for v in bn.scale.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.shift.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in &mut bn.running_mean {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in &mut bn.running_var {
            *v = rng.gen_range(0.5..2.0);
        }
    }
    model.params_mut().last_mut().unwrap().data_mut()[0] = 0.25;
    let x = random_tensor::<f64>(&[2, 16, 16, 3], 33);
    let got = model.forward(&x).unwrap();
    let want = plain_cnn(&model, &x);
    let err = max_abs_diff(&got, &want);
    outcome(err <= 1e-6, format!("max elementwise difference {err:.1e} (<= 1e-6)"))
}

fn behavior() -> Outcome {
    let t = Instant::now();
    let configs = [
        ("N=8 no augmentation", 8, Augmentation::None, 500),
        ("N=1 rot90 augmentation", 1, Augmentation::TransposeRot90, 800),
        ("N=1 no augmentation", 1, Augmentation::None, 800),
    ];
    let mut acc = [[0.0f64; 3]; 3];
    for (s, seed) in [1u64, 2, 3].into_iter().enumerate() {
        let data = synth_rotated_patterns(2500, 1000 + seed).unwrap();
        let (train_set, test_set) = data.split(2000).unwrap();
        for (c, &(_, n, augmentation, iterations)) in configs.iter().enumerate() {
            let mut model = Model::<f32>::new(NetworkConfig::new(n).with_pool_layers(&[1, 2, 3])).unwrap();
            model.init_weights(seed);
            let settings = TrainSettings {
                learning_rate: 0.01,
                batch_size: 32,
                iterations,
                augmentation,
                seed,
                ..TrainSettings::default()
            };
            train(&mut model, &train_set, &settings).unwrap();
            acc[c][s] = evaluate_classification(&model, &test_set, 100, false).unwrap().accuracy;
        }
    }
    let mean: Vec<f64> = acc.iter().map(|a| a.iter().sum::<f64>() / 3.0).collect();
    let (gcnn, rot90, plain) = (mean[0], mean[1], mean[2]);
    let elapsed = t.elapsed();
    let ok = gcnn >= rot90 && plain <= gcnn.min(rot90) - 0.03 && elapsed <= Duration::from_secs(15 * 60);
    let per_seed: Vec<String> = configs
        .iter()
        .zip(&acc)
        .zip(&mean)
        .map(|(((name, ..), a), m)| {
            format!("{name} {:.1}/{:.1}/{:.1} mean {:.1}", 100.0 * a[0], 100.0 * a[1], 100.0 * a[2], 100.0 * m)
        })
        .collect();
    outcome(ok, format!("test accuracy % per seed: {}; {:.0}s (<= 900s)", per_seed.join("; "), elapsed.as_secs_f64()))
}

fn metric_units() -> Outcome {
    let mut bad = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if got != want {
            bad.push(format!("{name}: {got} != {want}"));
        }
    };
    expect("f1 perfect", f1_score(7, 0, 0), 1.0);
    expect("f1 2/1/1", f1_score(2, 1, 1), 2.0 / 3.0);
    expect("f1 tp=0", f1_score(0, 4, 2), 0.0);
    expect("auc separated", roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    expect("auc ties", roc_auc(&[0.4; 4], &[true, false, true, false]).unwrap(), 0.5);
    expect("auc pairs", roc_auc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap(), 0.75);
    expect("rand identical", rand_index(&[3, 3, 1, 2], &[3, 3, 1, 2]).unwrap(), 1.0);
    expect("rand n=2", rand_index(&[1, 1], &[1, 2]).unwrap(), 0.0);
    expect("rand pairs", rand_index(&[1, 1, 2, 2], &[1, 1, 1, 2]).unwrap(), 0.5);
    let single_class = roc_auc(&[0.2, 0.3], &[true, true]).is_err();
    if !single_class {
        bad.push("single-class AUC accepted".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst = 0.0f64;
    for set in 0..200 {
        let len = rng.gen_range(2..60);
        let mut labels: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // Every other set draws from a coarse grid to force ties.
        let scores: Vec<f64> = (0..len)
            .map(|_| if set % 2 == 0 { rng.gen::<f64>() } else { rng.gen_range(0..5) as f64 / 4.0 })
            .collect();
        let diff = (roc_auc(&scores, &labels).unwrap() - common::pairwise_auc(&scores, &labels)).abs();
        worst = worst.max(diff);
    }
    let ok = bad.is_empty() && worst <= 1e-12;
    outcome(
        ok,
        if bad.is_empty() {
            format!("9 micro-examples exact; AUC vs pairwise oracle on 200 sets max difference {worst:.1e}")
        } else {
            bad.join("; ")
        },
    )
}

fn training_run(threads: usize, dir: &std::path::Path) -> (Vec<u8>, String) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let data = synth_rotated_patterns(96, 5).unwrap();
        let mut model = Model::<f32>::new(NetworkConfig::new(4).with_pool_layers(&[1, 2])).unwrap();
        model.init_weights(5);
        let settings = TrainSettings {
            batch_size: 16,
            iterations: 12,
            augmentation: Augmentation::Transpose,
            seed: 5,
            log_every: 3,
            ..TrainSettings::default()
        };
        let report = train(&mut model, &data, &settings).unwrap();
        let path = dir.join("model.se2m");
        model.save(&path).unwrap();
        (std::fs::read(path).unwrap(), report.log_lines())
    })
}

fn determinism() -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = training_run(1, dirs[0].path());
    let b = training_run(1, dirs[1].path());
    let c = training_run(2, dirs[2].path());
    let same = a == b;
    let across_threads = a == c;
    outcome(
        same && across_threads,
        format!(
            "model files ({} bytes) and logs identical across two runs: {same}; also with 2 threads: {across_threads}",
            a.0.len()
        ),
    )
}
