//! Acceptance gate. Runs each criterion in turn (sequentially, so runtime
//! limits are measured without contention), prints one `[PASS]`/`[FAIL]`
//! line per criterion, and exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{majority, mann_whitney, random_dims, random_mask, random_volume, reference_loss, relative_error};
use triplanar::fusion::{binarize, fuse, segment_axial_only, segment_volume, Fuser, ViewModels};
use triplanar::metrics::{aggregate, auc, dsc, evaluate, format_table, iou, roc_curve, sensitivity, DEFAULT_N_THRESHOLDS};
use triplanar::models::{
    build_san, build_unet, build_view_unets, san_averaging_weights, Model, ModelName, SanConfig, UnetConfig, Weights,
};
use triplanar::nn::Tensor;
use triplanar::phantom::{generate_phantom, PhantomRange};
use triplanar::training::{combined_loss, loss_and_grad, train_model, train_san, view_dataset, HyperParams, TrainOptions};
use triplanar::volume::{assemble, reslice, Axis, Image, SliceShapeTable, VolumeKind};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "metric oracle suite",
            limit: Duration::from_secs(10),
            run: metric_oracles,
        },
        Criterion {
            name: "ROC/AUC oracle",
            limit: Duration::from_secs(30),
            run: roc_oracle,
        },
        Criterion {
            name: "reslice round trip",
            limit: Duration::from_secs(10),
            run: reslice_round_trip,
        },
        Criterion {
            name: "loss correctness",
            limit: Duration::from_secs(60),
            run: loss_correctness,
        },
        Criterion {
            name: "majority-vote oracle",
            limit: Duration::from_secs(60),
            run: majority_vote,
        },
        Criterion {
            name: "shape/range contracts",
            limit: Duration::from_secs(600),
            run: shape_contracts,
        },
        Criterion {
            name: "overfit smoke test",
            limit: Duration::from_secs(2 * 3600),
            run: overfit,
        },
        Criterion {
            name: "fusion direction check",
            limit: Duration::from_secs(3600),
            run: fusion_direction,
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; exceeded runtime limit")),
            other => other,
        };
        let timing = format!("{:.1} s, limit {} s", elapsed.as_secs_f64(), c.limit.as_secs());
        match outcome {
            Ok(detail) => println!("[PASS] {}: {detail} ({timing})", c.name),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {}: {detail} ({timing})", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn bits(s: &str) -> Vec<f32> {
    s.bytes().map(|b| if b == b'1' { 1.0 } else { 0.0 }).collect()
}

fn metric_oracles() -> Outcome {
    // (prediction, ground truth, DSC, sensitivity, IoU) as exact fractions.
    #[rustfmt::skip]
    let cases: [(&str, &str, (u32, u32), (u32, u32), (u32, u32)); 22] = [
        ("1100", "0110", (1, 2), (1, 2), (1, 3)),
        ("1111", "1111", (1, 1), (1, 1), (1, 1)),
        ("0000", "0000", (1, 1), (1, 1), (1, 1)),
        ("1000", "0100", (0, 1), (0, 1), (0, 1)),
        ("0000", "1000", (0, 1), (0, 1), (0, 1)),
        ("1000", "0000", (0, 1), (0, 1), (0, 1)),
        ("1110", "1000", (1, 2), (1, 1), (1, 3)),
        ("1000", "1110", (1, 2), (1, 3), (1, 3)),
        ("11110000", "11000000", (2, 3), (1, 1), (1, 2)),
        ("10101010", "11110000", (1, 2), (1, 2), (1, 3)),
        ("11111110", "11111111", (14, 15), (7, 8), (7, 8)),
        ("1", "1", (1, 1), (1, 1), (1, 1)),
        ("0", "1", (0, 1), (0, 1), (0, 1)),
        ("111000", "011100", (2, 3), (2, 3), (1, 2)),
        ("110000", "111111", (1, 2), (1, 3), (1, 3)),
        ("111111", "110000", (1, 2), (1, 1), (1, 3)),
        ("1111100000", "1000000000", (1, 3), (1, 1), (1, 5)),
        ("1010101010", "0101010101", (0, 1), (0, 1), (0, 1)),
        ("1100110011", "1111001111", (4, 7), (1, 2), (2, 5)),
        ("0111", "1110", (2, 3), (2, 3), (1, 2)),
        ("00000001", "00000001", (1, 1), (1, 1), (1, 1)),
        ("11111111", "00000001", (2, 9), (1, 1), (1, 8)),
    ];
    let frac = |(n, d): (u32, u32)| n as f64 / d as f64;
    for (p, g, d, s, i) in cases {
        let (p, g) = (bits(p), bits(g));
        let got = (dsc(&p, &g).unwrap(), sensitivity(&p, &g).unwrap(), iou(&p, &g).unwrap());
        ensure!(
            got == (frac(d), frac(s), frac(i)),
            "case {p:?} vs {g:?}: got {got:?}"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=200);
        let density = rng.gen::<f64>();
        let p: Vec<f32> = (0..n).map(|_| rng.gen_bool(density) as u8 as f32).collect();
        let g: Vec<f32> = (0..n).map(|_| rng.gen_bool(density) as u8 as f32).collect();
        let d = dsc(&p, &g).unwrap();
        worst = worst.max((iou(&p, &g).unwrap() - d / (2.0 - d)).abs());
    }
    ensure!(worst <= 1e-9, "iou identity off by {worst:e}");
    Ok(format!("{} exact cases; iou = dsc/(2-dsc) max error {worst:.1e} on 1000 pairs", cases.len()))
}

fn roc_oracle() -> Outcome {
    let n = DEFAULT_N_THRESHOLDS;
    let tol = 2.0 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let mut truth: Vec<f32> = (0..64).map(|_| rng.gen_bool(0.4) as u8 as f32).collect();
        truth[0] = 1.0;
        truth[1] = 0.0;
        // Scores loosely correlated with the truth so AUC spans a range.
        let signal = rng.gen::<f32>();
        let prob: Vec<f32> = truth
            .iter()
            .map(|&t| (signal * t + rng.gen::<f32>() * (1.0 - signal)).clamp(0.0, 1.0))
            .collect();
        let a = auc(&roc_curve(&prob, &truth, n).unwrap()).unwrap();
        let oracle = mann_whitney(&prob, &truth);
        worst = worst.max((a - oracle).abs());
        ensure!((a - oracle).abs() <= tol, "case {case}: auc {a} vs oracle {oracle}");
    }
    let truth = bits("11110000110");
    let perfect = auc(&roc_curve(&truth, &truth, n).unwrap()).unwrap();
    ensure!(perfect == 1.0, "perfect predictor auc {perfect}");
    let constant = roc_curve(&[0.5; 11], &truth, n).unwrap();
    let c_auc = auc(&constant).unwrap();
    ensure!(constant.len() == 2 && c_auc == 0.5, "constant predictor: {constant:?}, auc {c_auc}");
    let prob = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1];
    let truth = bits("11101000");
    let small = auc(&roc_curve(&prob, &truth, n).unwrap()).unwrap();
    ensure!(
        (small - 0.9375).abs() < 1e-12 && mann_whitney(&prob, &truth) == 0.9375,
        "8-voxel case auc {small}"
    );
    Ok(format!(
        "50 cases within {worst:.4} of Mann-Whitney (tol {tol:.4}); perfect 1.0, constant 0.5, 8-voxel 0.9375"
    ))
}

fn reslice_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let kind = [VolumeKind::Intensity, VolumeKind::Probability, VolumeKind::BinaryMask][i % 3];
        let dims = random_dims(&mut rng, 24);
        let v = random_volume(&mut rng, dims, kind);
        for axis in Axis::ALL {
            let back = assemble(&reslice(&v, axis)).map_err(|e| e.to_string())?;
            ensure!(
                back.dims() == v.dims() && back.kind() == v.kind() && back.data() == v.data(),
                "volume {i} ({:?}) changed through {axis}",
                v.dims()
            );
        }
    }
    Ok("100 volumes x 3 axes bit-exact".into())
}

fn loss_correctness() -> Outcome {
    let img = |s: &str| Image::new(1, s.len(), bits(s)).unwrap();
    let s = img("0110100111");
    ensure!(combined_loss(&s, &s).unwrap() == -1.0, "identity loss is not -1");
    let zeros = img("0000000000");
    let k = combined_loss(&zeros, &s).unwrap();
    ensure!(k == 6.0 / 10.0, "all-zero prediction gives {k}, expected k/N = 0.6");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (32, 32);
    let pred: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.02..0.98)).collect();
    let target: Vec<f64> = (0..h * w).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
    let (loss, grad) = loss_and_grad(&pred, &target);
    ensure!(
        relative_error(loss, reference_loss(&pred, &target)) < 1e-12,
        "loss {loss} disagrees with the reference"
    );
    let step = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let i = rng.gen_range(0..pred.len());
        let mut plus = pred.clone();
        let mut minus = pred.clone();
        plus[i] += step;
        minus[i] -= step;
        let numeric = (reference_loss(&plus, &target) - reference_loss(&minus, &target)) / (2.0 * step);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    ensure!(worst <= 1e-3, "gradient relative error {worst:e}");
    Ok(format!("hand cases exact; gradient max relative error {worst:.1e} at 100 pixels"))
}

fn majority_vote() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..10 {
        let dims = [rng.gen_range(2..=24), rng.gen_range(2..=24), rng.gen_range(1..=8)];
        let masks = [0.2, 0.5, 0.7].map(|d| random_mask(&mut rng, dims, d));
        let spec = build_san((dims[0], dims[1]), &SanConfig::default()).map_err(|e| e.to_string())?;
        let san = Model::new(spec.clone(), san_averaging_weights(&spec).unwrap()).unwrap();
        let fused = binarize(&fuse(&masks, Fuser::San(&san)).unwrap(), 0.5).unwrap();
        let vote = majority(masks[0].data(), masks[1].data(), masks[2].data());
        ensure!(fused.data() == vote.as_slice(), "triple {t} ({dims:?}) differs from the vote");
    }

    // Same check through the full pipeline, with untrained per-view networks.
    let dims = [16, 16, 8];
    let phantom = generate_phantom(
        &PhantomRange {
            dims,
            lumen_radius: [2.0, 3.0],
            wall_thickness: [1.0, 2.0],
            drift_amplitude: [0.0, 1.0],
            ..PhantomRange::default()
        }
        .sample_many(1, 6)
        .unwrap()[0],
    )
    .unwrap();
    let cfg = UnetConfig { depth: 2, base_width: 4 };
    let specs = build_view_unets(&SliceShapeTable::for_dims(dims), &cfg).unwrap();
    let [ax, lat, fr] = specs.map(|s| {
        let w = Weights::init(&s, 9);
        Model::new(s, w).unwrap()
    });
    let views = ViewModels::new(ax, lat, fr).unwrap();
    let spec = build_san((dims[0], dims[1]), &SanConfig::default()).unwrap();
    let san = Model::new(spec.clone(), san_averaging_weights(&spec).unwrap()).unwrap();
    let result = segment_volume(&phantom.image, &views, Fuser::San(&san), 0.5).unwrap();
    let pv = result.per_view_masks.as_ref().unwrap();
    let vote = majority(pv[0].data(), pv[1].data(), pv[2].data());
    ensure!(result.mask_axial.data() == vote.as_slice(), "segment_volume differs from the vote");
    Ok("10 random triples and one end-to-end volume bit-exact".into())
}

fn shape_contracts() -> Outcome {
    let table = SliceShapeTable::CANONICAL;
    let specs = build_view_unets(&table, &UnetConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = Vec::new();
    for spec in specs {
        let (h, w) = spec.spatial_shape();
        let san_spec = build_san((h, w), &SanConfig::default()).unwrap();
        let unet_params = spec.param_count;
        let ratio = san_spec.param_count as f64 / unet_params as f64;
        ensure!(ratio < 0.01, "SAN/U-Net parameter ratio {ratio}");
        for (spec, c) in [(spec, 1), (san_spec, 3)] {
            let input: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let seed = rng.gen();
            let model = Model::new(spec.clone(), Weights::init(&spec, seed)).unwrap();
            let out = model
                .predict(Tensor::from_vec([1, c, h, w], input).unwrap())
                .map_err(|e| e.to_string())?;
            ensure!(out.shape() == [1, 1, h, w], "{} output shape {:?}", spec.name, out.shape());
            ensure!(
                out.data().iter().all(|&p| p > 0.0 && p < 1.0),
                "{} output leaves (0, 1)",
                spec.name
            );
            checked.push(format!("{} {h}x{w}x{c}", spec.name));
        }
        checked.push(format!("SAN/U-Net params {ratio:.5}"));
    }
    Ok(checked.join(", "))
}

fn overfit() -> Outcome {
    let volumes: Vec<_> = PhantomRange::default()
        .sample_many(4, 1)
        .unwrap()
        .iter()
        .map(|p| generate_phantom(p).unwrap())
        .collect();
    let shape = (volumes[0].image.dims()[0], volumes[0].image.dims()[1]);
    let spec = build_unet(ModelName::Mx, shape, &UnetConfig::default()).unwrap();
    let data = view_dataset(&volumes, Axis::Axial, shape).unwrap();
    let hp = HyperParams::default();
    let (weights, history) = train_model(&spec, &data, &hp, 7, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let model = Model::new(spec, weights).unwrap();
    let scores: Vec<f64> = volumes
        .iter()
        .map(|lv| {
            let seg = segment_axial_only(&lv.image, &model, 0.5).unwrap();
            dsc(seg.mask_axial.data(), lv.wall_mask.data()).unwrap()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    ensure!(mean >= 0.90, "mean train DSC {mean:.4} < 0.90 (per volume {scores:.4?})");
    Ok(format!(
        "{} epochs, final loss {:.4}, mean train DSC {mean:.4}",
        history.epochs(),
        history.train_loss.last().unwrap()
    ))
}

/// Per-view U-Net width and epochs for the fusion check.
const FUSION_UNET: UnetConfig = UnetConfig { depth: 4, base_width: 32 };
const FUSION_UNET_EPOCHS: usize = 8;

fn fusion_direction() -> Outcome {
    let range = PhantomRange {
        frame_noise_spread: [1.0, 2.0],
        ..PhantomRange::default()
    };
    let volumes: Vec<_> = range
        .sample_many(20, 11)
        .unwrap()
        .iter()
        .map(|p| generate_phantom(p).unwrap())
        .collect();
    let (train, test) = volumes.split_at(16);
    let dims = range.dims;
    let specs = build_view_unets(&SliceShapeTable::for_dims(dims), &FUSION_UNET).unwrap();
    let hp = HyperParams {
        n_epoch: FUSION_UNET_EPOCHS,
        ..HyperParams::default()
    };
    let mut models = Vec::new();
    for (spec, axis) in specs.into_iter().zip(Axis::ALL) {
        let data = view_dataset(train, axis, spec.spatial_shape()).unwrap();
        let (w, _) = train_model(&spec, &data, &hp, 3, &TrainOptions::default()).map_err(|e| e.to_string())?;
        models.push(Model::new(spec, w).unwrap());
    }
    let axial = models[0].clone();
    let mut it = models.into_iter();
    let views = ViewModels::new(it.next().unwrap(), it.next().unwrap(), it.next().unwrap()).unwrap();
    let san_spec = build_san((dims[0], dims[1]), &SanConfig::default()).unwrap();
    let (san_w, _) = train_san(&views, train, &san_spec, &HyperParams::default(), 5, &TrainOptions::default())
        .map_err(|e| e.to_string())?;
    let san = Model::new(san_spec, san_w).unwrap();

    let mut unet = Vec::new();
    let mut fused = Vec::new();
    for lv in test {
        let a = segment_axial_only(&lv.image, &axial, 0.5).unwrap();
        let f = segment_volume(&lv.image, &views, Fuser::San(&san), 0.5).unwrap();
        unet.push(evaluate(&a.prob_axial, &lv.wall_mask, 0.5, DEFAULT_N_THRESHOLDS).unwrap());
        fused.push(evaluate(&f.prob_axial, &lv.wall_mask, 0.5, DEFAULT_N_THRESHOLDS).unwrap());
    }
    let rows = [aggregate("U-Net", &unet).unwrap(), aggregate("U-Net+SAN", &fused).unwrap()];
    println!("fusion direction check, {} test volumes:", test.len());
    print!("{}", format_table(&rows));
    println!("ROC: U-Net AUC = {:.4}, U-Net+SAN AUC = {:.4}", rows[0].auc, rows[1].auc);
    let (u, f) = (&rows[0], &rows[1]);
    ensure!(f.dsc >= u.dsc - 0.01, "fused DSC {:.4} < axial-only {:.4} - 0.01", f.dsc, u.dsc);
    ensure!(f.auc >= u.auc - 0.01, "fused AUC {:.4} < axial-only {:.4} - 0.01", f.auc, u.auc);
    Ok(format!(
        "DSC {:.4} vs {:.4}, AUC {:.4} vs {:.4} (U-Net+SAN vs U-Net)",
        f.dsc, u.dsc, f.auc, u.auc
    ))
}
