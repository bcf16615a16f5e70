//! Acceptance gate. Each test prints one `criterion NN name: PASS/FAIL`
//! line (visible with `--nocapture`) and fails loudly with the same detail.
//! The directional checks share one lazily trained model zoo, so the first
//! of them pays the training cost for all.

mod common;

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sair::appearance::{air_query, AirDecoder, AppearanceEncoder, AppearanceFeatureMap};
use sair::coord::{
    build_neighborhood, identity_decode, local_ensemble_query, Coord, CoordinateGrid,
    EnsembleIndex, QueryBatch,
};
use sair::data::{Dataset, Split};
use sair::lpips::{lpips, ConvPerceptualNet};
use sair::masks::RatioBucket;
use sair::metrics::{miou, psnr, ssim};
use sair::nn::{Adam, Params};
use sair::probe::{calibrate_prototypes, probe_dataset};
use sair::semantic::{sir_dense, SemanticFeatureMap, SirDecoder};
use sair::train::{load_checkpoint, model_from_checkpoint, save_checkpoint};

use common::{masked_psnr, mean_psnr, zoo_run, ZOO_SEEDS};

fn verdict(num: u8, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {num:02} {name}: {status} ({detail})");
    assert!(pass, "criterion {num:02} {name}: FAIL ({detail})");
}

#[test]
fn criterion_01_bilinear_oracle() {
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let started = Instant::now();
    let mut max_err = 0.0f64;
    for _ in 0..20 {
        let h = rng.random_range(2..=9);
        let w = rng.random_range(2..=9);
        let c = rng.random_range(1..=5);
        let map = Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0));
        // Row-major cells, channels innermost, matching the flattened layout
        // the ensemble consumes.
        let mut rows = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    rows.push(map[[i, j, ch]]);
                }
            }
        }
        let features = Tensor::from_vec(rows, (h * w, c), &device).unwrap();
        let grid = CoordinateGrid::new(h, w).unwrap();
        let queries: Vec<Coord> = (0..1000)
            .map(|_| Coord::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
            .collect();
        let batch = QueryBatch::build(grid, queries.clone()).unwrap();
        let index = EnsembleIndex::new(&[&batch], DType::F64, &device).unwrap();
        let got = local_ensemble_query(&features, &index, identity_decode)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for (q, row) in queries.iter().zip(&got) {
            let want = common::oracle_bilinear(&map, q.y, q.x);
            for (a, b) in row.iter().zip(&want) {
                max_err = max_err.max((a - b).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        "bilinear-oracle",
        max_err <= 1e-6 && secs < 10.0,
        &format!("max abs err {max_err:.2e} over 20000 queries in {secs:.2}s"),
    );
}

#[test]
fn criterion_02_weight_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_dev = 0.0f64;
    let mut min_weight = f64::INFINITY;
    for trial in 0..100_000u32 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let grid = CoordinateGrid::new(h, w).unwrap();
        let mut y = rng.random_range(-1.0..=1.0);
        let mut x = rng.random_range(-1.0..=1.0);
        // Force a steady diet of exact edges and corners.
        match trial % 5 {
            1 => y = if trial % 2 == 0 { -1.0 } else { 1.0 },
            3 => x = if trial % 2 == 0 { -1.0 } else { 1.0 },
            4 => {
                y = 1.0;
                x = -1.0;
            }
            _ => {}
        }
        let nb = build_neighborhood(&grid, Coord::new(y, x)).unwrap();
        let sum: f64 = nb.weights.iter().sum();
        max_dev = max_dev.max((sum - 1.0).abs());
        for &wt in &nb.weights {
            min_weight = min_weight.min(wt);
        }
    }
    verdict(
        2,
        "weight-simplex",
        min_weight >= 0.0 && max_dev <= 1e-6,
        &format!("min weight {min_weight:.2e}, max |sum-1| {max_dev:.2e} over 1e5 neighborhoods"),
    );
}

#[test]
fn criterion_03_composite_gradcheck() {
    let started = Instant::now();
    let device = Device::Cpu;
    let params = Params::new(3, DType::F64, &device);
    let sir = SirDecoder::new(&params, "sir", 3, 6).unwrap();
    let air = AirDecoder::new(&params, "air", 4, 3, 6).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut filled = |n: usize, shape: (usize, usize, usize, usize)| -> Tensor {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &device).unwrap()
    };
    let map = SemanticFeatureMap {
        features: filled(12, (1, 3, 2, 2)),
        mask: Tensor::from_vec(vec![0.25f64, 0.0, 1.0, 0.5], (1, 1, 2, 2), &device).unwrap(),
        downsample_factor: 4,
    };
    let app = AppearanceFeatureMap {
        features: filled(4 * 64, (1, 4, 8, 8)),
    };

    let loss = || -> sair::Result<Tensor> {
        let field = sir_dense(&map, &sir, 8, 8)?;
        let batch = QueryBatch::dense(CoordinateGrid::new(8, 8)?, 8, 8)?;
        let index = EnsembleIndex::new(&[&batch], DType::F64, &device)?;
        let out = air_query(Some(&app), &field, &air, &index)?;
        Ok(out.sqr()?.sum_all()?)
    };

    let grads = loss().unwrap().backward().unwrap();
    let trainable = params.trainable();
    let mut analytic = Vec::with_capacity(trainable.len());
    for (name, var) in &trainable {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("no gradient reached {name}"))
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        analytic.push(g);
    }

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for ((_, var), grad) in trainable.iter().zip(&analytic) {
        let dims = var.dims().to_vec();
        let orig = var
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..orig.len() {
            let h = 1e-5 * (1.0 + orig[i].abs());
            let eval_at = |value: f64| -> f64 {
                let mut v = orig.clone();
                v[i] = value;
                var.set(&Tensor::from_vec(v, dims.as_slice(), &device).unwrap())
                    .unwrap();
                loss().unwrap().to_scalar::<f64>().unwrap()
            };
            let fd = (eval_at(orig[i] + h) - eval_at(orig[i] - h)) / (2.0 * h);
            var.set(&Tensor::from_vec(orig.clone(), dims.as_slice(), &device).unwrap())
                .unwrap();
            let a = grad[i];
            let rel = (a - fd).abs() / f64::max(1e-6, a.abs() + fd.abs());
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        3,
        "composite-gradcheck",
        max_rel <= 1e-4 && secs < 60.0,
        &format!("max rel err {max_rel:.2e} across {checked} partials in {secs:.1}s"),
    );
}

#[test]
fn criterion_04_shape_ledger() {
    let device = Device::Cpu;
    let params = Params::new(0, DType::F32, &device);
    let encoder = AppearanceEncoder::new(&params, "enc").unwrap();
    let mut audited = 0usize;
    for size in [32usize, 64, 128] {
        let x = Tensor::zeros((1, 4, size, size), DType::F32, &device).unwrap();
        let trace = encoder.forward_traced(&x).unwrap();
        let mut expected: Vec<(String, usize, usize)> = vec![
            ("conv_in".into(), 64, size),
            ("down1".into(), 128, size / 2),
            ("down2".into(), 256, size / 4),
        ];
        for i in 0..8 {
            expected.push((format!("block{i}"), 256, size / 4));
        }
        expected.push(("up1".into(), 128, size / 2));
        expected.push(("up2".into(), 64, size));
        assert_eq!(trace.len(), expected.len(), "stage count at {size}");
        for ((name, tensor), (want_name, want_c, want_hw)) in trace.iter().zip(&expected) {
            let dims = tensor.dims4().unwrap();
            let pass = name == want_name && dims == (1, *want_c, *want_hw, *want_hw);
            if !pass {
                verdict(
                    4,
                    "shape-ledger",
                    false,
                    &format!("stage {name} at input {size}: got {dims:?}, want (1, {want_c}, {want_hw}, {want_hw})"),
                );
            }
            audited += 1;
        }
    }
    verdict(
        4,
        "shape-ledger",
        true,
        &format!("{audited} stage shapes match for inputs 32/64/128"),
    );
}

#[test]
fn criterion_05_metric_units() {
    let pred = Array3::from_elem((4, 4, 3), 0.6);
    let gt = Array3::from_elem((4, 4, 3), 0.5);
    let p = psnr(&pred, &gt).unwrap();
    let psnr_ok = (p - 20.0).abs() <= 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array3::from_shape_fn((16, 16, 3), |_| rng.random_range(0.0..1.0));
    let s = ssim(&x, &x).unwrap();
    let ssim_ok = (s - 1.0).abs() <= 1e-9;

    // Two categories, each with intersection 4 and union 12 by construction.
    let gt_half = Array2::from_shape_fn((4, 4), |(i, _)| u16::from(i < 2));
    let pred_half = Array2::from_shape_fn((4, 4), |(i, _)| u16::from((1..3).contains(&i)));
    let m = miou(&pred_half, &gt_half, 2, None).unwrap();
    let miou_ok = m == 1.0 / 3.0;

    let net = ConvPerceptualNet::synthetic(0).unwrap();
    let d = lpips(&x, &x, Some(&net)).unwrap().unwrap();
    let lpips_ok = d == 0.0;

    verdict(
        5,
        "metric-units",
        psnr_ok && ssim_ok && miou_ok && lpips_ok,
        &format!("psnr {p:.12}, ssim {s:.12}, miou {m:.12}, lpips(x,x) {d:.1e}"),
    );
}

#[test]
fn criterion_06_smoke_training() {
    let run = zoo_run("sair", ZOO_SEEDS[0]);
    let first = run.outcome.first_epoch_l1;
    let last = run.outcome.final_epoch_l1;
    verdict(
        6,
        "smoke-training",
        run.train_seconds < 600.0 && last <= 0.5 * first,
        &format!(
            "30 epochs in {:.0}s, epoch L1 {first:.4} -> {last:.4}",
            run.train_seconds
        ),
    );
}

#[test]
fn criterion_07_sair_vs_appearance_only() {
    let mut gaps = Vec::new();
    for seed in ZOO_SEEDS {
        let full = masked_psnr(zoo_run("sair", seed), RatioBucket::High);
        let plain = masked_psnr(zoo_run("appearance-only", seed), RatioBucket::High);
        gaps.push(full - plain);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    verdict(
        7,
        "sair-vs-appearance",
        mean_gap >= 0.3,
        &format!(
            "masked PSNR gap on 40-60% masks: {mean_gap:+.2} dB mean (per seed {:+.2}/{:+.2}/{:+.2})",
            gaps[0], gaps[1], gaps[2]
        ),
    );
}

#[test]
fn criterion_08_probe_completion() {
    let mut pairs = Vec::new();
    let mut all_better = true;
    for seed in ZOO_SEEDS {
        let run = zoo_run("sair", seed);
        let train = Dataset::open(run.config.dataset_spec(Split::Train)).unwrap();
        let test = Dataset::open(run.config.dataset_spec(Split::Test)).unwrap();
        let encoder = run.model.semantic_encoder().expect("sair carries an encoder");
        let probe = calibrate_prototypes(encoder, &train, seed, 8).unwrap();
        let mask_kind = run.config.mask_kind().unwrap();
        let outcome = probe_dataset(
            &run.model,
            &test,
            &mask_kind,
            RatioBucket::High,
            seed,
            &probe,
            None,
        )
        .unwrap();
        all_better &= outcome.sir_miou > outcome.raw_miou;
        pairs.push(format!(
            "{:.3}>{:.3}",
            outcome.sir_miou, outcome.raw_miou
        ));
    }
    verdict(
        8,
        "probe-completion",
        all_better,
        &format!("completed vs raw mIoU per seed: {}", pairs.join(", ")),
    );
}

#[test]
fn criterion_09_ablation_ordering() {
    let mut lines = Vec::new();
    let mut ordered = true;
    for seed in ZOO_SEEDS {
        let full = mean_psnr(zoo_run("sair", seed));
        let nfs = mean_psnr(zoo_run("no-sir", seed));
        let ous = mean_psnr(zoo_run("no-appearance", seed));
        ordered &= full > nfs && full > ous;
        lines.push(format!("seed {seed}: {full:.2} vs nfs {nfs:.2} / ous {ous:.2}"));
    }
    verdict(
        9,
        "ablation-ordering",
        ordered,
        &format!("mean PSNR {}", lines.join("; ")),
    );
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .into_iter()
        .map(f32::to_bits)
        .collect()
}

#[test]
fn criterion_10_determinism() {
    let run = zoo_run("sair", ZOO_SEEDS[0]);
    let buckets = RatioBucket::all();
    let first = common::eval_report(run, &buckets);
    let second = common::eval_report(run, &buckets);
    let reports_ok = first.to_json().unwrap() == second.to_json().unwrap()
        && first.to_text() == second.to_text();

    let device = Device::Cpu;
    let original = load_checkpoint(&run.outcome.checkpoint, &device).unwrap();
    let (_model, params) = model_from_checkpoint(&original, &device).unwrap();
    let mut adam = Adam::new(original.config.train.lr);
    adam.load_state(original.adam_step, original.adam_moments.clone());
    let dir = tempfile::tempdir().unwrap();
    let resaved = dir.path().join("resaved.safetensors");
    save_checkpoint(
        &resaved,
        &params,
        &adam,
        original.epochs_completed,
        &original.config,
    )
    .unwrap();
    let reread = load_checkpoint(&resaved, &device).unwrap();

    let mut state_ok = reread.adam_step == original.adam_step
        && reread.epochs_completed == original.epochs_completed
        && reread.params.len() == original.params.len()
        && reread.adam_moments.len() == original.adam_moments.len();
    if state_ok {
        for (name, tensor) in &original.params {
            state_ok &= bits(tensor) == bits(&reread.params[name]);
        }
        for (name, (m, v)) in &original.adam_moments {
            let (m2, v2) = &reread.adam_moments[name];
            state_ok &= bits(m) == bits(m2) && bits(v) == bits(v2);
        }
    }
    verdict(
        10,
        "determinism",
        reports_ok && state_ok,
        &format!(
            "reports byte-identical: {reports_ok}; optimizer state round-trips bitwise: {state_ok}"
        ),
    );
}
