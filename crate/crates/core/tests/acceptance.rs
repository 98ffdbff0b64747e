//! End-to-end acceptance checks. Every test prints one
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Criteria 4 and 5 train seven models. By default they run on a small
//! dataset with narrow branches and only report the verdict; set
//! `NMFNET_ACCEPT=full` to train at full size (about two hours on one core)
//! and assert. `NMFNET_ACCEPT_DATA` points the full run at an already
//! generated default dataset. `NMFNET_BLESS=1` rewrites the goldens.

mod common;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nmfnet::cloudnet::{clouds_to_tensor, CloudBranch, CloudConfig, PointCloud};
use nmfnet::dataset::{
    generate_dataset, make_batch, split, FrameCache, FrameRecord, GenConfig, LoadOptions, Manifest,
};
use nmfnet::evaltools::{ablation_suite, ablation_tsv, grad_cam, predict_records, rmse, CamBranch, CamMap};
use nmfnet::lasermap::{scan_to_distance_map, DistanceMapConfig, LaserScan};
use nmfnet::nmfnet::{ModalitySet, Model, NetConfig};
use nmfnet::simworld::Archetype;
use nmfnet::tensor::{Graph, Mode, ParamStore};
use nmfnet::trainer::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 60.0;
const COS_TOL: f64 = 1e-9;
const PERM_TOL: f32 = 1e-6;
const DR_MARGIN: f64 = 0.01;
const SINGLE_MARGIN: f64 = 1.20;
const LATENCY_MS: f64 = 100.0;
const GOLDEN_TOL: f64 = 1e-4;

/// Written to the process stdout directly so the line shows up even when the
/// harness captures test output.
fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

fn goldens() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/goldens")
}

fn bless() -> bool {
    std::env::var("NMFNET_BLESS").is_ok_and(|v| v == "1")
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut checks = common::primitive_gradient_checks();
    checks.extend(common::network_gradient_checks());
    let secs = start.elapsed().as_secs_f64();
    let (name, worst) = checks
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = worst < GRAD_TOL && secs < GRAD_BUDGET_S;
    verdict(
        1,
        pass,
        &format!("{} checks, worst {worst:.2e} ({name}), {secs:.1} s", checks.len()),
    );
    assert!(pass);
}

/// Per-beam reference raster written from the projection formula alone.
fn brute_force_map(scan: &LaserScan, cfg: &DistanceMapConfig) -> Vec<u8> {
    let mut px = vec![0u8; cfg.height * cfg.width];
    let (x0, y0) = cfg.origin;
    for (i, &r) in scan.ranges.iter().enumerate() {
        if !(r.is_finite() && r > 0.0 && r < scan.max_range) {
            continue;
        }
        let d = r / cfg.meters_per_pixel;
        let a = scan.phi * i as f64;
        let col = (x0 + d * (PI - a).cos()).round();
        let row = (y0 - d * a.sin()).round();
        if col >= 0.0 && row >= 0.0 && (col as usize) < cfg.width && (row as usize) < cfg.height {
            px[row as usize * cfg.width + col as usize] = 1;
        }
    }
    px
}

#[test]
fn criterion_2_distance_map_matches_per_beam_reference() {
    let cfg = DistanceMapConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatched = 0;
    for _ in 0..1000 {
        let beams = rng.gen_range(2..=361);
        let max_range = rng.gen_range(5.0..30.0);
        let ranges = (0..beams)
            .map(|_| match rng.gen_range(0..10) {
                0 => max_range,
                1 => f64::INFINITY,
                _ => rng.gen_range(0.0..max_range * 1.1),
            })
            .collect();
        let scan = LaserScan::front(ranges, max_range).unwrap();
        let (map, _) = scan_to_distance_map(&scan, &cfg);
        mismatched += usize::from(map.pixels != brute_force_map(&scan, &cfg));
    }
    let worst_identity = (0..=100_000)
        .map(|k| PI * k as f64 / 100_000.0)
        .map(|t| ((PI - t).cos() + t.cos()).abs())
        .fold(0.0, f64::max);
    let pass = mismatched == 0 && worst_identity <= COS_TOL;
    verdict(
        2,
        pass,
        &format!("{mismatched} of 1000 scans differ, |cos(pi-t)+cos t| <= {worst_identity:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_cloud_branch_is_order_free_and_starts_aligned() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = CloudConfig::default();
    let branch = CloudBranch::new(&mut store, "cloud", &cfg, &mut rng);
    let points: Vec<[f32; 3]> = (0..256)
        .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(0.0..10.0), rng.gen_range(-1.0..2.0)])
        .collect();
    let run = |pts: &[[f32; 3]], g: &mut Graph<f32>| {
        let cloud = PointCloud::new(pts.to_vec());
        let x = g.input(clouds_to_tensor(&[&cloud]).unwrap());
        branch.forward(&store, g, x, Mode::Eval).unwrap()
    };
    let mut g = Graph::new();
    let out = run(&points, &mut g);
    let reference = g.value(out.feature).data().to_vec();
    let mut identity_off = 0.0f32;
    for (t, k) in [(out.input_transform, 3), (out.feature_transform, cfg.feature_transform_dim())] {
        for (i, &v) in g.value(t).data().iter().enumerate() {
            let want = if i / k % k == i % k { 1.0 } else { 0.0 };
            identity_off = identity_off.max((v - want).abs());
        }
    }
    let mut worst = 0.0f32;
    let mut perm = points.clone();
    for _ in 0..100 {
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut g = Graph::new();
        let out = run(&perm, &mut g);
        for (a, b) in reference.iter().zip(g.value(out.feature).data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let pass = worst <= PERM_TOL && identity_off == 0.0;
    verdict(
        3,
        pass,
        &format!("max feature change over 100 permutations {worst:.1e}, T-net offset from identity {identity_off:e}"),
    );
    assert!(pass);
}

struct Scale {
    full: bool,
    gen: GenConfig,
    load: LoadOptions,
    train: TrainConfig,
}

fn scale() -> Scale {
    if std::env::var("NMFNET_ACCEPT").is_ok_and(|v| v == "full") {
        Scale {
            full: true,
            gen: GenConfig::default(),
            load: LoadOptions {
                n_sample: 128,
                ..LoadOptions::default()
            },
            train: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
        }
    } else {
        Scale {
            full: false,
            gen: GenConfig {
                episodes: 6,
                frames: 30,
                ..GenConfig::default()
            },
            load: LoadOptions {
                n_sample: 64,
                ..LoadOptions::default()
            },
            train: TrainConfig {
                epochs: 4,
                net: common::small_net(),
                ..TrainConfig::default()
            },
        }
    }
}

fn dataset(s: &Scale) -> (Option<tempfile::TempDir>, PathBuf, Manifest) {
    if s.full {
        if let Ok(root) = std::env::var("NMFNET_ACCEPT_DATA") {
            let root = PathBuf::from(root);
            let manifest = Manifest::load(&root).unwrap();
            assert_eq!(manifest.records.len(), s.gen.episodes * s.gen.frames * s.gen.envs.len());
            return (None, root, manifest);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&s.gen, dir.path()).unwrap();
    let root = dir.path().to_path_buf();
    (Some(dir), root, manifest)
}

#[test]
fn criteria_4_and_5_fusion_against_single_modalities() {
    let s = scale();
    let tag = if s.full { "full scale" } else { "reduced scale, not asserted" };
    let (_guard, root, manifest) = dataset(&s);
    let (train_set, test_set) = split(&manifest.records, 0.7, 0).unwrap();
    let cache = FrameCache::load(&root, &manifest.records, ModalitySet::ALL, &s.load).unwrap();
    let rows = ablation_suite(&cache, &train_set, &test_set, &s.train, |m, e| {
        eprintln!("{m} epoch {} mean loss {:.6}", e.epoch, e.mean_loss);
    })
    .unwrap();
    assert_eq!(rows.len(), 7);
    let avg = |m: ModalitySet| {
        rows.iter()
            .find(|r| r.modalities == m)
            .and_then(|r| r.average())
            .unwrap_or(f64::INFINITY)
    };

    let dr_test: Vec<FrameRecord> = test_set.iter().filter(|r| r.dr_flag).cloned().collect();
    let fusion_cfg = TrainConfig {
        modalities: ModalitySet::ALL,
        ..s.train.clone()
    };
    let with_dr = train(&cache, &train_set, &fusion_cfg).unwrap().model;
    let without_dr = train(&cache, &train_set, &TrainConfig {
        dr_training: false,
        ..fusion_cfg
    })
    .unwrap()
    .model;
    let shifted = |m: &Model| rmse(m, &cache, &dr_test, 8).unwrap().average.unwrap_or(f64::INFINITY);
    let (dr, no_dr) = (shifted(&with_dr), shifted(&without_dr));

    let mut table = ablation_tsv(&rows);
    let _ = writeln!(table, "texture-shifted\tdr={dr:.6}\tno-dr={no_dr:.6}");
    print!("{table}");
    let golden = goldens().join(if s.full { "ablation_full.tsv" } else { "ablation_reduced.tsv" });
    if bless() {
        std::fs::write(&golden, &table).unwrap();
    }

    let rgb: ModalitySet = "rgb".parse().unwrap();
    let fusion = avg(ModalitySet::ALL);
    let pass4 = fusion < avg(rgb) && dr <= no_dr + DR_MARGIN;
    verdict(
        4,
        pass4,
        &format!(
            "({tag}) fusion {fusion:.4} vs rgb {:.4}; texture-shifted dr {dr:.4} vs no-dr {no_dr:.4}",
            avg(rgb)
        ),
    );
    let singles: Vec<(ModalitySet, f64)> = ModalitySet::ablation_rows()[..3].iter().map(|&m| (m, avg(m))).collect();
    let pass5 = singles.iter().all(|&(_, a)| a >= SINGLE_MARGIN * fusion);
    let ratios: Vec<String> = singles.iter().map(|(m, a)| format!("{m} {:.2}x", a / fusion)).collect();
    verdict(5, pass5, &format!("({tag}) single/fusion rmse: {}", ratios.join(", ")));
    if s.full {
        assert!(pass4 && pass5);
    }
}

#[test]
fn criterion_6_gen_train_eval_are_byte_identical() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let gen = GenConfig {
            episodes: 2,
            frames: 8,
            seed: 6,
            ..GenConfig::default()
        };
        let manifest = generate_dataset(&gen, dir.path()).unwrap();
        let mut bytes = std::fs::read(dir.path().join("manifest.tsv")).unwrap();
        for r in &manifest.records {
            for p in [&r.rgb_path, &r.scan_path, &r.cloud_path] {
                bytes.extend(std::fs::read(dir.path().join(p)).unwrap());
            }
        }
        let opts = LoadOptions {
            n_sample: 64,
            ..LoadOptions::default()
        };
        let cache = FrameCache::load(dir.path(), &manifest.records, ModalitySet::ALL, &opts).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            net: common::small_net(),
            ..TrainConfig::default()
        };
        let state = train(&cache, &manifest.records, &cfg).unwrap();
        let weights = state.model.encode();
        let report = rmse(&state.model, &cache, &manifest.records, 8).unwrap().to_tsv();
        (bytes, weights, report)
    };
    let (a, b) = (run(), run());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    let pass = same.iter().all(|&x| x);
    verdict(6, pass, &format!("gen {} train {} eval {}", same[0], same[1], same[2]));
    assert!(pass);
}

#[test]
fn criterion_7_checkpoint_round_trip_is_bitwise() {
    let (dir, manifest) = common::small_dataset(&Archetype::ALL, 2, 12, 7);
    let opts = LoadOptions {
        n_sample: 64,
        ..LoadOptions::default()
    };
    let cache = FrameCache::load(dir.path(), &manifest.records, ModalitySet::ALL, &opts).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        net: common::small_net(),
        ..TrainConfig::default()
    };
    let model = train(&cache, &manifest.records, &cfg).unwrap().model;
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let probe = &manifest.records[..64];
    let a = predict_records(&model, &cache, probe, 8).unwrap();
    let b = predict_records(&loaded, &cache, probe, 8).unwrap();
    let differing = a.iter().zip(&b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    let pass = a.len() == 64 && differing == 0;
    verdict(7, pass, &format!("{differing} of {} predictions differ", a.len()));
    assert!(pass);
}

#[test]
fn criterion_8_single_frame_inference_is_fast() {
    let (dir, manifest) = common::small_dataset(&[Archetype::House], 1, 2, 8);
    let cache = FrameCache::load(dir.path(), &manifest.records, ModalitySet::ALL, &LoadOptions::default()).unwrap();
    let model = Model::new(&NetConfig::default(), 8).unwrap();
    let input = make_batch(&cache, &[manifest.records[0].frame_id], ModalitySet::ALL)
        .unwrap()
        .input;
    for _ in 0..2 {
        model.predict(&input).unwrap();
    }
    let mut times: Vec<f64> = (0..15)
        .map(|_| {
            let t = Instant::now();
            model.predict(&input).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let pass = median < LATENCY_MS;
    verdict(8, pass, &format!("median {median:.1} ms over 15 full-size frames"));
    assert!(pass);
}

/// A compact fingerprint of a map: mass, peak and 4×4 block means.
fn summarize(map: &CamMap) -> Vec<f64> {
    let (h, w) = (map.height, map.width);
    let at = |r: usize, c: usize| f64::from(map.values[r * w + c]);
    let mut out = vec![
        map.values.iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64,
        map.values.iter().copied().fold(0.0f32, f32::max).into(),
    ];
    for br in 0..4 {
        for bc in 0..4 {
            let (rows, cols) = (br * h / 4..(br + 1) * h / 4, bc * w / 4..(bc + 1) * w / 4);
            let n = rows.len() * cols.len();
            let s: f64 = rows.flat_map(|r| cols.clone().map(move |c| (r, c))).map(|(r, c)| at(r, c)).sum();
            out.push(s / n as f64);
        }
    }
    out
}

#[test]
fn criterion_9_grad_cam_contract_and_goldens() {
    let (dir, manifest) = common::small_dataset(&Archetype::ALL, 2, 10, 9);
    let opts = LoadOptions {
        n_sample: 64,
        ..LoadOptions::default()
    };
    let cache = FrameCache::load(dir.path(), &manifest.records, ModalitySet::ALL, &opts).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        net: common::small_net(),
        ..TrainConfig::default()
    };
    let model = train(&cache, &manifest.records, &cfg).unwrap().model;
    let zero = Model::new(&common::small_net(), 9).unwrap();

    let mut contract = true;
    let mut text = String::new();
    for r in manifest.records.iter().step_by(6).take(10) {
        let input = make_batch(&cache, &[r.frame_id], ModalitySet::ALL).unwrap().input;
        for (branch, h, w) in [(CamBranch::Rgb, 60, 80), (CamBranch::Laser, 40, 80)] {
            let map = grad_cam(&model, &input, branch).unwrap();
            contract &= (map.height, map.width, map.values.len()) == (h, w, h * w);
            contract &= map.values.iter().all(|v| (0.0..=1.0).contains(v));
            contract &= grad_cam(&zero, &input, branch).unwrap().values.iter().all(|&v| v == 0.0);
            let cells: Vec<String> = summarize(&map).iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(text, "{}\t{branch:?}\t{}", r.frame_id, cells.join("\t"));
        }
    }
    let path = goldens().join("gradcam_probe.tsv");
    if bless() {
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap_or_default();
    let worst = compare_tables(&golden, &text);
    let pass = contract && worst.is_some_and(|d| d <= GOLDEN_TOL);
    verdict(
        9,
        pass,
        &format!("contract {contract}, 10 probe frames off golden by {worst:?}"),
    );
    assert!(pass);
}

/// Largest absolute difference between numeric cells of two TSV tables with
/// matching labels, or `None` when the layouts differ.
fn compare_tables(a: &str, b: &str) -> Option<f64> {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.len() != lb.len() || la.is_empty() {
        return None;
    }
    let mut worst = 0.0f64;
    for (x, y) in la.iter().zip(&lb) {
        let (cx, cy): (Vec<&str>, Vec<&str>) = (x.split('\t').collect(), y.split('\t').collect());
        if cx.len() != cy.len() || cx[..2] != cy[..2] {
            return None;
        }
        for (u, v) in cx[2..].iter().zip(&cy[2..]) {
            worst = worst.max((u.parse::<f64>().ok()? - v.parse::<f64>().ok()?).abs());
        }
    }
    Some(worst)
}
