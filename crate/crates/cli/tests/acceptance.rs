//! Acceptance checks. Every criterion prints one PASS/FAIL line and the
//! process exits non-zero if any fails. Arguments are substring filters on
//! the criterion names.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use aop3d::design::{optimize_design, run_external, DesignSpaceSpec};
use aop3d_core::boengine::{
    expected_improvement, gp_posterior, CategoricalDim, Config, GpHyper, GpModel, Kernel,
    ParamValue, Strategy,
};
use aop3d_core::instances::{extract_instances, preprocess_crop, write_crops, Preprocessing};
use aop3d_core::metrics::{compute_ipq, compute_pq, match_instances, IpqWeights, IqMode};
use aop3d_core::postproc::{apply_morphology, apply_postprocessing, PostprocParams};
use aop3d_core::segopt::{optimize_segmentation, LoadedBenchmark, SegOptOptions, SegOptResult};
use aop3d_core::semisup::{default_gamma, label_spread, SpreadOptions};
use aop3d_core::synthgen::{
    corrupt_labels, generate_benchmark, CorruptionOp, CorruptionSpec, IntensityModel, SplitAxis,
    SynthConfig,
};
use aop3d_core::volume::{paint_box, IntensityVolume, LabelVolume, UNIT_SPACING};
use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn boxes(shape: (usize, usize, usize), list: &[([usize; 3], [usize; 3], u32)]) -> LabelVolume {
    let mut a = Array3::<u32>::zeros(shape);
    for &(lo, hi, id) in list {
        paint_box(&mut a, lo, hi, id);
    }
    LabelVolume::from_array(a)
}

fn phantom(shape: [usize; 3], count: usize, gap: u32, radius: [f64; 2], seed: u64) -> LabelVolume {
    let cfg = SynthConfig {
        shape,
        spacing: UNIT_SPACING,
        count,
        radius,
        axis_ratio: [0.7, 1.0],
        min_gap: gap,
        margin: 2,
        intensity: IntensityModel::default(),
        seed,
    };
    generate_benchmark(&cfg).expect("phantom").1
}

fn corrupt(gt: &LabelVolume, ops: Vec<CorruptionOp>, seed: u64) -> LabelVolume {
    corrupt_labels(gt, &CorruptionSpec { ops, seed }).expect("corruption")
}

fn single_model_bench(gts: Vec<LabelVolume>, preds: Vec<LabelVolume>) -> LoadedBenchmark {
    let ids = (0..gts.len()).map(|i| format!("img{i}")).collect();
    LoadedBenchmark::new(ids, gts, BTreeMap::from([("model".to_owned(), preds)]))
        .expect("benchmark")
}

// ---------------------------------------------------------------- metrics

fn ipq_hand_suite() -> Outcome {
    let report = |pred: &LabelVolume, gt: &LabelVolume| {
        compute_ipq(
            &match_instances(pred, gt, 0.5).unwrap(),
            IpqWeights::default(),
            IqMode::default(),
        )
    };
    let cube = boxes((6, 6, 6), &[([0, 0, 0], [4, 4, 4], 1)]);
    let three = boxes(
        (8, 8, 8),
        &[
            ([0, 0, 0], [2, 2, 2], 1),
            ([4, 4, 4], [6, 6, 6], 2),
            ([0, 5, 0], [3, 8, 3], 3),
        ],
    );
    let slab = boxes((6, 6, 6), &[([0, 0, 0], [3, 4, 4], 1)]);
    let one = boxes((10, 10, 10), &[([0, 0, 0], [4, 4, 4], 1)]);
    let two = boxes(
        (10, 10, 10),
        &[([0, 0, 0], [4, 4, 4], 1), ([6, 6, 6], [9, 9, 9], 2)],
    );

    let mut cases = Vec::new();
    let r = report(&three, &three);
    cases.push(("identity sq", r.sq, 1.0));
    cases.push(("identity rq", r.rq, 1.0));
    cases.push(("identity iq", r.iq, 1.0));
    cases.push(("identity ipq", r.ipq, 1.0));
    let halves = boxes(
        (6, 6, 6),
        &[([0, 0, 0], [2, 4, 4], 1), ([2, 0, 0], [4, 4, 4], 2)],
    );
    cases.push(("2-way split ipq", report(&halves, &cube).ipq, 0.5));
    let thirds = boxes(
        (6, 6, 6),
        &[
            ([0, 0, 0], [1, 4, 4], 1),
            ([1, 0, 0], [2, 4, 4], 2),
            ([2, 0, 0], [3, 4, 4], 3),
        ],
    );
    cases.push(("3-way split iq", report(&thirds, &slab).iq, 1.0 / 6.0));
    cases.push(("hallucination rq", report(&two, &one).rq, 2.0 / 3.0));
    cases.push(("omission rq", report(&one, &two).rq, 2.0 / 3.0));
    let shifted = boxes((6, 6, 6), &[([0, 0, 1], [4, 4, 5], 1)]);
    let gt = boxes((6, 6, 6), &[([0, 0, 0], [4, 4, 4], 1)]);
    cases.push(("shifted cube sq", report(&shifted, &gt).sq, 0.6));

    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-9)
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    ensure(bad.is_empty(), || bad.join("; "))?;
    Ok(format!("{} values exact to 1e-9", cases.len()))
}

/// Each gt box owns one cell of a grid; its prediction stays inside that
/// cell, so every prediction overlaps at most one annotation. Empty cells
/// may hold hallucinations.
fn injective_pair(r: &mut ChaCha8Rng) -> (LabelVolume, LabelVolume) {
    let cell = 8;
    let n = 3;
    let mut gt = Array3::<u32>::zeros((cell * n, cell * n, cell * n));
    let mut pred = gt.clone();
    let mut gt_ids: Vec<u32> = (1..=27).collect();
    let mut pred_ids: Vec<u32> = (1..=27).map(|i| i * 3 + 5).collect();
    gt_ids.shuffle(r);
    pred_ids.shuffle(r);
    let random_box = |r: &mut ChaCha8Rng, origin: [usize; 3]| {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let l = r.random_range(0..cell - 1);
            lo[a] = origin[a] + l;
            hi[a] = origin[a] + r.random_range(l + 1..=cell);
        }
        (lo, hi)
    };
    let mut k = 0;
    for cz in 0..n {
        for cy in 0..n {
            for cx in 0..n {
                let origin = [cz * cell, cy * cell, cx * cell];
                if r.random_bool(0.7) {
                    let (lo, hi) = random_box(r, origin);
                    paint_box(&mut gt, lo, hi, gt_ids[k]);
                    let (lo, hi) = if r.random_bool(0.5) {
                        // small perturbation of the annotation
                        let mut lo2 = lo;
                        let mut hi2 = hi;
                        for a in 0..3 {
                            lo2[a] = (lo[a] + r.random_range(0..2)).min(hi[a] - 1).max(origin[a]);
                            hi2[a] = (hi[a] + r.random_range(0..2))
                                .min(origin[a] + cell)
                                .max(lo2[a] + 1);
                        }
                        (lo2, hi2)
                    } else {
                        random_box(r, origin)
                    };
                    paint_box(&mut pred, lo, hi, pred_ids[k]);
                } else if r.random_bool(0.3) {
                    let (lo, hi) = random_box(r, origin);
                    paint_box(&mut pred, lo, hi, pred_ids[k]);
                }
                k += 1;
            }
        }
    }
    (LabelVolume::from_array(pred), LabelVolume::from_array(gt))
}

fn pq_ipq_consistency() -> Outcome {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    let mut matched = 0;
    for i in 0..100 {
        let (pred, gt) = injective_pair(&mut r);
        let m = match_instances(&pred, &gt, 0.5).unwrap();
        ensure(m.groups.values().all(|g| g.len() == 1), || {
            format!("phantom {i} is not injective")
        })?;
        matched += m.tp.len();
        let ipq = compute_ipq(&m, IpqWeights::default(), IqMode::default()).ipq;
        let pq = compute_pq(&pred, &gt, 0.5).unwrap();
        worst = worst.max((ipq - pq).abs());
    }
    ensure(worst <= 1e-12, || format!("max |IPQ - PQ| = {worst:e}"))?;
    Ok(format!(
        "100 phantoms, {matched} true positives, max |IPQ - PQ| = {worst:e}"
    ))
}

/// Annotation boxes, then a prediction that keeps, shifts, slices, drops or
/// invents instances.
fn random_match_case(r: &mut ChaCha8Rng) -> (LabelVolume, LabelVolume) {
    let shape: (usize, usize, usize) = (
        r.random_range(4..=24),
        r.random_range(4..=24),
        r.random_range(4..=24),
    );
    let dims = [shape.0, shape.1, shape.2];
    let rand_box = |r: &mut ChaCha8Rng| {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            lo[a] = r.random_range(0..dims[a]);
            hi[a] = (lo[a] + r.random_range(1..=dims[a].div_ceil(2))).min(dims[a]);
        }
        (lo, hi)
    };
    let mut gt = Array3::<u32>::zeros(shape);
    let mut pred = Array3::<u32>::zeros(shape);
    let mut next_pred = 1u32;
    for _ in 0..r.random_range(1..=8) {
        let (lo, hi) = rand_box(r);
        let id = r.random_range(1..=12);
        paint_box(&mut gt, lo, hi, id);
        match r.random_range(0..4) {
            0 => {}
            1 => {
                let mut lo2 = lo;
                let mut hi2 = hi;
                let a = r.random_range(0..3);
                let shift = r.random_range(0..=2);
                lo2[a] = (lo[a] + shift).min(dims[a] - 1);
                hi2[a] = (hi[a] + shift).min(dims[a]).max(lo2[a] + 1);
                paint_box(&mut pred, lo2, hi2, next_pred);
                next_pred += 1;
            }
            _ => {
                let a = r.random_range(0..3);
                let pieces = r.random_range(1..=3);
                let len = hi[a] - lo[a];
                for k in 0..pieces {
                    let (mut l, mut h) = (lo, hi);
                    l[a] = lo[a] + len * k / pieces;
                    h[a] = lo[a] + len * (k + 1) / pieces;
                    if h[a] > l[a] {
                        paint_box(&mut pred, l, h, next_pred);
                        next_pred += 1;
                    }
                }
            }
        }
    }
    for _ in 0..r.random_range(0..=2) {
        let (lo, hi) = rand_box(r);
        paint_box(&mut pred, lo, hi, next_pred);
        next_pred += 1;
    }
    (LabelVolume::from_array(pred), LabelVolume::from_array(gt))
}

struct OracleMatch {
    tp: BTreeSet<u32>,
    fp: BTreeSet<u32>,
    fn_: BTreeSet<u32>,
}

/// All-pairs overlap counting straight from the voxels.
fn brute_force_match(pred: &Array3<u32>, gt: &Array3<u32>, tau: f64) -> OracleMatch {
    let ids = |a: &Array3<u32>| {
        a.iter()
            .copied()
            .filter(|&v| v != 0)
            .collect::<BTreeSet<u32>>()
    };
    let (pred_ids, gt_ids) = (ids(pred), ids(gt));
    let mut groups: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut out = OracleMatch {
        tp: BTreeSet::new(),
        fp: BTreeSet::new(),
        fn_: BTreeSet::new(),
    };
    for &p in &pred_ids {
        let mut best: Option<(usize, u32)> = None;
        for &g in &gt_ids {
            let n = pred
                .iter()
                .zip(gt.iter())
                .filter(|(&a, &b)| a == p && b == g)
                .count();
            if n > 0 && best.is_none_or(|(bn, _)| n > bn) {
                best = Some((n, g));
            }
        }
        match best {
            Some((_, g)) => {
                groups.entry(g).or_default().insert(p);
            }
            None => {
                out.fp.insert(p);
            }
        }
    }
    for &g in &gt_ids {
        let Some(members) = groups.get(&g) else {
            out.fn_.insert(g);
            continue;
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in pred.iter().zip(gt.iter()) {
            let in_pred = members.contains(&a);
            let in_gt = b == g;
            inter += usize::from(in_pred && in_gt);
            union += usize::from(in_pred || in_gt);
        }
        if inter as f64 / union as f64 > tau {
            out.tp.insert(g);
        } else {
            out.fn_.insert(g);
            out.fp.extend(members);
        }
    }
    out
}

fn metric_oracle() -> Outcome {
    let mut r = rng(5);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..50 {
        let (pred, gt) = random_match_case(&mut r);
        let m = match_instances(&pred, &gt, 0.5).unwrap();
        let o = brute_force_match(pred.data(), gt.data(), 0.5);
        ensure(m.tp == o.tp && m.fp == o.fp && m.fn_ == o.fn_, || {
            format!(
                "volume {i} {:?}: tp {:?}/{:?} fp {:?}/{:?} fn {:?}/{:?}",
                gt.shape(),
                m.tp,
                o.tp,
                m.fp,
                o.fp,
                m.fn_,
                o.fn_
            )
        })?;
        tp += o.tp.len();
        fp += o.fp.len();
        fn_ += o.fn_.len();
    }
    Ok(format!(
        "50 volumes identical (totals tp {tp}, fp {fp}, fn {fn_})"
    ))
}

// ------------------------------------------------------------ morphology

fn ball(r: u32) -> Vec<[isize; 3]> {
    let r = r as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dz * dz + dy * dy + dx * dx <= r * r {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn shifted(
    p: (usize, usize, usize),
    o: &[isize; 3],
    dim: (usize, usize, usize),
) -> Option<[usize; 3]> {
    let z = p.0 as isize + o[0];
    let y = p.1 as isize + o[1];
    let x = p.2 as isize + o[2];
    let ok = z >= 0
        && y >= 0
        && x >= 0
        && (z as usize) < dim.0
        && (y as usize) < dim.1
        && (x as usize) < dim.2;
    ok.then_some([z as usize, y as usize, x as usize])
}

fn sweep_dilate(mask: &Array3<bool>, r: u32) -> Array3<bool> {
    let se = ball(r);
    let dim = mask.dim();
    Array3::from_shape_fn(dim, |p| {
        se.iter()
            .any(|o| shifted(p, o, dim).is_some_and(|q| mask[q]))
    })
}

fn sweep_erode(mask: &Array3<bool>, r: u32) -> Array3<bool> {
    let se = ball(r);
    let dim = mask.dim();
    Array3::from_shape_fn(dim, |p| {
        mask[p]
            && se
                .iter()
                .all(|o| shifted(p, o, dim).is_none_or(|q| mask[q]))
    })
}

fn sweep_morphology(labels: &Array3<u32>, ed: i32, co: i32) -> Array3<u32> {
    let mut mask = labels.mapv(|l| l != 0);
    if ed > 0 {
        mask = sweep_dilate(&mask, ed as u32);
    } else if ed < 0 {
        mask = sweep_erode(&mask, ed.unsigned_abs());
    }
    if co > 0 {
        mask = sweep_erode(&sweep_dilate(&mask, co as u32), co as u32);
    } else if co < 0 {
        let r = co.unsigned_abs();
        mask = sweep_dilate(&sweep_erode(&mask, r), r);
    }
    let labeled: Vec<([usize; 3], u32)> = labels
        .indexed_iter()
        .filter(|(_, &l)| l != 0)
        .map(|((z, y, x), &l)| ([z, y, x], l))
        .collect();
    Array3::from_shape_fn(labels.dim(), |(z, y, x)| {
        if !mask[[z, y, x]] {
            return 0;
        }
        if labels[[z, y, x]] != 0 {
            return labels[[z, y, x]];
        }
        labeled
            .iter()
            .map(|&(q, l)| {
                let d: isize = (0..3)
                    .map(|a| ([z, y, x][a] as isize - q[a] as isize).pow(2))
                    .sum();
                (d, l)
            })
            .min()
            .map_or(0, |(_, l)| l)
    })
}

fn random_blobs(r: &mut ChaCha8Rng) -> LabelVolume {
    let dim = (
        r.random_range(8..=32),
        r.random_range(8..=32),
        r.random_range(8..=32),
    );
    let mut a = Array3::<u32>::zeros(dim);
    for id in 1..=r.random_range(1..=6u32) {
        let c = [
            r.random_range(0..dim.0),
            r.random_range(0..dim.1),
            r.random_range(0..dim.2),
        ];
        let rad = r.random_range(1.0..5.0f64);
        for ((z, y, x), v) in a.indexed_iter_mut() {
            let d2 = (z as f64 - c[0] as f64).powi(2)
                + (y as f64 - c[1] as f64).powi(2)
                + (x as f64 - c[2] as f64).powi(2);
            // ragged surface so that opening and closing have work to do
            if d2 <= rad * rad + r.random_range(-2.0..2.0) {
                *v = id;
            }
        }
    }
    for _ in 0..r.random_range(0..10) {
        let p = [
            r.random_range(0..dim.0),
            r.random_range(0..dim.1),
            r.random_range(0..dim.2),
        ];
        a[p] = r.random_range(1..=6);
    }
    LabelVolume::from_array(a)
}

fn morphology_oracle() -> Outcome {
    let mut r = rng(21);
    let mut voxels = 0usize;
    for i in 0..20 {
        let labels = random_blobs(&mut r);
        let (ed, co) = match i {
            0 => (6, 0),
            1 => (-5, 0),
            2 => (0, 5),
            3 => (0, -5),
            _ => (r.random_range(-4..=4), r.random_range(-3..=3)),
        };
        let got = apply_morphology(&labels, ed, co).unwrap();
        let want = sweep_morphology(labels.data(), ed, co);
        let diff = got
            .data()
            .iter()
            .zip(want.iter())
            .filter(|(a, b)| a != b)
            .count();
        ensure(diff == 0, || {
            format!(
                "volume {i} {:?} ed {ed} co {co}: {diff} voxels differ",
                labels.shape()
            )
        })?;
        voxels += want.len();
    }
    Ok(format!("20 volumes, {voxels} voxels, voxel-exact"))
}

fn omission_rule() -> Outcome {
    let mut r = rng(31);
    for i in 0..20 {
        let shape = [
            r.random_range(12..=32),
            r.random_range(12..=32),
            r.random_range(12..=32),
        ];
        let gt = phantom(
            shape,
            r.random_range(1..=6),
            r.random_range(0..=3),
            [2.0, 4.0],
            r.random(),
        );
        let out = apply_postprocessing(&gt, &PostprocParams::default()).unwrap();
        ensure(out == gt, || format!("phantom {i} changed"))?;
    }
    Ok("20 phantoms unchanged".into())
}

// -------------------------------------------------------- optimization

fn corruption_inversion() -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let gts: Vec<LabelVolume> = (0..2)
            .map(|k| phantom([64; 3], 12, 6, [4.0, 7.0], 1000 + 2 * seed + k))
            .collect();
        let fewest = gts.iter().map(LabelVolume::instance_count).min().unwrap();
        ensure(fewest >= 10, || {
            format!("seed {seed}: phantom with only {fewest} instances")
        })?;
        let preds = gts
            .iter()
            .map(|g| corrupt(g, vec![CorruptionOp::Dilate { radius: 2 }], seed))
            .collect();
        let bench = single_model_bench(gts, preds);
        let r =
            optimize_segmentation(&bench, &SegOptOptions::new(120, Strategy::Bayes, seed)).unwrap();
        let ok = r.best_params.theta_ed == -2 && r.best_ipq >= 0.95;
        passed += usize::from(ok);
        lines.push(format!(
            "seed {seed}: ed {} ipq {:.4}",
            r.best_params.theta_ed, r.best_ipq
        ));
    }
    let summary = format!("{passed}/5 seeds ({})", lines.join(", "));
    ensure(passed >= 4, || summary.clone())?;
    Ok(summary)
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips.
fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut choose = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += choose;
        }
        choose = choose * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

fn bayes_vs_random() -> Outcome {
    let gts: Vec<LabelVolume> = (0..2)
        .map(|k| phantom([40, 48, 48], 8, 4, [3.0, 5.5], 2000 + k))
        .collect();
    let ops = vec![
        CorruptionOp::SplitPlane {
            fraction: 0.5,
            axis: SplitAxis::X,
        },
        CorruptionOp::Dilate { radius: 1 },
    ];
    let preds = gts
        .iter()
        .enumerate()
        .map(|(k, g)| corrupt(g, ops.clone(), k as u64))
        .collect();
    let bench = single_model_bench(gts, preds);
    let run = |strategy, seed| -> SegOptResult {
        optimize_segmentation(&bench, &SegOptOptions::new(120, strategy, seed)).unwrap()
    };
    let (mut bayes, mut random) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        bayes.push(run(Strategy::Bayes, seed).best_ipq);
        random.push(run(Strategy::Random, seed).best_ipq);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = bayes.iter().zip(&random).filter(|(b, r)| b > r).count();
    let losses = bayes.iter().zip(&random).filter(|(b, r)| b < r).count();
    let p = sign_test(wins, losses);
    let summary = format!(
        "mean bayes {:.4} vs random {:.4}, {wins} wins {losses} losses, sign test p = {p:.4}",
        mean(&bayes),
        mean(&random)
    );
    ensure(
        mean(&bayes) >= mean(&random) && (p <= 0.1 || wins == losses),
        || summary.clone(),
    )?;
    Ok(summary)
}

fn dense_gp_oracle(
    x: &[Vec<f64>],
    y: &[f64],
    hyper: GpHyper,
    jitter: f64,
    at: &[f64],
) -> (f64, f64) {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        hyper
            .kernel
            .eval(&x[i], &x[j], hyper.length_scale, hyper.amplitude)
            + if i == j { jitter } else { 0.0 }
    });
    let ks = DVector::from_fn(n, |i, _| {
        hyper
            .kernel
            .eval(&x[i], at, hyper.length_scale, hyper.amplitude)
    });
    let lu = k.lu();
    let alpha = lu.solve(&DVector::from_column_slice(y)).unwrap();
    let w = lu.solve(&ks).unwrap();
    (ks.dot(&alpha), (hyper.amplitude - ks.dot(&w)).max(0.0))
}

fn gp_and_ei() -> Outcome {
    let mut r = rng(42);
    let (mut dm, mut dv) = (0.0f64, 0.0f64);
    for (n, d) in [(5usize, 1usize), (12, 2), (30, 3), (50, 4), (50, 8)] {
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random::<f64>()).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|p| p.iter().map(|v| (4.0 * v).sin()).sum::<f64>())
            .collect();
        for kernel in [Kernel::Matern52, Kernel::SquaredExponential] {
            for length_scale in [0.2, 0.5, 1.0] {
                let hyper = GpHyper {
                    kernel,
                    length_scale,
                    amplitude: 1.3,
                };
                let m = GpModel::fit(&x, &y, hyper, false).unwrap();
                for _ in 0..20 {
                    let at: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
                    let (mean, var) = gp_posterior(&m, &at);
                    let (om, ov) = dense_gp_oracle(&x, &y, hyper, m.jitter, &at);
                    dm = dm.max((mean - om).abs());
                    dv = dv.max((var - ov).abs());
                }
            }
        }
    }
    ensure(dm < 1e-8 && dv < 1e-8, || {
        format!("max |dmean| {dm:e}, |dvar| {dv:e}")
    })?;

    let mut de = 0.0f64;
    // stratified sampling: one uniform draw per quantile stratum, so the
    // estimator's own error sits far below the tolerance
    let samples = 1_000_000;
    let standard = StatrsNormal::new(0.0, 1.0).unwrap();
    for &(mu, sigma, best, xi) in &[
        (0.0, 1.0, 0.0, 0.0),
        (0.3, 0.5, 0.5, 0.01),
        (-1.0, 2.0, 0.2, 0.1),
        (1.0, 0.2, 0.9, 0.01),
    ] {
        let mut sum = 0.0;
        for i in 0..samples {
            let u = (i as f64 + r.random::<f64>()) / samples as f64;
            let v = mu + sigma * standard.inverse_cdf(u);
            sum += (v - best - xi).max(0.0);
        }
        let mc = sum / samples as f64;
        de = de.max((expected_improvement(mu, sigma * sigma, best, xi) - mc).abs());
    }
    ensure(de < 1e-3, || format!("max |EI - MC| {de:e}"))?;
    Ok(format!(
        "max |dmean| {dm:.1e}, |dvar| {dv:.1e}, |EI - MC| {de:.1e}"
    ))
}

fn design_optimizer() -> Outcome {
    const TRAINER: &str = r#"if grep -q '"head":"volume"' "$1" && grep -q '"preprocessing":"mask"' "$1"; then
  echo '{"objective": 1.0}'
else
  echo '{"objective": 0.5}'
fi
"#;
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("train.sh");
    std::fs::write(&script, TRAINER).unwrap();
    let command = format!("sh '{}' {{config}}", script.display());
    let dim = |name: &str, choices: &[&str]| CategoricalDim {
        name: name.into(),
        choices: choices.iter().map(|c| c.to_string()).collect(),
    };
    let spec = DesignSpaceSpec {
        dims: vec![
            dim("encoder", &["resnet", "convnext"]),
            dim("head", &["slice", "volume"]),
            dim("pretraining", &["full", "semi", "none"]),
            dim("preprocessing", &["mask", "distance"]),
        ],
        command: None,
    };

    // exhaustive evaluation of all cells
    let mut cells: Vec<Config> = vec![Config::new()];
    for d in &spec.dims {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                d.choices.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(d.name.clone(), ParamValue::Choice(v.clone()));
                    c
                })
            })
            .collect();
    }
    let optimum = cells
        .iter()
        .map(|c| run_external(&command, c, dir.path()).unwrap())
        .fold(f64::MIN, f64::max);

    let mut hits = 0;
    for seed in 0..10 {
        let trace = optimize_design(&spec, &command, 15, seed, None)
            .map_err(|e| format!("seed {seed}: {e:#}"))?;
        let best = trace.best.and_then(|t| t.objective).unwrap_or(f64::MIN);
        hits += usize::from(best == optimum);
    }
    let summary = format!(
        "{} cells, optimum {optimum} found in {hits}/10 seeds",
        cells.len()
    );
    ensure(hits >= 9, || summary.clone())?;
    Ok(summary)
}

// ------------------------------------------------- instances and labels

fn brute_distance(mask: &Array3<bool>, p: (usize, usize, usize)) -> f64 {
    mask.indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((z, y, x), _)| {
            ((z as f64 - p.0 as f64).powi(2)
                + (y as f64 - p.1 as f64).powi(2)
                + (x as f64 - p.2 as f64).powi(2))
            .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn distance_preprocessing() -> Outcome {
    let mut r = rng(51);
    let mut crops = Vec::new();
    let mut seed = 0;
    while crops.len() < 10 {
        let (img, labels) = generate_benchmark(&SynthConfig {
            shape: [24, 32, 32],
            spacing: UNIT_SPACING,
            count: 4,
            radius: [2.5, 5.0],
            axis_ratio: [0.5, 1.0],
            min_gap: 1,
            margin: 0,
            intensity: IntensityModel::default(),
            seed,
        })
        .unwrap();
        crops.extend(extract_instances("s", &labels, &img, r.random_range(1..=5)).unwrap());
        seed += 1;
    }
    crops.truncate(10);
    let mut worst = 0.0f64;
    for c in &crops {
        let sigma = r.random_range(0.5..4.0);
        let out = preprocess_crop(c, Preprocessing::Distance, sigma).unwrap();
        for (p, &v) in out.indexed_iter() {
            let want = c.intensity[p] as f64 * (-brute_distance(&c.mask, p) / sigma).exp();
            worst = worst.max((v as f64 - want).abs());
        }
    }
    ensure(worst < 1e-6, || format!("max |delta| {worst:e}"))?;

    let spot = |value: f32, sigma: f64, at: [usize; 3]| {
        let mut a = Array3::<u32>::zeros((3, 3, 3));
        a[[1, 1, 1]] = 1;
        let img = IntensityVolume::filled([3, 3, 3], value).unwrap();
        let c = extract_instances("t", &LabelVolume::from_array(a), &img, 1)
            .unwrap()
            .remove(0);
        preprocess_crop(&c, Preprocessing::Distance, sigma).unwrap()[at] as f64
    };
    let a = spot(1.0, 1.0, [1, 1, 2]);
    let b = spot(0.5, 2.0, [0, 1, 1]);
    ensure((a - (-1f64).exp()).abs() < 1e-6, || {
        format!("spot e^-1 gave {a}")
    })?;
    ensure((b - 0.5 * (-0.5f64).exp()).abs() < 1e-6, || {
        format!("spot 0.5 e^-0.5 gave {b}")
    })?;
    Ok(format!(
        "10 crops, max |delta| {worst:.1e}; spots {a:.6}, {b:.6}"
    ))
}

fn label_spreading() -> Outcome {
    // three coincident points per cluster, one seed each
    let x = DMatrix::from_row_slice(
        6,
        2,
        &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0],
    );
    let seeds = BTreeMap::from([(1, 1), (4, 0)]);
    let res = label_spread(&x, &seeds, 2, &SpreadOptions::default()).unwrap();
    ensure(res.labels == [1, 1, 1, 0, 0, 0], || {
        format!("coincident fixture labels {:?}", res.labels)
    })?;

    // two noisy clusters in 5 dimensions
    let mut r = rng(61);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let n = 60;
    let x = DMatrix::from_fn(
        n,
        5,
        |i, _| if i < n / 2 { 0.0 } else { 6.0 } + noise.sample(&mut r),
    );
    let seeds = BTreeMap::from([(3, 0), (n - 5, 1)]);
    let res = label_spread(&x, &seeds, 2, &SpreadOptions::default()).unwrap();
    let wrong = (0..n)
        .filter(|&i| res.labels[i] != usize::from(i >= n / 2))
        .count();
    ensure(wrong == 0, || {
        format!("{wrong} of {n} points off their cluster")
    })?;

    // scaling features by 2 and gamma by 1/4 leaves every output unchanged
    let a = label_spread(
        &x,
        &seeds,
        2,
        &SpreadOptions {
            gamma: Some(0.3),
            ..Default::default()
        },
    )
    .unwrap();
    let mut b = label_spread(
        &(&x * 2.0),
        &seeds,
        2,
        &SpreadOptions {
            gamma: Some(0.075),
            ..Default::default()
        },
    )
    .unwrap();
    b.gamma = a.gamma;
    ensure(a == b, || "gamma rescaling changed the result".into())?;
    let (g1, g2) = (default_gamma(&x), default_gamma(&(&x * 2.0)));
    ensure(g2 * 4.0 == g1, || {
        format!("default gamma {g1} vs {g2} after scaling")
    })?;
    Ok(format!(
        "6/6 and {n}/{n} cluster-consistent; rescaling identity exact"
    ))
}

// ---------------------------------------------------- annotation service

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(root: &Path) -> Result<Self, String> {
        let port = TcpListener::bind("127.0.0.1:0")
            .and_then(|l| l.local_addr())
            .map_err(|e| e.to_string())?
            .port();
        let child = Command::new(env!("CARGO_BIN_EXE_aop3d"))
            .arg("annotate")
            .arg("--crops")
            .arg(root)
            .arg("--classes")
            .arg(root.join("classes.json"))
            .arg("--labels-out")
            .arg(root.join("labels.jsonl"))
            .arg("--port")
            .arg(port.to_string())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let addr = format!("127.0.0.1:{port}");
        let deadline = Instant::now() + Duration::from_secs(30);
        while TcpStream::connect(&addr).is_err() {
            if Instant::now() > deadline {
                return Err("server did not start".into());
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        Ok(Self { child, addr })
    }

    fn request(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Value, String> {
        let body = body.map(Value::to_string).unwrap_or_default();
        let mut s = TcpStream::connect(&self.addr).map_err(|e| e.to_string())?;
        s.set_read_timeout(Some(Duration::from_secs(30)))
            .map_err(|e| e.to_string())?;
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .map_err(|e| e.to_string())?;
        let mut raw = String::new();
        s.read_to_string(&mut raw).map_err(|e| e.to_string())?;
        let (head, payload) = raw.split_once("\r\n\r\n").ok_or("malformed response")?;
        if !head.starts_with("HTTP/1.1 200") {
            return Err(format!("{method} {path}: {head}"));
        }
        serde_json::from_str(payload).map_err(|e| format!("{method} {path}: {e}"))
    }

    /// SIGKILL: no chance to flush anything.
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn annotation_durability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // "b" written first so order cannot come from creation order
    for (image, count) in [("b", 80u32), ("a", 120)] {
        let mut labels = Array3::<u32>::zeros((4, 40, 48));
        for i in 0..count {
            let (y, x) = ((i / 12) as usize * 4, (i % 12) as usize * 4);
            paint_box(&mut labels, [1, y + 1, x + 1], [3, y + 3, x + 3], i + 1);
        }
        let img = IntensityVolume::filled([4, 40, 48], 0.5).unwrap();
        write_crops(
            root,
            &extract_instances(image, &LabelVolume::from_array(labels), &img, 1).unwrap(),
        )
        .unwrap();
    }
    std::fs::write(
        root.join("classes.json"),
        r#"["Schwann", "Myotube", "debris", "other"]"#,
    )
    .unwrap();
    let expected_order: Vec<String> = (1..=120)
        .map(|i| format!("a/{i}"))
        .chain((1..=80).map(|i| format!("b/{i}")))
        .collect();

    let mut server = Server::start(root)?;
    let mut order = Vec::new();
    for k in 0..200 {
        if k == 100 {
            server.kill();
            server = Server::start(root)?;
        }
        let next = server.request("GET", "/api/next", None)?;
        ensure(next["done"] == false, || format!("done after {k} labels"))?;
        let (image, id) = (
            next["instance"]["image"].as_str().unwrap_or_default(),
            &next["instance"]["id"],
        );
        order.push(format!("{image}/{id}"));
        server.request(
            "POST",
            &format!("/api/instances/{image}/{id}/label"),
            Some(&json!({"class": k % 4})),
        )?;
    }
    ensure(order == expected_order, || {
        let at = order
            .iter()
            .zip(&expected_order)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        format!(
            "presentation order diverges at {at}: {} vs {}",
            order[at], expected_order[at]
        )
    })?;
    ensure(
        server.request("GET", "/api/next", None)?["done"] == true,
        || "queue not exhausted".into(),
    )?;
    server.kill();

    let log = std::fs::read_to_string(root.join("labels.jsonl")).unwrap();
    let records: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    ensure(records.len() == 200, || {
        format!("{} records stored", records.len())
    })?;
    let stored: BTreeSet<(String, u64)> = records
        .iter()
        .map(|r| {
            (
                format!("{}/{}", r["image"].as_str().unwrap(), r["id"]),
                r["class"].as_u64().unwrap(),
            )
        })
        .collect();
    let want: BTreeSet<(String, u64)> = expected_order
        .iter()
        .enumerate()
        .map(|(k, key)| (key.clone(), k as u64 % 4))
        .collect();
    ensure(stored == want, || {
        "stored records differ from the posted labels".into()
    })?;

    let server = Server::start(root)?;
    let progress = server.request("GET", "/api/progress", None)?;
    server.kill();
    ensure(progress["labeled"] == 200, || {
        format!("progress after restart: {progress}")
    })?;
    Ok("200 records after a kill at 100; presentation order ascending".into())
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "ipq_hand_suite",
            budget: Some(Duration::from_secs(1)),
            run: ipq_hand_suite,
        },
        Criterion {
            name: "pq_equals_ipq_on_injective_phantoms",
            budget: None,
            run: pq_ipq_consistency,
        },
        Criterion {
            name: "match_vs_all_pairs_oracle",
            budget: None,
            run: metric_oracle,
        },
        Criterion {
            name: "morphology_vs_structuring_element_sweep",
            budget: None,
            run: morphology_oracle,
        },
        Criterion {
            name: "corruption_inversion",
            budget: Some(Duration::from_secs(600)),
            run: corruption_inversion,
        },
        Criterion {
            name: "bayes_at_least_random",
            budget: Some(Duration::from_secs(1800)),
            run: bayes_vs_random,
        },
        Criterion {
            name: "omission_rule_identity",
            budget: None,
            run: omission_rule,
        },
        Criterion {
            name: "gp_posterior_and_ei",
            budget: None,
            run: gp_and_ei,
        },
        Criterion {
            name: "distance_preprocessing",
            budget: None,
            run: distance_preprocessing,
        },
        Criterion {
            name: "label_spreading",
            budget: None,
            run: label_spreading,
        },
        Criterion {
            name: "design_optimizer",
            budget: None,
            run: design_optimizer,
        },
        Criterion {
            name: "annotation_durability",
            budget: None,
            run: annotation_durability,
        },
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
    {
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.1?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {} ({detail}) [{elapsed:.1?}]", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} ({detail}) [{elapsed:.1?}]", c.name);
            }
        }
    }
    println!("{} of {ran} acceptance criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
