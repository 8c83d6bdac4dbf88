//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p p3d --test acceptance` runs all ten; pass numbers after
//! `--` to run a subset, e.g. `-- 2 9`.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use p3d::checkpoint::{encode, load_tensors, payload_hash};
use p3d::conv::{conv3d, conv3d_ref, conv_pointwise, conv_spatial, conv_temporal};
use p3d::gradcheck::{grad_check, standard_probes, DEFAULT_STEP, TOLERANCE};
use p3d::network::{count_parameters, load_checkpoint, model_size_bytes, save_checkpoint, summarize};
use p3d::params::{ParamKind, Params};
use p3d::pipeline::train::evaluate;
use p3d::pipeline::{extract_features, make_motion_dataset, train, ClipSource, Preprocess, SampleMode, TrainConfig};
use p3d::{
    build_network, ArchSpec, BlockPolicy, ClipTensor, ConvWeights, InitRule, KernelSpec, NetworkGraph, Real, SplitMix64,
    TemporalInit, Widths,
};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

/// Straight from the definition: zero padding, f64 accumulation, no shared
/// code with the library's kernels.
fn naive_conv<T: Real>(x: &ClipTensor<T>, w: &ConvWeights<T>, s: &KernelSpec) -> Vec<f64> {
    let [n, ci, t, h, wd] = x.shape();
    let to = (t + 2 * s.pad_t - s.d) / s.stride_t + 1;
    let ho = (h + 2 * s.pad_s - s.k) / s.stride_s + 1;
    let wo = (wd + 2 * s.pad_s - s.k) / s.stride_s + 1;
    let mut out = Vec::with_capacity(n * s.out_ch * to * ho * wo);
    for b in 0..n {
        for o in 0..s.out_ch {
            for ot in 0..to {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for i in 0..ci {
                            for dt in 0..s.d {
                                for ky in 0..s.k {
                                    for kx in 0..s.k {
                                        let it = (ot * s.stride_t + dt) as isize - s.pad_t as isize;
                                        let iy = (oy * s.stride_s + ky) as isize - s.pad_s as isize;
                                        let ix = (ox * s.stride_s + kx) as isize - s.pad_s as isize;
                                        if it < 0 || iy < 0 || ix < 0 || it >= t as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += x.get(b, i, it as usize, iy as usize, ix as usize).as_f64()
                                            * w.kernel.get(o, i, dt, ky, kx).as_f64();
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

fn max_gap<T: Real>(a: &ClipTensor<T>, b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.data().iter().zip(b).map(|(x, y)| (x.as_f64() - y).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy)]
enum Op {
    Spatial,
    Temporal,
    Pointwise,
    Full,
}

fn random_config<T: Real>(op: Op, rng: &mut SplitMix64) -> (ClipTensor<T>, ConvWeights<T>, KernelSpec) {
    let r = |rng: &mut SplitMix64, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
    let (d, k) = match op {
        Op::Spatial => (1, r(rng, 1, 5)),
        Op::Temporal => (r(rng, 1, 5), 1),
        Op::Pointwise => (1, 1),
        Op::Full => (r(rng, 1, 3), r(rng, 1, 3)),
    };
    let (st, ss) = match op {
        Op::Spatial => (1, r(rng, 1, 3)),
        Op::Temporal => (r(rng, 1, 3), 1),
        _ => (r(rng, 1, 2), r(rng, 1, 2)),
    };
    let pt = if matches!(op, Op::Temporal | Op::Full) { rng.below(d) } else { 0 };
    let ps = if matches!(op, Op::Spatial | Op::Full) { rng.below(k) } else { 0 };
    let spec = KernelSpec::new(r(rng, 1, 5), r(rng, 1, 5), d, k)
        .with_stride(st, ss)
        .with_padding(pt, ps);
    let t = r(rng, d, d + 5);
    let h = r(rng, k, k + 6);
    let w = r(rng, k, k + 6);
    let x = ClipTensor::uniform([r(rng, 1, 3), spec.in_ch, t, h, w], -1.0, 1.0, rng.next_u64()).unwrap();
    let wt = ConvWeights::uniform(&spec, -1.0, 1.0, rng.next_u64()).unwrap();
    (x, wt, spec)
}

fn run_op<T: Real>(op: Op, x: &ClipTensor<T>, w: &ConvWeights<T>, s: &KernelSpec) -> p3d::Result<ClipTensor<T>> {
    match op {
        Op::Spatial => conv_spatial(x, w, s),
        Op::Temporal => conv_temporal(x, w, s),
        Op::Pointwise => conv_pointwise(x, w, s),
        Op::Full => conv3d(x, w, s),
    }
}

fn criterion_1() -> Outcome {
    const CASES: usize = 60;
    let start = Instant::now();
    let mut rng = SplitMix64::new(101);
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, op) in [("spatial", Op::Spatial), ("temporal", Op::Temporal), ("pointwise", Op::Pointwise)] {
        let (mut vs_ref, mut ref_vs_naive) = (0.0f64, 0.0f64);
        for _ in 0..CASES {
            let (x, w, s) = random_config::<f64>(op, &mut rng);
            let got = run_op(op, &x, &w, &s)?;
            let oracle = conv3d_ref(&x, &w, &s)?;
            vs_ref = vs_ref.max(got.max_abs_diff(&oracle)?);
            ref_vs_naive = ref_vs_naive.max(max_gap(&oracle, &naive_conv(&x, &w, &s)));
        }
        ok &= vs_ref < 1e-6 && ref_vs_naive < 1e-9;
        parts.push(format!("{name} {vs_ref:.1e}"));
    }
    let mut full = 0.0f64;
    for _ in 0..CASES {
        let (x, w, s) = random_config::<f32>(Op::Full, &mut rng);
        full = full.max(conv3d(&x, &w, &s)?.max_abs_diff(&conv3d_ref(&x, &w, &s)?)?);
    }
    ok &= full < 1e-5;
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    Ok((
        ok,
        format!("{CASES} configs each, f64 max err {} (tol 1e-6); f32 conv3d {full:.1e} (tol 1e-5); {secs:.1}s", parts.join(", ")),
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = SplitMix64::new(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (ci, cm, co) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let (d, k) = ([1, 3, 5][rng.below(3)], [1, 3, 5][rng.below(3)]);
        let s_spec = KernelSpec::spatial(ci, cm, k)?;
        let t_spec = KernelSpec::temporal(cm, co, d)?;
        let s = ConvWeights::<f32>::uniform(&s_spec, -1.0, 1.0, rng.next_u64())?;
        let t = ConvWeights::<f32>::uniform(&t_spec, -1.0, 1.0, rng.next_u64())?;
        let full = KernelSpec::same(ci, co, d, k)?;
        let composed = ClipTensor::from_fn(full.weight_shape(), |[o, i, dt, y, x]| {
            (0..cm)
                .map(|m| t.kernel.get(o, m, dt, 0, 0) as f64 * s.kernel.get(m, i, 0, y, x) as f64)
                .sum::<f64>() as f32
        })?;
        let w = ConvWeights::from_tensor(&full, composed)?;
        let shape = [1 + rng.below(2), ci, d + rng.below(5), k + rng.below(8), k + rng.below(8)];
        let x = ClipTensor::uniform(shape, -1.0, 1.0, rng.next_u64())?;
        let cascade = conv_temporal(&conv_spatial(&x, &s, &s_spec)?, &t, &t_spec)?;
        worst = worst.max(cascade.max_abs_diff(&conv3d(&x, &w, &full)?)?);
    }
    Ok((worst < 1e-4, format!("20 cases, max err {worst:.2e} (tol 1e-4)")))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let probes = standard_probes(3)?;
    let names: Vec<String> = probes.iter().map(|p| p.name.clone()).collect();
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    for mut p in probes {
        let r = grad_check(p.probe.as_mut(), 3, DEFAULT_STEP)?;
        if r.max_rel_err >= TOLERANCE {
            failed.push(p.name.clone());
        }
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, p.name);
        }
    }
    let required = [
        "relu", "conv_spatial", "conv_temporal", "conv_pointwise", "conv3d", "batch_norm_train", "max_pool",
        "global_avg_pool", "fully_connected", "softmax_cross_entropy", "block_2D", "block_A", "block_B", "block_C",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !names.iter().any(|n| n == r)).collect();
    let secs = start.elapsed().as_secs_f64();
    Ok((
        failed.is_empty() && missing.is_empty() && secs < 300.0,
        format!(
            "{} probes, worst {:.2e} in {} (tol 1e-5), failed {failed:?}, missing {missing:?}; {secs:.1}s",
            names.len(),
            worst.0,
            worst.1
        ),
    ))
}

fn perturb_bn(net: &mut NetworkGraph<f32>, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for v in net.param_views_mut("") {
        let (lo, hi) = match v.kind {
            ParamKind::BnScale => (0.5, 1.5),
            ParamKind::BnShift => (-0.3, 0.3),
            ParamKind::BnMean => (-0.2, 0.2),
            ParamKind::BnVar => (0.5, 2.0),
            _ => continue,
        };
        v.data.iter_mut().for_each(|x| *x = rng.uniform(lo, hi) as f32);
    }
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir()?;
    let arch = ArchSpec::new(50, BlockPolicy::Basic2D, 101)?;
    let mut twod: NetworkGraph<f32> = build_network(arch, InitRule::seeded(41))?;
    perturb_bn(&mut twod, 42);
    let path = dir.path().join("r50.ckpt");
    save_checkpoint(&twod, &path)?;
    let ckpt = load_tensors(&path)?;

    let [t, h, w] = arch.input_geometry;
    let frame = ClipTensor::uniform([1, 3, 1, h, w], 0.0, 1.0, 43)?;
    let clip = ClipTensor::from_fn([1, 3, t, h, w], |[_, c, _, y, x]| frame.get(0, c, 0, y, x))?;
    let want = twod.forward(&frame)?.pool5;

    let spread = want.data().iter().fold(0.0f32, |m, v| m.max(*v)) - want.data().iter().fold(f32::MAX, |m, v| m.min(*v));
    let mut ok = t == 16 && spread > 1e-3;
    let mut parts = Vec::new();
    for policy in [BlockPolicy::AllA, BlockPolicy::MixedAbc] {
        let mut net: NetworkGraph<f32> = build_network(arch.with_policy(policy), InitRule::seeded(44))?;
        net.inflate_from_2d(&ckpt, TemporalInit::Identity)?;
        let got = net.forward(&clip)?.pool5;
        let err = got.max_abs_diff(&want)?;
        ok &= err < 1e-4 && got.cols() == 2048;
        parts.push(format!("{policy} {err:.2e}"));
    }
    Ok((ok, format!("{t}-frame clip, 2D feature spread {spread:.3}, pool5 max err {} (tol 1e-4)", parts.join(", "))))
}

/// Rows `| policy | weights | BN | total | bytes |` of the book's totals table.
fn ledger_rows() -> HashMap<String, [usize; 4]> {
    let text = include_str!("../../../book/src/parameter-ledger.md");
    let section = text.split("## Totals").nth(1).expect("ledger has a totals table");
    let mut rows = HashMap::new();
    for line in section.lines().filter(|l| l.starts_with('|')) {
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        if cells.len() != 5 {
            continue;
        }
        let nums: Vec<usize> = cells[1..].iter().filter_map(|c| c.parse().ok()).collect();
        if let Ok(n) = <[usize; 4]>::try_from(nums) {
            rows.insert(cells[0].to_string(), n);
        }
    }
    rows
}

/// Weights and BN count of a depth-50 bottleneck network from the layer
/// shapes alone.
fn hand_count(temporal: bool, classes: usize) -> (usize, usize) {
    let (stem, mids, blocks) = (64usize, [64usize, 128, 256, 512], [3usize, 4, 6, 3]);
    let (mut w, mut bn) = (3 * stem * 49, 2 * stem);
    let mut cin = stem;
    for (m, n) in mids.into_iter().zip(blocks) {
        for j in 0..n {
            w += cin * m + 9 * m * m + m * 4 * m;
            bn += 2 * (m + m + 4 * m);
            if j == 0 {
                w += cin * 4 * m;
                bn += 2 * 4 * m;
            }
            if temporal {
                w += 3 * m * m;
                bn += 2 * m;
            }
            cin = 4 * m;
        }
    }
    (w + cin * classes + classes, bn)
}

fn criterion_5() -> Outcome {
    let ledger = ledger_rows();
    let mut ok = ledger.len() == BlockPolicy::ALL.len();
    let mut mismatches = Vec::new();
    let mut counts = HashMap::new();
    for policy in BlockPolicy::ALL {
        let net: NetworkGraph<f32> = build_network(ArchSpec::new(50, policy, 101)?, InitRule::seeded(5))?;
        let table = count_parameters(&net);
        let got = [table.total_weights(), table.total_bn(), table.total(), model_size_bytes(&net, false)];
        let (hw, hb) = hand_count(policy != BlockPolicy::Basic2D, 101);
        if ledger.get(policy.name()) != Some(&got) || [hw, hb] != got[..2] {
            mismatches.push(policy.name());
        }
        counts.insert(policy, (table.total_weights(), got[3]));
    }
    ok &= mismatches.is_empty();

    let increment: usize = [(64usize, 3usize), (128, 4), (256, 6), (512, 3)].iter().map(|&(m, n)| 3 * m * m * n).sum();
    let base = counts[&BlockPolicy::Basic2D];
    let deltas_ok = [BlockPolicy::AllA, BlockPolicy::AllB, BlockPolicy::AllC, BlockPolicy::MixedAbc]
        .iter()
        .all(|p| counts[p].0 - base.0 == increment);
    ok &= deltas_ok;

    let mib = |b: usize| b as f64 / (1u64 << 20) as f64;
    let (s2d, s3d) = (mib(base.1), mib(counts[&BlockPolicy::MixedAbc].1));
    let within = |x: f64, target: f64| (x / target - 1.0).abs() <= 0.15;
    ok &= within(s2d, 92.0) && within(s3d, 98.0);
    Ok((
        ok,
        format!(
            "ledger mismatches {mismatches:?}; increment {increment} exact: {deltas_ok}; sizes {s2d:.2} MiB vs 92 ({:+.1}%), {s3d:.2} MiB vs 98 ({:+.1}%)",
            (s2d / 92.0 - 1.0) * 100.0,
            (s3d / 98.0 - 1.0) * 100.0
        ),
    ))
}

fn criterion_6() -> Outcome {
    let net: NetworkGraph<f32> = build_network(ArchSpec::new(50, BlockPolicy::MixedAbc, 101)?, InitRule::seeded(6))?;
    let x = ClipTensor::uniform([1, 3, 16, 160, 160], 0.0, 1.0, 60)?;
    let start = Instant::now();
    let pool5 = net.forward(&x)?.pool5;
    let one = start.elapsed().as_secs_f64();
    let video = ClipSource::from_tensor(ClipTensor::uniform([1, 3, 40, 160, 160], 0.0, 1.0, 61)?)?;
    let feature = extract_features(&net, &video, 20, SampleMode::Random { seed: 62 }, &Preprocess::default())?;
    let finite = feature.iter().all(|v| v.is_finite());
    Ok((
        pool5.rows() == 1 && pool5.cols() == 2048 && feature.len() == 2048 && finite,
        format!(
            "pool5 {}x{} from 1x3x16x160x160 ({one:.1}s); 20-clip feature {}-d",
            pool5.rows(),
            pool5.cols(),
            feature.len()
        ),
    ))
}

fn criterion_7() -> Outcome {
    const BUDGET: usize = 500;
    let start = Instant::now();
    let data = make_motion_dataset(8, [3, 16, 32, 32], 0)?;
    let cfg = TrainConfig {
        lr: 0.01,
        iters: BUDGET,
        batch: 16,
        dropout_rate: 0.0,
        seed: 0,
        ..TrainConfig::default()
    };
    let arch = |policy| {
        ArchSpec::new(50, policy, 2).map(|a| a.with_widths(Widths::REDUCED).with_geometry([16, 32, 32]))
    };

    let mut p3d: NetworkGraph<f32> = build_network(arch(BlockPolicy::AllA)?, InitRule::seeded(0))?;
    let log = train(&mut p3d, &data, &TrainConfig { stop_at_accuracy: Some(1.0), ..cfg }, |_| {})?;
    let p3d_first = log.first_perfect();
    let p3d_eval = evaluate(&p3d, &data, 16)?;

    let mut twod: NetworkGraph<f32> = build_network(arch(BlockPolicy::Basic2D)?, InitRule::seeded(0))?;
    let log2 = train(&mut twod, &data, &cfg, |_| {})?;
    let twod_best = log2.records.iter().map(|r| r.accuracy).fold(0.0, f64::max);
    let twod_eval = evaluate(&twod, &data, 16)?;

    let secs = start.elapsed().as_secs_f64();
    Ok((
        p3d_first.is_some() && log2.records.len() == BUDGET && twod_best <= 0.6 && secs < 600.0,
        format!(
            "P3D-A first 100% batch at iter {p3d_first:?} (eval {p3d_eval:.3}); 2D best {twod_best:.3} over {} iters (eval {twod_eval:.3}); {secs:.0}s",
            log2.records.len()
        ),
    ))
}

fn criterion_8() -> Outcome {
    let data = make_motion_dataset(1, [3, 2, 16, 16], 8)?;
    let arch = ArchSpec::new(50, BlockPolicy::AllA, 2)?
        .with_widths(Widths { stem: 2, mids: [1, 1, 1, 1] })
        .with_stage_blocks([1, 1, 1, 1])
        .with_geometry([2, 16, 16]);
    let mut net: NetworkGraph<f32> = build_network(arch, InitRule::seeded(8))?;
    let cfg = TrainConfig {
        iters: 6001,
        batch: 2,
        ..TrainConfig::default()
    };
    let mut lrs = HashMap::new();
    train(&mut net, &data, &cfg, |r| {
        if [0, 2999, 3000, 6000].contains(&r.iter) {
            lrs.insert(r.iter, r.lr);
        }
    })?;
    let ok = lrs.get(&0) == Some(&1e-3)
        && lrs.get(&2999) == Some(&1e-3)
        && lrs.get(&3000) == Some(&1e-4)
        && lrs.get(&6000) == Some(&1e-5);
    Ok((
        ok,
        format!("lr at 0 / 3000 / 6000: {:?} / {:?} / {:?}", lrs.get(&0), lrs.get(&3000), lrs.get(&6000)),
    ))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (depth, policy) in [(50, BlockPolicy::MixedAbc), (152, BlockPolicy::AllB)] {
        let mut net: NetworkGraph<f32> = build_network(ArchSpec::new(depth, policy, 101)?, InitRule::seeded(9))?;
        perturb_bn(&mut net, 90);
        let path = dir.path().join(format!("d{depth}.ckpt"));
        save_checkpoint(&net, &path)?;
        let back: NetworkGraph<f32> = load_checkpoint(&path)?;
        let (a, b) = (net.to_named(), back.to_named());
        let same_hash = payload_hash(&a)? == payload_hash(&b)?;
        let same_bytes = encode(&a)? == std::fs::read(&path)?;
        let same_bits = a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.name == y.name && x.dims == y.dims && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
            });
        ok &= same_hash && same_bytes && same_bits;
        parts.push(format!("depth {depth}: {} tensors, hash equal {same_hash}, bits equal {same_bits}", a.len()));
    }
    Ok((ok, parts.join("; ")))
}

fn block_kinds_in_summary(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| l.starts_with("stage"))
        .filter_map(|l| l.split_whitespace().nth(1).map(str::to_string))
        .collect()
}

fn criterion_10() -> Outcome {
    let w = Widths::REDUCED;
    let net50: NetworkGraph<f32> =
        build_network(ArchSpec::new(50, BlockPolicy::MixedAbc, 101)?.with_widths(w), InitRule::seeded(10))?;
    let kinds = block_kinds_in_summary(&summarize(&net50, [16, 160, 160])?);
    let cycle = ["P3D-A", "P3D-B", "P3D-C"];
    let cycles = kinds.len() == 16 && kinds.iter().enumerate().all(|(i, k)| k == cycle[i % 3]);

    let net152: NetworkGraph<f32> =
        build_network(ArchSpec::new(152, BlockPolicy::MixedAbc, 101)?.with_widths(w), InitRule::seeded(10))?;
    let kinds152 = block_kinds_in_summary(&summarize(&net152, [16, 160, 160])?);
    let cycles152 = kinds152.iter().enumerate().all(|(i, k)| k == cycle[i % 3]);
    Ok((
        cycles && kinds152.len() == 50 && cycles152,
        format!(
            "depth 50: {} blocks [{}]; depth 152: {} blocks, cycling {cycles152}",
            kinds.len(),
            kinds.iter().map(|k| k.trim_start_matches("P3D-")).collect::<Vec<_>>().join(""),
            kinds152.len()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle equivalence", criterion_1),
        ("separable factorization", criterion_2),
        ("gradient checks", criterion_3),
        ("inflation equivalence", criterion_4),
        ("parameter accounting", criterion_5),
        ("feature contract", criterion_6),
        ("temporal learning probe", criterion_7),
        ("lr schedule", criterion_8),
        ("checkpoint round trip", criterion_9),
        ("block-policy structure", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let (passed, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!("{:>2}. {} {name}: {detail}", n, if passed { "PASS" } else { "FAIL" });
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
