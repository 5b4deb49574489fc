//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamap::attention::{attention_weights, scaled_attention, transformer_layer, LayerConfig, TokenMatrix, TransformerLayer};
use streamap::dataset::{
    class_loss_weights, inverse_freq_sample_weights, merge, subsample_stride, CategoryId, ClassHistogram, ClassMap,
};
use streamap::detection::{group_by_image, DetectionMap};
use streamap::eval::{coco_ap, offline_ap, pair_streaming, streaming_ap, EvalConfig};
use streamap::geometry::BBox;
use streamap::optimizer::{lookahead_run, LookaheadConfig, Objective, ParamVector, Sgd};
use streamap::reparam::{
    count_params, equivalence_error, fuse_branches, BnSpec, Branch, BranchBlock, ConvSpec, IdentityBranch,
};
use streamap::stream::{simulate, simulate_dataset, LatencyModel, SchedulePolicy, StreamConfig};
use streamap::synth::{generate, sequence_layout, SynthConfig};

use common::{brute_force_ap, close, micro_instance};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1
fn zero_latency_equivalence() -> Check {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for s in 0..20u64 {
        let moving = s % 2 == 0;
        let speed = if moving { (-6.0, 6.0) } else { (0.0, 0.0) };
        let sc = generate(&SynthConfig {
            objects: rng.random_range(1..=5),
            frames: rng.random_range(30..=300),
            vx_range: speed,
            vy_range: if moving { (-3.0, 3.0) } else { (0.0, 0.0) },
            size_range: (8, 150),
            seed: s,
            ..SynthConfig::default()
        })
        .map_err(e2s)?;
        for (name, dets) in [("perfect", &sc.perfect), ("degraded", &sc.degraded)] {
            let map = group_by_image(dets.iter().copied());
            let off = offline_ap(&sc.gt, &map, &cfg).map_err(e2s)?;
            let tl = simulate_dataset(&sc.gt, &map, &LatencyModel::Constant(0.0), &StreamConfig::new(1))
                .map_err(e2s)?;
            let on = streaming_ap(&sc.gt, &tl, &cfg).map_err(e2s)?;
            ensure(on == off, || format!("scenario {s} {name}: streaming {} vs offline {}", on.ap, off.ap))?;
        }
    }
    Ok("20 scenarios, perfect and degraded, bit-identical".into())
}

// 2
fn static_scene_immunity() -> Check {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut runs = 0;
    for s in 0..10u64 {
        let frames = rng.random_range(30..=150);
        let sc = generate(&SynthConfig {
            objects: rng.random_range(1..=5),
            frames,
            seed: 100 + s,
            ..SynthConfig::default()
        })
        .map_err(e2s)?;
        let map = group_by_image(sc.perfect.iter().copied());
        let duration = frames as f64 / sc.meta.config.fps;
        let mut latencies = vec![0.001, 0.05, 1.0 / 30.0, 0.2];
        latencies.extend((0..4).map(|_| rng.random_range(0.0..0.9 * duration)));
        for policy in [SchedulePolicy::LatestBlocking, SchedulePolicy::EveryFrameQueue] {
            for &lat in latencies.iter().filter(|&&l| l < duration) {
                let stream = StreamConfig { policy, ..StreamConfig::new(1) };
                let tl = simulate_dataset(&sc.gt, &map, &LatencyModel::Constant(lat), &stream).map_err(e2s)?;
                let pairs: Vec<_> = pair_streaming(&sc.gt, &tl)
                    .map_err(e2s)?
                    .into_iter()
                    .filter(|p| p.source_image_id.is_some())
                    .collect();
                ensure(!pairs.is_empty(), || format!("scenario {s} latency {lat}: no frame has a snapshot"))?;
                let r = coco_ap(&pairs, &sc.gt.categories, &cfg).map_err(e2s)?;
                ensure(r.ap == 100.0, || format!("scenario {s} latency {lat} {policy:?}: sAP {}", r.ap))?;
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} static runs at sAP 100.0"))
}

// 3
fn evaluator_oracle() -> Check {
    let cfg = EvalConfig::default();
    let mut fractional = 0;
    for seed in 0..200u64 {
        let (gt, dets) = micro_instance(seed);
        let got = offline_ap(&gt, &dets, &cfg).map_err(e2s)?;
        if got.ap > 0.0 && got.ap < 100.0 {
            fractional += 1;
        }
        let want = brute_force_ap(&gt, &dets);
        let pairs = [
            ("ap", got.ap, want.ap),
            ("ap50", got.ap50, want.ap50),
            ("ap75", got.ap75, want.ap75),
            ("ap_small", got.ap_small, want.small),
            ("ap_medium", got.ap_medium, want.medium),
            ("ap_large", got.ap_large, want.large),
        ];
        for (name, g, w) in pairs {
            ensure(close(g, w, 1e-9), || format!("instance {seed}: {name} {g} vs oracle {w}"))?;
        }
    }

    // one box, one detection at IoU 0.6
    let gt = streamap::dataset::Dataset::new(
        vec![common::frame(1, 0, 0, 30.0)],
        vec![streamap::dataset::GtAnnotation {
            ann_id: streamap::dataset::AnnId(1),
            image_id: streamap::dataset::ImageId(1),
            category_id: CategoryId(0),
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            area: 100.0,
        }],
        common::categories(1),
    )
    .map_err(e2s)?;
    let det = streamap::detection::Detection {
        image_id: streamap::dataset::ImageId(1),
        category_id: CategoryId(0),
        bbox: BBox::new(0.0, 0.0, 6.0, 10.0),
        score: 0.9,
    };
    let r = offline_ap(&gt, &group_by_image([det]), &cfg).map_err(e2s)?;
    ensure(r.ap50 == 100.0 && r.ap75 == 0.0 && close(r.ap, 30.0, 1e-9), || {
        format!("IoU 0.6 case gave ap50 {} ap75 {} ap {}", r.ap50, r.ap75, r.ap)
    })?;
    Ok(format!("200 micro-instances within 1e-9 ({fractional} with fractional AP); IoU 0.6 gives 100/0/30"))
}

// 4
fn scheduler_hand_trace() -> Check {
    let layout = sequence_layout(&[30], 30.0);
    let cfg = StreamConfig { fps: 30.0, frame_count: 30, policy: SchedulePolicy::LatestBlocking };
    let tl = simulate(&layout.images, &DetectionMap::new(), &LatencyModel::Constant(0.05), &cfg).map_err(e2s)?;
    let processed: Vec<u64> = tl.snapshots.iter().map(|s| s.source_image_id.0 - 1).collect();
    let expected: Vec<u64> = (0..30).filter(|i| i % 3 != 2).collect();
    ensure(processed == expected, || format!("processed {processed:?}"))?;
    Ok(format!("{:?}...", &processed[..7]))
}

fn random_block(rng: &mut ChaCha8Rng, mask: u8, with_bn: bool) -> BranchBlock {
    let has_id = mask & 4 != 0;
    let cin = rng.random_range(1..=6);
    let cout = if has_id { cin } else { rng.random_range(1..=6) };
    let mut branches = Vec::new();
    for (bit, k) in [(1u8, 3usize), (2, 1)] {
        if mask & bit != 0 {
            let bias = rng.random_bool(0.5);
            branches.push(Branch {
                conv: ConvSpec::random(cin, cout, k, bias, rng),
                bn: with_bn.then(|| BnSpec::random(cout, rng)),
            });
        }
    }
    BranchBlock {
        in_channels: cin,
        out_channels: cout,
        branches,
        identity: has_id.then(|| IdentityBranch { bn: with_bn.then(|| BnSpec::random(cin, rng)) }),
    }
}

// 5
fn reparam_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        // cycle through the seven non-empty branch subsets, with and without BN
        let combo = (i % 14) as u8;
        let block = random_block(&mut rng, combo % 7 + 1, combo >= 7);
        let fused = fuse_branches(&block).map_err(e2s)?;
        ensure(fused.0.kernel_size() == 3, || format!("block {i}: fused kernel {}", fused.0.kernel_size()))?;
        let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
        let err = equivalence_error(&block, &fused, 3, h, w, i).map_err(e2s)?;
        ensure(err <= 1e-6, || format!("block {i}: max abs error {err:e}"))?;
        worst = worst.max(err);
    }

    let block = BranchBlock {
        in_channels: 64,
        out_channels: 64,
        branches: vec![
            Branch { conv: ConvSpec::random(64, 64, 3, true, &mut rng), bn: None },
            Branch { conv: ConvSpec::random(64, 64, 1, true, &mut rng), bn: None },
        ],
        identity: Some(IdentityBranch::default()),
    };
    let before = count_params(&block);
    let after = count_params(&fuse_branches(&block).map_err(e2s)?);
    ensure(before == 41_088 && after == 36_928, || format!("toy block {before} -> {after}"))?;
    Ok(format!("100 blocks, worst error {worst:.2e}; 64->64 block {before} -> {after}"))
}

fn tm(a: ndarray::Array2<f64>) -> TokenMatrix {
    TokenMatrix::new(a).expect("finite tokens")
}

// 6
fn attention_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (n, m, d) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..6));
        let q = TokenMatrix::random(n, d, &mut rng);
        let k = TokenMatrix::random(m, d, &mut rng);
        let w = attention_weights(&q, &k).map_err(e2s)?;
        for row in w.rows() {
            let s: f64 = row.sum();
            ensure(close(s, 1.0, 1e-12) && row.iter().all(|&x| x >= 0.0), || format!("row sums to {s}"))?;
        }

        let k1 = TokenMatrix::random(1, d, &mut rng);
        let v1 = TokenMatrix::random(1, d, &mut rng);
        let out = scaled_attention(&q, &k1, &v1).map_err(e2s)?;
        for row in out.values().rows() {
            ensure(row.iter().zip(v1.values().row(0)).all(|(a, b)| a == b), || "single key is not identity".into())?;
        }

        let same = tm(ndarray::Array2::from_shape_fn((m, d), |(_, j)| j as f64));
        let v = TokenMatrix::random(m, d, &mut rng);
        let mean = v.values().mean_axis(ndarray::Axis(0)).expect("m >= 1");
        let out = scaled_attention(&q, &same, &v).map_err(e2s)?;
        for row in out.values().rows() {
            ensure(row.iter().zip(&mean).all(|(a, b)| close(*a, *b, 1e-12)), || "uniform keys do not average".into())?;
        }
    }

    let out = scaled_attention(&tm(array![[1.0], [0.0]]), &tm(array![[1.0], [0.0]]), &tm(array![[2.0], [4.0]]))
        .map_err(e2s)?;
    let (a, b) = (out.values()[[0, 0]], out.values()[[1, 0]]);
    ensure(close(a, 2.5379, 1e-4) && close(b, 3.0, 1e-4), || format!("hand case gave [{a}, {b}]"))?;

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let heads = rng.random_range(1..=4);
        let d = heads * rng.random_range(1..=4);
        let n = rng.random_range(2..10);
        let layer = TransformerLayer::random(d, LayerConfig::new(heads, 2 * d), &mut rng).map_err(e2s)?;
        let x = TokenMatrix::random(n, d, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |m: &TokenMatrix| tm(m.values().select(ndarray::Axis(0), &perm));
        let lhs = transformer_layer(&permute(&x), &layer).map_err(e2s)?;
        let rhs = permute(&transformer_layer(&x, &layer).map_err(e2s)?);
        let diff = lhs.max_abs_diff(&rhs);
        ensure(diff <= 1e-9, || format!("permutation equivariance off by {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("hand case [{a:.4}, {b:.4}]; equivariance within {worst:.1e}"))
}

// 7
fn lookahead_closed_form() -> Check {
    let grad = |p: &ParamVector| Objective::Quadratic.grad(p);
    let cfg = LookaheadConfig { k: 5, alpha: 0.5 };
    let start = ParamVector(vec![1.0]);
    let one = lookahead_run(&start, Sgd { lr: 0.1 }, cfg, grad, 1).map_err(e2s)?.0[0];
    // five SGD steps shrink x by (1 - 2 lr)^5, then φ moves halfway
    let expected = 1.0 + 0.5 * ((1.0f64 - 0.2).powi(5) - 1.0);
    ensure(close(one, 0.66384, 1e-12) && close(one, expected, 1e-12), || format!("one sync gave {one}"))?;
    let twenty = lookahead_run(&start, Sgd { lr: 0.1 }, cfg, grad, 20).map_err(e2s)?.0[0];
    ensure(twenty.abs() < 3e-4, || format!("twenty syncs gave {twenty}"))?;
    Ok(format!("phi1 = {one:.12}, phi20 = {twenty:.3e}"))
}

// 8
fn dataset_checksums() -> Check {
    let parts = [sequence_layout(&[3_959], 30.0), sequence_layout(&[12_786], 30.0), sequence_layout(&[70_000], 30.0)];
    let refs: Vec<(&str, &streamap::dataset::Dataset)> =
        ["stream", "signs", "generic"].into_iter().zip(parts.iter()).collect();
    let merged = merge(&refs, &ClassMap::canonical(&[]).map_err(e2s)?).map_err(e2s)?;
    ensure(merged.images.len() == 86_745, || format!("merged {} frames", merged.images.len()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let total = 39_384u64;
    for trial in 0..20 {
        let seqs = rng.random_range(1..=120usize);
        let mut cuts: Vec<u64> = (0..seqs - 1).map(|_| rng.random_range(1..total)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut lengths = Vec::new();
        let mut prev = 0;
        for c in cuts.into_iter().chain([total]) {
            lengths.push(c - prev);
            prev = c;
        }
        let layout = sequence_layout(&lengths, 30.0);
        let kept = subsample_stride(&layout, 10).map_err(e2s)?.images.len() as u64;
        let n = lengths.len() as u64;
        ensure((3_938..=3_938 + n).contains(&kept), || format!("trial {trial}: kept {kept} with {n} sequences"))?;
        let exact: u64 = lengths.iter().map(|l| l.div_ceil(10)).sum();
        ensure(kept == exact, || format!("trial {trial}: kept {kept}, expected {exact}"))?;
    }
    Ok("3959 + 12786 + 70000 = 86745; 20 stride-10 layouts in bounds".into())
}

// 9
fn weighting_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let classes = rng.random_range(1..=8u64);
        let h: ClassHistogram = (0..classes).map(|c| (CategoryId(c), rng.random_range(1..100_000u64))).collect();
        let w = class_loss_weights(&h).map_err(e2s)?;
        let target = h.total() as f64 / classes as f64;
        for (c, n) in &h.counts {
            let contrib = w[c] * *n as f64;
            ensure(close(contrib / target, 1.0, 1e-12), || format!("class {c}: w*n = {contrib}, target {target}"))?;
        }
        let p: BTreeMap<_, _> = inverse_freq_sample_weights(&h).map_err(e2s)?;
        let sum: f64 = p.values().sum();
        ensure(close(sum, 1.0, 1e-12), || format!("inverse-frequency weights sum to {sum}"))?;
    }
    Ok("500 histograms".into())
}

// 10
fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_streamap")).args(args).output().map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("`streamap {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

/// Report bytes with the timing field removed.
fn primary_bytes(path: &Path) -> Result<Vec<u8>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        if let Ok(serde_json::Value::Object(mut m)) = serde_json::from_slice::<serde_json::Value>(&bytes) {
            if m.remove("timing").is_some() {
                return serde_json::to_vec(&m).map_err(e2s);
            }
        }
    }
    Ok(bytes)
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let dir = tmp.path();
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();

    // fixed inputs for the commands under test
    run_cli(&["synth", "--objects", "60", "--frames", "40", "--vx-range", "-3,3", "--seed", "3", "--out", &p("scene")])?;
    std::fs::write(
        p("block.json"),
        r#"{"in_channels":4,"out_channels":4,"seed":1,"branches":[{"kernel_size":3,"bias":true,"bn":true},{"kernel_size":1,"bias":false,"bn":true}],"identity":{"bn":true}}"#,
    )
    .map_err(e2s)?;
    let map: Vec<serde_json::Value> = ["a", "b"]
        .iter()
        .flat_map(|src| (0..8).map(move |c| serde_json::json!({"source": src, "from_id": c, "to_id": (c + 1) % 8})))
        .collect();
    std::fs::write(p("map.json"), serde_json::to_vec(&map).map_err(e2s)?).map_err(e2s)?;
    for (i, name) in ["t0", "t1", "t2", "t3"].iter().enumerate() {
        let img = format!(
            r#"{{"width":64,"height":48,"boxes":[{{"bbox":[{},{},20,16],"category_id":{i}}}]}}"#,
            4 * i,
            3 * i
        );
        std::fs::write(p(&format!("{name}.json")), img).map_err(e2s)?;
        let pixels: Vec<u8> = (0..64 * 48).map(|k| ((k * (i + 3)) % 251) as u8).collect();
        let mut pgm = b"P5\n64 48\n255\n".to_vec();
        pgm.extend(pixels);
        std::fs::write(p(&format!("{name}.pgm")), pgm).map_err(e2s)?;
    }

    let gt = p("scene/gt.json");
    let dets = p("scene/dets_degraded.json");
    let commands: Vec<(Vec<String>, Vec<String>)> = vec![
        (vec!["synth", "--objects", "4", "--frames", "50", "--vy-range", "-2,2", "--seed", "9", "--out", &p("s2")], vec![
            "s2/gt.json",
            "s2/dets_perfect.json",
            "s2/dets_degraded.json",
            "s2/meta.json",
        ]),
        (vec!["evaluate", "--mode", "offline", "--gt", &gt, "--dets", &dets, "--out", &p("off.json"), "--pr-csv", &p("pr.csv")], vec![
            "off.json", "pr.csv",
        ]),
        (vec!["evaluate", "--mode", "streaming", "--gt", &gt, "--dets", &dets, "--latency-lognormal", "-2.5,0.4,11", "--out", &p("on.json")], vec!["on.json"]),
        (vec!["simulate", "--gt", &gt, "--dets", &dets, "--latency-const", "0.07", "--policy", "queue", "--out", &p("tl.json")], vec!["tl.json"]),
        (vec!["evaluate", "--mode", "streaming", "--gt", &gt, "--timeline", &p("tl.json"), "--out", &p("tl_eval.json")], vec!["tl_eval.json"]),
        (vec!["fuse", "--block", &p("block.json"), "--out", &p("fused.json"), "--report", &p("fuse_report.json"), "--trials", "5"], vec![
            "fused.json",
            "fuse_report.json",
        ]),
        (vec!["tools", "anchors", "--gt", &gt, "--k", "4", "--seed", "2", "--out", &p("anchors.json")], vec!["anchors.json"]),
        (vec!["tools", "weights", "--gt", &gt, "--out", &p("weights.json")], vec!["weights.json"]),
        (vec!["tools", "histogram", "--gt", &gt, "--out", &p("hist.csv")], vec!["hist.csv"]),
        (vec!["tools", "subsample", "--gt", &gt, "--stride", "10", "--out", &p("sub.json")], vec!["sub.json"]),
        (vec!["tools", "merge", "--part", &format!("a={gt}"), "--part", &format!("b={}", p("s2/gt.json")), "--class-map", &p("map.json"), "--out", &p("merged.json")], vec!["merged.json"]),
        (vec!["tools", "resample", "--gt", &gt, "--n", "50", "--seed", "4", "--out", &p("resampled.json")], vec!["resampled.json"]),
        (vec!["bench", "--objective", "rosenbrock", "--optimizer", "lookahead-adam", "--steps", "300", "--jitter", "0.1", "--seed", "5", "--out", &p("bench.csv")], vec!["bench.csv"]),
        (vec![
            "augment", "mosaic",
            "--inputs", &[p("t0.json"), p("t1.json"), p("t2.json"), p("t3.json")].join(","),
            "--images", &[p("t0.pgm"), p("t1.pgm"), p("t2.pgm"), p("t3.pgm")].join(","),
            "--seed", "12", "--out", &p("mosaic.json"), "--image-out", &p("mosaic.pgm"),
        ], vec!["mosaic.json", "mosaic.pgm"]),
        (vec![
            "augment", "mixup", "--a", &p("t0.json"), "--b", &p("t1.json"), "--image-a", &p("t0.pgm"), "--image-b", &p("t1.pgm"),
            "--seed", "7", "--out", &p("mixup.json"), "--image-out", &p("mixup.pgm"),
        ], vec!["mixup.json", "mixup.pgm"]),
        (vec!["selfcheck", "--out", &p("selfcheck.json")], vec!["selfcheck.json"]),
    ]
    .into_iter()
    .map(|(a, o)| (a.into_iter().map(String::from).collect(), o.into_iter().map(String::from).collect()))
    .collect();

    let mut compared = 0;
    for (args, outputs) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        run_cli(&args)?;
        let first: Vec<Vec<u8>> = outputs.iter().map(|o| primary_bytes(&dir.join(o))).collect::<Result<_, _>>()?;
        run_cli(&args)?;
        for (o, a) in outputs.iter().zip(&first) {
            let b = primary_bytes(&dir.join(o))?;
            ensure(*a == b, || format!("`streamap {} ...` wrote different {o} on rerun", args[..2].join(" ")))?;
            compared += 1;
        }
    }
    Ok(format!("{} commands, {compared} outputs byte-identical", commands.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check, Duration); 10] = [
        ("zero-latency equivalence", zero_latency_equivalence, Duration::from_secs(10)),
        ("static-scene latency immunity", static_scene_immunity, Duration::from_secs(5)),
        ("evaluator oracle equivalence", evaluator_oracle, Duration::from_secs(30)),
        ("scheduler hand trace", scheduler_hand_trace, Duration::from_secs(1)),
        ("re-parameterization equivalence", reparam_equivalence, Duration::from_secs(30)),
        ("attention invariants", attention_invariants, Duration::from_secs(5)),
        ("lookahead closed form", lookahead_closed_form, Duration::from_secs(1)),
        ("dataset checksums", dataset_checksums, Duration::from_secs(5)),
        ("weighting identities", weighting_identities, Duration::from_secs(1)),
        ("CLI determinism", cli_determinism, Duration::from_secs(120)),
    ];

    let suite = Instant::now();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = started.elapsed();
        let (status, detail) = match outcome {
            Ok(d) if elapsed <= *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over budget")),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "{status} [{:>2}] {name}: {detail} ({:.3}s, limit {}s)",
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    let total = suite.elapsed();
    println!("acceptance: {} of {} passed in {:.2}s", criteria.len() - failed, criteria.len(), total.as_secs_f64());
    if failed > 0 || total > Duration::from_secs(120) {
        std::process::exit(1);
    }
}
