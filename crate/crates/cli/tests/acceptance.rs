//! Acceptance suite: one line per criterion.
//!
//! `cargo test --test acceptance` runs all ten; `cargo test --test acceptance -- 3 5`
//! runs a subset. Criterion 8 is reported but never gates.

mod common;

use std::collections::{BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{ok, report, s, snapshot};
use lcae_core::data::{self, SynthSpec};
use lcae_core::gradcheck::{check_network, op_suite};
use lcae_core::lca::{self, GrayImage, LcaParams};
use lcae_core::metrics::{self, EvalReport};
use lcae_core::model::complexity::{conv_flops, conv_params};
use lcae_core::model::{count_flops, count_params, BinaryMask, LcaeNet, ModelConfig, ProbMap};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const LCA_TOL: f64 = 1e-9;
const LCA_SECONDS: f64 = 30.0;
const FLAT_TOL: f64 = 1e-12;
const BACKGROUND_TOL: f64 = 0.02;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 120.0;
const MIN_IOU: f64 = 0.5;
const MIN_PD: f64 = 0.8;
const TRAIN_SECONDS: f64 = 15.0 * 60.0;

/// Pinned counts for the default configuration at 256×256.
const DEFAULT_PARAMS: usize = 4_207_702;
const DEFAULT_FLOPS: u64 = 13_666_357_600;

enum Verdict {
    Pass,
    Fail,
    Report,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn pass_if(cond: bool, detail: String) -> Outcome {
    Outcome { verdict: if cond { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn lca_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(16..=128), rng.random_range(16..=128));
        let img = GrayImage::new(Array2::from_shape_simple_fn((h, w), || rng.random_range(0.0..255.0))).unwrap();
        for p in LcaParams::sweep_grid() {
            let fast = lca::attention(&img, &p).unwrap();
            let slow = lca::lca_oracle(&img, &p).unwrap();
            worst = (fast.values() - slow.values()).iter().fold(worst, |m, d| m.max(d.abs()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass_if(worst <= LCA_TOL && secs < LCA_SECONDS, format!("max |diff| {worst:.3e} (tol {LCA_TOL:e}), {secs:.1} s (limit {LCA_SECONDS} s)"))
}

fn flat_field_neutrality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = |d| LcaParams::new(1.0, 0.5, d).unwrap();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for value in [0.0, 1.0, 127.0, 255.0, -3.5, rng.random_range(-1e3..1e3)] {
        for d in 1..=4 {
            let (h, w) = (rng.random_range(2 * d + 1..40), rng.random_range(2 * d + 1..40));
            let img = GrayImage::filled(h, w, value).unwrap();
            for weights in [lca::attention(&img, &p(d)).unwrap(), lca::lca_oracle(&img, &p(d)).unwrap()] {
                for r in d..h - d {
                    for c in d..w - d {
                        worst = worst.max((weights.values()[[r, c]] - 0.5).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    pass_if(worst <= FLAT_TOL, format!("{cases} maps, max |w - 0.5| {worst:.1e} (tol {FLAT_TOL:e})"))
}

/// One Gaussian blob on a smooth, untilted background; no pixel noise or clutter.
fn blob_scene(seed: u64) -> data::Sample {
    let spec = SynthSpec {
        min_targets: 1,
        max_targets: 1,
        sigma: [1.0, 2.0],
        gradient: 0.0,
        pixel_noise: 0.0,
        clutter: 0.0,
        seed,
        ..SynthSpec::default()
    };
    data::synth_generate(&spec).unwrap()
}

fn blob_replication() -> Outcome {
    let p = LcaParams::new(1.0, 0.5, 1).unwrap();
    let (mut inside, mut worst_bg) = (0, 0.0f64);
    for seed in 0..20 {
        let scene = blob_scene(seed);
        let w = lca::attention(&data::standardize(&scene.image), &p).unwrap();
        let (best, _) = w.values().indexed_iter().fold(((0, 0), f64::MIN), |a, (ix, &v)| if v > a.1 { (ix, v) } else { a });
        inside += usize::from(scene.mask.get(best.0, best.1));
        let bg: Vec<f64> = w.values().indexed_iter().filter(|((r, c), _)| !scene.mask.get(*r, *c)).map(|(_, &v)| v).collect();
        let mean = bg.iter().sum::<f64>() / bg.len() as f64;
        worst_bg = worst_bg.max((mean - 0.5).abs());
    }
    pass_if(
        inside == 20 && worst_bg <= BACKGROUND_TOL,
        format!("maximum inside the blob for {inside}/20 seeds, worst |background mean - 0.5| {worst_bg:.4} (tol {BACKGROUND_TOL})"),
    )
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let (mut ops, mut worst, mut worst_at) = (0, 0.0f64, String::new());
    for (name, rep) in op_suite(0).unwrap() {
        ops += 1;
        if rep.max_rel_err > worst {
            (worst, worst_at) = (rep.max_rel_err, format!("{name}: {}", rep.worst));
        }
    }
    let net = LcaeNet::new(ModelConfig { base_channels: 4, input_size: [16, 16], ..ModelConfig::default() }, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Array4::from_shape_simple_fn((2, 1, 16, 16), || rng.random_range(-1.0..1.0));
    let attention = net.attention(images.view()).unwrap();
    let target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 16, 16]), |ix| {
        let (r, c) = (ix[2] as i64 - 7, ix[3] as i64 - 6 - 3 * ix[0] as i64);
        f64::from(u8::from(r * r + c * c <= 5))
    });
    let rep = check_network(&net, &images, &attention, &target, Some(4), 0).unwrap();
    let kinks = rep.kinks;
    let tensors = net.store.params().count();
    if rep.max_rel_err > worst {
        (worst, worst_at) = (rep.max_rel_err, format!("network: {}", rep.worst));
    }
    let secs = start.elapsed().as_secs_f64();
    pass_if(
        worst < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "{ops} ops, network {} entries over {tensors} tensors ({kinks} at ReLU kinks); worst rel err {worst:.2e} ({worst_at}), {secs:.1} s (limit {GRAD_SECONDS} s)",
            rep.checked
        ),
    )
}

/// Flood-fill components, independent of the library's union-find labelling.
fn naive_centroids(m: &BinaryMask) -> Vec<(f64, f64)> {
    let (h, w) = m.dim();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || !m.get(start / w, start % w) {
            continue;
        }
        seen[start] = true;
        let (mut queue, mut sum, mut n) = (VecDeque::from([start]), (0.0, 0.0), 0.0);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            sum = (sum.0 + r as f64, sum.1 + c as f64);
            n += 1.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if !seen[j] && m.get(rr as usize, cc as usize) {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push((sum.0 / n, sum.1 / n));
    }
    out
}

/// Greedy one-to-one matching by brute force: repeatedly take the closest free pair.
fn naive_hits(gt: &[(f64, f64)], pred: &[(f64, f64)]) -> u64 {
    let mut free_g: BTreeSet<usize> = (0..gt.len()).collect();
    let mut free_p: BTreeSet<usize> = (0..pred.len()).collect();
    let mut hits = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for &g in &free_g {
            for &p in &free_p {
                let d = ((gt[g].0 - pred[p].0).powi(2) + (gt[g].1 - pred[p].1).powi(2)).sqrt();
                if d < 3.0 && best.is_none_or(|b| d < b.0) {
                    best = Some((d, g, p));
                }
            }
        }
        match best {
            Some((_, g, p)) => {
                free_g.remove(&g);
                free_p.remove(&p);
                hits += 1;
            }
            None => return hits,
        }
    }
}

fn random_blobs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(0..5))
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(0.5..3.0)))
        .collect();
    let speckle = rng.random_range(0.0..0.02);
    let noise: Vec<bool> = (0..h * w).map(|_| rng.random_bool(speckle)).collect();
    BinaryMask::from_fn(h, w, |r, c| {
        noise[r * w + c] || blobs.iter().any(|&(y, x, rad)| (r as f64 - y).powi(2) + (c as f64 - x).powi(2) <= rad * rad)
    })
}

fn mask_with(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| on.contains(&(r, c)))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    let (mut tp, mut t, mut p, mut fp, mut all, mut hits, mut targets) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(8..48), rng.random_range(8..48));
        let (pred, gt) = (random_blobs(&mut rng, h, w), random_blobs(&mut rng, h, w));
        let (mut ctp, mut ct, mut cp, mut cfp) = (0, 0, 0, 0);
        for r in 0..h {
            for c in 0..w {
                let (a, b) = (pred.get(r, c), gt.get(r, c));
                ctp += u64::from(a && b);
                ct += u64::from(b);
                cp += u64::from(a);
                cfp += u64::from(a && !b);
            }
        }
        let (gc, pc) = (naive_centroids(&gt), naive_centroids(&pred));
        let chits = naive_hits(&gc, &pc);
        let lib = metrics::pair_counts(&pred, &gt).unwrap();
        let naive = [ctp, ct, cp, cfp, (h * w) as u64, chits, gc.len() as u64];
        let got = [lib.tp, lib.t, lib.p, lib.n_false, lib.p_all, lib.n_pred, lib.n_all];
        mismatches += usize::from(naive != got);
        (tp, t, p, fp, all, hits, targets) = (tp + ctp, t + ct, p + cp, fp + cfp, all + (h * w) as u64, hits + chits, targets + gc.len() as u64);
        preds.push(pred);
        gts.push(gt);
    }
    let rep = EvalReport::evaluate(&preds, &gts).unwrap();
    let same = rep.iou == tp as f64 / (t + p - tp) as f64 && rep.fa == fp as f64 / all as f64 && rep.pd == hits as f64 / targets as f64;

    let iou = EvalReport::evaluate(&[mask_with(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)])], &[mask_with(4, 4, &[(0, 1), (1, 1), (0, 2), (1, 2)])])
        .unwrap()
        .iou;
    let gt = mask_with(20, 20, &[(10, 10)]);
    let hit = EvalReport::evaluate(&[mask_with(20, 20, &[(12, 12)])], &[gt.clone()]).unwrap().pd;
    let miss = EvalReport::evaluate(&[mask_with(20, 20, &[(10, 13)])], &[gt]).unwrap().pd;
    let fa = EvalReport::evaluate(
        &[mask_with(256, 256, &[(0, 0), (5, 9), (100, 3), (200, 200), (255, 255), (50, 50)])],
        &[mask_with(256, 256, &[(50, 50)])],
    )
    .unwrap()
    .fa;
    let hand = iou == 2.0 / 6.0 && hit == 1.0 && miss == 0.0 && fa == 5.0 / 65536.0;
    pass_if(
        mismatches == 0 && same && hand,
        format!(
            "{mismatches}/50 count mismatches, dataset rates {}, hand cases IoU {iou:.4} Pd(√8) {hit} Pd(3) {miss} Fa·65536 {}",
            if same { "equal" } else { "differ" },
            fa * 65536.0
        ),
    )
}

fn roc_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let (mut top_ok, mut monotone) = (true, true);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
        let mut vals = Array2::from_shape_simple_fn((h, w), || rng.random_range(0.0..1.0));
        vals[[0, 0]] = 1.0;
        let gt = loop {
            let m = random_blobs(&mut rng, h, w);
            if m.count_ones() > 0 {
                break m;
            }
        };
        let probs = [ProbMap::new(vals).unwrap()];
        let gts = [gt];
        let top = metrics::roc(&probs, &gts, &[1.0]).unwrap()[0];
        top_ok &= top.fa == 0.0 && top.pd == 0.0;
        let pts = metrics::roc(&probs, &gts, &thresholds).unwrap();
        monotone &= pts.windows(2).all(|p| p[0].fa >= p[1].fa);
    }
    pass_if(top_ok && monotone, format!("threshold 1.0 gives (0, 0): {top_ok}; Fa non-increasing over 20 maps: {monotone}"))
}

fn desk_training(root: &Path) -> Outcome {
    let (ds, out) = (root.join("desk"), root.join("desk_run"));
    let start = Instant::now();
    ok(&["synth", "--out", s(&ds), "--count", "360", "--test-count", "60", "--seed", "0"]);
    ok(&["train", "--data", s(&ds), "--out", s(&out), "--base-channels", "8", "--epochs", "50", "--batch-size", "16", "--seed", "0"]);
    let secs = start.elapsed().as_secs_f64();
    let r = report(&out.join("report.json"));
    let (iou, pd) = (r["iou"].as_f64().unwrap(), r["pd"].as_f64().unwrap());
    pass_if(
        iou > MIN_IOU && pd > MIN_PD && secs < TRAIN_SECONDS,
        format!("held-out IoU {iou:.4} (> {MIN_IOU}), Pd {pd:.4} (> {MIN_PD}), {secs:.0} s on {} core(s) (limit {TRAIN_SECONDS} s)", cores()),
    )
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn ablation(root: &Path) -> Outcome {
    let (ds, out) = (root.join("abl"), root.join("abl_run"));
    ok(&["synth", "--out", s(&ds), "--count", "150", "--test-count", "30", "--seed", "1"]);
    ok(&["sweep", "--ablation", "--data", s(&ds), "--out", s(&out), "--seeds", "3", "--epochs", "8", "--base-channels", "8"]);
    let summary = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    Outcome { verdict: Verdict::Report, detail: format!("120 train / 30 test, 8 epochs, C=8: {}", summary.trim()) }
}

fn complexity() -> Outcome {
    let conv80 = conv_params(1, 8, 3, true) == 80;
    let (cin, cout, px) = (16, 32, 64 * 64);
    let formula = conv_flops(cin, cout, 1, false, px) == (2 * cin * cout * px) as u64
        && conv_flops(cin, cout, 1, true, px) == ((2 * cin + 1) * cout * px) as u64;
    let cfg = ModelConfig::default();
    let (params, flops) = (count_params(&cfg), count_flops(&cfg, 256, 256));
    let built = LcaeNet::new(cfg, 0).unwrap().num_params();
    let bench = ok(&["bench", "--size", "256"]);
    let mut lines = bench.lines();
    let reported_params = lines.next().unwrap() == format!("params: {params}");
    let reported_flops = lines.next().unwrap().starts_with(&format!("flops: {flops} "));
    let rate: f64 = lines.next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    let pinned = params == DEFAULT_PARAMS && flops == DEFAULT_FLOPS && built == params;
    pass_if(
        conv80 && formula && pinned && reported_params && reported_flops && rate > 0.0,
        format!(
            "80-param conv {conv80}, 1×1 FLOP formula {formula}, default params {params} / FLOPs {flops} pinned {pinned}, bench agrees {}, {rate:.2} images/s",
            reported_params && reported_flops
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let mut differing = Vec::new();
    let runs: Vec<_> = (0..2).map(|i| root.join(format!("det{i}"))).collect();
    for dir in &runs {
        let ds = dir.join("ds");
        ok(&["synth", "--out", s(&ds), "--count", "12", "--size", "32", "--seed", "9"]);
        let run = dir.join("run");
        ok(&["train", "--data", s(&ds), "--out", s(&run), "--epochs", "2", "--base-channels", "4", "--batch-size", "4", "--seed", "9"]);
        let ckpt = run.join("best.ckpt");
        let img = ds.join("images").join("s00000.png");
        ok(&["attend", s(&img), "--out", s(&dir.join("w.png")), "--raw", s(&dir.join("w.txt"))]);
        ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&ds), "--out", s(&dir.join("eval.json"))]);
        ok(&["roc", "--checkpoint", s(&ckpt), "--data", s(&ds), "--out", s(&dir.join("roc.tsv"))]);
        ok(&["sweep", "--data", s(&ds), "--out", s(&dir.join("sweep")), "--dilation", "1,2", "--alpha", "1", "--beta", "0.5", "--epochs", "1", "--base-channels", "4"]);
        let bench = ok(&["bench", "--size", "32", "--seconds", "0"]);
        let counts: String = bench.lines().take(2).collect::<Vec<_>>().join("\n");
        std::fs::write(dir.join("bench.txt"), counts).unwrap();
    }
    let (a, b) = (snapshot(&runs[0]), snapshot(&runs[1]));
    for (name, bytes) in &a {
        if b.get(name) != Some(bytes) {
            differing.push(name.clone());
        }
    }
    let same_set = a.len() == b.len();
    pass_if(
        differing.is_empty() && same_set,
        if differing.is_empty() { format!("{} artifacts bit-identical across two runs", a.len()) } else { format!("differing: {}", differing.join(", ")) },
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let criteria: [(&str, &dyn Fn() -> Outcome); 10] = [
        ("LCA oracle equivalence", &lca_oracle_equivalence),
        ("flat-field neutrality", &flat_field_neutrality),
        ("blob scene replication", &blob_replication),
        ("gradient integrity", &gradient_integrity),
        ("metric oracle equivalence", &metric_oracles),
        ("ROC sanity", &roc_sanity),
        ("desk-scale training", &|| desk_training(root)),
        ("attention ablation", &|| ablation(root)),
        ("complexity reporting", &complexity),
        ("determinism", &|| determinism(root)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Outcome { verdict: Verdict::Fail, detail: format!("panicked: {}", panic_text(&e)) });
        let tag = match outcome.verdict {
            Verdict::Pass => "PASS",
            Verdict::Report => "REPORT",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!("criterion {n:>2} {tag:<6} {name}: {}", outcome.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}
