//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use pseudolabel::correction::{correct_category, fuse, fusion_weight, Distribution, FusionState};
use pseudolabel::filtering::{filter_ddtf, filter_scores, FilterConfig, RejectReason};
use pseudolabel::gradcheck::PmuaProblem;
use pseudolabel::instance::{
    rle_decode, rle_encode, BinaryMask, ClassLogits, GroundTruthInstance, InstancePrediction, MaskLogitGrid,
};
use pseudolabel::io::{GroundTruthFile, NamedPrediction, PredictionFile};
use pseudolabel::loss::{pmua_gradient, PseudoLabel};
use pseudolabel::matching::{hungarian, CostMatrix};
use pseudolabel::quality::{class_quality, coupled_score, mask_quality, QualityScores, UncertaintyMap};
use pseudolabel::sim::trainer::run_ablation;
use pseudolabel::sim::{ema_update, TrainerConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// 1. Analytic PMUA gradient against central differences computed here.
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let p = PmuaProblem::random(0xACCE_5500 + i, 4, 4, 3).map_err(|e| e.to_string())?;
        let analytic = pmua_gradient(&p.model, &p.features, &p.pseudo, &p.matching).map_err(|e| e.to_string())?;
        let theta = p.model.theta.clone();
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[j] += step;
            minus[j] -= step;
            let numeric = (p.loss_at(&plus) - p.loss_at(&minus)) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-5, || format!("worst relative error {worst:e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("worst relative error {worst:.2e} over 100 instances in {secs:.2} s"))
}

// 2. Damping: u = 1 zeroes the gradient, larger uniform u never grows it.
fn damping() -> Outcome {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for seed in 0..50u64 {
        let mut p = PmuaProblem::random(0xDA4F + seed, 5, 4, 3).map_err(|e| e.to_string())?;
        let mut prev = f64::INFINITY;
        for &u in &grid {
            p.pseudo = p
                .pseudo
                .iter()
                .map(|l| {
                    let (h, w) = l.mask.shape();
                    PseudoLabel::new(l.class_id, l.mask.clone(), UncertaintyMap::uniform(h, w, u).unwrap()).unwrap()
                })
                .collect();
            let g = pmua_gradient(&p.model, &p.features, &p.pseudo, &p.matching).map_err(|e| e.to_string())?;
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            ensure(norm <= prev, || format!("seed {seed}: norm rose to {norm} at u = {u}"))?;
            if u == 1.0 {
                ensure(g.iter().all(|&x| x == 0.0), || format!("seed {seed}: non-zero gradient {g:?} at u = 1"))?;
            }
            prev = norm;
        }
    }
    Ok("zero gradient at u = 1 and non-increasing norm over 50 problems".into())
}

fn brute_force(m: &[Vec<f64>]) -> f64 {
    fn go(i: usize, m: &[Vec<f64>], used: &mut [bool]) -> f64 {
        if i == m.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(m[i][j] + go(i + 1, m, used));
                used[j] = false;
            }
        }
        best
    }
    let (r, c) = (m.len(), m[0].len());
    if r <= c {
        go(0, m, &mut vec![false; c])
    } else {
        let t: Vec<Vec<f64>> = (0..c).map(|j| (0..r).map(|i| m[i][j]).collect()).collect();
        go(0, &t, &mut vec![false; r])
    }
}

// 3. Hungarian optimum equals permutation enumeration.
fn hungarian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 300;
    for t in 0..trials {
        let (r, c) = (rng.random_range(1..=7usize), rng.random_range(1..=7usize));
        // Every third matrix uses small integers so that ties are common.
        let m: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                (0..c)
                    .map(|_| if t % 3 == 0 { rng.random_range(0..4) as f64 } else { rng.random::<f64>() * 10.0 })
                    .collect()
            })
            .collect();
        let got = hungarian(&CostMatrix::from_rows(&m).unwrap());
        let want = brute_force(&m);
        ensure((got.total_cost - want).abs() <= 1e-9, || format!("{r}x{c}: {} vs {want}", got.total_cost))?;
        ensure(got.pairs.len() == r.min(c), || format!("{r}x{c}: {} pairs", got.pairs.len()))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("{trials} matrices up to 7x7 in {secs:.2} s"))
}

// 4. DDTF against a set comprehension, plus the coupled/decoupled divergence fixture.
fn filtering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = FilterConfig::default();
    for _ in 0..300 {
        let n = rng.random_range(0..30);
        let batch: Vec<InstancePrediction> = (0..n)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..6.0)).collect();
                let m: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..5.0)).collect();
                InstancePrediction::new(ClassLogits::new(c).unwrap(), MaskLogitGrid::new(3, 3, m).unwrap())
            })
            .collect();
        let oracle: BTreeSet<usize> = batch
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let l = p.class_logits.values();
                let mx = l.iter().cloned().fold(f64::MIN, f64::max);
                let c = 1.0 / l.iter().map(|v| (v - mx).exp()).sum::<f64>();
                let fg: Vec<f64> = p.mask_logits.values().iter().map(|&q| sigmoid(q)).filter(|&s| s > 0.5).collect();
                let m = if fg.is_empty() { 0.0 } else { fg.iter().sum::<f64>() / fg.len() as f64 };
                c >= 0.85 && m >= 0.9
            })
            .map(|(i, _)| i)
            .collect();
        let got: BTreeSet<usize> = filter_ddtf(&batch, &cfg).unwrap().kept_indices().into_iter().collect();
        ensure(got == oracle, || format!("kept {got:?}, oracle {oracle:?}"))?;
    }

    // (c, m) -> (DDTF verdict, coupled verdict)
    let fixture = [
        ((0.99, 0.80), Some(RejectReason::MaskBelow), None),
        ((0.80, 0.99), Some(RejectReason::ClassBelow), None),
        ((0.90, 0.80), Some(RejectReason::MaskBelow), Some(RejectReason::ScoreBelow)),
        ((0.75, 0.96), Some(RejectReason::ClassBelow), Some(RejectReason::ScoreBelow)),
        ((0.86, 0.95), None, None),
    ];
    let scores: Vec<QualityScores> = fixture.iter().map(|((c, m), _, _)| QualityScores::new(*c, *m)).collect();
    let verdicts = |cfg: &FilterConfig| {
        let set = filter_scores(&scores, cfg);
        let mut out = vec![None; scores.len()];
        for r in set.rejected {
            out[r.index] = Some(r.reason);
        }
        out
    };
    let ddtf = verdicts(&FilterConfig::decoupled(0.9, 0.85));
    let coupled = verdicts(&FilterConfig::coupled(0.765));
    for (i, (_, d, c)) in fixture.iter().enumerate() {
        ensure(ddtf[i] == *d && coupled[i] == *c, || {
            format!("fixture row {i}: ddtf {:?}, coupled {:?}", ddtf[i], coupled[i])
        })?;
    }
    Ok("300 random batches match the oracle; fixture shows coupled keeping mask-weak and class-weak \
        instances and DDTF separating the two s = 0.72 factorizations"
        .into())
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Distribution {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = v.iter().sum();
    Distribution::new(v.into_iter().map(|x| x / s).collect()).unwrap()
}

// 5. Fusion schedule endpoints, normalization and the w = 0 passthrough.
fn dicc_schedule() -> Outcome {
    for it_max in [2u64, 10, 1000, 90_000] {
        let w = |it| fusion_weight(FusionState::new(it, it_max).unwrap());
        ensure(w(0) == 0.5 && w(it_max) == 0.0 && w(it_max / 2) == 0.25, || {
            format!("it_max {it_max}: {} {} {}", w(0), w(it_max / 2), w(it_max))
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let (t, e) = (random_distribution(&mut rng, n), random_distribution(&mut rng, n));
        let w = rng.random::<f64>();
        let sum: f64 = fuse(&t, &e, w).unwrap().probs().iter().sum();
        worst = worst.max((sum - 1.0).abs());
        let end = FusionState::new(500, 500).unwrap();
        let expected = t.probs().iter().enumerate().fold(0, |b, (i, &p)| if p > t.probs()[b] { i } else { b });
        let got = correct_category(&t, &e, end).unwrap();
        ensure(got == expected, || format!("w = 0 changed class {expected} to {got}"))?;
    }
    ensure(worst <= 1e-9, || format!("normalization error {worst:e}"))?;
    Ok(format!("exact endpoints and midpoint; normalization error {worst:.1e}; 1000 passthroughs"))
}

// 6. EMA contraction, checked bit for bit.
fn ema_contraction() -> Outcome {
    for alpha in [0.0, 0.5, 0.9996, 1.0] {
        // Zero student: every step is one rounded product, the same operation
        // sequence as accumulating alpha^k.
        let theta0 = vec![1.0, -4.0, 0.125, 1024.0];
        let student = vec![0.0; 4];
        let mut teacher = theta0.clone();
        let mut power = 1.0;
        for k in 1..=50 {
            ema_update(&mut teacher, &student, alpha).unwrap();
            power *= alpha;
            for (t, t0) in teacher.iter().zip(&theta0) {
                ensure(t.abs() == power * t0.abs(), || format!("alpha {alpha}, step {k}: {t} vs {}", power * t0))?;
            }
        }
    }
    // Non-zero student where every intermediate value is representable.
    for alpha in [0.0, 0.5, 1.0] {
        let student: Vec<f64> = vec![3.0, -1.25];
        let mut teacher: Vec<f64> = vec![4.0, 0.75];
        let gap0: Vec<f64> = teacher.iter().zip(&student).map(|(t, s)| (t - s).abs()).collect();
        let mut power = 1.0;
        for k in 1..=50 {
            ema_update(&mut teacher, &student, alpha).unwrap();
            power *= alpha;
            for ((t, s), g) in teacher.iter().zip(&student).zip(&gap0) {
                ensure((t - s).abs() == power * g, || format!("alpha {alpha}, step {k}: gap {}", (t - s).abs()))?;
            }
        }
    }
    Ok("|theta_T(k) - theta_S| = alpha^k |theta_T(0) - theta_S| bitwise for alpha in {0, 0.5, 0.9996, 1}, 50 steps".into())
}

// 7. Ablation on the standard benchmark.
fn ablation() -> Outcome {
    let start = Instant::now();
    let summaries = run_ablation(&TrainerConfig::default(), &Variant::ALL, 20).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let get = |v: Variant| summaries.iter().find(|s| s.variant == v).unwrap();
    let full = get(Variant::Full);
    let mut table = Vec::new();
    for s in &summaries {
        table.push(format!("{} {:.2}", s.variant.name(), s.mean_miou));
    }
    for v in [Variant::NoDdtf, Variant::NoDicc, Variant::NoPmua, Variant::Baseline] {
        ensure(full.mean_miou >= get(v).mean_miou - 0.5, || format!("full below {}: {}", v.name(), table.join(", ")))?;
    }
    let ddtf_p = full.mean_pseudo_precision.ok_or("DDTF kept no pseudo-labels")?;
    let coupled_p = get(Variant::NoDdtf).mean_pseudo_precision.ok_or("coupled kept no pseudo-labels")?;
    ensure(ddtf_p >= coupled_p, || format!("precision ddtf {ddtf_p:.3} < coupled {coupled_p:.3}"))?;
    ensure(secs < 600.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "mIoU {}; precision ddtf {ddtf_p:.3} vs coupled {coupled_p:.3}; {secs:.0} s",
        table.join(", ")
    ))
}

// 8. Heavy unsupervised weighting hurts.
fn lambda_trend() -> Outcome {
    let at = |lambda: f64| -> Result<f64, String> {
        let mut cfg = TrainerConfig::default();
        cfg.loss.lambda = lambda;
        Ok(run_ablation(&cfg, &[Variant::Full], 10).map_err(|e| e.to_string())?[0].mean_miou)
    };
    let (one, eight) = (at(1.0)?, at(8.0)?);
    ensure(eight < one, || format!("lambda 8: {eight:.2}, lambda 1: {one:.2}"))?;
    Ok(format!("mean mIoU lambda 1: {one:.2}, lambda 8: {eight:.2} over 10 seeds"))
}

// 9. RLE, file round trips and the golden `score` CSV.
fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=64usize), rng.random_range(1..=64usize));
        let density = rng.random::<f64>();
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
        let mask = BinaryMask::new(h, w, bits).unwrap();
        let back = rle_decode(&rle_encode(&mask), h, w).map_err(|e| e.to_string())?;
        ensure(back == mask, || format!("RLE round trip failed at {h}x{w}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (h, w) = (5, 7);
    let instances = (0..4)
        .map(|k| {
            // f32-representable logits survive the f32 sidecar unchanged.
            let mask: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_range(-8.0f32..8.0))).collect();
            let class: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            NamedPrediction {
                id: format!("inst-{k}"),
                prediction: InstancePrediction::new(ClassLogits::new(class).unwrap(), MaskLogitGrid::new(h, w, mask).unwrap()),
            }
        })
        .collect();
    let file = PredictionFile {
        image_id: "round-trip".into(),
        height: h,
        width: w,
        class_names: vec!["a".into(), "b".into(), "c".into()],
        instances,
    };
    let path = dir.path().join("pred.json");
    file.write(&path).map_err(|e| e.to_string())?;
    ensure(PredictionFile::read(&path).map_err(|e| e.to_string())? == file, || "PredictionFile changed".into())?;

    let gt = GroundTruthFile {
        image_id: "round-trip".into(),
        height: h,
        width: w,
        num_classes: 3,
        instances: vec![GroundTruthInstance::new(2, BinaryMask::from_pixels(h, w, &[(0, 0), (4, 6)]).unwrap(), 3).unwrap()],
    };
    let gt_path = dir.path().join("gt.json");
    gt.write(&gt_path).map_err(|e| e.to_string())?;
    ensure(GroundTruthFile::read(&gt_path).map_err(|e| e.to_string())? == gt, || "GroundTruthFile changed".into())?;

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let out = Command::new(env!("CARGO_BIN_EXE_pseudolabel"))
        .arg("score")
        .arg(fixtures.join("golden.json"))
        .arg("--output-dir")
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let got = fs::read(dir.path().join("scores.csv")).map_err(|e| e.to_string())?;
    let want = fs::read(fixtures.join("golden_scores.csv")).map_err(|e| e.to_string())?;
    ensure(got == want, || "scores.csv differs from the golden file".into())?;
    Ok("1000 RLE masks, prediction and ground-truth files, golden CSV byte-identical".into())
}

// 10. Quality spot checks.
fn quality_spot_checks() -> Outcome {
    let m = mask_quality(&MaskLogitGrid::new(2, 2, vec![4.0, -4.0, 0.1, -0.1]).unwrap());
    // (sigmoid(4) + sigmoid(0.1)) / 2 = (0.98201379 + 0.52497919) / 2
    ensure((m - 0.75350).abs() <= 1e-5, || format!("mask quality {m}"))?;
    let c = class_quality(&ClassLogits::new(vec![2.0, 1.0, 0.0]).unwrap());
    // e^2 / (e^2 + e + 1)
    ensure((c - 0.66524).abs() <= 1e-5, || format!("class quality {c}"))?;
    let s = coupled_score(0.9, 0.8);
    // 0.9 * 0.8 is one ulp above 0.72 in binary64.
    ensure((s - 0.72).abs() <= f64::EPSILON, || format!("coupled score {s}"))?;
    Ok(format!("m = {m:.5}, c = {c:.5}, s = {s}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient check", gradient_check),
        ("damping", damping),
        ("hungarian oracle", hungarian_oracle),
        ("filtering", filtering),
        ("fusion schedule", dicc_schedule),
        ("ema contraction", ema_contraction),
        ("ablation", ablation),
        ("lambda trend", lambda_trend),
        ("format round trips", formats),
        ("quality spot checks", quality_spot_checks),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
