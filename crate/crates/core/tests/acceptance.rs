//! Acceptance suite. Each test prints one `[acceptance]` line with its verdict;
//! run with `cargo test -p vse-ens --test acceptance -- --nocapture`.
//!
//! Tests take a shared lock so that the timing criteria never run alongside
//! other work.

use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vse_ens::eval::{
    evaluate, evaluate_auc, image_metrics, leave_one_out_split, EvalOptions, HeldOutRank, MetricsReport,
};
use vse_ens::model::{compute_factor_stats, EmbeddingModel, Triplet, TIE_EPSILON};
use vse_ens::sampler::{draw_adaptive_candidate, refresh_cache, RankDistribution};
use vse_ens::train::{hinge_update, logistic_update, train, Method, TrainConfig, Trainer};
use vse_ens::{gen_synthetic, Dataset};

static LOCK: Mutex<()> = Mutex::new(());

fn lock() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "[acceptance] C{id} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn tv(empirical: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = empirical.iter().sum();
    empirical
        .iter()
        .zip(probs)
        .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
        .sum::<f64>()
        / 2.0
}

// ---------------------------------------------------------------------------

#[test]
fn c1_rank_invariance() {
    let _g = lock();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut violations = 0usize;
    let mut compared = 0usize;
    for _ in 0..1000 {
        let k = rng.random_range(1..=16);
        let n = rng.random_range(2..=200);
        let scale = 10f64.powf(rng.random_range(-2.0..1.0));
        let mut m = EmbeddingModel::gaussian(1, n, k, scale, &mut rng).unwrap();
        // Occasionally flatten a dimension so it has zero spread.
        if rng.random_bool(0.2) {
            let f = rng.random_range(0..k);
            let c = rng.random_range(-1.0..1.0);
            for a in 0..n {
                m.annotation_mut(a)[f] = c;
            }
        }
        if rng.random_bool(0.1) {
            m.image_mut(0)[0] = 0.0;
        }
        let stats = compute_factor_stats(&m);
        let s: Vec<f64> = (0..n).map(|a| m.score(0, a).unwrap()).collect();
        let t: Vec<f64> = (0..n).map(|a| m.transformed_score(&stats, 0, a).unwrap()).collect();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&x, &y| v[y].total_cmp(&v[x]).then(x.cmp(&y)));
            let mut pos = vec![0; n];
            for (p, &a) in idx.iter().enumerate() {
                pos[a] = p;
            }
            pos
        };
        let (ps, pt) = (order(&s), order(&t));
        for x in 0..n {
            for y in 0..n {
                if s[x] - s[y] > TIE_EPSILON {
                    compared += 1;
                    if !(ps[x] < ps[y] && pt[x] < pt[y]) {
                        violations += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = violations == 0 && secs < 30.0;
    report(
        1,
        "rank invariance",
        pass,
        &format!("{violations} violations over {compared} ordered pairs, {secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

/// Independent mixture oracle: `sum_f p(f|i) p(a|i,f)` by direct counting.
fn adaptive_mixture(m: &EmbeddingModel, lambda: f64) -> Vec<f64> {
    let n = m.num_annotations();
    let k = m.k();
    let vi = m.image(0);
    let sigma: Vec<f64> = (0..k)
        .map(|f| {
            let mean = (0..n).map(|a| m.annotation(a)[f]).sum::<f64>() / n as f64;
            ((0..n).map(|a| (m.annotation(a)[f] - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect();
    let wf: Vec<f64> = (0..k).map(|f| vi[f].abs() * sigma[f]).collect();
    let zf: f64 = wf.iter().sum();
    let zr: f64 = (1..=n).map(|r| (-(r as f64) / (lambda * n as f64)).exp()).sum();
    let mut p = vec![0.0; n];
    for f in 0..k {
        for a in 0..n {
            let va = m.annotation(a)[f];
            let rank = 1 + (0..n)
                .filter(|&b| {
                    let vb = m.annotation(b)[f];
                    if vi[f] >= 0.0 {
                        vb > va || (vb == va && b < a)
                    } else {
                        vb < va || (vb == va && b > a)
                    }
                })
                .count();
            p[a] += wf[f] / zf * (-(rank as f64) / (lambda * n as f64)).exp() / zr;
        }
    }
    p
}

#[test]
fn c2_adaptive_sampler_distribution() {
    let _g = lock();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for lambda in [0.1, 0.5] {
        let mut m = EmbeddingModel::gaussian(1, 30, 4, 1.0, &mut rng).unwrap();
        // mixed signs on the image row
        m.image_mut(0).copy_from_slice(&[0.8, -1.3, 0.4, -0.2]);
        let probs = adaptive_mixture(&m, lambda);
        let ranks = RankDistribution::new(lambda, 30).unwrap();
        let mut cache = refresh_cache(&m);
        let mut counts = vec![0u64; 30];
        for _ in 0..1_000_000 {
            cache.on_draw(&m, 1);
            counts[draw_adaptive_candidate(&m, &cache, &ranks, 0, &mut rng)] += 1;
        }
        let d = tv(&counts, &probs);
        worst = worst.max(d);
        details.push(format!("lambda={lambda}: TV={d:.5}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 0.01 && secs < 60.0;
    report(2, "adaptive sampler distribution", pass, &format!("{}, {secs:.2}s", details.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------

#[test]
fn c3_truncated_rank_distribution() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let draws = 1_000_000u64;
    let mut pass = true;
    let mut details = Vec::new();
    for lambda in [0.001, 0.1, 1.0] {
        for n in [10usize, 1000] {
            let w: Vec<f64> = (1..=n).map(|r| (-(r as f64) / (lambda * n as f64)).exp()).collect();
            let z: f64 = w.iter().sum();
            let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
            let dist = RankDistribution::new(lambda, n).unwrap();
            let mut counts = vec![0u64; n];
            for _ in 0..draws {
                counts[dist.sample(&mut rng) - 1] += 1;
            }
            let d = tv(&counts, &probs);
            // Expected TV of an exact sampler from multinomial noise alone.
            let floor: f64 = probs
                .iter()
                .map(|p| (p * (1.0 - p) / draws as f64).sqrt() * (2.0 / std::f64::consts::PI).sqrt())
                .sum::<f64>()
                / 2.0;
            let ok = d < 0.005;
            pass &= ok;
            details.push(format!(
                "(lambda={lambda}, |A|={n}) TV={d:.5} noise-floor={floor:.5} {}",
                if ok { "ok" } else { "over" }
            ));
        }
    }
    report(3, "truncated rank distribution", pass, &details.join("; "));
    assert!(pass, "TV threshold exceeded: {}", details.join("; "));
}

// ---------------------------------------------------------------------------

fn planted(num_annotations: usize) -> Dataset {
    gen_synthetic(500, num_annotations, 4, 10, 0.1, 2024).unwrap().dataset
}

fn bench_config(method: Method) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        ..TrainConfig::new(method)
    }
}

#[test]
fn c4_warp_trial_growth() {
    let _g = lock();
    let start = Instant::now();
    let data = planted(500);
    let (_, warp) = train(&data, &bench_config(Method::Warp)).unwrap();
    // Epochs are short, so time three identical (seeded) runs and keep the
    // fastest measurement of each epoch.
    let mut vse = vec![f64::INFINITY; 30];
    for _ in 0..3 {
        let (_, log) = train(&data, &bench_config(Method::VseEns)).unwrap();
        for (best, s) in vse.iter_mut().zip(&log) {
            *best = best.min(s.ns_per_draw());
        }
    }
    let warp_ratio = warp[29].mean_trials / warp[0].mean_trials;
    let vse_ratio = vse[29] / vse[0];
    let vse_max = vse.iter().map(|v| v / vse[0]).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = warp_ratio >= 5.0 && vse_ratio <= 1.5 && secs < 600.0;
    report(
        4,
        "WARP trial growth vs constant adaptive cost",
        pass,
        &format!(
            "WARP mean trials {:.2} -> {:.2} (x{warp_ratio:.1}); VSE-ens ns/draw {:.0} -> {:.0} (x{vse_ratio:.2}, max over epochs x{vse_max:.2}); {secs:.1}s",
            warp[0].mean_trials,
            warp[29].mean_trials,
            vse[0],
            vse[29]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

#[test]
fn c5_desk_scale_speedup() {
    let _g = lock();
    let data = planted(2000);
    let timed = |m: Method| {
        let t = Instant::now();
        train(&data, &bench_config(m)).unwrap();
        t.elapsed().as_secs_f64()
    };
    let warp = timed(Method::Warp);
    let vse = timed(Method::VseEns);
    let ratio = vse / warp;
    let pass = ratio <= 0.5;
    report(
        5,
        "desk-scale speedup",
        pass,
        &format!("VSE-ens {vse:.2}s vs WARP {warp:.2}s, ratio {ratio:.3} (speedup x{:.1})", warp / vse),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

/// Brute-force metrics for one image: ranking by repeated arg-max and AUC by
/// enumerating every (held-out, negative) pair.
fn brute_force(scores: &[f64], held: usize, excluded: &[usize]) -> (f64, f64, f64, f64) {
    let mut remaining: Vec<usize> = (0..scores.len()).filter(|a| !excluded.contains(a)).collect();
    let mut ranked = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for j in 1..remaining.len() {
            let (a, b) = (remaining[j], remaining[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = j;
            }
        }
        ranked.push(remaining.remove(best));
    }
    let hit5 = ranked.iter().take(5).any(|&a| a == held) as u8 as f64;
    // AveP over the whole list: sum of precision at each relevant position times recall gain.
    let mut ap = 0.0;
    let mut hits = 0.0;
    for (k, &a) in ranked.iter().enumerate() {
        if a == held {
            hits += 1.0;
            ap += hits / (k as f64 + 1.0) * 1.0;
        }
    }
    let mut pairs = 0.0;
    let mut wins = 0.0;
    for &a in &ranked {
        if a == held {
            continue;
        }
        pairs += 1.0;
        if scores[held] > scores[a] {
            wins += 1.0;
        } else if scores[held] == scores[a] {
            wins += 0.5;
        }
    }
    (hit5 / 5.0, hit5, ap, wins / pairs)
}

#[test]
fn c6_metric_oracles() {
    let _g = lock();
    // 3 images, 6 annotations, k = 2; image 2 produces exact ties.
    let m = EmbeddingModel::from_rows(
        &[vec![1.0, 0.5], vec![-0.5, 2.0], vec![0.0, 1.0]],
        &[
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![-1.0, 0.3],
            vec![0.4, 0.4],
            vec![1.5, -0.7],
            vec![0.0, 0.8],
        ],
    )
    .unwrap();
    let train = Dataset::from_pairs(3, 6, vec![(0, 0), (1, 1), (1, 2), (2, 3)]).unwrap();
    let test = vec![(0, 3), (1, 4), (2, 5)];
    let mut max_err: f64 = 0.0;
    let mut rec_ok = true;
    for opts in [EvalOptions::default(), EvalOptions { exclude_train_positives: false }] {
        let got: MetricsReport = evaluate(&m, &train, &test, opts);
        let mut sums = [0.0; 4];
        for &(i, held) in &test {
            let scores: Vec<f64> = (0..6).map(|a| m.score(i, a).unwrap()).collect();
            let excl: &[usize] = if opts.exclude_train_positives { train.positives(i) } else { &[] };
            let (p5, r5, ap, auc) = brute_force(&scores, held, excl);
            sums[0] += p5;
            sums[1] += r5;
            sums[2] += ap;
            sums[3] += auc;
        }
        let expected = sums.map(|s| s / test.len() as f64);
        for (g, e) in [got.pre5, got.rec5, got.map, got.auc].iter().zip(expected) {
            max_err = max_err.max((g - e).abs());
        }
        rec_ok &= got.rec5 == 5.0 * got.pre5 && got.rec10 == 10.0 * got.pre10;
        for &(i, held) in &test {
            let scores: Vec<f64> = (0..6).map(|a| m.score(i, a).unwrap()).collect();
            let excl: &[usize] = if opts.exclude_train_positives { train.positives(i) } else { &[] };
            let im = image_metrics(&scores, held, excl);
            rec_ok &= im.rec5 == 5.0 * im.pre5 && im.rec10 == 10.0 * im.pre10;
        }
        let fast = evaluate_auc(&m, &train, &test, opts);
        max_err = max_err.max((fast - got.auc).abs());
    }
    let ties = HeldOutRank::from_scores(&[0.8, 0.8, 0.3], 1, &[]);
    let pass = max_err <= 1e-12 && rec_ok && ties.rank == 2 && ties.auc() == 0.75;
    report(
        6,
        "metric oracles",
        pass,
        &format!("max |metric - brute force| = {max_err:e}, Rec@N = N*Pre@N: {rec_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

fn objective(m: &EmbeddingModel, t: &Triplet, reg: f64, hinge_weight: Option<f64>) -> f64 {
    let x = m.score(t.image, t.positive).unwrap() - m.score(t.image, t.negative).unwrap();
    let norms: f64 = [m.image(t.image), m.annotation(t.positive), m.annotation(t.negative)]
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let loss = match hinge_weight {
        Some(w) => w * (1.0 - x).max(0.0),
        // -ln sigmoid(x) = ln(1 + e^-x)
        None => {
            if x > 0.0 {
                (-x).exp().ln_1p()
            } else {
                -x + x.exp().ln_1p()
            }
        }
    };
    loss + 0.5 * reg * norms
}

type Coord = (bool, usize, usize);

fn coord_mut(m: &mut EmbeddingModel, (is_image, row, f): Coord) -> &mut f64 {
    if is_image {
        &mut m.image_mut(row)[f]
    } else {
        &mut m.annotation_mut(row)[f]
    }
}

fn coord(m: &EmbeddingModel, (is_image, row, f): Coord) -> f64 {
    if is_image {
        m.image(row)[f]
    } else {
        m.annotation(row)[f]
    }
}

#[test]
fn c7_gradient_checks() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    let h = 1e-5;
    let eta = 1.0;
    let mut worst_hinge: f64 = 0.0;
    let mut worst_logistic: f64 = 0.0;
    let mut checked = 0;
    while checked < 100 {
        let k = rng.random_range(2..=8);
        let m = EmbeddingModel::gaussian(3, 6, k, 1.0, &mut rng).unwrap();
        let image = rng.random_range(0..3);
        let positive = rng.random_range(0..6);
        let negative = (positive + rng.random_range(1..6)) % 6;
        let t = Triplet { image, positive, negative };
        let reg = rng.random_range(0.0..0.1);
        let weight = rng.random_range(0.5..5.0);
        let margin = 1.0 - m.score(image, positive).unwrap() + m.score(image, negative).unwrap();
        // stay clear of the hinge kink
        if margin.abs() < 1e-2 {
            continue;
        }
        checked += 1;
        let coords: Vec<Coord> = (0..k)
            .flat_map(|f| [(true, image, f), (false, positive, f), (false, negative, f)])
            .collect();
        for (hinge, worst) in [(true, &mut worst_hinge), (false, &mut worst_logistic)] {
            let mut stepped = m.clone();
            if hinge {
                hinge_update(&mut stepped, &t, eta, reg, weight);
            } else {
                logistic_update(&mut stepped, &t, eta, reg);
            }
            let w = hinge.then_some(weight);
            for &c in &coords {
                let analytic = (coord(&m, c) - coord(&stepped, c)) / eta;
                let expected = if hinge && margin < 0.0 {
                    // inactive hinge: no step at all
                    0.0
                } else {
                    let mut plus = m.clone();
                    *coord_mut(&mut plus, c) += h;
                    let mut minus = m.clone();
                    *coord_mut(&mut minus, c) -= h;
                    (objective(&plus, &t, reg, w) - objective(&minus, &t, reg, w)) / (2.0 * h)
                };
                let rel = (analytic - expected).abs() / analytic.abs().max(expected.abs()).max(1e-8);
                let rel = if analytic == expected { 0.0 } else { rel };
                *worst = worst.max(rel);
            }
        }
    }
    let pass = worst_hinge <= 1e-4 && worst_logistic <= 1e-4;
    report(
        7,
        "gradient checks",
        pass,
        &format!("100 triplets, max relative error hinge {worst_hinge:.2e}, logistic {worst_logistic:.2e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

fn epochs_to_reach(
    method: Method,
    seed: u64,
    split: &vse_ens::Split,
    targets: &[f64],
    max_epochs: usize,
) -> Vec<Option<usize>> {
    let config = TrainConfig {
        k: 16,
        seed,
        epochs: max_epochs,
        ..TrainConfig::new(method)
    };
    let (mut trainer, mut model) = Trainer::init(&split.train, config).unwrap();
    let mut reached = vec![None; targets.len()];
    for epoch in 1..=max_epochs {
        trainer.train_epoch(&mut model, &split.train).unwrap();
        let auc = evaluate_auc(&model, &split.train, &split.test, EvalOptions::default());
        for (slot, &t) in reached.iter_mut().zip(targets) {
            if slot.is_none() && auc >= t {
                *slot = Some(epoch);
            }
        }
        if reached.iter().all(Option::is_some) {
            break;
        }
    }
    reached
}

#[test]
fn c8_learning_sanity_and_convergence_order() {
    let _g = lock();
    let start = Instant::now();
    let mut reached_085 = 0;
    let mut faster = 0;
    let mut lines = Vec::new();
    for seed in 0..20u64 {
        let data = gen_synthetic(2000, 300, 4, 10, 0.1, seed).unwrap().dataset;
        let split = leave_one_out_split(&data, seed).unwrap();
        let vse = epochs_to_reach(Method::VseEns, seed, &split, &[0.80, 0.85], 100);
        if vse[1].is_some() {
            reached_085 += 1;
        }
        // Opt-AUC only has to be run as long as VSE-ens needed for 0.80.
        let budget = vse[0].unwrap_or(100);
        let opt = epochs_to_reach(Method::OptAuc, seed, &split, &[0.80], budget)[0];
        let strictly_fewer = match (vse[0], opt) {
            (Some(v), Some(o)) => v < o,
            (Some(_), None) => true,
            _ => false,
        };
        faster += strictly_fewer as usize;
        lines.push(format!("s{seed}:{:?}/{:?}", vse[0], opt));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = reached_085 >= 18 && faster == 20 && secs < 900.0;
    report(
        8,
        "learning sanity / convergence order",
        pass,
        &format!(
            "AUC>=0.85 within 100 epochs in {reached_085}/20 seeds; VSE-ens reaches 0.80 strictly before Opt-AUC in {faster}/20 [epochs vse/opt: {}]; {secs:.1}s",
            lines.join(" ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

fn pipeline(dir: &std::path::Path) -> Vec<(String, String)> {
    let run = |args: &[&str]| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = vse_ens::cli::main_with_args(
            std::iter::once("vse-ens").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
        String::from_utf8(out).unwrap()
    };
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    run(&["gen", "--images", "150", "--annotations", "60", "--positives", "5", "--noise", "0.1", "--out", &p("data")]);
    run(&["split", "--pairs", &p("data/pairs.tsv"), "--vocab-dir", &p("data"), "--out", &p("split")]);
    let mut files = Vec::new();
    for method in ["vse-ens", "warp", "opt-auc"] {
        let out = p(method);
        run(&[
            "train", "--train", &p("split/train.tsv"), "--vocab-dir", &p("split"), "--method", method,
            "--epochs", "4", "--k", "12", "--out", &out,
        ]);
        let metrics = run(&[
            "eval", "--model", &p(&format!("{method}/model.txt")), "--train", &p("split/train.tsv"),
            "--test", &p("split/test.tsv"), "--vocab-dir", &p("split"), "--out", &out,
        ]);
        let read = |f: &str| std::fs::read_to_string(dir.join(method).join(f)).unwrap();
        files.push((format!("{method}/model.txt"), read("model.txt")));
        files.push((format!("{method}/trials.csv"), strip_wall_time(&read("trials.csv"))));
        files.push((format!("{method}/metrics.json"), read("metrics.json")));
        files.push((format!("{method}/stdout"), metrics));
    }
    for f in ["data/pairs.tsv", "split/train.tsv", "split/test.tsv"] {
        files.push((f.to_string(), std::fs::read_to_string(dir.join(f)).unwrap()));
    }
    files
}

#[test]
fn c9_determinism() {
    let _g = lock();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = differing.is_empty();
    report(
        9,
        "determinism",
        pass,
        &format!("{} artifacts compared, differing: {differing:?}", fa.len()),
    );
    assert!(pass);
}
