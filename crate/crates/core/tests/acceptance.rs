//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails.
//!
//! `ACCEPTANCE_ONLY=4,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use pss_core::classifier::{
    read_model, read_predictions_jsonl, train, weighted_cross_entropy, write_model, write_predictions_jsonl,
    Architecture, ClassWeights, LabeledCore, MicroCnn, MicroCnnModel, Prediction, TrainConfig,
};
use pss_core::consensus::{read_votes_csv, resolve, write_votes_csv, ExclusionReason, Outcome, VoteRecord};
use pss_core::core_extraction::{detect_cores, HoughParams};
use pss_core::imaging::{generate_synthetic_core, generate_synthetic_wsi, SyntheticCoreSpec};
use pss_core::inference::{
    final_score, score_core, select_kcs, ConfidenceRule, InferenceConfig, PssClassifier,
};
use pss_core::montecarlo::{sweep, write_sweep_csv, PredictionPool, Sampling, SweepConfig};
use pss_core::pss::{Level, PssConfig, PssSource};
use pss_core::report::{kcs_histogram_report, validate_histogram_report, HistogramEntry};
use pss_core::{Her2Score, Raster, SeededRng, Vote};

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Reference splitmix64, written out independently of the library.
struct Splitmix(u64);

impl Splitmix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn below(&mut self, bound: u64) -> u64 {
        ((self.next() as u128 * bound as u128) >> 64) as u64
    }
}

fn synthetic_core(side: usize, seed: u64) -> Raster {
    // Deterministic RGB texture; cheap enough for very large sides.
    let mut state = seed;
    let rows: Vec<u8> = (0..side * 3 * 64)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 56) as u8
        })
        .collect();
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        let r = &rows[(y % 64) * side * 3..(y % 64 + 1) * side * 3];
        data.extend(r.iter().map(|&v| v.wrapping_add(y as u8)));
    }
    Raster::from_vec(side, side, 3, data).unwrap()
}

// 1 ---------------------------------------------------------------------

fn criterion_pss() -> Verdict {
    let cfg = PssConfig::default();
    let core = synthetic_core(1024, 1);
    let source = PssSource::new(&core, cfg).map_err(|e| e.to_string())?;
    let a = source.sample(42).map_err(|e| e.to_string())?;
    let b = source.sample(42).map_err(|e| e.to_string())?;
    check(a.patches.len() == 51, || format!("{} patches", a.patches.len()))?;
    check(a.stacked_channels() == 153, || format!("{} channels", a.stacked_channels()))?;
    let stacked = a.stacked();
    check(stacked.len() == 512 * 512 * 153, || "stacked size".into())?;
    check(stacked == b.stacked(), || "same seed gave different bytes".into())?;

    // Coordinates from an independent transcript.
    let mut rng = Splitmix(42);
    for (i, p) in a.provenance.iter().enumerate() {
        let (dim, level) = match i {
            0..=39 => (1024u64, Level::Full),
            40..=49 => (512, Level::Half),
            _ => {
                check(p.level == Level::Whole, || "last patch is not the whole core".into())?;
                continue;
            }
        };
        let bound = dim.saturating_sub(512) + 1;
        let x = rng.below(bound) as i64;
        let y = rng.below(bound) as i64;
        check(p.level == level && p.x == x && p.y == y, || {
            format!("patch {i}: got {:?}, transcript ({x},{y})", p)
        })?;
        let expect = if level == Level::Full {
            core.crop_padded(x, y, 512, 512, 255).unwrap()
        } else {
            continue;
        };
        check(a.patches[i] == expect, || format!("patch {i} pixels differ from crop"))?;
    }

    // 100 PSSs on an 8192² core.
    let big = synthetic_core(8192, 2);
    let start = Instant::now();
    let source = PssSource::new(&big, cfg).map_err(|e| e.to_string())?;
    let mut checksum = 0u64;
    for i in 0..100 {
        let pss = source.sample(i).map_err(|e| e.to_string())?;
        checksum = checksum.wrapping_add(pss.patches[0].data()[0] as u64);
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("100 PSSs took {elapsed:.1?}"))?;
    Ok(format!("51 patches/153 channels, transcript matches, 100 PSSs on 8192² in {elapsed:.1?} (limit 60s)"))
}

// 2 ---------------------------------------------------------------------

fn criterion_gradients() -> Verdict {
    let l = weighted_cross_entropy(&[[0.1, 0.2, 0.3, 0.4]], &[Her2Score::Two], &ClassWeights::uniform())
        .map_err(|e| e.to_string())?;
    check((l - 0.3f64.ln().abs()).abs() <= 1e-6 && (l - 1.203973).abs() <= 1e-6, || format!("loss {l}"))?;

    let arch = Architecture::reference(6);
    let mut rng = SeededRng::new(99);
    let mut model = MicroCnn::<f64>::new(arch, 7).map_err(|e| e.to_string())?;
    // Non-zero biases so every tensor has a non-trivial gradient.
    for p in model.params_mut() {
        *p += 0.05 * rng.next_gaussian();
    }
    let side = 9;
    let inputs: Vec<Vec<u8>> = (0..3)
        .map(|_| (0..side * side * 6).map(|_| rng.next_below(256) as u8).collect())
        .collect();
    let labels = [0usize, 2, 3];
    let weights = ClassWeights::new([0.5, 1.0, 2.0, 2.0]).unwrap();
    let batch: Vec<(&[u8], usize)> = inputs.iter().map(|v| (v.as_slice(), side)).collect();
    let (_, grad) = model.loss_and_grad(&batch, &labels, &weights).map_err(|e| e.to_string())?;
    let loss_at = |m: &MicroCnn<f64>| m.loss_and_grad(&batch, &labels, &weights).unwrap().0;

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for t in model.tensors() {
        for _ in 0..4 {
            let idx = t.offset + rng.next_below(t.len as u64) as usize;
            let mut plus = model.clone();
            plus.params_mut()[idx] += eps;
            let mut minus = model.clone();
            minus.params_mut()[idx] -= eps;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let analytic = grad[idx];
            let scale = analytic.abs().max(numeric.abs());
            // Absolute floor for gradients that are zero up to rounding.
            let rel = if scale < 1e-9 { 0.0 } else { (analytic - numeric).abs() / scale };
            check(rel <= 1e-3, || {
                format!("{}[{}]: analytic {analytic:e} numeric {numeric:e}", t.name, idx - t.offset)
            })?;
            worst = worst.max(rel);
            probes += 1;
        }
    }
    Ok(format!("-ln 0.3 = {l:.6}; {probes} probes over 6 tensors, worst relative error {worst:.2e} (limit 1e-3)"))
}

// 3 ---------------------------------------------------------------------

fn oracle_confidence(p: &[f64; 4], rule: ConfidenceRule) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    match rule {
        ConfidenceRule::Top1 => s[0],
        ConfidenceRule::Margin => s[0] - s[1],
    }
}

fn oracle_argmax(p: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 0..4 {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

fn criterion_inference() -> Verdict {
    let mut rng = SeededRng::new(3);
    let mut cases = 0;
    for rule in [ConfidenceRule::Top1, ConfidenceRule::Margin] {
        let mut made = 0;
        while made < 1000 {
            let len = 1 + rng.next_below(6) as usize;
            let probs: Vec<[f64; 4]> = (0..len)
                .map(|_| {
                    let raw: [f64; 4] = std::array::from_fn(|_| rng.next_f64() + 1e-3);
                    let s: f64 = raw.iter().sum();
                    raw.map(|v| v / s)
                })
                .collect();
            let confs: Vec<f64> = probs.iter().map(|p| oracle_confidence(p, rule)).collect();
            let mut distinct = confs.clone();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if distinct.windows(2).any(|w| w[0] == w[1]) {
                continue;
            }
            made += 1;
            let preds: Vec<Prediction> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| Prediction::new("s", i, *p, rule).unwrap())
                .collect();
            for k in 1..=6usize {
                if k > len {
                    check(select_kcs(&preds, k).is_err(), || format!("k={k} > len={len} accepted"))?;
                    continue;
                }
                let mut order: Vec<usize> = (0..len).collect();
                order.sort_by(|&a, &b| confs[b].partial_cmp(&confs[a]).unwrap());
                let expected = order[..k].iter().map(|&i| oracle_argmax(&probs[i])).max().unwrap();
                let kcs = select_kcs(&preds, k).map_err(|e| e.to_string())?;
                let got = final_score(&kcs).map_err(|e| e.to_string())?;
                let chosen: Vec<usize> = kcs.iter().map(|p| p.pss_index).collect();
                check(chosen == order[..k], || format!("{rule:?} k={k}: chose {chosen:?}, oracle {:?}", &order[..k]))?;
                check(got.index() == expected, || format!("{rule:?} k={k}: final {got}, oracle {expected}"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (case, k, rule) checks against sort-and-max oracle"))
}

// 4 ---------------------------------------------------------------------

fn pool_of(spec: Vec<(String, Her2Score, Vec<[f64; 4]>)>) -> PredictionPool {
    let mut samples = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for (id, label, probs) in spec {
        let preds = probs
            .iter()
            .enumerate()
            .map(|(i, p)| Prediction::new(id.as_str(), i, *p, ConfidenceRule::Top1).unwrap())
            .collect();
        samples.insert(id.clone(), preds);
        labels.insert(id, label);
    }
    PredictionPool::new(samples, &labels).unwrap()
}

fn peaked(conf: f64, class: usize) -> [f64; 4] {
    let mut p = [(1.0 - conf) / 3.0; 4];
    p[class] = conf;
    p
}

/// Per sample: id, label and `(confidence, argmax)` pairs.
type PoolFixture = Vec<(String, Her2Score, Vec<(f64, usize)>)>;

fn criterion_montecarlo() -> Verdict {
    use Her2Score::*;
    // 3 samples × pool 4, distinct confidences, mixed argmax.
    let fixture: PoolFixture = vec![
        ("a".into(), One, vec![(0.9, 1), (0.8, 2), (0.7, 1), (0.6, 0)]),
        ("b".into(), Two, vec![(0.9, 3), (0.8, 2), (0.7, 2), (0.6, 2)]),
        ("c".into(), Zero, vec![(0.55, 0), (0.75, 1), (0.65, 0), (0.85, 0)]),
    ];
    // Exhaustive enumeration: per sample, fraction of the C(4,2) subsets
    // whose most confident member is correct.
    let mut p_correct = Vec::new();
    for (_, label, preds) in &fixture {
        let mut hits = 0;
        let mut total = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                let best = if preds[i].0 > preds[j].0 { preds[i] } else { preds[j] };
                hits += usize::from(best.1 == label.index());
                total += 1;
            }
        }
        p_correct.push(hits as f64 / total as f64);
    }
    let mut exact = [0.0f64; 4];
    for mask in 0..8u32 {
        let mut p = 1.0;
        for (s, &pc) in p_correct.iter().enumerate() {
            p *= if mask >> s & 1 == 1 { pc } else { 1.0 - pc };
        }
        exact[mask.count_ones() as usize] += p;
    }
    let pool = pool_of(
        fixture
            .iter()
            .map(|(id, l, ps)| (id.clone(), *l, ps.iter().map(|&(c, s)| peaked(c, s)).collect()))
            .collect(),
    );
    let trials = 50_000;
    let cfg = SweepConfig {
        n_grid: vec![2],
        k_grid: vec![1],
        trials,
        seed: 2024,
        sampling: Sampling::WithoutReplacement,
    };
    let stats = sweep(&pool, &cfg).map_err(|e| e.to_string())?;
    let mut empirical = [0.0f64; 4];
    for &(correct, count) in &stats[0].correct_count_histogram {
        empirical[correct as usize] = count as f64 / trials as f64;
    }
    let tv: f64 = 0.5 * exact.iter().zip(&empirical).map(|(a, b)| (a - b).abs()).sum::<f64>();
    check(tv <= 0.02, || format!("TV distance {tv:.4}"))?;
    // Quantiles of the exact distribution.
    let quantile = |q: f64| {
        let mut acc = 0.0;
        for (c, p) in exact.iter().enumerate() {
            acc += p;
            if acc >= q - 1e-12 && *p > 0.0 {
                return c as f64 / 3.0;
            }
        }
        1.0
    };
    let lowest = exact.iter().position(|&p| p > 0.0).unwrap() as f64 / 3.0;
    let highest = exact.iter().rposition(|&p| p > 0.0).unwrap() as f64 / 3.0;
    let s = &stats[0];
    check(s.accuracy_min == lowest && s.accuracy_max == highest, || {
        format!("envelope {}..{} vs exact support {lowest}..{highest}", s.accuracy_min, s.accuracy_max)
    })?;
    check((s.accuracy_median - quantile(0.5)).abs() < 1e-12, || {
        format!("median {} vs exact {}", s.accuracy_median, quantile(0.5))
    })?;

    // Zero variance at n = pool size.
    let full = SweepConfig { n_grid: vec![4], k_grid: vec![1, 2], trials: 500, ..cfg.clone() };
    for s in sweep(&pool, &full).map_err(|e| e.to_string())? {
        check(s.correct_count_histogram.len() == 1, || format!("n = pool, k={}: accuracy varies", s.k))?;
    }

    // Desk-scale sweep: 100 samples × pool 300, n 1..50, k 5, 1000 trials.
    let mut rng = SeededRng::new(11);
    let big = pool_of(
        (0..100)
            .map(|s| {
                let label = Her2Score::ALL[rng.next_below(4) as usize];
                let preds = (0..300)
                    .map(|_| {
                        let raw: [f64; 4] = std::array::from_fn(|_| rng.next_f64() + 1e-3);
                        let sum: f64 = raw.iter().sum();
                        raw.map(|v| v / sum)
                    })
                    .collect();
                (format!("s{s:03}"), label, preds)
            })
            .collect(),
    );
    let desk = SweepConfig {
        n_grid: (1..=50).collect(),
        k_grid: vec![5],
        trials: 1000,
        seed: 5,
        sampling: Sampling::WithoutReplacement,
    };
    let start = Instant::now();
    let first = sweep(&big, &desk).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let second = sweep(&big, &desk).map_err(|e| e.to_string())?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    write_sweep_csv(&first, &mut x).unwrap();
    write_sweep_csv(&second, &mut y).unwrap();
    check(x == y, || "sweep CSV differs between identical runs".into())?;
    check(elapsed < Duration::from_secs(120), || format!("desk sweep took {elapsed:.1?}"))?;
    Ok(format!(
        "TV {tv:.4} (limit 0.02), zero variance at n = pool, CSV deterministic, desk sweep {elapsed:.1?} (limit 120s)"
    ))
}

// 5 ---------------------------------------------------------------------

/// Rule oracle coded from the written protocol, independent of the library.
fn consensus_oracle(votes: &[Option<usize>], adj: Option<Option<usize>>) -> Option<Result<usize, &'static str>> {
    let nd = votes.iter().filter(|v| v.is_none()).count();
    if nd * 2 > votes.len() {
        return Some(Err("nd"));
    }
    let cast: Vec<usize> = votes.iter().flatten().copied().collect();
    let count = |s: usize| cast.iter().filter(|&&c| c == s).count();
    let best = (0..4).map(count).max().unwrap_or(0);
    let tied: Vec<usize> = (0..4).filter(|&s| count(s) == best).collect();
    if best >= 2 && tied.len() == 1 {
        return Some(Ok(tied[0]));
    }
    let allowed: Vec<usize> = if best >= 2 { tied } else { cast.clone() };
    match adj {
        None => Some(Err("unresolved")),
        Some(Some(a)) if allowed.contains(&a) => Some(Ok(a)),
        Some(_) => Some(Err("mismatch")),
    }
}

fn criterion_consensus() -> Verdict {
    let choices: [Option<usize>; 5] = [Some(0), Some(1), Some(2), Some(3), None];
    let adjs: [Option<Option<usize>>; 6] = [None, Some(Some(0)), Some(Some(1)), Some(Some(2)), Some(Some(3)), Some(None)];
    let to_vote = |v: Option<usize>| v.map_or(Vote::NonDiagnostic, |s| Vote::Score(Her2Score::ALL[s]));
    let mut cases = 0;
    let mut pure_labeled = 0;
    let mut pure_oracle = 0;
    for code in 0..5usize.pow(5) {
        let mut c = code;
        let votes: Vec<Option<usize>> = (0..5)
            .map(|_| {
                let v = choices[c % 5];
                c /= 5;
                v
            })
            .collect();
        let pure = votes.iter().all(Option::is_some);
        for adj in adjs {
            let rec = VoteRecord {
                core_id: format!("c{code}"),
                votes: votes.iter().enumerate().map(|(i, v)| (format!("p{i}"), to_vote(*v))).collect(),
                adjudicator: adj.map(to_vote),
            };
            let got = resolve(&rec).map_err(|e| e.to_string())?.outcome;
            let want = consensus_oracle(&votes, adj).unwrap();
            let same = match (got, want) {
                (Outcome::Labeled { score, .. }, Ok(s)) => score.index() == s,
                (Outcome::Excluded(ExclusionReason::NonDiagnosticMajority), Err("nd")) => true,
                (Outcome::Excluded(ExclusionReason::UnresolvedDiscordance), Err("unresolved")) => true,
                (Outcome::Excluded(ExclusionReason::AdjudicatorMismatch), Err("mismatch")) => true,
                _ => false,
            };
            check(same, || format!("votes {votes:?} adj {adj:?}: got {got:?}, oracle {want:?}"))?;
            if pure && adj.is_none() {
                pure_labeled += usize::from(got.score().is_some());
                pure_oracle += usize::from(want.is_ok());
            }
            cases += 1;
        }
    }
    check(pure_labeled == pure_oracle, || "pure-score labeled counts differ".into())?;
    Ok(format!("{cases} cases match oracle; pure 4⁵ set labels {pure_labeled} of 1024"))
}

// 6 ---------------------------------------------------------------------

fn criterion_detection() -> Verdict {
    let (slide, truth) = generate_synthetic_wsi(150, 400, 6).map_err(|e| e.to_string())?;
    let params = HoughParams::for_radius_range(340.0, 460.0);
    let start = Instant::now();
    let dets = detect_cores(&slide, &params).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut matched = vec![false; dets.len()];
    let mut found = 0;
    let mut worst_center: f64 = 0.0;
    let mut worst_radius: f64 = 0.0;
    for t in &truth {
        let hit = dets.iter().enumerate().find(|(i, d)| {
            !matched[*i] && ((d.cx - t.cx as f64).powi(2) + (d.cy - t.cy as f64).powi(2)).sqrt() <= 5.0
        });
        if let Some((i, d)) = hit {
            matched[i] = true;
            found += 1;
            worst_center = worst_center.max(((d.cx - t.cx as f64).powi(2) + (d.cy - t.cy as f64).powi(2)).sqrt());
            worst_radius = worst_radius.max((d.radius - t.r as f64).abs() / t.r as f64);
        }
    }
    let recall = found as f64 / truth.len() as f64;
    let false_pos = matched.iter().filter(|m| !**m).count();
    let summary = format!(
        "recall {recall:.3}, {false_pos} false positives, center ≤ {worst_center:.2}px, radius ≤ {:.2}%, {elapsed:.1?}",
        worst_radius * 100.0
    );
    check(recall >= 0.95, || summary.clone())?;
    check(false_pos == 0, || summary.clone())?;
    check(worst_radius <= 0.05, || summary.clone())?;
    check(elapsed < Duration::from_secs(30), || summary.clone())?;
    Ok(summary)
}

// 7 ---------------------------------------------------------------------

struct Benchmark {
    model: MicroCnnModel,
    pss: PssConfig,
    test: Vec<LabeledCore>,
}

fn synthetic_split(diameter: usize, seed: u64) -> (Vec<LabeledCore>, Vec<LabeledCore>, Vec<LabeledCore>) {
    let mut rng = SeededRng::new(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for class in Her2Score::ALL {
        for i in 0..50 {
            let spec = SyntheticCoreSpec::jittered(class, diameter, &mut rng);
            let core = LabeledCore {
                id: format!("{}-{i:02}", class.index()),
                image: generate_synthetic_core(&spec).unwrap(),
                label: class,
            };
            match i {
                0..=34 => tr.push(core),
                35..=39 => va.push(core),
                _ => te.push(core),
            }
        }
    }
    (tr, va, te)
}

fn criterion_end_to_end(bench: &mut Option<Benchmark>) -> Verdict {
    let start = Instant::now();
    let pss = PssConfig {
        patch_size: 64,
        n_full: 40,
        n_half: 10,
        include_whole: true,
    };
    let (tr, va, te) = synthetic_split(256, 7);
    check(tr.len() == 140 && va.len() == 20 && te.len() == 40, || "split sizes".into())?;
    let cfg = TrainConfig {
        initial_lr: 1e-3,
        max_epochs: 30,
        seed: 7,
        ..TrainConfig::default()
    };
    let outcome = train(&tr, &va, &pss, &cfg).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();

    let inf = InferenceConfig::default();
    let mut correct = 0;
    let mut entries = Vec::new();
    for (j, core) in te.iter().enumerate() {
        let scored = score_core(&core.image, &outcome.model, &pss, &inf, 1000 + j as u64, &core.id)
            .map_err(|e| e.to_string())?;
        correct += usize::from(scored.report.final_score == core.label);
        entries.push(HistogramEntry::from_report(&scored.report, Some(core.label)));
    }
    let acc = correct as f64 / te.len() as f64;
    let report = kcs_histogram_report(entries);
    let doc = serde_json::to_value(&report).unwrap();
    validate_histogram_report(&doc).map_err(|e| e.to_string())?;
    check(report.entries().all(|e| e.histogram.iter().sum::<usize>() == inf.k), || "histogram sum".into())?;
    let elapsed = start.elapsed();
    let epochs = outcome.log.len();
    let best = outcome.best_epoch.map_or(-1, |e| e as i64);
    let summary = format!(
        "test accuracy {acc:.3} (limit 0.90) after {epochs} epochs (best {best}), train {train_time:.0?}, total {elapsed:.0?} (limit 600s)"
    );
    *bench = Some(Benchmark {
        model: outcome.model,
        pss,
        test: te,
    });
    check(acc >= 0.90, || summary.clone())?;
    check(elapsed < Duration::from_secs(600), || summary.clone())?;
    Ok(summary)
}

// 8 ---------------------------------------------------------------------

fn criterion_timing() -> Verdict {
    let core = synthetic_core(10_000, 8);
    let pss = PssConfig::default();
    let model = MicroCnnModel::new(Architecture::reference(pss.stacked_channels()), 1).unwrap();
    let inf = InferenceConfig::default();
    let start = Instant::now();
    let scored = score_core(&core, &model, &pss, &inf, 8, "big").map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary = format!("N = 20 on a 10000² core in {elapsed:.1?} (target 15s, final {})", scored.report.final_score);
    check(elapsed <= Duration::from_secs(15), || summary.clone())?;
    Ok(summary)
}

// 9 ---------------------------------------------------------------------

fn criterion_round_trips(bench: &Option<Benchmark>) -> Verdict {
    let (model, pss) = match bench {
        Some(b) => (b.model.clone(), b.pss),
        None => {
            let pss = PssConfig { patch_size: 64, ..PssConfig::default() };
            (MicroCnnModel::new(Architecture::reference(pss.stacked_channels()), 3).unwrap(), pss)
        }
    };
    let mut bytes = Vec::new();
    write_model(&model, Some(&pss), &mut bytes).map_err(|e| e.to_string())?;
    let (back, stored) = read_model(&bytes).map_err(|e| e.to_string())?;
    check(stored == Some(pss), || "stored PSS config lost".into())?;
    let core = match bench {
        Some(b) => b.test[0].image.clone(),
        None => generate_synthetic_core(&SyntheticCoreSpec::for_class(Her2Score::Two, 256, 1)).unwrap(),
    };
    let source = PssSource::new(&core, pss).map_err(|e| e.to_string())?;
    for seed in 0..5 {
        let p = source.sample(seed).unwrap();
        let a = model.forward(&p).unwrap().map(f32::to_bits);
        let b = back.forward(&p).unwrap().map(f32::to_bits);
        check(a == b, || format!("forward differs after reload (seed {seed})"))?;
        let via_trait = PssClassifier::predict(&back, &p).unwrap();
        check(via_trait.iter().all(|v| v.is_finite()), || "non-finite output".into())?;
    }
    let mut truncated_ok = true;
    for cut in [bytes.len() - 4, bytes.len() - 1, bytes.len() / 2] {
        truncated_ok &= read_model(&bytes[..cut]).is_err();
    }
    check(truncated_ok, || "truncated model accepted".into())?;

    // Predictions JSONL.
    let mut rng = SeededRng::new(9);
    let preds: Vec<Prediction> = (0..3)
        .flat_map(|s| (0..50).map(move |i| (s, i)))
        .map(|(s, i)| {
            let raw: [f64; 4] = std::array::from_fn(|_| rng.next_f64());
            let sum: f64 = raw.iter().sum();
            Prediction::new(format!("core-{s}"), i, raw.map(|v| v / sum), ConfidenceRule::Top1).unwrap()
        })
        .collect();
    let mut first = Vec::new();
    write_predictions_jsonl(&preds, &mut first).unwrap();
    let map = read_predictions_jsonl(first.as_slice(), "mem", ConfidenceRule::Top1).map_err(|e| e.to_string())?;
    let mut second = Vec::new();
    write_predictions_jsonl(map.values().flatten(), &mut second).unwrap();
    check(first == second, || {
        let a = String::from_utf8_lossy(&first).lines().zip(String::from_utf8_lossy(&second).lines()).find(|(a, b)| a != b).map(|(a, b)| format!("{a} vs {b}"));
        format!("predictions JSONL changed on round trip: {a:?}")
    })?;

    // Votes CSV.
    let records: Vec<VoteRecord> = (0..200)
        .map(|c| VoteRecord {
            core_id: format!("tma1-{c:03}"),
            votes: (0..5)
                .map(|p| {
                    let v = rng.next_below(5) as usize;
                    (format!("path{p}"), Her2Score::from_index(v).map_or(Vote::NonDiagnostic, Vote::Score))
                })
                .collect(),
            adjudicator: (c % 3 == 0).then(|| Vote::Score(Her2Score::ALL[c % 4])),
        })
        .collect();
    let mut v1 = Vec::new();
    write_votes_csv(&records, &mut v1).map_err(|e| e.to_string())?;
    let parsed = read_votes_csv(v1.as_slice(), "mem").map_err(|e| e.to_string())?;
    check(parsed == records, || "votes changed on read".into())?;
    let mut v2 = Vec::new();
    write_votes_csv(&parsed, &mut v2).map_err(|e| e.to_string())?;
    check(v1 == v2, || "votes CSV changed on round trip".into())?;
    Ok("model container bit-exact forwards, truncation rejected, JSONL and votes CSV byte-identical".into())
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|v| v.contains(&n));
    let mut bench = None;
    let mut failed = Vec::new();
    let mut run = |n: u32, name: &str, gating: bool, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail} [{took:.1?}]"),
            Err(detail) if gating => {
                println!("criterion {n} ({name}): FAIL: {detail} [{took:.1?}]");
                failed.push(n);
            }
            Err(detail) => println!("criterion {n} ({name}): SOFT-FAIL (not gating): {detail} [{took:.1?}]"),
        }
    };
    run(1, "PSS structure", true, &mut criterion_pss);
    run(2, "loss and gradients", true, &mut criterion_gradients);
    run(3, "inference oracle", true, &mut criterion_inference);
    run(4, "Monte Carlo exactness", true, &mut criterion_montecarlo);
    run(5, "consensus truth table", true, &mut criterion_consensus);
    run(6, "core detection", true, &mut criterion_detection);
    run(7, "end-to-end synthetic benchmark", true, &mut || criterion_end_to_end(&mut bench));
    run(8, "protocol timing anchor", false, &mut criterion_timing);
    run(9, "format round trips", true, &mut || criterion_round_trips(&bench));
    if !failed.is_empty() {
        println!("acceptance: {} gating criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all gating criteria passed");
}
