//! Monte Carlo (N, k) sweeps over per-sample pools of precomputed
//! predictions.
//!
//! A trial visits samples in ascending `sample_id` order with one
//! `SeededRng`. For each sample it draws `n` pool positions (without
//! replacement by a partial Fisher-Yates shuffle: step `i` swaps `i` with
//! `i + next_below(pool - i)`; with replacement: `n` independent
//! `next_below(pool)` draws), runs the KCS protocol on them and tallies the
//! result. Trial `t` of cell `(n, k)` is seeded with
//! `derive_seed(seed, [n, k, t])`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{load_external_predictions, Prediction};
use crate::error::{Error, Result};
use crate::inference::{kcs_order, ConfidenceRule};
use crate::report::ConfusionMatrix;
use crate::rng::{derive_seed, SeededRng};
use crate::score::Her2Score;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    WithoutReplacement,
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPool {
    samples: BTreeMap<String, Vec<Prediction>>,
    labels: BTreeMap<String, Her2Score>,
}

impl PredictionPool {
    /// Labels for samples without predictions are ignored; a sample without
    /// a label is an error.
    pub fn new(samples: BTreeMap<String, Vec<Prediction>>, labels: &BTreeMap<String, Her2Score>) -> Result<Self> {
        let mut kept = BTreeMap::new();
        for (id, preds) in &samples {
            let label = labels
                .get(id)
                .ok_or_else(|| Error::Arity(format!("sample {id:?} has no label")))?;
            if preds.is_empty() {
                return Err(Error::Arity(format!("sample {id:?} has an empty pool")));
            }
            kept.insert(id.clone(), *label);
        }
        Ok(Self { samples, labels: kept })
    }

    pub fn load(preds: impl AsRef<Path>, labels: impl AsRef<Path>, rule: ConfidenceRule) -> Result<Self> {
        let samples = load_external_predictions(preds, rule)?;
        let labels = load_labels_csv(labels)?;
        Self::new(samples, &labels)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &BTreeMap<String, Vec<Prediction>> {
        &self.samples
    }

    pub fn label(&self, sample_id: &str) -> Option<Her2Score> {
        self.labels.get(sample_id).copied()
    }

    /// Smallest per-sample pool.
    pub fn min_pool_size(&self) -> usize {
        self.samples.values().map(Vec::len).min().unwrap_or(0)
    }
}

/// Pool with each sample's predictions pre-sorted into KCS order, so the
/// KCS of any subset is its `k` lowest ranks.
struct RankedPool {
    /// `(label, argmax score by rank)` per sample.
    samples: Vec<(Her2Score, Vec<Her2Score>)>,
}

impl RankedPool {
    fn new(pool: &PredictionPool) -> Self {
        let samples = pool
            .samples
            .iter()
            .map(|(id, preds)| {
                let mut sorted: Vec<&Prediction> = preds.iter().collect();
                sorted.sort_by(|a, b| kcs_order(a, b));
                (pool.labels[id], sorted.iter().map(|p| p.argmax_score).collect())
            })
            .collect();
        Self { samples }
    }

    fn max_pool(&self) -> usize {
        self.samples.iter().map(|s| s.1.len()).max().unwrap_or(0)
    }

    fn check(&self, n: usize, k: usize, sampling: Sampling) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Arity("empty prediction pool".into()));
        }
        if k == 0 || k > n {
            return Err(Error::Arity(format!("need 1 <= k <= n, got n={n} k={k}")));
        }
        if sampling == Sampling::WithoutReplacement {
            let min = self.samples.iter().map(|s| s.1.len()).min().unwrap();
            if n > min {
                return Err(Error::Arity(format!("n = {n} exceeds the smallest pool ({min})")));
            }
        }
        Ok(())
    }

    /// Assumes `check` passed. `perm` and `drawn` are scratch buffers.
    fn trial(
        &self,
        n: usize,
        k: usize,
        rng: &mut SeededRng,
        sampling: Sampling,
        perm: &mut Vec<u32>,
        drawn: &mut Vec<u32>,
    ) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new();
        for (label, ranked) in &self.samples {
            let pool = ranked.len();
            drawn.clear();
            match sampling {
                Sampling::WithoutReplacement => {
                    perm.clear();
                    perm.extend(0..pool as u32);
                    for i in 0..n {
                        let j = i + rng.next_below((pool - i) as u64) as usize;
                        perm.swap(i, j);
                    }
                    drawn.extend_from_slice(&perm[..n]);
                }
                Sampling::WithReplacement => {
                    drawn.extend((0..n).map(|_| rng.next_below(pool as u64) as u32));
                }
            }
            if k < n {
                drawn.select_nth_unstable(k - 1);
            }
            let score = drawn[..k].iter().map(|&r| ranked[r as usize]).max().unwrap();
            cm.add(*label, score);
        }
        cm
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl TrialOutcome {
    fn from_confusion(confusion: ConfusionMatrix) -> Self {
        Self {
            accuracy: confusion.trace() as f64 / confusion.total() as f64,
            confusion,
        }
    }
}

/// One trial over every sample in the pool.
pub fn run_trial(pool: &PredictionPool, n: usize, k: usize, rng: &mut SeededRng, sampling: Sampling) -> Result<TrialOutcome> {
    let ranked = RankedPool::new(pool);
    ranked.check(n, k, sampling)?;
    let cm = ranked.trial(n, k, rng, sampling, &mut Vec::new(), &mut Vec::new());
    Ok(TrialOutcome::from_confusion(cm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub n: usize,
    /// Requested k; the cell runs with `k_effective = min(k, n)`.
    pub k: usize,
    pub k_effective: usize,
    pub trials: usize,
    pub accuracy_min: f64,
    pub accuracy_median: f64,
    pub accuracy_max: f64,
    pub trial_at_min: usize,
    pub trial_at_median: usize,
    pub trial_at_max: usize,
    pub confusion_at_min: ConfusionMatrix,
    pub confusion_at_median: ConfusionMatrix,
    pub confusion_at_max: ConfusionMatrix,
    /// `(correct samples, trials)` pairs in ascending order of correct count.
    pub correct_count_histogram: Vec<(u64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub sampling: Sampling,
}

/// k values 1..=20 followed by 30, 50 and 100.
pub fn k_sweep_grid() -> Vec<usize> {
    (1..=20).chain([30, 50, 100]).collect()
}

/// Parses `a:b` (inclusive range), `a:b:step`, or a comma list of those.
pub fn parse_grid(spec: &str) -> Result<Vec<usize>> {
    if spec.trim() == "paper" {
        return Ok(k_sweep_grid());
    }
    let bad = || Error::Config(format!("bad grid spec {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',') {
        let nums: Vec<usize> = part
            .split(':')
            .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match nums[..] {
            [v] => out.push(v),
            [a, b] if a <= b => out.extend(a..=b),
            [a, b, step] if a <= b && step > 0 => out.extend((a..=b).step_by(step)),
            _ => return Err(bad()),
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

/// Every `(n, k)` cell in n-major order. Trials run in parallel; results do
/// not depend on the thread count.
pub fn sweep(pool: &PredictionPool, cfg: &SweepConfig) -> Result<Vec<SweepStats>> {
    if cfg.n_grid.is_empty() || cfg.k_grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let ranked = RankedPool::new(pool);
    let mut out = Vec::with_capacity(cfg.n_grid.len() * cfg.k_grid.len());
    for &n in &cfg.n_grid {
        for &k in &cfg.k_grid {
            let k_eff = k.min(n);
            ranked.check(n, k_eff, cfg.sampling)?;
            let cms: Vec<ConfusionMatrix> = (0..cfg.trials)
                .into_par_iter()
                .map_init(
                    || (Vec::with_capacity(ranked.max_pool()), Vec::with_capacity(n)),
                    |(perm, drawn), t| {
                        let mut rng = SeededRng::new(derive_seed(cfg.seed, &[n as u64, k as u64, t as u64]));
                        ranked.trial(n, k_eff, &mut rng, cfg.sampling, perm, drawn)
                    },
                )
                .collect();
            out.push(summarize(n, k, k_eff, &cms));
        }
    }
    Ok(out)
}

fn summarize(n: usize, k: usize, k_effective: usize, cms: &[ConfusionMatrix]) -> SweepStats {
    let mut order: Vec<usize> = (0..cms.len()).collect();
    order.sort_by_key(|&t| (cms[t].trace(), t));
    let pick = |i: usize| order[i];
    let (lo, mid, hi) = (pick(0), pick((cms.len() - 1) / 2), pick(cms.len() - 1));
    let acc = |t: usize| TrialOutcome::from_confusion(cms[t]).accuracy;
    let mut hist: Vec<(u64, usize)> = Vec::new();
    for &t in &order {
        let c = cms[t].trace();
        match hist.last_mut() {
            Some((v, count)) if *v == c => *count += 1,
            _ => hist.push((c, 1)),
        }
    }
    SweepStats {
        n,
        k,
        k_effective,
        trials: cms.len(),
        accuracy_min: acc(lo),
        accuracy_median: acc(mid),
        accuracy_max: acc(hi),
        trial_at_min: lo,
        trial_at_median: mid,
        trial_at_max: hi,
        confusion_at_min: cms[lo],
        confusion_at_median: cms[mid],
        confusion_at_max: cms[hi],
        correct_count_histogram: hist,
    }
}

/// `n,k,trials,acc_min,acc_median,acc_max` with six decimals.
pub fn write_sweep_csv(stats: &[SweepStats], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "n,k,trials,acc_min,acc_median,acc_max")?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6}",
            s.n, s.k, s.trials, s.accuracy_min, s.accuracy_median, s.accuracy_max
        )?;
    }
    w.flush()
}

pub fn write_sweep_json(stats: &[SweepStats], mut w: impl Write) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut w, stats).map_err(std::io::Error::other)?;
    writeln!(w)?;
    w.flush()
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    sample_id: String,
    score: Her2Score,
}

/// Reads `sample_id,score`; duplicate ids are a parse error.
pub fn read_labels_csv(reader: impl Read, path: impl AsRef<Path>) -> Result<BTreeMap<String, Her2Score>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: LabelRow = rec.deserialize(Some(&headers)).map_err(|e| Error::parse(path, line, e.to_string()))?;
        if let Some(first) = seen.insert(row.sample_id.clone(), line) {
            return Err(Error::parse(
                path,
                line,
                format!("duplicate label for {:?} (first on line {first})", row.sample_id),
            ));
        }
        out.insert(row.sample_id, row.score);
    }
    Ok(out)
}

pub fn load_labels_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, Her2Score>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels_csv(file, path)
}

pub fn write_labels_csv<'a>(labels: impl IntoIterator<Item = (&'a String, &'a Her2Score)>, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for (id, &score) in labels {
        wtr.serialize(LabelRow {
            sample_id: id.clone(),
            score,
        })
        .map_err(|e| Error::csv("<labels>", e))?;
    }
    wtr.flush().map_err(|e| Error::io("<labels>", e))
}
