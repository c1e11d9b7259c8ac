//! Class-weighted training of the micro-CNN.
//!
//! Seeds: the model is initialized from `derive_seed(seed, [INIT])`. In
//! epoch `e` the training order is shuffled with `derive_seed(seed,
//! [SHUFFLE, e])`, and training core `j` (manifest order) is augmented with
//! `derive_seed(seed, [AUGMENT, e, j])` and sampled with `derive_seed(seed,
//! [SAMPLE, e, j])`. Validation cores are never augmented and reuse the same
//! PSS every epoch, so validation losses are comparable across epochs.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{inverse_frequency_weights, ClassWeights};
use super::network::{Architecture, MicroCnn, MicroCnnModel, Real};
use super::optim::{AdamW, PlateauScheduler};
use crate::error::{Error, Result};
use crate::imaging::{load_image, Raster};
use crate::pss::{augment_core, PssConfig, PssSource, PyramidSamplingSet};
use crate::rng::{derive_seed, SeededRng};
use crate::score::{Her2Score, NUM_CLASSES};

const INIT: u64 = 0;
const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;
const SAMPLE: u64 = 3;
const VALIDATION: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-5,
            batch_size: 12,
            weight_decay: 0.01,
            plateau_patience: 5,
            lr_factor: 0.5,
            min_lr: 1e-7,
            max_epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor must be in (0, 1), got {}", self.lr_factor)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.min_lr.is_nan() || self.min_lr < 0.0 {
            return Err(Error::Config(format!("min_lr must be >= 0, got {}", self.min_lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Domain(format!("unknown split {other:?}"))),
        }
    }
}

/// One row of a `path,label,split` manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Her2Score,
    pub split: Split,
}

/// Reads a manifest CSV. Relative paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<ManifestEntry>() {
        let mut entry = row.map_err(|e| Error::csv(path, e))?;
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        out.push(entry);
    }
    Ok(out)
}

/// Writes a manifest with paths exactly as given.
pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A decoded core image with its label.
#[derive(Debug, Clone)]
pub struct LabeledCore {
    pub id: String,
    pub image: Raster,
    pub label: Her2Score,
}

impl LabeledCore {
    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        Ok(Self {
            id: entry.path.display().to_string(),
            image: load_image(&entry.path)?,
            label: entry.label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub fn write_training_log(log: &[EpochLog], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for e in log {
        writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr)?;
    }
    w.flush()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation loss, or the
    /// initial model when no epoch ran.
    pub model: MicroCnnModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub class_weights: ClassWeights,
}

/// One optimizer step on a batch; returns the loss before the step.
pub fn backward_and_step<T: Real>(
    model: &mut MicroCnn<T>,
    batch: &[&PyramidSamplingSet],
    labels: &[Her2Score],
    weights: &ClassWeights,
    optimizer: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let stacked: Vec<(Vec<u8>, usize)> = batch.iter().map(|p| (p.stacked(), p.patch_size())).collect();
    let inputs: Vec<(&[u8], usize)> = stacked.iter().map(|(v, s)| (v.as_slice(), *s)).collect();
    let labels: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let (loss, grad) = model.loss_and_grad(&inputs, &labels, weights)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!("loss {loss}")));
    }
    optimizer.step(model.params_mut(), &grad, lr);
    Ok(loss)
}

/// Weighted cross-entropy of `model` over a set of PSSs, no update.
pub fn evaluate_loss<T: Real>(
    model: &MicroCnn<T>,
    batch: &[PyramidSamplingSet],
    labels: &[Her2Score],
    weights: &ClassWeights,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.len() != labels.len() {
        return Err(Error::Arity(format!("{} PSSs for {} labels", batch.len(), labels.len())));
    }
    let mut total = 0.0;
    for (pss, label) in batch.iter().zip(labels) {
        let p = model.forward(pss)?[label.index()].to_f64().unwrap();
        total -= weights.get(*label) * p.max(super::loss::PROB_FLOOR).ln();
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("validation loss {loss}")));
    }
    Ok(loss)
}

fn class_counts(cores: &[LabeledCore]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for c in cores {
        counts[c.label.index()] += 1;
    }
    counts
}

fn sample_training_pss(core: &LabeledCore, j: usize, epoch: usize, pss_cfg: &PssConfig, seed: u64) -> Result<PyramidSamplingSet> {
    let mut rng = SeededRng::new(derive_seed(seed, &[AUGMENT, epoch as u64, j as u64]));
    let (aug, _) = augment_core(&core.image, &mut rng)?;
    PssSource::new(&aug, *pss_cfg)?.sample(derive_seed(seed, &[SAMPLE, epoch as u64, j as u64]))
}

/// Trains a reference micro-CNN with inverse-frequency class weights.
pub fn train(train_set: &[LabeledCore], val_set: &[LabeledCore], pss_cfg: &PssConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(train_set, val_set, pss_cfg, cfg, |_| {})
}

/// As [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    train_set: &[LabeledCore],
    val_set: &[LabeledCore],
    pss_cfg: &PssConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    pss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let weights = inverse_frequency_weights(class_counts(train_set))?;
    let arch = Architecture::reference(pss_cfg.stacked_channels());
    let mut model = MicroCnnModel::new(arch, derive_seed(cfg.seed, &[INIT]))?;
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut log = Vec::new();
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            log,
            best_epoch,
            class_weights: weights,
        });
    }

    let val_pss: Vec<PyramidSamplingSet> = val_set
        .par_iter()
        .enumerate()
        .map(|(j, c)| PssSource::new(&c.image, *pss_cfg)?.sample(derive_seed(cfg.seed, &[VALIDATION, j as u64])))
        .collect::<Result<_>>()?;
    let val_labels: Vec<Her2Score> = val_set.iter().map(|c| c.label).collect();

    let mut optimizer = AdamW::new(model.params().len(), cfg.weight_decay);
    let mut scheduler = PlateauScheduler::new(cfg.initial_lr, cfg.lr_factor, cfg.plateau_patience, cfg.min_lr);
    for epoch in 0..cfg.max_epochs {
        let lr = scheduler.lr();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        SeededRng::new(derive_seed(cfg.seed, &[SHUFFLE, epoch as u64])).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PyramidSamplingSet> = chunk
                .par_iter()
                .map(|&j| sample_training_pss(&train_set[j], j, epoch, pss_cfg, cfg.seed))
                .collect::<Result<_>>()?;
            let refs: Vec<&PyramidSamplingSet> = batch.iter().collect();
            let labels: Vec<Her2Score> = chunk.iter().map(|&j| train_set[j].label).collect();
            let loss = backward_and_step(&mut model, &refs, &labels, &weights, &mut optimizer, lr)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = evaluate_loss(&model, &val_pss, &val_labels, &weights)?;
        if scheduler.observe(val_loss) {
            best = model.clone();
            best_epoch = Some(epoch);
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        class_weights: weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_synthetic_core, SyntheticCoreSpec};

    fn tiny_cfg() -> PssConfig {
        PssConfig {
            patch_size: 16,
            n_full: 2,
            n_half: 1,
            include_whole: true,
        }
    }

    fn cores(n: usize, seed: u64) -> Vec<LabeledCore> {
        (0..n)
            .map(|i| {
                let label = Her2Score::ALL[i % 4];
                let spec = SyntheticCoreSpec::for_class(label, 64, seed + i as u64);
                LabeledCore {
                    id: format!("c{i}"),
                    image: generate_synthetic_core(&spec).unwrap(),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let out = train(&cores(4, 0), &cores(4, 9), &tiny_cfg(), &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.best_epoch, None);
        let init = MicroCnnModel::new(Architecture::reference(12), derive_seed(0, &[INIT])).unwrap();
        assert_eq!(out.model.params(), init.params());
    }

    #[test]
    fn empty_split_is_config_error() {
        let cfg = TrainConfig::default();
        assert!(matches!(train(&[], &cores(4, 0), &tiny_cfg(), &cfg), Err(Error::Config(_))));
        assert!(matches!(train(&cores(4, 0), &[], &tiny_cfg(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lr_without_decay_leaves_params() {
        let core = &cores(1, 3)[0];
        let pss = PssSource::new(&core.image, tiny_cfg()).unwrap().sample(5).unwrap();
        let mut model = MicroCnn::<f64>::new(Architecture::reference(12), 1).unwrap();
        let before = model.params().to_vec();
        let mut opt = AdamW::new(before.len(), 0.0);
        let w = ClassWeights::uniform();
        let loss = backward_and_step(&mut model, &[&pss], &[core.label], &w, &mut opt, 0.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(model.params(), &before[..]);
        assert!(backward_and_step(&mut model, &[], &[], &w, &mut opt, 0.0).is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs_epochs() {
        let cfg = TrainConfig {
            initial_lr: 1e-3,
            batch_size: 3,
            max_epochs: 2,
            seed: 42,
            ..Default::default()
        };
        let (tr, va) = (cores(8, 0), cores(4, 100));
        let a = train(&tr, &va, &tiny_cfg(), &cfg).unwrap();
        let b = train(&tr, &va, &tiny_cfg(), &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.log.len(), 2);
        assert!(a.best_epoch.is_some());
        let mut csv = Vec::new();
        write_training_log(&a.log, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,lr\n0,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn manifest_round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry { path: "a.png".into(), label: Her2Score::Two, split: Split::Train },
            ManifestEntry { path: "/abs/b.png".into(), label: Her2Score::Zero, split: Split::Val },
        ];
        let path = dir.path().join("manifest.csv");
        write_manifest(&entries, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "path,label,split\na.png,2+,train\n/abs/b.png,0,val\n");
        let back = load_manifest(&path).unwrap();
        assert_eq!(back[0].path, dir.path().join("a.png"));
        assert_eq!(back[1].path, PathBuf::from("/abs/b.png"));
        std::fs::write(&path, "path,label,split\na.png,5+,train\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 2, .. })));
    }
}
