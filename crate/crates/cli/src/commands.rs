use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use pss_core::classifier::{
    load_external_predictions, load_manifest, load_model, save_model, train_with_progress, write_manifest,
    write_predictions_jsonl, write_training_log, LabeledCore, ManifestEntry, Split,
};
use pss_core::consensus::{load_votes_csv, resolve_batch, write_results_csv};
use pss_core::core_extraction::{crop_core, detect_cores, write_detections_jsonl, HoughParams};
use pss_core::imaging::{generate_synthetic_core, generate_synthetic_wsi, load_image, save_image, SyntheticCoreSpec};
use pss_core::inference::{score_core, score_external, ConfidenceRule, CoreReport};
use pss_core::montecarlo::{load_labels_csv, parse_grid, sweep, write_sweep_csv, write_sweep_json, PredictionPool, Sampling, SweepConfig};
use pss_core::pss::{batch_seed, build_pss, PssConfig};
use pss_core::report::{evaluate, kcs_histogram_report, HistogramEntry, OffPair};
use pss_core::rng::{derive_seed, SeededRng};
use pss_core::Her2Score;
use rayon::prelude::*;

use crate::config::{apply, given, Loaded};
use crate::error::CliError;
use crate::{
    Command, Confidence, ConsensusArgs, EvaluateArgs, ExtractArgs, MonteCarloArgs, OffPairArg, PssArgs, SamplePssArgs,
    SamplingArg, ScoreArgs, SynthArgs, SynthWsiArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cmd: &Command, m: &ArgMatches, loaded: Loaded) -> Result<()> {
    match cmd {
        Command::ExtractCores(a) => extract_cores(a, m, loaded),
        Command::SamplePss(a) => sample_pss(a, m, loaded),
        Command::Synth(a) => synth(a),
        Command::SynthWsi(a) => synth_wsi(a),
        Command::Train(a) => train(a, m, loaded),
        Command::Score(a) => score(a, m, loaded),
        Command::Montecarlo(a) => montecarlo(a, m, loaded),
        Command::Consensus(a) => consensus(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

impl From<Confidence> for ConfidenceRule {
    fn from(c: Confidence) -> Self {
        match c {
            Confidence::Top1 => ConfidenceRule::Top1,
            Confidence::Margin => ConfidenceRule::Margin,
        }
    }
}

fn merge_pss(cfg: &mut PssConfig, a: &PssArgs, m: &ArgMatches) {
    apply(m, "patch_size", &mut cfg.patch_size, a.patch_size);
    apply(m, "n_full", &mut cfg.n_full, a.n_full);
    apply(m, "n_half", &mut cfg.n_half, a.n_half);
    apply(m, "include_whole", &mut cfg.include_whole, a.include_whole);
}

fn pss_given(m: &ArgMatches) -> bool {
    ["patch_size", "n_full", "n_half", "include_whole"].iter().any(|id| given(m, id))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "core".into())
}

fn extract_cores(a: &ExtractArgs, m: &ArgMatches, loaded: Loaded) -> Result<()> {
    let mut params = match (loaded.cfg.hough, a.r_min, a.r_max) {
        (Some(h), _, _) => h,
        (None, Some(lo), Some(hi)) => HoughParams::for_radius_range_at(lo, hi, a.downsample),
        (None, _, _) => return Err(CliError::Config("--r-min and --r-max are required without a hough config".into())),
    };
    if let Some(v) = a.r_min {
        params.r_min = v;
    }
    if let Some(v) = a.r_max {
        params.r_max = v;
    }
    apply(m, "downsample", &mut params.working_downsample, a.downsample);
    params.validate()?;
    if !(a.margin >= 0.0 && a.margin.is_finite()) {
        return Err(CliError::Config(format!("margin must be >= 0, got {}", a.margin)));
    }

    let slide = load_image(&a.wsi)?;
    let dets = detect_cores(&slide, &params)?;
    create_dir(&a.out)?;
    let name = stem(&a.wsi);
    dets.par_iter().enumerate().try_for_each(|(i, d)| -> Result<()> {
        let crop = crop_core(&slide, d, a.margin)?;
        save_image(&crop, a.out.join(format!("{name}_core{i:03}.png")))?;
        Ok(())
    })?;
    let path = a.out.join("detections.jsonl");
    let mut w = create(&path)?;
    write_detections_jsonl(&dets, &mut w).map_err(|e| CliError::io(&path, e))?;
    finish(w, &path)?;
    println!("{} cores detected in {}", dets.len(), a.wsi.display());
    Ok(())
}

fn sample_pss(a: &SamplePssArgs, m: &ArgMatches, loaded: Loaded) -> Result<()> {
    let mut cfg = loaded.cfg;
    merge_pss(&mut cfg.pss, &a.pss, m);
    apply(m, "seed", &mut cfg.seed, a.seed);
    cfg.pss.validate()?;
    let core = load_image(&a.core)?;
    let pss = build_pss(&core, &cfg.pss, batch_seed(cfg.seed, a.index))?;
    pss.export(&a.out)?;
    println!("{} patches written to {}", pss.patches.len(), a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let fractions_ok = |f: f64| (0.0..=1.0).contains(&f);
    if !fractions_ok(a.val_fraction) || !fractions_ok(a.test_fraction) || a.val_fraction + a.test_fraction > 1.0 {
        return Err(CliError::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
    }
    if a.diameter < 64 {
        return Err(CliError::Config(format!("diameter {} < 64", a.diameter)));
    }
    create_dir(&a.out)?;
    let n_val = (a.per_class as f64 * a.val_fraction).round() as usize;
    let n_test = ((a.per_class as f64 * a.test_fraction).round() as usize).min(a.per_class - n_val.min(a.per_class));
    let n_train = a.per_class.saturating_sub(n_val + n_test);
    let jobs: Vec<(Her2Score, usize)> = Her2Score::ALL[..a.classes as usize]
        .iter()
        .flat_map(|&c| (0..a.per_class).map(move |i| (c, i)))
        .collect();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(class, i)| -> Result<ManifestEntry> {
            let mut rng = SeededRng::new(derive_seed(a.seed, &[class.index() as u64, i as u64]));
            let spec = SyntheticCoreSpec::jittered(class, a.diameter, &mut rng);
            let file = format!("class{}_{i:04}.png", class.index());
            save_image(&generate_synthetic_core(&spec)?, a.out.join(&file))?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            Ok(ManifestEntry {
                path: PathBuf::from(file),
                label: class,
                split,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&entries, a.out.join("manifest.csv"))?;
    println!(
        "{} cores written to {} ({n_train} train, {n_val} val, {n_test} test per class)",
        entries.len(),
        a.out.display()
    );
    Ok(())
}

fn synth_wsi(a: &SynthWsiArgs) -> Result<()> {
    let (slide, truth) = generate_synthetic_wsi(a.cores, a.radius, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&slide, &a.out)?;
    let truth_path = a
        .truth
        .clone()
        .unwrap_or_else(|| a.out.with_file_name(format!("{}_truth.json", stem(&a.out))));
    let mut w = create(&truth_path)?;
    let text = serde_json::to_string(&truth).expect("plain struct");
    writeln!(w, "{text}").map_err(|e| CliError::io(&truth_path, e))?;
    finish(w, &truth_path)?;
    println!("{}x{} slide with {} cores", slide.width(), slide.height(), truth.len());
    Ok(())
}

fn train(a: &TrainArgs, m: &ArgMatches, loaded: Loaded) -> Result<()> {
    let mut cfg = loaded.cfg;
    let t = &mut cfg.training;
    apply(m, "initial_lr", &mut t.initial_lr, a.initial_lr);
    apply(m, "batch_size", &mut t.batch_size, a.batch_size);
    apply(m, "weight_decay", &mut t.weight_decay, a.weight_decay);
    apply(m, "plateau_patience", &mut t.plateau_patience, a.plateau_patience);
    apply(m, "lr_factor", &mut t.lr_factor, a.lr_factor);
    apply(m, "min_lr", &mut t.min_lr, a.min_lr);
    apply(m, "max_epochs", &mut t.max_epochs, a.max_epochs);
    apply(m, "seed", &mut t.seed, a.seed);
    merge_pss(&mut cfg.pss, &a.pss, m);
    cfg.validate()?;

    let manifest = load_manifest(&a.manifest)?;
    let load = |split: Split| -> Result<Vec<LabeledCore>> {
        let rows: Vec<&ManifestEntry> = manifest.iter().filter(|e| e.split == split).collect();
        Ok(rows.par_iter().map(|e| LabeledCore::load(e)).collect::<pss_core::Result<_>>()?)
    };
    let (tr, va) = (load(Split::Train)?, load(Split::Val)?);
    let outcome = train_with_progress(&tr, &va, &cfg.pss, &cfg.training, |e| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.3e}",
            e.epoch, e.train_loss, e.val_loss, e.lr
        );
    })?;
    save_model(&outcome.model, Some(&cfg.pss), &a.out)?;
    if let Some(path) = &a.log {
        let mut w = create(path)?;
        write_training_log(&outcome.log, &mut w).map_err(|e| CliError::io(path, e))?;
        finish(w, path)?;
    }
    match outcome.best_epoch {
        Some(e) => println!("model written to {} (best epoch {e})", a.out.display()),
        None => println!("model written to {} (no epochs run)", a.out.display()),
    }
    Ok(())
}

fn score(a: &ScoreArgs, m: &ArgMatches, loaded: Loaded) -> Result<()> {
    let has_file_pss = loaded.has_pss;
    let mut cfg = loaded.cfg;
    let inf = &mut cfg.inference;
    apply(m, "n", &mut inf.n, a.n);
    apply(m, "k", &mut inf.k, a.k);
    apply(m, "confidence", &mut inf.confidence_rule, a.confidence.into());
    apply(m, "seed", &mut cfg.seed, a.seed);

    let mut lines = Vec::new();
    if let Some(core_path) = &a.core {
        let model_path = a.model.as_ref().expect("clap enforces --model with --core");
        let (model, stored) = load_model(model_path)?;
        // The model's own PSS layout applies unless the user chose one.
        if let (Some(s), false, false) = (stored, has_file_pss, pss_given(m)) {
            cfg.pss = s;
        }
        merge_pss(&mut cfg.pss, &a.pss, m);
        cfg.validate()?;
        let core = load_image(core_path)?;
        let id = a.sample_id.clone().unwrap_or_else(|| stem(core_path));
        let scored = score_core(&core, &model, &cfg.pss, &cfg.inference, cfg.seed, &id)?;
        lines.push(scored.report.to_json_line());
        if let Some(path) = &a.predictions {
            let mut w = create(path)?;
            write_predictions_jsonl(&scored.predictions, &mut w).map_err(|e| CliError::io(path, e))?;
            finish(w, path)?;
        }
    } else {
        cfg.validate()?;
        let path = a.preds.as_ref().expect("clap enforces one source");
        let samples = load_external_predictions(path, cfg.inference.confidence_rule)?;
        let chosen: Vec<(&String, &Vec<_>)> = match &a.sample_id {
            Some(id) => {
                let preds = samples
                    .get(id)
                    .ok_or_else(|| CliError::Config(format!("sample {id:?} not in {}", path.display())))?;
                vec![(id, preds)]
            }
            None => samples.iter().collect(),
        };
        for (id, preds) in chosen {
            let (report, _) = score_external(id, preds, &cfg.inference)?;
            lines.push(report.to_json_line());
        }
    }
    let mut w = create(&a.report)?;
    for l in &lines {
        writeln!(w, "{l}").map_err(|e| CliError::io(&a.report, e))?;
    }
    finish(w, &a.report)?;
    println!("{} report line(s) written to {}", lines.len(), a.report.display());
    Ok(())
}

fn montecarlo(a: &MonteCarloArgs, m: &ArgMatches, loaded: Loaded) -> Result<()> {
    let mut seed = loaded.cfg.seed;
    apply(m, "seed", &mut seed, a.seed);
    let mut rule = loaded.cfg.inference.confidence_rule;
    apply(m, "confidence", &mut rule, a.confidence.into());
    if a.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let cfg = SweepConfig {
        n_grid: parse_grid(&a.n_grid)?,
        k_grid: parse_grid(&a.k_grid)?,
        trials: a.trials,
        seed,
        sampling: match a.sampling {
            SamplingArg::WithoutReplacement => Sampling::WithoutReplacement,
            SamplingArg::WithReplacement => Sampling::WithReplacement,
        },
    };
    let pool = PredictionPool::load(&a.preds, &a.labels, rule)?;
    let stats = sweep(&pool, &cfg)?;
    let mut w = create(&a.out)?;
    write_sweep_csv(&stats, &mut w).map_err(|e| CliError::io(&a.out, e))?;
    finish(w, &a.out)?;
    if let Some(path) = &a.json {
        let mut w = create(path)?;
        write_sweep_json(&stats, &mut w).map_err(|e| CliError::io(path, e))?;
        finish(w, path)?;
    }
    println!("{} cells over {} samples written to {}", stats.len(), pool.len(), a.out.display());
    Ok(())
}

fn consensus(a: &ConsensusArgs) -> Result<()> {
    let records = load_votes_csv(&a.votes)?;
    let (results, summary) = resolve_batch(&records)?;
    let mut w = create(&a.out)?;
    write_results_csv(&results, &mut w)?;
    finish(w, &a.out)?;
    let text = serde_json::to_string_pretty(&summary).expect("plain struct");
    match &a.summary {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{text}").map_err(|e| CliError::io(path, e))?;
            finish(w, path)?;
            println!("{} cores: {} labeled, {} excluded", summary.total, summary.labeled, summary.excluded());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<CoreReport>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(pss_core::Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
        })
        .collect()
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let reports = read_reports(&a.reports)?;
    let labels = load_labels_csv(&a.labels)?;
    let mut truth = Vec::with_capacity(reports.len());
    for r in &reports {
        let label = labels
            .get(&r.sample_id)
            .ok_or_else(|| CliError::Config(format!("sample {:?} has no label in {}", r.sample_id, a.labels.display())))?;
        truth.push(*label);
    }
    let predicted: Vec<Her2Score> = reports.iter().map(|r| r.final_score).collect();
    let off_pair = match a.off_pair {
        OffPairArg::CountAsWrong => OffPair::CountAsWrong,
        OffPairArg::Exclude => OffPair::Exclude,
    };
    let summary = evaluate(&truth, &predicted, off_pair)?;
    let mut w = create(&a.out)?;
    writeln!(w, "{}", serde_json::to_string_pretty(&summary).expect("plain struct")).map_err(|e| CliError::io(&a.out, e))?;
    finish(w, &a.out)?;

    if a.histograms.is_some() || a.histograms_csv.is_some() {
        let report = kcs_histogram_report(
            reports
                .iter()
                .zip(&truth)
                .map(|(r, l)| HistogramEntry::from_report(r, Some(*l))),
        );
        if let Some(path) = &a.histograms {
            let mut w = create(path)?;
            writeln!(w, "{}", report.to_json()).map_err(|e| CliError::io(path, e))?;
            finish(w, path)?;
        }
        if let Some(path) = &a.histograms_csv {
            let mut w = create(path)?;
            report.write_csv(&mut w).map_err(|e| CliError::io(path, e))?;
            finish(w, path)?;
        }
    }
    println!("accuracy {} over {} samples", summary.accuracy_display, summary.samples);
    Ok(())
}
