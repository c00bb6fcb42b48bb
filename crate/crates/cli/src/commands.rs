use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use rayon::prelude::*;

use concnn::classes::class_name;
use concnn::dataset::{
    generate_synthetic, ingest_manifest, load_corpus, write_manifest, ImagePair, SectionPatches, SectionRecord,
    SynthConfig,
};
use concnn::ensemble::{predict_section, prediction_report, Ensemble, SectionPrediction};
use concnn::evaluation::{run_crossval, train_ensemble, write_report, CrossvalConfig};
use concnn::model::{read_model, write_model};
use concnn::patching::{aligned_triples, slice_grid, PatchGrid};
use concnn::preprocess::{preprocess_pair, Role};
use concnn::raster_io::{read_raster, write_raster};

use crate::config::RunConfig;
use crate::{SectionFailures, ValidationError};

pub const CONFIG_FILE: &str = "config.txt";

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.require_out()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.render())
        .with_context(|| format!("writing {}", out.join(CONFIG_FILE).display()))?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_records(cfg: &RunConfig) -> Result<Vec<SectionRecord>> {
    let manifest = cfg.require_manifest()?;
    let records = ingest_manifest(manifest)?;
    if records.is_empty() {
        return Err(ValidationError(format!("{}: manifest lists no sections", manifest.display())).into());
    }
    Ok(records)
}

fn image_stem(record: &SectionRecord, image: &ImagePair) -> String {
    format!("{}_{}", record.section_id, image.angle)
}

fn preprocess_section(record: &SectionRecord, out: &Path) -> concnn::Result<SectionRecord> {
    let mut processed = record.clone();
    for (src, dst) in record.images.iter().zip(processed.images.iter_mut()) {
        let pair = preprocess_pair(&read_raster(&src.ppl)?, &read_raster(&src.xpl)?)?;
        let stem = image_stem(record, src);
        for role in Role::BRANCHES {
            let path = out.join(format!("{stem}_{}.ppm", role.name()));
            write_raster(&path, pair.get(role))?;
            match role {
                Role::Ppl => dst.ppl = path,
                Role::Xpl => dst.xpl = path,
                _ => {}
            }
        }
    }
    Ok(processed)
}

/// Equalizes, fuses and writes PPL, XPL and CI rasters for every image, plus a
/// manifest listing the processed PPL/XPL files. CI rasters sit beside them.
pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let records = read_records(cfg)?;
    let out = prepare_out(cfg)?;
    let results: Vec<_> = records.par_iter().map(|r| preprocess_section(r, out)).collect();
    let mut done = Vec::new();
    let mut failures = SectionFailures::default();
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(r) => done.push(r),
            Err(e) => {
                eprintln!("error: section {}: {e}", record.section_id);
                failures.record(&e);
            }
        }
    }
    write_manifest(&out.join("manifest.txt"), &done)?;
    info!("preprocessed {} of {} sections", done.len(), records.len());
    if failures.count > 0 {
        return Err(failures.into());
    }
    Ok(())
}

/// Model files of the PPL, XPL and CI branches.
pub const MODEL_FILES: [&str; 3] = ["ppl.ccnn", "xpl.ccnn", "ci.ccnn"];

/// Trains the three branches on every patch of the corpus.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let records = read_records(cfg)?;
    cfg.branch.validate()?;
    cfg.train.validate()?;
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(&records, cfg.branch.patch_size)?;
    let triples: Vec<_> = corpus.iter().map(|s| (s.triples(), s.class())).collect();
    let samples: Vec<_> = triples
        .iter()
        .flat_map(|(images, class)| images.iter().flatten().map(move |t| (*t, *class)))
        .collect();
    info!(
        "training on {} patch positions from {} sections",
        samples.len(),
        corpus.len()
    );
    let (ensemble, losses) = train_ensemble(&samples, &cfg.branch, &cfg.train, cfg.seed, 0)?;
    let [p, x, c] = ensemble.into_branches();
    for (model, file) in [p, x, c].iter().zip(MODEL_FILES) {
        write_model(&out.join(file), model)?;
    }
    let mut log = String::from("iteration,ppl_loss,xpl_loss,ci_loss\n");
    for (i, ((p, x), c)) in losses[0].iter().zip(&losses[1]).zip(&losses[2]).enumerate() {
        let _ = writeln!(log, "{},{p},{x},{c}", i + 1);
    }
    write_text(&out.join("training_log.csv"), &log)
}

fn load_ensemble(dir: &Path) -> Result<Ensemble> {
    let [p, x, c] = MODEL_FILES.map(|file| read_model(&dir.join(file)));
    Ok(Ensemble::new(p?, x?, c?)?)
}

/// One unlabeled section given directly as a PPL/XPL pair.
pub struct PairInput {
    pub section_id: String,
    pub ppl: PathBuf,
    pub xpl: PathBuf,
}

fn pair_grids(pair: &PairInput, patch_size: usize) -> concnn::Result<Vec<[PatchGrid<f32>; 3]>> {
    let processed = preprocess_pair(&read_raster(&pair.ppl)?, &read_raster(&pair.xpl)?)?;
    let [p, x, c] = Role::BRANCHES.map(|role| slice_grid(processed.get(role), &pair.section_id, patch_size));
    Ok(vec![[p?, x?, c?]])
}

fn classify_grids(
    ensemble: &Ensemble,
    cfg: &RunConfig,
    id: &str,
    grids: &[[PatchGrid<f32>; 3]],
) -> concnn::Result<SectionPrediction> {
    let triples = grids
        .iter()
        .map(|[p, x, c]| aligned_triples(p, x, c))
        .collect::<concnn::Result<Vec<_>>>()?;
    predict_section(ensemble, id, &triples, &cfg.weights, cfg.vote)
}

/// Full inference over a manifest or a single pair. Writes the per-position
/// report and one verdict line per section.
pub fn classify(cfg: &RunConfig, pair: Option<PairInput>) -> Result<()> {
    let models = cfg
        .models
        .as_deref()
        .ok_or_else(|| ValidationError("--models is required".into()))?;
    let ensemble = load_ensemble(models)?;
    let mut cfg = cfg.clone();
    cfg.branch = ensemble.get(Role::Ppl).config().clone();
    let cfg = &cfg;
    let patch = ensemble.patch_size();
    let mut results: Vec<(SectionPrediction, Option<usize>)> = Vec::new();
    if let Some(pair) = pair {
        if cfg.manifest.is_some() {
            return Err(ValidationError("give either --manifest or --ppl/--xpl, not both".into()).into());
        }
        let out = prepare_out(cfg)?;
        let grids = pair_grids(&pair, patch)?;
        results.push((classify_grids(&ensemble, cfg, &pair.section_id, &grids)?, None));
        return write_classification(out, &results);
    }
    let records = read_records(cfg)?;
    let out = prepare_out(cfg)?;
    for record in &records {
        let section = SectionPatches::load(record, patch)?;
        let prediction = classify_grids(&ensemble, cfg, &record.section_id, &section.images)?;
        results.push((prediction, Some(record.class())));
    }
    write_classification(out, &results)
}

fn write_classification(out: &Path, results: &[(SectionPrediction, Option<usize>)]) -> Result<()> {
    let predictions: Vec<SectionPrediction> = results.iter().map(|(p, _)| p.clone()).collect();
    write_text(&out.join("predictions.csv"), &prediction_report(&predictions))?;
    let mut verdicts = String::from("section_id,true_class,verdict,agreement\n");
    for (p, truth) in results {
        let agree = p.pre_revision_classes.iter().filter(|&&c| c == p.revised_class).count() as f64
            / p.pre_revision_classes.len() as f64;
        let truth = truth.map(class_name).unwrap_or_default();
        let verdict = class_name(p.revised_class);
        let _ = writeln!(verdicts, "{},{truth},{verdict},{agree:.6}", p.section_id);
        println!("{}: {verdict}", p.section_id);
    }
    write_text(&out.join("verdicts.csv"), &verdicts)
}

/// k-fold cross-validation; writes metrics, confusion matrices, ROC data and predictions.
pub fn crossval(cfg: &RunConfig) -> Result<()> {
    let records = read_records(cfg)?;
    let xv = CrossvalConfig {
        folds: cfg.folds,
        seed: cfg.seed,
        split: cfg.split,
        branch: cfg.branch.clone(),
        train: cfg.train.clone(),
        weights: cfg.weights,
        vote: cfg.vote,
    };
    xv.branch.validate()?;
    xv.train.validate()?;
    let out = prepare_out(cfg)?;
    let corpus = load_corpus(&records, cfg.branch.patch_size)?;
    let report = run_crossval(&corpus, &xv)?;
    write_report(&report, out)?;
    println!(
        "section accuracy {:.4}, patch accuracy {:.4} -> {:.4}",
        report.average.section_accuracy, report.average.patch_pre_accuracy, report.average.patch_post_accuracy
    );
    Ok(())
}

/// Writes a synthetic corpus and its manifest.
pub fn synth(cfg: &RunConfig) -> Result<()> {
    let mut sc = SynthConfig::standard(cfg.synth_classes, cfg.synth_sections, cfg.synth_size, cfg.seed)?;
    sc.angles = cfg.synth_angles.clone();
    sc.validate()?;
    let out = prepare_out(cfg)?;
    let (records, files) = generate_synthetic(&sc, out)?;
    info!("wrote {} sections, {} images", records.len(), files.len());
    Ok(())
}
