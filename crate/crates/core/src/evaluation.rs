//! Cross-validation and the metric suite: confusion matrices, overall
//! accuracy, Cohen's kappa and one-vs-rest ROC curves.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classes::{class_name, ClassDistribution};
use crate::dataset::{SectionPatches, SectionRecord};
use crate::ensemble::{predict_section, prediction_report, BranchWeights, Ensemble, SectionPrediction, VoteMode};
use crate::error::{Error, Result};
use crate::model::{build_branch, train_branch, BranchConfig, BranchModel, TrainConfig};
use crate::patching::AlignedTriple;
use crate::preprocess::Role;
use crate::tensor::Tensor;

/// Assignment of sections to validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Whether sections were dealt class by class.
    pub stratified: bool,
    assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, section_id: &str) -> Option<usize> {
        self.assignment.get(section_id).copied()
    }

    /// Section ids held out in `fold`, sorted.
    pub fn validation_sections(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Seeded shuffle and round-robin deal of sections into `k` folds. When every
/// rock type present has at least `k` sections, each class is shuffled and
/// dealt in turn so the folds are stratified.
pub fn make_folds(sections: &[SectionRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if sections.len() < k {
        return Err(Error::invalid(format!(
            "{} sections cannot fill {k} folds",
            sections.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = sections.iter().find(|s| !seen.insert(s.section_id.as_str())) {
        return Err(Error::invalid(format!("section {} listed twice", dup.section_id)));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for s in sections {
        by_class.entry(s.class()).or_default().push(&s.section_id);
    }
    let stratified = by_class.values().all(|v| v.len() >= k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<&str> = if stratified {
        by_class
            .into_values()
            .flat_map(|mut ids| {
                ids.shuffle(&mut rng);
                ids
            })
            .collect()
    } else {
        let mut ids: Vec<&str> = sections.iter().map(|s| s.section_id.as_str()).collect();
        ids.shuffle(&mut rng);
        ids
    };
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        stratified,
        assignment,
    })
}

/// Fold of every patch when patches rather than sections are split:
/// `result[s][p]` for patch `p` of section `s`.
pub fn make_patch_folds(patch_counts: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: usize = patch_counts.iter().sum();
    if k < 2 || total < k {
        return Err(Error::invalid(format!("{total} patches cannot fill {k} folds")));
    }
    let mut keys: Vec<(usize, usize)> = patch_counts
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..n).map(move |p| (s, p)))
        .collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: Vec<Vec<usize>> = patch_counts.iter().map(|&n| vec![0; n]).collect();
    for (i, (s, p)) in keys.into_iter().enumerate() {
        folds[s][p] = i % k;
    }
    Ok(folds)
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n || predicted >= self.n {
            return Err(Error::invalid(format!(
                "label pair ({truth}, {predicted}) out of range for {} classes",
                self.n
            )));
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.n..(truth + 1) * self.n].iter().sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|k| self.get(k, k)).sum()
    }

    /// Each row divided by its total; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|t| {
                let total = self.row_total(t);
                (0..self.n)
                    .map(|p| {
                        if total == 0 {
                            0.0
                        } else {
                            self.get(t, p) as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Comma-separated counts with class-name headers.
    pub fn render_counts(&self) -> String {
        self.render(|t, p| self.get(t, p).to_string())
    }

    /// Row-normalized rates to two decimals.
    pub fn render_normalized(&self) -> String {
        let rows = self.row_normalized();
        self.render(|t, p| format!("{:.2}", rows[t][p]))
    }

    fn render(&self, cell: impl Fn(usize, usize) -> String) -> String {
        let mut out = String::from("true\\predicted");
        for p in 0..self.n {
            let _ = write!(out, ",{}", class_name(p));
        }
        out.push('\n');
        for t in 0..self.n {
            out.push_str(&class_name(t));
            for p in 0..self.n {
                let _ = write!(out, ",{}", cell(t, p));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(num_classes: usize, pairs: &[(usize, usize)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for &(t, p) in pairs {
        cm.add(t, p)?;
    }
    Ok(cm)
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no counts".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1, so kappa is undefined and reported as 0.
    pub degenerate: bool,
}

pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<Kappa> {
    let p_o = overall_accuracy(cm)?;
    let total = cm.total() as f64;
    let p_e: f64 = (0..cm.n)
        .map(|k| cm.row_total(k) as f64 * cm.col_total(k) as f64)
        .sum::<f64>()
        / (total * total);
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(Kappa {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (p_o - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Items scoring at least this are called positive. The first point uses +∞.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub class: usize,
    /// Ordered by decreasing threshold, from (0, 0) to (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocReport {
    pub curves: Vec<RocCurve>,
    /// Classes with no positives or no negatives.
    pub omitted: Vec<usize>,
    /// Mean AUC over the drawn curves.
    pub macro_auc: Option<f64>,
}

/// ROC curve of one class's scores, with a point at every distinct score.
pub fn roc_curve(class: usize, scored: &[(f64, bool)]) -> Option<RocCurve> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp, mut auc) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Some(RocCurve { class, points, auc })
}

/// One-vs-rest ROC per class over fused distributions.
pub fn roc_auc(scores: &[(ClassDistribution, usize)]) -> Result<RocReport> {
    let Some(n) = scores.first().map(|s| s.0.len()) else {
        return Err(Error::Empty("no scores for ROC analysis".into()));
    };
    if let Some((d, t)) = scores.iter().find(|(d, t)| d.len() != n || *t >= n) {
        return Err(Error::invalid(format!(
            "score with {} classes and label {t} in a {n}-class ROC",
            d.len()
        )));
    }
    let mut curves = Vec::new();
    let mut omitted = Vec::new();
    for k in 0..n {
        let scored: Vec<(f64, bool)> = scores.iter().map(|(d, t)| (d.get(k), *t == k)).collect();
        match roc_curve(k, &scored) {
            Some(c) => curves.push(c),
            None => omitted.push(k),
        }
    }
    if !omitted.is_empty() {
        let names: Vec<String> = omitted.iter().map(|&k| class_name(k)).collect();
        log::warn!(
            "no ROC curve for classes lacking positives or negatives: {}",
            names.join(", ")
        );
    }
    let macro_auc = (!curves.is_empty()).then(|| curves.iter().map(|c| c.auc).sum::<f64>() / curves.len() as f64);
    Ok(RocReport {
        curves,
        omitted,
        macro_auc,
    })
}

/// How items are dealt into folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    /// Whole thin sections; no patch of a validation section is trained on.
    #[default]
    Section,
    /// Individual patches, regardless of section.
    Patch,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Section => "section",
            Split::Patch => "patch",
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
        match s.trim() {
            "section" => Ok(Split::Section),
            "patch" => Ok(Split::Patch),
            other => Err(Error::invalid(format!("split {other:?} is not section or patch"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalConfig {
    pub folds: usize,
    pub seed: u64,
    pub split: Split,
    pub branch: BranchConfig,
    /// Its seed is ignored; per-branch seeds derive from `seed`.
    pub train: TrainConfig,
    pub weights: BranchWeights,
    pub vote: VoteMode,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            split: Split::Section,
            branch: BranchConfig::default(),
            train: TrainConfig::default(),
            weights: BranchWeights::default(),
            vote: VoteMode::Concat108,
        }
    }
}

/// Initialization and shuffling seeds for one branch of one run.
pub fn branch_seeds(seed: u64, run: u64, role: Role) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run * 4 + role.tag() as u64);
    (rng.next_u64(), rng.next_u64())
}

/// Builds and trains the three branches on `(ppl, xpl, ci, class)` samples.
pub fn train_ensemble(
    samples: &[(AlignedTriple<'_, f32>, usize)],
    branch: &BranchConfig,
    train: &TrainConfig,
    seed: u64,
    run: u64,
) -> Result<(Ensemble<f32>, [Vec<f64>; 3])> {
    let trained = Role::BRANCHES
        .par_iter()
        .map(|&role| -> Result<(BranchModel<f32>, Vec<f64>)> {
            let (init, shuffle) = branch_seeds(seed, run, role);
            let mut model = build_branch::<f32>(branch, role, init)?;
            let data: Vec<(&Tensor<f32>, usize)> = samples.iter().map(|(t, c)| (t.get(role), *c)).collect();
            let cfg = TrainConfig {
                seed: shuffle,
                ..train.clone()
            };
            let log = train_branch(&mut model, &data, &cfg)?;
            Ok((model, log.iteration_loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = trained.into_iter();
    let (p, lp) = it.next().expect("three branches");
    let (x, lx) = it.next().expect("three branches");
    let (c, lc) = it.next().expect("three branches");
    Ok((Ensemble::new(p, x, c)?, [lp, lx, lc]))
}

/// Confusion matrix with its accuracy and kappa.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub kappa: Kappa,
}

impl MetricSet {
    pub fn from_matrix(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: overall_accuracy(&confusion)?,
            kappa: cohen_kappa(&confusion)?,
            confusion,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub validation_sections: Vec<String>,
    pub train_patches: usize,
    /// Mean loss over the last tenth of each branch's iterations (PPL, XPL, CI).
    pub final_loss: [f64; 3],
    /// Fused patch classes before revision.
    pub patch_pre: MetricSet,
    /// Every patch carries its section's revised class.
    pub patch_post: MetricSet,
    /// One item per validation section.
    pub section: MetricSet,
    pub roc: RocReport,
    pub predictions: Vec<SectionPrediction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Averages {
    pub patch_pre_accuracy: f64,
    pub patch_post_accuracy: f64,
    pub section_accuracy: f64,
    pub patch_pre_kappa: f64,
    pub patch_post_kappa: f64,
    pub section_kappa: f64,
    /// Mean of the folds' macro AUCs, over folds that have one.
    pub macro_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalReport {
    pub config: CrossvalConfig,
    pub folds: Vec<FoldResult>,
    pub average: Averages,
    /// Matrices summed over all folds.
    pub pooled_patch_pre: MetricSet,
    pub pooled_patch_post: MetricSet,
    pub pooled_section: MetricSet,
    /// ROC over every validation patch of every fold.
    pub pooled_roc: RocReport,
}

fn tail_mean(losses: &[f64]) -> f64 {
    let n = (losses.len() / 10).max(1).min(losses.len());
    if n == 0 {
        return f64::NAN;
    }
    losses[losses.len() - n..].iter().sum::<f64>() / n as f64
}

fn evaluate_fold(
    fold: usize,
    sections: &[SectionPatches],
    in_validation: &dyn Fn(usize, usize) -> bool,
    cfg: &CrossvalConfig,
) -> Result<FoldResult> {
    let n = cfg.branch.num_classes;
    let triples: Vec<Vec<Vec<AlignedTriple<'_, f32>>>> = sections.iter().map(SectionPatches::triples).collect();

    let mut train = Vec::new();
    for (s, images) in triples.iter().enumerate() {
        for (p, t) in images.iter().flatten().enumerate() {
            if !in_validation(s, p) {
                train.push((*t, sections[s].class()));
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Empty(format!("fold {fold} leaves nothing to train on")));
    }
    let (ensemble, losses) = train_ensemble(&train, &cfg.branch, &cfg.train, cfg.seed, fold as u64)?;

    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for (s, images) in triples.iter().enumerate() {
        let mut p = 0;
        let held: Vec<Vec<AlignedTriple<'_, f32>>> = images
            .iter()
            .map(|img| {
                img.iter()
                    .filter(|_| {
                        let keep = in_validation(s, p);
                        p += 1;
                        keep
                    })
                    .copied()
                    .collect()
            })
            .collect();
        if held.iter().all(Vec::is_empty) {
            continue;
        }
        let pred = predict_section(&ensemble, &sections[s].record.section_id, &held, &cfg.weights, cfg.vote)?;
        // Image indices refer to the section's images even when some hold nothing.
        predictions.push(pred);
        truths.push(sections[s].class());
    }

    let mut pre = ConfusionMatrix::new(n);
    let mut post = ConfusionMatrix::new(n);
    let mut sec = ConfusionMatrix::new(n);
    let mut scores = Vec::new();
    for (pred, &truth) in predictions.iter().zip(&truths) {
        for (pos, &c) in pred.positions.iter().zip(&pred.pre_revision_classes) {
            pre.add(truth, c)?;
            post.add(truth, pred.revised_class)?;
            scores.push((pos.combined.clone(), truth));
        }
        sec.add(truth, pred.revised_class)?;
    }
    Ok(FoldResult {
        fold,
        validation_sections: predictions.iter().map(|p| p.section_id.clone()).collect(),
        train_patches: train.len(),
        final_loss: losses.map(|l| tail_mean(&l)),
        patch_pre: MetricSet::from_matrix(pre)?,
        patch_post: MetricSet::from_matrix(post)?,
        section: MetricSet::from_matrix(sec)?,
        roc: roc_auc(&scores)?,
        predictions,
    })
}

/// k-fold cross-validation of the full pipeline. Folds run in parallel;
/// results are merged in fold order and do not depend on the thread count.
pub fn run_crossval(sections: &[SectionPatches], cfg: &CrossvalConfig) -> Result<CrossvalReport> {
    cfg.branch.validate()?;
    cfg.train.validate()?;
    if sections.is_empty() {
        return Err(Error::Empty("no sections to cross-validate".into()));
    }
    for s in sections {
        if s.class() >= cfg.branch.num_classes {
            return Err(Error::invalid(format!(
                "section {} has class {} but the branches have {} outputs",
                s.record.section_id,
                s.class(),
                cfg.branch.num_classes
            )));
        }
    }
    let assignment: Vec<Vec<usize>> = match cfg.split {
        Split::Section => {
            let records: Vec<SectionRecord> = sections.iter().map(|s| s.record.clone()).collect();
            let plan = make_folds(&records, cfg.folds, cfg.seed)?;
            sections
                .iter()
                .map(|s| vec![plan.fold_of(&s.record.section_id).expect("planned"); s.patch_count()])
                .collect()
        }
        Split::Patch => {
            let counts: Vec<usize> = sections.iter().map(SectionPatches::patch_count).collect();
            make_patch_folds(&counts, cfg.folds, cfg.seed)?
        }
    };

    let folds = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let held = |s: usize, p: usize| assignment[s][p] == f;
            let r = evaluate_fold(f, sections, &held, cfg);
            if let Ok(r) = &r {
                log::info!(
                    "fold {}: patch {:.3} -> {:.3} after revision, section {:.3}",
                    f,
                    r.patch_pre.accuracy,
                    r.patch_post.accuracy,
                    r.section.accuracy
                );
            }
            r
        })
        .collect::<Result<Vec<_>>>()?;

    let n = cfg.branch.num_classes;
    let (mut pre, mut post, mut sec) = (
        ConfusionMatrix::new(n),
        ConfusionMatrix::new(n),
        ConfusionMatrix::new(n),
    );
    let mut scores = Vec::new();
    for f in &folds {
        pre.merge(&f.patch_pre.confusion)?;
        post.merge(&f.patch_post.confusion)?;
        sec.merge(&f.section.confusion)?;
        for p in &f.predictions {
            let truth = sections
                .iter()
                .find(|s| s.record.section_id == p.section_id)
                .expect("predicted sections come from the corpus")
                .class();
            scores.extend(p.positions.iter().map(|pos| (pos.combined.clone(), truth)));
        }
    }
    let mean = |get: &dyn Fn(&FoldResult) -> f64| folds.iter().map(get).sum::<f64>() / folds.len() as f64;
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.roc.macro_auc).collect();
    let average = Averages {
        patch_pre_accuracy: mean(&|f| f.patch_pre.accuracy),
        patch_post_accuracy: mean(&|f| f.patch_post.accuracy),
        section_accuracy: mean(&|f| f.section.accuracy),
        patch_pre_kappa: mean(&|f| f.patch_pre.kappa.value),
        patch_post_kappa: mean(&|f| f.patch_post.kappa.value),
        section_kappa: mean(&|f| f.section.kappa.value),
        macro_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    };
    Ok(CrossvalReport {
        config: cfg.clone(),
        average,
        pooled_patch_pre: MetricSet::from_matrix(pre)?,
        pooled_patch_post: MetricSet::from_matrix(post)?,
        pooled_section: MetricSet::from_matrix(sec)?,
        pooled_roc: roc_auc(&scores)?,
        folds,
    })
}

fn write_metric_block(out: &mut String, label: &str, m: &MetricSet) {
    let _ = writeln!(out, "{label}_accuracy = {:.6}", m.accuracy);
    let _ = writeln!(
        out,
        "{label}_kappa = {:.6}{}",
        m.kappa.value,
        if m.kappa.degenerate {
            " (undefined: chance agreement is 1)"
        } else {
            ""
        }
    );
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |a| format!("{a:.6}"))
}

/// Scalar metrics: one block per fold, then the averages and pooled matrices.
pub fn render_metrics(report: &CrossvalReport) -> String {
    let c = &report.config;
    let mut out = String::from("# cross-validation metrics; ties break to the lowest class index\n");
    let _ = writeln!(
        out,
        "# folds = {}, split = {}, seed = {}, vote = {}, weights = {}",
        c.folds, c.split, c.seed, c.vote, c.weights
    );
    for f in &report.folds {
        let _ = writeln!(out, "\n[fold {}]", f.fold);
        let _ = writeln!(out, "validation_sections = {}", f.validation_sections.join(","));
        let _ = writeln!(out, "train_patches = {}", f.train_patches);
        let _ = writeln!(
            out,
            "final_loss = ppl {:.6}, xpl {:.6}, ci {:.6}",
            f.final_loss[0], f.final_loss[1], f.final_loss[2]
        );
        write_metric_block(&mut out, "patch_pre_revision", &f.patch_pre);
        write_metric_block(&mut out, "patch_post_revision", &f.patch_post);
        write_metric_block(&mut out, "section", &f.section);
        let _ = writeln!(out, "macro_auc = {}", fmt_opt(f.roc.macro_auc));
    }
    let a = &report.average;
    out.push_str("\n[average]\n");
    let _ = writeln!(out, "patch_pre_revision_accuracy = {:.6}", a.patch_pre_accuracy);
    let _ = writeln!(out, "patch_pre_revision_kappa = {:.6}", a.patch_pre_kappa);
    let _ = writeln!(out, "patch_post_revision_accuracy = {:.6}", a.patch_post_accuracy);
    let _ = writeln!(out, "patch_post_revision_kappa = {:.6}", a.patch_post_kappa);
    let _ = writeln!(out, "section_accuracy = {:.6}", a.section_accuracy);
    let _ = writeln!(out, "section_kappa = {:.6}", a.section_kappa);
    let _ = writeln!(out, "macro_auc = {}", fmt_opt(a.macro_auc));
    out.push_str("\n[pooled]\n");
    write_metric_block(&mut out, "patch_pre_revision", &report.pooled_patch_pre);
    write_metric_block(&mut out, "patch_post_revision", &report.pooled_patch_post);
    write_metric_block(&mut out, "section", &report.pooled_section);
    let _ = writeln!(out, "macro_auc = {}", fmt_opt(report.pooled_roc.macro_auc));
    out
}

/// `class,fpr,tpr,threshold` rows for every curve.
pub fn render_roc_points(roc: &RocReport) -> String {
    let mut out = String::from("class,fpr,tpr,threshold\n");
    for c in &roc.curves {
        for p in &c.points {
            let _ = writeln!(out, "{},{},{},{}", class_name(c.class), p.fpr, p.tpr, p.threshold);
        }
    }
    out
}

const PLOT_COLORS: [&str; 13] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939", "#843c39",
];

/// Standalone SVG of the ROC curves. Polyline coordinates are the unit-square
/// `fpr,tpr` values exactly as written by [`render_roc_points`].
pub fn render_roc_svg(roc: &RocReport) -> String {
    let mut out = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"500\" viewBox=\"0 0 640 500\">\n\
         <rect width=\"640\" height=\"500\" fill=\"white\"/>\n\
         <g transform=\"matrix(400,0,0,-400,60,450)\" fill=\"none\">\n\
         <rect x=\"0\" y=\"0\" width=\"1\" height=\"1\" stroke=\"black\" vector-effect=\"non-scaling-stroke\"/>\n\
         <line x1=\"0\" y1=\"0\" x2=\"1\" y2=\"1\" stroke=\"#aaaaaa\" stroke-dasharray=\"4 4\" vector-effect=\"non-scaling-stroke\"/>\n",
    );
    for c in &roc.curves {
        let pts: Vec<String> = c.points.iter().map(|p| format!("{},{}", p.fpr, p.tpr)).collect();
        let _ = writeln!(
            out,
            "<polyline stroke=\"{}\" stroke-width=\"2\" vector-effect=\"non-scaling-stroke\" points=\"{}\"/>",
            PLOT_COLORS[c.class % PLOT_COLORS.len()],
            pts.join(" ")
        );
    }
    out.push_str("</g>\n<g font-family=\"sans-serif\" font-size=\"12\">\n");
    out.push_str("<text x=\"260\" y=\"480\">false positive rate</text>\n");
    out.push_str("<text x=\"20\" y=\"250\" transform=\"rotate(-90 20 250)\">true positive rate</text>\n");
    for (i, c) in roc.curves.iter().enumerate() {
        let y = 60 + 18 * i;
        let _ = writeln!(
            out,
            "<text x=\"470\" y=\"{y}\" fill=\"{}\">{} (AUC {:.3})</text>",
            PLOT_COLORS[c.class % PLOT_COLORS.len()],
            class_name(c.class),
            c.auc
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Every output file of a cross-validation run as `(file name, contents)`.
pub fn report_files(report: &CrossvalReport) -> Vec<(&'static str, String)> {
    let predictions: Vec<SectionPrediction> = report.folds.iter().flat_map(|f| f.predictions.clone()).collect();
    vec![
        ("metrics.txt", render_metrics(report)),
        (
            "confusion_patch_pre_counts.csv",
            report.pooled_patch_pre.confusion.render_counts(),
        ),
        (
            "confusion_patch_pre_normalized.csv",
            report.pooled_patch_pre.confusion.render_normalized(),
        ),
        (
            "confusion_patch_post_counts.csv",
            report.pooled_patch_post.confusion.render_counts(),
        ),
        (
            "confusion_patch_post_normalized.csv",
            report.pooled_patch_post.confusion.render_normalized(),
        ),
        (
            "confusion_section_counts.csv",
            report.pooled_section.confusion.render_counts(),
        ),
        (
            "confusion_section_normalized.csv",
            report.pooled_section.confusion.render_normalized(),
        ),
        ("roc_points.csv", render_roc_points(&report.pooled_roc)),
        ("roc.svg", render_roc_svg(&report.pooled_roc)),
        ("predictions.csv", prediction_report(&predictions)),
    ]
}

pub fn write_report(report: &CrossvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report_files(report)
        .into_iter()
        .map(|(name, text)| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::RockType;
    use proptest::prelude::*;
    use rand::Rng;

    fn records(classes: &[(usize, usize)]) -> Vec<SectionRecord> {
        classes
            .iter()
            .flat_map(|&(class, count)| {
                (0..count).map(move |i| SectionRecord {
                    section_id: format!("c{class}_{i}"),
                    rock_type: RockType::ALL[class],
                    images: vec![],
                })
            })
            .collect()
    }

    #[test]
    fn ten_sections_five_folds() {
        let recs = records(&[(0, 4), (1, 6)]);
        let plan = make_folds(&recs, 5, 9).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        assert_eq!(plan, make_folds(&recs, 5, 9).unwrap());
        assert!(!plan.stratified);
    }

    #[test]
    fn stratified_one_per_class_per_fold() {
        let recs = records(&(0..13).map(|c| (c, 5)).collect::<Vec<_>>());
        let plan = make_folds(&recs, 5, 1).unwrap();
        assert!(plan.stratified);
        for f in 0..5 {
            let ids = plan.validation_sections(f);
            let class_set: HashSet<&str> = ids.iter().map(|id| id.split('_').next().unwrap()).collect();
            assert_eq!((ids.len(), class_set.len()), (13, 13));
        }
    }

    #[test]
    fn fold_errors() {
        assert!(make_folds(&records(&[(0, 3)]), 5, 0).is_err());
        assert!(make_folds(&records(&[(0, 3)]), 1, 0).is_err());
        let mut dup = records(&[(0, 3)]);
        dup[1].section_id = dup[0].section_id.clone();
        assert!(make_folds(&dup, 2, 0).is_err());
    }

    #[test]
    fn patch_folds_partition() {
        let folds = make_patch_folds(&[49, 49, 10], 5, 3).unwrap();
        let mut sizes = [0; 5];
        for f in folds.iter().flatten() {
            sizes[*f] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), 108);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    fn two_class() -> ConfusionMatrix {
        let mut pairs = vec![(0, 0); 45];
        pairs.extend(vec![(0, 1); 5]);
        pairs.extend(vec![(1, 0); 10]);
        pairs.extend(vec![(1, 1); 40]);
        confusion_matrix(2, &pairs).unwrap()
    }

    #[test]
    fn accuracy_and_kappa_hand_example() {
        let cm = two_class();
        assert_eq!(cm.total(), 100);
        // p_o = 85/100; p_e = (50·55 + 50·45) / 100² = 0.5.
        assert!((overall_accuracy(&cm).unwrap() - 0.85).abs() < 1e-12);
        let k = cohen_kappa(&cm).unwrap();
        assert!((k.value - 0.7).abs() < 1e-12);
        assert!(!k.degenerate);
    }

    #[test]
    fn confusion_edge_cases() {
        let cm = confusion_matrix(13, &[(3, 5)]).unwrap();
        assert_eq!(cm.get(3, 5), 1);
        assert_eq!(cm.total(), 1);
        assert!(confusion_matrix(2, &[(0, 2)]).is_err());
        assert!(overall_accuracy(&ConfusionMatrix::new(3)).is_err());

        let diag = confusion_matrix(3, &[(0, 0), (1, 1), (2, 2), (1, 1)]).unwrap();
        assert_eq!(overall_accuracy(&diag).unwrap(), 1.0);
        assert!((cohen_kappa(&diag).unwrap().value - 1.0).abs() < 1e-12);

        let wrong = confusion_matrix(2, &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(overall_accuracy(&wrong).unwrap(), 0.0);

        let uniform = confusion_matrix(3, &(0..9).map(|i| (i / 3, i % 3)).collect::<Vec<_>>()).unwrap();
        assert!(cohen_kappa(&uniform).unwrap().value.abs() < 1e-9);

        let single = confusion_matrix(3, &[(1, 1), (1, 1)]).unwrap();
        assert_eq!(
            cohen_kappa(&single).unwrap(),
            Kappa {
                value: 0.0,
                degenerate: true
            }
        );
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let cm = two_class();
        for row in cm.row_normalized() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let text = cm.render_normalized();
        assert_eq!(text.lines().nth(1).unwrap(), "andesite,0.90,0.10");
    }

    fn binary(scores: &[(f64, bool)]) -> f64 {
        roc_curve(0, scores).unwrap().auc
    }

    #[test]
    fn auc_examples() {
        let base = [(0.9, true), (0.8, true), (0.7, false), (0.1, false)];
        assert_eq!(binary(&base), 1.0);
        let swapped = [(0.9, true), (0.7, true), (0.8, false), (0.1, false)];
        assert!((binary(&swapped) - 0.75).abs() < 1e-12);
        assert!((binary(&[(0.5, true), (0.5, false), (0.5, true)]) - 0.5).abs() < 1e-12);
        assert!(roc_curve(0, &[(0.5, true)]).is_none());
    }

    #[test]
    fn roc_omits_degenerate_classes() {
        let scores = vec![
            (ClassDistribution::new(vec![0.8, 0.2, 0.0]).unwrap(), 0),
            (ClassDistribution::new(vec![0.3, 0.7, 0.0]).unwrap(), 1),
        ];
        let r = roc_auc(&scores).unwrap();
        assert_eq!(r.curves.len(), 2);
        assert_eq!(r.omitted, vec![2]);
        assert_eq!(r.macro_auc, Some(1.0));
        let csv = render_roc_points(&r);
        assert!(csv.starts_with("class,fpr,tpr,threshold\nandesite,0,0,inf\n"));
        let svg = render_roc_svg(&r);
        assert!(svg.contains("points=\"0,0 0,1 1,1\""));
    }

    /// Pairwise oracle: P(score_pos > score_neg) + ½·P(tie).
    fn concordance(scores: &[(f64, bool)]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for a in scores.iter().filter(|s| s.1) {
            for b in scores.iter().filter(|s| !s.1) {
                den += 1.0;
                num += if a.0 > b.0 {
                    1.0
                } else if a.0 == b.0 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pairwise_concordance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        while checked < 200 {
            let n = rng.gen_range(2..=50);
            // Coarse scores so ties are common.
            let scores: Vec<(f64, bool)> = (0..n)
                .map(|_| (rng.gen_range(0..12) as f64 / 11.0, rng.gen_bool(0.4)))
                .collect();
            if let Some(c) = roc_curve(0, &scores) {
                assert!((c.auc - concordance(&scores)).abs() < 1e-9);
                checked += 1;
            }
        }
    }

    proptest! {
        #[test]
        fn kappa_is_bounded(counts in proptest::collection::vec(0u64..20, 9)) {
            let mut cm = ConfusionMatrix::new(3);
            for (i, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    cm.add(i / 3, i % 3).unwrap();
                }
            }
            prop_assume!(cm.total() > 0);
            let k = cohen_kappa(&cm).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k.value));
            let diagonal = (0..9).all(|i| i / 3 == i % 3 || counts[i] == 0);
            let nonempty = (0..3).filter(|&c| cm.row_total(c) > 0).count();
            prop_assert_eq!((k.value - 1.0).abs() < 1e-12, diagonal && nonempty >= 2);
        }

        #[test]
        fn roc_points_are_monotone(scores in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..50)) {
            if let Some(c) = roc_curve(0, &scores) {
                prop_assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
                let last = c.points.last().unwrap();
                prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
                for w in c.points.windows(2) {
                    prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
                    prop_assert!(w[1].threshold < w[0].threshold);
                }
                prop_assert!((0.0..=1.0).contains(&c.auc));
            }
        }

        #[test]
        fn folds_partition_sections(counts in proptest::collection::vec(1usize..8, 1..6), k in 2usize..6, seed in any::<u64>()) {
            let recs = records(&counts.iter().copied().enumerate().collect::<Vec<_>>());
            prop_assume!(recs.len() >= k);
            let plan = make_folds(&recs, k, seed).unwrap();
            prop_assert_eq!(plan.len(), recs.len());
            let sizes = plan.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut seen = 0;
            for f in 0..k {
                seen += plan.validation_sections(f).len();
            }
            prop_assert_eq!(seen, recs.len());
        }
    }
}
