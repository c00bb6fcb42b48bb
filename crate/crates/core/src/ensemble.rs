//! Weighted fusion of the three branch outputs and per-section mode revision.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::classes::{class_name, ClassDistribution};
use crate::error::{Error, Result};
use crate::model::BranchModel;
use crate::patching::AlignedTriple;
use crate::preprocess::Role;
use crate::tensor::Scalar;

/// Weights must sum to one within this before they are used as given.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchWeights {
    ppl: f64,
    xpl: f64,
    ci: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            ppl: 0.4,
            xpl: 0.4,
            ci: 0.2,
        }
    }
}

impl BranchWeights {
    /// Non-negative weights. A set that does not sum to one is rescaled and a
    /// warning is logged.
    pub fn new(ppl: f64, xpl: f64, ci: f64) -> Result<Self> {
        let w = [ppl, xpl, ci];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "branch weights must be finite and non-negative, got {ppl},{xpl},{ci}"
            )));
        }
        let total = ppl + xpl + ci;
        if total <= 0.0 {
            return Err(Error::invalid("branch weights are all zero"));
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            log::warn!("branch weights {ppl},{xpl},{ci} sum to {total}; renormalizing");
            return Ok(Self {
                ppl: ppl / total,
                xpl: xpl / total,
                ci: ci / total,
            });
        }
        Ok(Self { ppl, xpl, ci })
    }

    pub fn get(&self, role: Role) -> f64 {
        match role {
            Role::Ppl => self.ppl,
            Role::Xpl => self.xpl,
            Role::Ci => self.ci,
            Role::Composite6 => 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.ppl, self.xpl, self.ci]
    }
}

impl fmt::Display for BranchWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.ppl, self.xpl, self.ci)
    }
}

/// Parses `w_ppl,w_xpl,w_ci`.
impl FromStr for BranchWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("weights {s:?} are not three numbers")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::invalid(format!("expected three weights, got {s:?}"))),
        }
    }
}

/// Weighted average of the three branch distributions.
pub fn concatenate(
    p_ppl: &ClassDistribution,
    p_xpl: &ClassDistribution,
    p_ci: &ClassDistribution,
    w: &BranchWeights,
) -> Result<ClassDistribution> {
    let n = p_ppl.len();
    if p_xpl.len() != n || p_ci.len() != n {
        return Err(Error::shape(format!(
            "branch distributions have {}, {} and {} classes",
            n,
            p_xpl.len(),
            p_ci.len()
        )));
    }
    let (a, b, c) = (p_ppl.probs(), p_xpl.probs(), p_ci.probs());
    let probs = (0..n)
        .map(|k| (w.ppl * a[k] + w.xpl * b[k] + w.ci * c[k]).clamp(0.0, 1.0))
        .collect();
    Ok(ClassDistribution::from_raw(probs))
}

/// Most probable class; ties go to the lowest index.
pub fn maximum_likelihood(dist: &ClassDistribution) -> usize {
    dist.argmax()
}

/// Most frequent class; ties go to the lowest index.
pub fn mode(classes: &[usize]) -> Result<usize> {
    let Some(&max) = classes.iter().max() else {
        return Err(Error::Empty("no patch predictions to revise".into()));
    };
    let mut counts = vec![0usize; max + 1];
    for &c in classes {
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Assigns the modal class to every position.
pub fn statistical_revision(patch_classes: &[usize]) -> Result<(usize, Vec<usize>)> {
    let m = mode(patch_classes)?;
    Ok((m, vec![m; patch_classes.len()]))
}

/// Which predictions the section vote counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoteMode {
    /// One vote per position, from the fused distribution.
    #[default]
    Concat108,
    /// One vote per position and branch, from each branch's own distribution.
    Branch324,
}

impl VoteMode {
    pub fn name(self) -> &'static str {
        match self {
            VoteMode::Concat108 => "concat108",
            VoteMode::Branch324 => "branch324",
        }
    }
}

impl fmt::Display for VoteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VoteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "concat108" => Ok(VoteMode::Concat108),
            "branch324" => Ok(VoteMode::Branch324),
            other => Err(Error::invalid(format!(
                "vote mode {other:?} is not concat108 or branch324"
            ))),
        }
    }
}

/// The three trained branches of one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Scalar = f32> {
    branches: [BranchModel<T>; 3],
}

impl<T: Scalar> Ensemble<T> {
    /// Takes the branches in PPL, XPL, CI order; roles and configs are checked.
    pub fn new(ppl: BranchModel<T>, xpl: BranchModel<T>, ci: BranchModel<T>) -> Result<Self> {
        let branches = [ppl, xpl, ci];
        for (b, role) in branches.iter().zip(Role::BRANCHES) {
            if b.role() != role {
                return Err(Error::invalid(format!(
                    "expected a {role} branch, got a {} branch",
                    b.role()
                )));
            }
        }
        let (p, n) = (branches[0].config().patch_size, branches[0].config().num_classes);
        if branches[1..]
            .iter()
            .any(|b| b.config().patch_size != p || b.config().num_classes != n)
        {
            return Err(Error::invalid("branches disagree on patch size or class count"));
        }
        Ok(Self { branches })
    }

    pub fn get(&self, role: Role) -> &BranchModel<T> {
        match role {
            Role::Ppl => &self.branches[0],
            Role::Xpl => &self.branches[1],
            Role::Ci => &self.branches[2],
            Role::Composite6 => panic!("composites have no branch"),
        }
    }

    pub fn patch_size(&self) -> usize {
        self.branches[0].config().patch_size
    }

    pub fn num_classes(&self) -> usize {
        self.branches[0].config().num_classes
    }

    pub fn into_branches(self) -> [BranchModel<T>; 3] {
        self.branches
    }
}

/// Predictions at one grid position of one image of a section.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionPrediction {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    /// PPL, XPL, CI.
    pub branches: [ClassDistribution; 3],
    pub combined: ClassDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionPrediction {
    pub section_id: String,
    pub vote: VoteMode,
    pub positions: Vec<PositionPrediction>,
    /// Fused class at each position, before revision.
    pub pre_revision_classes: Vec<usize>,
    pub revised_class: usize,
}

impl SectionPrediction {
    /// Builds a section verdict from per-position predictions.
    pub fn from_positions(section_id: &str, positions: Vec<PositionPrediction>, vote: VoteMode) -> Result<Self> {
        let pre_revision_classes: Vec<usize> = positions.iter().map(|p| maximum_likelihood(&p.combined)).collect();
        let revised_class = match vote {
            VoteMode::Concat108 => mode(&pre_revision_classes)?,
            VoteMode::Branch324 => {
                let votes: Vec<usize> = positions
                    .iter()
                    .flat_map(|p| p.branches.iter().map(maximum_likelihood))
                    .collect();
                mode(&votes)?
            }
        };
        Ok(Self {
            section_id: section_id.to_string(),
            vote,
            positions,
            pre_revision_classes,
            revised_class,
        })
    }
}

/// Runs every position of a section through the three branches, fuses and
/// revises. `images` holds the aligned triples of each image of the section.
pub fn predict_section<T: Scalar>(
    ensemble: &Ensemble<T>,
    section_id: &str,
    images: &[Vec<AlignedTriple<'_, T>>],
    weights: &BranchWeights,
    vote: VoteMode,
) -> Result<SectionPrediction> {
    let jobs: Vec<(usize, &AlignedTriple<'_, T>)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, triples)| triples.iter().map(move |t| (i, t)))
        .collect();
    let positions = jobs
        .par_iter()
        .map(|&(image, t)| -> Result<PositionPrediction> {
            let [p, x, c] = Role::BRANCHES.map(|role| ensemble.get(role).forward(t.get(role)));
            let branches = [p?, x?, c?];
            let combined = concatenate(&branches[0], &branches[1], &branches[2], weights)?;
            Ok(PositionPrediction {
                image,
                row: t.row,
                col: t.col,
                branches,
                combined,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SectionPrediction::from_positions(section_id, positions, vote)
}

/// Delimited per-position report: section, image, row, col, one fused
/// probability column per class, pre- and post-revision class.
pub fn prediction_report(predictions: &[SectionPrediction]) -> String {
    let num_classes = predictions
        .iter()
        .flat_map(|s| s.positions.first())
        .map(|p| p.combined.len())
        .next()
        .unwrap_or(0);
    let mut out = String::from("# argmax and mode ties break to the lowest class index\n");
    out.push_str("section_id,image,row,col");
    for k in 0..num_classes {
        let _ = write!(out, ",p_{}", class_name(k));
    }
    out.push_str(",pre_revision,post_revision\n");
    for s in predictions {
        for (pos, &pre) in s.positions.iter().zip(&s.pre_revision_classes) {
            let _ = write!(out, "{},{},{},{}", s.section_id, pos.image, pos.row, pos.col);
            for &p in pos.combined.probs() {
                let _ = write!(out, ",{p:.6}");
            }
            let _ = writeln!(out, ",{},{}", class_name(pre), class_name(s.revised_class));
        }
    }
    out
}
