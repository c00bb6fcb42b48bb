//! Rock-type vocabulary and per-class probability vectors.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The thirteen rock types, in the alphabetical order used for every class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RockType {
    Andesite,
    Basalt,
    Diorite,
    Gabbro,
    Granite,
    Limestone,
    Peridotite,
    Phonolite,
    Rhyolite,
    Sandstone,
    Schist,
    Syenite,
    Tuff,
}

pub const NUM_ROCK_TYPES: usize = 13;

impl RockType {
    pub const ALL: [RockType; NUM_ROCK_TYPES] = [
        RockType::Andesite,
        RockType::Basalt,
        RockType::Diorite,
        RockType::Gabbro,
        RockType::Granite,
        RockType::Limestone,
        RockType::Peridotite,
        RockType::Phonolite,
        RockType::Rhyolite,
        RockType::Sandstone,
        RockType::Schist,
        RockType::Syenite,
        RockType::Tuff,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<RockType> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RockType::Andesite => "andesite",
            RockType::Basalt => "basalt",
            RockType::Diorite => "diorite",
            RockType::Gabbro => "gabbro",
            RockType::Granite => "granite",
            RockType::Limestone => "limestone",
            RockType::Peridotite => "peridotite",
            RockType::Phonolite => "phonolite",
            RockType::Rhyolite => "rhyolite",
            RockType::Sandstone => "sandstone",
            RockType::Schist => "schist",
            RockType::Syenite => "syenite",
            RockType::Tuff => "tuff",
        }
    }
}

impl fmt::Display for RockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RockType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let needle = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|r| r.name() == needle)
            .ok_or_else(|| Error::UnknownClass(s.trim().to_string()))
    }
}

/// Name for a class index, falling back to `class<i>` past the rock-type list.
pub fn class_name(index: usize) -> String {
    RockType::from_index(index)
        .map(|r| r.name().to_string())
        .unwrap_or_else(|| format!("class{index}"))
}

/// Probability vector over classes. Entries lie in `[0, 1]` and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

/// Allowed deviation of a distribution's total from one.
pub const DISTRIBUTION_SUM_TOLERANCE: f64 = 1e-6;

impl ClassDistribution {
    /// Validates `probs` as a distribution.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("class distribution has no classes".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        Self { probs }
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self::from_raw(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self::from_raw(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_order_is_alphabetical() {
        let names: Vec<_> = RockType::ALL.iter().map(|r| r.name()).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        assert_eq!(names, sorted);
        assert_eq!(RockType::Tuff.index(), 12);
    }

    #[test]
    fn parse_rejects_misspelling() {
        assert_eq!("Granite".parse::<RockType>().unwrap(), RockType::Granite);
        assert!(matches!("granit".parse::<RockType>(), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassDistribution::new(vec![]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(ClassDistribution::uniform(13).argmax(), 0);
        let d = ClassDistribution::new(vec![0.1, 0.45, 0.45]).unwrap();
        assert_eq!(d.argmax(), 1);
    }
}
