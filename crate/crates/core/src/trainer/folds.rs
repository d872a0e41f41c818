use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::augment::RandomStream;
use crate::volume::LesionType;

/// Assignment of every case to exactly one validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Validation case ids per fold, sorted.
    pub fn folds(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.k];
        for (id, &f) in &self.assignments {
            out[f].push(id.clone());
        }
        out
    }

    pub fn validation(&self, fold: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.clone()).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &f)| f != fold).map(|(id, _)| id.clone()).collect()
    }
}

/// Stratified k-fold split by lesion type.
///
/// Cases are grouped by type, each group is shuffled under the seed, and the
/// concatenated groups are dealt round-robin. Fold sizes then differ by at
/// most one, and each type's count per fold is within one of its share.
pub fn make_folds(cases: &[(String, LesionType)], k: usize, seed: u64) -> Result<FoldPlan, TrainError> {
    if k == 0 || cases.len() < k {
        return Err(TrainError::TooFewCases { cases: cases.len(), k });
    }
    let mut groups: BTreeMap<LesionType, Vec<String>> = BTreeMap::new();
    for (id, t) in cases {
        groups.entry(*t).or_default().push(id.clone());
    }
    let stream = RandomStream::new(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0usize;
    for (gi, (_, ids)) in groups.iter_mut().enumerate() {
        ids.sort();
        ids.shuffle(&mut stream.substream("folds", gi as u64));
        for id in ids.iter() {
            if assignments.insert(id.clone(), next % k).is_some() {
                return Err(TrainError::InvalidConfig(format!("duplicate case id {id}")));
            }
            next += 1;
        }
    }
    Ok(FoldPlan { k, seed, assignments })
}
