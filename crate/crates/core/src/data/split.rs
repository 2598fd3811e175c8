use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Train/validation/dev fractions over patients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub dev: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.90,
            val: 0.05,
            dev: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.dev]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions {f:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `patients` across the three
    /// subsets. Ties go to the earlier subset.
    pub fn allocate(&self, patients: usize) -> [usize; 3] {
        let f = self.fractions();
        let quotas = f.map(|x| x * patients as f64);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let assigned: usize = counts.iter().sum();
        for &i in order.iter().take(patients.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

/// Partition records by patient into `(train, val, dev)`. Patients are
/// shuffled with `spec.seed`; subset sizes follow [`SplitSpec::allocate`].
pub fn split_by_patient(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut patients: Vec<u64> = ds.records.iter().map(|r| r.patient_id).collect::<BTreeSet<_>>().into_iter().collect();
    let nonzero = spec.fractions().iter().filter(|&&f| f > 0.0).count();
    if patients.len() < nonzero {
        return Err(Error::config(format!(
            "{} patients cannot fill {nonzero} non-empty subsets",
            patients.len()
        )));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let counts = spec.allocate(patients.len());
    let mut subset_of = BTreeMap::new();
    let mut next = 0;
    for (s, &c) in counts.iter().enumerate() {
        for &p in &patients[next..next + c] {
            subset_of.insert(p, s);
        }
        next += c;
    }
    let mut parts: [Vec<_>; 3] = Default::default();
    for r in &ds.records {
        parts[subset_of[&r.patient_id]].push(r.clone());
    }
    let [a, b, c] = parts;
    Ok((ds.with_records(a), ds.with_records(b), ds.with_records(c)))
}
