//! Deterministic synthetic ECG-like records.
//!
//! Each lead is a train of Gaussian bumps with a per-lead gain plus white
//! noise. Class `k` alters the train in a way a matched filter can find:
//!
//! | k | signature |
//! |---|-----------|
//! | 0 | bumps twice as wide |
//! | 1 | bumps inverted on the first half of the leads |
//! | 2 | every bump followed by a twin a quarter period later |
//! | 3 | period × 1.5 |
//! | 4 | beat times jittered by up to ±15 % of the period |
//! | 5 | period × 0.6 |
//!
//! Classes 3 and 5 both set the period, so a record never carries both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EcgRecord, DEFAULT_SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIGNATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelMode {
    /// Each class present independently with this probability.
    MultiHot { prevalence: f64 },
    /// Exactly one class per record, uniformly drawn.
    OneHot,
}

impl Default for LabelMode {
    fn default() -> Self {
        LabelMode::MultiHot { prevalence: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub records: usize,
    #[serde(default = "d_leads")]
    pub leads: usize,
    #[serde(default = "d_len")]
    pub len: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_rate")]
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub labels: LabelMode,
    /// Standard deviation of the additive noise, in millivolts.
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Records per patient id.
    #[serde(default = "d_per_patient")]
    pub records_per_patient: usize,
}

fn d_leads() -> usize {
    12
}
fn d_len() -> usize {
    4096
}
fn d_classes() -> usize {
    6
}
fn d_rate() -> u32 {
    DEFAULT_SAMPLE_RATE_HZ
}
fn d_noise() -> f64 {
    0.05
}
fn d_per_patient() -> usize {
    2
}

impl SynthSpec {
    pub fn new(records: usize, classes: usize, seed: u64, leads: usize, len: usize) -> Self {
        SynthSpec {
            records,
            leads,
            len,
            classes,
            sample_rate_hz: d_rate(),
            seed,
            labels: LabelMode::default(),
            noise: d_noise(),
            records_per_patient: d_per_patient(),
        }
    }

    /// Beat period in samples before any class modification.
    pub fn base_period(&self) -> f64 {
        self.len as f64 / 8.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.records == 0 {
            return Err(Error::config("synthetic dataset needs at least one record"));
        }
        if self.classes == 0 || self.classes > SIGNATURES {
            return Err(Error::config(format!("classes must be in 1..={SIGNATURES}, got {}", self.classes)));
        }
        if self.leads == 0 || self.len < 16 {
            return Err(Error::config("need at least one lead and 16 samples"));
        }
        if let LabelMode::MultiHot { prevalence } = self.labels {
            if !(0.0..=1.0).contains(&prevalence) {
                return Err(Error::config(format!("prevalence {prevalence} outside [0, 1]")));
            }
        }
        if self.records_per_patient == 0 || !(self.noise >= 0.0) {
            return Err(Error::config("records_per_patient must be positive and noise non-negative"));
        }
        Ok(())
    }
}

fn draw_labels(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let k = spec.classes;
    let mut labels = vec![0u8; k];
    match spec.labels {
        LabelMode::OneHot => labels[rng.random_range(0..k)] = 1,
        LabelMode::MultiHot { prevalence } => {
            for y in labels.iter_mut() {
                *y = rng.random_bool(prevalence) as u8;
            }
            if k > 5 && labels[3] == 1 && labels[5] == 1 {
                // keep one of the two period changes
                let drop = if rng.random_bool(0.5) { 3 } else { 5 };
                labels[drop] = 0;
            }
        }
    }
    labels
}

fn render(spec: &SynthSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let has = |k: usize| labels.get(k) == Some(&1);
    let (c, n) = (spec.leads, spec.len);
    let base = spec.base_period();
    let period = base
        * if has(3) {
            1.5
        } else if has(5) {
            0.6
        } else {
            1.0
        };
    let sigma = base / 20.0 * if has(0) { 2.0 } else { 1.0 };
    let inverted_leads = if has(1) { (c / 2).max(1) } else { 0 };

    let phase = rng.random_range(0.0..period);
    let mut beats = Vec::new();
    let mut j = -1i64;
    loop {
        let mut t = phase + j as f64 * period;
        if t > n as f64 + period {
            break;
        }
        if has(4) {
            t += rng.random_range(-0.15..=0.15) * base;
        }
        beats.push(t);
        if has(2) {
            beats.push(t + base / 4.0);
        }
        j += 1;
    }

    let mut train = vec![0f64; n];
    let reach = 5.0 * sigma;
    for &t in &beats {
        let hi = (t + reach).floor().min(n as f64 - 1.0);
        if hi < 0.0 {
            continue;
        }
        let lo = (t - reach).ceil().max(0.0) as usize;
        for (i, v) in train.iter_mut().enumerate().take(hi as usize + 1).skip(lo) {
            let d = (i as f64 - t) / sigma;
            *v += (-0.5 * d * d).exp();
        }
    }

    let noise = Normal::new(0.0, spec.noise).expect("noise checked non-negative");
    let mut out = Vec::with_capacity(c * n);
    for lead in 0..c {
        let mut gain = rng.random_range(0.6..1.4);
        if lead < inverted_leads {
            gain = -gain;
        }
        out.extend(train.iter().map(|&v| (gain * v + noise.sample(rng)) as f32));
    }
    out
}

/// Generate `spec.records` records. Identical specs give bit-identical data.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ds = Dataset::new(spec.leads, spec.len, spec.classes, spec.sample_rate_hz);
    for i in 0..spec.records {
        let labels = draw_labels(spec, &mut rng);
        let signal = render(spec, &labels, &mut rng);
        ds.records.push(EcgRecord {
            signal: Tensor::new(vec![spec.leads, spec.len], signal)?,
            labels,
            patient_id: (i / spec.records_per_patient) as u64,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows() {
        let mut spec = SynthSpec::new(4, 6, 7, 2, 64);
        spec.labels = LabelMode::OneHot;
        let ds = synth_dataset(&spec).unwrap();
        for r in &ds.records {
            assert_eq!(r.labels.iter().map(|&b| b as u32).sum::<u32>(), 1);
        }
    }

    #[test]
    fn zero_records_rejected() {
        assert!(synth_dataset(&SynthSpec::new(0, 6, 0, 2, 64)).is_err());
    }
}
