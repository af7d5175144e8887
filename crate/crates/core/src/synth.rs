//! Seeded synthetic CGM cohorts and ARMA signals used as test fixtures.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`. A uniform draw is `(next_u64 >> 11) * 2^-53`; a Gaussian
//! draw is one Box-Muller output `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` from two
//! consecutive uniforms, evaluated with the `libm` crate so results do not
//! depend on the platform math library. Each patient uses three ChaCha
//! streams of its seed: 0 for meals, 1 for sensor noise, 2 for gaps.
//! Generated glucose values are clipped to [2.2, 22.2] mmol/L and rounded to
//! 0.001 mmol/L.

use chrono::{DateTime, Utc};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arima::is_stationary;
use crate::cgm_data::{GlucoseSeries, SLOTS_PER_DAY, SLOT_MINUTES};
use crate::error::{Error, Result};

pub const MIN_GLUCOSE: f64 = 2.2;
pub const MAX_GLUCOSE: f64 = 22.2;
/// 2021-01-04T00:00:00Z, the first slot of every synthetic cohort.
pub const SYNTH_START_UNIX: i64 = 1_609_718_400;

pub fn synth_start() -> DateTime<Utc> {
    DateTime::from_timestamp(SYNTH_START_UNIX, 0).expect("valid constant")
}

/// Uniform and Gaussian draws from one ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }
}

/// ARMA sample path with Gaussian innovations; pre-sample values are zero.
pub fn generate_arma(phi: &[f64], theta: &[f64], c: f64, sigma: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    generate_arma_from(phi, theta, c, sigma, n, seed, 0.0)
}

/// As [`generate_arma`], with every pre-sample value set to `initial`.
/// The first `10 (p + q + 1)` generated samples are discarded as burn-in.
pub fn generate_arma_from(phi: &[f64], theta: &[f64], c: f64, sigma: f64, n: usize, seed: u64, initial: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("ARMA sample length must be at least 1".into()));
    }
    if !is_stationary(phi) {
        return Err(Error::Explosive(phi.to_vec()));
    }
    let (p, q) = (phi.len(), theta.len());
    let burn = 10 * (p + q + 1);
    let mut rng = GaussianStream::new(seed);
    let mut x = vec![initial; p];
    let mut eps = vec![0.0; q];
    for _ in 0..burn + n {
        let e = sigma * rng.next_gaussian();
        let t = x.len();
        let mut v = c + e;
        for (i, a) in phi.iter().enumerate() {
            v += a * x[t - 1 - i];
        }
        let s = eps.len();
        for (j, b) in theta.iter().enumerate() {
            v += b * eps[s - 1 - j];
        }
        x.push(v);
        eps.push(e);
    }
    Ok(x.split_off(p + burn))
}

/// Parameters of one synthetic patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    /// mmol/L
    pub baseline: f64,
    /// mmol/L, peak deviation of the 24-hour sinusoid
    pub circadian_amplitude: f64,
    /// radians
    pub circadian_phase: f64,
    pub meals_per_day: usize,
    /// mmol/L, instantaneous rise at meal time
    pub meal_magnitude: f64,
    pub meal_decay_minutes: f64,
    pub ar_coefficient: f64,
    /// mmol/L, innovation standard deviation of the AR(1) noise
    pub innovation_scale: f64,
    /// Per-slot probability of a sensor gap starting.
    pub gap_rate: f64,
    /// Mean gap length in slots.
    pub mean_gap_length: f64,
    pub days: usize,
    pub seed: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            baseline: 7.5,
            circadian_amplitude: 0.8,
            circadian_phase: 0.0,
            meals_per_day: 3,
            meal_magnitude: 3.0,
            meal_decay_minutes: 60.0,
            ar_coefficient: 0.97,
            innovation_scale: 0.12,
            gap_rate: 0.004,
            mean_gap_length: 6.0,
            days: 14,
            seed: 0,
        }
    }
}

impl SynthProfile {
    fn validate(&self) -> Result<()> {
        if !(self.baseline > 0.0) {
            return Err(Error::InvalidArgument(format!("baseline must be positive, got {}", self.baseline)));
        }
        if !(0.0..1.0).contains(&self.gap_rate) {
            return Err(Error::InvalidArgument(format!("gap rate must lie in [0, 1), got {}", self.gap_rate)));
        }
        if self.days == 0 {
            return Err(Error::InvalidArgument("days must be at least 1".into()));
        }
        if self.ar_coefficient.abs() >= 1.0 {
            return Err(Error::Explosive(vec![self.ar_coefficient]));
        }
        Ok(())
    }
}

/// Meal onsets (slot index) and magnitudes: meals spread evenly between
/// 07:00 and 19:00 with +-30 min jitter and 0.6..1.4 magnitude scaling.
fn meal_schedule(profile: &SynthProfile, rng: &mut GaussianStream) -> Vec<(usize, f64)> {
    let mut meals = Vec::new();
    let m = profile.meals_per_day;
    for day in 0..profile.days {
        for i in 0..m {
            let minutes = if m == 1 { 720.0 } else { 420.0 + 720.0 * i as f64 / (m - 1) as f64 };
            let jitter = rng.uniform_in(-30.0, 30.0);
            let slot = ((minutes + jitter) / SLOT_MINUTES as f64).round() as usize;
            let magnitude = profile.meal_magnitude * rng.uniform_in(0.6, 1.4);
            meals.push((day * SLOTS_PER_DAY + slot.min(SLOTS_PER_DAY - 1), magnitude));
        }
    }
    meals
}

/// baseline + circadian sinusoid + decaying meal pulses + AR(1) noise, with
/// gaps carved by a run-length process (gap lengths uniform on
/// `1..=2*mean-1`).
pub fn generate_patient(profile: &SynthProfile, patient_id: &str) -> Result<GlucoseSeries> {
    profile.validate()?;
    let n = profile.days * SLOTS_PER_DAY;
    let meals = meal_schedule(profile, &mut GaussianStream::with_stream(profile.seed, 0));
    let mut noise_rng = GaussianStream::with_stream(profile.seed, 1);
    let mut gap_rng = GaussianStream::with_stream(profile.seed, 2);

    let phi = profile.ar_coefficient;
    let sigma = profile.innovation_scale;
    let mut ar = sigma / libm::sqrt(1.0 - phi * phi) * noise_rng.next_gaussian();
    let decay_slots = profile.meal_decay_minutes / SLOT_MINUTES as f64;
    let mut gap_left = 0usize;
    let max_gap = (2.0 * profile.mean_gap_length - 1.0).round().max(1.0) as u64;

    let mut values = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            ar = phi * ar + sigma * noise_rng.next_gaussian();
        }
        let minutes = (t as i64 * SLOT_MINUTES) as f64;
        let circadian = profile.circadian_amplitude
            * libm::sin(2.0 * std::f64::consts::PI * minutes / 1440.0 + profile.circadian_phase);
        let meal: f64 = meals
            .iter()
            .filter(|(onset, _)| *onset <= t)
            .map(|(onset, mag)| mag * libm::exp(-((t - onset) as f64) / decay_slots))
            .sum();
        let v = (profile.baseline + circadian + meal + ar).clamp(MIN_GLUCOSE, MAX_GLUCOSE);
        let v = (v * 1000.0).round() / 1000.0;

        if gap_left == 0 && gap_rng.next_uniform() < profile.gap_rate {
            gap_left = 1 + (gap_rng.next_u64() % max_gap) as usize;
        }
        if gap_left > 0 {
            gap_left -= 1;
            values.push(None);
        } else {
            values.push(Some(v));
        }
    }
    Ok(GlucoseSeries::new(patient_id, synth_start(), values))
}

pub fn patient_id(index: usize) -> String {
    format!("P{:03}", index + 1)
}

/// `n_patients` profiles jittered from `template` by a stream seeded with
/// `seed`, each with its own derived generator seed.
pub fn cohort_profiles(n_patients: usize, template: &SynthProfile, seed: u64) -> Vec<(String, SynthProfile)> {
    let mut rng = GaussianStream::new(seed);
    (0..n_patients)
        .map(|i| {
            let mut p = template.clone();
            p.baseline *= rng.uniform_in(0.85, 1.15);
            p.circadian_amplitude *= rng.uniform_in(0.5, 1.5);
            p.circadian_phase += rng.uniform_in(-0.8, 0.8);
            p.meal_magnitude *= rng.uniform_in(0.7, 1.3);
            p.ar_coefficient = (p.ar_coefficient + rng.uniform_in(-0.02, 0.02)).clamp(-0.995, 0.995);
            p.innovation_scale *= rng.uniform_in(0.8, 1.2);
            p.gap_rate = (p.gap_rate * rng.uniform_in(0.5, 1.5)).min(0.99);
            p.seed = rng.next_u64();
            (patient_id(i), p)
        })
        .collect()
}

pub fn make_cohort(n_patients: usize, template: &SynthProfile, seed: u64) -> Result<Vec<GlucoseSeries>> {
    if n_patients == 0 {
        return Err(Error::InvalidArgument("cohort needs at least one patient".into()));
    }
    cohort_profiles(n_patients, template, seed).iter().map(|(id, p)| generate_patient(p, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_noise_variance() {
        let x = generate_arma(&[0.0], &[], 0.0, 1.0, 2000, 0).unwrap();
        let mean = x.iter().sum::<f64>() / 2000.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1999.0;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn noiseless_ar_is_geometric() {
        let x = generate_arma_from(&[0.5], &[], 0.0, 0.0, 10, 0, 1.0).unwrap();
        for w in x.windows(2) {
            assert_eq!(w[1], 0.5 * w[0]);
        }
        assert!(x[0] > 0.0);
    }

    #[test]
    fn arma_is_deterministic_and_rejects_explosive() {
        assert_eq!(generate_arma(&[0.3], &[0.2], 0.0, 1.0, 100, 9).unwrap(), generate_arma(&[0.3], &[0.2], 0.0, 1.0, 100, 9).unwrap());
        assert_ne!(generate_arma(&[0.3], &[], 0.0, 1.0, 100, 9).unwrap(), generate_arma(&[0.3], &[], 0.0, 1.0, 100, 10).unwrap());
        assert!(matches!(generate_arma(&[1.1], &[], 0.0, 1.0, 10, 0), Err(Error::Explosive(_))));
        assert!(generate_arma(&[0.5], &[], 0.0, 1.0, 0, 0).is_err());
    }

    #[test]
    fn lag_one_autocorrelation() {
        let x = generate_arma(&[0.7], &[], 0.0, 1.0, 5000, 8).unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let c0: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let c1: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!((c1 / c0 - 0.7).abs() < 0.05);
    }

    #[test]
    fn no_gaps_means_full_series() {
        let p = SynthProfile { gap_rate: 0.0, days: 2, ..Default::default() };
        let s = generate_patient(&p, "X").unwrap();
        assert_eq!(s.present_count(), 2 * 288);
    }

    #[test]
    fn flat_profile_is_constant() {
        let p = SynthProfile {
            circadian_amplitude: 0.0,
            meals_per_day: 0,
            innovation_scale: 0.0,
            gap_rate: 0.0,
            days: 1,
            ..Default::default()
        };
        let s = generate_patient(&p, "X").unwrap();
        assert!(s.present_values().all(|v| v == 7.5));
    }

    #[test]
    fn clipping_and_determinism() {
        let p = SynthProfile { meal_magnitude: 40.0, innovation_scale: 2.0, ..Default::default() };
        let a = generate_patient(&p, "X").unwrap();
        assert!(a.present_values().all(|v| (MIN_GLUCOSE..=MAX_GLUCOSE).contains(&v)));
        assert!(a.present_values().any(|v| v == MAX_GLUCOSE));
        assert_eq!(a, generate_patient(&p, "X").unwrap());
    }

    #[test]
    fn default_cohort_shape_and_availability() {
        let cohort = make_cohort(50, &SynthProfile::default(), 0).unwrap();
        assert_eq!(cohort.len(), 50);
        assert!(cohort.iter().all(|s| s.days() == 14));
        let mean_avail = cohort.iter().map(GlucoseSeries::availability).sum::<f64>() / 50.0;
        assert!(mean_avail >= 0.96, "availability {mean_avail}");
        assert_eq!(make_cohort(1, &SynthProfile::default(), 0).unwrap().len(), 1);
        assert!(make_cohort(0, &SynthProfile::default(), 0).is_err());
    }
}
