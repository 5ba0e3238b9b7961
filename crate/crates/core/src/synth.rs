//! Synthetic longitudinal cohorts with a known proportional-hazards truth.
//!
//! Each subject has static covariates, categorical covariates, and
//! longitudinal covariates that drift linearly (`baseline + slope * t`), with
//! optional measurement noise. The linear predictor is
//! `eta = x0 . true_beta + slope . slope_beta` and the time to event after the
//! last predictor visit is Weibull with `S(t) = exp(-(t/scale)^shape * e^eta)`.
//! Outcomes are measured from baseline, so every event falls after the last
//! visit used as a predictor.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CohortSchema, CohortTable, SubjectRecord, Visit};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

/// Extra measurement noise for subjects whose static covariate exceeds a
/// threshold (a constructed heterogeneous subgroup).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisySubgroup {
    pub static_index: usize,
    pub threshold: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Static numeric covariates (never drift).
    pub n_static: usize,
    /// Longitudinal numeric covariates.
    pub n_numeric: usize,
    pub n_categorical: usize,
    pub categorical_levels: usize,
    /// Coefficients on baseline covariates, ordered static, longitudinal,
    /// categorical (level code). Empty means all zero.
    pub true_beta: Vec<f64>,
    /// Coefficients on per-month slopes of the longitudinal covariates.
    pub slope_beta: Vec<f64>,
    pub slope_sd: f64,
    pub baseline_hazard_scale: f64,
    pub baseline_hazard_shape: f64,
    pub censor_rate: f64,
    pub missing_rate: f64,
    pub visit_times: Vec<f64>,
    pub visit_jitter_sd: f64,
    /// Gaussian measurement noise on every longitudinal observation.
    pub noise_sd: f64,
    pub noisy_subgroup: Option<NoisySubgroup>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 500,
            n_static: 1,
            n_numeric: 4,
            n_categorical: 1,
            categorical_levels: 3,
            true_beta: Vec::new(),
            slope_beta: Vec::new(),
            slope_sd: 1.0,
            baseline_hazard_scale: 60.0,
            baseline_hazard_shape: 1.5,
            censor_rate: 0.3,
            missing_rate: 0.0,
            visit_times: vec![0.0, 6.0, 12.0],
            visit_jitter_sd: 0.0,
            noise_sd: 0.0,
            noisy_subgroup: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_baseline(&self) -> usize {
        self.n_static + self.n_numeric + self.n_categorical
    }

    pub fn static_names(&self) -> Vec<String> {
        (1..=self.n_static).map(|k| format!("s{k}")).collect()
    }

    pub fn numeric_names(&self) -> Vec<String> {
        (1..=self.n_numeric).map(|k| format!("x{k}")).collect()
    }

    pub fn categorical_names(&self) -> Vec<String> {
        (1..=self.n_categorical).map(|k| format!("c{k}")).collect()
    }

    /// Schema matching the CSV `generate` writes.
    pub fn schema(&self) -> CohortSchema {
        CohortSchema {
            categorical: self.categorical_names(),
            static_covariates: self.static_names(),
            ..CohortSchema::default()
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive");
        }
        if self.n_baseline() == 0 {
            return bad("at least one covariate is required");
        }
        if !self.true_beta.is_empty() && self.true_beta.len() != self.n_baseline() {
            return bad("true_beta length must equal n_static + n_numeric + n_categorical");
        }
        if !self.slope_beta.is_empty() && self.slope_beta.len() != self.n_numeric {
            return bad("slope_beta length must equal n_numeric");
        }
        if self.n_categorical > 0 && self.categorical_levels < 2 {
            return bad("categorical_levels must be at least 2");
        }
        if !(self.baseline_hazard_scale > 0.0 && self.baseline_hazard_shape > 0.0) {
            return bad("Weibull scale and shape must be positive");
        }
        if !(0.0..1.0).contains(&self.censor_rate) || !(0.0..1.0).contains(&self.missing_rate) {
            return bad("censor_rate and missing_rate must lie in [0, 1)");
        }
        if self.visit_times.first() != Some(&0.0)
            || self.visit_times.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("visit_times must start at 0 and increase strictly");
        }
        if self.visit_jitter_sd < 0.0 || self.noise_sd < 0.0 || self.slope_sd < 0.0 {
            return bad("standard deviations must be nonnegative");
        }
        if let Some(g) = &self.noisy_subgroup {
            if g.static_index >= self.n_static || g.noise_sd < 0.0 {
                return bad("noisy_subgroup must reference a static covariate");
            }
        }
        Ok(())
    }
}

/// What the generator knows that the cohort does not reveal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ids: Vec<String>,
    pub eta: Vec<f64>,
    /// True per-month slopes, `[subject][longitudinal covariate]`.
    pub slopes: Vec<Vec<f64>>,
    /// Time of the last predictor visit; the Weibull clock starts here.
    pub landmark: Vec<f64>,
    /// Uncensored event time measured from baseline.
    pub latent_event_time: Vec<f64>,
    pub true_beta: Vec<f64>,
    pub slope_beta: Vec<f64>,
    pub censor_hazard: f64,
    pub achieved_censoring: f64,
}

/// Censoring hazard `c` such that `mean(1 - exp(-c * t_i)) = target`.
fn solve_censor_hazard(latent: &[f64], target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let frac = |c: f64| latent.iter().map(|t| 1.0 - (-c * t).exp()).sum::<f64>() / latent.len() as f64;
    let (mut lo, mut hi) = (1e-12_f64, 1.0_f64);
    while frac(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

pub fn generate(cfg: &SynthConfig) -> Result<(CohortTable, GroundTruth), SynthError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "synth");
    let n = cfg.n_subjects;
    let zeros = |k| vec![0.0; k];
    let true_beta = if cfg.true_beta.is_empty() { zeros(cfg.n_baseline()) } else { cfg.true_beta.clone() };
    let slope_beta = if cfg.slope_beta.is_empty() { zeros(cfg.n_numeric) } else { cfg.slope_beta.clone() };
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
    let jitter = Normal::new(0.0, cfg.visit_jitter_sd).expect("validated sd");

    struct Draft {
        statics: Vec<f64>,
        x0: Vec<f64>,
        slopes: Vec<f64>,
        cats: Vec<f64>,
        times: Vec<f64>,
        eta: f64,
        latent_after_landmark: f64,
    }

    let mut drafts = Vec::with_capacity(n);
    for _ in 0..n {
        let statics: Vec<f64> = (0..cfg.n_static).map(|_| rng.sample(StandardNormal)).collect();
        let x0: Vec<f64> = (0..cfg.n_numeric).map(|_| rng.sample(StandardNormal)).collect();
        let slopes: Vec<f64> = (0..cfg.n_numeric)
            .map(|_| cfg.slope_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let cats: Vec<f64> = (0..cfg.n_categorical)
            .map(|_| rng.random_range(0..cfg.categorical_levels) as f64)
            .collect();
        let mut times = Vec::with_capacity(cfg.visit_times.len());
        times.push(0.0);
        for &nominal in &cfg.visit_times[1..] {
            let prev = *times.last().expect("baseline pushed");
            let t = if cfg.visit_jitter_sd > 0.0 { nominal + jitter.sample(&mut rng) } else { nominal };
            // keep visits strictly ordered under heavy jitter
            times.push(t.max(prev + 0.1));
        }
        let eta = statics
            .iter()
            .chain(&x0)
            .chain(&cats)
            .zip(&true_beta)
            .map(|(x, b)| x * b)
            .sum::<f64>()
            + slopes.iter().zip(&slope_beta).map(|(s, b)| s * b).sum::<f64>();
        // inverse-CDF draw: (t/scale)^shape * e^eta = -ln U
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let latent = cfg.baseline_hazard_scale * (-u.ln() * (-eta).exp()).powf(1.0 / cfg.baseline_hazard_shape);
        drafts.push(Draft {
            statics,
            x0,
            slopes,
            cats,
            times,
            eta,
            latent_after_landmark: latent.max(1e-9),
        });
    }

    let latent: Vec<f64> = drafts.iter().map(|d| d.latent_after_landmark).collect();
    let censor_hazard = solve_censor_hazard(&latent, cfg.censor_rate);
    let censor_dist = (censor_hazard > 0.0).then(|| Exp::new(censor_hazard).expect("positive rate"));

    let static_names = cfg.static_names();
    let mut covariate_names = static_names.clone();
    covariate_names.extend(cfg.numeric_names());
    covariate_names.extend(cfg.categorical_names());

    let mut subjects = Vec::with_capacity(n);
    let mut truth = GroundTruth {
        ids: Vec::with_capacity(n),
        eta: Vec::with_capacity(n),
        slopes: Vec::with_capacity(n),
        landmark: Vec::with_capacity(n),
        latent_event_time: Vec::with_capacity(n),
        true_beta: true_beta.clone(),
        slope_beta: slope_beta.clone(),
        censor_hazard,
        achieved_censoring: 0.0,
    };
    let mut n_censored = 0usize;
    let width = covariate_names.len();
    for (i, d) in drafts.into_iter().enumerate() {
        let id = format!("S{:05}", i + 1);
        let censor = censor_dist.map(|e| e.sample(&mut rng)).unwrap_or(f64::INFINITY);
        let event = d.latent_after_landmark <= censor;
        if !event {
            n_censored += 1;
        }
        let landmark = *d.times.last().expect("at least baseline");
        let observed = landmark + d.latent_after_landmark.min(censor).max(1e-6);

        let extra_sd = cfg
            .noisy_subgroup
            .as_ref()
            .filter(|g| d.statics[g.static_index] > g.threshold)
            .map(|g| g.noise_sd)
            .unwrap_or(0.0);
        // per-subject MCAR holes for covariates that do not vary by visit
        let static_missing: Vec<bool> = (0..cfg.n_static + cfg.n_categorical)
            .map(|_| rng.random::<f64>() < cfg.missing_rate)
            .collect();
        let mut visits = Vec::with_capacity(d.times.len());
        for &t in &d.times {
            let mut values: Vec<Option<f64>> = Vec::with_capacity(width);
            values.extend(d.statics.iter().map(|&v| Some(v)));
            for j in 0..cfg.n_numeric {
                let mut v = d.x0[j] + d.slopes[j] * t;
                if cfg.noise_sd > 0.0 {
                    v += noise.sample(&mut rng);
                }
                if extra_sd > 0.0 {
                    v += extra_sd * rng.sample::<f64, _>(StandardNormal);
                }
                let hole = cfg.missing_rate > 0.0 && rng.random::<f64>() < cfg.missing_rate;
                values.push((!hole).then_some(v));
            }
            values.extend(d.cats.iter().map(|&c| Some(c)));
            for (k, missing) in static_missing.iter().enumerate() {
                if *missing {
                    let col = if k < cfg.n_static { k } else { cfg.n_numeric + k };
                    values[col] = None;
                }
            }
            visits.push(Visit { time_months: t, values });
        }
        truth.ids.push(id.clone());
        truth.eta.push(d.eta);
        truth.slopes.push(d.slopes);
        truth.landmark.push(landmark);
        truth.latent_event_time.push(landmark + d.latent_after_landmark);
        subjects.push(SubjectRecord {
            id,
            visits,
            event_time_months: observed,
            event,
        });
    }
    truth.achieved_censoring = n_censored as f64 / n as f64;

    let cohort = CohortTable::new(subjects, covariate_names, cfg.categorical_names(), static_names)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    Ok((cohort, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_missing_when_rate_zero() {
        let (c, _) = generate(&SynthConfig::default()).unwrap();
        assert_eq!(c.n_missing(), 0);
        assert_eq!(c.len(), 500);
    }

    #[test]
    fn missing_rate_punches_holes() {
        let cfg = SynthConfig {
            missing_rate: 0.2,
            ..SynthConfig::default()
        };
        let (c, _) = generate(&cfg).unwrap();
        let cells = c.len() * 3 * c.covariate_names().len();
        let frac = c.n_missing() as f64 / cells as f64;
        assert!((frac - 0.2).abs() < 0.03, "missing fraction {frac}");
    }

    #[test]
    fn same_seed_same_cohort() {
        let cfg = SynthConfig {
            missing_rate: 0.1,
            visit_jitter_sd: 1.0,
            noise_sd: 0.3,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn achieved_censoring_near_target() {
        for &rate in &[0.1, 0.3, 0.6] {
            let cfg = SynthConfig {
                n_subjects: 2000,
                censor_rate: rate,
                true_beta: vec![0.5, 1.0, 0.0, 0.0, -0.5, 0.3],
                seed: 3,
                ..SynthConfig::default()
            };
            let (c, truth) = generate(&cfg).unwrap();
            let censored = c.subjects().iter().filter(|s| !s.event).count() as f64 / 2000.0;
            assert_eq!(censored, truth.achieved_censoring);
            assert!((censored - rate).abs() < 0.05, "rate {rate}: got {censored}");
        }
    }

    #[test]
    fn noiseless_drift_is_linear() {
        let cfg = SynthConfig {
            n_subjects: 20,
            slope_sd: 0.25,
            ..SynthConfig::default()
        };
        let (c, truth) = generate(&cfg).unwrap();
        let j = c.covariate_index("x2").unwrap();
        for (s, slopes) in c.subjects().iter().zip(&truth.slopes) {
            let v0 = s.visits[0].values[j].unwrap();
            let v2 = s.visits[2].values[j].unwrap();
            assert!((v2 - v0 - 12.0 * slopes[1]).abs() < 1e-12);
            assert!(s.event_time_months > s.visits[2].time_months);
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        let cfg = SynthConfig {
            true_beta: vec![1.0],
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(SynthError::InvalidConfig(_))));
        let cfg = SynthConfig {
            visit_times: vec![1.0, 6.0],
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
