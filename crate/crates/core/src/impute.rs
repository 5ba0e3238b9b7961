//! Multiple imputation by chained equations and Rubin's-rules pooling.
//!
//! Each incomplete column is regressed on every other column with a
//! conjugate normal-inverse-gamma Bayesian linear regression. One posterior
//! draw of `(beta, sigma^2)` per sweep replaces the missing cells with
//! `z_i . beta + N(0, sigma^2)`. Missing cells are marked with NaN.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::linalg::{cholesky, solve_lower, solve_upper_t};
use crate::seed::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputeError {
    #[error("column {0} has no observed values to regress on")]
    NoCompletePredictors(usize),
    #[error("column {0}: regression design is singular even after the ridge fallback")]
    SingularDesign(usize),
    #[error("pooling needs at least two estimates, got {0}")]
    TooFewImputations(usize),
    #[error("variance estimates must be nonnegative and finite")]
    InvalidVariance,
    #[error("confidence level must lie in (0, 1)")]
    InvalidLevel,
    #[error("m must be at least 1")]
    ZeroImputations,
}

/// Weak conjugate prior: precision `PRIOR_PRECISION * I` on the coefficients,
/// inverse-gamma `(PRIOR_SHAPE, PRIOR_RATE)` on the residual variance.
pub const PRIOR_PRECISION: f64 = 1e-6;
pub const PRIOR_SHAPE: f64 = 1e-3;
pub const PRIOR_RATE: f64 = 1e-3;
pub const RIDGE_FALLBACK: f64 = 1e-8;
pub const DEFAULT_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSet {
    pub datasets: Vec<Array2<f64>>,
    pub m: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// Columns with missing cells in sweep order: fewest missing first.
fn sweep_order(mask: &Array2<bool>) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = mask
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(j, c)| (j, c.iter().filter(|m| **m).count()))
        .filter(|(_, k)| *k > 0)
        .collect();
    cols.sort_by_key(|&(j, k)| (k, j));
    cols.into_iter().map(|(j, _)| j).collect()
}

pub fn mice(data: &Array2<f64>, m: usize, iterations: usize, seed: u64) -> Result<ImputationSet, ImputeError> {
    if m == 0 {
        return Err(ImputeError::ZeroImputations);
    }
    let mask = data.mapv(|v| !v.is_finite());
    let order = sweep_order(&mask);
    let n = data.nrows();
    for &j in &order {
        if mask.column(j).iter().all(|m| *m) || n == 0 {
            return Err(ImputeError::NoCompletePredictors(j));
        }
    }
    if order.is_empty() {
        return Ok(ImputationSet {
            datasets: vec![data.clone(); m],
            m,
            iterations,
            seed,
        });
    }
    let datasets = (0..m)
        .into_par_iter()
        .map(|chain| {
            let mut rng = rng_for(seed, &format!("mice/chain/{chain}"));
            run_chain(data, &mask, &order, iterations, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImputationSet {
        datasets,
        m,
        iterations,
        seed,
    })
}

fn run_chain(
    data: &Array2<f64>,
    mask: &Array2<bool>,
    order: &[usize],
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, ImputeError> {
    let (n, p) = data.dim();
    let mut x = data.clone();
    for j in 0..p {
        let observed: Vec<f64> = data.column(j).iter().copied().filter(|v| v.is_finite()).collect();
        let mean = if observed.is_empty() { 0.0 } else { observed.iter().sum::<f64>() / observed.len() as f64 };
        for i in 0..n {
            if mask[[i, j]] {
                x[[i, j]] = mean;
            }
        }
    }
    for _ in 0..iterations {
        for &j in order {
            impute_column(&mut x, mask, j, rng)?;
        }
    }
    Ok(x)
}

/// Design `[1, x_{-j}]` for the given rows.
fn design(x: &Array2<f64>, rows: &[usize], j: usize) -> Array2<f64> {
    let p = x.ncols();
    let mut z = Array2::<f64>::ones((rows.len(), p));
    for (r, &i) in rows.iter().enumerate() {
        let mut c = 1;
        for k in 0..p {
            if k != j {
                z[[r, c]] = x[[i, k]];
                c += 1;
            }
        }
    }
    z
}

/// Posterior draw of `(beta, sigma^2)` for `y ~ N(Z beta, sigma^2)` under the
/// weak normal-inverse-gamma prior.
pub fn draw_posterior(
    z: &Array2<f64>,
    y: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Option<(Array1<f64>, f64)> {
    let k = z.ncols();
    let mut precision = z.t().dot(z);
    for d in 0..k {
        precision[[d, d]] += PRIOR_PRECISION;
    }
    let l = cholesky(&precision).or_else(|| {
        let mut ridged = precision.clone();
        for d in 0..k {
            ridged[[d, d]] += RIDGE_FALLBACK;
        }
        cholesky(&ridged)
    })?;
    let zty = z.t().dot(y);
    let mean = solve_upper_t(&l, &solve_lower(&l, &zty));
    let shape = PRIOR_SHAPE + 0.5 * y.len() as f64;
    let fit = y.dot(y) - mean.dot(&zty);
    let rate = PRIOR_RATE + 0.5 * fit.max(0.0);
    let gamma = Gamma::new(shape, 1.0 / rate).ok()?;
    let sigma2 = 1.0 / gamma.sample(rng);
    let noise: Array1<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let beta = &mean + &(solve_upper_t(&l, &noise) * sigma2.sqrt());
    Some((beta, sigma2))
}

fn impute_column(x: &mut Array2<f64>, mask: &Array2<bool>, j: usize, rng: &mut ChaCha8Rng) -> Result<(), ImputeError> {
    let n = x.nrows();
    let (obs, mis): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| !mask[[i, j]]);
    let z = design(x, &obs, j);
    let y: Array1<f64> = obs.iter().map(|&i| x[[i, j]]).collect();
    let (beta, sigma2) = draw_posterior(&z, &y, rng).ok_or(ImputeError::SingularDesign(j))?;
    let sigma = sigma2.sqrt();
    let zm = design(x, &mis, j);
    let fitted = zm.dot(&beta);
    for (r, &i) in mis.iter().enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        x[[i, j]] = fitted[r] + sigma * eps;
    }
    Ok(())
}

/// Degrees-of-freedom rule for the pooled t interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DfRule {
    /// `nu = (M-1)(1 + 1/r)^2 / (1 + 1/r)`, `r = (1+1/M)B/W`, as printed in
    /// the method description; algebraically `(M-1)(1 + 1/r)`.
    #[default]
    AsPublished,
    /// Rubin (1987): `nu = (M-1)(1 + 1/r)^2`.
    Rubin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub mean: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    /// `f64::INFINITY` when the between-imputation variance is zero.
    #[serde(with = "inf_as_null")]
    pub df: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub m: usize,
    /// `B = 0`: the interval used the normal quantile.
    pub degenerate_between: bool,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn pool(estimates: &[(f64, f64)], level: f64) -> Result<PooledEstimate, ImputeError> {
    pool_with(estimates, level, DfRule::AsPublished)
}

pub fn pool_with(estimates: &[(f64, f64)], level: f64, rule: DfRule) -> Result<PooledEstimate, ImputeError> {
    let m = estimates.len();
    if m < 2 {
        return Err(ImputeError::TooFewImputations(m));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(ImputeError::InvalidLevel);
    }
    if estimates.iter().any(|(t, v)| !t.is_finite() || !v.is_finite() || *v < 0.0) {
        return Err(ImputeError::InvalidVariance);
    }
    let mf = m as f64;
    let mean = estimates.iter().map(|e| e.0).sum::<f64>() / mf;
    let within = estimates.iter().map(|e| e.1).sum::<f64>() / mf;
    let between = estimates.iter().map(|e| (e.0 - mean).powi(2)).sum::<f64>() / (mf - 1.0);
    let inflated = (1.0 + 1.0 / mf) * between;
    let total = within + inflated;
    let degenerate = between == 0.0;
    let df = if degenerate {
        f64::INFINITY
    } else {
        // 1/r = W / ((1 + 1/M) B)
        let inv_r = within / inflated;
        match rule {
            DfRule::AsPublished => (mf - 1.0) * (1.0 + inv_r).powi(2) / (1.0 + inv_r),
            DfRule::Rubin => (mf - 1.0) * (1.0 + inv_r).powi(2),
        }
    };
    let q = quantile(df, 0.5 + level / 2.0);
    let half = q * total.sqrt();
    Ok(PooledEstimate {
        mean,
        within_var: within,
        between_var: between,
        total_var: total,
        df,
        ci_low: mean - half,
        ci_high: mean + half,
        level,
        m,
        degenerate_between: degenerate,
    })
}

/// Upper quantile of Student's t with `df` degrees of freedom (normal when
/// `df` is infinite).
pub fn quantile(df: f64, p: f64) -> f64 {
    if df.is_finite() {
        StudentsT::new(0.0, 1.0, df).expect("df > 0").inverse_cdf(p)
    } else {
        Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_between_variance() {
        let est = vec![(0.9, 0.01); 5];
        let p = pool(&est, 0.95).unwrap();
        assert!((p.mean - 0.9).abs() < 1e-15);
        assert_eq!(p.between_var, 0.0);
        assert!((p.total_var - 0.01).abs() < 1e-15);
        assert!(p.degenerate_between);
        assert!(p.df.is_infinite());
        let z = 1.959_963_984_540_054;
        assert!((p.ci_high - (0.9 + z * 0.1)).abs() < 1e-9);
    }

    #[test]
    fn pool_errors() {
        assert_eq!(pool(&[(1.0, 0.1)], 0.95), Err(ImputeError::TooFewImputations(1)));
        assert_eq!(pool(&[(1.0, -0.1), (1.0, 0.1)], 0.95), Err(ImputeError::InvalidVariance));
        assert_eq!(pool(&[(1.0, 0.1), (1.0, 0.1)], 1.0), Err(ImputeError::InvalidLevel));
    }

    #[test]
    fn zero_within_variance_df_is_m_minus_one() {
        let p = pool(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)], 0.95).unwrap();
        assert!((p.df - 2.0).abs() < 1e-12);
        assert_eq!(p.total_var, p.within_var + (1.0 + 1.0 / 3.0) * p.between_var);
    }

    #[test]
    fn complete_data_gives_identical_copies() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]];
        let set = mice(&x, 4, 10, 1).unwrap();
        assert_eq!(set.datasets.len(), 4);
        assert!(set.datasets.iter().all(|d| d == &x));
    }

    #[test]
    fn all_missing_column_rejected() {
        let x = array![[1.0, f64::NAN], [3.0, f64::NAN]];
        assert_eq!(mice(&x, 2, 5, 0), Err(ImputeError::NoCompletePredictors(1)));
    }

    #[test]
    fn sweep_order_most_missing_last() {
        let mask = array![[true, true, false], [false, true, false], [false, true, true]];
        assert_eq!(sweep_order(&mask), vec![0, 2, 1]);
    }
}
