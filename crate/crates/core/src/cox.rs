//! Cox partial likelihood shared by every learner.
//!
//! Risk sets follow the Breslow convention: the risk set of an event at
//! `t_i` is every subject with `t_j >= t_i`, tied events included.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("no events: the partial likelihood is undefined")]
    NoEvents,
    #[error("length mismatch: {0} scores, {1} times, {2} events")]
    LengthMismatch(usize, usize, usize),
}

/// Subjects ordered by descending time, grouped by tied times.
#[derive(Debug, Clone)]
pub struct RiskOrder {
    pub desc: Vec<usize>,
    /// Half-open ranges into `desc`, one per distinct time, latest first.
    pub groups: Vec<(usize, usize)>,
    pub n_events: usize,
}

impl RiskOrder {
    pub fn new(time: &[f64], event: &[bool]) -> Self {
        let mut desc: Vec<usize> = (0..time.len()).collect();
        desc.sort_by(|&a, &b| time[b].total_cmp(&time[a]).then(a.cmp(&b)));
        let mut groups = Vec::new();
        let mut start = 0;
        for k in 1..=desc.len() {
            if k == desc.len() || time[desc[k]] != time[desc[start]] {
                groups.push((start, k));
                start = k;
            }
        }
        let n_events = event.iter().filter(|e| **e).count();
        Self { desc, groups, n_events }
    }

    /// `log sum_{j in R(t_i)} exp(eta_j)` for every subject, accumulated as a
    /// streaming log-sum-exp so that late, low-score risk sets do not
    /// underflow.
    pub fn log_risk_sums(&self, eta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; eta.len()];
        let (mut top, mut sum) = (f64::NEG_INFINITY, 0.0);
        for &(a, b) in &self.groups {
            for &i in &self.desc[a..b] {
                let v = eta[i];
                if v > top {
                    sum = sum * (top - v).exp() + 1.0;
                    top = v;
                } else {
                    sum += (v - top).exp();
                }
            }
            let log_s = top + sum.ln();
            for &i in &self.desc[a..b] {
                out[i] = log_s;
            }
        }
        out
    }
}

fn check(eta: &[f64], time: &[f64], event: &[bool]) -> Result<(), CoxError> {
    if eta.len() != time.len() || eta.len() != event.len() {
        return Err(CoxError::LengthMismatch(eta.len(), time.len(), event.len()));
    }
    if !event.iter().any(|e| *e) {
        return Err(CoxError::NoEvents);
    }
    Ok(())
}

/// Negative log partial likelihood
/// `-sum_i d_i [eta_i - log sum_{j: t_j >= t_i} exp(eta_j)]`.
pub fn cox_nll(eta: &[f64], time: &[f64], event: &[bool]) -> Result<f64, CoxError> {
    check(eta, time, event)?;
    let order = RiskOrder::new(time, event);
    Ok(nll_with_order(&order, eta, event))
}

pub fn nll_with_order(order: &RiskOrder, eta: &[f64], event: &[bool]) -> f64 {
    let log_s = order.log_risk_sums(eta);
    eta.iter()
        .zip(event)
        .zip(&log_s)
        .filter(|((_, e), _)| **e)
        .map(|((f, _), ls)| ls - f)
        .sum()
}

/// Gradient and diagonal Hessian of [`cox_nll`] with respect to `eta`.
///
/// Every subject accumulates a share from each event whose risk set
/// contains it:
/// `g_k = -d_k + e^{eta_k} sum_{i: d_i, t_i <= t_k} 1/S_i` and
/// `h_k = e^{eta_k} sum 1/S_i - e^{2 eta_k} sum 1/S_i^2`.
/// For a single event this is the familiar
/// `exp(eta_k)/S - d_k` with curvature `p(1-p)`, i.e. the likelihood-ascent
/// form `d_k - exp(eta_k)/S` with the sign flipped for minimization.
pub fn cox_grad_hess(eta: &[f64], time: &[f64], event: &[bool]) -> Result<(Vec<f64>, Vec<f64>), CoxError> {
    check(eta, time, event)?;
    let order = RiskOrder::new(time, event);
    Ok(grad_hess_with_order(&order, eta, event))
}

pub fn grad_hess_with_order(order: &RiskOrder, eta: &[f64], event: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let n = eta.len();
    let log_s = order.log_risk_sums(eta);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    // walk groups from earliest to latest time, accumulating in log space
    let (mut log_acc1, mut log_acc2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(a, b) in order.groups.iter().rev() {
        for &i in &order.desc[a..b] {
            if event[i] {
                log_acc1 = log_add_exp(log_acc1, -log_s[i]);
                log_acc2 = log_add_exp(log_acc2, -2.0 * log_s[i]);
            }
        }
        for &k in &order.desc[a..b] {
            let share = (eta[k] + log_acc1).exp();
            let square = (2.0 * eta[k] + log_acc2).exp();
            g[k] = share - if event[k] { 1.0 } else { 0.0 };
            h[k] = (share - square).max(0.0);
        }
    }
    (g, h)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_subject_hand_values() {
        let nll = cox_nll(&[0.0, 0.0], &[1.0, 2.0], &[true, false]).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-15);
        let (g, h) = cox_grad_hess(&[0.0, 0.0], &[1.0, 2.0], &[true, false]).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
        assert_eq!(h, vec![0.25, 0.25]);
    }

    #[test]
    fn no_events() {
        assert_eq!(cox_nll(&[0.0], &[1.0], &[false]), Err(CoxError::NoEvents));
        assert_eq!(cox_grad_hess(&[0.0], &[1.0], &[false]).unwrap_err(), CoxError::NoEvents);
    }

    #[test]
    fn ties_share_risk_set() {
        // two tied events at t=1 both see the full set {0, 1, 2}
        let eta = [0.3, -0.2, 0.5];
        let nll = cox_nll(&eta, &[1.0, 1.0, 2.0], &[true, true, false]).unwrap();
        let s: f64 = eta.iter().map(|e: &f64| e.exp()).sum();
        let expect = 2.0 * s.ln() - eta[0] - eta[1];
        assert!((nll - expect).abs() < 1e-12);
    }

    #[test]
    fn large_scores_stay_finite() {
        let eta = [800.0, 790.0, -50.0];
        let nll = cox_nll(&eta, &[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert!(nll.is_finite());
        let (g, h) = cox_grad_hess(&eta, &[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert!(g.iter().chain(&h).all(|v| v.is_finite()));
    }
}
