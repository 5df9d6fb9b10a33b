//! Training objectives over posterior vectors and evaluation cost metrics.

use serde::{Deserialize, Serialize};

use super::ClassifierError;

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cce,
    Afl,
    TimeConstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Per-class focusing exponents; empty means all zero.
    pub gamma: Vec<f64>,
    pub alpha: f64,
    /// Misclassification costs `c(true, predicted)`; empty means 0/1 cost.
    pub cost_matrix: Vec<Vec<f64>>,
    /// Per-class intrusion costs; empty means 1 for every class.
    pub intrusion_costs: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Cce,
            gamma: Vec::new(),
            alpha: 1.0,
            cost_matrix: Vec::new(),
            intrusion_costs: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self, classes: usize) -> Result<(), ClassifierError> {
        let bad = |m: String| Err(ClassifierError::Loss(m));
        if !self.gamma.is_empty() && self.gamma.len() != classes {
            return bad(format!("gamma has {} entries for {classes} classes", self.gamma.len()));
        }
        if self.gamma.iter().any(|g| !(*g >= 0.0)) {
            return bad("gamma must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !self.cost_matrix.is_empty() {
            if self.cost_matrix.len() != classes || self.cost_matrix.iter().any(|r| r.len() != classes) {
                return bad(format!("cost matrix must be {classes}x{classes}"));
            }
            for (i, row) in self.cost_matrix.iter().enumerate() {
                if row.iter().any(|c| !(*c >= 0.0)) || row[i] != 0.0 {
                    return bad("cost matrix must be nonnegative with zero diagonal".into());
                }
            }
        }
        if !self.intrusion_costs.is_empty() && self.intrusion_costs.len() != classes {
            return bad(format!(
                "{} intrusion costs for {classes} classes",
                self.intrusion_costs.len()
            ));
        }
        Ok(())
    }

    pub fn gamma_for(&self, class: usize) -> f64 {
        self.gamma.get(class).copied().unwrap_or(0.0)
    }

    /// The configured cost matrix, or unit off-diagonal costs.
    pub fn costs(&self, classes: usize) -> Vec<Vec<f64>> {
        if self.cost_matrix.is_empty() {
            (0..classes)
                .map(|i| (0..classes).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
                .collect()
        } else {
            self.cost_matrix.clone()
        }
    }

    pub fn intrusion_costs(&self, classes: usize) -> Vec<f64> {
        if self.intrusion_costs.is_empty() {
            vec![1.0; classes]
        } else {
            self.intrusion_costs.clone()
        }
    }

    /// Loss of one sample; `tau` and `t_int` only matter for the
    /// time-constrained objective.
    pub fn loss(&self, y: &[f64], y_hat: &[f64], tau: f64, t_int: f64) -> Result<f64, ClassifierError> {
        Ok(match self.kind {
            LossKind::Cce => loss_cce(y, y_hat),
            LossKind::Afl => loss_afl(y, y_hat, &self.gamma),
            LossKind::TimeConstrained => loss_time_constrained(y, y_hat, tau, t_int, self.alpha)?,
        })
    }

    /// Derivative of the per-sample loss with respect to the posterior.
    pub fn grad_posterior(&self, y: &[f64], y_hat: &[f64]) -> Vec<f64> {
        match self.kind {
            LossKind::Cce => grad_afl(y, y_hat, &[]),
            LossKind::Afl => grad_afl(y, y_hat, &self.gamma),
            LossKind::TimeConstrained => grad_afl(y, y_hat, &[]).into_iter().map(|g| self.alpha * g).collect(),
        }
    }
}

/// Categorical cross entropy `-sum y_l log y_hat_l`.
pub fn loss_cce(y: &[f64], y_hat: &[f64]) -> f64 {
    -y.iter()
        .zip(y_hat)
        .filter(|(yl, _)| **yl != 0.0)
        .map(|(yl, p)| yl * p.max(LOG_CLAMP).ln())
        .sum::<f64>()
}

/// Asymmetric focal loss `-sum y_l (1 - y_hat_l)^gamma_l log y_hat_l`.
/// A zero exponent contributes a factor of exactly 1.
pub fn loss_afl(y: &[f64], y_hat: &[f64], gamma: &[f64]) -> f64 {
    -y.iter()
        .zip(y_hat)
        .enumerate()
        .filter(|(_, (yl, _))| **yl != 0.0)
        .map(|(l, (yl, p))| {
            let g = gamma.get(l).copied().unwrap_or(0.0);
            let focus = if g == 0.0 { 1.0 } else { (1.0 - p).max(0.0).powf(g) };
            yl * focus * p.max(LOG_CLAMP).ln()
        })
        .sum::<f64>()
}

/// `alpha * CCE + (1 - alpha) * tau / t_int`, with `tau / inf = 0`.
pub fn loss_time_constrained(
    y: &[f64],
    y_hat: &[f64],
    tau: f64,
    t_int: f64,
    alpha: f64,
) -> Result<f64, ClassifierError> {
    Ok(alpha * loss_cce(y, y_hat) + (1.0 - alpha) * time_ratio(tau, t_int)?)
}

pub fn time_ratio(tau: f64, t_int: f64) -> Result<f64, ClassifierError> {
    if t_int.is_infinite() {
        Ok(0.0)
    } else if t_int <= 0.0 {
        Err(ClassifierError::Loss(format!(
            "intrusion time {t_int} must be positive"
        )))
    } else {
        Ok(tau / t_int)
    }
}

fn grad_afl(y: &[f64], y_hat: &[f64], gamma: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(y_hat)
        .enumerate()
        .map(|(l, (yl, p))| {
            if *yl == 0.0 || *p < LOG_CLAMP {
                return 0.0;
            }
            let g = gamma.get(l).copied().unwrap_or(0.0);
            if g == 0.0 {
                -yl / p
            } else {
                let q = (1.0 - p).max(0.0);
                let focus_grad = if q > 0.0 { g * q.powf(g - 1.0) * p.ln() } else { 0.0 };
                -yl * (q.powf(g) / p - focus_grad)
            }
        })
        .collect()
}

/// `sum_{l, l'} c(l, l') * Pr(y in l, y_hat in l')` with probabilities from
/// confusion counts indexed `[true][predicted]`.
pub fn expected_misclassification_cost(confusion: &[Vec<u64>], cost_matrix: &[Vec<f64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    confusion
        .iter()
        .zip(cost_matrix)
        .flat_map(|(counts, costs)| counts.iter().zip(costs).map(|(n, c)| c * *n as f64))
        .sum::<f64>()
        / total as f64
}

/// `sum_l c_l^int * (fraction of class-l samples whose intrusion flag is set)`.
/// Classes without samples contribute nothing.
pub fn intrusion_cost_metric(samples: &[(usize, bool)], intrusion_costs: &[f64]) -> f64 {
    intrusion_costs
        .iter()
        .enumerate()
        .map(|(l, c)| {
            let (n, hits) = samples
                .iter()
                .filter(|(class, _)| *class == l)
                .fold((0usize, 0usize), |(n, h), (_, flag)| (n + 1, h + *flag as usize));
            if n == 0 {
                0.0
            } else {
                c * hits as f64 / n as f64
            }
        })
        .sum()
}
