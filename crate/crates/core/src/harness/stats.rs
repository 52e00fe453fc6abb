//! Learning-curve area and the one-tailed Welch test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Trapezoidal area under `(step, value)` points, in step order.
pub fn auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "AUC needs at least 2 points, got {}",
            points.len()
        )));
    }
    Ok(points
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `mean(a) > mean(b)`.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Upper tail `P(T > t)` of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let half_tail = 0.5 * beta_reg(0.5 * df, 0.5, x);
    if t > 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}

/// Unequal-variance two-sample t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "Welch test needs two samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        return Err(Error::Degenerate("both samples have zero variance".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let p = match alternative {
        Alternative::Greater => student_t_sf(t, df),
        Alternative::Less => student_t_sf(-t, df),
    };
    Ok(WelchResult { t, df, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auc_shapes() {
        assert_eq!(auc(&[(0.0, 3.0), (10.0, 3.0)]).unwrap(), 30.0);
        assert_eq!(auc(&[(0.0, 0.0), (10.0, 10.0)]).unwrap(), 50.0);
        let pts = [(0.0, 1.0), (5.0, 4.0), (7.0, -2.0), (12.0, 0.5)];
        let split = auc(&pts[..3]).unwrap() + auc(&pts[2..]).unwrap();
        assert_abs_diff_eq!(auc(&pts).unwrap(), split, epsilon = 1e-12);
        assert!(auc(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn welch_textbook_case() {
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], Alternative::Greater).unwrap();
        assert_abs_diff_eq!(r.t, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.df, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p, 0.8267032464563329, epsilon = 1e-8);
    }

    #[test]
    fn welch_mirror_symmetry_and_degenerate() {
        let a = [3.1, 2.2, 5.0, 4.4];
        let b = [1.0, 0.5, 2.5];
        let g = welch_t(&a, &b, Alternative::Greater).unwrap();
        let l = welch_t(&b, &a, Alternative::Less).unwrap();
        assert_abs_diff_eq!(g.p, l.p, epsilon = 1e-15);
        assert!(matches!(welch_t(&[1.0, 1.0], &[2.0, 2.0], Alternative::Greater), Err(Error::Degenerate(_))));
        let same = welch_t(&a, &a, Alternative::Greater).unwrap();
        assert_eq!(same.t, 0.0);
        assert_abs_diff_eq!(same.p, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn large_effect_is_significant() {
        let a = [10.0, 11.0, 12.0, 13.0];
        let b = [0.0, 1.0, 2.0, 3.0];
        assert!(welch_t(&a, &b, Alternative::Greater).unwrap().p < 0.05);
    }
}
