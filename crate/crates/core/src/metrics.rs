//! Linear and rank correlation between ground-truth and predicted scores.
//! All arithmetic is in f64.

use crate::error::{Error, Result};

/// 1-based ranks; tied values share the mean of the positions they span.
pub fn rank(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j, averaged.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn check(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "series lengths differ: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    if truth.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("series contain non-finite values".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check(truth, pred)?;
    let n = truth.len() as f64;
    let (mt, mp) = (truth.iter().sum::<f64>() / n, pred.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(pred) {
        let (a, b) = (t - mt, p - mp);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation. Uses `1 - 6 Σd² / (N(N²-1))` when neither
/// series has ties, and the Pearson correlation of the ranks otherwise.
pub fn srocc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check(truth, pred)?;
    let (rt, rp) = (rank(truth), rank(pred));
    let n = truth.len();
    let tie_free = |r: &[f64]| r.iter().all(|v| v.fract() == 0.0) && distinct(r);
    if tie_free(&rt) && tie_free(&rp) {
        let d2: f64 = rt.iter().zip(&rp).map(|(a, b)| (a - b) * (a - b)).sum();
        let n = n as f64;
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    if rt.iter().all(|&r| r == rt[0]) || rp.iter().all(|&r| r == rp[0]) {
        return Err(Error::UndefinedCorrelation("all values are tied"));
    }
    plcc(&rt, &rp)
}

fn distinct(r: &[f64]) -> bool {
    let mut v = r.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).all(|w| w[0] != w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(rank(&[10.0, 20.0, 30.0]), [1.0, 2.0, 3.0]);
        assert_eq!(rank(&[5.0, 5.0, 7.0]), [1.5, 1.5, 3.0]);
        assert!((srocc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        let want = 3.0 / (2.0f64 * (14.0 / 3.0)).sqrt();
        assert!((plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.98198).abs() < 1e-5);
    }

    #[test]
    fn perfect_and_reversed() {
        let s: Vec<f64> = (0..10).map(|i| i as f64 * 1.5).collect();
        let neg: Vec<f64> = s.iter().map(|v| -2.0 * v + 7.0).collect();
        assert!((plcc(&s, &s).unwrap() - 1.0).abs() < 1e-12);
        assert!((plcc(&s, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(srocc(&s, &neg).unwrap(), -1.0);
    }

    #[test]
    fn degenerate_series_error() {
        assert!(matches!(
            plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            srocc(&[2.0; 4], &[1.0, 2.0, 3.0, 4.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(plcc(&[1.0], &[1.0]).is_err());
        assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
    }
}
