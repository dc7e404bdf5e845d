//! Document-adaptive EOS thresholding with a corpus-calibrated factor.
//!
//! A patch is kept when its EOS score exceeds `mu_d + k * sigma_d` for its
//! document. `k` is the `(1 - gamma)` empirical quantile of the pooled
//! per-document z-scores of a calibration sample, which makes the average
//! retention on that sample match `gamma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Population mean and standard deviation of one document's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocStats {
    pub doc_id: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveCalibration {
    pub k_factor: f64,
    pub gamma: f64,
    pub calib_size: usize,
    pub per_doc_stats: Vec<DocStats>,
}

pub fn mean_std(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Quantile with linear interpolation between order statistics at `h = (n - 1) p`.
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("quantile level {p} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Z-scores of a document's scores; all zero when the scores are constant.
pub fn z_scores(scores: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(scores);
    if std == 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - mean) / std).collect()
}

/// Calibrates `k` from per-document EOS scores.
pub fn adaptive_calibrate<'a, I>(docs: I, gamma: f64) -> Result<AdaptiveCalibration>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma {gamma} outside (0, 1]")));
    }
    let mut pool = Vec::new();
    let mut stats = Vec::new();
    for (doc_id, scores) in docs {
        if scores.len() < 2 {
            return Err(Error::invalid(format!(
                "calibration document {doc_id} has {} patches, need at least 2",
                scores.len()
            )));
        }
        let (mean, std) = mean_std(scores);
        pool.extend(z_scores(scores));
        stats.push(DocStats {
            doc_id: doc_id.to_string(),
            mean,
            std,
        });
    }
    if pool.is_empty() {
        return Err(Error::Degenerate("empty calibration pool".into()));
    }
    Ok(AdaptiveCalibration {
        k_factor: quantile(&pool, 1.0 - gamma)?,
        gamma,
        calib_size: stats.len(),
        per_doc_stats: stats,
    })
}

/// Patches whose score exceeds `mean + k * std`; falls back to the single
/// best patch (lowest index on ties) when none qualify.
pub fn adaptive_select(scores: &[f64], k_factor: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to select from"));
    }
    let (mean, std) = mean_std(scores);
    let threshold = mean + k_factor * std;
    let kept: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(j, _)| j)
        .collect();
    if !kept.is_empty() {
        return Ok(kept);
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (j, s)| if *s > scores[b] { j } else { b });
    Ok(vec![best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn hand_quantile() {
        let pool = [-1.5, -0.5, 0.5, 1.5];
        assert!((quantile(&pool, 0.75).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(quantile(&pool, 0.0).unwrap(), -1.5);
        assert_eq!(quantile(&pool, 1.0).unwrap(), 1.5);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn calibrate_from_known_pool() {
        // two docs whose z-scores are exactly {-1, 1}: pool {-1,-1,1,1}
        let a = [0.0, 2.0];
        let b = [5.0, 7.0];
        let cal = adaptive_calibrate([("a", &a[..]), ("b", &b[..])], 0.25).unwrap();
        // h = 3 * 0.75 = 2.25 -> 1.0
        assert!((cal.k_factor - 1.0).abs() < 1e-12);
        assert_eq!(cal.calib_size, 2);
        assert_eq!(cal.per_doc_stats[1].mean, 6.0);

        let full = adaptive_calibrate([("a", &a[..]), ("b", &b[..])], 1.0).unwrap();
        assert!((full.k_factor + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_doc_contributes_zeros() {
        let flat = [0.2; 4];
        let cal = adaptive_calibrate([("flat", &flat[..])], 0.5).unwrap();
        assert_eq!(cal.k_factor, 0.0);
        assert_eq!(cal.per_doc_stats[0].std, 0.0);
    }

    #[test]
    fn calibrate_rejects_bad_input() {
        let one = [1.0];
        assert!(adaptive_calibrate([("x", &one[..])], 0.1).is_err());
        assert!(adaptive_calibrate(std::iter::empty::<(&str, &[f64])>(), 0.1).is_err());
        let two = [1.0, 2.0];
        assert!(adaptive_calibrate([("x", &two[..])], 0.0).is_err());
    }

    #[test]
    fn select_hand_threshold() {
        assert_eq!(adaptive_select(&[0.0, 0.0, 10.0], 1.0).unwrap(), vec![2]);
        assert_eq!(adaptive_select(&[0.0, 0.0, 10.0], -1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(adaptive_select(&[0.0, 3.0, 10.0, 10.0], 1e9).unwrap(), vec![2]);
        assert_eq!(adaptive_select(&[1.0; 5], 0.0).unwrap(), vec![0]);
    }

    #[test]
    fn gaussian_corpus_retention_matches_gamma() {
        let gamma = 0.10;
        let mut r = rng::stream(2024, "adaptive-mc");
        let docs: Vec<(String, Vec<f64>)> = (0..128)
            .map(|d| {
                let n = 64;
                let mu = rng::unit_f64(&mut r) * 3.0;
                let sd = 0.5 + rng::unit_f64(&mut r);
                let s = (0..n)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut r);
                        mu + sd * g
                    })
                    .collect();
                (format!("d{d}"), s)
            })
            .collect();
        let cal =
            adaptive_calibrate(docs.iter().map(|(id, s)| (id.as_str(), s.as_slice())), gamma).unwrap();
        let mean_ret: f64 = docs
            .iter()
            .map(|(_, s)| adaptive_select(s, cal.k_factor).unwrap().len() as f64 / s.len() as f64)
            .sum::<f64>()
            / docs.len() as f64;
        assert!((mean_ret - gamma).abs() <= 0.02, "retention {mean_ret}");
    }
}
