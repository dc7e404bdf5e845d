use crate::error::{Error, Result};
use crate::rng;

/// Number of patches kept at ratio `gamma`: `max(1, round_half_up(gamma * n))`, capped at `n`.
pub fn keep_count(gamma: f64, n: usize) -> usize {
    let k = (gamma * n as f64 + 0.5).floor();
    (k.max(1.0) as usize).min(n.max(1))
}

pub(crate) fn check_budget(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("keep count {k} out of range 1..={n}")));
    }
    Ok(())
}

/// Indices of the `k` highest scores, ties going to the lower index, returned ascending.
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    check_budget(k, scores.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// `k` of `n` patch indices drawn uniformly without replacement from the
/// `(seed, doc_id)` stream, ascending.
pub fn random_select(n: usize, k: usize, seed: u64, doc_id: &str) -> Result<Vec<usize>> {
    check_budget(k, n)?;
    let mut r = rng::stream(seed, doc_id);
    Ok(rng::sample_without_replacement(&mut r, n, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_count_rule() {
        assert_eq!(keep_count(0.05, 1024), 51);
        assert_eq!(keep_count(1.0, 37), 37);
        assert_eq!(keep_count(0.001, 10), 1);
        assert_eq!(keep_count(0.1, 64), 6);
        assert_eq!(keep_count(0.25, 10), 3); // 2.5 rounds up
        assert_eq!(keep_count(0.2, 1024), 205);
    }

    #[test]
    fn top_k_hand_cases() {
        assert_eq!(top_k_select(&[0.9, 1.1, 0.7], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_select(&[0.5; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_select(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k_select(&[0.1, 0.3, 0.3, 0.2], 2).unwrap(), vec![1, 2]);
        assert!(top_k_select(&[1.0], 0).is_err());
        assert!(top_k_select(&[1.0], 2).is_err());
        assert!(top_k_select(&[1.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn random_full_budget_and_determinism() {
        for seed in 0..5 {
            assert_eq!(random_select(8, 8, seed, "d").unwrap(), (0..8).collect::<Vec<_>>());
        }
        let a = random_select(100, 10, 42, "doc-7").unwrap();
        let b = random_select(100, 10, 42, "doc-7").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, random_select(100, 10, 42, "doc-8").unwrap());
        assert!(random_select(3, 4, 0, "d").is_err());
    }

    #[test]
    fn random_single_draw_is_uniform() {
        let n = 10;
        let draws = 100_000u64;
        let mut counts = [0u64; 10];
        for i in 0..draws {
            let pick = random_select(n, 1, i, "uniformity").unwrap()[0];
            counts[pick] += 1;
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "index {i}: {c}");
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2) / mean)
            .sum();
        // 9 dof, 0.999 quantile
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }
}
