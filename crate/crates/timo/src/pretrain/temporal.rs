use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How a length-k temporal subset is drawn from a longer series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemporalSampling {
    /// Always the same configured indices.
    Fixed(Vec<usize>),
    /// Uniform k-subset without replacement, returned ascending.
    Random,
}

/// Select `k` of `t_total` timestamps under the given mode.
pub fn sample_temporal_subset(
    t_total: usize,
    k: usize,
    mode: &TemporalSampling,
    seed: u64,
) -> Result<Vec<usize>> {
    if k > t_total {
        return Err(Error::config(format!(
            "cannot select {k} of {t_total} timestamps"
        )));
    }
    match mode {
        TemporalSampling::Fixed(indices) => {
            if indices.len() != k {
                return Err(Error::config(format!(
                    "fixed mode provides {} indices, expected {k}",
                    indices.len()
                )));
            }
            for w in indices.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::config(
                        "fixed indices must be strictly increasing".to_string(),
                    ));
                }
            }
            if indices.iter().any(|&i| i >= t_total) {
                return Err(Error::config(format!(
                    "fixed index out of range (T={t_total})"
                )));
            }
            Ok(indices.clone())
        }
        TemporalSampling::Random => {
            let mut order: Vec<usize> = (0..t_total).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..k {
                let j = rng.random_range(i..t_total);
                order.swap(i, j);
            }
            let mut picked: Vec<usize> = order[..k].to_vec();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_subset_is_distinct_ascending_in_range() {
        for seed in 0..100 {
            let s = sample_temporal_subset(10, 3, &TemporalSampling::Random, seed).unwrap();
            assert_eq!(s.len(), 3);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn full_selection_is_identity() {
        let s = sample_temporal_subset(6, 6, &TemporalSampling::Random, 1).unwrap();
        assert_eq!(s, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn fixed_mode_returns_configured_indices() {
        let mode = TemporalSampling::Fixed(vec![0, 4, 9]);
        for seed in 0..5 {
            assert_eq!(
                sample_temporal_subset(10, 3, &mode, seed).unwrap(),
                vec![0, 4, 9]
            );
        }
    }

    #[test]
    fn rejects_oversized_and_malformed_requests() {
        assert!(sample_temporal_subset(3, 4, &TemporalSampling::Random, 0).is_err());
        let bad = TemporalSampling::Fixed(vec![4, 2]);
        assert!(sample_temporal_subset(10, 2, &bad, 0).is_err());
        let oob = TemporalSampling::Fixed(vec![0, 12]);
        assert!(sample_temporal_subset(10, 2, &oob, 0).is_err());
    }

    #[test]
    fn random_subsets_cover_all_indices_over_many_seeds() {
        let mut seen = [false; 10];
        for seed in 0..200 {
            for i in sample_temporal_subset(10, 3, &TemporalSampling::Random, seed).unwrap() {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
