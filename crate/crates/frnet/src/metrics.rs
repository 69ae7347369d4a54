//! Ranking and calibration metrics, and gate-weight distribution analysis.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// average ranks for ties. `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC is undefined when only one class is present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average rank over each tie group; ranks are 1-based.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1 + j + 1) as f64) / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Mean binary cross entropy of probability scores, clamped exactly like
/// the training objective.
pub fn logloss(scores: &[f64], labels: &[u8]) -> f64 {
    crate::tape::mean_bce(scores, labels)
}

/// Distribution summary of the gate openness values `σ(W_b)`.
#[derive(Clone, Debug)]
pub struct GateStats {
    /// Mean selection weight of the original representations.
    pub mean: f64,
    /// Mean complementary weight, accumulated independently.
    pub mean_complement: f64,
    /// 100 uniform bins over [0, 1].
    pub histogram: Vec<u64>,
    pub count: u64,
}

impl GateStats {
    /// Builds the summary from raw gate values in (0,1).
    pub fn from_values<F: Real>(values: &[F]) -> Result<GateStats> {
        if values.is_empty() {
            return Err(Error::Metric("no gate values sampled".into()));
        }
        let mut histogram = vec![0u64; 100];
        let mut sum = 0.0f64;
        let mut sum_c = 0.0f64;
        for &v in values {
            let v = v.to_f64();
            sum += v;
            sum_c += 1.0 - v;
            let bin = ((v * 100.0).floor() as usize).min(99);
            histogram[bin] += 1;
        }
        let n = values.len() as f64;
        Ok(GateStats {
            mean: sum / n,
            mean_complement: sum_c / n,
            histogram,
            count: values.len() as u64,
        })
    }

    /// CSV rows `bin_low,bin_high,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!(
                "{:.2},{:.2},{}\n",
                i as f64 / 100.0,
                (i + 1) as f64 / 100.0,
                c
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic pairwise-comparison oracle with the same tie convention.
    fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yi != 1 || yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_reversed_and_tied_rankings() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4], &[1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn worked_example() {
        let got = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(auc(&[0.1, 0.4], &[1, 1]).is_err());
        assert!(auc(&[0.1, 0.4], &[0, 0]).is_err());
    }

    #[test]
    fn monotone_transforms_do_not_move_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..2)).collect();
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).tanh()).collect();
        assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn label_flip_complements_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.gen_range(10..200);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let a = auc(&scores, &labels).unwrap();
            let flipped: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
            let b = auc(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fast_auc_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..30 {
            let n = rng.gen_range(5..=1000);
            // Heavy ties: scores on a small grid.
            let grid = rng.gen_range(2..30);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..grid) as f64) / grid as f64)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 1;
            if n > 1 {
                labels[1] = 0;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_bruteforce(&scores, &labels);
            assert!(
                (fast - slow).abs() < 1e-9,
                "trial {trial}: fast {fast} vs slow {slow}"
            );
        }
    }

    #[test]
    fn logloss_shares_the_training_clamp() {
        assert!((logloss(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(logloss(&[1.0], &[1]) < 1e-6);
        let two = logloss(&[0.8, 0.3], &[1, 0]);
        assert!((two - 0.2899092476264711).abs() < 1e-12);
    }

    #[test]
    fn gate_stats_identity_and_bins() {
        let vals: Vec<f64> = vec![0.1, 0.5, 0.5, 0.9, 0.999];
        let stats = GateStats::from_values(&vals).unwrap();
        assert!((stats.mean + stats.mean_complement - 1.0).abs() < 1e-12);
        assert_eq!(stats.histogram.iter().sum::<u64>(), 5);
        assert_eq!(stats.histogram[50], 2);
        assert_eq!(stats.histogram[99], 1);
        assert_eq!(stats.count, 5);
        let csv = stats.to_csv();
        assert_eq!(csv.lines().count(), 101);
        assert!(csv.starts_with("bin_low,bin_high,count\n"));
    }
}
