//! Evaluation metrics: accuracy, value-weighted accuracy (H-Acc), response
//! length, value density and accuracy on the high/low value bins.
//!
//! Value density divides H-Acc *expressed as a percentage* by the mean
//! response length. Lengths count generated tokens and exclude EOS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BIN_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub prompt_id: u64,
    pub value: f64,
    pub correct: bool,
    pub response_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub h_acc: f64,
    pub mean_length: f64,
    pub value_density: f64,
    pub acc_high_bin: f64,
    pub acc_low_bin: f64,
    pub n: usize,
}

/// H-Acc in percent per generated token; zero when nothing was generated.
pub fn value_density(h_acc_percent: f64, mean_length: f64) -> f64 {
    if mean_length > 0.0 {
        h_acc_percent / mean_length
    } else {
        0.0
    }
}

fn check_fraction(bin_fraction: f64) -> Result<()> {
    if bin_fraction > 0.0 && bin_fraction <= 0.5 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "bin_fraction must be in (0, 0.5], got {bin_fraction}"
        )))
    }
}

fn bin_size(n: usize, bin_fraction: f64) -> usize {
    ((bin_fraction * n as f64).ceil() as usize).min(n)
}

/// Result indices ordered by ascending value, ties by ascending prompt id.
fn value_order(results: &[EvalResult]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[a]
            .value
            .total_cmp(&results[b].value)
            .then(results[a].prompt_id.cmp(&results[b].prompt_id))
    });
    order
}

fn bins(results: &[EvalResult], bin_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no evaluation results"));
    }
    check_fraction(bin_fraction)?;
    let order = value_order(results);
    let k = bin_size(results.len(), bin_fraction);
    let high = order[order.len() - k..].to_vec();
    let low = order[..k].to_vec();
    Ok((high, low))
}

/// Prompt ids of the `ceil(bin_fraction * n)` highest- and lowest-valued results.
///
/// Both bins are cut from one ordering (value, then prompt id, ascending):
/// the low bin is its head and the high bin its tail. They are disjoint
/// whenever `2 * ceil(bin_fraction * n) <= n`.
pub fn bin_membership(results: &[EvalResult], bin_fraction: f64) -> Result<(Vec<u64>, Vec<u64>)> {
    let (high, low) = bins(results, bin_fraction)?;
    let ids = |idx: Vec<usize>| idx.into_iter().map(|i| results[i].prompt_id).collect();
    Ok((ids(high), ids(low)))
}

fn accuracy<'a>(results: impl Iterator<Item = &'a EvalResult>) -> f64 {
    let (hits, n) = results.fold((0usize, 0usize), |(h, n), r| {
        (h + r.correct as usize, n + 1)
    });
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn compute_metrics(results: &[EvalResult], bin_fraction: f64) -> Result<MetricsReport> {
    let (high, low) = bins(results, bin_fraction)?;
    let total_value: f64 = results.iter().map(|r| r.value).sum();
    if total_value <= 0.0 {
        return Err(Error::ZeroTotalValue);
    }
    let achieved: f64 = results.iter().filter(|r| r.correct).map(|r| r.value).sum();
    let h_acc = achieved / total_value;
    let mean_length = results
        .iter()
        .map(|r| r.response_length as f64)
        .sum::<f64>()
        / results.len() as f64;
    Ok(MetricsReport {
        acc: accuracy(results.iter()),
        h_acc,
        mean_length,
        value_density: value_density(h_acc * 100.0, mean_length),
        acc_high_bin: accuracy(high.iter().map(|&i| &results[i])),
        acc_low_bin: accuracy(low.iter().map(|&i| &results[i])),
        n: results.len(),
    })
}

/// Field-wise mean of several reports; value density is recomputed from the
/// averaged H-Acc and length so the report stays self-consistent.
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no reports to average"));
    }
    let k = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let h_acc = mean(|r| r.h_acc);
    let mean_length = mean(|r| r.mean_length);
    Ok(MetricsReport {
        acc: mean(|r| r.acc),
        h_acc,
        mean_length,
        value_density: value_density(h_acc * 100.0, mean_length),
        acc_high_bin: mean(|r| r.acc_high_bin),
        acc_low_bin: mean(|r| r.acc_low_bin),
        n: reports.iter().map(|r| r.n).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn results(values: &[f64], correct: &[bool]) -> Vec<EvalResult> {
        values
            .iter()
            .zip(correct)
            .enumerate()
            .map(|(i, (&value, &correct))| EvalResult {
                prompt_id: i as u64,
                value,
                correct,
                response_length: 3 + i,
            })
            .collect()
    }

    #[test]
    fn formula_example() {
        let r = compute_metrics(&results(&[0.5, 0.3, 0.2], &[true, false, true]), 0.2).unwrap();
        assert!((r.acc - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.h_acc - 0.7).abs() < 1e-15);
        assert_eq!(r.mean_length, 4.0);
        assert!((r.value_density - 70.0 / 4.0).abs() < 1e-12);
        assert_eq!(r.n, 3);
        // bins of one result each: 0.5 is correct, 0.2 is correct
        assert_eq!((r.acc_high_bin, r.acc_low_bin), (1.0, 1.0));
    }

    #[test]
    fn density_uses_percent() {
        assert!((value_density(57.0, 84.8) - 0.67).abs() < 0.005);
        assert_eq!(value_density(0.0, 0.0), 0.0);
    }

    #[test]
    fn all_or_nothing() {
        let all = compute_metrics(&results(&[0.1, 0.7, 0.2], &[true; 3]), 0.2).unwrap();
        assert_eq!((all.acc, all.h_acc), (1.0, 1.0));
        let none = compute_metrics(&results(&[0.1, 0.7, 0.2], &[false; 3]), 0.2).unwrap();
        assert_eq!((none.acc, none.h_acc), (0.0, 0.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            compute_metrics(&[], 0.2),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            compute_metrics(&results(&[0.0, 0.0], &[true, false]), 0.2),
            Err(Error::ZeroTotalValue)
        ));
        assert!(compute_metrics(&results(&[0.1], &[true]), 0.0).is_err());
        assert!(compute_metrics(&results(&[0.1], &[true]), 0.6).is_err());
        assert!(matches!(
            bin_membership(&[], 0.2),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn bin_sizes_and_ties() {
        let values: Vec<f64> = (0..10).map(|i| i as f64 / 100.0).collect();
        let (high, low) = bin_membership(&results(&values, &[true; 10]), 0.2).unwrap();
        assert_eq!(high, vec![8, 9]);
        assert_eq!(low, vec![0, 1]);

        let (high, low) = bin_membership(&results(&[0.1; 10], &[true; 10]), 0.2).unwrap();
        assert_eq!(low, vec![0, 1]);
        assert_eq!(high, vec![8, 9]);
    }

    #[test]
    fn averaging_keeps_density_consistent() {
        let a = compute_metrics(&results(&[0.5, 0.3, 0.2], &[true, false, true]), 0.2).unwrap();
        let b = compute_metrics(&results(&[0.5, 0.3, 0.2], &[false, true, true]), 0.2).unwrap();
        let avg = average_reports(&[a.clone(), b.clone()]).unwrap();
        assert!((avg.h_acc - (a.h_acc + b.h_acc) / 2.0).abs() < 1e-15);
        assert!((avg.value_density - avg.h_acc * 100.0 / avg.mean_length).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn h_acc_is_scale_invariant(values in prop::collection::vec(0.01f64..1.0, 1..40),
                                    mask in prop::collection::vec(any::<bool>(), 40),
                                    c in 0.1f64..10.0) {
            let correct = &mask[..values.len()];
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            let a = compute_metrics(&results(&values, correct), 0.2).unwrap();
            let b = compute_metrics(&results(&scaled, correct), 0.2).unwrap();
            prop_assert!((a.h_acc - b.h_acc).abs() < 1e-12);
        }

        #[test]
        fn bins_are_disjoint_with_expected_size(values in prop::collection::vec(0.0f64..1.0, 2..60),
                                               frac in 0.05f64..0.5) {
            let n = values.len();
            let k = ((frac * n as f64).ceil() as usize).min(n);
            prop_assume!(2 * k <= n);
            let (high, low) = bin_membership(&results(&values, &vec![true; n]), frac).unwrap();
            prop_assert_eq!(high.len(), k);
            prop_assert_eq!(low.len(), k);
            prop_assert!(high.iter().all(|h| !low.contains(h)));
            let min_high = high.iter().map(|&i| values[i as usize]).fold(f64::INFINITY, f64::min);
            let max_low = low.iter().map(|&i| values[i as usize]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_high >= max_low);
        }
    }
}
