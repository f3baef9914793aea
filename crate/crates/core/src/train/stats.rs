//! Multi-seed aggregation: sample statistics and 99% confidence
//! intervals via the two-sided Student-t quantile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided Student-t 0.995 quantiles (the half-width multiplier of a
/// 99% confidence interval) for 1..=127 degrees of freedom.
const T_995: [f64; 127] = [
    63.656741, 9.924843, 5.840909, 4.604095, 4.032143,
    3.707428, 3.499483, 3.355387, 3.249836, 3.169273,
    3.105807, 3.054540, 3.012276, 2.976843, 2.946713,
    2.920782, 2.898231, 2.878440, 2.860935, 2.845340,
    2.831360, 2.818756, 2.807336, 2.796940, 2.787436,
    2.778715, 2.770683, 2.763262, 2.756386, 2.749996,
    2.744042, 2.738481, 2.733277, 2.728394, 2.723806,
    2.719485, 2.715409, 2.711558, 2.707913, 2.704459,
    2.701181, 2.698066, 2.695102, 2.692278, 2.689585,
    2.687013, 2.684556, 2.682204, 2.679952, 2.677793,
    2.675722, 2.673734, 2.671823, 2.669985, 2.668216,
    2.666512, 2.664870, 2.663287, 2.661759, 2.660283,
    2.658857, 2.657479, 2.656145, 2.654854, 2.653604,
    2.652394, 2.651220, 2.650081, 2.648977, 2.647905,
    2.646863, 2.645852, 2.644869, 2.643913, 2.642983,
    2.642078, 2.641198, 2.640340, 2.639505, 2.638691,
    2.637897, 2.637123, 2.636369, 2.635632, 2.634914,
    2.634212, 2.633527, 2.632858, 2.632204, 2.631565,
    2.630940, 2.630330, 2.629732, 2.629148, 2.628576,
    2.628016, 2.627468, 2.626931, 2.626405, 2.625891,
    2.625386, 2.624891, 2.624407, 2.623932, 2.623465,
    2.623008, 2.622560, 2.622120, 2.621688, 2.621265,
    2.620849, 2.620440, 2.620039, 2.619645, 2.619258,
    2.618878, 2.618504, 2.618137, 2.617776, 2.617421,
    2.617072, 2.616729, 2.616392, 2.616060, 2.615733,
    2.615412, 2.615096,
];

/// Standard-normal 0.995 quantile, the large-sample limit of the table.
const Z_995: f64 = 2.5758293035489004;

/// Two-sided 99% Student-t multiplier for `df` degrees of freedom.
/// Beyond the embedded table (df > 127) the normal limit is used; the
/// table's last entries are already within 0.04 of it.
pub fn t_quantile_995(df: usize) -> f64 {
    match df {
        0 => f64::NAN,
        d if d <= T_995.len() => T_995[d - 1],
        _ => Z_995,
    }
}

/// Aggregated view of one metric over repeated seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metric: String,
    /// Per-seed values in run order.
    pub values: Vec<f64>,
    pub n_runs: usize,
    pub mean: f64,
    /// Sample standard deviation (n−1 denominator); 0 for a single run.
    pub std: f64,
    /// Half-width of the 99% confidence interval,
    /// `t_{0.995, n−1} · std / √n`; absent when fewer than two runs.
    pub ci99: Option<f64>,
}

/// Reduce per-seed values of one metric to mean / std / CI99.
pub fn aggregate_runs(metric: &str, values: &[f64]) -> Result<RunReport> {
    if values.is_empty() {
        return Err(Error::Input(format!("no runs to aggregate for metric {metric}")));
    }
    let n = values.len();
    // Identical runs get their exact value and zero spread; the naive
    // mean and sum of squared deviations would leave ~1e-16 of noise.
    let identical = values.iter().all(|v| *v == values[0]);
    let mean = if identical { values[0] } else { values.iter().sum::<f64>() / n as f64 };
    let (std, ci99) = if identical {
        (0.0, (n >= 2).then_some(0.0))
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        (std, Some(t_quantile_995(n - 1) * std / (n as f64).sqrt()))
    };
    Ok(RunReport { metric: metric.to_string(), values: values.to_vec(), n_runs: n, mean, std, ci99 })
}

/// Render reports as CSV: one row per metric with the per-seed values
/// packed into a trailing semicolon-separated column. Formatting uses
/// Rust's shortest-roundtrip float printing, so equal inputs give
/// byte-identical output.
pub fn reports_to_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("metric,n_runs,mean,std,ci99,values\n");
    for r in reports {
        let ci = r.ci99.map(|c| c.to_string()).unwrap_or_default();
        let values: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.metric,
            r.n_runs,
            r.mean,
            r.std,
            ci,
            values.join(";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_published_table_values() {
        // Spot values from standard t tables.
        assert!((t_quantile_995(1) - 63.65674).abs() < 1e-4);
        assert!((t_quantile_995(2) - 9.924843).abs() < 1e-5);
        assert!((t_quantile_995(10) - 3.169273).abs() < 1e-5);
        assert!((t_quantile_995(30) - 2.749996).abs() < 1e-5);
        assert!((t_quantile_995(63) - 2.656145).abs() < 1e-5);
        assert!((t_quantile_995(100) - 2.625891).abs() < 1e-5);
        // The table decreases toward (and stays above) the normal limit.
        for df in 2..=127 {
            assert!(t_quantile_995(df) < t_quantile_995(df - 1));
            assert!(t_quantile_995(df) > Z_995);
        }
        assert_eq!(t_quantile_995(128), Z_995);
        assert_eq!(t_quantile_995(10_000), Z_995);
    }

    #[test]
    fn two_point_interval_matches_hand_derivation() {
        // values {0, 1}: mean 0.5, sample std 1/√2,
        // ci99 = 63.656741 · (1/√2) / √2 = 31.8283705.
        let r = aggregate_runs("error_count", &[0.0, 1.0]).unwrap();
        assert_eq!(r.n_runs, 2);
        assert!((r.mean - 0.5).abs() < 1e-12);
        assert!((r.std - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((r.ci99.unwrap() - 31.8283706).abs() < 1e-3);
    }

    #[test]
    fn identical_values_give_zero_width_interval() {
        let r = aggregate_runs("accuracy", &[0.93, 0.93, 0.93, 0.93]).unwrap();
        assert_eq!(r.std, 0.0);
        assert_eq!(r.ci99, Some(0.0));
    }

    #[test]
    fn single_run_has_no_interval() {
        let r = aggregate_runs("accuracy", &[0.9]).unwrap();
        assert_eq!(r.mean, 0.9);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.ci99, None);
        assert!(aggregate_runs("accuracy", &[]).is_err());
    }

    #[test]
    fn csv_rendering_is_deterministic() {
        let reports = vec![
            aggregate_runs("error_count", &[66.0, 64.0, 69.0]).unwrap(),
            aggregate_runs("accuracy", &[0.9]).unwrap(),
        ];
        let a = reports_to_csv(&reports);
        let b = reports_to_csv(&reports);
        assert_eq!(a, b);
        assert!(a.starts_with("metric,n_runs,mean,std,ci99,values\n"));
        assert!(a.contains("error_count,3,"));
        // Absent CI renders as an empty field.
        assert!(a.contains("accuracy,1,0.9,0,,0.9\n"));
    }
}
