//! Paired comparison statistics for per-subject scores.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::metrics::TissueReport;

/// Largest number of nonzero differences for which the exact null
/// distribution is enumerated.
pub const EXACT_MAX_N: usize = 20;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences (W+).
    pub statistic: f64,
    /// Number of nonzero differences.
    pub n: usize,
    pub n_pairs: usize,
    pub p_value: f64,
    pub method: PMethod,
    pub degenerate: bool,
}

/// Midranks (1-based) of `values`, ties receiving the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn two_sided_normal(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on the paired differences `x - y`.
///
/// Zero differences are dropped and tied magnitudes get midranks. With at most
/// [`EXACT_MAX_N`] nonzero differences the p-value comes from the exact
/// conditional null distribution of W+; above that, from the normal
/// approximation with tie-corrected variance.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("paired samples differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 5 {
        return Err(Error::Input(format!("need at least 5 pairs, got {}", x.len())));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            n: 0,
            n_pairs: x.len(),
            p_value: 1.0,
            method: PMethod::Degenerate,
            degenerate: true,
        });
    }
    let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_MAX_N {
        // Doubled midranks are integers; count subsets by doubled rank sum.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let t = (2.0 * w_plus).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=t].iter().sum::<f64>() / all;
        let upper: f64 = counts[t..].iter().sum::<f64>() / all;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(WilcoxonResult { statistic: w_plus, n, n_pairs: x.len(), p_value: p, method: PMethod::Exact, degenerate: false });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let p = if var > 0.0 { two_sided_normal((w_plus - mean) / var.sqrt()) } else { 1.0 };
    Ok(WilcoxonResult { statistic: w_plus, n, n_pairs: x.len(), p_value: p, method: PMethod::Normal, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann–Whitney U of the first sample.
    pub statistic: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub p_value: f64,
    pub degenerate: bool,
}

/// Two-sided Wilcoxon rank-sum (Mann–Whitney) test, normal approximation with
/// tie correction. Treats the samples as independent.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<RankSumResult> {
    if x.len() < 5 || y.len() < 5 {
        return Err(Error::Input("rank-sum test needs at least 5 values per sample".into()));
    }
    let pooled: Vec<f64> = x.iter().chain(y).cloned().collect();
    let ranks = midranks(&pooled);
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut tie = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Ok(RankSumResult { statistic: u, n_x: x.len(), n_y: y.len(), p_value: 1.0, degenerate: true });
    }
    let z = (u - n1 * n2 / 2.0) / var.sqrt();
    Ok(RankSumResult { statistic: u, n_x: x.len(), n_y: y.len(), p_value: two_sided_normal(z), degenerate: false })
}

/// Bonferroni adjustment `min(1, p·m)`.
pub fn bonferroni(p: &[f64], m: usize) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("p-value {bad} outside [0, 1]")));
    }
    Ok(p.iter().map(|v| (v * m as f64).min(1.0)).collect())
}

/// Evenly spaced bin edges from `lo` to `hi`.
pub fn ga_edges(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_dsc: Option<f64>,
    pub mean_assd: Option<f64>,
}

/// Per-bin means of overall DSC and ASSD. Bins are `[lo, hi)` except the last,
/// which is closed; subjects outside all bins are ignored.
pub fn stratify_by_ga(reports: &[TissueReport], edges: &[f64]) -> Result<Vec<GaBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("bin edges must be increasing with at least two entries".into()));
    }
    let nb = edges.len() - 1;
    let mut bins = Vec::with_capacity(nb);
    for b in 0..nb {
        let (lo, hi) = (edges[b], edges[b + 1]);
        let members: Vec<&TissueReport> = reports
            .iter()
            .filter(|r| r.ga >= lo && (r.ga < hi || (b == nb - 1 && r.ga <= hi)))
            .collect();
        let count = members.len();
        let mean_dsc = (count > 0).then(|| members.iter().map(|r| r.mean_dsc).sum::<f64>() / count as f64);
        let assds: Vec<f64> = members.iter().filter_map(|r| r.mean_assd).collect();
        let mean_assd = (!assds.is_empty()).then(|| assds.iter().sum::<f64>() / assds.len() as f64);
        bins.push(GaBin { lo, hi, count, mean_dsc, mean_assd });
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_are_degenerate() {
        let x = [0.8, 0.7, 0.9, 0.85, 0.75];
        let r = wilcoxon_signed_rank(&x, &x).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.degenerate);
    }

    #[test]
    fn all_positive_six() {
        let y = [0.0; 6];
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.statistic, 21.0);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.p_value - 2.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_pairs() {
        assert!(wilcoxon_signed_rank(&[1.0; 4], &[0.0; 4]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0; 5], &[0.0; 6]).is_err());
    }

    #[test]
    fn midranks_with_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn normal_approximation_large_n() {
        // 30 positive differences 1..30: W+ = 465, z = (465 - 232.5) / sqrt(2363.75).
        let x: Vec<f64> = (1..=30).map(|v| v as f64).collect();
        let r = wilcoxon_signed_rank(&x, &vec![0.0; 30]).unwrap();
        assert_eq!(r.method, PMethod::Normal);
        let z: f64 = 232.5 / 2363.75f64.sqrt();
        assert!((r.p_value - erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-15);
        assert!(r.p_value < 1e-5);
    }

    #[test]
    fn rank_sum_separated_samples() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = (20..30).map(|v| v as f64).collect();
        let r = wilcoxon_rank_sum(&x, &y).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.p_value < 0.001);
    }

    #[test]
    fn bonferroni_cases() {
        let adj = bonferroni(&[0.01, 0.3], 7).unwrap();
        assert!((adj[0] - 0.07).abs() < 1e-15);
        assert_eq!(adj[1], 1.0);
        assert_eq!(bonferroni(&[0.2], 1).unwrap(), vec![0.2]);
        assert!(bonferroni(&[1.2], 2).is_err());
    }

    fn report(ga: f64, dsc: f64, assd: f64) -> TissueReport {
        TissueReport { subject: String::new(), ga, dsc: vec![dsc; 7], assd: vec![Some(assd); 7], mean_dsc: dsc, mean_assd: Some(assd) }
    }

    #[test]
    fn ga_bins() {
        let edges = ga_edges(21.0, 35.0, 2.0);
        assert_eq!(edges.len() - 1, 7);
        let reps = vec![report(21.0, 0.8, 1.0), report(22.5, 0.6, 2.0), report(35.0, 0.9, 0.5)];
        let bins = stratify_by_ga(&reps, &edges).unwrap();
        assert_eq!(bins[0].count, 2);
        assert!((bins[0].mean_dsc.unwrap() - 0.7).abs() < 1e-12);
        assert!((bins[0].mean_assd.unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(bins[1].mean_dsc, None);
        assert_eq!(bins[6].count, 1);
        let one = stratify_by_ga(&reps, &[20.0, 36.0]).unwrap();
        assert!((one[0].mean_dsc.unwrap() - (0.8 + 0.6 + 0.9) / 3.0).abs() < 1e-12);
    }
}
