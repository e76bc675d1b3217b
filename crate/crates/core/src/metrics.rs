//! Closed-form statistics of cut-off participation intervals and the
//! per-round metrics derived from an experiment trace.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{RoundRecord, Trace};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::ObjectiveSpec;
use crate::rng::{CounterRng, Domain};
use crate::weighting::{ClientWeightState, UpdateRule};

/// Powers below this are flushed to zero.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

pub const CSV_COLUMNS: [&str; 8] = [
    "t",
    "grad_norm_f",
    "dist_f",
    "dist_h",
    "weight_error_cum",
    "q_diag",
    "step_norm",
    "loss_f",
];

/// `(1 − p)^k` evaluated in log space. The flag is set when a nonzero value
/// was flushed to zero.
pub fn survival_power(p: f64, k: f64) -> (f64, bool) {
    if p >= 1.0 {
        return (if k == 0.0 { 1.0 } else { 0.0 }, false);
    }
    let v = (k * (-p).ln_1p()).exp();
    if v < UNDERFLOW_FLOOR {
        (0.0, true)
    } else {
        (v, false)
    }
}

fn check_p_k(p: f64, cutoff: u64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("p = {p} outside (0, 1]")));
    }
    if cutoff < 1 {
        return Err(Error::Domain("cutoff K must be at least 1".into()));
    }
    Ok(())
}

/// `Pr{S = k}` for an interval cut off at `K`.
pub fn cutoff_geometric_pmf(p: f64, cutoff: u64, k: u64) -> Result<f64> {
    check_p_k(p, cutoff)?;
    if k < 1 || k > cutoff {
        return Err(Error::Domain(format!("k = {k} outside [1, {cutoff}]")));
    }
    let (tail, _) = survival_power(p, (k - 1) as f64);
    Ok(if k < cutoff { p * tail } else { tail })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMoments {
    pub mean: f64,
    pub variance: f64,
    /// `(1 − p)^K` or `(1 − p)^{2K}` was flushed to zero.
    pub underflow: bool,
}

/// Mean and variance of the cut-off interval length.
pub fn cutoff_geometric_moments(p: f64, cutoff: u64) -> Result<CutoffMoments> {
    check_p_k(p, cutoff)?;
    if cutoff == 1 {
        return Ok(CutoffMoments {
            mean: 1.0,
            variance: 0.0,
            underflow: false,
        });
    }
    let k = cutoff as f64;
    let (tail_k, flushed_k) = survival_power(p, k);
    let (tail_2k, flushed_2k) = survival_power(p, 2.0 * k);
    let mean = 1.0 / p - tail_k / p;
    let variance = (1.0 - p) / (p * p) - (2.0 * k - 1.0) * tail_k / p - tail_2k / (p * p);
    Ok(CutoffMoments {
        mean,
        // cancellation can leave tiny negatives when the truth is 0
        variance: variance.max(0.0),
        underflow: flushed_k || flushed_2k,
    })
}

/// Sample moments of simulated intervals, with standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub samples: u64,
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

/// Feeds Bernoulli(p) indicators through the per-client weight recursion and
/// collects `samples` closed intervals.
pub fn simulate_cutoff_intervals(p: f64, cutoff: u64, samples: u64, seed: u64) -> Result<Vec<u64>> {
    check_p_k(p, cutoff)?;
    let mut rng = CounterRng::keyed(seed, Domain::Auxiliary, 0, 0, 0);
    let mut state = ClientWeightState::default();
    let mut out = Vec::with_capacity(samples as usize);
    while (out.len() as u64) < samples {
        let bit = rng.next_f64() < p;
        if let Some(len) = state.advance(bit, cutoff, UpdateRule::RunningMean) {
            out.push(len);
        }
    }
    Ok(out)
}

pub fn sample_moments(values: &[u64]) -> SampleMoments {
    let m = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / m;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in values {
        let d = v as f64 - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= m;
    m4 /= m;
    let variance = m2 * m / (m - 1.0).max(1.0);
    SampleMoments {
        samples: values.len() as u64,
        mean,
        variance,
        se_mean: (variance / m).sqrt(),
        se_variance: ((m4 - m2 * m2).max(0.0) / m).sqrt(),
    }
}

/// Standardized difference; zero when both the difference and the standard
/// error vanish.
pub fn z_score(estimate: f64, truth: f64, se: f64) -> f64 {
    let diff = estimate - truth;
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY.copysign(diff)
    } else {
        diff / se
    }
}

fn require_weights(record: &RoundRecord) -> Result<&[f64]> {
    record
        .weights
        .as_deref()
        .ok_or_else(|| Error::contract(format!("round {} has no recorded weights", record.round)))
}

/// `(1/(N·T)) Σ_t Σ_n (p_n ω_t^n − 1)²` over the given rounds.
pub fn weight_error_term(records: &[RoundRecord], p: &[f64]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in records {
        total += round_weight_error(require_weights(r)?, p)?;
    }
    Ok(total / (records.len() * p.len()) as f64)
}

fn round_weight_error(weights: &[f64], p: &[f64]) -> Result<f64> {
    if weights.len() != p.len() {
        return Err(Error::contract("weight and probability vectors differ in length"));
    }
    Ok(weights.iter().zip(p).map(|(w, p)| (p * w - 1.0).powi(2)).sum())
}

fn round_q(weights: &[f64], p: &[f64]) -> f64 {
    weights.iter().zip(p).map(|(w, p)| p * w * w).sum::<f64>() / p.len() as f64
}

/// `max_t (1/N) Σ_n p_n (ω_t^n)²`.
pub fn q_diagnostic(records: &[RoundRecord], p: &[f64]) -> Result<f64> {
    let mut q: f64 = 0.0;
    for r in records {
        let w = require_weights(r)?;
        if w.len() != p.len() {
            return Err(Error::contract("weight and probability vectors differ in length"));
        }
        q = q.max(round_q(w, p));
    }
    Ok(q)
}

/// Minimizers of `f` and of the reweighted objective `h = Σ α_n p_n F_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalityTargets {
    pub argmin_f: Vec<f64>,
    pub argmin_h: Vec<f64>,
    pub numerical: bool,
}

pub fn optimality_targets(objective: &ObjectiveSpec, p: &[f64], alpha: Option<&[f64]>) -> Result<OptimalityTargets> {
    let n = objective.num_clients();
    if p.len() != n {
        return Err(Error::contract("probability vector does not match client count"));
    }
    let ones = vec![1.0; n];
    let alpha = alpha.unwrap_or(&ones);
    if alpha.len() != n {
        return Err(Error::config(format!("{} fixed weights for {n} clients", alpha.len())));
    }
    let f = objective.weighted_minimizer(&ones)?;
    let h_weights: Vec<f64> = alpha.iter().zip(p).map(|(a, p)| a * p).collect();
    let h = objective.weighted_minimizer(&h_weights)?;
    Ok(OptimalityTargets {
        argmin_f: f.x,
        argmin_h: h.x,
        numerical: f.numerical || h.numerical,
    })
}

/// A named metric over sampled rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub rounds: Vec<u64>,
    pub values: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
}

/// One CSV row. Missing values are written as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub t: u64,
    pub grad_norm_f: f64,
    pub dist_f: Option<f64>,
    pub dist_h: Option<f64>,
    pub weight_error_cum: Option<f64>,
    pub q_diag: Option<f64>,
    pub step_norm: f64,
    pub loss_f: f64,
}

impl MetricRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        match column {
            "t" => Some(self.t as f64),
            "grad_norm_f" => Some(self.grad_norm_f),
            "dist_f" => self.dist_f,
            "dist_h" => self.dist_h,
            "weight_error_cum" => self.weight_error_cum,
            "q_diag" => self.q_diag,
            "step_norm" => Some(self.step_norm),
            "loss_f" => Some(self.loss_f),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricTable {
    /// Evaluates every metric at the snapshots of `trace`.
    ///
    /// `targets` may be omitted for objectives whose minimizers are too
    /// costly to compute; the distance columns are then empty.
    pub fn from_trace(trace: &Trace, objective: &ObjectiveSpec, p: &[f64], targets: Option<&OptimalityTargets>) -> Result<Self> {
        let mut rows = Vec::with_capacity(trace.snapshots.len());
        let mut next_record = 0usize;
        let mut err_sum = 0.0;
        let mut q_max: f64 = 0.0;
        let weights_known = trace.records.iter().all(|r| r.weights.is_some());
        for snap in &trace.snapshots {
            while next_record < trace.records.len() && trace.records[next_record].round < snap.round {
                if let Some(w) = &trace.records[next_record].weights {
                    err_sum += round_weight_error(w, p)?;
                    q_max = q_max.max(round_q(w, p));
                }
                next_record += 1;
            }
            let applied = next_record;
            let grad = objective.global_grad(&snap.x)?;
            let step_norm = if applied == 0 {
                0.0
            } else {
                trace.records[applied - 1].step_norm
            };
            let (weight_error_cum, q_diag) = if !weights_known {
                (None, None)
            } else if applied == 0 {
                (Some(0.0), Some(0.0))
            } else {
                (Some(err_sum / (applied * p.len()) as f64), Some(q_max))
            };
            rows.push(MetricRow {
                t: snap.round,
                grad_norm_f: linalg::norm_sq(&grad),
                dist_f: targets.map(|tg| linalg::distance(&snap.x, &tg.argmin_f)),
                dist_h: targets.map(|tg| linalg::distance(&snap.x, &tg.argmin_h)),
                weight_error_cum,
                q_diag,
                step_norm,
                loss_f: objective.global_loss(&snap.x)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn series(&self, column: &str) -> Option<MetricSeries> {
        let mut rounds = Vec::new();
        let mut values = Vec::new();
        for row in &self.rows {
            if let Some(v) = row.get(column) {
                rounds.push(row.t);
                values.push(v);
            }
        }
        if values.is_empty() && column != "t" {
            return None;
        }
        Some(MetricSeries {
            name: column.to_string(),
            rounds,
            values,
            metadata: BTreeMap::new(),
        })
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    /// Writes `# `-prefixed preamble lines, the header row, then one row per
    /// sampled round. Floats use the shortest round-trip decimal form.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{}", CSV_COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.t,
                r.grad_norm_f,
                cell(r.dist_f),
                cell(r.dist_h),
                cell(r.weight_error_cum),
                cell(r.q_diag),
                r.step_norm,
                r.loss_f
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, preamble: &[String]) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, preamble).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Mean of the last 10% of values (at least one).
pub fn final_window_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let window = (values.len() / 10).max(1);
    let tail = &values[values.len() - window..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Snapshot;

    fn pmf_vec(p: f64, k: u64) -> Vec<f64> {
        (1..=k).map(|j| cutoff_geometric_pmf(p, k, j).unwrap()).collect()
    }

    #[test]
    fn pmf_examples() {
        assert_eq!(pmf_vec(1.0, 4), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pmf_vec(0.3, 1), vec![1.0]);
        assert_eq!(pmf_vec(0.5, 3), vec![0.5, 0.25, 0.25]);
        assert!(cutoff_geometric_pmf(0.5, 3, 0).is_err());
        assert!(cutoff_geometric_pmf(0.5, 3, 4).is_err());
        assert!(cutoff_geometric_pmf(0.0, 3, 1).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        for &p in &[0.001, 0.02, 0.1, 0.5, 0.9, 1.0] {
            for &k in &[1u64, 2, 10, 100, 1000, 10_000] {
                let s: f64 = pmf_vec(p, k).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12, "p={p} K={k}: {s}");
            }
        }
    }

    /// Brute-force expectation over the pmf, independent of the closed form.
    fn enumerate_moments(p: f64, k: u64) -> (f64, f64) {
        let pmf = pmf_vec(p, k);
        let mean: f64 = pmf.iter().enumerate().map(|(i, q)| (i + 1) as f64 * q).sum();
        let second: f64 = pmf.iter().enumerate().map(|(i, q)| ((i + 1) as f64).powi(2) * q).sum();
        (mean, second - mean * mean)
    }

    #[test]
    fn moment_examples() {
        let m = cutoff_geometric_moments(1.0, 7).unwrap();
        assert_eq!((m.mean, m.variance), (1.0, 0.0));
        for p in [0.1, 0.3] {
            let m = cutoff_geometric_moments(p, 1).unwrap();
            assert_eq!((m.mean, m.variance), (1.0, 0.0));
        }
        let m = cutoff_geometric_moments(0.5, 3).unwrap();
        assert!((m.mean - 1.75).abs() < 1e-15);
        assert!((m.variance - 0.6875).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_enumeration() {
        for &p in &[0.02, 0.1, 0.37, 0.5, 0.93] {
            for &k in &[1u64, 2, 5, 10, 100, 500] {
                let m = cutoff_geometric_moments(p, k).unwrap();
                let (mean, var) = enumerate_moments(p, k);
                assert!((m.mean - mean).abs() <= 1e-9 * mean.max(1.0), "p={p} K={k}");
                assert!((m.variance - var).abs() <= 1e-7 * var.max(1.0), "p={p} K={k}: {} vs {var}", m.variance);
            }
        }
    }

    #[test]
    fn large_k_flushes_power() {
        let m = cutoff_geometric_moments(0.5, 5000).unwrap();
        assert!(m.underflow);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.variance, 2.0);
    }

    fn record(round: u64, weights: Vec<f64>) -> RoundRecord {
        RoundRecord {
            round,
            indicators: vec![true; weights.len()],
            weights: Some(weights),
            step_norm: 0.0,
        }
    }

    #[test]
    fn weight_error_examples() {
        let p = [0.1, 0.25];
        let known: Vec<_> = (0..5).map(|t| record(t, vec![10.0, 4.0])).collect();
        assert_eq!(weight_error_term(&known, &p).unwrap(), 0.0);
        let half = [0.5, 0.5, 0.5];
        let ones: Vec<_> = (0..4).map(|t| record(t, vec![1.0; 3])).collect();
        assert_eq!(weight_error_term(&ones, &half).unwrap(), 0.25);
        assert_eq!(q_diagnostic(&ones, &half).unwrap(), 0.5);
        assert!((q_diagnostic(&known, &[0.1, 0.1]).unwrap() - 0.5 * (10.0 + 1.6)).abs() < 1e-12);
        let missing = vec![RoundRecord {
            round: 0,
            indicators: vec![true],
            weights: None,
            step_norm: 0.0,
        }];
        assert!(weight_error_term(&missing, &[0.5]).is_err());
    }

    #[test]
    fn weight_error_hand_trace() {
        // K = 2, indicators (1, 1, 0): ω_0 = 1, ω_1 = 1 (interval 1),
        // ω_2 = 1 (interval 1), ω_3 = 1 (open interval of 1, no cutoff yet)
        let mut est = crate::weighting::WeightEstimator::new(
            crate::weighting::Strategy::FedauFiniteK { k: 2 },
            1,
            10,
            None,
        )
        .unwrap();
        let mut recs = vec![record(0, est.weights().to_vec())];
        for (t, b) in [true, true, false].iter().enumerate() {
            recs.push(record(t as u64 + 1, est.advance(&[*b]).unwrap().to_vec()));
        }
        let weights: Vec<f64> = recs.iter().map(|r| r.weights.as_ref().unwrap()[0]).collect();
        assert_eq!(weights, vec![1.0, 1.0, 1.0, 1.0]);
        // each term (0.5·1 − 1)² = 0.25
        assert_eq!(weight_error_term(&recs, &[0.5]).unwrap(), 0.25);
        assert_eq!(q_diagnostic(&recs, &[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn biased_target_example() {
        let obj = ObjectiveSpec::isotropic(vec![vec![0.0], vec![4.0]], 0.0).unwrap();
        let tg = optimality_targets(&obj, &[0.9, 0.1], None).unwrap();
        assert_eq!(tg.argmin_f, vec![2.0]);
        assert!((tg.argmin_h[0] - 0.4).abs() < 1e-15);
        let uniform = optimality_targets(&obj, &[0.3, 0.3], None).unwrap();
        assert_eq!(uniform.argmin_f, uniform.argmin_h);
        let unbiased = optimality_targets(&obj, &[0.9, 0.1], Some(&[1.0 / 0.9, 10.0])).unwrap();
        assert!((unbiased.argmin_h[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn table_rows_and_cadence_invariance() {
        let obj = ObjectiveSpec::isotropic(vec![vec![0.0], vec![4.0]], 0.0).unwrap();
        let p = [0.5, 0.25];
        let records: Vec<_> = (0..6).map(|t| record(t, vec![1.0 + t as f64, 2.0])).collect();
        let snaps = |every: u64| -> Vec<Snapshot> {
            (0..=6)
                .filter(|t| t % every == 0 || *t == 6)
                .map(|t| Snapshot {
                    round: t,
                    x: vec![2.0],
                })
                .collect()
        };
        let tg = optimality_targets(&obj, &p, None).unwrap();
        let full = Trace {
            records: records.clone(),
            snapshots: snaps(1),
        };
        let coarse = Trace {
            records,
            snapshots: snaps(3),
        };
        let a = MetricTable::from_trace(&full, &obj, &p, Some(&tg)).unwrap();
        let b = MetricTable::from_trace(&coarse, &obj, &p, Some(&tg)).unwrap();
        assert_eq!(a.rows.len(), 7);
        assert_eq!(b.rows.len(), 3);
        assert_eq!(a.rows[0].weight_error_cum, Some(0.0));
        assert_eq!(a.rows[6].weight_error_cum, b.rows[2].weight_error_cum);
        assert_eq!(
            a.rows[6].weight_error_cum.unwrap(),
            weight_error_term(&full.records, &p).unwrap()
        );
        assert_eq!(a.rows[6].dist_f, Some(0.0));
        let csv = a.to_csv_string(&["seed=1".into()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# seed=1"));
        assert_eq!(lines.next(), Some(CSV_COLUMNS.join(",").as_str()));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn window_helpers() {
        assert_eq!(final_window_mean(&[1.0, 2.0, 3.0]), Some(3.0));
        let v: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(final_window_mean(&v), Some(18.5));
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        assert_eq!(z_score(1.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn simulated_intervals_follow_closed_form() {
        let s = simulate_cutoff_intervals(0.5, 3, 200_000, 4).unwrap();
        let m = sample_moments(&s);
        assert!(z_score(m.mean, 1.75, m.se_mean).abs() < 4.0);
        assert!(z_score(m.variance, 0.6875, m.se_variance).abs() < 4.0);
        let forced = sample_moments(&simulate_cutoff_intervals(0.1, 1, 1000, 4).unwrap());
        assert_eq!((forced.mean, forced.variance), (1.0, 0.0));
    }
}
