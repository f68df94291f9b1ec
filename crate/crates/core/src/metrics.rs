//! Detection metrics over scored trials: DET points, interpolated EER, and
//! normalized minimum detection cost, plus CSV report emission. A brute-force
//! threshold sweep lives in [`brute`] as an independent cross-check; both
//! sides share one pinned convention — accept iff score >= threshold, linear
//! EER interpolation — so results must agree bit-for-bit.

use crate::error::Error;
use crate::synth::TrialLabel;

// ─── scored trials ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    scores: Vec<f64>,
    labels: Vec<TrialLabel>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, labels: Vec<TrialLabel>) -> Result<Self, Error> {
        if scores.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("non-finite trial score {bad}")));
        }
        Ok(ScoredTrials { scores, labels })
    }

    pub fn from_pairs(pairs: &[(f64, TrialLabel)]) -> Result<Self, Error> {
        ScoredTrials::new(
            pairs.iter().map(|(s, _)| *s).collect(),
            pairs.iter().map(|(_, l)| *l).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[TrialLabel] {
        &self.labels
    }

    /// (targets, nontargets)
    pub fn counts(&self) -> (usize, usize) {
        let t = self
            .labels
            .iter()
            .filter(|l| **l == TrialLabel::Target)
            .count();
        (t, self.labels.len() - t)
    }

    fn require_both_labels(&self) -> Result<(usize, usize), Error> {
        let (t, n) = self.counts();
        if t == 0 || n == 0 {
            return Err(Error::Invalid(format!(
                "need at least one target and one nontarget trial, got {t} and {n}"
            )));
        }
        Ok((t, n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Invalid(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0) || !(self.c_fa > 0.0) {
            return Err(Error::Invalid(format!(
                "detection costs must be positive, got c_miss {} c_fa {}",
                self.c_miss, self.c_fa
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

// ─── det sweep ──────────────────────────────────────────────────────────────

/// One operating point per distinct score, bracketed by all-accept and
/// all-reject sentinels. A trial is accepted iff its score >= threshold, so
/// p_miss = targets below / targets and p_fa = nontargets at-or-above /
/// nontargets.
pub fn det_points(st: &ScoredTrials) -> Result<Vec<DetPoint>, Error> {
    if st.is_empty() {
        return Err(Error::Invalid("no trials to sweep".into()));
    }
    let (n_t, n_n) = st.counts();
    let mut sorted: Vec<(f64, TrialLabel)> = st
        .scores
        .iter()
        .copied()
        .zip(st.labels.iter().copied())
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    // running counts of trials strictly below the current threshold
    let mut t_below = 0usize;
    let mut n_below = 0usize;
    let mut i = 0usize;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        points.push(DetPoint {
            threshold,
            p_miss: divide(t_below, n_t),
            p_fa: divide(n_n - n_below, n_n),
        });
        // consume the tie group so the next threshold counts it as below
        while i < sorted.len() && sorted[i].0 == threshold {
            match sorted[i].1 {
                TrialLabel::Target => t_below += 1,
                TrialLabel::Nontarget => n_below += 1,
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Error-rate quotient with the 0/0 = 0 convention for degenerate sweeps
/// (a class can be absent for plain DET emission).
fn divide(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Linear interpolation where p_miss − p_fa changes sign along the sweep.
/// Both the primary path and the brute-force oracle use exactly this
/// arithmetic, so they can only differ through their DET points.
fn interpolate_eer(points: &[DetPoint]) -> f64 {
    let mut j = 1;
    while points[j].p_miss - points[j].p_fa < 0.0 {
        j += 1;
    }
    let (p1, p2) = (points[j - 1], points[j]);
    let denom = (p2.p_miss - p1.p_miss) - (p2.p_fa - p1.p_fa);
    let s = (p1.p_fa - p1.p_miss) / denom;
    100.0 * (p1.p_miss + s * (p2.p_miss - p1.p_miss))
}

/// Equal error rate in percent.
pub fn eer(st: &ScoredTrials) -> Result<f64, Error> {
    st.require_both_labels()?;
    Ok(interpolate_eer(&det_points(st)?))
}

fn dcf_cost(point: &DetPoint, p: &DcfParams) -> f64 {
    let normalizer = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    (p.c_miss * p.p_target * point.p_miss + p.c_fa * (1.0 - p.p_target) * point.p_fa) / normalizer
}

/// Minimum normalized detection cost over all DET points; the all-reject
/// sentinel caps it at exactly 1.
pub fn min_dcf(st: &ScoredTrials, p: &DcfParams) -> Result<f64, Error> {
    p.validate()?;
    st.require_both_labels()?;
    let points = det_points(st)?;
    let mut best = f64::INFINITY;
    for point in &points {
        let cost = dcf_cost(point, p);
        if cost < best {
            best = cost;
        }
    }
    Ok(best)
}

// ─── brute-force oracle ─────────────────────────────────────────────────────

/// Independent O(n²) recount of every operating point: each distinct
/// threshold rescans the whole trial list. Shares only the stated convention
/// (accept iff >=, the interpolation formula, the cost formula) with the
/// primary path.
pub mod brute {
    use super::{DcfParams, DetPoint, Error, ScoredTrials, TrialLabel};

    pub fn det_points(st: &ScoredTrials) -> Result<Vec<DetPoint>, Error> {
        if st.is_empty() {
            return Err(Error::Invalid("no trials to sweep".into()));
        }
        let n_t = st
            .labels()
            .iter()
            .filter(|l| **l == TrialLabel::Target)
            .count();
        let n_n = st.len() - n_t;

        let mut thresholds: Vec<f64> = st.scores().to_vec();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();

        let mut points = vec![DetPoint {
            threshold: f64::NEG_INFINITY,
            p_miss: 0.0,
            p_fa: 1.0,
        }];
        for &threshold in &thresholds {
            let mut misses = 0usize;
            let mut false_accepts = 0usize;
            for (&s, &l) in st.scores().iter().zip(st.labels()) {
                match l {
                    TrialLabel::Target if s < threshold => misses += 1,
                    TrialLabel::Nontarget if s >= threshold => false_accepts += 1,
                    _ => {}
                }
            }
            points.push(DetPoint {
                threshold,
                p_miss: super::divide(misses, n_t),
                p_fa: super::divide(false_accepts, n_n),
            });
        }
        points.push(DetPoint {
            threshold: f64::INFINITY,
            p_miss: 1.0,
            p_fa: 0.0,
        });
        Ok(points)
    }

    pub fn eer(st: &ScoredTrials) -> Result<f64, Error> {
        st.require_both_labels()?;
        let points = det_points(st)?;
        let mut j = 1;
        while points[j].p_miss - points[j].p_fa < 0.0 {
            j += 1;
        }
        let (p1, p2) = (points[j - 1], points[j]);
        let denom = (p2.p_miss - p1.p_miss) - (p2.p_fa - p1.p_fa);
        let s = (p1.p_fa - p1.p_miss) / denom;
        Ok(100.0 * (p1.p_miss + s * (p2.p_miss - p1.p_miss)))
    }

    pub fn min_dcf(st: &ScoredTrials, p: &DcfParams) -> Result<f64, Error> {
        p.validate()?;
        st.require_both_labels()?;
        let normalizer = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
        let mut best = f64::INFINITY;
        for point in det_points(st)? {
            let cost = (p.c_miss * p.p_target * point.p_miss
                + p.c_fa * (1.0 - p.p_target) * point.p_fa)
                / normalizer;
            if cost < best {
                best = cost;
            }
        }
        Ok(best)
    }
}

// ─── report ─────────────────────────────────────────────────────────────────

pub const REPORT_HEADER: &str = "condition,n_trials,eer_percent,min_dcf,config_hash,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub n_trials: usize,
    pub eer_percent: f64,
    pub min_dcf: f64,
    pub config_hash: u64,
    pub seed: u64,
}

/// EER/minDCF per named condition, in input order.
pub fn report(
    conditions: &[(String, ScoredTrials)],
    p: &DcfParams,
    config_hash: u64,
    seed: u64,
) -> Result<Vec<ReportRow>, Error> {
    let mut rows = Vec::with_capacity(conditions.len());
    for (name, st) in conditions {
        if name.is_empty() || name.contains(',') || name.contains('\n') {
            return Err(Error::Invalid(format!(
                "condition name {name:?} cannot be a CSV field"
            )));
        }
        rows.push(ReportRow {
            condition: name.clone(),
            n_trials: st.len(),
            eer_percent: eer(st)?,
            min_dcf: min_dcf(st, p)?,
            config_hash,
            seed,
        });
    }
    Ok(rows)
}

/// CSV with 17 significant digits on the metric columns, enough for an exact
/// f64 round-trip through `parse_report`.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{},{}\n",
            r.condition, r.n_trials, r.eer_percent, r.min_dcf, r.config_hash, r.seed
        ));
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>, Error> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        other => {
            return Err(Error::Invalid(format!(
                "report header {other:?} does not match {REPORT_HEADER:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Invalid(format!(
                "report line {} has {} fields, expected 6",
                i + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Invalid(format!("bad {what} {s:?}: {e}")))
        };
        let parse_u = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|e| Error::Invalid(format!("bad {what} {s:?}: {e}")))
        };
        rows.push(ReportRow {
            condition: fields[0].to_string(),
            n_trials: parse_u(fields[1], "trial count")? as usize,
            eer_percent: parse_f(fields[2], "eer")?,
            min_dcf: parse_f(fields[3], "min_dcf")?,
            config_hash: parse_u(fields[4], "config hash")?,
            seed: parse_u(fields[5], "seed")?,
        });
    }
    Ok(rows)
}

// ─── tests ──────────────────────────────────────────────────────────────────
