//! Closed-set accuracy, open-set AUROC, H-score and filtering diagnostics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::{Action, StepLog};
use crate::error::{Error, Result};

/// Per-batch evaluation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub batch_index: usize,
    pub domain_index: usize,
    pub n_closed: usize,
    pub n_open: usize,
    pub n_correct_closed: usize,
    /// Closed-set samples that were trained with entropy maximization.
    pub wrongly_filtered_closed: usize,
    pub scores: Vec<f64>,
    pub open_flags: Vec<bool>,
}

impl MetricRecord {
    pub fn from_step(log: &StepLog) -> Self {
        let mut r = MetricRecord {
            batch_index: log.step,
            domain_index: log.domain_index,
            n_closed: 0,
            n_open: 0,
            n_correct_closed: 0,
            wrongly_filtered_closed: 0,
            scores: log.energy_score.clone(),
            open_flags: log.open_flags.clone(),
        };
        for i in 0..log.labels.len() {
            if log.open_flags[i] {
                r.n_open += 1;
                continue;
            }
            r.n_closed += 1;
            if log.predicted[i] == log.labels[i] {
                r.n_correct_closed += 1;
            }
            if log.decisions[i].action == Action::Maximize {
                r.wrongly_filtered_closed += 1;
            }
        }
        r
    }
}

/// Fraction of closed-set samples classified correctly; open-set samples are ignored.
pub fn accuracy<'a>(records: impl IntoIterator<Item = &'a MetricRecord>) -> Result<f64> {
    let (correct, total) = records
        .into_iter()
        .fold((0usize, 0usize), |(c, t), r| (c + r.n_correct_closed, t + r.n_closed));
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy over zero closed-set samples".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Mann-Whitney AUROC with open-set samples as positives and midranks for
/// ties. Computed in integer arithmetic: `2U = Σ 2·rank(open) − n_o(n_o+1)`.
pub fn auroc(scores: &[f64], is_open: &[bool]) -> Result<f64> {
    if scores.len() != is_open.len() {
        return Err(Error::Contract("scores and flags differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_open = is_open.iter().filter(|&&o| o).count() as u128;
    let n_closed = scores.len() as u128 - n_open;
    if n_open == 0 || n_closed == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both open and closed samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share the midrank (start + 1 + end) / 2
        let doubled_midrank = (start + 1 + end) as u128;
        let open_in_group = order[start..end].iter().filter(|&&i| is_open[i]).count() as u128;
        doubled_rank_sum += doubled_midrank * open_in_group;
        start = end;
    }
    let twice_u = doubled_rank_sum - n_open * (n_open + 1);
    Ok(twice_u as f64 / (2 * n_open * n_closed) as f64)
}

/// Harmonic mean of accuracy and AUROC; 0 when both are 0.
pub fn h_score(acc: f64, aur: f64) -> f64 {
    if acc + aur == 0.0 {
        0.0
    } else {
        2.0 * acc * aur / (acc + aur)
    }
}

/// Share of closed-set samples trained with entropy maximization, over
/// consecutive windows of `window` batches (the last window may be short).
pub fn wrongly_filtered_rate(records: &[MetricRecord], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Config("window must cover at least one batch".into()));
    }
    Ok(records
        .chunks(window)
        .map(|w| {
            let (bad, closed) = w
                .iter()
                .fold((0, 0), |(b, c), r| (b + r.wrongly_filtered_closed, c + r.n_closed));
            if closed == 0 {
                0.0
            } else {
                bad as f64 / closed as f64
            }
        })
        .collect())
}

/// How open-set scores are pooled for the overall AUROC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AurocPooling {
    /// One AUROC per domain, then the mean across domains.
    #[default]
    PerDomain,
    /// One AUROC over every score of the run.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain_index: usize,
    pub acc: f64,
    /// `None` when the domain holds only one of the two populations.
    pub aur: Option<f64>,
    pub h_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub domains: Vec<DomainRow>,
    pub acc: f64,
    pub aur: Option<f64>,
    pub h_score: Option<f64>,
}

/// Per-domain ACC / AUROC / H-score plus the domain-macro-averaged overall row.
pub fn per_domain_summary(records: &[MetricRecord], pooling: AurocPooling) -> Result<Summary> {
    let mut by_domain: BTreeMap<usize, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_domain.entry(r.domain_index).or_default().push(r);
    }
    if by_domain.is_empty() {
        return Err(Error::UndefinedMetric("no records to summarize".into()));
    }
    let mut domains = Vec::with_capacity(by_domain.len());
    for (&domain_index, recs) in &by_domain {
        let acc = accuracy(recs.iter().copied())?;
        let (scores, flags) = pool(recs.iter().copied());
        let aur = auroc(&scores, &flags).ok();
        domains.push(DomainRow { domain_index, acc, aur, h_score: aur.map(|a| h_score(acc, a)) });
    }
    let n = domains.len() as f64;
    let acc = domains.iter().map(|d| d.acc).sum::<f64>() / n;
    let aur = match pooling {
        AurocPooling::PerDomain => domains
            .iter()
            .map(|d| d.aur)
            .sum::<Option<f64>>()
            .map(|s| s / n),
        AurocPooling::Global => {
            let (scores, flags) = pool(records);
            auroc(&scores, &flags).ok()
        }
    };
    Ok(Summary { domains, acc, aur, h_score: aur.map(|a| h_score(acc, a)) })
}

fn pool<'a>(records: impl IntoIterator<Item = &'a MetricRecord>) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for r in records {
        scores.extend_from_slice(&r.scores);
        flags.extend_from_slice(&r.open_flags);
    }
    (scores, flags)
}

/// One point of a time series over consecutive batch windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Index of the last batch in the window.
    pub batch_index: usize,
    pub wrongly_filtered: f64,
    pub acc: Option<f64>,
    pub aur: Option<f64>,
    pub h_score: Option<f64>,
}

pub fn windowed_curve(records: &[MetricRecord], window: usize) -> Result<Vec<CurvePoint>> {
    let wf = wrongly_filtered_rate(records, window)?;
    Ok(records
        .chunks(window)
        .zip(wf)
        .map(|(w, wrongly_filtered)| {
            let acc = accuracy(w).ok();
            let (scores, flags) = pool(w);
            let aur = auroc(&scores, &flags).ok();
            let h = acc.zip(aur).map(|(a, u)| h_score(a, u));
            CurvePoint {
                batch_index: w.last().map_or(0, |r| r.batch_index),
                wrongly_filtered,
                acc,
                aur,
                h_score: h,
            }
        })
        .collect())
}
