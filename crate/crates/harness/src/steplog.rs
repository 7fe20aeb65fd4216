//! JSONL step-log rows. Per-sample fields are stored column-wise.

use ostta_core::adaptation::{Action, StepLog};
use ostta_core::metrics::MetricRecord;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub domain_index: usize,
    pub label: Vec<usize>,
    pub open: Vec<u8>,
    pub h_adapt: Vec<f64>,
    pub h_ema: Vec<f64>,
    pub f_pr: Vec<u8>,
    pub f_aux: Vec<u8>,
    pub w_soft: Vec<f64>,
    pub action: Vec<Action>,
    pub coeff: Vec<f64>,
    pub energy_score: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c_source: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c_adapt: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c_ema: Vec<f64>,
    pub predicted_label: Vec<usize>,
    pub loss: f64,
    pub loss_min: f64,
    pub loss_max: f64,
    pub updated: bool,
    pub augment_fingerprint: u64,
}

impl From<&StepLog> for StepRow {
    fn from(log: &StepLog) -> Self {
        let d = &log.decisions;
        Self {
            step: log.step,
            domain_index: log.domain_index,
            label: log.labels.clone(),
            open: log.open_flags.iter().map(|&o| u8::from(o)).collect(),
            h_adapt: d.iter().map(|x| x.h_adapt).collect(),
            h_ema: d.iter().map(|x| x.h_ema).collect(),
            f_pr: d.iter().map(|x| u8::from(x.f_pr)).collect(),
            f_aux: d.iter().map(|x| u8::from(x.f_aux)).collect(),
            w_soft: d.iter().map(|x| x.w_soft).collect(),
            action: d.iter().map(|x| x.action).collect(),
            coeff: log.coeffs.clone(),
            energy_score: log.energy_score.clone(),
            c_source: log.kip_weights.iter().map(|c| c[0]).collect(),
            c_adapt: log.kip_weights.iter().map(|c| c[1]).collect(),
            c_ema: log.kip_weights.iter().map(|c| c[2]).collect(),
            predicted_label: log.predicted.clone(),
            loss: log.loss,
            loss_min: log.loss_min,
            loss_max: log.loss_max,
            updated: log.updated,
            augment_fingerprint: log.augment_fingerprint,
        }
    }
}

impl StepRow {
    /// Rebuilds the evaluation record from logged fields only.
    pub fn metric_record(&self) -> MetricRecord {
        let mut r = MetricRecord {
            batch_index: self.step,
            domain_index: self.domain_index,
            n_closed: 0,
            n_open: 0,
            n_correct_closed: 0,
            wrongly_filtered_closed: 0,
            scores: self.energy_score.clone(),
            open_flags: self.open.iter().map(|&o| o != 0).collect(),
        };
        for i in 0..self.label.len() {
            if self.open[i] != 0 {
                r.n_open += 1;
            } else {
                r.n_closed += 1;
                r.n_correct_closed += usize::from(self.predicted_label[i] == self.label[i]);
                r.wrongly_filtered_closed += usize::from(self.action[i] == Action::Maximize);
            }
        }
        r
    }
}
