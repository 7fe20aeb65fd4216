//! A single (variant, seed) pass over the whole stream.

use std::time::Instant;

use ostta_core::adaptation::{Adapter, Hyperparams, StepLog};
use ostta_core::metrics::{per_domain_summary, AurocPooling, MetricRecord, Summary};
use ostta_core::stream::Task;
use ostta_core::Mlp;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::variant::Variant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub summary: Summary,
    pub wall_clock_secs: f64,
}

/// Streams every batch of `task` through an adapter built from `source`.
/// `on_step` sees each step log as it is produced.
pub fn run_variant(
    task: &Task,
    source: &Mlp,
    base: &Hyperparams,
    variant: Variant,
    seed: u64,
    pooling: AurocPooling,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let hp = variant.apply(base);
    let mut adapter = Adapter::new(source.clone(), hp, seed)?;
    let mut stream = task.stream(seed);
    let mut records = Vec::with_capacity(task.config.total_batches());
    for batch in &mut stream {
        let log = adapter
            .step(&batch)
            .map_err(|source| HarnessError::Batch { batch: batch.batch_index, source })?;
        records.push(MetricRecord::from_step(&log));
        on_step(&log)?;
    }
    let summary = per_domain_summary(&records, pooling)?;
    Ok(RunOutcome {
        variant,
        seed,
        records,
        summary,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
