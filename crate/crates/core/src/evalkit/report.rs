use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{mean_sd, EvalError};

/// Micro and macro averages of `task → dataset → score`.
///
/// Micro is the plain mean over every dataset; macro first averages the
/// datasets of each task, then averages the task means.
pub fn micro_macro(scores: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<(f64, f64), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut all = Vec::new();
    let mut task_means = Vec::new();
    for (task, datasets) in scores {
        if datasets.is_empty() {
            return Err(EvalError::EmptyTask(task.clone()));
        }
        let values: Vec<f64> = datasets.values().copied().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite("scores"));
        }
        task_means.push(values.iter().sum::<f64>() / values.len() as f64);
        all.extend(values);
    }
    let micro = all.iter().sum::<f64>() / all.len() as f64;
    let macro_ = task_means.iter().sum::<f64>() / task_means.len() as f64;
    Ok((micro, macro_))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub task: String,
    pub dataset: String,
    /// Mean over seeds.
    pub mean: f64,
    /// Sample standard deviation over seeds, when more than one was given.
    pub sd: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub datasets: Vec<DatasetScore>,
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_: f64,
}

impl MetricReport {
    /// Builds a report from per-seed scores of each `task → dataset`.
    /// Averages use the per-dataset seed means.
    pub fn from_seeds(
        metric: impl Into<String>,
        scores: &BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    ) -> Result<Self, EvalError> {
        let mut datasets = Vec::new();
        let mut means: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (task, per_dataset) in scores {
            for (dataset, seeds) in per_dataset {
                let (mean, sd) = mean_sd(seeds)?;
                means.entry(task.clone()).or_default().insert(dataset.clone(), mean);
                datasets.push(DatasetScore {
                    task: task.clone(),
                    dataset: dataset.clone(),
                    mean,
                    sd,
                    seeds: seeds.len(),
                });
            }
            if per_dataset.is_empty() {
                return Err(EvalError::EmptyTask(task.clone()));
            }
        }
        let (micro, macro_) = micro_macro(&means)?;
        Ok(Self {
            metric: metric.into(),
            datasets,
            micro,
            macro_,
        })
    }

    pub fn render_table(&self) -> String {
        let mut rows = vec![["task".to_string(), "dataset".into(), self.metric.clone(), "sd".into()]];
        for d in &self.datasets {
            rows.push([
                d.task.clone(),
                d.dataset.clone(),
                format!("{:.4}", d.mean),
                d.sd.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into()),
            ]);
        }
        rows.push(["micro".into(), String::new(), format!("{:.4}", self.micro), String::new()]);
        rows.push(["macro".into(), String::new(), format!("{:.4}", self.macro_), String::new()]);
        let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line = format!(
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out
    }
}
