use std::collections::BTreeMap;

use serde::Serialize;

use dfd_core::metrics::{distinct_n, distinct_n_pooled, mean_pairwise_bleu, ResponseSet};
use dfd_core::{GenerationRecord, Result};

#[derive(Debug, Clone, Serialize)]
pub struct DiversityReport {
    pub records: usize,
    pub prompts: usize,
    /// Distinct-N scaled to percent; `None` when undefined.
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
    pub distinct_3: Option<f64>,
    pub p_bleu: Option<f64>,
    pub mean_temperature: Option<f64>,
    pub mean_ka: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub overall: DiversityReport,
    pub datasets: BTreeMap<String, DiversityReport>,
}

fn units(r: &GenerationRecord) -> Vec<String> {
    match &r.text {
        Some(t) => t.split_whitespace().map(str::to_owned).collect(),
        None => r.tokens.iter().map(u32::to_string).collect(),
    }
}

fn defined(v: Result<f64>) -> Option<f64> {
    v.ok()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn diversity(records: &[&GenerationRecord], pooled: bool) -> DiversityReport {
    let mut grouped: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.prompt_id.as_str()).or_default().push(units(r));
    }
    let sets: Vec<ResponseSet<String>> = grouped.into_iter().map(|(id, rs)| ResponseSet::new(id, rs)).collect();
    let distinct = |n| {
        let v = if pooled {
            distinct_n_pooled(&sets, n)
        } else {
            distinct_n(&sets, n)
        };
        defined(v).map(|x| x * 100.0)
    };
    DiversityReport {
        records: records.len(),
        prompts: sets.len(),
        distinct_1: distinct(1),
        distinct_2: distinct(2),
        distinct_3: distinct(3),
        p_bleu: defined(mean_pairwise_bleu(&sets)),
        mean_temperature: mean(records.iter().flat_map(|r| &r.steps).map(|s| s.temperature)),
        mean_ka: mean(records.iter().flat_map(|r| &r.steps).map(|s| s.ka)),
    }
}

pub fn metrics_report(records: &[GenerationRecord], pooled: bool) -> MetricsReport {
    let all: Vec<&GenerationRecord> = records.iter().collect();
    let mut by_dataset: BTreeMap<String, Vec<&GenerationRecord>> = BTreeMap::new();
    for r in records {
        let name = r.dataset.clone().unwrap_or_else(|| "default".into());
        by_dataset.entry(name).or_default().push(r);
    }
    MetricsReport {
        overall: diversity(&all, pooled),
        datasets: by_dataset
            .into_iter()
            .map(|(k, v)| (k, diversity(&v, pooled)))
            .collect(),
    }
}
