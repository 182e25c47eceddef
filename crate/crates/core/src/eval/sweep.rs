//! Train/evaluate one configuration per value of a swept axis.

use serde::Serialize;

use super::RankingReport;
use crate::kg::{EdgeNeighborIndex, KnowledgeGraph, Split};
use crate::model::{Aggregator, HyperParams, Selector};
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig, TrainError, TrainResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    Hops,
    Aggregator,
    Selector,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "K" | "k" => Ok(Self::K),
            "hops" => Ok(Self::Hops),
            "aggregator" => Ok(Self::Aggregator),
            "selector" => Ok(Self::Selector),
            other => Err(format!(
                "unknown sweep axis {other:?} (expected K|hops|aggregator|selector)"
            )),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::K => "K",
            Self::Hops => "hops",
            Self::Aggregator => "aggregator",
            Self::Selector => "selector",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub label: String,
    pub report: RankingReport,
    /// Highest MRR among the swept values.
    pub best: bool,
}

/// Apply one swept value to a base configuration.
pub fn apply_axis(hyper: &HyperParams, axis: SweepAxis, value: &str) -> TrainResult<HyperParams> {
    let mut h = hyper.clone();
    let parse_err = |msg: String| TrainError::InvalidConfig(msg);
    match axis {
        SweepAxis::K => {
            h.k = value
                .parse()
                .map_err(|_| parse_err(format!("bad K value {value:?}")))?;
        }
        SweepAxis::Hops => {
            h.hops = value
                .parse()
                .map_err(|_| parse_err(format!("bad hops value {value:?}")))?;
        }
        SweepAxis::Aggregator => {
            h.aggregator = value.parse::<Aggregator>().map_err(parse_err)?;
        }
        SweepAxis::Selector => {
            h.selector = value.parse::<Selector>().map_err(parse_err)?;
        }
    }
    h.validate()?;
    Ok(h)
}

/// Train one model per value (shared seed and schedule), evaluate each on
/// `split` with its best-validation parameters, and flag the top MRR.
pub fn sweep<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    hyper_base: &HyperParams,
    cfg: &TrainConfig,
    axis: SweepAxis,
    values: &[String],
    split: Split,
    mut on_progress: impl FnMut(&str, &RankingReport),
) -> TrainResult<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(TrainError::InvalidConfig("sweep needs at least one value".into()));
    }
    let mut entries = Vec::with_capacity(values.len());
    for value in values {
        let hyper = apply_axis(hyper_base, axis, value)?;
        let outcome = train::<S>(kg, nbrs, &hyper, cfg, None, |_| {})?;
        let report = super::evaluate(kg, nbrs, &outcome.best_params, &hyper, split, 1)?;
        on_progress(value, &report);
        entries.push(SweepEntry {
            label: format!("{axis}={value}"),
            report,
            best: false,
        });
    }
    let best = entries
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.report.overall.mrr.total_cmp(&b.1.report.overall.mrr))
        .map(|(i, _)| i)
        .unwrap();
    entries[best].best = true;
    Ok(entries)
}

/// Aligned text table over sweep entries.
pub fn table_string(entries: &[SweepEntry]) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let width = entries.iter().map(|e| e.label.len()).max().unwrap_or(8).max(8);
    writeln!(
        s,
        "{:<width$}  {:>8} {:>8} {:>8} {:>8}  best",
        "config", "MRR", "H@1", "H@3", "H@10",
    )
    .unwrap();
    for e in entries {
        writeln!(
            s,
            "{:<width$}  {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {}",
            e.label,
            e.report.overall.mrr,
            e.report.overall.hits1,
            e.report.overall.hits3,
            e.report.overall.hits10,
            if e.best { "*" } else { "" },
        )
        .unwrap();
    }
    s
}
