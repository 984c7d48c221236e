//! Retrieval metrics and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Engine, PipelineConfig, PreparedQuery, RankList};
use crate::ImageId;

/// Relevance protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// The query is removed from its own ranking; scored by mAP.
    #[default]
    HolidaysLike,
    /// Groups of four; the query is one of its own positives; scored by N-S.
    UkbenchLike,
}

impl Protocol {
    pub fn metric(self) -> Metric {
        match self {
            Protocol::HolidaysLike => Metric::MeanAp,
            Protocol::UkbenchLike => Metric::NsScore,
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::HolidaysLike => "holidays-like",
            Protocol::UkbenchLike => "ukbench-like",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holidays-like" | "holidays" => Ok(Protocol::HolidaysLike),
            "ukbench-like" | "ukbench" => Ok(Protocol::UkbenchLike),
            other => Err(Error::Parameter(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    MeanAp,
    NsScore,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::MeanAp => "mAP",
            Metric::NsScore => "N-S",
        })
    }
}

/// Positive image ids per query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    positives: BTreeMap<ImageId, BTreeSet<ImageId>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: ImageId, positives: impl IntoIterator<Item = ImageId>) {
        self.positives.entry(query).or_default().extend(positives);
    }

    pub fn queries(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.positives.keys().copied()
    }

    pub fn positives(&self, query: ImageId) -> Option<&BTreeSet<ImageId>> {
        self.positives.get(&query)
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Parses lines of the form `query_id: pos_id pos_id ...`. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut gt = GroundTruth::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| Error::format("ground-truth file", format!("line {}: {why}", lineno + 1));
            let (q, rest) = line.split_once(':').ok_or_else(|| bad("missing ':'"))?;
            let q: ImageId = q.trim().parse().map_err(|_| bad("bad query id"))?;
            let pos = rest
                .split_whitespace()
                .map(|t| t.parse::<ImageId>().map_err(|_| bad("bad positive id")))
                .collect::<Result<Vec<_>>>()?;
            if pos.is_empty() {
                return Err(Error::EmptyPositives(q));
            }
            gt.insert(q, pos);
        }
        Ok(gt)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (q, pos) in &self.positives {
            let ids: Vec<String> = pos.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{q}: {}", ids.join(" "));
        }
        out
    }

    /// Checks ids against a corpus of `n_images` and the protocol's shape.
    pub fn validate(&self, n_images: usize, protocol: Protocol) -> Result<()> {
        for (&q, pos) in &self.positives {
            if q as usize >= n_images {
                return Err(Error::UnknownQuery(q));
            }
            if pos.is_empty() {
                return Err(Error::EmptyPositives(q));
            }
            if let Some(&p) = pos.iter().find(|&&p| p as usize >= n_images) {
                return Err(Error::UnknownImage(p));
            }
            if protocol == Protocol::UkbenchLike && pos.len() != 4 {
                return Err(Error::Protocol(format!(
                    "query {q} has {} positives; the groups-of-4 protocol needs exactly 4",
                    pos.len()
                )));
            }
        }
        Ok(())
    }
}

/// Mean over positive hits of precision at the hit's rank. Positives that
/// never appear contribute zero.
pub fn average_precision(ranking: &[ImageId], positives: &BTreeSet<ImageId>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Protocol("average precision needs a positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / positives.len() as f64)
}

fn per_query_rankings<'a>(
    rankings: &'a BTreeMap<ImageId, Vec<ImageId>>,
    gt: &'a GroundTruth,
) -> impl Iterator<Item = Result<(ImageId, &'a [ImageId], &'a BTreeSet<ImageId>)>> + 'a {
    gt.positives.iter().map(move |(&q, pos)| {
        let r = rankings.get(&q).ok_or(Error::UnknownQuery(q))?;
        Ok((q, r.as_slice(), pos))
    })
}

/// Mean average precision. Under the Holidays-like protocol the query is
/// removed from its own ranking and positive set first.
pub fn mean_ap(
    rankings: &BTreeMap<ImageId, Vec<ImageId>>,
    gt: &GroundTruth,
    protocol: Protocol,
) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Protocol("ground truth has no queries".into()));
    }
    let mut total = 0.0;
    for item in per_query_rankings(rankings, gt) {
        let (q, ranking, pos) = item?;
        let ap = match protocol {
            Protocol::HolidaysLike => {
                let ranking: Vec<ImageId> = ranking.iter().copied().filter(|&id| id != q).collect();
                let pos: BTreeSet<ImageId> = pos.iter().copied().filter(|&id| id != q).collect();
                if pos.is_empty() {
                    return Err(Error::EmptyPositives(q));
                }
                average_precision(&ranking, &pos)?
            }
            Protocol::UkbenchLike => average_precision(ranking, pos)?,
        };
        total += ap;
    }
    Ok(total / gt.len() as f64)
}

/// Mean number of positives among the top four results.
pub fn ns_score(rankings: &BTreeMap<ImageId, Vec<ImageId>>, gt: &GroundTruth) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Protocol("ground truth has no queries".into()));
    }
    let mut total = 0usize;
    for item in per_query_rankings(rankings, gt) {
        let (q, ranking, pos) = item?;
        if pos.len() != 4 {
            return Err(Error::Protocol(format!(
                "query {q} has {} positives; N-S needs exactly 4",
                pos.len()
            )));
        }
        total += ranking.iter().take(4).filter(|id| pos.contains(id)).count();
    }
    Ok(total as f64 / gt.len() as f64)
}

pub fn score(
    rankings: &BTreeMap<ImageId, Vec<ImageId>>,
    gt: &GroundTruth,
    protocol: Protocol,
) -> Result<f64> {
    match protocol.metric() {
        Metric::MeanAp => mean_ap(rankings, gt, protocol),
        Metric::NsScore => ns_score(rankings, gt),
    }
}

/// Outcome of running every ground-truth query through the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub metric: Metric,
    pub value: f64,
    pub mean_comparisons: f64,
    pub results: Vec<RankList>,
}

/// Prepares every ground-truth query from the database's own descriptors.
pub fn prepare_queries(
    engine: &Engine,
    descriptors: &[crate::codebook::LocalDescriptor],
    gt: &GroundTruth,
    cfg: &PipelineConfig,
) -> Result<Vec<PreparedQuery>> {
    let mut by_image: BTreeMap<ImageId, Vec<crate::codebook::LocalDescriptor>> = BTreeMap::new();
    let wanted: BTreeSet<ImageId> = gt.queries().collect();
    for d in descriptors.iter().filter(|d| wanted.contains(&d.image_id)) {
        by_image.entry(d.image_id).or_default().push(d.clone());
    }
    let queries: Vec<ImageId> = gt.queries().collect();
    queries
        .par_iter()
        .map(|&q| {
            let own = by_image.get(&q).map(Vec::as_slice).unwrap_or(&[]);
            engine.prepare_database_image(q, own, cfg)
        })
        .collect()
}

/// Runs all queries at full depth and scores them under `protocol`.
pub fn evaluate(
    engine: &Engine,
    queries: &[PreparedQuery],
    gt: &GroundTruth,
    protocol: Protocol,
    cfg: &PipelineConfig,
) -> Result<EvalRun> {
    gt.validate(engine.n_images(), protocol)?;
    let results: Vec<RankList> = queries
        .par_iter()
        .map(|q| engine.run_query(q, cfg))
        .collect::<Result<_>>()?;
    summarize(results, gt, protocol)
}

fn summarize(results: Vec<RankList>, gt: &GroundTruth, protocol: Protocol) -> Result<EvalRun> {
    let mut rankings = BTreeMap::new();
    for r in &results {
        if let Some(q) = r.query_id {
            rankings.insert(q, r.full_ranking());
        }
    }
    let value = score(&rankings, gt, protocol)?;
    let mean_comparisons =
        results.iter().map(|r| r.comparison_count as f64).sum::<f64>() / results.len().max(1) as f64;
    Ok(EvalRun {
        metric: protocol.metric(),
        value,
        mean_comparisons,
        results,
    })
}

/// Axes of a sweep over one built engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub candidates: Vec<usize>,
    pub weights: Vec<bool>,
    /// Record mean wall-clock time per query. Timings make reports
    /// non-reproducible, so this is off by default.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub distractors: usize,
    pub candidates: usize,
    pub weights: bool,
    pub metric: Metric,
    pub value: f64,
    pub mean_comparisons: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_query_micros: Option<f64>,
}

/// One row per (K, weights) pair. The holistic pass is shared across rows.
pub fn sweep(
    engine: &Engine,
    queries: &[PreparedQuery],
    gt: &GroundTruth,
    protocol: Protocol,
    base: &PipelineConfig,
    spec: &SweepSpec,
    distractors: usize,
) -> Result<Vec<SweepRow>> {
    gt.validate(engine.n_images(), protocol)?;
    let holistic = queries
        .par_iter()
        .map(|q| engine.holistic_ranking(q))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &k in &spec.candidates {
        for &weights in &spec.weights {
            let cfg = PipelineConfig {
                candidates: k,
                weights_enabled: weights,
                ..base.clone()
            };
            let (results, micros) = if spec.timing {
                // Timed runs repeat the holistic pass so latency covers the whole query.
                let start = Instant::now();
                let results = queries
                    .iter()
                    .map(|q| engine.run_query(q, &cfg))
                    .collect::<Result<Vec<_>>>()?;
                let micros = start.elapsed().as_secs_f64() * 1e6 / queries.len().max(1) as f64;
                (results, Some(micros))
            } else {
                let results = queries
                    .par_iter()
                    .zip(&holistic)
                    .map(|(q, h)| engine.rank_from_holistic(q, h, &cfg))
                    .collect::<Result<Vec<_>>>()?;
                (results, None)
            };
            let run = summarize(results, gt, protocol)?;
            rows.push(SweepRow {
                distractors,
                candidates: k,
                weights,
                metric: run.metric,
                value: run.value,
                mean_comparisons: run.mean_comparisons,
                mean_query_micros: micros,
            });
        }
    }
    Ok(rows)
}

/// Aligned-column text table.
pub fn format_table(rows: &[SweepRow]) -> String {
    let timing = rows.iter().any(|r| r.mean_query_micros.is_some());
    let mut out = String::new();
    let _ = write!(
        out,
        "{:>11} {:>10} {:>7} {:>6} {:>10} {:>14}",
        "distractors", "K", "weights", "metric", "value", "comparisons"
    );
    if timing {
        let _ = write!(out, " {:>12}", "query_us");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{:>11} {:>10} {:>7} {:>6} {:>10.6} {:>14.1}",
            r.distractors,
            r.candidates,
            if r.weights { "on" } else { "off" },
            r.metric.to_string(),
            r.value,
            r.mean_comparisons
        );
        if let Some(us) = r.mean_query_micros {
            let _ = write!(out, " {us:>12.1}");
        }
        out.push('\n');
    }
    out
}

/// One JSON object per line.
pub fn format_jsonl(rows: &[SweepRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("sweep row serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[ImageId]) -> BTreeSet<ImageId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[1, 2, 3], &set(&[1, 2])).unwrap(), 1.0);
        assert_eq!(average_precision(&[9, 1, 3], &set(&[1])).unwrap(), 0.5);
        let ap = average_precision(&[1, 7, 2], &set(&[1, 2])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        // Unranked positive contributes nothing.
        assert_eq!(average_precision(&[1], &set(&[1, 2])).unwrap(), 0.5);
        assert!(average_precision(&[1], &set(&[])).is_err());
    }

    #[test]
    fn mean_ap_examples() {
        let mut gt = GroundTruth::new();
        gt.insert(0, [1]);
        let mut rankings = BTreeMap::new();
        rankings.insert(0, vec![0, 1, 2]);
        // Holidays-like drops the query itself before scoring.
        assert_eq!(mean_ap(&rankings, &gt, Protocol::HolidaysLike).unwrap(), 1.0);
        gt.insert(5, [6]);
        rankings.insert(5, vec![7, 6]);
        assert_eq!(mean_ap(&rankings, &gt, Protocol::HolidaysLike).unwrap(), 0.75);
        rankings.remove(&5);
        assert!(matches!(
            mean_ap(&rankings, &gt, Protocol::HolidaysLike),
            Err(Error::UnknownQuery(5))
        ));
    }

    #[test]
    fn ns_examples() {
        let mut gt = GroundTruth::new();
        gt.insert(0, [0, 1, 2, 3]);
        gt.insert(4, [4, 5, 6, 7]);
        let mut rankings = BTreeMap::new();
        rankings.insert(0, vec![0, 1, 2, 3, 4]);
        rankings.insert(4, vec![4, 5, 6, 7, 0]);
        assert_eq!(ns_score(&rankings, &gt).unwrap(), 4.0);
        rankings.insert(0, vec![0, 9, 1, 8]);
        rankings.insert(4, vec![9, 8, 4, 5]);
        assert_eq!(ns_score(&rankings, &gt).unwrap(), 2.0);
        gt.insert(10, [10, 11]);
        rankings.insert(10, vec![10]);
        assert!(matches!(ns_score(&rankings, &gt), Err(Error::Protocol(_))));
    }

    #[test]
    fn ground_truth_text_roundtrip() {
        let gt = GroundTruth::parse("# header\n0: 1 2\n\n3: 4\n").unwrap();
        assert_eq!(gt.positives(0), Some(&set(&[1, 2])));
        assert_eq!(GroundTruth::parse(&gt.to_text()).unwrap(), gt);
        assert!(GroundTruth::parse("0 1 2").is_err());
        assert!(matches!(GroundTruth::parse("4:"), Err(Error::EmptyPositives(4))));
        assert!(gt.validate(5, Protocol::HolidaysLike).is_ok());
        assert!(gt.validate(3, Protocol::HolidaysLike).is_err());
        assert!(matches!(gt.validate(5, Protocol::UkbenchLike), Err(Error::Protocol(_))));
    }

    #[test]
    fn table_has_one_row_per_config() {
        let rows: Vec<SweepRow> = [1, 2, 4, 8]
            .iter()
            .map(|&k| SweepRow {
                distractors: 0,
                candidates: k,
                weights: true,
                metric: Metric::MeanAp,
                value: 0.5,
                mean_comparisons: 10.0,
                mean_query_micros: None,
            })
            .collect();
        assert_eq!(format_table(&rows).lines().count(), 5);
        assert_eq!(format_jsonl(&rows).lines().count(), 4);
        assert!(format_jsonl(&rows).starts_with("{\"distractors\":0,\"candidates\":1,"));
    }
}
