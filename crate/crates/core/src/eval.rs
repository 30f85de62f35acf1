//! Offline retrieval evaluation: Precision@k / Recall@k over labeled queries
//! for the full system and its ablations.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::EntryFilter;
use crate::model::CaseId;
use crate::retrieval::{RankedResult, RetrievalEngine};
use crate::session::random_ranking;

/// Number of relevant ids among the first `k` retrieved (or all of them when
/// fewer than `k` were retrieved).
pub fn hits_at_k(retrieved: &[CaseId], relevant: &BTreeSet<CaseId>, k: usize) -> Result<usize> {
    if k < 1 {
        return Err(Error::input("k must be at least 1"));
    }
    Ok(retrieved
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id))
        .count())
}

/// |top-k ∩ relevant| / k, evaluated at min(k, len) for short lists.
pub fn precision_at_k(retrieved: &[CaseId], relevant: &BTreeSet<CaseId>, k: usize) -> Result<f64> {
    let hits = hits_at_k(retrieved, relevant, k)?;
    let denom = k.min(retrieved.len());
    Ok(if denom == 0 {
        0.0
    } else {
        hits as f64 / denom as f64
    })
}

/// |top-k ∩ relevant| / |relevant|.
pub fn recall_at_k(retrieved: &[CaseId], relevant: &BTreeSet<CaseId>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::input("relevant set is empty"));
    }
    Ok(hits_at_k(retrieved, relevant, k)? as f64 / relevant.len() as f64)
}

/// Sample mean and standard error of the mean (n-1 denominator; 0 for n=1).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuery {
    pub query: String,
    pub relevant: BTreeSet<CaseId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalDataset {
    pub queries: Vec<EvalQuery>,
}

impl EvalDataset {
    pub fn new(queries: Vec<EvalQuery>) -> Result<Self> {
        let ds = EvalDataset { queries };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::input("evaluation dataset has no queries"));
        }
        let mut seen = BTreeSet::new();
        for q in &self.queries {
            if q.query.trim().is_empty() {
                return Err(Error::input("evaluation query is empty"));
            }
            if q.relevant.is_empty() {
                return Err(Error::input(format!(
                    "query {:?} has no relevant cases",
                    q.query
                )));
            }
            if !seen.insert(q.query.as_str()) {
                return Err(Error::input(format!("duplicate query {:?}", q.query)));
            }
        }
        Ok(())
    }

    /// One `{query, relevant}` object per line; blank lines are skipped.
    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut queries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let q: EvalQuery = serde_json::from_str(line)
                .map_err(|e| Error::input(format!("dataset line {}: {e}", i + 1)))?;
            queries.push(q);
        }
        Self::new(queries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for q in &self.queries {
            out.push_str(&serde_json::to_string(q)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn mean_relevant(&self) -> f64 {
        let total: usize = self.queries.iter().map(|q| q.relevant.len()).sum();
        total as f64 / self.queries.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemVariant {
    Full,
    NoTextAugmentation,
    NoImageEmbedding,
    TextOnly,
    Random,
}

impl SystemVariant {
    pub const ALL: [SystemVariant; 5] = [
        SystemVariant::Full,
        SystemVariant::NoTextAugmentation,
        SystemVariant::NoImageEmbedding,
        SystemVariant::TextOnly,
        SystemVariant::Random,
    ];

    pub fn key(self) -> &'static str {
        match self {
            SystemVariant::Full => "full",
            SystemVariant::NoTextAugmentation => "no_text_augmentation",
            SystemVariant::NoImageEmbedding => "no_image_embedding",
            SystemVariant::TextOnly => "text_only",
            SystemVariant::Random => "random",
        }
    }

    /// Comma-separated list, e.g. `full,text_only,random`.
    pub fn parse_list(s: &str) -> Result<Vec<SystemVariant>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let v: SystemVariant = part.parse()?;
            if !out.contains(&v) {
                out.push(v);
            }
        }
        if out.is_empty() {
            return Err(Error::input("no variants given"));
        }
        Ok(out)
    }
}

impl FromStr for SystemVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemVariant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::input(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for SystemVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Assumptions a reader of the report should know about.
pub const REPORT_ASSUMPTIONS: &[&str] = &[
    "no_image_embedding keeps augmented text entries and skips fusion with the image scan",
    "no_text_augmentation keeps fusion with the image scan and drops critique entries from the text scan",
    "text_only scores original description/text chunks only, without the image scan",
    "cases absent from a ranking are appended in ascending id order",
];

/// Full ordering of every case for one query under `variant`.
pub fn variant_ranking(
    engine: &RetrievalEngine,
    variant: SystemVariant,
    query: &str,
    seed: u64,
) -> Result<Vec<CaseId>> {
    let mut opts = engine.default_query_options();
    let result: RankedResult = match variant {
        SystemVariant::Random => {
            return Ok(random_ranking(&engine.database().case_ids(), seed).case_ids())
        }
        SystemVariant::Full => engine.text_query_with(query, &opts)?,
        SystemVariant::NoTextAugmentation => {
            opts.entry_filter = EntryFilter::OriginalOnly;
            engine.text_query_with(query, &opts)?
        }
        SystemVariant::NoImageEmbedding => {
            opts.use_image_scan = false;
            engine.text_query_with(query, &opts)?
        }
        SystemVariant::TextOnly => {
            opts.entry_filter = EntryFilter::OriginalOnly;
            opts.use_image_scan = false;
            engine.text_query_with(query, &opts)?
        }
    };
    let mut ids = result.case_ids();
    let present: BTreeSet<CaseId> = ids.iter().copied().collect();
    ids.extend(
        engine
            .database()
            .case_ids()
            .into_iter()
            .filter(|id| !present.contains(id)),
    );
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub precision_mean: f64,
    pub precision_sem: f64,
    pub recall_mean: f64,
    pub recall_sem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: SystemVariant,
    pub per_k: Vec<KMetrics>,
}

impl VariantReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.per_k.iter().find(|m| m.k == k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub assumptions: Vec<String>,
    pub case_count: usize,
    pub query_count: usize,
    pub k_max: usize,
    pub seed: u64,
    pub variants: Vec<VariantReport>,
}

/// Runs one variant over the dataset. Queries run in parallel; the random
/// variant uses `seed + query index` so each query gets its own permutation.
pub fn run_eval(
    engine: &RetrievalEngine,
    dataset: &EvalDataset,
    variant: SystemVariant,
    k_max: usize,
    seed: u64,
) -> Result<VariantReport> {
    if k_max < 1 {
        return Err(Error::input("k_max must be at least 1"));
    }
    dataset.validate()?;
    let rankings = dataset
        .queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| variant_ranking(engine, variant, &q.query, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut per_k = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut p = Vec::with_capacity(rankings.len());
        let mut r = Vec::with_capacity(rankings.len());
        for (ranking, q) in rankings.iter().zip(&dataset.queries) {
            p.push(precision_at_k(ranking, &q.relevant, k)?);
            r.push(recall_at_k(ranking, &q.relevant, k)?);
        }
        let (precision_mean, precision_sem) = mean_sem(&p);
        let (recall_mean, recall_sem) = mean_sem(&r);
        per_k.push(KMetrics {
            k,
            precision_mean,
            precision_sem,
            recall_mean,
            recall_sem,
        });
    }
    Ok(VariantReport { variant, per_k })
}

pub fn run_report(
    engine: &RetrievalEngine,
    dataset: &EvalDataset,
    variants: &[SystemVariant],
    k_max: usize,
    seed: u64,
) -> Result<EvalReport> {
    let variants = variants
        .iter()
        .map(|&v| run_eval(engine, dataset, v, k_max, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        assumptions: REPORT_ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        case_count: engine.database().len(),
        query_count: dataset.queries.len(),
        k_max,
        seed,
        variants,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    variant: &'a str,
    k: usize,
    metric: &'a str,
    mean: f64,
    sem: f64,
}

/// Plot-ready CSV: `variant,k,metric,mean,sem`.
pub fn write_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    for v in &report.variants {
        for m in &v.per_k {
            for (metric, mean, sem) in [
                ("precision", m.precision_mean, m.precision_sem),
                ("recall", m.recall_mean, m.recall_sem),
            ] {
                w.serialize(CsvRow {
                    variant: v.variant.key(),
                    k: m.k,
                    metric,
                    mean,
                    sem,
                })
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(())
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("report.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(report, std::io::BufWriter::new(file))
}
