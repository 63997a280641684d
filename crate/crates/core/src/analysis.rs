//! Human–machine agreement analytics over joined annotation and
//! classification records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Annotation;
use crate::classifier::{ClassificationRecord, FrameDistribution};
use crate::framing::{Frame, FrameOrder};
use crate::jsonl::{write_atomic, StoreError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no joined pairs: accuracy is undefined")]
    EmptyJoin,
    #[error("bin cap {cap} must be a positive multiple of bin width {width}")]
    BadBins { width: usize, cap: usize },
    #[error("unknown export format {0:?} (expected csv or json)")]
    UnknownFormat(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedPair {
    pub item_id: String,
    pub annotator_id: String,
    pub model_id: String,
    pub human: Frame,
    pub alternative: Option<Frame>,
    pub machine: Frame,
    pub distribution: FrameDistribution,
    pub agreement: bool,
    pub word_count: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JoinResult {
    pub pairs: Vec<JoinedPair>,
    pub n_unjoined_annotations: usize,
    pub n_unjoined_classifications: usize,
}

/// Inner join on item id. Later records win per (item, annotator) and per
/// (item, model); pairs come out sorted by item, annotator, model.
pub fn join_records(
    annotations: &[Annotation],
    classifications: &[ClassificationRecord],
) -> JoinResult {
    let mut latest_ann: BTreeMap<(&str, &str), &Annotation> = BTreeMap::new();
    for a in annotations {
        latest_ann.insert((&a.item_id, &a.annotator_id), a);
    }
    let mut latest_cls: BTreeMap<(&str, &str), &ClassificationRecord> = BTreeMap::new();
    for c in classifications {
        latest_cls.insert((&c.item_id, &c.model_id), c);
    }
    let mut cls_by_item: BTreeMap<&str, Vec<&ClassificationRecord>> = BTreeMap::new();
    for ((item, _), c) in &latest_cls {
        cls_by_item.entry(item).or_default().push(c);
    }
    let annotated: BTreeSet<&str> = latest_ann.keys().map(|(item, _)| *item).collect();

    let mut out = JoinResult::default();
    for ((item, _), a) in &latest_ann {
        let Some(cls) = cls_by_item.get(item) else {
            out.n_unjoined_annotations += 1;
            continue;
        };
        for c in cls {
            let machine = c.distribution.predominant;
            out.pairs.push(JoinedPair {
                item_id: a.item_id.clone(),
                annotator_id: a.annotator_id.clone(),
                model_id: c.model_id.clone(),
                human: a.main_frame,
                alternative: a.alternative_frame,
                machine,
                distribution: c.distribution.clone(),
                agreement: a.main_frame == machine,
                word_count: a.shown_word_count,
            });
        }
    }
    out.n_unjoined_classifications = latest_cls
        .keys()
        .filter(|(item, _)| !annotated.contains(item))
        .count();
    out
}

/// Fills missing pair word counts from `counts` (item id → words).
pub fn fill_word_counts(pairs: &mut [JoinedPair], counts: &BTreeMap<String, usize>) {
    for p in pairs.iter_mut().filter(|p| p.word_count.is_none()) {
        p.word_count = counts.get(&p.item_id).copied();
    }
}

/// Rows are human main frames, columns machine predominant frames, both in
/// `order`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub frames: FrameOrder,
    pub counts: [[u64; 5]; 5],
}

impl ConfusionMatrix {
    pub fn new(frames: FrameOrder) -> Self {
        Self {
            frames,
            counts: [[0; 5]; 5],
        }
    }

    pub fn add(&mut self, human: Frame, machine: Frame) {
        self.counts[self.frames.rank(human)][self.frames.rank(machine)] += 1;
    }

    pub fn get(&self, human: Frame, machine: Frame) -> u64 {
        self.counts[self.frames.rank(human)][self.frames.rank(machine)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..5).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, human: Frame) -> u64 {
        self.counts[self.frames.rank(human)].iter().sum()
    }

    pub fn column_total(&self, machine: Frame) -> u64 {
        let col = self.frames.rank(machine);
        self.counts.iter().map(|row| row[col]).sum()
    }
}

pub fn confusion_matrix(pairs: &[JoinedPair], order: &FrameOrder) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(*order);
    for p in pairs {
        m.add(p.human, p.machine);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_frame_agreement: BTreeMap<Frame, u64>,
    pub n_joined: usize,
    pub n_unjoined_annotations: usize,
    pub n_unjoined_classifications: usize,
}

pub fn confusion_and_accuracy(
    pairs: &[JoinedPair],
    order: &FrameOrder,
) -> Result<AgreementReport, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::EmptyJoin);
    }
    let confusion = confusion_matrix(pairs, order);
    let per_frame_agreement = Frame::ALL
        .iter()
        .map(|f| (*f, confusion.get(*f, *f)))
        .collect();
    Ok(AgreementReport {
        accuracy: confusion.trace() as f64 / confusion.total() as f64,
        per_frame_agreement,
        n_joined: pairs.len(),
        n_unjoined_annotations: 0,
        n_unjoined_classifications: 0,
        confusion,
    })
}

/// [`confusion_and_accuracy`] over a join, carrying its unjoined counts.
pub fn agreement_report(
    join: &JoinResult,
    order: &FrameOrder,
) -> Result<AgreementReport, AnalysisError> {
    let mut report = confusion_and_accuracy(&join.pairs, order)?;
    report.n_unjoined_annotations = join.n_unjoined_annotations;
    report.n_unjoined_classifications = join.n_unjoined_classifications;
    Ok(report)
}

/// Word-count bins `[0, width)`, `[width, 2*width)`, … up to `cap`, plus a
/// final open `cap+` bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    pub width: usize,
    pub cap: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            width: 100,
            cap: 800,
        }
    }
}

impl BinSpec {
    pub fn new(width: usize, cap: usize) -> Result<Self, AnalysisError> {
        if width == 0 || cap == 0 || !cap.is_multiple_of(width) {
            return Err(AnalysisError::BadBins { width, cap });
        }
        Ok(Self { width, cap })
    }

    pub fn len(&self) -> usize {
        self.cap / self.width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, words: usize) -> usize {
        (words / self.width).min(self.cap / self.width)
    }

    pub fn bins(&self) -> Vec<LengthBin> {
        (0..self.len())
            .map(|i| {
                let start = i * self.width;
                if start >= self.cap {
                    LengthBin {
                        label: format!("{start}+"),
                        start,
                        end: None,
                    }
                } else {
                    let end = start + self.width - 1;
                    LengthBin {
                        label: format!("{start}-{end}"),
                        start,
                        end: Some(end),
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBin {
    pub label: String,
    pub start: usize,
    /// Inclusive upper bound; `None` for the open last bin.
    pub end: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthGrouping {
    Agreement,
    AlternativeFrame,
}

impl LengthGrouping {
    pub fn group_names(self) -> [&'static str; 2] {
        match self {
            LengthGrouping::Agreement => ["agree", "disagree"],
            LengthGrouping::AlternativeFrame => ["with_alternative", "without_alternative"],
        }
    }

    fn group_of(self, pair: &JoinedPair) -> usize {
        let first = match self {
            LengthGrouping::Agreement => pair.agreement,
            LengthGrouping::AlternativeFrame => pair.alternative.is_some(),
        };
        if first {
            0
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBinReport {
    pub grouping: LengthGrouping,
    pub groups: [String; 2],
    pub bins: Vec<LengthBin>,
    /// Raw counts, `[bin][group]`.
    pub counts: Vec<[u64; 2]>,
    /// Each group's column sums to one (for nonempty groups).
    pub within_group: Vec<[f64; 2]>,
    /// Each bin's row sums to one (for nonempty bins).
    pub within_bin: Vec<[f64; 2]>,
    /// Pairs left out because their word count is unknown.
    pub n_missing_length: usize,
}

impl LengthBinReport {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn group_totals(&self) -> [u64; 2] {
        let mut t = [0; 2];
        for row in &self.counts {
            t[0] += row[0];
            t[1] += row[1];
        }
        t
    }
}

/// Bins pairs by word count and normalizes the counts both ways.
pub fn length_bins(
    pairs: &[JoinedPair],
    grouping: LengthGrouping,
    spec: BinSpec,
) -> LengthBinReport {
    let mut counts = vec![[0u64; 2]; spec.len()];
    let mut missing = 0;
    for p in pairs {
        match p.word_count {
            Some(words) => counts[spec.index(words)][grouping.group_of(p)] += 1,
            None => missing += 1,
        }
    }
    normalize_bins(grouping, spec, counts, missing)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn normalize_bins(
    grouping: LengthGrouping,
    spec: BinSpec,
    counts: Vec<[u64; 2]>,
    n_missing_length: usize,
) -> LengthBinReport {
    let mut group_totals = [0u64; 2];
    for row in &counts {
        group_totals[0] += row[0];
        group_totals[1] += row[1];
    }
    let within_group = counts
        .iter()
        .map(|row| {
            [
                ratio(row[0], group_totals[0]),
                ratio(row[1], group_totals[1]),
            ]
        })
        .collect();
    let within_bin = counts
        .iter()
        .map(|row| {
            let total = row[0] + row[1];
            [ratio(row[0], total), ratio(row[1], total)]
        })
        .collect();
    LengthBinReport {
        grouping,
        groups: grouping.group_names().map(String::from),
        bins: spec.bins(),
        counts,
        within_group,
        within_bin,
        n_missing_length,
    }
}

pub const PROB_BINS: usize = 20;
pub const PROB_BIN_WIDTH: f64 = 1.0 / PROB_BINS as f64;

/// Histogram bin for a probability: right-open bins of width 0.05, the last
/// one closed at 1.
pub fn prob_bin(p: f64) -> usize {
    ((p * PROB_BINS as f64).floor().max(0.0) as usize).min(PROB_BINS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityGroup {
    pub histogram: Vec<u64>,
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub fraction_zero: Option<f64>,
    pub fraction_above_040: Option<f64>,
}

impl ProbabilityGroup {
    fn from_values(mut values: Vec<f64>) -> Self {
        let mut histogram = vec![0; PROB_BINS];
        for v in &values {
            histogram[prob_bin(*v)] += 1;
        }
        let n = values.len();
        values.sort_by(f64::total_cmp);
        let (mean, median, fraction_zero, fraction_above_040) = if n == 0 {
            (None, None, None, None)
        } else {
            let mean = values.iter().sum::<f64>() / n as f64;
            let median = if n % 2 == 1 {
                values[n / 2]
            } else {
                (values[n / 2 - 1] + values[n / 2]) / 2.0
            };
            let zero = values.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
            let above = values.iter().filter(|v| **v > 0.4).count() as f64 / n as f64;
            (Some(mean), Some(median), Some(zero), Some(above))
        };
        Self {
            histogram,
            count: n,
            mean,
            median,
            fraction_zero,
            fraction_above_040,
        }
    }
}

/// Distribution of the machine's probability for the human label, split
/// by agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityReport {
    pub bin_width: f64,
    pub renormalized: bool,
    pub agreement: ProbabilityGroup,
    pub disagreement: ProbabilityGroup,
}

/// Probability the machine gave to the annotator's main frame.
pub fn human_label_probability(pair: &JoinedPair, renormalize: bool) -> f64 {
    if renormalize {
        pair.distribution.renormalized().mass_of(pair.human)
    } else {
        pair.distribution.mass_of(pair.human)
    }
}

pub fn probability_histogram(pairs: &[JoinedPair], renormalize: bool) -> ProbabilityReport {
    let (agree, disagree): (Vec<&JoinedPair>, Vec<&JoinedPair>) =
        pairs.iter().partition(|p| p.agreement);
    let values = |group: Vec<&JoinedPair>| {
        group
            .into_iter()
            .map(|p| human_label_probability(p, renormalize))
            .collect::<Vec<_>>()
    };
    ProbabilityReport {
        bin_width: PROB_BIN_WIDTH,
        renormalized: renormalize,
        agreement: ProbabilityGroup::from_values(values(agree)),
        disagreement: ProbabilityGroup::from_values(values(disagree)),
    }
}

/// How the annotator's optional second frame relates to the machine label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternativeSummary {
    pub n_with_alternative: usize,
    pub n_disagreements_with_alternative: usize,
    /// Disagreements where the machine picked the annotator's alternative.
    pub machine_matches_alternative: usize,
}

pub fn alternative_summary(pairs: &[JoinedPair]) -> AlternativeSummary {
    let mut s = AlternativeSummary::default();
    for p in pairs {
        let Some(alt) = p.alternative else { continue };
        s.n_with_alternative += 1;
        if !p.agreement {
            s.n_disagreements_with_alternative += 1;
            if p.machine == alt {
                s.machine_matches_alternative += 1;
            }
        }
    }
    s
}

/// Every report produced by one analysis run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reports {
    pub frame_order: FrameOrder,
    pub n_joined: usize,
    pub n_unjoined_annotations: usize,
    pub n_unjoined_classifications: usize,
    pub confusion: ConfusionMatrix,
    /// `None` when nothing joined.
    pub agreement: Option<AgreementReport>,
    pub length_bins: LengthBinReport,
    pub alternative_bins: LengthBinReport,
    pub probability: ProbabilityReport,
    pub alternatives: AlternativeSummary,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalysisOptions {
    pub order: FrameOrder,
    pub bins: BinSpec,
    pub renormalize: bool,
}

pub fn analyze(join: &JoinResult, opts: &AnalysisOptions) -> Reports {
    let pairs = &join.pairs;
    Reports {
        frame_order: opts.order,
        n_joined: pairs.len(),
        n_unjoined_annotations: join.n_unjoined_annotations,
        n_unjoined_classifications: join.n_unjoined_classifications,
        confusion: confusion_matrix(pairs, &opts.order),
        agreement: agreement_report(join, &opts.order).ok(),
        length_bins: length_bins(pairs, LengthGrouping::Agreement, opts.bins),
        alternative_bins: length_bins(pairs, LengthGrouping::AlternativeFrame, opts.bins),
        probability: probability_histogram(pairs, opts.renormalize),
        alternatives: alternative_summary(pairs),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            _ => Err(AnalysisError::UnknownFormat(s.to_string())),
        }
    }
}

pub const CONFUSION_FILE: &str = "confusion.csv";
pub const AGREEMENT_FILE: &str = "agreement.json";
pub const LENGTH_BINS_FILE: &str = "length_bins.csv";
pub const PROB_HIST_FILE: &str = "prob_hist.csv";
pub const ALTERNATIVES_BINS_FILE: &str = "alternatives_bins.csv";

#[derive(Serialize)]
struct AgreementJson<'a> {
    frame_order: &'a FrameOrder,
    n_joined: usize,
    n_unjoined_annotations: usize,
    n_unjoined_classifications: usize,
    accuracy: Option<f64>,
    per_frame_agreement: Option<&'a BTreeMap<Frame, u64>>,
    confusion: &'a ConfusionMatrix,
    probability: &'a ProbabilityReport,
    alternatives: &'a AlternativeSummary,
}

fn agreement_json(r: &Reports) -> AgreementJson<'_> {
    AgreementJson {
        frame_order: &r.frame_order,
        n_joined: r.n_joined,
        n_unjoined_annotations: r.n_unjoined_annotations,
        n_unjoined_classifications: r.n_unjoined_classifications,
        accuracy: r.agreement.as_ref().map(|a| a.accuracy),
        per_frame_agreement: r.agreement.as_ref().map(|a| &a.per_frame_agreement),
        confusion: &r.confusion,
        probability: &r.probability,
        alternatives: &r.alternatives,
    }
}

fn csv_bytes(header: &[String], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn confusion_csv(r: &Reports) -> Vec<u8> {
    let mut header = vec!["human_frame".to_string()];
    header.extend(r.frame_order.iter().map(|f| f.id().to_string()));
    let rows = if r.n_joined == 0 {
        Vec::new()
    } else {
        r.frame_order
            .iter()
            .map(|h| {
                let mut row = vec![h.id().to_string()];
                row.extend(
                    r.frame_order
                        .iter()
                        .map(|m| r.confusion.get(h, m).to_string()),
                );
                row
            })
            .collect()
    };
    csv_bytes(&header, rows)
}

fn bins_csv(report: &LengthBinReport) -> Vec<u8> {
    let mut header: Vec<String> = ["normalization", "bin", "bin_start", "bin_end"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(report.groups.iter().cloned());
    let mut rows = Vec::new();
    if report.total() > 0 {
        let tables: [(&str, Vec<[String; 2]>); 3] = [
            (
                "count",
                report
                    .counts
                    .iter()
                    .map(|r| r.map(|c| c.to_string()))
                    .collect(),
            ),
            (
                "within_bin",
                report
                    .within_bin
                    .iter()
                    .map(|r| r.map(|v| v.to_string()))
                    .collect(),
            ),
            (
                "within_group",
                report
                    .within_group
                    .iter()
                    .map(|r| r.map(|v| v.to_string()))
                    .collect(),
            ),
        ];
        for (name, table) in tables {
            for (bin, values) in report.bins.iter().zip(table) {
                let mut row = vec![
                    name.to_string(),
                    bin.label.clone(),
                    bin.start.to_string(),
                    bin.end.map(|e| e.to_string()).unwrap_or_default(),
                ];
                row.extend(values);
                rows.push(row);
            }
        }
    }
    csv_bytes(&header, rows)
}

fn prob_csv(p: &ProbabilityReport) -> Vec<u8> {
    let header: Vec<String> = ["bin_start", "bin_end", "agreement", "disagreement"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = if p.agreement.count + p.disagreement.count == 0 {
        Vec::new()
    } else {
        (0..PROB_BINS)
            .map(|i| {
                vec![
                    (i as f64 / PROB_BINS as f64).to_string(),
                    ((i + 1) as f64 / PROB_BINS as f64).to_string(),
                    p.agreement.histogram[i].to_string(),
                    p.disagreement.histogram[i].to_string(),
                ]
            })
            .collect()
    };
    csv_bytes(&header, rows)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("reports serialize");
    out.push(b'\n');
    out
}

/// Writes the report file set into `out_dir`, each file replaced
/// atomically. Returns the written paths in a fixed order.
pub fn export_reports(
    reports: &Reports,
    out_dir: &Path,
    format: ExportFormat,
) -> Result<Vec<PathBuf>, AnalysisError> {
    let files: Vec<(String, Vec<u8>)> = match format {
        ExportFormat::Csv => vec![
            (CONFUSION_FILE.into(), confusion_csv(reports)),
            (AGREEMENT_FILE.into(), json_bytes(&agreement_json(reports))),
            (LENGTH_BINS_FILE.into(), bins_csv(&reports.length_bins)),
            (PROB_HIST_FILE.into(), prob_csv(&reports.probability)),
            (
                ALTERNATIVES_BINS_FILE.into(),
                bins_csv(&reports.alternative_bins),
            ),
        ],
        ExportFormat::Json => vec![
            ("confusion.json".into(), json_bytes(&reports.confusion)),
            (AGREEMENT_FILE.into(), json_bytes(&agreement_json(reports))),
            ("length_bins.json".into(), json_bytes(&reports.length_bins)),
            ("prob_hist.json".into(), json_bytes(&reports.probability)),
            (
                "alternatives_bins.json".into(),
                json_bytes(&reports.alternative_bins),
            ),
        ],
    };
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
