//! Detection and attribution metrics over per-generator scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::REAL_LABEL;

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// `labels[i]` is true for positives (generated images).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }

    // Walk tie groups in ascending order; each positive beats all negatives
    // strictly below its group and half of those inside it.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut neg_below = 0usize;
    let mut credit = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        credit += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Ok(credit / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from `(0, 0)` to `(1, 1)`, one point per distinct threshold
/// (scores `>=` threshold are called positive).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    auroc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
        });
    }
    Ok(points)
}

/// One image: its true source and a score under every candidate generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub image_id: String,
    pub source_label: String,
    pub scores: Vec<f64>,
}

impl ScoreRow {
    pub fn is_generated(&self) -> bool {
        self.source_label != REAL_LABEL
    }
}

/// Images x candidate generators.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub generators: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

/// Scores of one generator's model on a set of images, as written by the
/// `score` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: String,
    pub source_label: String,
    pub generator_id: String,
    pub score: f64,
}

pub fn write_scores<W: Write>(scores: &[ScoredImage], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in scores {
        w.serialize(s).map_err(csv_error("<scores>"))?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))
}

pub fn read_scores<R: Read>(input: R, name: &str) -> Result<Vec<ScoredImage>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: ScoredImage = row.map_err(csv_error(name))?;
        if !row.score.is_finite() {
            return Err(Error::Format {
                path: name.into(),
                message: format!("non-finite score for `{}`", row.image_id),
            });
        }
        out.push(row);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{name}: no scores")));
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoredImage>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(file, &path.display().to_string())
}

fn csv_error(name: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: name.to_string(),
        message: e.to_string(),
    }
}

impl ScoreTable {
    /// Joins per-generator score columns on `image_id`. Every image must be
    /// scored by every generator exactly once.
    pub fn from_columns(columns: &[Vec<ScoredImage>]) -> Result<Self> {
        let first = columns
            .first()
            .ok_or_else(|| Error::Empty("no score columns".into()))?;
        let mut generators = Vec::with_capacity(columns.len());
        for col in columns {
            let g = col
                .first()
                .ok_or_else(|| Error::Empty("empty score column".into()))?
                .generator_id
                .clone();
            if let Some(other) = col.iter().find(|s| s.generator_id != g) {
                return Err(Error::GeneratorMismatch {
                    expected: g,
                    found: other.generator_id.clone(),
                    image_id: other.image_id.clone(),
                });
            }
            if generators.contains(&g) {
                return Err(Error::InvalidArgument(format!(
                    "generator `{g}` given twice"
                )));
            }
            generators.push(g);
        }

        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut rows: Vec<ScoreRow> = Vec::with_capacity(first.len());
        for s in first {
            if index.insert(&s.image_id, rows.len()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "image `{}` scored twice by `{}`",
                    s.image_id, s.generator_id
                )));
            }
            rows.push(ScoreRow {
                image_id: s.image_id.clone(),
                source_label: s.source_label.clone(),
                scores: vec![f64::NAN; columns.len()],
            });
        }
        for (c, col) in columns.iter().enumerate() {
            let mut seen = vec![false; rows.len()];
            for s in col {
                let r = *index.get(s.image_id.as_str()).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "image `{}` is scored by `{}` but not by `{}`",
                        s.image_id, s.generator_id, generators[0]
                    ))
                })?;
                if seen[r] {
                    return Err(Error::InvalidArgument(format!(
                        "image `{}` scored twice by `{}`",
                        s.image_id, s.generator_id
                    )));
                }
                seen[r] = true;
                rows[r].scores[c] = s.score;
            }
            if let Some(r) = seen.iter().position(|&v| !v) {
                return Err(Error::InvalidArgument(format!(
                    "image `{}` has no score from `{}`",
                    rows[r].image_id, generators[c]
                )));
            }
        }
        let table = Self { generators, rows };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            if row.scores.len() != self.generators.len() {
                return Err(Error::InvalidArgument(format!(
                    "row `{}` has {} scores for {} generators",
                    row.image_id,
                    row.scores.len(),
                    self.generators.len()
                )));
            }
            if row.scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "row `{}` has a non-finite score",
                    row.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(ScoreRow::is_generated).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["image_id".to_string(), "source_label".to_string()];
        header.extend(self.generators.iter().cloned());
        w.write_record(&header).map_err(csv_error("<table>"))?;
        for row in &self.rows {
            let mut rec = vec![row.image_id.clone(), row.source_label.clone()];
            rec.extend(row.scores.iter().map(|s| s.to_string()));
            w.write_record(&rec).map_err(csv_error("<table>"))?;
        }
        w.flush().map_err(|e| Error::io("<table>", e))
    }
}

/// Detection score per image: the maximum over candidate generators.
pub fn ensemble_detect(table: &ScoreTable) -> Vec<f64> {
    table
        .rows
        .iter()
        .map(|r| r.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Generator(String),
    RealOrUnknown,
}

impl Verdict {
    /// Class name used in confusion matrices; real/unknown maps to `real`.
    pub fn class(&self) -> &str {
        match self {
            Verdict::Generator(g) => g,
            Verdict::RealOrUnknown => REAL_LABEL,
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Generator(g) => f.write_str(g),
            Verdict::RealOrUnknown => f.write_str("real/unknown"),
        }
    }
}

/// Assigns each image to the generator with the highest score above 0, or
/// to real/unknown when no score exceeds 0.
pub fn attribute(table: &ScoreTable) -> Vec<Verdict> {
    attribute_with_threshold(table, 0.0)
}

/// As [`attribute`] with the decision threshold moved to `threshold`.
/// Equal scores resolve to the lexicographically smallest generator id.
pub fn attribute_with_threshold(table: &ScoreTable, threshold: f64) -> Vec<Verdict> {
    table
        .rows
        .iter()
        .map(|row| {
            let mut best: Option<(f64, &str)> = None;
            for (g, &s) in table.generators.iter().zip(&row.scores) {
                if s <= threshold {
                    continue;
                }
                best = match best {
                    Some((bs, bg)) if bs > s || (bs == s && bg <= g.as_str()) => Some((bs, bg)),
                    _ => Some((s, g.as_str())),
                };
            }
            best.map_or(Verdict::RealOrUnknown, |(_, g)| {
                Verdict::Generator(g.to_string())
            })
        })
        .collect()
}

/// Confusion matrix with rows indexed by true class and columns by verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// `real` first, then the remaining classes in lexicographic order.
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Counts divided by row totals; empty rows stay zero.
    pub normalized: Vec<Vec<f64>>,
    pub accuracy: f64,
}

impl Confusion {
    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true_label".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header).map_err(csv_error("<confusion>"))?;
        for (class, row) in self.classes.iter().zip(&self.normalized) {
            let mut rec = vec![class.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_error("<confusion>"))?;
        }
        w.flush().map_err(|e| Error::io("<confusion>", e))
    }
}

/// Row-normalized confusion matrix over `{real} ∪ generators` (plus any
/// other true label that occurs) and overall accuracy.
pub fn confusion(
    verdicts: &[Verdict],
    true_labels: &[String],
    generators: &[String],
) -> Result<Confusion> {
    if verdicts.len() != true_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} verdicts but {} labels",
            verdicts.len(),
            true_labels.len()
        )));
    }
    if verdicts.is_empty() {
        return Err(Error::Empty("no verdicts".into()));
    }
    let mut others: BTreeSet<&str> = generators.iter().map(String::as_str).collect();
    others.extend(true_labels.iter().map(String::as_str));
    others.extend(verdicts.iter().map(Verdict::class));
    others.remove(REAL_LABEL);
    let mut classes = vec![REAL_LABEL.to_string()];
    classes.extend(others.into_iter().map(str::to_string));
    let pos: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let k = classes.len();
    let mut counts = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (v, t) in verdicts.iter().zip(true_labels) {
        let (r, c) = (pos[t.as_str()], pos[v.class()]);
        counts[r][c] += 1;
        correct += usize::from(r == c);
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(Confusion {
        classes,
        counts,
        normalized,
        accuracy: correct as f64 / verdicts.len() as f64,
    })
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStat {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl RunStat {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { values, mean, std }
    }
}

/// Metrics of one evaluation, or the aggregate over several runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: Option<f64>,
    pub roc_points: Vec<RocPoint>,
    pub confusion: Option<Confusion>,
    pub accuracy: Option<f64>,
    pub auroc_runs: Option<RunStat>,
    pub accuracy_runs: Option<RunStat>,
    /// Set when aggregating a single run; its std is reported as 0.
    pub single_run: bool,
}

impl EvalReport {
    pub fn detection(scores: &[f64], labels: &[bool]) -> Result<Self> {
        Ok(Self {
            auroc: Some(auroc(scores, labels)?),
            roc_points: roc_curve(scores, labels)?,
            ..Default::default()
        })
    }

    pub fn attribution(confusion: Confusion) -> Self {
        Self {
            accuracy: Some(confusion.accuracy),
            confusion: Some(confusion),
            ..Default::default()
        }
    }
}

/// Averages run reports: mean and sample std of AUROC and accuracy, and the
/// element-wise mean of the normalized confusion matrices.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Empty("no reports to aggregate".into()))?;
    let collect = |get: fn(&EvalReport) -> Option<f64>, name: &str| -> Result<Option<RunStat>> {
        let values: Vec<Option<f64>> = reports.iter().map(get).collect();
        if values.iter().all(Option::is_none) {
            return Ok(None);
        }
        values
            .into_iter()
            .map(|v| v.ok_or_else(|| Error::InvalidArgument(format!("a report lacks {name}"))))
            .collect::<Result<Vec<_>>>()
            .map(|v| Some(RunStat::from_values(v)))
    };
    let auroc_runs = collect(|r| r.auroc, "auroc")?;
    let accuracy_runs = collect(|r| r.accuracy, "accuracy")?;

    let confusion = match &first.confusion {
        None => None,
        Some(c0) => {
            let k = c0.classes.len();
            let mut counts = vec![vec![0usize; k]; k];
            let mut normalized = vec![vec![0.0; k]; k];
            for r in reports {
                let c = r.confusion.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("a report lacks a confusion matrix".into())
                })?;
                if c.classes != c0.classes {
                    return Err(Error::InvalidArgument(format!(
                        "class sets differ: {:?} vs {:?}",
                        c0.classes, c.classes
                    )));
                }
                for i in 0..k {
                    for j in 0..k {
                        counts[i][j] += c.counts[i][j];
                        normalized[i][j] += c.normalized[i][j] / reports.len() as f64;
                    }
                }
            }
            Some(Confusion {
                classes: c0.classes.clone(),
                counts,
                normalized,
                accuracy: accuracy_runs.as_ref().map_or(0.0, |s| s.mean),
            })
        }
    };

    Ok(EvalReport {
        auroc: auroc_runs.as_ref().map(|s| s.mean),
        roc_points: Vec::new(),
        confusion,
        accuracy: accuracy_runs.as_ref().map(|s| s.mean),
        auroc_runs,
        accuracy_runs,
        single_run: reports.len() == 1,
    })
}

/// Writes `(fpr, tpr)` rows with a header.
pub fn write_roc_csv<W: Write>(points: &[RocPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p).map_err(csv_error("<roc>"))?;
    }
    w.flush().map_err(|e| Error::io("<roc>", e))
}
