//! Token-likelihood records and their newline-delimited JSON file format.
//!
//! One line holds one record:
//!
//! ```text
//! {"image_id":"img-1","source_label":"real","generator_id":"var-d30","condition":"207",
//!  "scales":[{"scale_index":0,"log_p_cond":[-1.5],"log_p_uncond":[-2.0]}]}
//! ```
//!
//! Floats are written in shortest round-trip decimal and parsed with correct
//! rounding, so `read_records(write_records(r)) == r` bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, RecordProblem, Result};

/// Label used for real (non-generated) images.
pub const REAL_LABEL: &str = "real";

/// Per-token log-probabilities of one scale, with and without the condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleBlock {
    pub scale_index: usize,
    pub log_p_cond: Vec<f64>,
    pub log_p_uncond: Vec<f64>,
}

impl ScaleBlock {
    pub fn len(&self) -> usize {
        self.log_p_cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_p_cond.is_empty()
    }

    /// `(log p(x|c), log p(x))` pairs in token order.
    pub fn tokens(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.log_p_cond
            .iter()
            .copied()
            .zip(self.log_p_uncond.iter().copied())
    }
}

/// Likelihoods of one image under one generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLikelihoodRecord {
    pub image_id: String,
    /// `"real"` or the identifier of the generator that produced the image.
    pub source_label: String,
    /// The generator whose likelihoods were extracted.
    pub generator_id: String,
    pub condition: String,
    pub scales: Vec<ScaleBlock>,
}

impl TokenLikelihoodRecord {
    pub fn is_real(&self) -> bool {
        self.source_label == REAL_LABEL
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    /// Token count per scale, `(T_0, ..., T_{S-1})`.
    pub fn layout(&self) -> Vec<usize> {
        self.scales.iter().map(ScaleBlock::len).collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.scales.iter().map(ScaleBlock::len).sum()
    }

    /// Checks every per-record invariant. Returns soft warnings for
    /// log-probabilities above zero.
    pub fn validate(&self) -> Result<Vec<Warning>> {
        self.validate_at(None)
    }

    fn validate_at(&self, line: Option<usize>) -> Result<Vec<Warning>> {
        let invalid = |field: String, problem| Error::InvalidRecord {
            line,
            image_id: self.image_id.clone(),
            field,
            problem,
        };
        if self.scales.is_empty() {
            return Err(invalid("scales".into(), RecordProblem::NoScales));
        }
        let mut warnings = Vec::new();
        for (pos, block) in self.scales.iter().enumerate() {
            if block.scale_index != pos {
                return Err(invalid(
                    format!("scales[{pos}].scale_index"),
                    RecordProblem::ScaleIndex {
                        expected: pos,
                        found: block.scale_index,
                    },
                ));
            }
            if block.log_p_cond.len() != block.log_p_uncond.len() {
                return Err(invalid(
                    format!("scales[{pos}]"),
                    RecordProblem::LengthMismatch {
                        cond: block.log_p_cond.len(),
                        uncond: block.log_p_uncond.len(),
                    },
                ));
            }
            if block.is_empty() {
                return Err(invalid(format!("scales[{pos}]"), RecordProblem::EmptyScale));
            }
            for (name, values) in [
                ("log_p_cond", &block.log_p_cond),
                ("log_p_uncond", &block.log_p_uncond),
            ] {
                for (index, &v) in values.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(invalid(
                            format!("scales[{pos}].{name}"),
                            RecordProblem::NonFinite { index },
                        ));
                    }
                    if v > 0.0 {
                        warnings.push(Warning {
                            line,
                            image_id: self.image_id.clone(),
                            field: format!("scales[{pos}].{name}[{index}]"),
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(warnings)
    }
}

/// A log-probability above zero. Tolerated, since synthetic data may
/// violate the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Warning {
    pub line: Option<usize>,
    pub image_id: String,
    pub field: String,
    pub value: f64,
}

/// Shape and label statistics of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n_records: usize,
    pub n_scales: usize,
    pub token_counts: Vec<usize>,
    pub label_counts: BTreeMap<String, usize>,
}

/// Checks that all records share one layout and returns it.
pub fn common_layout(records: &[TokenLikelihoodRecord]) -> Result<Vec<usize>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("no records".into()))?;
    let expected = first.layout();
    for rec in &records[1..] {
        let found = rec.layout();
        if found != expected {
            return Err(Error::InvalidRecord {
                line: None,
                image_id: rec.image_id.clone(),
                field: "scales".into(),
                problem: RecordProblem::Layout {
                    expected: expected.clone(),
                    found,
                },
            });
        }
    }
    Ok(expected)
}

pub fn summarize(records: &[TokenLikelihoodRecord]) -> Result<DatasetSummary> {
    let token_counts = common_layout(records)?;
    let mut label_counts = BTreeMap::new();
    for rec in records {
        *label_counts.entry(rec.source_label.clone()).or_insert(0) += 1;
    }
    Ok(DatasetSummary {
        n_records: records.len(),
        n_scales: token_counts.len(),
        token_counts,
        label_counts,
    })
}

/// Reads and validates a record file. Positive log-probabilities are logged
/// as warnings.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TokenLikelihoodRecord>> {
    let (records, warnings) = read_records_with_warnings(path.as_ref())?;
    if let Some(first) = warnings.first() {
        log::warn!(
            "{}: {} log-probabilities are > 0 (first: record `{}`, {} = {})",
            path.as_ref().display(),
            warnings.len(),
            first.image_id,
            first.field,
            first.value
        );
    }
    Ok(records)
}

pub fn read_records_with_warnings(
    path: &Path,
) -> Result<(Vec<TokenLikelihoodRecord>, Vec<Warning>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses newline-delimited records from any reader. Blank lines are skipped.
pub fn parse_records<R: BufRead>(reader: R) -> Result<(Vec<TokenLikelihoodRecord>, Vec<Warning>)> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut layout: Option<Vec<usize>> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, line_no)?;
        warnings.extend(record.validate_at(Some(line_no))?);
        let found = record.layout();
        match &layout {
            None => layout = Some(found),
            Some(expected) if *expected != found => {
                return Err(Error::InvalidRecord {
                    line: Some(line_no),
                    image_id: record.image_id,
                    field: "scales".into(),
                    problem: RecordProblem::Layout {
                        expected: expected.clone(),
                        found,
                    },
                });
            }
            Some(_) => {}
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Empty("record file contains no records".into()));
    }
    Ok((records, warnings))
}

fn parse_line(line: &str, line_no: usize) -> Result<TokenLikelihoodRecord> {
    match serde_json::from_str::<TokenLikelihoodRecord>(line) {
        Ok(rec) => Ok(rec),
        Err(err) => match locate_non_finite(line, line_no) {
            Some(non_finite) => Err(non_finite),
            None => Err(Error::Malformed {
                line: line_no,
                message: err.to_string(),
            }),
        },
    }
}

/// JSON has no spelling for NaN or infinities, so a line containing `NaN`,
/// `Infinity` or an overflowing literal fails to parse. Replace such bare
/// tokens with `null` and find where they sit, to report a precise
/// non-finite error instead of a generic syntax error.
fn locate_non_finite(line: &str, line_no: usize) -> Option<Error> {
    let mut patched = String::with_capacity(line.len());
    let mut replaced = false;
    let mut in_string = false;
    let mut escaped = false;
    let mut token = String::new();
    let flush = |token: &mut String, patched: &mut String, replaced: &mut bool| {
        if !token.is_empty() {
            match token.parse::<f64>() {
                Ok(v) if !v.is_finite() => {
                    patched.push_str("null");
                    *replaced = true;
                }
                _ => patched.push_str(token),
            }
            token.clear();
        }
    };
    for ch in line.chars() {
        if in_string {
            patched.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        if ch.is_ascii_alphanumeric() || matches!(ch, '+' | '-' | '.') {
            token.push(ch);
            continue;
        }
        flush(&mut token, &mut patched, &mut replaced);
        if ch == '"' {
            in_string = true;
        }
        patched.push(ch);
    }
    flush(&mut token, &mut patched, &mut replaced);
    if !replaced {
        return None;
    }
    let value: serde_json::Value = serde_json::from_str(&patched).ok()?;
    let image_id = value
        .get("image_id")
        .and_then(|v| v.as_str())
        .unwrap_or("<unknown>")
        .to_string();
    let scales = value.get("scales")?.as_array()?;
    for (pos, scale) in scales.iter().enumerate() {
        for name in ["log_p_cond", "log_p_uncond"] {
            let Some(values) = scale.get(name).and_then(|v| v.as_array()) else {
                continue;
            };
            if let Some(index) = values.iter().position(|v| v.is_null()) {
                return Some(Error::InvalidRecord {
                    line: Some(line_no),
                    image_id,
                    field: format!("scales[{pos}].{name}"),
                    problem: RecordProblem::NonFinite { index },
                });
            }
        }
    }
    None
}

/// Writes records one per line. An empty slice produces an empty file.
pub fn write_records(records: &[TokenLikelihoodRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for rec in records {
        rec.validate()?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode_records(records, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_records<W: Write>(
    records: &[TokenLikelihoodRecord],
    out: &mut W,
) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: &str, scales: Vec<(Vec<f64>, Vec<f64>)>) -> TokenLikelihoodRecord {
        TokenLikelihoodRecord {
            image_id: id.into(),
            source_label: label.into(),
            generator_id: "var-d30".into(),
            condition: "207".into(),
            scales: scales
                .into_iter()
                .enumerate()
                .map(|(i, (c, u))| ScaleBlock {
                    scale_index: i,
                    log_p_cond: c,
                    log_p_uncond: u,
                })
                .collect(),
        }
    }

    fn parse(text: &str) -> Result<Vec<TokenLikelihoodRecord>> {
        parse_records(text.as_bytes()).map(|(r, _)| r)
    }

    #[test]
    fn reads_two_single_scale_records() {
        let text = concat!(
            r#"{"image_id":"a","source_label":"real","generator_id":"g","condition":"c","scales":[{"scale_index":0,"log_p_cond":[-1.0,-2.0],"log_p_uncond":[-1.5,-2.5]}]}"#,
            "\n",
            r#"{"image_id":"b","source_label":"g","generator_id":"g","condition":"c","scales":[{"scale_index":0,"log_p_cond":[-0.5,-2.0],"log_p_uncond":[-1.0,-3.0]}]}"#,
            "\n"
        );
        let records = parse(text).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].image_id, "a");
        assert_eq!(records[1].image_id, "b");
        assert_eq!(records[0].n_scales(), 1);
    }

    #[test]
    fn length_mismatch_names_image() {
        let text = r#"{"image_id":"bad-7","source_label":"real","generator_id":"g","condition":"c","scales":[{"scale_index":0,"log_p_cond":[-1.0,-2.0],"log_p_uncond":[-1.5]}]}"#;
        let err = parse(text).unwrap_err();
        match &err {
            Error::InvalidRecord {
                image_id, problem, ..
            } => {
                assert_eq!(image_id, "bad-7");
                assert!(matches!(
                    problem,
                    RecordProblem::LengthMismatch { cond: 2, uncond: 1 }
                ));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("bad-7"));
    }

    #[test]
    fn nan_literal_is_non_finite_error() {
        let text = "\n".to_string()
            + r#"{"image_id":"n","source_label":"real","generator_id":"g","condition":"NaN","scales":[{"scale_index":0,"log_p_cond":[-1.0,NaN],"log_p_uncond":[-1.5,-1.0]}]}"#;
        match parse(&text).unwrap_err() {
            Error::InvalidRecord {
                line,
                image_id,
                field,
                problem,
            } => {
                assert_eq!(line, Some(2));
                assert_eq!(image_id, "n");
                assert_eq!(field, "scales[0].log_p_cond");
                assert_eq!(problem, RecordProblem::NonFinite { index: 1 });
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflowing_literal_is_non_finite_error() {
        let text = r#"{"image_id":"o","source_label":"real","generator_id":"g","condition":"c","scales":[{"scale_index":0,"log_p_cond":[-1.0],"log_p_uncond":[-1e999]}]}"#;
        assert!(matches!(
            parse(text).unwrap_err(),
            Error::InvalidRecord {
                problem: RecordProblem::NonFinite { index: 0 },
                ..
            }
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"image_id":"a","source_label":"real","generator_id":"g","condition":"c","scales":[{"scale_index":0,"log_p_cond":[-1.0],"log_p_uncond":[-1.5]}]}"#;
        let text = format!("{good}\n{{\"image_id\": 3\n");
        match parse(&text).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_layout_is_rejected() {
        let a = record("a", "real", vec![(vec![-1.0], vec![-1.0])]);
        let b = record("b", "real", vec![(vec![-1.0, -2.0], vec![-1.0, -2.0])]);
        let mut buf = Vec::new();
        encode_records(&[a, b], &mut buf).unwrap();
        match parse_records(buf.as_slice()).unwrap_err() {
            Error::InvalidRecord {
                line,
                image_id,
                problem: RecordProblem::Layout { .. },
                ..
            } => {
                assert_eq!(line, Some(2));
                assert_eq!(image_id, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(parse("\n\n"), Err(Error::Empty(_))));
    }

    #[test]
    fn scale_index_gap_is_rejected() {
        let mut r = record(
            "g",
            "real",
            vec![(vec![-1.0], vec![-1.0]), (vec![-1.0], vec![-1.0])],
        );
        r.scales[1].scale_index = 2;
        assert!(matches!(
            r.validate(),
            Err(Error::InvalidRecord {
                problem: RecordProblem::ScaleIndex {
                    expected: 1,
                    found: 2
                },
                ..
            })
        ));
    }

    #[test]
    fn positive_log_prob_is_only_a_warning() {
        let r = record("p", "real", vec![(vec![0.25, -1.0], vec![-1.0, -1.0])]);
        let warnings = r.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].field, "scales[0].log_p_cond[0]");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let r = record(
            "x",
            "real",
            vec![(
                vec![-6.25, 0.1 - 0.3, -1e-300],
                vec![-0.1, -7.0 / 3.0, -5e-324],
            )],
        );
        write_records(std::slice::from_ref(&r), &path).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 1);
        for (a, b) in r.scales[0].tokens().zip(back[0].scales[0].tokens()) {
            assert_eq!(a.0.to_bits(), b.0.to_bits());
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
        assert_eq!(back[0], r);
    }

    #[test]
    fn empty_write_reads_back_as_empty_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_records(&[], &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert!(matches!(read_records(&path), Err(Error::Empty(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_records("/nonexistent/records.jsonl").unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn summary_counts_labels_and_layout() {
        let s = |n: usize| (vec![-1.0; n], vec![-1.0; n]);
        let recs = vec![
            record("a", "real", vec![s(256)]),
            record("b", "real", vec![s(256)]),
            record("c", "var-d30", vec![s(256)]),
        ];
        let summary = summarize(&recs).unwrap();
        assert_eq!(summary.n_records, 3);
        assert_eq!(summary.token_counts, vec![256]);
        assert_eq!(summary.label_counts["real"], 2);
        assert_eq!(summary.label_counts["var-d30"], 1);
        assert_eq!(summary.label_counts.values().sum::<usize>(), 3);

        let var_layout = [1usize, 4, 9, 16, 25, 36, 64, 100, 169, 256];
        let rec = record("v", "real", var_layout.iter().map(|&n| s(n)).collect());
        let summary = summarize(&[rec]).unwrap();
        assert_eq!(summary.n_scales, 10);
        assert_eq!(summary.token_counts, var_layout.to_vec());

        assert!(matches!(summarize(&[]), Err(Error::Empty(_))));
    }
}
