//! Plot-ready data behind the interpretability figures: per-scale AUROC,
//! token-wise balanced-ratio statistics, empirical CDFs, learned score
//! curves and scale weights. Everything is exported as CSV.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::auroc;
use crate::record::{common_layout, TokenLikelihoodRecord};
use crate::scores::{delta, delta_alpha, icas_token, InputMode, ScoreModel, ICAS_A, ICAS_B};

/// Fixed token scores usable without calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScore {
    Delta,
    Icas,
}

impl TokenScore {
    fn eval(self, pc: f64, pu: f64) -> f64 {
        match self {
            TokenScore::Delta => delta(pc, pu),
            TokenScore::Icas => icas_token(delta(pc, pu), ICAS_A, ICAS_B),
        }
    }
}

impl std::str::FromStr for TokenScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(TokenScore::Delta),
            "icas" => Ok(TokenScore::Icas),
            other => Err(Error::InvalidArgument(format!(
                "unknown score `{other}` (expected delta or icas)"
            ))),
        }
    }
}

fn mean_score(rec: &TokenLikelihoodRecord, score: TokenScore, scale: Option<usize>) -> f64 {
    let blocks = match scale {
        Some(s) => std::slice::from_ref(&rec.scales[s]),
        None => &rec.scales[..],
    };
    let (sum, n) = blocks
        .iter()
        .flat_map(|b| b.tokens())
        .fold((0.0, 0usize), |(sum, n), (pc, pu)| {
            (sum + score.eval(pc, pu), n + 1)
        });
    sum / n as f64
}

/// AUROC of the per-image mean token score, generated images positive.
/// With `per_scale` one value per scale (tokens of that scale only),
/// otherwise a single value over all tokens.
pub fn scale_auroc(
    real: &[TokenLikelihoodRecord],
    fake: &[TokenLikelihoodRecord],
    score: TokenScore,
    per_scale: bool,
) -> Result<Vec<f64>> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::SingleClass(
            "scale AUROC needs real and generated records".into(),
        ));
    }
    let layout = common_layout(real)?;
    if common_layout(fake)? != layout {
        return Err(Error::InvalidArgument(
            "real and generated records have different layouts".into(),
        ));
    }
    let labels: Vec<bool> = real
        .iter()
        .map(|_| false)
        .chain(fake.iter().map(|_| true))
        .collect();
    let scales: Vec<Option<usize>> = if per_scale {
        (0..layout.len()).map(Some).collect()
    } else {
        vec![None]
    };
    scales
        .into_iter()
        .map(|s| {
            let scores: Vec<f64> = real
                .iter()
                .chain(fake)
                .map(|r| mean_score(r, score, s))
                .collect();
            auroc(&scores, &labels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleStat {
    pub scale_index: usize,
    /// Over all tokens of the scale and all records.
    pub mean: f64,
    pub std: f64,
    /// Per token position, over records.
    pub token_mean: Vec<f64>,
    pub token_std: Vec<f64>,
}

/// Balanced-ratio statistics, scales ordered coarse to fine. Standard
/// deviations are population (divide by `n`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleStats {
    pub alpha: f64,
    pub scales: Vec<ScaleStat>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn token_stats(records: &[TokenLikelihoodRecord], alpha: f64) -> Result<ScaleStats> {
    let layout = common_layout(records)?;
    let scales = layout
        .iter()
        .enumerate()
        .map(|(s, &t_s)| {
            let all: Vec<f64> = records
                .iter()
                .flat_map(|r| {
                    r.scales[s]
                        .tokens()
                        .map(|(pc, pu)| delta_alpha(pc, pu, alpha))
                })
                .collect();
            let (mean, std) = mean_std(&all);
            let (token_mean, token_std) = (0..t_s)
                .map(|t| {
                    let column: Vec<f64> = records
                        .iter()
                        .map(|r| {
                            let b = &r.scales[s];
                            delta_alpha(b.log_p_cond[t], b.log_p_uncond[t], alpha)
                        })
                        .collect();
                    mean_std(&column)
                })
                .unzip();
            ScaleStat {
                scale_index: s,
                mean,
                std,
                token_mean,
                token_std,
            }
        })
        .collect();
    Ok(ScaleStats { alpha, scales })
}

impl ScaleStats {
    /// One row per token: global position, scale, position in scale, mean, std.
    pub fn write_token_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["position", "scale", "token", "mean", "std"])
            .map_err(csv_err)?;
        let mut position = 0usize;
        for s in &self.scales {
            for (t, (m, sd)) in s.token_mean.iter().zip(&s.token_std).enumerate() {
                w.write_record([
                    position.to_string(),
                    s.scale_index.to_string(),
                    t.to_string(),
                    m.to_string(),
                    sd.to_string(),
                ])
                .map_err(csv_err)?;
                position += 1;
            }
        }
        w.flush().map_err(|e| Error::io("<token-stats>", e))
    }

    pub fn write_scale_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scale", "tokens", "mean", "std"])
            .map_err(csv_err)?;
        for s in &self.scales {
            w.write_record([
                s.scale_index.to_string(),
                s.token_mean.len().to_string(),
                s.mean.to_string(),
                s.std.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<scale-stats>", e))
    }
}

/// Fraction of `values` at or below each grid point. `grid` must be sorted.
pub fn empirical_cdf(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("CDF of no values".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("CDF grid must be sorted".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(grid
        .iter()
        .map(|&g| sorted.partition_point(|&v| v <= g) as f64 / n)
        .collect())
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Default grid for score curves.
pub fn default_curve_grid() -> Vec<f64> {
    linspace(-15.0, 5.0, 512)
}

/// Every balanced ratio of every token in `records`.
pub fn balanced_ratios(records: &[TokenLikelihoodRecord], alpha: f64) -> Vec<f64> {
    records
        .iter()
        .flat_map(|r| r.scales.iter())
        .flat_map(|b| b.tokens().map(|(pc, pu)| delta_alpha(pc, pu, alpha)))
        .collect()
}

/// Token network output over a grid of balanced ratios.
pub fn score_curve(model: &ScoreModel, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if model.mode() != InputMode::Ratio1d {
        return Err(Error::InvalidArgument(
            "score curve needs a ratio1d model; use the 2-D surface for pair2d".into(),
        ));
    }
    Ok(grid.iter().map(|&x| (x, model.mlp.forward(&[x]))).collect())
}

/// Token score as a function of `(log_pc, log_pu)` over a grid, for either
/// mode. Rows are `(log_pc, log_pu, score)`.
pub fn score_surface(model: &ScoreModel, cond: &[f64], uncond: &[f64]) -> Vec<(f64, f64, f64)> {
    cond.iter()
        .flat_map(|&pc| uncond.iter().map(move |&pu| (pc, pu)))
        .map(|(pc, pu)| (pc, pu, model.token_score(pc, pu)))
        .collect()
}

pub fn weight_dump(model: &ScoreModel) -> Vec<(usize, f64)> {
    model.scale_weights.iter().copied().enumerate().collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        path: "<csv>".into(),
        message: e.to_string(),
    }
}

/// Writes rows of numbers under `header`.
pub fn write_table<W: Write, const N: usize>(
    header: [&str; N],
    rows: impl IntoIterator<Item = [String; N]>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::ScaleBlock;
    use crate::scores::Mlp;

    fn rec(label: &str, scales: Vec<Vec<(f64, f64)>>) -> TokenLikelihoodRecord {
        TokenLikelihoodRecord {
            image_id: "x".into(),
            source_label: label.into(),
            generator_id: "g".into(),
            condition: String::new(),
            scales: scales
                .into_iter()
                .enumerate()
                .map(|(i, t)| ScaleBlock {
                    scale_index: i,
                    log_p_cond: t.iter().map(|p| p.0).collect(),
                    log_p_uncond: t.iter().map(|p| p.1).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(
            empirical_cdf(&[1.0, 2.0, 3.0], &[2.0]).unwrap(),
            vec![2.0 / 3.0]
        );
        assert_eq!(empirical_cdf(&[1.0, 2.0, 3.0], &[0.5]).unwrap(), vec![0.0]);
        assert!(empirical_cdf(&[], &[0.0]).is_err());
        assert!(empirical_cdf(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn constant_records_have_zero_std() {
        let records: Vec<_> = (0..4)
            .map(|_| rec("real", vec![vec![(-1.0, -2.0)], vec![(-0.5, -3.0); 3]]))
            .collect();
        let stats = token_stats(&records, 0.7).unwrap();
        for s in &stats.scales {
            assert!(s.token_std.iter().all(|&v| v < 1e-12));
            assert!(s.std < 1e-12);
        }
        assert_eq!(stats.scales[1].token_mean.len(), 3);
    }

    #[test]
    fn single_scale_auroc_matches_whole_image() {
        let real: Vec<_> = [-3.0, -2.0, -1.5]
            .iter()
            .map(|&d| rec("real", vec![vec![(d - 1.0, -1.0), (-1.0, -1.0)]]))
            .collect();
        let fake: Vec<_> = [-1.0, 0.5, -2.5]
            .iter()
            .map(|&d| rec("g", vec![vec![(d - 1.0, -1.0), (-1.0, -1.0)]]))
            .collect();
        let per = scale_auroc(&real, &fake, TokenScore::Delta, true).unwrap();
        let flat = scale_auroc(&real, &fake, TokenScore::Delta, false).unwrap();
        assert_eq!(per, flat);
        assert!(scale_auroc(&real, &[], TokenScore::Icas, true).is_err());
    }

    #[test]
    fn zero_network_curve_is_zero() {
        let model = ScoreModel::new("g", InputMode::Ratio1d, 16, vec![1]);
        let curve = score_curve(&model, &default_curve_grid()).unwrap();
        assert_eq!(curve.len(), 512);
        assert_eq!(curve[0].0, -15.0);
        assert_eq!(curve[511].0, 5.0);
        assert!(curve.iter().all(|&(_, y)| y == 0.0));
    }

    #[test]
    fn curve_matches_forward_pass() {
        let mut model = ScoreModel::new("g", InputMode::Ratio1d, 3, vec![1]);
        let n = model.mlp.param_count();
        let params: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        model.mlp.read_params(&params);
        for (x, y) in score_curve(&model, &linspace(-4.0, 4.0, 9)).unwrap() {
            assert_eq!(y, model.mlp.forward(&[x]));
        }
        let mut pair = ScoreModel::new("g", InputMode::Pair2d, 3, vec![1]);
        assert!(score_curve(&pair, &[0.0]).is_err());
        let n = Mlp::count_for(InputMode::Pair2d, 3);
        pair.mlp
            .read_params(&(0..n).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        for (pc, pu, s) in score_surface(&pair, &[-3.0, -1.0], &[-4.0, -0.5]) {
            assert_eq!(s, pair.mlp.forward(&[pc, pu]));
        }
    }

    #[test]
    fn weight_dump_is_verbatim() {
        let mut model = ScoreModel::new("g", InputMode::Ratio1d, 2, vec![1, 4, 9]);
        model.scale_weights = vec![0.1, -0.2, 1.1];
        assert_eq!(weight_dump(&model), vec![(0, 0.1), (1, -0.2), (2, 1.1)]);
    }

    #[test]
    fn linspace_edges() {
        assert!(linspace(0.0, 1.0, 0).is_empty());
        assert_eq!(linspace(2.0, 3.0, 1), vec![2.0]);
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
    }
}
