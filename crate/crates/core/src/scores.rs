//! Closed-form token scores and the calibrated PRADA score.
//!
//! All scores operate on natural-log probabilities of ground-truth tokens,
//! once with the condition (`log_pc`) and once without (`log_pu`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CalibrationConfig;
use crate::error::{Error, RecordProblem, Result};
use crate::record::TokenLikelihoodRecord;

/// Default ICAS offset.
pub const ICAS_A: f64 = 1.75;
/// Default ICAS slope.
pub const ICAS_B: f64 = 1.3;

/// Pointwise mutual information between token and condition.
#[inline]
pub fn delta(log_pc: f64, log_pu: f64) -> f64 {
    log_pc - log_pu
}

/// Balanced ratio `(2 - alpha) log_pc - alpha log_pu`. `alpha = 1` gives
/// [`delta`]; 0 keeps only the conditional term, 2 only the unconditional.
#[inline]
pub fn delta_alpha(log_pc: f64, log_pu: f64, alpha: f64) -> f64 {
    (2.0 - alpha) * log_pc - alpha * log_pu
}

/// ICAS token score `d / (a + exp(b d))`.
#[inline]
pub fn icas_token(delta_val: f64, a: f64, b: f64) -> f64 {
    delta_val / (a + (b * delta_val).exp())
}

/// Flat mean of the default ICAS token score over every token of every scale.
pub fn icas_image(record: &TokenLikelihoodRecord) -> f64 {
    let (sum, n) = record
        .scales
        .iter()
        .flat_map(|s| s.tokens())
        .fold((0.0, 0usize), |(sum, n), (pc, pu)| {
            (sum + icas_token(delta(pc, pu), ICAS_A, ICAS_B), n + 1)
        });
    sum / n as f64
}

/// Flat mean of `delta` over all tokens; the raw likelihood-ratio baseline.
pub fn mean_delta(record: &TokenLikelihoodRecord) -> f64 {
    let (sum, n) = record
        .scales
        .iter()
        .flat_map(|s| s.tokens())
        .fold((0.0, 0usize), |(sum, n), (pc, pu)| {
            (sum + delta(pc, pu), n + 1)
        });
    sum / n as f64
}

/// What the token network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// The balanced ratio, one input.
    Ratio1d,
    /// The raw pair `(log_pc, log_pu)`; the balance parameter is unused.
    Pair2d,
}

impl InputMode {
    pub fn input_dim(self) -> usize {
        match self {
            InputMode::Ratio1d => 1,
            InputMode::Pair2d => 2,
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio1d" => Ok(InputMode::Ratio1d),
            "pair2d" => Ok(InputMode::Pair2d),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (expected ratio1d or pair2d)"
            ))),
        }
    }
}

#[inline]
pub(crate) fn elu(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

/// Token scoring network `d_in -> n_hidden -> n_hidden -> 1` with ELU on
/// both hidden layers. Weight matrices are row-major, one row per output
/// unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub mode: InputMode,
    pub n_hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl Mlp {
    pub fn zeros(mode: InputMode, n_hidden: usize) -> Self {
        let d_in = mode.input_dim();
        Self {
            mode,
            n_hidden,
            w1: vec![0.0; n_hidden * d_in],
            b1: vec![0.0; n_hidden],
            w2: vec![0.0; n_hidden * n_hidden],
            b2: vec![0.0; n_hidden],
            w3: vec![0.0; n_hidden],
            b3: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mode.input_dim()
    }

    /// Number of trainable scalars for a given input mode and width.
    pub fn count_for(mode: InputMode, n_hidden: usize) -> usize {
        let d_in = mode.input_dim();
        (d_in * n_hidden + n_hidden) + (n_hidden * n_hidden + n_hidden) + (n_hidden + 1)
    }

    pub fn param_count(&self) -> usize {
        Self::count_for(self.mode, self.n_hidden)
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        debug_assert_eq!(input.len(), self.input_dim());
        let h = self.n_hidden;
        let d_in = self.input_dim();
        let mut h1 = vec![0.0; h];
        for (j, out) in h1.iter_mut().enumerate() {
            let row = &self.w1[j * d_in..(j + 1) * d_in];
            let z = self.b1[j] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            *out = elu(z);
        }
        let mut out = self.b3;
        for j in 0..h {
            let row = &self.w2[j * h..(j + 1) * h];
            let z = self.b2[j] + row.iter().zip(&h1).map(|(w, x)| w * x).sum::<f64>();
            out += self.w3[j] * elu(z);
        }
        out
    }

    /// Parameters in canonical order `w1, b1, w2, b2, w3, b3`.
    pub fn write_params(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.param_count());
        let mut off = 0;
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3] {
            out[off..off + part.len()].copy_from_slice(part);
            off += part.len();
        }
        out[off] = self.b3;
    }

    pub fn read_params(&mut self, src: &[f64]) {
        debug_assert_eq!(src.len(), self.param_count());
        let mut off = 0;
        for part in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
        ] {
            let n = part.len();
            part.copy_from_slice(&src[off..off + n]);
            off += n;
        }
        self.b3 = src[off];
    }

    fn validate(&self) -> Result<()> {
        let h = self.n_hidden;
        let expected = [
            ("w1", self.w1.len(), h * self.input_dim()),
            ("b1", self.b1.len(), h),
            ("w2", self.w2.len(), h * h),
            ("b2", self.b2.len(), h),
            ("w3", self.w3.len(), h),
        ];
        if h == 0 {
            return Err(Error::Model("n_hidden must be > 0".into()));
        }
        for (name, found, want) in expected {
            if found != want {
                return Err(Error::Model(format!(
                    "mlp.{name} has {found} entries, expected {want}"
                )));
            }
        }
        let all = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .chain(&self.w3)
            .chain(std::iter::once(&self.b3));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("mlp contains non-finite parameters".into()));
        }
        Ok(())
    }
}

/// A calibrated scoring function for one generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub generator_id: String,
    pub alpha: f64,
    pub mlp: Mlp,
    pub scale_weights: Vec<f64>,
    pub token_counts: Vec<usize>,
    /// Training noise per scale, kept for provenance.
    pub noise_sigmas: Vec<f64>,
    /// Symmetric clamp applied to network inputs; 0 disables it.
    pub input_clamp: f64,
    pub config: Option<CalibrationConfig>,
    pub config_digest: String,
}

impl ScoreModel {
    /// Untrained model: `alpha = 1`, uniform scale weights, zero network.
    pub fn new(
        generator_id: impl Into<String>,
        mode: InputMode,
        n_hidden: usize,
        token_counts: Vec<usize>,
    ) -> Self {
        let s = token_counts.len();
        let scale_weights = if s == 1 {
            vec![1.0]
        } else {
            vec![1.0 / s as f64; s]
        };
        Self {
            generator_id: generator_id.into(),
            alpha: 1.0,
            mlp: Mlp::zeros(mode, n_hidden),
            scale_weights,
            noise_sigmas: vec![0.0; s],
            token_counts,
            input_clamp: 50.0,
            config: None,
            config_digest: String::new(),
        }
    }

    pub fn mode(&self) -> InputMode {
        self.mlp.mode
    }

    pub fn n_scales(&self) -> usize {
        self.token_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        let s = self.n_scales();
        if s == 0 || self.token_counts.contains(&0) {
            return Err(Error::Model(format!(
                "token_counts {:?} must be nonempty and positive",
                self.token_counts
            )));
        }
        if self.scale_weights.len() != s {
            return Err(Error::Model(format!(
                "{} scale weights for {s} scales",
                self.scale_weights.len()
            )));
        }
        if s == 1 && self.scale_weights[0] != 1.0 {
            return Err(Error::Model("single-scale models must have w = [1]".into()));
        }
        if !self.alpha.is_finite() || self.scale_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Model("non-finite alpha or scale weight".into()));
        }
        if !(self.input_clamp.is_finite() && self.input_clamp >= 0.0) {
            return Err(Error::Model("input_clamp must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Clamp applied to one network input.
    #[inline]
    pub fn clamp_input(&self, x: f64) -> f64 {
        if self.input_clamp > 0.0 {
            x.clamp(-self.input_clamp, self.input_clamp)
        } else {
            x
        }
    }

    /// Network score of one token (no training noise).
    pub fn token_score(&self, log_pc: f64, log_pu: f64) -> f64 {
        match self.mode() {
            InputMode::Ratio1d => {
                let x = self.clamp_input(delta_alpha(log_pc, log_pu, self.alpha));
                self.mlp.forward(&[x])
            }
            InputMode::Pair2d => self
                .mlp
                .forward(&[self.clamp_input(log_pc), self.clamp_input(log_pu)]),
        }
    }

    /// Ensures `record` was extracted under this model's generator with the
    /// same token layout.
    pub fn check_record(&self, record: &TokenLikelihoodRecord) -> Result<()> {
        if record.generator_id != self.generator_id {
            return Err(Error::GeneratorMismatch {
                expected: self.generator_id.clone(),
                found: record.generator_id.clone(),
                image_id: record.image_id.clone(),
            });
        }
        let layout = record.layout();
        if layout != self.token_counts {
            return Err(Error::InvalidRecord {
                line: None,
                image_id: record.image_id.clone(),
                field: "scales".into(),
                problem: RecordProblem::Layout {
                    expected: self.token_counts.clone(),
                    found: layout,
                },
            });
        }
        Ok(())
    }

    /// Weighted sum over scales of the mean token score.
    pub fn score(&self, record: &TokenLikelihoodRecord) -> Result<f64> {
        self.check_record(record)?;
        Ok(self.score_unchecked(record))
    }

    pub(crate) fn score_unchecked(&self, record: &TokenLikelihoodRecord) -> f64 {
        record
            .scales
            .iter()
            .zip(&self.scale_weights)
            .map(|(block, &w)| {
                let sum: f64 = block
                    .tokens()
                    .map(|(pc, pu)| self.token_score(pc, pu))
                    .sum();
                w * sum / block.len() as f64
            })
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Model(msg) => Error::Model(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// PRADA score of `record` under `model`.
pub fn prada_score(record: &TokenLikelihoodRecord, model: &ScoreModel) -> Result<f64> {
    model.score(record)
}
