//! Synthetic token-likelihood datasets with controlled class separation.
//!
//! Per token, `delta` is drawn from a two-component mixture (a main mode
//! plus an optional negative tail) shifted by a per-image, per-scale
//! offset. `log p(x)` is then drawn from a normal truncated so that both
//! `log p(x)` and `log p(x|c) = log p(x) + delta` stay `<= -0.01`; the
//! distribution of `delta` is left untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{ScaleBlock, TokenLikelihoodRecord, REAL_LABEL};

/// Upper bound of the truncated unconditional log-probability.
pub const UNCOND_CEILING: f64 = -0.01;

/// Mixture for `delta`: with probability `tail_weight` the token comes from
/// `N(tail_mean, tail_std^2)`, otherwise from `N(mean, std^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMixture {
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub tail_weight: f64,
    #[serde(default)]
    pub tail_mean: f64,
    #[serde(default = "one")]
    pub tail_std: f64,
}

fn one() -> f64 {
    1.0
}

impl DeltaMixture {
    pub fn normal(mean: f64, std: f64) -> Self {
        Self {
            mean,
            std,
            tail_weight: 0.0,
            tail_mean: 0.0,
            tail_std: 1.0,
        }
    }

    pub fn with_tail(mut self, weight: f64, mean: f64, std: f64) -> Self {
        self.tail_weight = weight;
        self.tail_mean = mean;
        self.tail_std = std;
        self
    }
}

/// Distribution parameters of one class on one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScale {
    pub delta: DeltaMixture,
    /// Std of an offset shared by all tokens of this scale in one image.
    #[serde(default)]
    pub shift_std: f64,
    pub uncond_mean: f64,
    pub uncond_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub real: ClassScale,
    pub fake: ClassScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub name: String,
    pub version: u32,
    /// Written as `generator_id` of every record and `source_label` of the
    /// generated ones.
    pub generator_id: String,
    pub token_counts: Vec<usize>,
    pub scales: Vec<ScaleProfile>,
    pub seed: u64,
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidArgument(format!(
                "profile `{}`: {msg}",
                self.name
            )))
        };
        if self.token_counts.is_empty() || self.token_counts.contains(&0) {
            return bad(format!(
                "token_counts {:?} must be nonempty and positive",
                self.token_counts
            ));
        }
        if self.scales.len() != self.token_counts.len() {
            return bad(format!(
                "{} scale parameter sets for {} scales",
                self.scales.len(),
                self.token_counts.len()
            ));
        }
        if self.generator_id.is_empty() || self.generator_id == REAL_LABEL {
            return bad(format!("invalid generator_id `{}`", self.generator_id));
        }
        for (s, sp) in self.scales.iter().enumerate() {
            for (class, c) in [("real", &sp.real), ("fake", &sp.fake)] {
                let d = &c.delta;
                let finite = [
                    d.mean,
                    d.std,
                    d.tail_mean,
                    d.tail_std,
                    c.shift_std,
                    c.uncond_mean,
                    c.uncond_std,
                ]
                .iter()
                .all(|v| v.is_finite());
                if !finite {
                    return bad(format!("scale {s} {class}: non-finite parameter"));
                }
                if d.std <= 0.0 || d.tail_std <= 0.0 || c.uncond_std <= 0.0 {
                    return bad(format!(
                        "scale {s} {class}: standard deviations must be > 0"
                    ));
                }
                if c.shift_std < 0.0 {
                    return bad(format!("scale {s} {class}: shift_std must be >= 0"));
                }
                if !(0.0..=1.0).contains(&d.tail_weight) {
                    return bad(format!("scale {s} {class}: tail_weight must be in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile is representable as TOML")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

struct ClassSampler {
    main: Normal<f64>,
    tail: Normal<f64>,
    tail_weight: f64,
    shift: Option<Normal<f64>>,
    uncond: Normal<f64>,
}

impl ClassSampler {
    fn new(c: &ClassScale) -> Self {
        let d = &c.delta;
        Self {
            main: Normal::new(d.mean, d.std).expect("validated"),
            tail: Normal::new(d.tail_mean, d.tail_std).expect("validated"),
            tail_weight: d.tail_weight,
            shift: (c.shift_std > 0.0).then(|| Normal::new(0.0, c.shift_std).expect("validated")),
            uncond: Normal::new(c.uncond_mean, c.uncond_std).expect("validated"),
        }
    }

    /// `log p(x)` truncated to `<= ceiling` by rejection; falls back to the
    /// ceiling itself when the bound sits deep in the lower tail.
    fn uncond<R: Rng>(&self, rng: &mut R, ceiling: f64) -> f64 {
        for _ in 0..64 {
            let v = self.uncond.sample(rng);
            if v <= ceiling {
                return v;
            }
        }
        ceiling
    }

    fn delta<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.tail_weight {
            self.tail.sample(rng)
        } else {
            self.main.sample(rng)
        }
    }
}

const FAKE_STREAM_BIT: u64 = 1 << 63;

/// Draws `n_real` real and `n_fake` generated records. Each record uses its
/// own random stream derived from `(profile.seed, class, index)`, so output
/// is independent of generation order.
pub fn generate(
    profile: &SynthProfile,
    n_real: usize,
    n_fake: usize,
) -> Result<(Vec<TokenLikelihoodRecord>, Vec<TokenLikelihoodRecord>)> {
    profile.validate()?;
    if n_real == 0 || n_fake == 0 {
        return Err(Error::InvalidArgument(
            "record counts must be positive".into(),
        ));
    }
    let real_samplers: Vec<_> = profile
        .scales
        .iter()
        .map(|s| ClassSampler::new(&s.real))
        .collect();
    let fake_samplers: Vec<_> = profile
        .scales
        .iter()
        .map(|s| ClassSampler::new(&s.fake))
        .collect();

    let make = |index: usize, fake: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
        rng.set_stream(index as u64 | if fake { FAKE_STREAM_BIT } else { 0 });
        let samplers = if fake { &fake_samplers } else { &real_samplers };
        let scales = profile
            .token_counts
            .iter()
            .zip(samplers)
            .enumerate()
            .map(|(s, (&t_s, sampler))| {
                let shift = sampler.shift.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                let mut log_p_cond = Vec::with_capacity(t_s);
                let mut log_p_uncond = Vec::with_capacity(t_s);
                for _ in 0..t_s {
                    let d = sampler.delta(&mut rng) + shift;
                    let pu = sampler.uncond(&mut rng, UNCOND_CEILING - d.max(0.0));
                    log_p_uncond.push(pu);
                    log_p_cond.push(pu + d);
                }
                ScaleBlock {
                    scale_index: s,
                    log_p_cond,
                    log_p_uncond,
                }
            })
            .collect();
        let (image_id, source_label) = if fake {
            (
                format!("{}-{index:05}", profile.generator_id),
                profile.generator_id.clone(),
            )
        } else {
            (format!("real-{index:05}"), REAL_LABEL.to_string())
        };
        TokenLikelihoodRecord {
            image_id,
            source_label,
            generator_id: profile.generator_id.clone(),
            condition: format!("class-{}", index % 1000),
            scales,
        }
    };

    let real = (0..n_real).map(|i| make(i, false)).collect();
    let fake = (0..n_fake).map(|i| make(i, true)).collect();
    Ok((real, fake))
}

pub const PROFILE_NAMES: [&str; 5] = [
    "var-like",
    "infinity-like",
    "single-scale",
    "one-hot-scale",
    "null",
];

/// Profile version; bump when any built-in parameter changes.
const VERSION: u32 = 1;

fn class(delta: DeltaMixture, shift_std: f64, uncond_mean: f64, uncond_std: f64) -> ClassScale {
    ClassScale {
        delta,
        shift_std,
        uncond_mean,
        uncond_std,
    }
}

fn same(c: ClassScale) -> ScaleProfile {
    ScaleProfile {
        real: c.clone(),
        fake: c,
    }
}

/// Next-scale layout: coarse scales carry few noisy tokens, the two finest
/// scales separate the classes. Real images put a heavy share of tokens in
/// a strongly negative tail; generated images rarely do.
fn var_like() -> SynthProfile {
    let coarse = || same(class(DeltaMixture::normal(0.5, 2.0), 0.8, -4.0, 1.5));
    let fine = || ScaleProfile {
        real: class(
            DeltaMixture::normal(1.0, 1.0).with_tail(0.2, -5.0, 1.5),
            0.6,
            -6.0,
            1.5,
        ),
        fake: class(
            DeltaMixture::normal(1.0, 1.0).with_tail(0.05, -5.0, 1.5),
            0.6,
            -5.5,
            1.5,
        ),
    };
    SynthProfile {
        name: "var-like".into(),
        version: VERSION,
        generator_id: "var-like".into(),
        token_counts: vec![1, 4, 9, 16, 36],
        scales: vec![coarse(), coarse(), coarse(), fine(), fine()],
        seed: 0,
    }
}

/// Role reversal: generated images carry the negative tail, concentrated on
/// middle scales, while the finest scale is uninformative noise.
fn infinity_like() -> SynthProfile {
    let coarse = || same(class(DeltaMixture::normal(0.0, 1.5), 0.5, -4.0, 1.5));
    let mid = || ScaleProfile {
        real: class(
            DeltaMixture::normal(0.5, 1.0).with_tail(0.04, -4.0, 1.5),
            0.5,
            -5.0,
            1.5,
        ),
        fake: class(
            DeltaMixture::normal(0.5, 1.0).with_tail(0.2, -4.0, 1.5),
            0.5,
            -4.6,
            1.5,
        ),
    };
    let finest = same(class(DeltaMixture::normal(0.2, 1.5), 1.0, -6.0, 1.5));
    SynthProfile {
        name: "infinity-like".into(),
        version: VERSION,
        generator_id: "infinity-like".into(),
        token_counts: vec![1, 4, 9, 16, 36],
        scales: vec![coarse(), coarse(), mid(), mid(), finest],
        seed: 0,
    }
}

/// One scale of 256 tokens, as for a next-token generator.
fn single_scale() -> SynthProfile {
    SynthProfile {
        name: "single-scale".into(),
        version: VERSION,
        generator_id: "single-scale".into(),
        token_counts: vec![256],
        scales: vec![ScaleProfile {
            real: class(
                DeltaMixture::normal(0.8, 1.0).with_tail(0.15, -4.0, 1.5),
                0.5,
                -5.0,
                1.5,
            ),
            fake: class(
                DeltaMixture::normal(0.8, 1.0).with_tail(0.05, -4.0, 1.5),
                0.5,
                -5.0,
                1.5,
            ),
        }],
        seed: 0,
    }
}

/// Signal only on scale 1; the other scales are pure per-image noise.
fn one_hot_scale() -> SynthProfile {
    let noise = || same(class(DeltaMixture::normal(0.0, 1.0), 1.0, -5.0, 1.5));
    SynthProfile {
        name: "one-hot-scale".into(),
        version: VERSION,
        generator_id: "one-hot-scale".into(),
        token_counts: vec![4, 16, 36],
        scales: vec![
            noise(),
            ScaleProfile {
                real: class(DeltaMixture::normal(-0.3, 1.0), 0.2, -5.0, 1.5),
                fake: class(DeltaMixture::normal(0.3, 1.0), 0.2, -5.0, 1.5),
            },
            noise(),
        ],
        seed: 0,
    }
}

/// Identical classes on the var-like layout.
fn null() -> SynthProfile {
    let var = var_like();
    SynthProfile {
        name: "null".into(),
        generator_id: "null".into(),
        scales: var.scales.iter().map(|s| same(s.real.clone())).collect(),
        ..var
    }
}

pub fn builtin_profiles() -> Vec<SynthProfile> {
    vec![
        var_like(),
        infinity_like(),
        single_scale(),
        one_hot_scale(),
        null(),
    ]
}

pub fn builtin_profile(name: &str) -> Result<SynthProfile> {
    builtin_profiles()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown profile `{name}` (available: {})",
                PROFILE_NAMES.join(", ")
            ))
        })
}
