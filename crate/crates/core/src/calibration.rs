//! Fits a [`ScoreModel`] to a small labelled set of real and generated
//! images extracted under one generator.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adamw::{AdamWConfig, CoordinateMask, OptimizerState};
use crate::autodiff::{
    init_mlp, loss_and_grad_into, GradWorkspace, LossSettings, NoiseSource, ParamLayout,
    ParamVector, Sample,
};
use crate::config::CalibrationConfig;
use crate::error::{Error, RecordProblem, Result};
use crate::evaluation::auroc;
use crate::record::{common_layout, TokenLikelihoodRecord};
use crate::scores::{delta, ScoreModel};

/// Stream ids carved out of the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Indices (into the real and fake inputs) of the training and held-out
/// records of one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_real: Vec<usize>,
    pub train_fake: Vec<usize>,
    pub test_real: Vec<usize>,
    pub test_fake: Vec<usize>,
}

impl Split {
    fn draw(n_real: usize, n_fake: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Self {
        let (train_real, test_real) = draw_class(n_real, per_class, rng);
        let (train_fake, test_fake) = draw_class(n_fake, per_class, rng);
        Self {
            train_real,
            train_fake,
            test_real,
            test_fake,
        }
    }
}

fn draw_class(n: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = index::sample(rng, n, k).into_vec();
    train.sort_unstable();
    let mut in_train = vec![false; n];
    for &i in &train {
        in_train[i] = true;
    }
    let test = (0..n).filter(|&i| !in_train[i]).collect();
    (train, test)
}

/// Result of one calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub model: ScoreModel,
    pub split: Split,
    pub seed: u64,
    /// Training loss after every step.
    pub losses: Vec<f64>,
}

impl Calibration {
    /// AUROC of the calibrated score on the held-out records, generated
    /// images counting as positives.
    pub fn test_auroc(
        &self,
        real: &[TokenLikelihoodRecord],
        fake: &[TokenLikelihoodRecord],
    ) -> Result<f64> {
        let (scores, labels) = self.test_scores(real, fake)?;
        auroc(&scores, &labels)
    }

    pub fn test_scores(
        &self,
        real: &[TokenLikelihoodRecord],
        fake: &[TokenLikelihoodRecord],
    ) -> Result<(Vec<f64>, Vec<bool>)> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (records, idx, label) in [
            (real, &self.split.test_real, false),
            (fake, &self.split.test_fake, true),
        ] {
            for &i in idx {
                scores.push(self.model.score(&records[i])?);
                labels.push(label);
            }
        }
        Ok((scores, labels))
    }
}

/// Calibrations repeated with seeds `seed, seed + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSet {
    pub runs: Vec<Calibration>,
}

impl RunSet {
    pub fn test_aurocs(
        &self,
        real: &[TokenLikelihoodRecord],
        fake: &[TokenLikelihoodRecord],
    ) -> Result<Vec<f64>> {
        self.runs.iter().map(|r| r.test_auroc(real, fake)).collect()
    }
}

fn check_inputs(
    real: &[TokenLikelihoodRecord],
    fake: &[TokenLikelihoodRecord],
    config: &CalibrationConfig,
) -> Result<(String, Vec<usize>)> {
    config.validate()?;
    if real.is_empty() {
        return Err(Error::SingleClass("no real records".into()));
    }
    if fake.is_empty() {
        return Err(Error::SingleClass("no generated records".into()));
    }
    let layout = common_layout(real)?;
    let fake_layout = common_layout(fake)?;
    if fake_layout != layout {
        return Err(Error::InvalidRecord {
            line: None,
            image_id: fake[0].image_id.clone(),
            field: "scales".into(),
            problem: RecordProblem::Layout {
                expected: layout,
                found: fake_layout,
            },
        });
    }
    let generator = fake[0].generator_id.clone();
    for rec in real.iter().chain(fake) {
        if rec.generator_id != generator {
            return Err(Error::GeneratorMismatch {
                expected: generator,
                found: rec.generator_id.clone(),
                image_id: rec.image_id.clone(),
            });
        }
    }
    for (name, n) in [("real", real.len()), ("generated", fake.len())] {
        if n < config.n_train_per_class {
            return Err(Error::InvalidArgument(format!(
                "{n} {name} records, but n_train_per_class is {}",
                config.n_train_per_class
            )));
        }
    }
    Ok((generator, layout))
}

/// Per-scale standard deviation of `delta` over the training tokens.
fn delta_std_per_scale(records: &[&TokenLikelihoodRecord], n_scales: usize) -> Vec<f64> {
    (0..n_scales)
        .map(|s| {
            let values = || {
                records
                    .iter()
                    .flat_map(move |r| r.scales[s].tokens().map(|(pc, pu)| delta(pc, pu)))
            };
            let n = values().count() as f64;
            let mean = values().sum::<f64>() / n;
            (values().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

pub fn calibrate(
    real: &[TokenLikelihoodRecord],
    fake: &[TokenLikelihoodRecord],
    config: &CalibrationConfig,
) -> Result<ScoreModel> {
    calibrate_detailed(real, fake, config).map(|c| c.model)
}

/// Full calibration: draws the training split, initializes the model and
/// runs `config.steps` AdamW steps over shuffled mini-batches.
pub fn calibrate_detailed(
    real: &[TokenLikelihoodRecord],
    fake: &[TokenLikelihoodRecord],
    config: &CalibrationConfig,
) -> Result<Calibration> {
    let (generator, layout) = check_inputs(real, fake, config)?;
    let n_scales = layout.len();

    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let split = Split::draw(
        real.len(),
        fake.len(),
        config.n_train_per_class,
        &mut split_rng,
    );

    let train: Vec<Sample<'_>> = split
        .train_real
        .iter()
        .map(|&i| Sample {
            record: &real[i],
            target: 0.0,
        })
        .chain(split.train_fake.iter().map(|&i| Sample {
            record: &fake[i],
            target: 1.0,
        }))
        .collect();

    let train_records: Vec<&TokenLikelihoodRecord> = train.iter().map(|s| s.record).collect();
    let noise_sigmas: Vec<f64> = delta_std_per_scale(&train_records, n_scales)
        .into_iter()
        .map(|sd| config.noise_factor * sd)
        .collect();

    let mut model = ScoreModel::new(generator, config.mode, config.n_hidden, layout);
    model.input_clamp = config.input_clamp;
    model.noise_sigmas = noise_sigmas.clone();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(STREAM_INIT);
    init_mlp(&mut model.mlp, &mut init_rng);

    let param_layout = ParamLayout::of(&model);
    let mask = coordinate_mask(&param_layout, config);
    let mut params = ParamVector::pack(&model);
    let mut optimizer = OptimizerState::new(
        params.len(),
        AdamWConfig {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        },
    );

    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(STREAM_NOISE);
    let mut noise = NoiseSource::new(noise_sigmas, noise_rng);
    let use_noise = config.noise_factor > 0.0;

    let settings = LossSettings {
        label_smoothing: config.label_smoothing,
        weight_penalty: config.weight_penalty,
    };
    let mut ws = GradWorkspace::default();
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut split_rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        batch.clear();
        batch.extend(order[cursor..end].iter().map(|&i| train[i]));
        cursor = end;

        let loss = loss_and_grad_into(
            &model,
            &batch,
            &settings,
            use_noise.then_some(&mut noise),
            &mut ws,
            &mut grad,
        )
        .map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { step, loss },
            other => other,
        })?;
        losses.push(loss);
        optimizer
            .step(&mut params.0, &grad, Some(&mask))
            .map_err(|_| Error::Divergence { step, loss })?;
        params.unpack_into(&mut model);
    }

    model.config_digest = config.digest();
    model.config = Some(config.clone());
    model.validate()?;
    Ok(Calibration {
        model,
        split,
        seed: config.seed,
        losses,
    })
}

fn coordinate_mask(layout: &ParamLayout, config: &CalibrationConfig) -> CoordinateMask {
    let mut mask = CoordinateMask::all(layout.len());
    if let Some(i) = layout.alpha_index() {
        mask.trainable[i] = config.learn_alpha;
        mask.decayed[i] = config.decay_alpha_and_weights;
    }
    for i in layout.weights_range() {
        mask.trainable[i] = config.learn_w;
        mask.decayed[i] = config.decay_alpha_and_weights;
    }
    mask
}

/// `k` independent calibrations with seeds `config.seed + r`, each drawing
/// its own split and initialization. Runs execute in parallel; results are
/// identical to running them one after another.
pub fn calibrate_runs(
    real: &[TokenLikelihoodRecord],
    fake: &[TokenLikelihoodRecord],
    config: &CalibrationConfig,
    k: usize,
) -> Result<RunSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("number of runs must be > 0".into()));
    }
    let runs = (0..k as u64)
        .into_par_iter()
        .map(|r| {
            let cfg = CalibrationConfig {
                seed: config.seed.wrapping_add(r),
                ..config.clone()
            };
            calibrate_detailed(real, fake, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunSet { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{builtin_profile, generate};

    fn small_config() -> CalibrationConfig {
        CalibrationConfig {
            steps: 60,
            batch_size: 16,
            n_train_per_class: 20,
            n_hidden: 4,
            ..Default::default()
        }
    }

    #[test]
    fn split_partitions_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let split = Split::draw(10, 7, 4, &mut rng);
        let mut real: Vec<_> = split
            .train_real
            .iter()
            .chain(&split.test_real)
            .copied()
            .collect();
        real.sort_unstable();
        assert_eq!(real, (0..10).collect::<Vec<_>>());
        let mut fake: Vec<_> = split
            .train_fake
            .iter()
            .chain(&split.test_fake)
            .copied()
            .collect();
        fake.sort_unstable();
        assert_eq!(fake, (0..7).collect::<Vec<_>>());
        assert_eq!(split.train_real.len(), 4);
        assert_eq!(split.test_fake.len(), 3);
    }

    #[test]
    fn deterministic_given_seed() {
        let profile = builtin_profile("var-like").unwrap();
        let (real, fake) = generate(&profile, 30, 30).unwrap();
        let a = calibrate(&real, &fake, &small_config()).unwrap();
        let b = calibrate(&real, &fake, &small_config()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = calibrate(
            &real,
            &fake,
            &CalibrationConfig {
                seed: 1,
                ..small_config()
            },
        )
        .unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn frozen_parameters_stay_at_initialization() {
        let profile = builtin_profile("var-like").unwrap();
        let (real, fake) = generate(&profile, 30, 30).unwrap();
        let cfg = CalibrationConfig {
            learn_alpha: false,
            learn_w: false,
            ..small_config()
        };
        let model = calibrate(&real, &fake, &cfg).unwrap();
        let s = model.n_scales() as f64;
        assert_eq!(model.alpha, 1.0);
        assert!(model.scale_weights.iter().all(|&w| w == 1.0 / s));
        let trained = calibrate(&real, &fake, &small_config()).unwrap();
        assert_ne!(trained.alpha, 1.0);
    }

    #[test]
    fn single_scale_keeps_unit_weight() {
        let profile = builtin_profile("single-scale").unwrap();
        let (real, fake) = generate(&profile, 25, 25).unwrap();
        let model = calibrate(&real, &fake, &small_config()).unwrap();
        assert_eq!(model.scale_weights, vec![1.0]);
        assert!(!model.config_digest.is_empty());
        assert_eq!(model.config.as_ref().unwrap(), &small_config());
    }

    #[test]
    fn too_few_records_is_error() {
        let profile = builtin_profile("single-scale").unwrap();
        let (real, fake) = generate(&profile, 10, 25).unwrap();
        assert!(matches!(
            calibrate(&real, &fake, &small_config()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mixed_generators_are_rejected() {
        let profile = builtin_profile("single-scale").unwrap();
        let (real, mut fake) = generate(&profile, 25, 25).unwrap();
        fake[3].generator_id = "someone-else".into();
        assert!(matches!(
            calibrate(&real, &fake, &small_config()),
            Err(Error::GeneratorMismatch { .. })
        ));
    }

    #[test]
    fn empty_class_is_error() {
        let profile = builtin_profile("single-scale").unwrap();
        let (real, _) = generate(&profile, 25, 1).unwrap();
        assert!(matches!(
            calibrate(&real, &[], &small_config()),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn runs_use_consecutive_seeds() {
        let profile = builtin_profile("single-scale").unwrap();
        let (real, fake) = generate(&profile, 30, 30).unwrap();
        let cfg = CalibrationConfig {
            steps: 10,
            ..small_config()
        };
        assert!(matches!(
            calibrate_runs(&real, &fake, &cfg, 0),
            Err(Error::InvalidArgument(_))
        ));
        let set = calibrate_runs(&real, &fake, &cfg, 3).unwrap();
        assert_eq!(
            set.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        let single = calibrate_detailed(&real, &fake, &cfg).unwrap();
        assert_eq!(set.runs[0], single);
        let one = calibrate_runs(&real, &fake, &cfg, 1).unwrap();
        assert_eq!(one.runs[0].model, calibrate(&real, &fake, &cfg).unwrap());
        assert!(set
            .runs
            .iter()
            .all(|r| r.losses.iter().all(|l| l.is_finite())));
    }
}
