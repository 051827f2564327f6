use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use prada_core::diagnostics::{
    balanced_ratios, empirical_cdf, linspace, scale_auroc, score_curve, score_surface, token_stats,
    weight_dump, write_table,
};
use prada_core::evaluation::{
    attribute_with_threshold, load_scores, write_roc_csv, write_scores, EvalReport, RunStat,
    ScoredImage,
};
use prada_core::synth::SynthProfile;
use prada_core::{
    builtin_profile, builtin_profiles, calibrate_runs, confusion, ensemble_detect, generate,
    read_records, write_records, CalibrationConfig, Error, InputMode, Result, ScoreModel,
    ScoreTable,
};
use serde::{Deserialize, Serialize};

use crate::{
    AttributeArgs, CalibrateArgs, Command, DetectArgs, Grid, ProfilesArgs, Report, ScoreArgs,
    SynthArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Score(a) => score(a),
        Command::Detect(a) => detect(a),
        Command::Attribute(a) => attribute(a),
        Command::Report(r) => report(r),
        Command::Profiles(a) => profiles(a),
    }
}

/// File when a path is given, stdout otherwise.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut profile = match (&a.profile, &a.profile_file) {
        (Some(name), _) => builtin_profile(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            SynthProfile::from_toml_str(&text)?
        }
        (None, None) => unreachable!("clap requires one of --profile/--profile-file"),
    };
    if let Some(seed) = a.seed {
        profile.seed = seed;
    }
    let (real, fake) = generate(&profile, a.n_real, a.n_fake)?;
    write_records(&real, &a.out_real)?;
    write_records(&fake, &a.out_fake)?;
    println!(
        "{}: {} real -> {}, {} generated -> {}",
        profile.name,
        real.len(),
        a.out_real.display(),
        fake.len(),
        a.out_fake.display()
    );
    Ok(())
}

fn resolve_config(a: &CalibrateArgs) -> Result<CalibrationConfig> {
    let mut c = match &a.config {
        Some(path) => CalibrationConfig::load(path)?,
        None => CalibrationConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag.clone() { c.$field = v; })*
        };
    }
    set!(
        steps => steps,
        batch_size => batch_size,
        n_train => n_train_per_class,
        lr => learning_rate,
        weight_decay => weight_decay,
        label_smoothing => label_smoothing,
        weight_penalty => weight_penalty,
        noise_factor => noise_factor,
        mode => mode,
        hidden => n_hidden,
        seed => seed
    );
    if a.fixed_alpha {
        c.learn_alpha = false;
    }
    if a.fixed_w {
        c.learn_w = false;
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Serialize)]
struct Manifest {
    generator_id: String,
    model: String,
    config_digest: String,
    config: CalibrationConfig,
    n_real: usize,
    n_fake: usize,
    runs: Vec<RunEntry>,
    test_auroc: RunStat,
    single_run: bool,
}

#[derive(Debug, Serialize)]
struct RunEntry {
    run: usize,
    seed: u64,
    model: String,
    test_auroc: f64,
    alpha: f64,
    scale_weights: Vec<f64>,
    final_loss: f64,
    n_test_real: usize,
    n_test_fake: usize,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let config = resolve_config(&a)?;
    let real = read_records(&a.real)?;
    let fake = read_records(&a.fake)?;
    let set = calibrate_runs(&real, &fake, &config, a.runs)?;
    let aurocs = set.test_aurocs(&real, &fake)?;

    let mut runs = Vec::with_capacity(set.runs.len());
    for (r, (run, &auc)) in set.runs.iter().zip(&aurocs).enumerate() {
        let path = sibling(&a.out, &format!("run{r}"));
        run.model.save(&path)?;
        runs.push(RunEntry {
            run: r,
            seed: run.seed,
            model: file_name(&path),
            test_auroc: auc,
            alpha: run.model.alpha,
            scale_weights: run.model.scale_weights.clone(),
            final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
            n_test_real: run.split.test_real.len(),
            n_test_fake: run.split.test_fake.len(),
        });
    }
    let first = &set.runs[0].model;
    first.save(&a.out)?;

    let stat = RunStat::from_values(aurocs);
    let manifest = Manifest {
        generator_id: first.generator_id.clone(),
        model: file_name(&a.out),
        config_digest: first.config_digest.clone(),
        config,
        n_real: real.len(),
        n_fake: fake.len(),
        runs,
        single_run: stat.values.len() == 1,
        test_auroc: stat,
    };
    let manifest_path = sibling(&a.out, "manifest");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let s = &manifest.test_auroc;
    println!(
        "test auroc {:.4} ± {:.4} over {} run(s); model {}, manifest {}",
        s.mean,
        s.std,
        s.values.len(),
        a.out.display(),
        manifest_path.display()
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let model = ScoreModel::load(&a.model)?;
    let records = read_records(&a.input)?;
    let scores = records
        .iter()
        .map(|r| {
            Ok(ScoredImage {
                image_id: r.image_id.clone(),
                source_label: r.source_label.clone(),
                generator_id: model.generator_id.clone(),
                score: model.score(r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_scores(&scores, output(a.out.as_deref())?)
}

fn load_table(paths: &[PathBuf]) -> Result<ScoreTable> {
    let columns = paths.iter().map(load_scores).collect::<Result<Vec<_>>>()?;
    ScoreTable::from_columns(&columns)
}

fn detect(a: DetectArgs) -> Result<()> {
    let table = load_table(&a.tables)?;
    let scores = ensemble_detect(&table);
    let report = EvalReport::detection(&scores, &table.labels())?;
    if let Some(path) = &a.roc_out {
        write_roc_csv(&report.roc_points, create(path)?)?;
    }
    println!(
        "auroc {:.6}",
        report.auroc.expect("detection report has an auroc")
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TruthRow {
    image_id: String,
    source_label: String,
}

fn load_truth(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut truth = BTreeMap::new();
    for row in csv::Reader::from_reader(file).deserialize() {
        let row: TruthRow = row.map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        truth.insert(row.image_id, row.source_label);
    }
    Ok(truth)
}

fn attribute(a: AttributeArgs) -> Result<()> {
    if !a.threshold.is_finite() {
        return Err(Error::InvalidArgument("--threshold must be finite".into()));
    }
    let table = load_table(&a.tables)?;
    let labels: Vec<String> = match &a.truth {
        None => table.rows.iter().map(|r| r.source_label.clone()).collect(),
        Some(path) => {
            let truth = load_truth(path)?;
            table
                .rows
                .iter()
                .map(|r| {
                    truth.get(&r.image_id).cloned().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "{}: no label for image `{}`",
                            path.display(),
                            r.image_id
                        ))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let verdicts = attribute_with_threshold(&table, a.threshold);
    let matrix = confusion(&verdicts, &labels, &table.generators)?;
    if let Some(path) = &a.verdicts {
        write_table(
            ["image_id", "true_label", "verdict"],
            table
                .rows
                .iter()
                .zip(&labels)
                .zip(&verdicts)
                .map(|((r, t), v)| [r.image_id.clone(), t.clone(), v.to_string()]),
            create(path)?,
        )?;
    }
    matrix.write_csv(output(a.out.as_deref())?)?;
    if a.out.is_some() {
        println!("accuracy {:.6}", matrix.accuracy);
    } else {
        eprintln!("accuracy {:.6}", matrix.accuracy);
    }
    Ok(())
}

fn alpha_of(alpha: f64, model: &Option<PathBuf>) -> Result<f64> {
    match model {
        Some(path) => Ok(ScoreModel::load(path)?.alpha),
        None => Ok(alpha),
    }
}

fn grid_points(g: &Grid) -> Result<Vec<f64>> {
    if !(g.grid_min.is_finite() && g.grid_max.is_finite())
        || g.grid_min > g.grid_max
        || g.grid_points == 0
    {
        return Err(Error::InvalidArgument(format!(
            "invalid grid [{}, {}] with {} points",
            g.grid_min, g.grid_max, g.grid_points
        )));
    }
    Ok(linspace(g.grid_min, g.grid_max, g.grid_points))
}

fn report(r: Report) -> Result<()> {
    match r {
        Report::ScaleAuroc {
            real,
            fake,
            score,
            per_scale,
            out,
        } => {
            let values = scale_auroc(
                &read_records(&real)?,
                &read_records(&fake)?,
                score,
                per_scale,
            )?;
            let rows = values.iter().enumerate().map(|(s, v)| {
                let scale = if per_scale {
                    s.to_string()
                } else {
                    "all".into()
                };
                [scale, v.to_string()]
            });
            write_table(["scale", "auroc"], rows, output(out.as_deref())?)
        }
        Report::TokenStats {
            records,
            alpha,
            model,
            out,
            scales_out,
        } => {
            let alpha = alpha_of(alpha, &model)?;
            let stats = token_stats(&read_records(&records)?, alpha)?;
            if let Some(path) = &scales_out {
                stats.write_scale_csv(create(path)?)?;
            }
            stats.write_token_csv(output(out.as_deref())?)
        }
        Report::Cdf {
            real,
            fake,
            alpha,
            model,
            grid,
            out,
        } => {
            let alpha = alpha_of(alpha, &model)?;
            let xs = grid_points(&grid)?;
            let cdf_real = empirical_cdf(&balanced_ratios(&read_records(&real)?, alpha), &xs)?;
            let cdf_fake = empirical_cdf(&balanced_ratios(&read_records(&fake)?, alpha), &xs)?;
            let rows = xs
                .iter()
                .zip(cdf_real.iter().zip(&cdf_fake))
                .map(|(x, (r, f))| [x.to_string(), r.to_string(), f.to_string()]);
            write_table(["ratio", "real", "fake"], rows, output(out.as_deref())?)
        }
        Report::ScoreCurve { model, grid, out } => {
            let model = ScoreModel::load(&model)?;
            let xs = grid_points(&grid)?;
            let out = output(out.as_deref())?;
            match model.mode() {
                InputMode::Ratio1d => {
                    let rows = score_curve(&model, &xs)?
                        .into_iter()
                        .map(|(x, y)| [x.to_string(), y.to_string()]);
                    write_table(["ratio", "score"], rows, out)
                }
                InputMode::Pair2d => {
                    let rows = score_surface(&model, &xs, &xs)
                        .into_iter()
                        .map(|(c, u, y)| [c.to_string(), u.to_string(), y.to_string()]);
                    write_table(["log_p_cond", "log_p_uncond", "score"], rows, out)
                }
            }
        }
        Report::Weights { model, out } => {
            let model = ScoreModel::load(&model)?;
            let rows = std::iter::once(["alpha".to_string(), model.alpha.to_string()]).chain(
                weight_dump(&model)
                    .into_iter()
                    .map(|(s, w)| [format!("w{s}"), w.to_string()]),
            );
            write_table(["parameter", "value"], rows, output(out.as_deref())?)
        }
    }
}

fn profiles(a: ProfilesArgs) -> Result<()> {
    let mut stdout = io::stdout().lock();
    let write_err = |e| Error::io("<stdout>", e);
    match a.name {
        Some(name) => write!(stdout, "{}", builtin_profile(&name)?.to_toml()).map_err(write_err),
        None => {
            for p in builtin_profiles() {
                writeln!(stdout, "# {}\n{}", p.name, p.to_toml()).map_err(write_err)?;
            }
            Ok(())
        }
    }
}
