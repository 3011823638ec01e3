use std::fs;
use std::path::{Path, PathBuf};

use depthmotion::dataset::{load_dataset, write_dataset, Entry, FrameTriplet, MANIFEST};
use depthmotion::evaluator::{
    compare_report, depth_metrics, read_metrics_csv, read_odometry_csv, sequence_odometry, write_metrics_csv,
    write_odometry_csv, DepthMetrics, RunSummary, WindowPoses,
};
use depthmotion::geometry::SE3Params;
use depthmotion::networks::Models;
use depthmotion::synthscenes::{generate_dynamic, generate_rigid, generate_sequence, SceneConfig, SceneSample};
use depthmotion::trainer::{online_refine, predict_depth, predict_ego, train_with_progress, write_curve_csv};
use depthmotion::visualize::save_depth_images;
use depthmotion::{Error, Result};

use crate::settings::{Preset, Settings};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const UNREFINED_METRICS_FILE: &str = "metrics_unrefined.csv";
pub const ODOMETRY_FILE: &str = "odometry.csv";
pub const DEPTH_DIR: &str = "depth";

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

fn dataset_dir(s: &Settings) -> Result<&Path> {
    let dir = required(&s.dataset, "dataset")?;
    let manifest = dir.join(MANIFEST);
    if !manifest.is_file() {
        return Err(Error::Config(format!("{} is not a dataset: no {MANIFEST}", dir.display())));
    }
    Ok(dir)
}

fn checkpoint_file(s: &Settings) -> Result<&Path> {
    let p = required(&s.checkpoint, "checkpoint")?;
    if !p.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn out_dir(s: &Settings) -> Result<&Path> {
    let dir = required(&s.out, "out")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn scene_config(s: &Settings) -> SceneConfig {
    let cfg = match s.preset {
        Preset::Rigid | Preset::Sequence => SceneConfig::default(),
        Preset::Dynamic => SceneConfig::dynamic(),
        Preset::Degenerate => SceneConfig::degenerate(),
        Preset::Shifted | Preset::ShiftedSequence => SceneConfig::default().shifted(),
    };
    cfg.with_size(s.height, s.width)
}

/// Sample `i` uses seed `seed + i`; sequence presets write every window of
/// each sequence.
pub fn generate(s: &Settings) -> Result<()> {
    let out = required(&s.out, "out")?;
    if s.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let cfg = scene_config(s);
    cfg.validate()?;
    let preset = s.preset.to_string();
    let mut samples: Vec<(SceneSample, String)> = Vec::new();
    for i in 0..s.count as u64 {
        let seed = s.seed.wrapping_add(i);
        match s.preset {
            Preset::Rigid | Preset::Shifted => samples.push((generate_rigid(seed, &cfg)?, preset.clone())),
            Preset::Dynamic | Preset::Degenerate => samples.push((generate_dynamic(seed, &cfg)?, preset.clone())),
            Preset::Sequence | Preset::ShiftedSequence => {
                let seq = generate_sequence(seed, &cfg, s.sequence_length)?;
                for mid in 1..seq.len() - 1 {
                    samples.push((seq.window(mid)?, preset.clone()));
                }
            }
        }
    }
    write_dataset(out, &samples)?;
    log::info!("wrote {} triplets to {}", samples.len(), out.display());
    Ok(())
}

pub fn train(s: &Settings) -> Result<()> {
    let dataset = dataset_dir(s)?;
    let config = s.train_config();
    config.validate()?;
    let out = out_dir(s)?;
    let triplets: Vec<FrameTriplet> = load_dataset(dataset)?.into_iter().map(|e| e.triplet).collect();
    log::info!("training {} for {} steps on {} triplets", config.mode, config.steps, triplets.len());
    let every = (config.steps / 20).max(1);
    let (models, curve) = train_with_progress(&triplets, &config, |row| {
        if row.step % every == 0 || row.step + 1 == config.steps {
            log::info!("step {} {}", row.step, row.losses);
        }
    })?;
    models.save(&out.join(CHECKPOINT_FILE))?;
    write_curve_csv(&out.join(LOSS_FILE), &curve)?;
    log::info!("checkpoint written to {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Per-window outputs shared by `eval` and `refine`.
struct Prediction {
    depth: Vec<f64>,
    ego: (SE3Params, SE3Params),
}

fn window_poses(entries: &[Entry], preds: &[Prediction]) -> Vec<WindowPoses> {
    entries
        .iter()
        .zip(preds)
        .filter_map(|(e, p)| {
            Some(WindowPoses {
                sequence: e.triplet.sequence?,
                predicted: p.ego,
                truth: (e.truth.ego_prev?, e.truth.ego_next?),
            })
        })
        .collect()
}

fn depth_rows(s: &Settings, entries: &[Entry], depths: &[&[f64]]) -> Result<Vec<DepthMetrics>> {
    let mut rows = Vec::new();
    for (e, d) in entries.iter().zip(depths) {
        if let Some(gt) = &e.truth.depths {
            let valid = vec![true; gt[1].len()];
            rows.push(depth_metrics(d, &gt[1], &valid, s.cap, s.median_scale)?);
        }
    }
    Ok(rows)
}

fn write_outputs(s: &Settings, out: &Path, entries: &[Entry], preds: &[Prediction]) -> Result<()> {
    let images = out.join(DEPTH_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (e, p) in entries.iter().zip(preds) {
        save_depth_images(&images, &e.name, &p.depth, e.triplet.height, e.triplet.width)?;
    }
    let depths: Vec<&[f64]> = preds.iter().map(|p| p.depth.as_slice()).collect();
    let rows = depth_rows(s, entries, &depths)?;
    if rows.is_empty() {
        log::warn!("no ground-truth depth in the dataset; {METRICS_FILE} not written");
    } else {
        write_metrics_csv(&out.join(METRICS_FILE), &rows)?;
        let m = DepthMetrics::mean(&rows)?;
        println!(
            "abs_rel {:.4} sq_rel {:.4} rmse {:.4} rmse_log {:.4} d1 {:.4} d2 {:.4} d3 {:.4} ({} images)",
            m.abs_rel,
            m.sq_rel,
            m.rmse,
            m.rmse_log,
            m.delta1,
            m.delta2,
            m.delta3,
            rows.len()
        );
    }
    if let Some(odo) = sequence_odometry(&window_poses(entries, preds))? {
        write_odometry_csv(&out.join(ODOMETRY_FILE), &odo)?;
        println!("ate {:.4} +- {:.4} ({} snippets)", odo.mean, odo.std, odo.per_snippet.len());
    }
    Ok(())
}

pub fn eval(s: &Settings) -> Result<()> {
    s.validate()?;
    let dataset = dataset_dir(s)?;
    let models = Models::load(checkpoint_file(s)?)?;
    let out = out_dir(s)?;
    let entries = load_dataset(dataset)?;
    let preds = entries
        .iter()
        .map(|e| {
            Ok(Prediction {
                depth: predict_depth(&models, &e.triplet)?,
                ego: predict_ego(&models, &e.triplet, s.mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_outputs(s, out, &entries, &preds)
}

/// Windows are refined in manifest order; weights carry over between
/// consecutive windows of the same sequence.
pub fn refine(s: &Settings) -> Result<()> {
    s.validate()?;
    let dataset = dataset_dir(s)?;
    let models = Models::load(checkpoint_file(s)?)?;
    let out = out_dir(s)?;
    let entries = load_dataset(dataset)?;
    let windows: Vec<FrameTriplet> = entries.iter().map(|e| e.triplet.clone()).collect();
    let refined = online_refine(&windows, &models, &s.refine_config())?;
    let skipped = refined.iter().filter(|r| r.skipped).count();
    if skipped > 0 {
        log::info!("{skipped} of {} windows looked static and were not refined", refined.len());
    }
    let unrefined: Vec<&[f64]> = refined.iter().map(|r| r.unrefined_depth.as_slice()).collect();
    let rows = depth_rows(s, &entries, &unrefined)?;
    if !rows.is_empty() {
        write_metrics_csv(&out.join(UNREFINED_METRICS_FILE), &rows)?;
    }
    let preds: Vec<Prediction> = refined
        .into_iter()
        .map(|r| Prediction {
            depth: r.depth,
            ego: r.ego,
        })
        .collect();
    write_outputs(s, out, &entries, &preds)
}

/// Compares run directories produced by `eval` or `refine`.
pub fn report(s: &Settings, runs: &[PathBuf]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut summaries = Vec::with_capacity(runs.len());
    for dir in runs {
        let metrics = dir.join(METRICS_FILE);
        if !metrics.is_file() {
            return Err(Error::Config(format!("{} has no {METRICS_FILE}", dir.display())));
        }
        let odometry = dir.join(ODOMETRY_FILE);
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        summaries.push(RunSummary {
            name,
            depth: DepthMetrics::mean(&read_metrics_csv(&metrics)?)?,
            odometry: if odometry.is_file() {
                Some(read_odometry_csv(&odometry)?)
            } else {
                None
            },
        });
    }
    let report = compare_report(&summaries)?;
    if let Some(out) = &s.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let txt = out.join("report.txt");
        fs::write(&txt, &report.text).map_err(|e| Error::io(&txt, e))?;
        let csv = out.join("report.csv");
        fs::write(&csv, &report.csv).map_err(|e| Error::io(&csv, e))?;
    }
    print!("{}", report.text);
    Ok(())
}
