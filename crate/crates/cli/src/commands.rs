use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pollen_core::auth::{
    dilution_check, distribution_compare, extract_features, features_from_annotations,
    train_auth as fit_auth, AuthFeatures, AuthModel, DilutionCheck, HoneyProfile, Verdict,
};
use pollen_core::detector::{load_weights, save_weights, DetectorConfig, DetectorModel};
use pollen_core::imaging::load_image;
use pollen_core::io_util::{atomic_write, read_text};
use pollen_core::metrics::{
    align_detections, evaluate as score, format_detections, load_detections,
};
use pollen_core::synth::{
    derive_seed, gen_dataset, load_annotations, load_dataset, Annotation, ANNOTATIONS_FILE,
};
use pollen_core::tensor::gradcheck::op_suite;
use pollen_core::train::{
    fit_anchors, prepare_dataset, EpochLog, OptimizerSnapshot, Trainer, LOG_HEADER,
};
use pollen_core::yolo::network_gradcheck;

use crate::config::RunConfig;
use crate::{Authenticate, CliError, GradCheck};

const FINAL_WEIGHTS: &str = "final.plnw";
const BEST_WEIGHTS: &str = "best.plnw";
const OPTIMIZER_STATE: &str = "final.plno";
const TRAIN_LOG: &str = "train_log.csv";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.slide.with_counts_scaled(cfg.data.count_scale);
    spec.validate()?;
    let manifest = gen_dataset(&spec, cfg.data.n_images, cfg.seed, &cfg.paths.data)?;
    println!("{}: {}", cfg.paths.data.display(), manifest.summary());
    Ok(())
}

pub fn train_detector(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let data_dir = &cfg.paths.data;
    let run_dir = &cfg.paths.run_dir;
    require_exists(data_dir, "dataset")?;
    let (final_w, best_w, opt_path, log_path) = (
        run_dir.join(FINAL_WEIGHTS),
        run_dir.join(BEST_WEIGHTS),
        run_dir.join(OPTIMIZER_STATE),
        run_dir.join(TRAIN_LOG),
    );
    if resume {
        require_exists(&final_w, "weights")?;
        require_exists(&opt_path, "optimizer state")?;
    }

    let items = load_dataset(data_dir)?;
    if items.is_empty() {
        return Err(usage(format!(
            "dataset {} has no images",
            data_dir.display()
        )));
    }
    let extent = cfg.detector.input_extent;
    let data = prepare_dataset(&items, extent)?;

    let (mut trainer, mut log, mut best) = if resume {
        let model = load_weights(&final_w)?;
        if model.config.input_extent != extent {
            return Err(usage(format!(
                "weights were trained at {} px but detector.input_extent is {extent}",
                model.config.input_extent
            )));
        }
        let snapshot = OptimizerSnapshot::load(&opt_path)?;
        let mut tc = cfg.train.clone();
        tc.epochs += snapshot.epoch;
        let log = if log_path.exists() {
            read_text(&log_path)?
        } else {
            format!("{LOG_HEADER}\n")
        };
        let best = best_logged_loss(&log);
        (Trainer::resume(model, tc, snapshot)?, log, best)
    } else {
        let grid = extent / pollen_core::detector::NETWORK_STRIDE;
        let anchors = fit_anchors(&data, cfg.detector.anchors, grid, cfg.seed)?;
        let config = DetectorConfig {
            anchors,
            ..DetectorConfig::default().with_input_extent(extent)
        };
        let model = DetectorModel::<f32>::build(config, cfg.seed)?;
        (
            Trainer::new(model, cfg.train.clone())?,
            format!("{LOG_HEADER}\n"),
            f64::INFINITY,
        )
    };

    let save_state = |t: &Trainer, log: &str| -> Result<(), CliError> {
        save_weights(&t.model, &final_w)?;
        t.snapshot().save(&opt_path)?;
        atomic_write(&log_path, log.as_bytes())?;
        Ok(())
    };
    if !resume {
        save_state(&trainer, &log)?;
        if cfg.train.epochs == 0 {
            save_weights(&trainer.model, &best_w)?;
        }
    }
    while trainer.epoch < trainer.config.epochs {
        let entry: EpochLog = match trainer.train_epoch(&data) {
            Ok(e) => e,
            Err(e) => {
                return Err(CliError::Runtime(format!(
                    "epoch {} failed, {} keeps the completed epochs: {e}",
                    trainer.epoch + 1,
                    log_path.display()
                )))
            }
        };
        log.push_str(&entry.csv_row());
        log.push('\n');
        let l = &entry.loss;
        eprintln!(
            "epoch {:>3}  loss {:.4} (coord {:.4} obj {:.4} noobj {:.4} class {:.4})  lr {:.2e}  {:.0}s",
            entry.epoch, l.total, l.coord_term, l.obj_term, l.noobj_term, l.class_term, entry.lr, entry.seconds
        );
        save_state(&trainer, &log)?;
        if l.total < best {
            best = l.total;
            save_weights(&trainer.model, &best_w)?;
        }
    }
    println!("weights: {}", final_w.display());
    Ok(())
}

fn best_logged_loss(log: &str) -> f64 {
    log.lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<f64>().ok())
        .fold(f64::INFINITY, f64::min)
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| usage(format!("cannot list {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| matches!(f.extension().and_then(|x| x.to_str()), Some("png" | "ppm")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            require_exists(p, "image")?;
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(usage("no .png or .ppm images found"));
    }
    Ok(out)
}

pub fn detect(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    require_exists(&cfg.paths.weights, "weights")?;
    let images = collect_images(inputs)?;
    let model = load_weights(&cfg.paths.weights)?;
    let d = &cfg.detector;
    let mut records = Vec::with_capacity(images.len());
    for path in &images {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let img = load_image(path)?;
        records.push((id, model.detect(&img, d.conf_threshold, d.nms_iou)?));
    }
    let text = format!(
        "# image_id class cx cy w h confidence\n{}",
        format_detections(&records)
    );
    atomic_write(&cfg.paths.detections, text.as_bytes())?;
    let total: usize = records.iter().map(|(_, d)| d.len()).sum();
    println!(
        "{total} detections in {} images -> {}",
        records.len(),
        cfg.paths.detections.display()
    );
    Ok(())
}

fn read_annotations(path: &Path) -> Result<Vec<Annotation>, CliError> {
    require_exists(path, "annotations")?;
    let file = if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(load_annotations(&file)?)
}

pub fn evaluate(cfg: &RunConfig, annotations: &Path) -> Result<(), CliError> {
    require_exists(&cfg.paths.detections, "detections")?;
    let anns = read_annotations(annotations)?;
    let records = load_detections(&cfg.paths.detections)?;
    let dets = align_detections(records, &anns)?;
    let report = score(&dets, &anns, cfg.detector.match_iou, cfg.detector.tn_grid)?;
    print!("{report}");
    atomic_write(&cfg.paths.report, report.to_json().as_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    label: String,
    counts: [u64; 3],
    frames: u64,
}

#[derive(Debug, Deserialize)]
struct FeatureRecord {
    counts: [u64; 3],
    frames: u64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    require_exists(path, "input")?;
    serde_json::from_str(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// `n` samples of each built-in profile, features taken from ground truth.
fn synthetic_samples(cfg: &RunConfig) -> Result<Vec<(AuthFeatures, String)>, CliError> {
    let mut out = Vec::new();
    for (p, profile) in [HoneyProfile::eucalyptus(), HoneyProfile::manuka()]
        .iter()
        .enumerate()
    {
        let profile_seed = derive_seed(cfg.seed, p as u64);
        for i in 0..cfg.auth.samples_per_profile {
            let frames = profile.sample_frames(
                &cfg.slide,
                cfg.auth.frames,
                derive_seed(profile_seed, i as u64),
            )?;
            out.push((features_from_annotations(&frames)?, profile.label.clone()));
        }
    }
    Ok(out)
}

pub fn train_auth(cfg: &RunConfig, samples: Option<&Path>) -> Result<(), CliError> {
    let samples = match samples {
        Some(p) => {
            let recs: Vec<SampleRecord> = read_json(p)?;
            recs.into_iter()
                .map(|r| Ok((AuthFeatures::new(r.counts, r.frames)?, r.label)))
                .collect::<Result<Vec<_>, pollen_core::Error>>()?
        }
        None => synthetic_samples(cfg)?,
    };
    let (model, stats) = train_auth_model(&samples, cfg)?;
    let correct = samples
        .iter()
        .filter(|(f, l)| &model.authenticate(f).decision == l)
        .count();
    model.save(&cfg.paths.auth_model)?;
    println!(
        "{} samples, {correct} classified correctly, {} epochs, loss {:.3e} -> {}",
        samples.len(),
        stats.epochs,
        stats.final_loss,
        cfg.paths.auth_model.display()
    );
    Ok(())
}

fn train_auth_model(
    samples: &[(AuthFeatures, String)],
    cfg: &RunConfig,
) -> Result<(AuthModel, pollen_core::auth::AuthTraining), CliError> {
    fit_auth(samples, &cfg.auth.model).map_err(|e| match e {
        pollen_core::Error::InvalidInput(_) | pollen_core::Error::NotSeparable(_) => {
            usage(e.to_string())
        }
        other => other.into(),
    })
}

#[derive(Serialize)]
struct AuthReport {
    #[serde(flatten)]
    verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    dilution: Option<DilutionCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distribution_distance: Option<f64>,
}

pub fn authenticate(cfg: &RunConfig, args: &Authenticate) -> Result<(), CliError> {
    let model_path = &cfg.paths.auth_model;
    if !model_path.exists() {
        return Err(usage(format!(
            "no trained model at {}; run train-auth first",
            model_path.display()
        )));
    }
    let features = match (&args.features, &args.detections) {
        (Some(p), _) => {
            let r: FeatureRecord = read_json(p)?;
            AuthFeatures::new(r.counts, r.frames)?
        }
        (None, Some(p)) => {
            require_exists(p, "detections")?;
            let frames = args.frames.unwrap_or(0);
            let records = load_detections(p)?;
            if records.len() as u64 > frames {
                return Err(usage(format!(
                    "{} images have detections but --frames is {frames}",
                    records.len()
                )));
            }
            let mut per_frame: Vec<_> = records.into_iter().map(|(_, d)| d).collect();
            per_frame.resize(frames as usize, Vec::new());
            extract_features(&per_frame)?
        }
        (None, None) => return Err(usage("either --features or --detections is required")),
    };
    let model = AuthModel::load(model_path)?;
    let dilution = args
        .reference_density
        .map(|r| dilution_check(features.density, r, cfg.auth.dilution_tolerance))
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    let distribution_distance = match &args.reference_counts {
        Some(r) if r.len() != 3 => {
            return Err(usage(
                "--reference-counts takes three comma-separated counts",
            ))
        }
        Some(r) => Some(
            distribution_compare(&features.counts, &[r[0], r[1], r[2]])
                .map_err(|e| usage(e.to_string()))?,
        ),
        None => None,
    };
    let report = AuthReport {
        verdict: model.authenticate(&features),
        dilution,
        distribution_distance,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("plain data")
    );
    Ok(())
}

pub fn grad_check(cfg: &RunConfig, args: &GradCheck) -> Result<(), CliError> {
    let mut reports = op_suite(cfg.seed, args.trials)?;
    reports.push(network_gradcheck(args.extent, args.trials, cfg.seed)?);
    let mut worst = 0.0f64;
    for r in &reports {
        println!(
            "{:<40} {:>6} entries  max rel err {:.3e}",
            r.name, r.checked_entries, r.max_relative_error
        );
        worst = worst.max(r.max_relative_error);
    }
    if worst > GRADCHECK_TOLERANCE {
        return Err(CliError::Runtime(format!(
            "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    println!("all gradients within {GRADCHECK_TOLERANCE:e}");
    Ok(())
}
