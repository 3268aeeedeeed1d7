//! The data, training, evaluation and feature-export subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use sgtc::cotrain::{load_checkpoint, predict_volume, run_training, Bundle, FusionRule, RunOptions, TrainData, Trainer, FINAL_CHECKPOINT};
use sgtc::dataset::{generate_dataset, load_cases, Manifest};
use sgtc::metrics::{evaluate_pair, export_features, features_to_tsv, FeatureTap, MetricReport};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::provenance::{dataset_inputs, record, write_atomic};

/// Dataset description stored beside generated data, used to decide
/// whether an existing directory can be reused.
const DATASET_STAMP: &str = "dataset.toml";

fn dataset_stamp(cfg: &DatasetConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| CliError::Runtime(format!("cannot serialize dataset config: {e}")))
}

/// Generates the phantom dataset of `cfg` into its data directory,
/// replacing whatever was there.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Manifest> {
    let DatasetConfig::Phantom {
        n_labeled,
        n_unlabeled,
        n_test,
        seed,
        template,
    } = &cfg.dataset
    else {
        return Err(CliError::Config("generate-data needs a phantom dataset block".into()));
    };
    let dir = cfg.data_dir();
    let (_, manifest) = generate_dataset(*n_labeled, *n_unlabeled, *n_test, template, *seed, &dir)?;
    write_atomic(&dir.join(DATASET_STAMP), dataset_stamp(&cfg.dataset)?.as_bytes())?;
    log::info!("wrote {} volumes to {}", manifest.volumes.len(), dir.display());
    Ok(manifest)
}

/// Loads the dataset, generating phantoms first when the data directory is
/// missing or was produced from a different dataset block.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Manifest> {
    if let DatasetConfig::Phantom { .. } = cfg.dataset {
        let stamp_path = cfg.data_dir().join(DATASET_STAMP);
        let current = fs::read_to_string(&stamp_path).ok();
        if current.as_deref() != Some(dataset_stamp(&cfg.dataset)?.as_str()) || !cfg.manifest_path().exists() {
            return generate_data(cfg);
        }
    }
    Ok(Manifest::read(cfg.manifest_path())?)
}

/// Trains with `cfg` into `<output_dir>/train` and returns the trainer.
pub fn train(cfg: &ExperimentConfig, resume: Option<PathBuf>) -> Result<Trainer> {
    let manifest = prepare_dataset(cfg)?;
    train_on(cfg, &cfg.manifest_path(), &manifest, &cfg.train_dir(), resume)
}

/// Trains on an already loaded manifest into `dir`.
pub fn train_on(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    manifest: &Manifest,
    dir: &Path,
    resume: Option<PathBuf>,
) -> Result<Trainer> {
    let data = TrainData::from_manifest(manifest, cfg.train.strategy)?;
    record(dir, "train", &cfg.to_toml()?, &dataset_inputs(manifest_path, manifest))?;
    let opts = RunOptions {
        resume,
        ..RunOptions::default()
    };
    let trainer = run_training(&data, &cfg.train, dir, &opts)?;
    log::info!("training finished at t = {}", trainer.iteration());
    Ok(trainer)
}

/// Test-split metrics of `bundle` under `fusion`.
pub fn evaluate_bundle(bundle: &Bundle, manifest: &Manifest, fusion: FusionRule) -> Result<MetricReport> {
    let ids = manifest.split().test_ids;
    if ids.is_empty() {
        return Err(CliError::Config("manifest has no test volumes".into()));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for case in load_cases(manifest, &ids)? {
        let pred = predict_volume(bundle, &case.image, fusion)?;
        rows.push(evaluate_pair(&case.id, &pred, &case.mask)?);
    }
    Ok(MetricReport::from_volumes(rows))
}

fn sibling_label(out: &Path) -> (PathBuf, String) {
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let label = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    (dir, label)
}

fn ensure_parent(out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

/// Evaluates a checkpoint on the test split of a manifest and writes the
/// metrics CSV to `out`.
pub fn eval(ckpt: &Path, manifest_path: &Path, out: &Path, fusion: FusionRule) -> Result<MetricReport> {
    let trainer = load_checkpoint(ckpt)?;
    let manifest = Manifest::read(manifest_path)?;
    let report = evaluate_bundle(trainer.bundle(), &manifest, fusion)?;
    ensure_parent(out)?;
    write_atomic(out, report.to_csv().as_bytes())?;
    let (dir, label) = sibling_label(out);
    let mut inputs = vec![("checkpoint".to_string(), ckpt.to_path_buf())];
    inputs.extend(dataset_inputs(manifest_path, &manifest));
    record(&dir, &label, &format!("fusion = \"{fusion}\"\n"), &inputs)?;
    Ok(report)
}

/// Writes eval-mode features of every volume in the manifest as TSV.
pub fn export(ckpt: &Path, manifest_path: &Path, out: &Path, tap: FeatureTap) -> Result<usize> {
    let trainer = load_checkpoint(ckpt)?;
    let manifest = Manifest::read(manifest_path)?;
    let mut volumes = Vec::with_capacity(manifest.volumes.len());
    for v in &manifest.volumes {
        volumes.push((v.id.clone(), manifest.load_image(&v.id)?));
    }
    let rows = export_features(trainer.bundle(), &volumes, tap)?;
    ensure_parent(out)?;
    write_atomic(out, features_to_tsv(&rows).as_bytes())?;
    let (dir, label) = sibling_label(out);
    let tap_name = match tap {
        FeatureTap::FImg => "f-img",
        FeatureTap::ThetaPooled => "theta-pooled",
    };
    let mut inputs = vec![("checkpoint".to_string(), ckpt.to_path_buf())];
    inputs.extend(dataset_inputs(manifest_path, &manifest));
    record(&dir, &label, &format!("feature_tap = \"{tap_name}\"\n"), &inputs)?;
    Ok(rows.len())
}

/// Final checkpoint written by [`train`].
pub fn final_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.train_dir().join(FINAL_CHECKPOINT)
}
