use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_folds, predict_sample, train_fold, FoldPlan, TrainError};
use crate::augment::RandomStream;
use crate::config::ExperimentConfig;
use crate::metrics::{aggregate, evaluate_patient, inter_reader, write_records, MetricsRecord, Summary};
use crate::nn::checkpoint::WEIGHTS_FILE;
use crate::nn::save_checkpoint;
use crate::preprocess::{prepare_case, preprocess_prepared, PreparedCase};
use crate::volume::{load_case, DatasetManifest, PatientCase};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const FOLD_PLAN_FILE: &str = "fold_plan.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const TRANSFORMS_FILE: &str = "transforms.jsonl";
pub const LOG_FILE: &str = "log.csv";

const BACKEND_NOTE: &str = "CPU kernels run single-threaded with a fixed summation order, so weights are \
expected to repeat bit for bit on the same build and machine; other CPUs or builds may round differently. \
The data pipeline (fold plan, sample stream, transform logs) is deterministic everywhere. \
checkpoint_sha256 records the weights of each fold so runs can be compared.";

/// Written at the run root; updated after every completed fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub matrix: Vec<String>,
    pub folds_run: Vec<usize>,
    pub backend_determinism: String,
    /// `<config dir>/fold-<k>` → SHA-256 of its `weights.bin`.
    pub checkpoint_sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct CrossvalOptions {
    /// Subset of folds to run; all folds when `None`.
    pub folds: Option<Vec<usize>>,
}

pub struct CrossvalOutcome {
    pub plan: FoldPlan,
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
    pub manifest: RunManifest,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| TrainError::io(path, e))
}

fn records_csv(records: &[MetricsRecord]) -> Result<Vec<u8>, TrainError> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    Ok(buf)
}

/// Runs every (matrix entry, fold) pair: train on the other folds, predict
/// the held-out cases on their patch grid, score, and persist.
///
/// Layout: `<run_dir>/<config>/fold-<k>/{checkpoint/, log.csv, records.csv,
/// transforms.jsonl}` plus `fold_plan.json`, `records.csv` and
/// `run_manifest.json` at the root. Nothing computed on validation cases
/// feeds back into training.
pub fn run_crossval(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    run_dir: &Path,
    opts: &CrossvalOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<CrossvalOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let cases: Vec<PatientCase> = manifest.cases.iter().map(|e| load_case(manifest, e)).collect::<Result<_, _>>()?;
    let ids: Vec<(String, _)> = cases.iter().map(|c| (c.id.clone(), c.lesion_type)).collect();
    let plan = make_folds(&ids, cfg.folds, cfg.seed)?;
    let folds: Vec<usize> = match &opts.folds {
        Some(f) => {
            if let Some(bad) = f.iter().find(|&&k| k >= cfg.folds) {
                return Err(TrainError::InvalidConfig(format!("fold {bad} out of range 0..{}", cfg.folds)));
            }
            f.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
        }
        None => (0..cfg.folds).collect(),
    };
    write_file(&run_dir.join(FOLD_PLAN_FILE), serde_json::to_string_pretty(&plan).expect("plan serializes").as_bytes())?;

    let mut records: Vec<MetricsRecord> = Vec::new();
    for c in &cases {
        if let Some(second) = &c.second_reader_mask {
            records.push(inter_reader(&c.mask.data, &second.data, &c.id)?);
        }
    }
    let mut run_manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        matrix: cfg.matrix.iter().map(|m| m.id()).collect(),
        folds_run: folds.clone(),
        backend_determinism: BACKEND_NOTE.to_string(),
        checkpoint_sha256: BTreeMap::new(),
    };
    let save_manifest = |m: &RunManifest| {
        write_file(&run_dir.join(RUN_MANIFEST_FILE), serde_json::to_string_pretty(m).expect("manifest serializes").as_bytes())
    };
    save_manifest(&run_manifest)?;
    write_file(&run_dir.join(RECORDS_FILE), &records_csv(&records)?)?;

    let root = RandomStream::new(cfg.seed);
    for entry in &cfg.matrix {
        let pcfg = cfg.preprocess_for(entry);
        let prepared: BTreeMap<String, PreparedCase> =
            cases.iter().map(|c| Ok((c.id.clone(), prepare_case(c, &pcfg)?))).collect::<Result<_, TrainError>>()?;
        let model_cfg = cfg.model_config(entry);
        for &fold in &folds {
            let val = plan.validation(fold);
            let train_ids = plan.training(fold);
            if let Some(id) = train_ids.iter().find(|id| val.contains(id)) {
                return Err(TrainError::Overlap(format!("case {id} in fold {fold}")));
            }
            let train: Vec<PreparedCase> = train_ids.iter().map(|id| prepared[id].clone()).collect();
            let stream = root.child(&format!("train/{}", entry.dir_name()), fold as u64);
            let fold_dir = run_dir.join(entry.dir_name()).join(format!("fold-{fold}"));
            progress(&format!("{} fold {fold}: training on {} cases", entry.id(), train.len()));
            let total = cfg.train.iterations;
            let mut report = |it: usize, loss: f64| {
                if (it + 1).is_multiple_of(50) || it + 1 == total {
                    progress(&format!("{} fold {fold}: iteration {}/{total} loss {loss:.4}", entry.id(), it + 1));
                }
            };
            let outcome = train_fold(&train, &model_cfg, &cfg.train, &cfg.augment, &stream, &mut report)?;

            let ckpt = fold_dir.join("checkpoint");
            save_checkpoint(&outcome.model, &ckpt)?;
            let weights = std::fs::read(ckpt.join(WEIGHTS_FILE)).map_err(|e| TrainError::io(&ckpt, e))?;
            run_manifest
                .checkpoint_sha256
                .insert(format!("{}/fold-{fold}", entry.dir_name()), crate::sha256_hex(&weights));

            let mut log = Vec::new();
            writeln!(log, "iteration,loss").expect("vec write");
            for (i, l) in outcome.losses.iter().enumerate() {
                writeln!(log, "{i},{l}").expect("vec write");
            }
            write_file(&fold_dir.join(LOG_FILE), &log)?;
            let mut tlog = Vec::new();
            for p in &outcome.transforms {
                serde_json::to_writer(&mut tlog, p).expect("provenance serializes");
                tlog.push(b'\n');
            }
            write_file(&fold_dir.join(TRANSFORMS_FILE), &tlog)?;

            let mut fold_records = Vec::with_capacity(val.len());
            for id in &val {
                let sample = preprocess_prepared(&prepared[id])?;
                let prob = predict_sample(&outcome.model, &sample, cfg.train.eval_batch)?;
                fold_records.push(evaluate_patient(&prob, &sample.mask, id, &entry.id(), Some(fold))?);
            }
            write_file(&fold_dir.join(RECORDS_FILE), &records_csv(&fold_records)?)?;
            let mean_dice: Vec<f64> = fold_records.iter().filter_map(|r| r.dice).collect();
            progress(&format!(
                "{} fold {fold}: mean held-out dice {:.3} over {} cases",
                entry.id(),
                mean_dice.iter().sum::<f64>() / mean_dice.len().max(1) as f64,
                fold_records.len()
            ));
            records.extend(fold_records);
            write_file(&run_dir.join(RECORDS_FILE), &records_csv(&records)?)?;
            save_manifest(&run_manifest)?;
        }
    }
    let summary = aggregate(&records)?;
    Ok(CrossvalOutcome { plan, records, summary, manifest: run_manifest })
}
