use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use spineseg::augment::{sample_for, RandomStream};
use spineseg::config::{ExperimentConfig, MatrixEntry};
use spineseg::metrics::{evaluate_patient, write_records};
use spineseg::nn::{load_checkpoint, save_checkpoint, Dimensionality, UNet};
use spineseg::phantom::{generate_dataset, PhantomSpec};
use spineseg::preprocess::{prepare_case, preprocess_prepared, Sample};
use spineseg::report::write_report;
use spineseg::trainer::{make_folds, predict_sample, run_crossval, train_fold, CrossvalOptions, RECORDS_FILE};
use spineseg::volume::{load_case, load_manifest, save_mask, save_volume, DatasetManifest, Modality, PatientCase, SegmentationMask, Volume};

const RUN_DIR_ENV: &str = "SPINESEG_RUN_DIR";

#[derive(Parser)]
#[command(name = "spineseg", version, about = "Spinal metastasis segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    PhantomGen(PhantomArgs),
    /// Write the preprocessed patch of every case as volume files.
    Preprocess(PreprocessArgs),
    /// Write augmented samples of one case plus their transform log.
    AugmentPreview(PreviewArgs),
    /// Train one model per matrix entry on all cases.
    Train(RunArgs),
    /// Stratified k-fold cross-validation over the experiment matrix.
    Crossval(RunArgs),
    /// Score a checkpoint against the manifest's reference masks.
    Evaluate(EvaluateArgs),
    /// Render summary tables and box plots from a run's records.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON phantom spec; defaults apply to omitted fields.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Case id; the first manifest case when omitted.
    #[arg(long)]
    case: Option<String>,
    #[arg(long, default_value_t = 4)]
    count: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory; defaults to `<run root>/run-<config hash>`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Comma-separated subset of folds, e.g. `0,2`.
    #[arg(long, value_delimiter = ',')]
    folds: Option<Vec<usize>>,
    /// Validate the config and print the plan without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint directory written by `train` or `crossval`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input channels of the checkpoint, e.g. `T1,T2`.
    #[arg(long, value_delimiter = ',', value_parser = parse_modality, required = true)]
    modalities: Vec<Modality>,
    /// Records CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these case ids.
    #[arg(long, value_delimiter = ',')]
    cases: Option<Vec<String>>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Output directory; the run directory when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    match s {
        "T1" | "t1" => Ok(Modality::T1),
        "T2" | "t2" => Ok(Modality::T2),
        _ => Err(format!("unknown modality {s:?} (expected T1 or T2)")),
    }
}

/// Error annotated with the pipeline stage it came from.
fn stage<T, E>(name: &str, r: std::result::Result<T, E>) -> Result<T>
where
    E: Into<anyhow::Error>,
{
    r.map_err(Into::into).with_context(|| format!("stage `{name}` failed"))
}

struct Loaded {
    cfg: ExperimentConfig,
    base: PathBuf,
    manifest: DatasetManifest,
}

fn load(args: &ConfigArgs) -> Result<Loaded> {
    let (mut cfg, base) = stage("config", ExperimentConfig::load(&args.config))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    stage("config", cfg.check_paths(&base))?;
    let manifest = stage("manifest", load_manifest(cfg.manifest_path(&base)))?;
    Ok(Loaded { cfg, base, manifest })
}

fn load_cases(m: &DatasetManifest) -> Result<Vec<PatientCase>> {
    m.cases.iter().map(|e| stage("load", load_case(m, e))).collect()
}

fn run_dir(l: &Loaded, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = match std::env::var_os(RUN_DIR_ENV) {
        Some(r) => PathBuf::from(r),
        None if l.cfg.output.run_root.is_absolute() => l.cfg.output.run_root.clone(),
        None => l.base.join(&l.cfg.output.run_root),
    };
    root.join(format!("run-{}", &l.cfg.hash()[..12]))
}

fn progress(start: Instant) -> impl FnMut(&str) {
    move |msg| eprintln!("[{:>8.1}s] {msg}", start.elapsed().as_secs_f64())
}

/// Writes each channel, the mask and the support of a sample.
fn save_sample(s: &Sample, case: &PatientCase, modalities: &[Modality], dir: &Path, stem: &str) -> Result<()> {
    let first = case.modalities.values().next().context("case has no volumes")?;
    let depth = first.data.dim().2 as f64;
    let z = depth / s.spatial_dims()[2] as f64;
    let spacing = [first.spacing[0], first.spacing[1], first.spacing[2] * z];
    let off = s.provenance.crop_offset;
    let origin: [f64; 3] = std::array::from_fn(|i| first.origin[i] + off[i] as f64 * spacing[i]);
    for (c, m) in modalities.iter().enumerate() {
        let v = Volume::new(s.image.index_axis(Axis(0), c).to_owned(), spacing, origin)?;
        save_volume(&v, dir.join(format!("{stem}_{}.nii.gz", m.tag().to_lowercase())))?;
    }
    save_mask(&SegmentationMask::new(s.mask.clone(), spacing, origin)?, dir.join(format!("{stem}_mask.nii.gz")))?;
    save_mask(&SegmentationMask::new(s.support.clone(), spacing, origin)?, dir.join(format!("{stem}_support.nii.gz")))?;
    Ok(())
}

fn phantom_gen(a: PhantomArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = stage("config", std::fs::read_to_string(p).with_context(|| p.display().to_string()))?;
            stage("config", serde_json::from_str::<PhantomSpec>(&text).with_context(|| p.display().to_string()))?
        }
        None => PhantomSpec::default(),
    };
    let m = stage("phantom-gen", generate_dataset(a.cases, &spec, a.seed, &a.out))?;
    println!("wrote {} cases to {}", m.cases.len(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let l = load(&a.cfg)?;
    let pcfg = &l.cfg.preprocess;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let mut log = String::new();
    for case in load_cases(&l.manifest)? {
        let p = stage("preprocess", prepare_case(&case, pcfg))?;
        let s = stage("preprocess", preprocess_prepared(&p))?;
        stage("preprocess", save_sample(&s, &case, &pcfg.modalities, &a.out, &case.id))?;
        log.push_str(&serde_json::to_string(&s.provenance)?);
        log.push('\n');
    }
    stage("preprocess", std::fs::write(a.out.join("provenance.jsonl"), log))?;
    println!("wrote {} preprocessed cases to {}", l.manifest.cases.len(), a.out.display());
    Ok(())
}

fn augment_preview(a: PreviewArgs) -> Result<()> {
    let l = load(&a.cfg)?;
    let entry = match &a.case {
        Some(id) => l.manifest.case(id).with_context(|| format!("no case {id:?} in manifest"))?,
        None => l.manifest.cases.first().context("manifest has no cases")?,
    };
    let case = stage("load", load_case(&l.manifest, entry))?;
    let p = stage("preprocess", prepare_case(&case, &l.cfg.preprocess))?;
    let stream = RandomStream::new(l.cfg.seed).child("preview", 0);
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let mut provenance = Vec::new();
    for i in 0..a.count {
        let s = stage("augment", sample_for(&p, &l.cfg.augment, &stream, i))?;
        stage("augment", save_sample(&s, &case, &l.cfg.preprocess.modalities, &a.out, &format!("{}_aug{i:03}", case.id)))?;
        provenance.push(s.provenance);
    }
    let log = serde_json::to_string_pretty(&provenance)?;
    stage("augment", std::fs::write(a.out.join("transforms.json"), log))?;
    println!("wrote {} augmented samples of {} to {}", a.count, case.id, a.out.display());
    Ok(())
}

fn print_plan(l: &Loaded, run: &Path, folds: &[usize]) -> Result<()> {
    let ids: Vec<_> = l.manifest.cases.iter().map(|c| (c.id.clone(), c.lesion_type)).collect();
    let plan = stage("folds", make_folds(&ids, l.cfg.folds, l.cfg.seed))?;
    println!("config hash {}", l.cfg.hash());
    println!("run directory {}", run.display());
    println!("seed {}, {} cases, {} folds, {} iterations per fold", l.cfg.seed, ids.len(), l.cfg.folds, l.cfg.train.iterations);
    for m in &l.cfg.matrix {
        let params = stage("model", UNet::<f32>::new(l.cfg.model_config(m)))?.param_count();
        println!("matrix {} ({params} parameters)", m.id());
    }
    for k in folds {
        println!("fold {k}: validate {}", plan.validation(*k).join(" "));
    }
    Ok(())
}

fn fold_list(l: &Loaded, folds: &Option<Vec<usize>>) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..l.cfg.folds).collect();
    let Some(f) = folds else { return Ok(all) };
    if let Some(bad) = f.iter().find(|&&k| k >= l.cfg.folds) {
        bail!("stage `config` failed: --folds {bad} is out of range 0..{}", l.cfg.folds);
    }
    Ok(f.clone())
}

fn train(a: RunArgs) -> Result<()> {
    let l = load(&a.cfg)?;
    let run = run_dir(&l, a.run.as_deref());
    if a.dry_run {
        return print_plan(&l, &run, &[]);
    }
    let cases = load_cases(&l.manifest)?;
    let mut log = progress(Instant::now());
    for entry in &l.cfg.matrix {
        let pcfg = l.cfg.preprocess_for(entry);
        let prepared = cases.iter().map(|c| stage("preprocess", prepare_case(c, &pcfg))).collect::<Result<Vec<_>>>()?;
        let stream = RandomStream::new(l.cfg.seed).child(&format!("final/{}", entry.dir_name()), 0);
        let total = l.cfg.train.iterations;
        let mut on_it = |it: usize, loss: f64| {
            if (it + 1).is_multiple_of(50) || it + 1 == total {
                log(&format!("{} iteration {}/{total} loss {loss:.4}", entry.id(), it + 1));
            }
        };
        let out = stage("train", train_fold(&prepared, &l.cfg.model_config(entry), &l.cfg.train, &l.cfg.augment, &stream, &mut on_it))?;
        let dir = run.join(entry.dir_name()).join("final").join("checkpoint");
        stage("train", save_checkpoint(&out.model, &dir))?;
        println!("{}: checkpoint {}", entry.id(), dir.display());
    }
    Ok(())
}

fn crossval(a: RunArgs) -> Result<()> {
    let l = load(&a.cfg)?;
    let run = run_dir(&l, a.run.as_deref());
    let folds = fold_list(&l, &a.folds)?;
    if a.dry_run {
        return print_plan(&l, &run, &folds);
    }
    let opts = CrossvalOptions { folds: Some(folds) };
    let out = stage("crossval", run_crossval(&l.cfg, &l.manifest, &run, &opts, &mut progress(Instant::now())))?;
    for ((config, metric), stat) in &out.summary {
        match stat {
            Some(s) => println!("{config:<12} {:<12} {:5.1} ± {:4.1} (n={})", metric.name(), 100.0 * s.mean, 100.0 * s.std, s.n),
            None => println!("{config:<12} {:<12} undefined", metric.name()),
        }
    }
    println!("run directory {}", run.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let l = load(&a.cfg)?;
    let model: UNet<f32> = stage("checkpoint", load_checkpoint(&a.checkpoint))?;
    let mc = model.config();
    if mc.in_channels != a.modalities.len() {
        bail!("stage `evaluate` failed: checkpoint expects {} channels, --modalities lists {}", mc.in_channels, a.modalities.len());
    }
    let entry = MatrixEntry { dimensionality: mc.dimensionality, modalities: a.modalities.clone() };
    let mut pcfg = l.cfg.preprocess_for(&entry);
    if mc.dimensionality == Dimensionality::ThreeD {
        pcfg.patch_size = mc.input_shape;
    } else {
        pcfg.patch_size[0] = mc.input_shape[0];
        pcfg.patch_size[1] = mc.input_shape[1];
    }
    let mut records = Vec::new();
    for e in &l.manifest.cases {
        if a.cases.as_ref().is_some_and(|ids| !ids.contains(&e.id)) {
            continue;
        }
        let case = stage("load", load_case(&l.manifest, e))?;
        let s = stage("preprocess", prepare_case(&case, &pcfg).and_then(|p| preprocess_prepared(&p)))?;
        let prob = stage("evaluate", predict_sample(&model, &s, l.cfg.train.eval_batch))?;
        records.push(stage("evaluate", evaluate_patient(&prob, &s.mask, &case.id, &entry.id(), None))?);
    }
    if records.is_empty() {
        bail!("stage `evaluate` failed: no cases selected");
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    let file = stage("evaluate", std::fs::File::create(&a.out).with_context(|| a.out.display().to_string()))?;
    stage("evaluate", write_records(file, &records))?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.run.clone());
    let files = stage("report", write_report(&a.run.join(RECORDS_FILE), &out))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Preprocess(a) => preprocess(a),
        Command::AugmentPreview(a) => augment_preview(a),
        Command::Train(a) => train(a),
        Command::Crossval(a) => crossval(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
