//! Verb dispatch, run directories, logging and exit codes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use hemoforge_core::cl::{
    class_thresholds, confident_joint, find_label_issues, issues_to_csv, misclassification_matrix,
    within_lineage_counts,
};
use hemoforge_core::dataset::derive_seed;
use hemoforge_core::denoise::{adaptive_denoise, estimate_sigma};
use hemoforge_core::folds::assign_stratified_folds;
use hemoforge_core::image::Image;
use hemoforge_core::imbalance::SamplerConfig;
use hemoforge_core::infer::{infer_dataset, EnsembleSpec, InferOutputs, LogitMatrix};
use hemoforge_core::manifest::{build_manifest, ClassMap, Manifest, Source};
use hemoforge_core::metrics::ConfusionMatrix;
use hemoforge_core::model::checkpoint::EpochRecord;
use hemoforge_core::model::train::{read_grid, train_grid, GridConfig, GridEntry, TrainObserver};
use hemoforge_core::oof::{labels_for, out_of_fold_eval, OofConfig, OofGroup, OofResult};
use hemoforge_core::registry::ClassRegistry;
use hemoforge_core::Error as CoreError;

use crate::config::{load_config, parse_override, ConfigError, RunConfig};
use crate::report::emit_report;
use crate::synth::{synth_data, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        use CoreError::*;
        match e {
            InvalidArgument(_) | Registry(_) | UnknownLabel(_) | UnmappedLabel { .. } | RegistryMismatch
            | DuplicatePaths(_) | Parse { .. } | UnknownBackbone(_) | MissingGridEntry { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "hemoforge", version, about = "Blood-cell image classification pipeline")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.focal_gamma=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory for logs, resolved config and artifacts.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Recompute and overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Scan source directories into a fold-assigned manifest.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// `source=dir` pairs, comma-separated or repeated.
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<String>,
        /// `source,label,code` mapping file; defaults to registry codes.
        #[arg(long)]
        class_map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write adaptively denoised copies of every manifest image.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train every (architecture, fold) model of the grid.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Concurrent (architecture, fold) runs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Ensemble inference over manifest records.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Grid table; defaults to `<run_dir>/grid.csv`.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "all", value_parser = ["all", "labeled", "unlabeled"])]
        subset: String,
    },
    /// Out-of-fold evaluation of the grid.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// `ensemble`, `all`, or an architecture id.
        #[arg(long)]
        group: Option<String>,
    },
    /// Confident-learning label issue analysis of OOF logits.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to `<run_dir>/oof_logits.csv`.
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Render plots and a summary from the run directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate a synthetic coloured-blob dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Images per class, in registry order.
        #[arg(long, value_delimiter = ',', default_value = "100,60,10")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        flip_rate: f64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 3.0)]
        noise_sigma: f64,
        /// Defaults to `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Prepare { .. } => "prepare",
            Verb::Denoise { .. } => "denoise",
            Verb::Train { .. } => "train",
            Verb::Infer { .. } => "infer",
            Verb::Evaluate { .. } => "evaluate",
            Verb::Analyze { .. } => "analyze",
            Verb::Report { .. } => "report",
            Verb::SynthData { .. } => "synth-data",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Verb::Prepare { common, .. }
            | Verb::Denoise { common, .. }
            | Verb::Train { common, .. }
            | Verb::Infer { common, .. }
            | Verb::Evaluate { common, .. }
            | Verb::Analyze { common, .. }
            | Verb::Report { common, .. }
            | Verb::SynthData { common, .. } => common,
        }
    }

    fn default_run_dir(&self) -> PathBuf {
        match self {
            Verb::SynthData { out, .. } => out.clone(),
            Verb::Prepare { out, .. } => out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
            _ => PathBuf::from("run"),
        }
    }
}

/// Writes log lines to stderr and to the run's log file.
struct Tee {
    file: Mutex<std::fs::File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let _ = std::io::stderr().write_all(buf);
        self.file.lock().expect("log lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.lock().expect("log lock").flush()
    }
}

fn init_logging(log_path: &Path) -> std::io::Result<()> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(log_path)?;
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .parse_env("HEMOFORGE_LOG")
        .format_timestamp_secs()
        .target(env_logger::Target::Pipe(Box::new(Tee { file: Mutex::new(file) })))
        .try_init();
    Ok(())
}

/// Writes `config.resolved`, refusing to replace a different one unless forced.
fn record_config(run_dir: &Path, cfg: &RunConfig, force: bool) -> Outcome {
    let path = run_dir.join("config.resolved");
    let text = cfg.to_text();
    if let Ok(existing) = std::fs::read_to_string(&path) {
        if existing != text && !force {
            let old: BTreeMap<String, String> = existing
                .lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
            let changed: Vec<&str> = cfg
                .entries()
                .into_iter()
                .filter(|(k, v)| old.get(*k) != Some(v))
                .map(|(k, _)| k)
                .collect();
            return Err(Failure::Validation(format!(
                "{} holds a different configuration (keys: {}); use another --run-dir or --force",
                path.display(),
                changed.join(", ")
            )));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn up_to_date(outputs: &[PathBuf], force: bool) -> bool {
    let done = !force && outputs.iter().all(|p| p.exists());
    if done {
        log::info!("outputs already exist, nothing to do (use --force to recompute)");
    }
    done
}

fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    Manifest::read_csv(path, &ClassRegistry::builtin())
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn require_folds(manifest: &Manifest, folds: usize) -> Outcome {
    for r in manifest.records().iter().filter(|r| r.label.is_some()) {
        match r.fold {
            None => {
                return Err(Failure::Validation(format!(
                    "{} has no fold; assign folds with `prepare` or `synth-data`",
                    r.image_path
                )))
            }
            Some(f) if f >= folds => {
                return Err(Failure::Validation(format!(
                    "{} is in fold {f}, but data.folds = {folds}",
                    r.image_path
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn load_grid(run_dir: &Path, grid: Option<&PathBuf>) -> Result<Vec<GridEntry>, Failure> {
    let path = grid.cloned().unwrap_or_else(|| run_dir.join("grid.csv"));
    read_grid(&path).map_err(|e| match e {
        CoreError::Io(io) => Failure::Validation(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn oof_config(cfg: &RunConfig) -> OofConfig {
    OofConfig {
        tta_k: cfg.ensemble.tta_k,
        tta_mode: cfg.ensemble.tta_mode,
        use_ema: cfg.ensemble.use_ema,
        averaging: cfg.ensemble.averaging,
        seed: derive_seed(cfg.seed, "inference", 0),
        denoise: cfg.denoise.clone(),
    }
}

struct LogObserver;

impl TrainObserver for LogObserver {
    fn on_epoch(&self, backbone_id: &str, fold: usize, r: &EpochRecord) {
        log::info!(
            "{backbone_id} fold {fold} epoch {}: loss {:.5}, val macro-F1 {:.4}, lr {:.2e}",
            r.epoch,
            r.train_loss,
            r.val_macro_f1,
            r.lr
        );
    }
}

fn cmd_prepare(cfg: &RunConfig, sources: &[String], class_map: Option<&Path>, out: &Path, force: bool) -> Outcome {
    if up_to_date(&[out.to_path_buf()], force) {
        return Ok(());
    }
    let registry = ClassRegistry::builtin();
    let mut dirs = BTreeMap::new();
    for s in sources {
        let (name, dir) = s
            .split_once('=')
            .ok_or_else(|| Failure::Validation(format!("--sources entry `{s}` is not `source=dir`")))?;
        let source: Source = name.parse()?;
        let dir = std::fs::canonicalize(dir)
            .map_err(|e| Failure::Validation(format!("source {name}: {dir}: {e}")))?;
        if dirs.insert(source, dir).is_some() {
            return Err(Failure::Validation(format!("source {name} given twice")));
        }
    }
    let map = match class_map {
        Some(p) => ClassMap::parse(&std::fs::read_to_string(p)?)?,
        None => ClassMap::identity(&registry),
    };
    let manifest = build_manifest(&dirs, &map, &registry)?;
    let mut manifest = assign_stratified_folds(&manifest, cfg.folds, derive_seed(cfg.seed, "folds", 0))?;
    manifest.provenance.push(format!("stratified folds k={} seed={}", cfg.folds, cfg.seed));
    manifest.write_csv(out)?;
    log::info!("wrote {} records to {}", manifest.len(), out.display());
    Ok(())
}

fn cmd_denoise(cfg: &RunConfig, run_dir: &Path, manifest_path: &Path, force: bool) -> Outcome {
    let out_dir = run_dir.join("denoised");
    let table = out_dir.join("sigma.csv");
    if up_to_date(&[table.clone()], force) {
        return Ok(());
    }
    let manifest = read_manifest(manifest_path)?;
    std::fs::create_dir_all(&out_dir)?;
    let mut text = String::from("image_path,sigma_hat,bypassed,output_path\n");
    for (i, r) in manifest.records().iter().enumerate() {
        let img = Image::load(&manifest.resolve_path(r))?;
        let sigma = estimate_sigma(&img)?.sigma_hat;
        let clean = adaptive_denoise(&img, &cfg.denoise)?;
        let bypassed = clean == img;
        let rel = PathBuf::from(format!("{i:06}.png"));
        clean.save_png(&out_dir.join(&rel))?;
        let _ = writeln!(text, "{},{sigma},{bypassed},{}", r.image_path, rel.display());
    }
    write_text(&table, &text)?;
    log::info!("denoised {} images into {}", manifest.len(), out_dir.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path, manifest_path: &Path, jobs: Option<usize>, force: bool) -> Outcome {
    let manifest = read_manifest(manifest_path)?;
    require_folds(&manifest, cfg.folds)?;
    let specs = cfg.model_specs()?;
    let grid_path = run_dir.join("grid.csv");
    if !force {
        if let Ok(entries) = read_grid(&grid_path) {
            if entries.len() == specs.len() * cfg.folds && entries.iter().all(|e| e.checkpoint_path.exists()) {
                log::info!("grid complete, nothing to do (use --force to retrain)");
                return Ok(());
            }
        }
    }
    let grid_cfg = GridConfig {
        train: cfg.train_config(),
        denoise: cfg.denoise.clone(),
        augment: cfg.augment.clone(),
        sampler: SamplerConfig {
            beta: cfg.sampler_beta,
            seed: derive_seed(cfg.seed, "sampler", 0),
        },
        folds: cfg.folds,
        jobs: jobs.unwrap_or(cfg.jobs),
        skip_existing: !force,
    };
    if grid_cfg.jobs == 0 {
        return Err(Failure::Validation("--jobs must be at least 1".into()));
    }
    let entries = train_grid(&manifest, &specs, &grid_cfg, run_dir, &LogObserver).map_err(|e| match e {
        CoreError::BackboneUnavailable(b) => Failure::Runtime(format!(
            "backbone `{b}` needs a registered runtime and pretrained weights (cache root: {}); \
             desk-scale runs use tiny-conv, tiny-patch, tiny-pool",
            std::env::var("HEMOFORGE_CACHE").unwrap_or_else(|_| "HEMOFORGE_CACHE unset".into())
        )),
        other => other.into(),
    })?;
    for e in &entries {
        log::info!("{} fold {}: best val macro-F1 {:.4}", e.backbone_id, e.fold, e.best_val_macro_f1);
    }
    Ok(())
}

fn cmd_infer(
    cfg: &RunConfig,
    run_dir: &Path,
    manifest_path: &Path,
    grid: Option<&PathBuf>,
    subset: &str,
    force: bool,
) -> Outcome {
    let manifest = read_manifest(manifest_path)?;
    let entries = load_grid(run_dir, grid)?;
    let outputs = InferOutputs::in_dir(run_dir);
    if force {
        for p in [&outputs.logits, &outputs.predictions, &outputs.failures] {
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    let indices: Vec<usize> = manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| match subset {
            "labeled" => r.label.is_some(),
            "unlabeled" => r.label.is_none(),
            _ => true,
        })
        .map(|(i, _)| i)
        .collect();
    let spec = EnsembleSpec {
        checkpoints: entries.iter().map(|e| e.checkpoint_path.clone()).collect(),
        tta_k: cfg.ensemble.tta_k,
        tta_mode: cfg.ensemble.tta_mode,
        use_ema: cfg.ensemble.use_ema,
        averaging: cfg.ensemble.averaging,
        seed: derive_seed(cfg.seed, "inference", 0),
    };
    let summary = infer_dataset(&spec, &manifest, &indices, &cfg.denoise, &outputs)?;
    log::info!(
        "inference: {} computed, {} reused, {} failed",
        summary.computed,
        summary.reused,
        summary.failed.len()
    );
    Ok(())
}

fn provenance_csv(result: &OofResult) -> String {
    let mut out = String::from("sample_id,fold,models\n");
    for p in &result.provenance {
        let models: Vec<String> = p.models.iter().map(|(a, f)| format!("{a}@fold{f}")).collect();
        let _ = writeln!(out, "{},{},{}", p.sample_id, p.fold, models.join(";"));
    }
    out
}

fn write_oof(run_dir: &Path, result: &OofResult, registry: &ClassRegistry) -> Outcome {
    write_text(&run_dir.join("oof_logits.csv"), &result.logits.to_csv(registry))?;
    write_text(&run_dir.join("oof_confusion.csv"), &result.confusion.to_csv())?;
    write_text(&run_dir.join("oof_provenance.csv"), &provenance_csv(result))?;
    write_text(&run_dir.join("metrics.txt"), &result.report.to_text())?;
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    run_dir: &Path,
    manifest_path: &Path,
    grid: Option<&PathBuf>,
    group: Option<&str>,
    force: bool,
) -> Outcome {
    let group = group.unwrap_or(&cfg.eval_group).to_string();
    let mut outputs = vec![run_dir.join("metrics.txt")];
    if group == "all" {
        outputs.push(run_dir.join("comparison.csv"));
    }
    if up_to_date(&outputs, force) {
        return Ok(());
    }
    let manifest = read_manifest(manifest_path)?;
    let entries = load_grid(run_dir, grid)?;
    let registry = manifest.registry().clone();
    let oof = oof_config(cfg);
    let main_group = if group == "ensemble" || group == "all" {
        OofGroup::Ensemble
    } else {
        if !entries.iter().any(|e| e.backbone_id == group) {
            return Err(Failure::Validation(format!("eval group `{group}` is not in the grid")));
        }
        OofGroup::Architecture(group.clone())
    };
    let result = out_of_fold_eval(&entries, &manifest, &main_group, &oof)?;
    log::info!(
        "{group}: OOF macro-F1 {:.4}, balanced accuracy {:.4} over {} samples",
        result.report.macro_f1,
        result.report.balanced_accuracy,
        result.report.samples
    );
    if group == "all" {
        let mut table = String::from("group,macro_f1,balanced_accuracy,macro_precision,macro_sensitivity,macro_specificity\n");
        let mut archs: Vec<&str> = entries.iter().map(|e| e.backbone_id.as_str()).collect();
        archs.sort_unstable();
        archs.dedup();
        let mut rows = Vec::new();
        for a in archs {
            let r = out_of_fold_eval(&entries, &manifest, &OofGroup::Architecture(a.to_string()), &oof)?;
            log::info!("{a}: OOF macro-F1 {:.4}", r.report.macro_f1);
            write_text(&run_dir.join(format!("metrics_{a}.txt")), &r.report.to_text())?;
            rows.push((a.to_string(), r.report));
        }
        rows.push(("ensemble".into(), result.report.clone()));
        for (name, r) in rows {
            let _ = writeln!(
                table,
                "{name},{},{},{},{},{}",
                r.macro_f1, r.balanced_accuracy, r.macro_precision, r.macro_sensitivity, r.macro_specificity
            );
        }
        write_text(&run_dir.join("comparison.csv"), &table)?;
    }
    write_oof(run_dir, &result, &registry)
}

fn cmd_analyze(cfg: &RunConfig, run_dir: &Path, manifest_path: &Path, logits: Option<&PathBuf>, force: bool) -> Outcome {
    let outputs = [run_dir.join("issues.csv"), run_dir.join("misclassification.csv")];
    if up_to_date(&outputs, force) {
        return Ok(());
    }
    let manifest = read_manifest(manifest_path)?;
    let registry = manifest.registry().clone();
    let path = logits.cloned().unwrap_or_else(|| run_dir.join("oof_logits.csv"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let matrix = LogitMatrix::parse_csv(&text, &registry)?;
    let probs = matrix.probabilities();
    let labels = labels_for(&matrix, &manifest)?;
    let issues = find_label_issues(&probs.sample_ids, &probs.values, &labels, cfg.cl_cutoff)?;
    let thresholds = class_thresholds(&probs.values, &labels)?;
    let joint = confident_joint(&probs.values, &labels, &thresholds)?;
    let joint_cm = ConfusionMatrix {
        labels: registry.codes().map(str::to_string).collect(),
        counts: joint.counts.clone(),
    };
    write_text(&outputs[0], &issues_to_csv(&issues, &registry))?;
    write_text(&outputs[1], &misclassification_matrix(&issues, &registry)?.to_csv())?;
    write_text(&run_dir.join("confident_joint.csv"), &joint_cm.to_csv())?;
    let mut summary = format!(
        "samples = {}\nissues = {}\nself_confidence_cutoff = {}\n",
        labels.len(),
        issues.len(),
        cfg.cl_cutoff.map_or("none".into(), |c| c.to_string())
    );
    for (lineage, n) in within_lineage_counts(&issues, &registry) {
        let _ = writeln!(summary, "within_{lineage} = {n}");
    }
    summary.push_str("\n[thresholds]\n");
    for (code, t) in registry.codes().zip(&thresholds) {
        let _ = writeln!(summary, "{code} = {t}");
    }
    write_text(&run_dir.join("cl_summary.txt"), &summary)?;
    log::info!("{} label issues among {} samples", issues.len(), labels.len());
    Ok(())
}

fn cmd_report(run_dir: &Path, manifest: Option<&PathBuf>, force: bool) -> Outcome {
    if up_to_date(&[run_dir.join("report/index.md")], force) {
        return Ok(());
    }
    let path = manifest.cloned().or_else(|| {
        let p = run_dir.join("manifest.csv");
        p.exists().then_some(p)
    });
    let manifest = path.as_deref().map(read_manifest).transpose()?;
    let bundle = emit_report(run_dir, manifest.as_ref())?;
    for g in &bundle.gaps {
        log::warn!("report gap: {g}");
    }
    log::info!("report: {} files written", bundle.written.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    cfg: &RunConfig,
    out: &Path,
    counts: &[usize],
    flip_rate: f64,
    image_size: usize,
    noise_sigma: f64,
    seed: Option<u64>,
    force: bool,
) -> Outcome {
    if up_to_date(&[out.join("manifest.csv")], force) {
        return Ok(());
    }
    let seed = seed.unwrap_or(cfg.seed);
    let spec = SynthSpec {
        per_class_counts: counts.to_vec(),
        image_size,
        flip_rate,
        noise_sigma,
        seed,
    };
    let generated = synth_data(out, &spec)?;
    let mut manifest = assign_stratified_folds(&generated.manifest, cfg.folds, derive_seed(seed, "folds", 0))?;
    manifest.provenance.push(format!("stratified folds k={} seed={seed}", cfg.folds));
    manifest.write_csv(&generated.manifest_path)?;
    log::info!(
        "wrote {} synthetic images ({} flipped) to {}",
        manifest.len(),
        generated.flips.len(),
        out.display()
    );
    Ok(())
}

fn dispatch(verb: &Verb, cfg: &RunConfig, run_dir: &Path) -> Outcome {
    let force = verb.common().force;
    match verb {
        Verb::Prepare {
            sources, class_map, out, ..
        } => cmd_prepare(cfg, sources, class_map.as_deref(), out, force),
        Verb::Denoise { manifest, .. } => cmd_denoise(cfg, run_dir, manifest, force),
        Verb::Train { manifest, jobs, .. } => cmd_train(cfg, run_dir, manifest, *jobs, force),
        Verb::Infer {
            manifest, grid, subset, ..
        } => cmd_infer(cfg, run_dir, manifest, grid.as_ref(), subset, force),
        Verb::Evaluate {
            manifest, grid, group, ..
        } => cmd_evaluate(cfg, run_dir, manifest, grid.as_ref(), group.as_deref(), force),
        Verb::Analyze { manifest, logits, .. } => cmd_analyze(cfg, run_dir, manifest, logits.as_ref(), force),
        Verb::Report { manifest, .. } => cmd_report(run_dir, manifest.as_ref(), force),
        Verb::SynthData {
            out,
            counts,
            flip_rate,
            image_size,
            noise_sigma,
            seed,
            ..
        } => cmd_synth(cfg, out, counts, *flip_rate, *image_size, *noise_sigma, *seed, force),
    }
}

fn execute(verb: &Verb) -> Outcome {
    let common = verb.common();
    let overrides = common
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = load_config(common.config.as_deref(), &overrides)?;
    let run_dir = common
        .run_dir
        .clone()
        .or_else(|| cfg.run_dir.clone())
        .unwrap_or_else(|| verb.default_run_dir());
    std::fs::create_dir_all(&run_dir)?;
    record_config(&run_dir, &cfg, common.force)?;
    init_logging(&run_dir.join(format!("{}.log", verb.name())))?;
    log::info!("hemoforge {} (run dir {})", verb.name(), run_dir.display());
    dispatch(verb, &cfg, &run_dir)
}

/// Parses `args` (including the program name) and runs the verb.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(&cli.verb) {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation(msg)) => {
            log::error!("{msg}");
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(Failure::Runtime(msg)) => {
            log::error!("{msg}");
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
