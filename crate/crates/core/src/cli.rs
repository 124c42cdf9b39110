//! `segkit` command line: synth, split, train, predict, detect, evaluate.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use crate::config::RunConfig;
use crate::data::{
    center_crop, load_entries, load_sample, scan_dataset, split_folds, synth_blobs, write_dataset, DatasetEntry,
    FoldSplit, Sample,
};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nets::Network;
use crate::postprocess::{
    binarize, detect_mask, write_detections_jsonl, write_mask_png, Connectivity, DetectionRecord, ProbabilityMap,
};
use crate::report::{ModelReport, Report};
use crate::trainer::{
    best_epoch, evaluate, load_checkpoint, predict_maps, save_checkpoint, train, write_history_csv, Checkpoint,
};

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(name = "segkit", version, about = "Lesion segmentation, detection and evaluation")]
pub struct Cli {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). 1 runs everything sequentially.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (images/ and masks/).
    Synth(SynthArgs),
    /// Split annotated images into folds and write the fold table.
    Split(SplitArgs),
    /// Train on all folds but the validation fold.
    Train(TrainArgs),
    /// Write binarized prediction masks as PNG.
    Predict(PredictArgs),
    /// Write lesion detections as JSON lines.
    Detect(DetectArgs),
    /// Score checkpoints and write CSV and JSON reports.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root to create (default: `data_root`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub max_lesions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fold table to write (default: `fold_table`, else `<output_dir>/folds.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub val_fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from `<output_dir>/checkpoint_final.ckpt` when present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Default: `<output_dir>/checkpoint_final.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image files or directories of PNG images (default: `<data_root>/images`).
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Default: `<output_dir>/predictions`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Directory of binary masks (PNG or JPEG); replaces checkpoint inference.
    #[arg(long, conflicts_with_all = ["checkpoint", "images"])]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Default: `<output_dir>/detections.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_area: Option<usize>,
    #[arg(long)]
    pub connectivity: Option<u8>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// One report row per checkpoint (default: `<output_dir>/checkpoint_final.ckpt`).
    #[arg(long, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Folds to score (default: `val_fold`).
    #[arg(long = "fold", num_args = 1..)]
    pub folds: Vec<usize>,
    /// Score every image under `data_root`, annotated or not.
    #[arg(long, conflicts_with = "folds")]
    pub all: bool,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Measure inference time.
    #[arg(long)]
    pub timing: bool,
    /// Default: `<output_dir>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Width of the lesion-area histogram bins in pixels.
    #[arg(long, default_value_t = 500)]
    pub area_bin: usize,
}

pub fn init_logging(quiet: bool) {
    let level = if quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("SEGKIT_LOG")
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} target={} {}",
                record.level(),
                record.target(),
                record.args()
            )
        })
        .try_init();
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn annotated(entries: Vec<DatasetEntry>, root: &Path) -> Result<Vec<DatasetEntry>> {
    let out: Vec<DatasetEntry> = entries.into_iter().filter(|e| e.mask.is_some()).collect();
    if out.is_empty() {
        return Err(Error::format(root, "no image has a mask"));
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // a pool built earlier in the same process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(cfg, a),
        Command::Split(a) => cmd_split(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Predict(a) => cmd_predict(cfg, a),
        Command::Detect(a) => cmd_detect(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
    }
}

fn cmd_synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| cfg.data_root.clone());
    if let Some(v) = a.count {
        cfg.synth.count = v;
    }
    if let Some(v) = a.size {
        cfg.synth.params.size = v;
    }
    if let Some(v) = a.max_lesions {
        cfg.synth.params.max_lesions = v;
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let samples = synth_blobs(seed, cfg.synth.count, &cfg.synth.params)?;
    write_dataset(&samples, &out)?;
    info!("synth count={} size={} out={}", samples.len(), cfg.synth.params.size, out.display());
    println!("samples={} out={}", samples.len(), out.display());
    Ok(())
}

fn cmd_split(mut cfg: RunConfig, a: SplitArgs) -> Result<()> {
    if let Some(v) = a.data_root {
        cfg.data_root = v;
    }
    let k = a.folds.unwrap_or(cfg.folds);
    let seed = a.seed.unwrap_or(cfg.seed);
    let entries = annotated(scan_dataset(&cfg.data_root)?, &cfg.data_root)?;
    let ids: Vec<String> = entries.into_iter().map(|e| e.id).collect();
    let split = split_folds(&ids, k, seed)?;
    let out = a.out.unwrap_or_else(|| cfg.fold_table_path());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    split.write_csv(&out)?;
    let sizes: Vec<String> = split.sizes().iter().map(|s| s.to_string()).collect();
    info!("split ids={} folds={k} seed={seed} table={}", ids.len(), out.display());
    println!("fold_sizes={}", sizes.join(","));
    Ok(())
}

/// Annotated samples of the run with their fold set. The fold table is
/// created when missing.
fn load_folded(cfg: &RunConfig) -> Result<Vec<Sample>> {
    require_dir(&cfg.data_root)?;
    let entries = annotated(scan_dataset(&cfg.data_root)?, &cfg.data_root)?;
    let table = cfg.fold_table_path();
    let split = if table.exists() {
        FoldSplit::read_csv(&table)?
    } else {
        let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
        let split = split_folds(&ids, cfg.folds, cfg.seed)?;
        if let Some(dir) = table.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        split.write_csv(&table)?;
        info!("fold table created path={}", table.display());
        split
    };
    let mut samples = load_entries(&entries, Some(cfg.crop))?;
    for s in &mut samples {
        s.fold = split.fold_of(&s.source_id);
        if s.fold.is_none() {
            warn!("sample={} missing from fold table, skipped", s.source_id);
        }
    }
    Ok(samples.into_iter().filter(|s| s.fold.is_some()).collect())
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.data_root {
        cfg.data_root = v;
    }
    if let Some(v) = a.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = a.val_fold {
        cfg.val_fold = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let samples = load_folded(&cfg)?;
    let (val, tr): (Vec<Sample>, Vec<Sample>) = samples.into_iter().partition(|s| s.fold == Some(cfg.val_fold));
    create_dir(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(cfg.output_dir.join("config.toml"), e))?;

    let final_path = cfg.output_dir.join(FINAL_CHECKPOINT);
    let best_path = cfg.output_dir.join(BEST_CHECKPOINT);
    let history_path = cfg.output_dir.join(HISTORY_FILE);
    let mut state = if a.resume && final_path.exists() {
        let ck = load_checkpoint(&final_path, Some(&cfg.network))?;
        info!("resume checkpoint={} epochs_done={}", final_path.display(), ck.epochs_done);
        ck
    } else {
        Checkpoint::fresh(Network::build(&cfg.network, cfg.seed)?)
    };
    info!(
        "train network={} params={} train={} val={} epochs={}",
        cfg.network,
        state.network.parameter_count(),
        tr.len(),
        val.len(),
        cfg.schedule.total_epochs()
    );
    let train_cfg = cfg.train_config();
    train(&mut state, &tr, &val, &train_cfg, |ck| {
        save_checkpoint(ck, &final_path)?;
        let last = ck.history.last().expect("an epoch was recorded");
        if best_epoch(&ck.history).map(|b| b.epoch) == Some(last.epoch) {
            save_checkpoint(ck, &best_path)?;
        }
        write_history_csv(&ck.history, &history_path)
    })?;
    write_history_csv(&state.history, &history_path)?;
    if !final_path.exists() {
        save_checkpoint(&state, &final_path)?;
    }
    for r in &state.history {
        println!(
            "epoch={} phase_rate={} train_loss={} val_iou={} val_dice={} train_jaccard={}",
            r.epoch, r.phase_rate, r.train_loss, r.val_iou, r.val_dice, r.train_jaccard
        );
    }
    if let Some(b) = best_epoch(&state.history) {
        println!("best_epoch={} best_val_iou={}", b.epoch, b.val_iou);
    }
    Ok(())
}

fn image_paths(inputs: &[PathBuf], cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let inputs = if inputs.is_empty() {
        vec![cfg.data_root.join("images")]
    } else {
        inputs.to_vec()
    };
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&p)
                .map_err(|e| Error::io(&p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.is_file()
                        && f.extension()
                            .is_some_and(|x| x.to_string_lossy().eq_ignore_ascii_case("png"))
                })
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no input images".into()));
    }
    Ok(out)
}

/// Loads and crops each image, logging failures instead of stopping.
fn load_images(paths: &[PathBuf], crop: usize) -> (Vec<Sample>, usize) {
    let mut ok = Vec::new();
    let mut failed = 0;
    for p in paths {
        match load_sample(p, None).and_then(|s| center_crop(&s, crop)) {
            Ok(s) => ok.push(s),
            Err(e) => {
                error!("image={} error=\"{e}\"", p.display());
                failed += 1;
            }
        }
    }
    (ok, failed)
}

/// Probability maps of every loadable image, grouped by extent so one
/// failure or an odd-sized image does not stop the rest.
fn infer(net: &Network<f32>, samples: &[Sample], cfg: &RunConfig) -> (Vec<(usize, ProbabilityMap)>, usize) {
    let mut out = Vec::new();
    let mut failed = 0;
    for (i, s) in samples.iter().enumerate() {
        match predict_maps(net, std::slice::from_ref(s), &cfg.standardization, 1) {
            Ok(mut maps) => out.push((i, maps.remove(0))),
            Err(e) => {
                error!("image={} error=\"{e}\"", s.source_id);
                failed += 1;
            }
        }
    }
    (out, failed)
}

fn finish(failed: usize, what: &str) -> Result<()> {
    if failed > 0 {
        Err(Error::State(format!("{failed} {what} failed")))
    } else {
        Ok(())
    }
}

fn cmd_predict(cfg: RunConfig, a: PredictArgs) -> Result<()> {
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT));
    let ck = load_checkpoint(&ckpt, None)?;
    let threshold = a.threshold.unwrap_or(cfg.eval.threshold);
    crate::postprocess::check_threshold(threshold)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("predictions"));
    create_dir(&out)?;
    let paths = image_paths(&a.images, &cfg)?;
    let (samples, mut failed) = load_images(&paths, cfg.crop);
    let (maps, infer_failed) = infer(&ck.network, &samples, &cfg);
    failed += infer_failed;
    for (i, map) in &maps {
        let path = out.join(format!("{}.png", samples[*i].source_id));
        if let Err(e) = binarize(map, threshold).and_then(|m| write_mask_png(&m, &path)) {
            error!("image={} error=\"{e}\"", samples[*i].source_id);
            failed += 1;
        }
    }
    info!("predict written={} failed={failed} out={}", maps.len(), out.display());
    println!("masks={} failed={failed} out={}", maps.len(), out.display());
    finish(failed, "images")
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let luma = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let data = luma.into_raw();
    Ok(BinaryMask::from_fn(h, w, |r, c| data[r * w + c] > crate::data::MASK_THRESHOLD))
}

fn cmd_detect(cfg: RunConfig, a: DetectArgs) -> Result<()> {
    let threshold = a.threshold.unwrap_or(cfg.eval.threshold);
    crate::postprocess::check_threshold(threshold)?;
    let min_area = a.min_area.unwrap_or(cfg.eval.min_area);
    let connectivity = match a.connectivity {
        Some(c) => Connectivity::try_from(c)?,
        None => cfg.eval.connectivity,
    };
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("detections.jsonl"));
    let mut records = Vec::new();
    let mut failed = 0;
    if let Some(dir) = &a.masks {
        require_dir(dir)?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| {
                f.is_file()
                    && f.extension().is_some_and(|x| {
                        let x = x.to_string_lossy().to_ascii_lowercase();
                        x == "png" || x == "jpg" || x == "jpeg"
                    })
            })
            .collect();
        files.sort();
        for f in files {
            let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            match read_mask(&f) {
                Ok(m) => records.push(DetectionRecord::new(id, &detect_mask(&m, connectivity, min_area))),
                Err(e) => {
                    error!("mask={} error=\"{e}\"", f.display());
                    failed += 1;
                }
            }
        }
    } else {
        let ckpt = a.checkpoint.unwrap_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT));
        let ck = load_checkpoint(&ckpt, None)?;
        let paths = image_paths(&a.images, &cfg)?;
        let (samples, load_failed) = load_images(&paths, cfg.crop);
        let (maps, infer_failed) = infer(&ck.network, &samples, &cfg);
        failed += load_failed + infer_failed;
        for (i, map) in &maps {
            let mask = binarize(map, threshold)?;
            records.push(DetectionRecord::new(
                samples[*i].source_id.clone(),
                &detect_mask(&mask, connectivity, min_area),
            ));
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_detections_jsonl(&records, &out)?;
    let present = records.iter().filter(|r| r.present).count();
    info!("detect records={} present={present} failed={failed} out={}", records.len(), out.display());
    println!("records={} present={present} failed={failed} out={}", records.len(), out.display());
    finish(failed, "inputs")
}

fn cmd_evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    if let Some(v) = a.data_root {
        cfg.data_root = v;
    }
    let checkpoints = if a.checkpoint.is_empty() {
        vec![cfg.output_dir.join(FINAL_CHECKPOINT)]
    } else {
        a.checkpoint.clone()
    };
    let samples = if a.all {
        require_dir(&cfg.data_root)?;
        load_entries(&scan_dataset(&cfg.data_root)?, Some(cfg.crop))?
    } else {
        let folds = if a.folds.is_empty() { vec![cfg.val_fold] } else { a.folds.clone() };
        load_folded(&cfg)?
            .into_iter()
            .filter(|s| s.fold.is_some_and(|f| folds.contains(&f)))
            .collect()
    };
    if samples.is_empty() {
        return Err(Error::Config("no samples in the selected folds".into()));
    }
    let mut models = Vec::new();
    for path in &checkpoints {
        let ck = load_checkpoint(path, None)?;
        let report = evaluate(&ck.network, &samples, &cfg.standardization, &cfg.eval, a.timing)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = format!("{}/{stem}", ck.network.spec().style.name());
        let m = ModelReport::new(name, &report, a.area_bin);
        let r = &m.row;
        println!(
            "model={} IOU={:.2} Dice={:.2} Time={} Precision={:.4} Recall={:.4} F1={:.4} images={}",
            r.model,
            r.iou,
            r.dice,
            r.time_ms.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into()),
            r.precision,
            r.recall,
            r.f1,
            r.images
        );
        models.push(m);
    }
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("report"));
    Report::new(models, cfg.eval.match_radius, a.timing).write(&out)?;
    info!("evaluate images={} out={}", samples.len(), out.display());
    Ok(())
}
