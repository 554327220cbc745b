use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::{CliError, Command, EvalArgs, PreprocessArgs, ReferenceSource, ReportArgs, RunConfig, SplitArgs, SurgeryAction, SynthArgs, TrainArgs};
use crate::data::{
    self, color_normalize, compute_channel_stats, generate_synthetic_dataset, load_manifest_file, parse_ratios, preprocess_dataset, read_image,
    read_split_csv, split_dataset, Augmentation, ChannelStats, DataError, Dataset, Image, Sample, Split, SplitMode, SynthConfig,
};
use crate::metrics::{build_report, write_records};
use crate::trainer::{evaluate, TrainError, TrainHistory};
use crate::transfer::{
    default_boundary, load_partial, partition_layers, read_checkpoint, run_pipeline, set_trainable, write_checkpoint, Checkpoint, CheckpointError,
    PipelineError, Selector, StageData, StageFailure, StageInit, StageSpec,
};

pub(super) fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Surgery(a) => surgery(a.action),
        Command::Report(a) => report(a),
    }
}

/// Caps the global rayon pool at `DENSEPATH_THREADS` when set.
pub(super) fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DENSEPATH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage("config", format!("DENSEPATH_THREADS must be a positive integer, got {raw:?}")))?;
    // A pool may already exist when running in-process (tests); that is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::Manifest { .. } | DataError::Split(_) | DataError::Synth(_) => CliError::usage("data", e),
        _ => CliError::runtime("io", e),
    }
}

fn ckpt_err(e: CheckpointError) -> CliError {
    CliError::runtime("checkpoint", e)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime("io", format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(file)).map_err(ckpt_err)
}

fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf).map_err(ckpt_err)?;
    write_file(path, buf)
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        per_class: a.per_class,
        image_size: a.size,
        patients_per_class: a.patients,
        seed: a.seed,
        variant: a.variant,
    };
    let samples = generate_synthetic_dataset(&cfg, &a.out).map_err(data_err)?;
    println!("{}", json!({"images": samples.len(), "manifest": a.out.join("manifest.csv")}));
    Ok(())
}

/// Samples with their split when a split file is given.
fn split_lookup(samples: &[Sample], split_file: &Path) -> Result<Vec<Split>, CliError> {
    let file = fs::File::open(split_file).map_err(|e| CliError::runtime("io", format!("{}: {e}", split_file.display())))?;
    let map = read_split_csv(std::io::BufReader::new(file)).map_err(data_err)?;
    samples
        .iter()
        .map(|s| {
            map.get(&s.path)
                .copied()
                .ok_or_else(|| CliError::usage("data", format!("{} has no entry in {}", s.path, split_file.display())))
        })
        .collect()
}

fn reference_stats(spec: &ReferenceSource, first_train: impl FnOnce() -> Result<Image, CliError>) -> Result<ChannelStats, CliError> {
    match spec {
        ReferenceSource::FirstTrain => Ok(compute_channel_stats(&first_train()?)),
        ReferenceSource::Path(p) if p.extension().is_some_and(|e| e == "json") => {
            serde_json::from_str(&read_text(p)?).map_err(|e| CliError::usage("config", format!("{}: {e}", p.display())))
        }
        ReferenceSource::Path(p) => read_image(p).map(|img| compute_channel_stats(&img)).map_err(data_err),
    }
}

fn preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let samples = load_manifest_file(&a.manifest).map_err(data_err)?;
    let dir = base_dir(&a.manifest);
    let spec = if a.reference == "first-train" {
        ReferenceSource::FirstTrain
    } else {
        ReferenceSource::Path(a.reference.clone().into())
    };
    let stats = reference_stats(&spec, || {
        let first = match &a.split_file {
            Some(f) => {
                let splits = split_lookup(&samples, f)?;
                samples
                    .iter()
                    .zip(&splits)
                    .find(|(_, s)| **s == Split::Train)
                    .map(|(x, _)| x)
                    .ok_or_else(|| CliError::usage("data", "split file has no training rows"))?
            }
            None => samples.first().ok_or_else(|| CliError::usage("data", "manifest is empty"))?,
        };
        read_image(&dir.join(&first.path)).map_err(data_err)
    })?;
    if a.size == Some(0) {
        return Err(CliError::usage("usage", "--size must be positive"));
    }
    let rows = preprocess_dataset(&samples, &dir, &a.out, &stats, a.augment, a.size).map_err(data_err)?;
    let mut manifest = Vec::new();
    data::write_manifest(&mut manifest, &rows).map_err(data_err)?;
    write_file(&a.out.join("manifest.csv"), manifest)?;
    write_file(
        &a.out.join("reference_stats.json"),
        serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )?;
    println!("{}", json!({"rows": rows.len(), "manifest": a.out.join("manifest.csv")}));
    Ok(())
}

fn split(a: SplitArgs) -> Result<(), CliError> {
    let ratios = parse_ratios(&a.ratios).map_err(|e| CliError::usage("usage", e))?;
    let mode: SplitMode = a.mode.parse().map_err(|e| CliError::usage("usage", e))?;
    let samples = load_manifest_file(&a.manifest).map_err(data_err)?;
    let assignment = split_dataset(&samples, ratios, a.seed, mode).map_err(data_err)?;
    let out = a.out.unwrap_or_else(|| base_dir(&a.manifest).join("split.csv"));
    let mut buf = Vec::new();
    assignment.write_csv(&mut buf, &samples).map_err(data_err)?;
    write_file(&out, buf)?;
    let [tr, va, te] = assignment.counts();
    println!("{}", json!({"train": tr, "val": va, "test": te, "out": out}));
    Ok(())
}

/// Loads one stage's train and validation sets as described by the run config.
fn stage_data(cfg: &RunConfig, spec: &StageSpec) -> Result<StageData, String> {
    let manifest = spec
        .manifest
        .as_ref()
        .or(cfg.data.manifest.as_ref())
        .ok_or("no manifest configured")?;
    let samples = load_manifest_file(manifest).map_err(|e| e.to_string())?;
    let dir = base_dir(manifest);
    let split_file = spec.split_file.as_ref().or(if spec.manifest.is_some() {
        None
    } else {
        cfg.data.split_file.as_ref()
    });
    let splits = match split_file {
        Some(f) => split_lookup(&samples, f).map_err(|e| e.message)?,
        None => {
            let ratios = parse_ratios(&cfg.data.ratios).map_err(|e| e.to_string())?;
            split_dataset(&samples, ratios, cfg.data.split_seed, cfg.data.split_mode)
                .map_err(|e| e.to_string())?
                .splits
        }
    };
    let pick = |which: Split, originals_only: bool| -> Vec<Sample> {
        samples
            .iter()
            .zip(&splits)
            .filter(|(s, sp)| **sp == which && !(originals_only && s.is_augmented()))
            .map(|(s, _)| s.clone())
            .collect()
    };
    let train = pick(Split::Train, false);
    let val = pick(Split::Val, true);
    let load = |rows: &[Sample]| -> Result<Vec<Image>, String> {
        rows.par_iter()
            .map(|s| read_image(&dir.join(&s.path)).map_err(|e| e.to_string()))
            .collect()
    };
    let mut train_imgs = load(&train)?;
    let mut val_imgs = load(&val)?;
    if let Some(reference) = &cfg.data.reference {
        let stats = reference_stats(reference, || train_imgs.first().cloned().ok_or_else(|| CliError::usage("data", "empty training split")))
            .map_err(|e| e.message)?;
        for img in train_imgs.iter_mut().chain(val_imgs.iter_mut()) {
            *img = color_normalize(img, &stats);
        }
    }
    let (train, train_imgs) = if cfg.data.augment {
        let mut rows = Vec::new();
        let mut imgs = Vec::new();
        for (s, img) in train.iter().zip(&train_imgs) {
            for aug in Augmentation::ALL {
                rows.push(Sample {
                    path: data::variant_path(&s.path, aug, true),
                    ..s.clone()
                });
                imgs.push(aug.apply(img));
            }
        }
        (rows, imgs)
    } else {
        (train, train_imgs)
    };
    let hw = cfg.architecture.input_hw;
    Ok(StageData {
        train: Dataset::from_images(train, &train_imgs, hw).map_err(|e| e.to_string())?,
        val: Dataset::from_images(val, &val_imgs, hw).map_err(|e| e.to_string())?,
    })
}

fn history_csv(h: &TrainHistory) -> Vec<u8> {
    let mut buf = Vec::new();
    h.write_csv(&mut buf).expect("writing to memory");
    buf
}

fn pipeline_err(e: PipelineError) -> CliError {
    let code = match &e.failure {
        StageFailure::Config(_) | StageFailure::Train(TrainError::Config(_)) => 2,
        _ => 1,
    };
    CliError {
        code,
        kind: "train",
        message: e.to_string(),
    }
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let text = read_text(&a.config)?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| CliError::usage("config", e))?;
    cfg.resolve_paths(&base_dir(&a.config));
    let mut stages = if cfg.stages.is_empty() {
        vec![StageSpec::named("train")]
    } else {
        cfg.stages.clone()
    };
    if let Some(r) = &a.resume {
        stages[0].init = Some(StageInit::Checkpoint(r.clone()));
    }
    let results = run_pipeline(&stages, &cfg.architecture, &cfg.train, |spec| stage_data(&cfg, spec)).map_err(pipeline_err)?;

    let mut summary = Vec::new();
    for r in &results {
        let ckpt_path = a.out.join(format!("{}.dtlc", r.name));
        let hist_path = a.out.join(format!("{}_history.csv", r.name));
        save(&ckpt_path, &r.checkpoint)?;
        write_file(&hist_path, history_csv(&r.history))?;
        let best = r.history.best().expect("best epoch recorded");
        let max_train = r.history.epochs.iter().map(|e| e.train_acc).filter(|v| !v.is_nan()).fold(0.0, f64::max);
        summary.push(json!({
            "name": r.name,
            "checkpoint": ckpt_path,
            "history": hist_path,
            "epochs": r.history.epochs.len(),
            "best_epoch": r.history.best_epoch,
            "best_val_acc": best.val_acc,
            "train_acc": best.train_acc,
            "max_train_acc": max_train,
            "final_train_acc": r.history.epochs.last().map(|e| e.train_acc),
            "trainable": r.trainable.to_string(),
            "provenance": r.checkpoint.provenance,
            "transplant": r.transplant,
        }));
    }
    let last = results.last().expect("at least one stage");
    let doc = json!({
        "stages": summary,
        "final_checkpoint": a.out.join(format!("{}.dtlc", last.name)),
        "provenance": last.checkpoint.provenance,
    });
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    write_file(&a.out.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let which: Split = a.split.parse().map_err(|e| CliError::usage("usage", e))?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let arch = match &a.config {
        Some(p) => RunConfig::from_json(&read_text(p)?).map_err(|e| CliError::usage("config", e))?.architecture,
        None => ckpt.architecture.clone(),
    };
    let model = ckpt.to_model(&arch).map_err(ckpt_err)?;
    let samples = load_manifest_file(&a.manifest).map_err(data_err)?;
    let splits = match &a.split_file {
        Some(f) => split_lookup(&samples, f)?,
        None => vec![which; samples.len()],
    };
    let selected: Vec<Sample> = samples
        .iter()
        .zip(&splits)
        .filter(|(s, sp)| **sp == which && (a.include_augmented || !s.is_augmented()))
        .map(|(s, _)| s.clone())
        .collect();
    if selected.is_empty() {
        return Err(CliError::usage("data", format!("split {which} selects no images")));
    }
    let data = Dataset::load(selected, &base_dir(&a.manifest), arch.input_hw).map_err(data_err)?;
    let records = evaluate(&model, &data, a.batch_size).map_err(|e| CliError::runtime("model", e))?;
    let report = build_report(&records, true).map_err(|e| CliError::runtime("metrics", e))?;
    let mut preds = Vec::new();
    write_records(&mut preds, &records).map_err(|e| CliError::runtime("metrics", e))?;
    write_file(&a.out.join("predictions.csv"), preds)?;
    write_file(&a.out.join("metrics.json"), report.to_json())?;
    write_file(&a.out.join("table.csv"), report.table_csv())?;
    println!("{}", json!({"p_arp": report.p_arp, "p_img": report.p_img, "n_p": report.n_p, "n_all": report.n_all}));
    Ok(())
}

fn surgery(action: SurgeryAction) -> Result<(), CliError> {
    match action {
        SurgeryAction::Freeze { checkpoint, boundary, out } => {
            let ckpt = open_checkpoint(&checkpoint)?;
            let mut model = ckpt.to_model(&ckpt.architecture).map_err(ckpt_err)?;
            let b = boundary.unwrap_or_else(|| default_boundary(model.config()));
            let partition = partition_layers(&model, b).map_err(|e| CliError::usage("usage", e))?;
            set_trainable(&mut model, Selector::Shallow, &partition, false);
            set_trainable(&mut model, Selector::Deep, &partition, true);
            let frozen = Checkpoint::from_model(&model, &ckpt.provenance);
            save(out.as_ref().unwrap_or(&checkpoint), &frozen)?;
            println!(
                "{}",
                json!({"boundary": b, "frozen_layers": partition.shallow, "trainable_parameters": model.count_parameters(true)})
            );
            Ok(())
        }
        SurgeryAction::Transplant {
            from,
            into,
            filter,
            out,
            report,
        } => {
            let pattern = glob::Pattern::new(&filter).map_err(|e| CliError::usage("usage", format!("bad --filter glob {filter:?}: {e}")))?;
            let source = open_checkpoint(&from)?;
            let target = open_checkpoint(&into)?;
            let mut model = target.to_model(&target.architecture).map_err(ckpt_err)?;
            let rep = load_partial(&source, &mut model, |name| pattern.matches(name));
            save(&out, &Checkpoint::from_model(&model, &target.provenance))?;
            let text = serde_json::to_string_pretty(&rep).expect("report serializes");
            match report {
                Some(p) => write_file(&p, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        SurgeryAction::Inspect { checkpoint } => {
            let ckpt = open_checkpoint(&checkpoint)?;
            let tensors: Vec<_> = ckpt
                .tensors
                .iter()
                .map(|(name, t)| json!({"name": name, "shape": t.shape(), "trainable": ckpt.trainable.get(name).copied().unwrap_or(true)}))
                .collect();
            let buffers: BTreeMap<_, _> = ckpt.buffers.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
            let doc = json!({
                "fingerprint": ckpt.fingerprint,
                "provenance": ckpt.provenance,
                "architecture": ckpt.architecture,
                "parameters": ckpt.tensors.values().map(|t| t.numel()).sum::<usize>(),
                "tensors": tensors,
                "buffers": buffers,
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("inspect serializes"));
            Ok(())
        }
    }
}

const HISTORY_COLUMNS: [&str; 5] = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"];

fn report(a: ReportArgs) -> Result<(), CliError> {
    let mut names = Vec::new();
    let mut tables: Vec<HashMap<u64, Vec<String>>> = Vec::new();
    for path in &a.history {
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| CliError::usage("data", format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != HISTORY_COLUMNS {
            return Err(CliError::usage(
                "data",
                format!("{}: columns {header:?} differ from {HISTORY_COLUMNS:?}", path.display()),
            ));
        }
        let mut rows = HashMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::usage("data", format!("{}: {e}", path.display())))?;
            let epoch: u64 = rec[0]
                .parse()
                .map_err(|_| CliError::usage("data", format!("{}: bad epoch {:?}", path.display(), &rec[0])))?;
            rows.insert(epoch, rec.iter().skip(1).map(str::to_string).collect());
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut name = stem.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{stem}_{k}");
            k += 1;
        }
        names.push(name);
        tables.push(rows);
    }
    let max_epoch = tables.iter().flat_map(|t| t.keys().copied()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string()];
    for n in &names {
        header.extend(HISTORY_COLUMNS[1..].iter().map(|c| format!("{n}/{c}")));
    }
    w.write_record(&header).expect("in-memory csv");
    for epoch in 1..=max_epoch {
        let mut row = vec![epoch.to_string()];
        for t in &tables {
            match t.get(&epoch) {
                Some(vals) => row.extend(vals.iter().cloned()),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row).expect("in-memory csv");
    }
    write_file(&a.out, w.into_inner().expect("in-memory csv"))?;
    println!("{}", json!({"rows": max_epoch, "sources": names}));
    Ok(())
}
