use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use follicle::dataset::{
    ingest as scan, oversample_balance, sha256_hex, stratified_split, ClassLabel, DatasetManifest, LabeledSample,
    Split, NUM_CLASSES,
};
use follicle::image::{decode_image, encode_image, EncodeFormat, ImageTensor};
use follicle::metrics::{metrics_from_confusion, MetricsReport};
use follicle::nn::{load_model, save_model, ModelParams};
use follicle::preprocess::Preprocessor;
use follicle::train::{evaluate as run_eval, history_csv, load_examples, predict_images, train as run_train, Example};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::PipelineConfig;

fn class_names() -> Vec<&'static str> {
    ClassLabel::ALL.iter().map(|l| l.name()).collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(cfg: &PipelineConfig) -> Result<()> {
    write(&cfg.output_dir.join("config.resolved.json"), cfg.to_json())
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn counts_table(counts: &[usize; NUM_CLASSES]) -> String {
    let mut out = format!("{:<14}{:>6}\n", "class", "count");
    for l in ClassLabel::ALL {
        out.push_str(&format!("{:<14}{:>6}\n", l.name(), counts[l.index()]));
    }
    out.push_str(&format!("{:<14}{:>6}\n", "total", counts.iter().sum::<usize>()));
    out
}

/// Scans the dataset root and writes the manifest (default
/// `<out>/manifest.json`).
pub fn ingest(cfg: &PipelineConfig, root: Option<&Path>, manifest_out: Option<&Path>) -> Result<PathBuf> {
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| cfg.dataset_root.clone())
        .context("no dataset root: pass ROOT or --dataset-root")?;
    let root = std::path::absolute(&root)?;
    let report = scan(&root, cfg.seed)?;
    for s in &report.skipped {
        eprintln!("follicle: skipped {}: {}", s.path, s.reason);
    }
    let m = report.manifest;
    let path = manifest_out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("manifest.json"));
    write(&path, m.to_json())?;
    write_resolved(cfg)?;
    print!("{}", counts_table(&m.split_counts(Split::Unassigned)));
    println!("manifest: {} (config {})", path.display(), cfg.hash());
    Ok(path)
}

#[derive(Serialize)]
struct LogEntry {
    path: String,
    output: String,
    millis: f64,
}

#[derive(Serialize)]
struct Failure {
    path: String,
    reason: String,
}

/// Output path of a processed file: the same relative path, with `.png`
/// appended unless it already ends in `.png`.
fn processed_path(rel: &str) -> String {
    if rel.to_ascii_lowercase().ends_with(".png") {
        rel.to_string()
    } else {
        format!("{rel}.png")
    }
}

/// Denoise, equalize and resize every original sample into
/// `<out>/processed/`, then write the processed manifest and a log.
pub fn preprocess(cfg: &PipelineConfig, manifest_path: &Path) -> Result<PathBuf> {
    let m = DatasetManifest::load(manifest_path)?;
    if m.preprocessed.is_some() {
        bail!("{} is already preprocessed", manifest_path.display());
    }
    let pre = cfg.preprocessor();
    let out_root = std::path::absolute(cfg.output_dir.join("processed"))?;
    let originals: Vec<&LabeledSample> = m.samples.iter().filter(|s| !s.is_augmented()).collect();

    let results: Vec<Result<(String, String, f64), String>> = originals
        .par_iter()
        .map(|s| {
            let start = Instant::now();
            let img = s.load(&m.root).map_err(|e| e.to_string())?;
            let out = pre.apply(&img).map_err(|e| e.to_string())?;
            let png = encode_image(&out, EncodeFormat::Png).map_err(|e| e.to_string())?;
            let rel = processed_path(&s.path);
            write(&out_root.join(&rel), &png).map_err(|e| format!("{e:#}"))?;
            Ok((rel, sha256_hex(&png), start.elapsed().as_secs_f64() * 1e3))
        })
        .collect();

    let mut log = Vec::new();
    let mut failures = Vec::new();
    let mut renamed: BTreeMap<&str, (String, String)> = BTreeMap::new();
    let mut usable = [0usize; NUM_CLASSES];
    for (s, r) in originals.iter().zip(results) {
        match r {
            Ok((rel, checksum, millis)) => {
                usable[s.label.index()] += 1;
                log.push(LogEntry {
                    path: s.path.clone(),
                    output: rel.clone(),
                    millis,
                });
                renamed.insert(&s.path, (rel, checksum));
            }
            Err(reason) => {
                eprintln!("follicle: failed {}: {reason}", s.path);
                failures.push(Failure {
                    path: s.path.clone(),
                    reason,
                });
            }
        }
    }
    let log_json = json!({
        "config_hash": cfg.hash(),
        "denoiser": pre.denoiser,
        "clahe": pre.clahe,
        "input_size": pre.input_size,
        "images": log,
        "failed": failures,
    });
    write(&cfg.output_dir.join("preprocess_log.json"), pretty(&log_json))?;
    write_resolved(cfg)?;
    if let Some(l) = ClassLabel::ALL.into_iter().find(|l| usable[l.index()] < 2) {
        bail!("class {l} has {} usable images after preprocessing; at least 2 are needed", usable[l.index()]);
    }

    let mut samples = Vec::new();
    for s in &m.samples {
        let source = s.augmented_from.as_ref().map_or(s.path.as_str(), |p| p.source.as_str());
        let Some((rel, checksum)) = renamed.get(source) else { continue };
        let mut n = s.clone();
        n.checksum = checksum.clone();
        match &mut n.augmented_from {
            Some(p) => {
                p.source = rel.clone();
                n.path = format!("{}#aug{}", rel, p.copy_index);
            }
            None => n.path = rel.clone(),
        }
        samples.push(n);
    }
    let mut out = DatasetManifest::new(out_root.clone(), m.seed, samples);
    out.created_at = m.created_at.clone();
    out.augment = m.augment;
    out.preprocessed = Some(serde_json::to_string(&pre).expect("serializable"));
    let path = out_root.join("manifest.json");
    write(&path, out.to_json())?;
    print!("{}", counts_table(&usable));
    println!("processed manifest: {} (config {})", path.display(), cfg.hash());
    Ok(path)
}

fn manifest_preprocessor(m: &DatasetManifest) -> Option<Preprocessor> {
    m.preprocessed.as_deref().and_then(|s| serde_json::from_str(s).ok())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

pub struct TrainSummary {
    pub model_path: PathBuf,
    pub report: MetricsReport,
}

/// Split, balance, train and write model, history, metrics and confusion
/// matrix under the output directory.
pub fn train(cfg: &PipelineConfig, manifest_path: &Path) -> Result<TrainSummary> {
    let m = DatasetManifest::load(manifest_path)?;
    let pre = manifest_preprocessor(&m)
        .with_context(|| format!("{} is not preprocessed; run `follicle preprocess` first", manifest_path.display()))?;
    if pre.input_size != cfg.train.input_size {
        bail!(
            "shape mismatch: manifest images are {0}x{0}, config input_size is {1}",
            pre.input_size,
            cfg.train.input_size
        );
    }
    let split = if m.samples.iter().any(|s| s.split == Split::Unassigned) {
        stratified_split(&m, cfg.train_fraction, cfg.seed)?
    } else {
        m
    };
    let balanced = oversample_balance(&split, &cfg.augment, cfg.seed)?;
    balanced.check_partition()?;
    let out = &cfg.output_dir;
    write(&out.join("split_manifest.json"), balanced.to_json())?;
    write_resolved(cfg)?;
    let tr = load_examples(&balanced, Split::Train, cfg.seed)?;
    let te = load_examples(&balanced, Split::Test, cfg.seed)?;
    eprintln!("follicle: training on {} images, validating on {}", tr.len(), te.len());

    let (mut model, history) = run_train(&cfg.train, &tr, &te, |r| {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    })?;
    let hash = cfg.hash();
    model.metadata = json!({ "config_hash": hash, "preprocessor": pre });
    let model_path = out.join("model.foll");
    save_model(&model, &model_path)?;

    let eval = run_eval(&model.network, &te)?;
    let mut report = metrics_from_confusion(&eval.confusion).expect("test split is non-empty");
    report.history = history.clone();
    write(&out.join("metrics.json"), pretty(&MetricsFile { config_hash: &hash, report: &report }))?;
    write(&out.join("history.csv"), history_csv(&history))?;
    write(&out.join("confusion.csv"), eval.confusion.to_csv(&class_names()))?;
    let train_acc = history.last().map_or("n/a".to_string(), |r| format!("{:.4}", r.train_acc));
    println!(
        "final: epochs {} train_acc {} val_acc {:.4} (config {hash})",
        history.len(),
        train_acc,
        report.accuracy
    );
    Ok(TrainSummary { model_path, report })
}

/// Preprocessing recorded in the model, or a plain resize for models that
/// carry none.
fn model_preprocessor(model: &ModelParams) -> Preprocessor {
    serde_json::from_value(model.metadata["preprocessor"].clone()).unwrap_or(Preprocessor {
        denoiser: follicle::denoise::Denoiser::None,
        clahe: None,
        input_size: model.network.input_shape[0],
    })
}

fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_image(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Human-readable confusion matrix and per-class table.
pub fn format_report(report: &MetricsReport) -> String {
    let names = class_names();
    let mut out = String::from("confusion (rows = true, columns = predicted)\n");
    out.push_str(&format!("{:<14}", ""));
    for n in &names {
        out.push_str(&format!("{n:>14}"));
    }
    out.push('\n');
    for (k, row) in report.confusion.counts.iter().enumerate() {
        out.push_str(&format!("{:<14}", names[k]));
        for c in row {
            out.push_str(&format!("{c:>14}"));
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "\n{:<14}{:>10}{:>10}{:>10}{:>16}\n",
        "class", "precision", "recall", "f1", "frac_incorrect"
    ));
    for (k, m) in report.per_class.iter().enumerate() {
        let flag = if m.precision_undefined || m.recall_undefined { "  (undefined)" } else { "" };
        out.push_str(&format!(
            "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>16.4}{flag}\n",
            names[k], m.precision, m.recall, m.f1, m.fractional_incorrect
        ));
    }
    out.push_str(&format!(
        "\naccuracy {:.4} ({}/{})\n",
        report.accuracy,
        report.confusion.trace(),
        report.confusion.total()
    ));
    out
}

/// Evaluates a model on a manifest (its test split, or every original
/// sample when unsplit) or predicts every image in a directory.
pub fn evaluate(cfg: &PipelineConfig, model_path: &Path, input: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let pre = model_preprocessor(&model);
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.retain(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        });
        files.sort();
        if files.is_empty() {
            bail!("no .png/.jpg/.jpeg images in {}", input.display());
        }
        let images = files
            .iter()
            .map(|f| Ok(pre.apply(&read_image(f)?)?))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let preds = predict_images(&model.network, &refs)?;
        println!("file\t{}\tpredicted", class_names().join("\t"));
        for (f, p) in files.iter().zip(&preds) {
            let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.6}")).collect();
            println!("{}\t{}\t{}", f.display(), probs.join("\t"), ClassLabel::ALL[p.label].name());
        }
        return Ok(());
    }

    let m = DatasetManifest::load(input)?;
    let has_test = m.samples.iter().any(|s| s.split == Split::Test);
    let chosen: Vec<&LabeledSample> = m
        .samples
        .iter()
        .filter(|s| !s.is_augmented() && (!has_test || s.split == Split::Test))
        .collect();
    let needs_pre = m.preprocessed.is_none();
    let examples = chosen
        .par_iter()
        .map(|s| {
            let img = s.load(&m.root)?;
            let image = if needs_pre { pre.apply(&img)? } else { img };
            Ok(Example { image, label: s.label })
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = run_eval(&model.network, &examples)?;
    let report = metrics_from_confusion(&eval.confusion).expect("evaluation set is non-empty");
    print!("{}", format_report(&report));
    let hash = model.metadata["config_hash"].as_str().map_or_else(|| cfg.hash(), str::to_string);
    write(&cfg.output_dir.join("metrics.json"), pretty(&MetricsFile { config_hash: &hash, report: &report }))?;
    write(&cfg.output_dir.join("confusion.csv"), eval.confusion.to_csv(&class_names()))?;
    write_resolved(cfg)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct PredictOutput {
    pub label: usize,
    pub class_name: &'static str,
    pub probabilities: Vec<f32>,
}

pub fn predict(model_path: &Path, image_path: &Path) -> Result<PredictOutput> {
    let model = load_model(model_path)?;
    let img = model_preprocessor(&model).apply(&read_image(image_path)?)?;
    let p = predict_images(&model.network, &[&img])?.remove(0);
    let out = PredictOutput {
        label: p.label,
        class_name: ClassLabel::ALL[p.label].name(),
        probabilities: p.probabilities,
    };
    println!("{}", serde_json::to_string(&out).expect("serializable"));
    Ok(out)
}
