use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use focuscir::backbones::Backbones;
use focuscir::data::config::parse_pairs;
use focuscir::data::{load_manifest, write_manifest, ImageSource, ManifestFormat};
use focuscir::eval::{embed_gallery, evaluate, rank_embedding, EmbeddingCache, EvalContext};
use focuscir::model::{FocusModel, ImageFeatures};
use focuscir::preprocess::{preprocess_manifest, PreprocessCache, SegmentationModels};
use focuscir::report::{write_report, write_sweep_plot, Metric, Series};
use focuscir::synth::gen_synthetic;
use focuscir::trainer::{fit, load_model, FitOptions, BEST_CHECKPOINT};
use focuscir::util::{atomic_write, sha256_hex};
use focuscir::{validate_config, AblationFlag, DatasetManifest, HyperConfig, Split};

use crate::{DataArgs, GlobalArgs};

/// Bad user input that clap could not catch; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Profile defaults, then the config file, then `--set`, `--seed` and `--ablate`.
pub fn effective_config(g: &GlobalArgs) -> Result<HyperConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        pairs.extend(parse_pairs(&text, path)?);
    }
    if let Some(p) = &g.profile {
        pairs.push(("profile".into(), p.clone()));
    }
    for s in &g.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    if let Some(seed) = g.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    let mut cfg = HyperConfig::from_pairs(&pairs).map_err(|e| usage(e.to_string()))?;
    for flag in &g.ablate {
        let f: AblationFlag = flag.parse().map_err(|e: focuscir::Error| usage(e.to_string()))?;
        cfg.ablations.insert(f);
    }
    validate_config(cfg).map_err(|e| usage(e.to_string()))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: focuscir::Error| usage(e.to_string()))
}

fn parse_format(s: &str) -> Result<ManifestFormat> {
    s.parse().map_err(|e: focuscir::Error| usage(e.to_string()))
}

fn cache_dir(data: &DataArgs) -> PathBuf {
    data.cache.clone().unwrap_or_else(|| {
        if data.manifest.is_dir() {
            data.manifest.join("cache")
        } else {
            data.manifest.parent().unwrap_or(Path::new(".")).join("cache")
        }
    })
}

fn load_data(data: &DataArgs) -> Result<DatasetManifest> {
    let format = parse_format(&data.format)?;
    load_manifest(&data.manifest, format).with_context(|| format!("loading manifest {}", data.manifest.display()))
}

fn write_run_record(dir: &Path, command: &str, cfg: &HyperConfig, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rec = json!({
        "command": command,
        "build": focuscir::BUILD_ID,
        "args": std::env::args().collect::<Vec<_>>(),
        "config": cfg,
    });
    if let (Some(r), serde_json::Value::Object(e)) = (rec.as_object_mut(), extra) {
        r.extend(e);
    }
    atomic_write(&dir.join("run.json"), serde_json::to_string_pretty(&rec)?.as_bytes())?;
    Ok(())
}

/// Fails with a remediation hint when any image of `ids` lacks a cache record.
fn ensure_preprocessed(cache: &PreprocessCache, ids: &[String], data: &DataArgs, dir: &Path) -> Result<()> {
    let missing: Vec<&String> = ids.iter().filter(|id| cache.hash_of(id).is_none()).collect();
    if let Some(first) = missing.first() {
        bail!(
            "preprocessing cache {} lacks {} of {} images (first: {first}); run `focuscir preprocess --manifest {} --format {} --cache {}` first",
            dir.display(),
            missing.len(),
            ids.len(),
            data.manifest.display(),
            data.format,
            dir.display(),
        );
    }
    Ok(())
}

fn open_cache(data: &DataArgs, manifest: &DatasetManifest, ids: Option<Vec<String>>) -> Result<PreprocessCache> {
    let dir = cache_dir(data);
    if !dir.join("index.tsv").is_file() {
        bail!(
            "no preprocessing cache at {}; run `focuscir preprocess --manifest {} --format {} --cache {}` first",
            dir.display(),
            data.manifest.display(),
            data.format,
            dir.display(),
        );
    }
    let cache = PreprocessCache::open(&dir)?;
    let ids = ids.unwrap_or_else(|| manifest.referenced_images());
    ensure_preprocessed(&cache, &ids, data, &dir)?;
    Ok(cache)
}

fn split_images(manifest: &DatasetManifest, split: Split) -> Vec<String> {
    let mut ids: Vec<String> = manifest.gallery(split).to_vec();
    for t in manifest.triplets_in(split) {
        ids.push(t.ref_image_id.clone());
        ids.push(t.target_image_id.clone());
    }
    ids.sort();
    ids.dedup();
    ids
}

fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(BEST_CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}

pub fn gen_synth(g: &GlobalArgs, n: usize, noise: f64) -> Result<()> {
    let cfg = effective_config(g)?;
    if !(0.0..=1.0).contains(&noise) {
        return Err(usage(format!("--noise must lie in [0, 1], got {noise}")));
    }
    let manifest = gen_synthetic(n, cfg.seed, noise)?;
    write_manifest(&manifest, &g.out)?;
    write_run_record(&g.out, "gen-synth", &cfg, json!({ "n": n, "noise": noise }))?;
    println!("wrote {} triplets to {}", manifest.triplets.len(), g.out.display());
    Ok(())
}

pub fn preprocess(g: &GlobalArgs, data: &DataArgs) -> Result<()> {
    let cfg = effective_config(g)?;
    let manifest = load_data(data)?;
    let backbones = Backbones::for_config(&cfg)?;
    let dir = cache_dir(data);
    let cache = PreprocessCache::open(&dir)?;
    let models = SegmentationModels {
        captioner: backbones.captioner.as_ref(),
        segmenter: backbones.segmenter.as_ref(),
    };
    let stats = preprocess_manifest(&manifest, &cache, &models, Some(backbones.image.as_ref()), g.workers)?;
    let summary = json!({
        "cache": dir,
        "hits": stats.hits,
        "misses": stats.misses,
        "failures": stats.failures,
        "failed": stats.failed.iter().map(|(id, why)| json!({"image_id": id, "error": why})).collect::<Vec<_>>(),
    });
    write_run_record(&g.out, "preprocess", &cfg, json!({ "stats": summary }))?;
    println!("{}", serde_json::to_string(&summary)?);
    if stats.failures > 0 {
        bail!("{} of {} images failed to preprocess", stats.failures, stats.failures + stats.hits + stats.misses);
    }
    Ok(())
}

pub fn train(g: &GlobalArgs, data: &DataArgs, resume: bool) -> Result<()> {
    let cfg = effective_config(g)?;
    let manifest = load_data(data)?;
    let cache = open_cache(data, &manifest, None)?;
    let backbones = Backbones::for_config(&cfg)?;
    write_run_record(
        &g.out,
        "train",
        &cfg,
        json!({ "manifest": data.manifest, "format": data.format, "cache": cache_dir(data) }),
    )?;
    let opts = FitOptions {
        out_dir: g.out.clone(),
        resume,
        workers: g.workers,
        stop: None,
    };
    let out = fit(&manifest, &cfg, &cache, &backbones, &opts)?;
    println!(
        "{}",
        json!({ "best": out.best, "last": out.last, "log": out.log, "steps": out.steps })
    );
    Ok(())
}

fn eval_context<'a>(
    manifest: &'a DatasetManifest,
    cache: &'a PreprocessCache,
    backbones: &'a Backbones,
    embeddings: &'a EmbeddingCache,
    workers: usize,
) -> EvalContext<'a> {
    EvalContext {
        manifest,
        preprocess: cache,
        image_encoder: backbones.image.as_ref(),
        text_encoder: backbones.text.as_ref(),
        embeddings,
        workers,
    }
}

fn evaluate_model(
    model: &FocusModel,
    manifest: &DatasetManifest,
    data: &DataArgs,
    split: Split,
    workers: usize,
    out: &Path,
    top_k: usize,
) -> Result<Vec<Metric>> {
    let cache = open_cache(data, manifest, Some(split_images(manifest, split)))?;
    let backbones = Backbones::for_config(&model.cfg)?;
    let embeddings = EmbeddingCache::on_disk(cache_dir(data).join("embeddings"));
    let ctx = eval_context(manifest, &cache, &backbones, &embeddings, workers);
    let outcome = evaluate(&ctx, split, model)?;
    let title = format!("{} ({split})", manifest.name);
    write_report(out, &title, &outcome.metrics, &outcome.rankings, top_k)?;
    Ok(outcome.metrics)
}

pub fn eval(g: &GlobalArgs, data: &DataArgs, checkpoint: &Path, split: &str, top_k: usize) -> Result<()> {
    let split = parse_split(split)?;
    let ckpt = resolve_checkpoint(checkpoint);
    let model = load_model(&ckpt)?;
    let manifest = load_data(data)?;
    write_run_record(
        &g.out,
        "eval",
        &model.cfg,
        json!({ "checkpoint": ckpt, "split": split, "manifest": data.manifest, "format": data.format }),
    )?;
    evaluate_model(&model, &manifest, data, split, g.workers, &g.out, top_k)?;
    print!("{}", fs::read_to_string(g.out.join("report.md"))?);
    Ok(())
}

pub fn retrieve(
    g: &GlobalArgs,
    data: &DataArgs,
    checkpoint: &Path,
    image: &str,
    text: &str,
    k: usize,
    split: &str,
) -> Result<()> {
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let split = parse_split(split)?;
    let ckpt = resolve_checkpoint(checkpoint);
    let model = load_model(&ckpt)?;
    let mut manifest = load_data(data)?;
    let backbones = Backbones::for_config(&model.cfg)?;
    let cache = open_cache(data, &manifest, Some(manifest.gallery(split).to_vec()))?;

    let image_id = if manifest.images.contains_key(image) {
        image.to_string()
    } else if Path::new(image).is_file() {
        let bytes = fs::read(image).with_context(|| format!("reading {image}"))?;
        let id = format!("adhoc-{}", &sha256_hex(&bytes)[..16]);
        let source = ImageSource::Path(PathBuf::from(image));
        let models = SegmentationModels {
            captioner: backbones.captioner.as_ref(),
            segmenter: backbones.segmenter.as_ref(),
        };
        cache.segment_dominant(&id, &source, &models)?;
        cache.flush_index()?;
        manifest.images.insert(id.clone(), source);
        id
    } else {
        return Err(usage(format!("--image {image:?} is neither a manifest image id nor a file")));
    };
    ensure_preprocessed(&cache, std::slice::from_ref(&image_id), data, &cache_dir(data))?;

    let embeddings = EmbeddingCache::on_disk(cache_dir(data).join("embeddings"));
    let ctx = eval_context(&manifest, &cache, &backbones, &embeddings, g.workers);
    let index = embed_gallery(&ctx, split, &model)?;
    let prepared = cache.prepared(&image_id, &manifest.images[&image_id], backbones.image.as_ref())?;
    let tokens = backbones.text.penultimate(text)?;
    let query = model.query_embedding(ImageFeatures::from(&prepared), &tokens)?;
    let ranked = rank_embedding(&query, &index, None)?;
    let top: Vec<&String> = ranked.iter().take(k).collect();
    write_run_record(
        &g.out,
        "retrieve",
        &model.cfg,
        json!({ "checkpoint": ckpt, "image": image_id, "text": text, "split": split, "top_k": top }),
    )?;
    for id in top {
        println!("{id}");
    }
    Ok(())
}

fn series_label(m: &Metric) -> String {
    match m.k {
        Some(k) => format!("{}@{k}", m.metric),
        None => m.metric.clone(),
    }
}

pub fn sweep(g: &GlobalArgs, data: &DataArgs, param: &str, values: &[String], split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let base = effective_config(g)?;
    let manifest = load_data(data)?;
    let cache = open_cache(data, &manifest, None)?;
    let mut table: Vec<Vec<Metric>> = Vec::new();
    let mut lines = String::new();
    for v in values {
        let mut cfg = base.clone();
        cfg.set(param, v).map_err(|e| usage(e.to_string()))?;
        let cfg = validate_config(cfg).map_err(|e| usage(format!("{param}={v}: {e}")))?;
        let run_dir = g.out.join(format!("{param}_{v}"));
        write_run_record(&run_dir, "sweep", &cfg, json!({ "param": param, "value": v }))?;
        let backbones = Backbones::for_config(&cfg)?;
        let opts = FitOptions {
            out_dir: run_dir.clone(),
            resume: false,
            workers: g.workers,
            stop: None,
        };
        let out = fit(&manifest, &cfg, &cache, &backbones, &opts)?;
        let model = load_model(&out.best)?;
        let metrics = evaluate_model(&model, &manifest, data, split, g.workers, &run_dir, 50)?;
        lines.push_str(&serde_json::to_string(&json!({ "param": param, "value": v, "metrics": metrics }))?);
        lines.push('\n');
        eprintln!("{param}={v}: {}", metrics.iter().map(|m| format!("{} {:.2}", series_label(m), m.value)).collect::<Vec<_>>().join(", "));
        table.push(metrics);
    }
    let labels: Vec<String> = table.first().map(|m| m.iter().map(series_label).collect()).unwrap_or_default();
    let series: Vec<Series> = labels
        .iter()
        .map(|label| Series {
            name: label.clone(),
            values: table
                .iter()
                .map(|ms| ms.iter().find(|m| &series_label(m) == label).map_or(f64::NAN, |m| m.value))
                .collect(),
        })
        .collect();
    atomic_write(&g.out.join("sweep.jsonl"), lines.as_bytes())?;
    let plot = g.out.join(format!("sweep_{param}.svg"));
    write_sweep_plot(&plot, param, values, &series)?;
    write_run_record(&g.out, "sweep", &base, json!({ "param": param, "values": values, "plot": plot }))?;
    println!("{}", plot.display());
    Ok(())
}
