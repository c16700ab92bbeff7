//! Optimization loop: AdamW with per-group learning rates, checkpointing,
//! resumable epochs and a line-delimited training log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbones::Backbones;
use crate::data::{validate_config, DatasetManifest, HyperConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingCache, EvalContext};
use crate::model::{Example, FocusModel};
use crate::objective::LossBundle;
use crate::preprocess::PreprocessCache;
use crate::report::Metric;
use crate::tensor::{Archive, Graph, Mat, ParamGroup, ParamStore};
use crate::util::{atomic_write, stable_u64};

pub const BEST_CHECKPOINT: &str = "checkpoint-best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoint-last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_metrics.jsonl";

/// Decoupled-weight-decay Adam with first/second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .entries()
            .iter()
            .map(|e| Mat::zeros(e.value.dim()))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], cfg: &HyperConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let scale = match cfg.grad_clip {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let lr = match store.entry(id).group {
                ParamGroup::Head => cfg.lr_head,
                ParamGroup::Backbone => cfg.lr_backbone,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                *p -= lr * (update + cfg.weight_decay * *p);
            });
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
pub struct TrainState {
    pub model: FocusModel,
    pub opt: AdamW,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Next batch index within the current epoch.
    pub cursor: usize,
    /// Best validation score so far.
    pub best: Option<f64>,
}

impl TrainState {
    pub fn new(model: FocusModel) -> Self {
        let opt = AdamW::new(&model.store);
        Self {
            model,
            opt,
            step: 0,
            epoch: 0,
            cursor: 0,
            best: None,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut arc = self.model.to_archive(json!({
            "step": self.step,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "best": self.best,
            "adam_t": self.opt.t,
            "build": crate::BUILD_ID,
        }));
        for (i, e) in self.model.store.entries().iter().enumerate() {
            arc.entries.push((format!("opt.m.{}", e.name), self.opt.m[i].clone()));
            arc.entries.push((format!("opt.v.{}", e.name), self.opt.v[i].clone()));
        }
        arc
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn from_archive(arc: &Archive, path: &Path) -> Result<Self> {
        let model = FocusModel::from_archive(arc, path)?;
        let meta = |k: &str| arc.meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let num = |k: &str| meta(k).as_u64().unwrap_or(0);
        let mut opt = AdamW::new(&model.store);
        opt.t = num("adam_t");
        for (i, e) in model.store.entries().iter().enumerate() {
            if let (Some(m), Some(v)) = (arc.get(&format!("opt.m.{}", e.name)), arc.get(&format!("opt.v.{}", e.name))) {
                opt.m[i] = m.clone();
                opt.v[i] = v.clone();
            }
        }
        Ok(Self {
            model,
            opt,
            step: num("step"),
            epoch: num("epoch") as usize,
            cursor: num("cursor") as usize,
            best: meta("best").as_f64(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }
}

/// Loads a model from a training checkpoint.
pub fn load_model(path: &Path) -> Result<FocusModel> {
    if !path.exists() {
        return Err(Error::CheckpointMissing {
            id: path.display().to_string(),
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            hint: "run `train` first or pass --checkpoint".into(),
        });
    }
    FocusModel::from_archive(&Archive::load(path)?, path)
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[Example]) -> Result<LossBundle> {
    let groups = state.model.trainable_groups();
    let mut g = Graph::new();
    let p = state.model.store.bind(&mut g, &groups);
    let vars = state.model.batch_loss_g(&mut g, &p, batch)?;
    let terms = crate::objective::ObjectiveTerms::from_config(&state.model.cfg)?;
    let bundle = vars.bundle(&g, &terms);
    if !bundle.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            query_ids: batch.iter().map(|e| e.query_id.clone()).collect(),
        });
    }
    let grads = p.collect(&g.backward(vars.total));
    let cfg = state.model.cfg.clone();
    state.opt.step(&mut state.model.store, &grads, &cfg);
    state.step += 1;
    Ok(bundle)
}

/// Resolves every triplet of `split` into model inputs. Fails with an
/// instructive error when preprocessing has not been run.
pub fn load_examples(
    manifest: &DatasetManifest,
    split: Split,
    cache: &PreprocessCache,
    backbones: &Backbones,
) -> Result<Vec<Example>> {
    manifest
        .triplets_in(split)
        .map(|t| {
            let source = |id: &str| {
                manifest
                    .images
                    .get(id)
                    .ok_or_else(|| Error::MissingImages(vec![id.to_string()]))
            };
            Ok(Example {
                query_id: t.query_id.clone(),
                reference: cache.prepared(&t.ref_image_id, source(&t.ref_image_id)?, backbones.image.as_ref())?,
                text: backbones.text.penultimate(&t.mod_text)?,
                target: cache.prepared(&t.target_image_id, source(&t.target_image_id)?, backbones.image.as_ref())?,
            })
        })
        .collect()
}

/// Batches of one epoch: a seeded shuffle cut into chunks of `B`,
/// dropping chunks with fewer than two examples.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&[b"epoch", &seed.to_le_bytes(), &(epoch as u64).to_le_bytes()]));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(rename = "L_rank")]
    pub l_rank: f64,
    #[serde(rename = "L_fr")]
    pub l_fr: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_total: Option<f64>,
    /// Mean of validation R@1, R@5 and R@10; absent without val queries.
    pub val_score: Option<f64>,
    pub metrics: Vec<Metric>,
}

pub struct FitOptions<'a> {
    pub out_dir: PathBuf,
    pub resume: bool,
    pub workers: usize,
    /// Checked between steps; when set, state is saved and fit returns.
    pub stop: Option<&'a AtomicBool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub interrupted: bool,
}

fn keep_lines(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<serde_json::Value>(l).is_ok_and(|v| keep(&v)))
        .map(|l| format!("{l}\n"))
        .collect();
    atomic_write(path, kept.as_bytes())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn val_score(metrics: &[Metric]) -> Option<f64> {
    let vals: Vec<f64> = metrics
        .iter()
        .filter(|m| m.metric == "recall" && matches!(m.k, Some(1 | 5 | 10)))
        .map(|m| m.value)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Trains on the train split, evaluating on val after every epoch.
pub fn fit(
    manifest: &DatasetManifest,
    cfg: &HyperConfig,
    cache: &PreprocessCache,
    backbones: &Backbones,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    let cfg = validate_config(cfg.clone())?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let best_path = opts.out_dir.join(BEST_CHECKPOINT);
    let last_path = opts.out_dir.join(LAST_CHECKPOINT);
    let log_path = opts.out_dir.join(TRAIN_LOG);
    let val_path = opts.out_dir.join(VAL_LOG);

    let train = load_examples(manifest, Split::Train, cache, backbones)?;
    let mut state = if opts.resume && last_path.exists() {
        let mut s = TrainState::load(&last_path)?;
        if crate::Dims::from(&s.model.cfg) != crate::Dims::from(&cfg) {
            return Err(Error::Config(vec!["checkpoint dimensions differ from the configuration".into()]));
        }
        s.model.cfg = cfg.clone();
        let (step, epoch) = (s.step, s.epoch);
        keep_lines(&log_path, |v| v["step"].as_u64().is_some_and(|x| x <= step))?;
        keep_lines(&val_path, |v| v["epoch"].as_u64().is_some_and(|x| x < epoch as u64))?;
        s
    } else {
        for p in [&log_path, &val_path] {
            atomic_write(p, b"")?;
        }
        let s = TrainState::new(FocusModel::from_backbones(&cfg, backbones)?);
        s.save(&last_path)?;
        s.save(&best_path)?;
        s
    };

    let emb = EmbeddingCache::in_memory();
    let ctx = EvalContext {
        manifest,
        preprocess: cache,
        image_encoder: backbones.image.as_ref(),
        text_encoder: backbones.text.as_ref(),
        embeddings: &emb,
        workers: opts.workers,
    };
    let mut epochs = Vec::new();
    while state.epoch < cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, state.epoch);
        let mut totals = Vec::new();
        while state.cursor < batches.len() {
            if opts.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                state.save(&last_path)?;
                return Ok(FitOutcome {
                    best: best_path,
                    last: last_path,
                    log: log_path,
                    steps: state.step,
                    epochs,
                    interrupted: true,
                });
            }
            let batch: Vec<Example> = batches[state.cursor].iter().map(|&i| train[i].clone()).collect();
            let bundle = match train_step(&mut state, &batch) {
                Ok(b) => b,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let dump = json!({ "step": state.step, "error": e.to_string(),
                        "query_ids": batch.iter().map(|b| &b.query_id).collect::<Vec<_>>() });
                    atomic_write(&opts.out_dir.join("nonfinite_batch.json"), dump.to_string().as_bytes())?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            state.cursor += 1;
            totals.push(bundle.total);
            let rec = LogRecord {
                step: state.step,
                l_rank: bundle.l_rank,
                l_fr: bundle.l_fr,
                total: bundle.total,
            };
            append_line(&log_path, &serde_json::to_string(&rec)?)?;
        }
        state.epoch += 1;
        state.cursor = 0;
        let outcome = evaluate(&ctx, Split::Val, &state.model)?;
        let mean_total = (!totals.is_empty()).then(|| totals.iter().sum::<f64>() / totals.len() as f64);
        let score = val_score(&outcome.metrics).or(mean_total.map(|t| -t));
        let rec = EpochRecord {
            epoch: state.epoch - 1,
            step: state.step,
            mean_total,
            val_score: val_score(&outcome.metrics),
            metrics: outcome.metrics,
        };
        append_line(&val_path, &serde_json::to_string(&rec)?)?;
        epochs.push(rec);
        let improved = match (score, state.best) {
            (Some(s), Some(b)) => s > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            state.best = score;
            state.save(&best_path)?;
        }
        state.save(&last_path)?;
    }
    Ok(FitOutcome {
        best: best_path,
        last: last_path,
        log: log_path,
        steps: state.step,
        epochs,
        interrupted: false,
    })
}

/// Parses a training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
