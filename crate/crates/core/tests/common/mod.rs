#![allow(dead_code)]

use std::path::Path;

use focuscir::backbones::Backbones;
use focuscir::data::{DatasetManifest, HyperConfig, Split};
use focuscir::eval::{evaluate, EmbeddingCache, EvalContext, EvalOutcome};
use focuscir::model::FocusModel;
use focuscir::preprocess::{preprocess_manifest, PreprocessCache, SegmentationModels};
use focuscir::synth::gen_synthetic;
use focuscir::tensor::{Bound, Graph, Mat, ParamGroup, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Setup {
    pub manifest: DatasetManifest,
    pub backbones: Backbones,
    pub cache: PreprocessCache,
}

/// Synthetic manifest with every image preprocessed into `dir`.
pub fn setup(dir: &Path, cfg: &HyperConfig, n: usize, noise: f64) -> Setup {
    let manifest = gen_synthetic(n, cfg.seed, noise).unwrap();
    let backbones = Backbones::stub(cfg);
    let cache = PreprocessCache::open(dir.join("cache")).unwrap();
    let models = SegmentationModels {
        captioner: backbones.captioner.as_ref(),
        segmenter: backbones.segmenter.as_ref(),
    };
    let stats = preprocess_manifest(&manifest, &cache, &models, Some(backbones.image.as_ref()), 1).unwrap();
    assert_eq!(stats.failures, 0);
    Setup {
        manifest,
        backbones,
        cache,
    }
}

pub fn eval_split(s: &Setup, model: &FocusModel, split: Split) -> EvalOutcome {
    let emb = EmbeddingCache::in_memory();
    let ctx = EvalContext {
        manifest: &s.manifest,
        preprocess: &s.cache,
        image_encoder: s.backbones.image.as_ref(),
        text_encoder: s.backbones.text.as_ref(),
        embeddings: &emb,
        workers: 1,
    };
    evaluate(&ctx, split, model).unwrap()
}

pub fn recall(o: &EvalOutcome, k: usize) -> f64 {
    o.metrics
        .iter()
        .find(|m| m.metric == "recall" && m.k == Some(k))
        .map(|m| m.value)
        .unwrap()
}

const ALL: [ParamGroup; 2] = [ParamGroup::Head, ParamGroup::Backbone];

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub struct Report {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

/// Compares gradients of `readout` for up to `samples` entries of every
/// parameter whose name passes `select`. A parameter without an analytic
/// gradient is compared as zero.
pub fn check(
    model: &mut FocusModel,
    select: impl Fn(&str) -> bool,
    readout: impl Fn(&FocusModel, &mut Graph, &Bound) -> Var,
    h: f64,
    samples: usize,
) -> Report {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, &ALL);
    let out = readout(model, &mut g, &p);
    let grads = p.collect(&g.backward(out));
    let eval = |m: &FocusModel| {
        let mut g = Graph::new();
        let p = m.store.bind(&mut g, &[]);
        let out = readout(m, &mut g, &p);
        g.scalar(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rep = Report {
        max_rel: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        if !select(&name) {
            continue;
        }
        let (rows, cols) = model.store.value(id).dim();
        let n = rows * cols;
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let (i, j) = (k / cols, k % cols);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |gm| gm[[i, j]]);
            let orig = model.store.value(id)[[i, j]];
            model.store.value_mut(id)[[i, j]] = orig + h;
            let up = eval(model);
            model.store.value_mut(id)[[i, j]] = orig - h;
            let down = eval(model);
            model.store.value_mut(id)[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic, numeric);
            rep.checked += 1;
            if e > rep.max_rel {
                rep.max_rel = e;
                rep.worst = format!("{name}[{i},{j}]: analytic {analytic:e}, numeric {numeric:e}");
            }
        }
    }
    rep
}
