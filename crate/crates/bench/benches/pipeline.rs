use criterion::{criterion_group, criterion_main, Criterion};
use focuscir::backbones::Backbones;
use focuscir::data::{HyperConfig, Split};
use focuscir::eval::{rank_embedding, GalleryIndex};
use focuscir::model::{Example, FocusModel, ImageFeatures};
use focuscir::preprocess::{preprocess_manifest, PreprocessCache, SegmentationModels};
use focuscir::synth::gen_synthetic;
use focuscir::trainer::{load_examples, train_step, TrainState};
use ndarray::Array2;

fn examples(cfg: &HyperConfig, dir: &std::path::Path) -> (Backbones, Vec<Example>) {
    let manifest = gen_synthetic(24, cfg.seed, 0.2).unwrap();
    let backbones = Backbones::stub(cfg);
    let cache = PreprocessCache::open(dir.join("cache")).unwrap();
    let models = SegmentationModels {
        captioner: backbones.captioner.as_ref(),
        segmenter: backbones.segmenter.as_ref(),
    };
    preprocess_manifest(&manifest, &cache, &models, Some(backbones.image.as_ref()), 1).unwrap();
    let ex = load_examples(&manifest, Split::Train, &cache, &backbones).unwrap();
    (backbones, ex)
}

fn pipeline(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = HyperConfig::stub();
    let (backbones, ex) = examples(&cfg, dir.path());
    let model = FocusModel::from_backbones(&cfg, &backbones).unwrap();
    let first = &ex[0];

    c.bench_function("compose_query", |b| {
        b.iter(|| model.compose_query(ImageFeatures::from(&first.reference), &first.text).unwrap())
    });
    c.bench_function("target_embedding", |b| {
        b.iter(|| model.target_embedding(ImageFeatures::from(&first.target)).unwrap())
    });

    let batch = &ex[..cfg.batch_size];
    let mut state = TrainState::new(FocusModel::from_backbones(&cfg, &backbones).unwrap());
    c.bench_function("train_step", |b| b.iter(|| train_step(&mut state, batch).unwrap()));

    let width = model.dims.focus * model.dims.embed_dim;
    let n = 5000;
    let rows = Array2::from_shape_fn((n, width), |(i, j)| ((i * 31 + j * 17) % 97) as f64 / 97.0 - 0.5);
    let ids = (0..n).map(|i| format!("img{i:05}")).collect();
    let index = GalleryIndex::new(ids, rows).unwrap();
    let query = Array2::from_shape_fn((1, width), |(_, j)| (j as f64).sin());
    c.bench_function("rank_5000", |b| b.iter(|| rank_embedding(&query, &index, None).unwrap()));
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
