//! Acceptance criteria 1–10. Prints one line per criterion and exits
//! nonzero when any of them fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use focuscir::backbones::mask_weights;
use focuscir::data::{AblationFlag, Dims, FeatureMatrix, HyperConfig, Role, Split};
use focuscir::eval::{rank_embedding, recall_at_k, GalleryIndex};
use focuscir::focus::{
    attention_weights, cross_attend, focused_feature, mgfp, tfm, vfm_global, vfm_local, Stream,
};
use focuscir::model::{FocusModel, ImageFeatures};
use focuscir::objective::{bbc_loss, fr_loss, DistributionSource, FocusDistribution};
use focuscir::preprocess::{preprocess_manifest, SegmentationModels};
use focuscir::report::{cirr_composite, render_markdown, Metric};
use focuscir::revision::{compose, reduce_channels, revision_weights, Side};
use focuscir::tensor::{Graph, Mat};
use focuscir::trainer::{fit, load_examples, read_log, FitOptions, TrainState, TRAIN_LOG, VAL_LOG};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn shape(got: (usize, usize), want: (usize, usize), what: &str) -> Result<(), String> {
    ensure!(got == want, "{what}: {got:?}, expected {want:?}");
    Ok(())
}

fn fit_opts(out: &Path) -> FitOptions<'static> {
    FitOptions {
        out_dir: out.to_path_buf(),
        resume: false,
        workers: 1,
        stop: None,
    }
}

fn shapes() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let base = HyperConfig::stub();
    let s = common::setup(dir.path(), &base, 12, 0.2);
    let examples = load_examples(&s.manifest, Split::Train, &s.cache, &s.backbones).unwrap();
    for p in [1, 2, 4] {
        let cfg = HyperConfig {
            focus_channels: p,
            ..base.clone()
        };
        let m = FocusModel::from_backbones(&cfg, &s.backbones).unwrap();
        let d: Dims = m.dims;
        let (c, s_len, di, dd) = (d.channels, d.text_len, d.visual_dim, d.embed_dim);
        ensure!((c, s_len, di, dd) == (5, 8, 32, 16), "stub dims {:?}", d);
        let ex = &examples[0];
        let fm = &m.layout.focus;
        let local = FeatureMatrix::new(ex.reference.local.clone(), Role::LocalVisual, &d).unwrap();
        let seg = FeatureMatrix::new(ex.reference.seg_local.clone(), Role::LocalVisual, &d).unwrap();

        let att = cross_attend(&fm.visual.seg_queries, &m.store, &seg, &local, &d).unwrap();
        shape(att.data().dim(), (c, di), "cross attention")?;
        let mapped = vfm_local(fm, &m.store, &local, &seg, &d).unwrap();
        shape(mapped.data().dim(), (c, dd), "visual local mapping")?;
        let global = vfm_global(fm, &m.layout.image_final, &m.store, &local, &seg, &mapped, &d).unwrap();
        shape(global.data().dim(), (3, dd), "visual global mapping")?;

        let (tg, sg) = {
            let mut g = Graph::new();
            let b = m.store.bind(&mut g, &[]);
            let tokens = g.constant(ex.text.features.clone());
            let pool = g.constant(mask_weights(&ex.text));
            let tg = m.layout.text_final.forward(&mut g, &b, tokens, Some(pool));
            let sv = g.constant(ex.reference.seg_local.clone());
            let sg = m.layout.image_final.forward(&mut g, &b, sv, None);
            (g.value(tg).clone(), g.value(sg).clone())
        };
        let tg = FeatureMatrix::new(tg, Role::Pooled, &d).unwrap();
        let sg = FeatureMatrix::new(sg, Role::Pooled, &d).unwrap();
        let tokens = FeatureMatrix::new(ex.text.features.clone(), Role::TextTokens, &d).unwrap();
        let (t_global, t_local) = tfm(fm, &m.store, &tg, &sg, &tokens, &d).unwrap();
        shape(t_global.data().dim(), (3, dd), "textual global mapping")?;
        shape(t_local.data().dim(), (s_len, dd), "textual local mapping")?;

        let proj = fm.projections(Stream::Reference);
        let (wl, wl_w) = mgfp(&proj.local, &m.store, &mapped, &d).unwrap();
        let (wg, wg_w) = mgfp(&proj.global, &m.store, &global, &d).unwrap();
        shape(wl.data().dim(), (p, dd), "local projection")?;
        shape(wl_w.0.dim(), (p, c), "local projection weights")?;
        shape(wg.data().dim(), (p, dd), "global projection")?;
        shape(wg_w.0.dim(), (p, 3), "global projection weights")?;
        let (_, text_w) = mgfp(&fm.modification.local, &m.store, &t_local, &d).unwrap();
        shape(text_w.0.dim(), (p, s_len), "text projection weights")?;
        let wl_as_local = FeatureMatrix::new(wl.data().clone(), Role::WeightedLocal, &d).unwrap();
        let wg_as_local = FeatureMatrix::new(wg.data().clone(), Role::WeightedLocal, &d).unwrap();
        let focused = focused_feature(&wl_as_local, &wg_as_local, &d).unwrap();
        shape(focused.data().dim(), (2 * p, dd), "focused feature")?;

        let r = ImageFeatures::from(&ex.reference);
        let fr = m.run_vfm(r, Stream::Reference).unwrap();
        let fmod = m.run_tfm(&ex.text, r).unwrap();
        shape(fr.data().dim(), (2 * p, dd), "reference focused")?;
        shape(fmod.data().dim(), (2 * p, dd), "modification focused")?;
        let rev = &m.layout.revision;
        let rr = reduce_channels(rev, &m.store, &fr, Side::Reference, &d).unwrap();
        let rm = reduce_channels(rev, &m.store, &fmod, Side::Modification, &d).unwrap();
        shape(rr.data().dim(), (p, dd), "reduced reference")?;
        let (alpha, beta) = revision_weights(rev, &m.store, &rr, &rm, &d).unwrap();
        shape(alpha.dim(), (p, dd), "alpha")?;
        shape(beta.dim(), (p, dd), "beta")?;
        let composed = compose(&alpha, &beta, &rr, &rm, true, &d).unwrap();
        let whole = m.compose_query(r, &ex.text).unwrap();
        shape(whole.data().dim(), (p, dd), "composed feature")?;
        let gap = (composed.data() - whole.data()).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        ensure!(gap < 1e-12, "stagewise and whole-pipeline composed features differ by {gap}");
        let t = m.run_vfm(ImageFeatures::from(&ex.target), Stream::Target).unwrap();
        shape(t.data().dim(), (2 * p, dd), "target focused")?;
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("P in {{1,2,4}}, {:.2}s", took.as_secs_f64()))
}

fn loss_oracles() -> Outcome {
    let eye = array![[1.0, 0.0], [0.0, 1.0]];
    let bbc = bbc_loss(&eye, &eye, 0.1).unwrap();
    let want = (1.0 + (-10.0f64).exp()).ln();
    ensure!((bbc - want).abs() < 1e-8, "bbc {bbc} vs {want}");
    let ft = FocusDistribution {
        f: array![[0.5, 0.5], [0.5, 0.5]],
        source: DistributionSource::Target,
    };
    let fc = FocusDistribution {
        f: array![[0.9, 0.1], [0.9, 0.1]],
        source: DistributionSource::Composed,
    };
    let kl = fr_loss(&ft, &fc).unwrap();
    ensure!((kl - 0.5108).abs() < 1e-4, "kl {kl}");
    let same = fr_loss(&ft, &ft).unwrap();
    ensure!(same.abs() < 1e-10, "kl(f, f) {same}");
    Ok(format!("bbc {bbc:.6e}, kl {kl:.4}, kl(f,f) {same:e}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = HyperConfig::stub();
    let s = common::setup(dir.path(), &cfg, 12, 0.3);
    let ex = load_examples(&s.manifest, Split::Train, &s.cache, &s.backbones).unwrap();
    let mut model = FocusModel::from_backbones(&cfg, &s.backbones).unwrap();
    let batch = &ex[..4];
    let rep = common::check(
        &mut model,
        |n| ["vfm.", "tfm.", "mgfp.", "rev.", "image_final.", "text_final."].iter().any(|p| n.starts_with(p)),
        |m, g, p| m.batch_loss_g(g, p, batch).unwrap().total,
        1e-4,
        24,
    );
    let took = start.elapsed();
    ensure!(rep.checked >= 300, "only {} entries checked", rep.checked);
    ensure!(rep.max_rel < 1e-3, "max relative error {:e} at {}", rep.max_rel, rep.worst);
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!("{} entries, max rel {:.2e}, {:.2}s", rep.checked, rep.max_rel, took.as_secs_f64()))
}

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn distribution_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let models: Vec<FocusModel> = [(0u64, 1usize), (1, 2), (2, 4)]
        .into_iter()
        .map(|(seed, p)| {
            let cfg = HyperConfig {
                seed,
                focus_channels: p,
                ..HyperConfig::stub()
            };
            FocusModel::from_backbones(&cfg, &focuscir::backbones::Backbones::stub(&cfg)).unwrap()
        })
        .collect();
    let (mut att_err, mut proj_err) = (0.0f64, 0.0f64);
    let (mut gate_min, mut gate_max) = (1.0f64, 0.0f64);
    for trial in 0..1000 {
        let m = &models[trial % models.len()];
        let d = m.dims;
        let scale = [0.1, 1.0, 3.0, 10.0][trial % 4];
        let units = [
            &m.layout.focus.visual.seg_queries,
            &m.layout.focus.visual.image_queries,
        ];
        let (q, kv) = (random(d.channels, d.visual_dim, scale, &mut rng), random(d.channels, d.visual_dim, scale, &mut rng));
        let a = attention_weights(units[trial % 2], &m.store, &q, &kv).unwrap();
        for r in a.rows() {
            att_err = att_err.max((r.sum() - 1.0).abs());
        }
        let tq = random(1, d.embed_dim, scale, &mut rng);
        let tkv = random(1, d.embed_dim, scale, &mut rng);
        let ta = attention_weights(&m.layout.focus.textual.seg_queries, &m.store, &tq, &tkv).unwrap();
        att_err = att_err.max((ta.sum() - 1.0).abs());

        let (k, role) = [(d.channels, Role::FusedLocal), (d.text_len, Role::LocalText), (3, Role::GlobalStack)][trial % 3];
        let f = FeatureMatrix::new(random(k, d.embed_dim, scale, &mut rng), role, &d).unwrap();
        let streams = [Stream::Reference, Stream::Modification, Stream::Target];
        let sp = m.layout.focus.projections(streams[trial % 3]);
        let proj = if k == 3 { &sp.global } else { &sp.local };
        let (_, w) = mgfp(proj, &m.store, &f, &d).unwrap();
        proj_err = proj_err.max(w.max_row_error());

        let fr = FeatureMatrix::new(random(d.focus, d.embed_dim, scale, &mut rng), Role::Reduced, &d).unwrap();
        let fm = FeatureMatrix::new(random(d.focus, d.embed_dim, scale, &mut rng), Role::Reduced, &d).unwrap();
        let (alpha, beta) = revision_weights(&m.layout.revision, &m.store, &fr, &fm, &d).unwrap();
        for &x in alpha.iter().chain(beta.iter()) {
            gate_min = gate_min.min(x);
            gate_max = gate_max.max(x);
        }
    }
    ensure!(att_err < 1e-6, "attention row error {att_err:e}");
    ensure!(proj_err < 1e-6, "projection row error {proj_err:e}");
    ensure!(gate_min > 0.0 && gate_max < 1.0, "gates span [{gate_min}, {gate_max}]");
    Ok(format!(
        "1000 inputs, attention {att_err:.1e}, projection {proj_err:.1e}, gates in [{gate_min:.1e}, 1 - {:.1e}]",
        1.0 - gate_max
    ))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // 23 triplets leave 16 for training; B=4 gives four steps per epoch.
    let cfg = HyperConfig {
        epochs: 125,
        ..HyperConfig::stub()
    };
    let s = common::setup(dir.path(), &cfg, 23, 0.0);
    ensure!(s.manifest.triplets_in(Split::Train).count() == 16, "train split size");
    let out = fit(&s.manifest, &cfg, &s.cache, &s.backbones, &fit_opts(&dir.path().join("run"))).unwrap();
    ensure!(out.steps <= 500, "{} steps", out.steps);
    let model = TrainState::load(&out.last).unwrap().model;
    let r1 = common::recall(&common::eval_split(&s, &model, Split::Train), 1);
    let took = start.elapsed();
    ensure!(r1 == 100.0, "train R@1 {r1} after {} steps", out.steps);
    ensure!(took < Duration::from_secs(300), "took {took:?}");
    Ok(format!("train R@1 {r1} after {} steps, {:.2}s", out.steps, took.as_secs_f64()))
}

fn ablations() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = HyperConfig {
        epochs: 2,
        ..HyperConfig::stub()
    };
    let s = common::setup(dir.path(), &base, 16, 0.2);
    let final_loss = |cfg: &HyperConfig, name: &str| {
        let out = fit(&s.manifest, cfg, &s.cache, &s.backbones, &fit_opts(&dir.path().join(name))).unwrap();
        read_log(&out.log).unwrap().last().expect("steps ran").total
    };
    let full = final_loss(&base, "full");
    let mut gaps = Vec::new();
    for flag in AblationFlag::ALL {
        let mut cfg = base.clone();
        cfg.ablations.insert(flag);
        let l = final_loss(&cfg, flag.name());
        ensure!((l - full).abs() > 1e-9, "{} final loss {l} equals full {full}", flag.name());
        gaps.push((l - full).abs());
    }
    let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!("9 flags differ from full loss {full:.4}; smallest gap {min_gap:.2e}"))
}

fn ranking_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for query in 0..200 {
        let n = rng.random_range(1..=100);
        let d = rng.random_range(2..=12);
        let mut rows = random(n, d, 1.0, &mut rng);
        for _ in 0..n / 8 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            let src = rows.row(a).to_owned();
            rows.row_mut(b).assign(&src);
        }
        let ids: Vec<String> = (0..n).map(|i| format!("id{:03}", (i * 53) % 1000)).collect();
        let q = random(1, d, 1.0, &mut rng);
        let got = rank_embedding(&q, &GalleryIndex::new(ids.clone(), rows.clone()).unwrap(), None).unwrap();

        let qn = q.row(0).dot(&q.row(0)).sqrt();
        let mut naive: Vec<(f64, String)> = rows
            .rows()
            .into_iter()
            .zip(&ids)
            .map(|(r, id)| (r.dot(&q.row(0)) / (r.dot(&r).sqrt() * qn), id.clone()))
            .collect();
        naive.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let naive: Vec<String> = naive.into_iter().map(|(_, id)| id).collect();
        ensure!(got == naive, "query {query}: ranking differs from the full-sort oracle");

        let truth = [ids[rng.random_range(0..n)].clone()];
        let mut last = 0.0;
        for k in 1..=n {
            let v = recall_at_k(std::slice::from_ref(&got), &truth, k).unwrap();
            ensure!(v >= last, "query {query}: recall drops at k={k}");
            last = v;
        }
        ensure!(last == 100.0, "query {query}: recall at k=n is {last}");
    }
    Ok("200 queries match the full-sort oracle; recall monotone in k".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = HyperConfig {
        epochs: 3,
        ..HyperConfig::stub()
    };
    let s = common::setup(dir.path(), &cfg, 24, 0.3);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            fit(&s.manifest, &cfg, &s.cache, &s.backbones, &fit_opts(&out)).unwrap();
            out
        })
        .collect();
    for f in [TRAIN_LOG, VAL_LOG] {
        let (a, b) = (fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap());
        ensure!(!a.is_empty(), "{f} is empty");
        ensure!(a == b, "{f} differs between seeded runs");
    }
    Ok("training log and validation metrics byte-identical".into())
}

fn cache_idempotency() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = HyperConfig::stub();
    let s = common::setup(dir.path(), &cfg, 20, 0.4);
    let snapshot = |root: &Path| {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push((p.clone(), fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    let before = snapshot(s.cache.root());
    let models = SegmentationModels {
        captioner: s.backbones.captioner.as_ref(),
        segmenter: s.backbones.segmenter.as_ref(),
    };
    let stats = preprocess_manifest(&s.manifest, &s.cache, &models, Some(s.backbones.image.as_ref()), 1).unwrap();
    ensure!(stats.misses == 0, "{} misses on the second pass", stats.misses);
    ensure!(before == snapshot(s.cache.root()), "cache contents changed");
    Ok(format!("second pass: {} hits, 0 misses, {} files unchanged", stats.hits, before.len()))
}

fn report_fidelity() -> Outcome {
    let composite = cirr_composite(82.60, 81.37);
    ensure!(composite == 81.99, "composite {composite}");
    let table = render_markdown("cirr", &[Metric::new("composite", None, composite)]);
    ensure!(table.contains("81.99"), "rendered table lacks 81.99:\n{table}");
    Ok(format!("composite {composite}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("shape suite", shapes),
        ("loss oracles", loss_oracles),
        ("gradient checks", gradient_checks),
        ("distribution invariants", distribution_invariants),
        ("overfit smoke test", overfit),
        ("ablation structure", ablations),
        ("ranking oracle", ranking_oracle),
        ("determinism", determinism),
        ("cache idempotency", cache_idempotency),
        ("report fidelity", report_fidelity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match result {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
