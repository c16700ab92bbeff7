//! Gallery embedding, ranking and recall metrics.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use rayon::prelude::*;

use crate::backbones::{ImageEncoder, TextEncoder};
use crate::data::{DatasetManifest, QueryTriplet, ReportStyle, Split};
use crate::error::{Error, Result};
use crate::model::{FocusModel, ImageFeatures};
use crate::preprocess::PreprocessCache;
use crate::report::{metrics_for_style, Metric};
use crate::tensor::{read_matrix, write_matrix, Mat};
use crate::util::sha256_hex;

/// L2-normalized pooled target features, one row per gallery id.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    pub ids: Vec<String>,
    pub embeddings: Mat,
}

fn normalized(mut m: Mat) -> Result<Mat> {
    for (i, mut r) in m.rows_mut().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector(format!("embedding row {i}")));
        }
        r.mapv_inplace(|x| x / n);
    }
    Ok(m)
}

impl GalleryIndex {
    pub fn new(ids: Vec<String>, embeddings: Mat) -> Result<Self> {
        if ids.len() != embeddings.nrows() {
            return Err(Error::Eval(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                embeddings.nrows()
            )));
        }
        Ok(Self {
            ids,
            embeddings: normalized(embeddings)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Target embeddings keyed by (model fingerprint, image id), in memory and
/// optionally on disk.
pub struct EmbeddingCache {
    root: Option<PathBuf>,
    mem: Mutex<HashMap<(String, String), Mat>>,
    model_calls: AtomicUsize,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            mem: Mutex::new(HashMap::new()),
            model_calls: AtomicUsize::new(0),
        }
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            ..Self::in_memory()
        }
    }

    /// Number of embeddings computed (not served from cache).
    pub fn model_calls(&self) -> usize {
        self.model_calls.load(Ordering::SeqCst)
    }

    fn path(&self, fingerprint: &str, image_id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| {
            r.join(&fingerprint[..fingerprint.len().min(32)])
                .join(format!("{}.fmat", &sha256_hex(image_id.as_bytes())[..32]))
        })
    }

    pub fn get_or_compute(
        &self,
        fingerprint: &str,
        image_id: &str,
        compute: impl FnOnce() -> Result<Mat>,
    ) -> Result<Mat> {
        let key = (fingerprint.to_string(), image_id.to_string());
        if let Some(m) = self.mem.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let path = self.path(fingerprint, image_id);
        if let Some(p) = &path {
            if let Ok(m) = read_matrix(p) {
                self.mem.lock().expect("cache lock").insert(key, m.clone());
                return Ok(m);
            }
        }
        self.model_calls.fetch_add(1, Ordering::SeqCst);
        let m = compute()?;
        if let Some(p) = &path {
            write_matrix(p, &m)?;
        }
        self.mem.lock().expect("cache lock").insert(key, m.clone());
        Ok(m)
    }
}

/// Everything evaluation needs besides the model.
pub struct EvalContext<'a> {
    pub manifest: &'a DatasetManifest,
    pub preprocess: &'a PreprocessCache,
    pub image_encoder: &'a dyn ImageEncoder,
    pub text_encoder: &'a dyn TextEncoder,
    pub embeddings: &'a EmbeddingCache,
    pub workers: usize,
}

impl EvalContext<'_> {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::Eval(format!("thread pool: {e}")))
    }

    fn source(&self, id: &str) -> Result<&crate::data::ImageSource> {
        self.manifest
            .images
            .get(id)
            .ok_or_else(|| Error::MissingImages(vec![id.to_string()]))
    }

    /// Pooled target embedding of one image, through the cache.
    pub fn target_embedding(&self, model: &FocusModel, fingerprint: &str, id: &str) -> Result<Mat> {
        self.embeddings.get_or_compute(fingerprint, id, || {
            let prep = self.preprocess.prepared(id, self.source(id)?, self.image_encoder)?;
            model.target_embedding(ImageFeatures::from(&prep))
        })
    }

    /// Pooled composed embedding of a query.
    pub fn query_embedding(&self, model: &FocusModel, t: &QueryTriplet) -> Result<Mat> {
        let prep = self
            .preprocess
            .prepared(&t.ref_image_id, self.source(&t.ref_image_id)?, self.image_encoder)?;
        let tokens = self.text_encoder.penultimate(&t.mod_text)?;
        model.query_embedding(ImageFeatures::from(&prep), &tokens)
    }
}

/// Index over the gallery of `split`, rows in gallery order.
pub fn embed_gallery(ctx: &EvalContext, split: Split, model: &FocusModel) -> Result<GalleryIndex> {
    let ids = ctx.manifest.gallery(split).to_vec();
    embed_ids(ctx, ids, model)
}

pub fn embed_ids(ctx: &EvalContext, ids: Vec<String>, model: &FocusModel) -> Result<GalleryIndex> {
    let fp = model.fingerprint();
    let rows: Vec<Mat> = ctx.pool()?.install(|| {
        ids.par_iter()
            .map(|id| ctx.target_embedding(model, &fp, id))
            .collect::<Result<_>>()
    })?;
    let d = model.dims.embed_dim;
    let mut emb = Array2::zeros((ids.len(), d));
    for (i, r) in rows.iter().enumerate() {
        emb.row_mut(i).assign(&r.row(0));
    }
    GalleryIndex::new(ids, emb)
}

/// Gallery ids by descending cosine to `query` (`1×D` or a length-`D` row),
/// ties broken by ascending id. `subset` restricts the candidates.
pub fn rank_embedding(query: &Mat, index: &GalleryIndex, subset: Option<&[String]>) -> Result<Vec<String>> {
    let q = normalized(query.clone())?;
    let scores = index.embeddings.dot(&q.row(0));
    let candidates: Vec<usize> = match subset {
        None => (0..index.len()).collect(),
        Some(ids) => {
            let pos: HashMap<&str, usize> = index
                .ids
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i))
                .collect();
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let i = pos
                    .get(id.as_str())
                    .ok_or_else(|| Error::Eval(format!("subset id {id} not in gallery")))?;
                if !out.contains(i) {
                    out.push(*i);
                }
            }
            out
        }
    };
    let mut order = candidates;
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| index.ids[a].cmp(&index.ids[b]))
    });
    Ok(order.into_iter().map(|i| index.ids[i].clone()).collect())
}

/// Ranks the gallery for a query triplet; `subset_only` uses its subset ids.
pub fn rank(
    ctx: &EvalContext,
    model: &FocusModel,
    triplet: &QueryTriplet,
    index: &GalleryIndex,
    subset_only: bool,
) -> Result<Vec<String>> {
    let subset = if subset_only {
        Some(triplet.subset_ids.as_deref().ok_or_else(|| {
            Error::Eval(format!("query {} has no subset ids", triplet.query_id))
        })?)
    } else {
        None
    };
    let q = ctx.query_embedding(model, triplet)?;
    rank_embedding(&q, index, subset)
}

/// Percentage of queries whose truth is within the first `k` ranked ids.
pub fn recall_at_k<S: AsRef<str>>(rankings: &[Vec<String>], truths: &[S], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    if rankings.len() != truths.len() || rankings.is_empty() {
        return Err(Error::Eval(format!(
            "{} rankings for {} truths",
            rankings.len(),
            truths.len()
        )));
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|id| id == t.as_ref()))
        .count();
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Ranked lists and metrics of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub metrics: Vec<Metric>,
    /// `(query_id, ranked ids)` in manifest order.
    pub rankings: Vec<(String, Vec<String>)>,
    pub subset_rankings: Vec<(String, Vec<String>)>,
}

/// Full evaluation of `split` under the manifest's report style.
pub fn evaluate(ctx: &EvalContext, split: Split, model: &FocusModel) -> Result<EvalOutcome> {
    let triplets: Vec<&QueryTriplet> = ctx.manifest.triplets_in(split).collect();
    if triplets.is_empty() {
        return Ok(EvalOutcome {
            metrics: Vec::new(),
            rankings: Vec::new(),
            subset_rankings: Vec::new(),
        });
    }
    let index = embed_gallery(ctx, split, model)?;
    let with_subsets = ctx.manifest.report_style == ReportStyle::Cirr;
    let ranked: Vec<(Vec<String>, Option<Vec<String>>)> = ctx.pool()?.install(|| {
        triplets
            .par_iter()
            .map(|t| {
                let q = ctx.query_embedding(model, t)?;
                let full = rank_embedding(&q, &index, None)?;
                let sub = match (&t.subset_ids, with_subsets) {
                    (Some(s), true) => Some(rank_embedding(&q, &index, Some(s))?),
                    _ => None,
                };
                Ok((full, sub))
            })
            .collect::<Result<_>>()
    })?;
    let mut rankings = Vec::new();
    let mut subset_rankings = Vec::new();
    for (t, (full, sub)) in triplets.iter().zip(ranked) {
        rankings.push((t.query_id.clone(), full));
        if let Some(s) = sub {
            subset_rankings.push((t.query_id.clone(), s));
        }
    }
    let metrics = metrics_for_style(ctx.manifest.report_style, &triplets, &rankings, &subset_rankings)?;
    Ok(EvalOutcome {
        metrics,
        rankings,
        subset_rankings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn index(rows: Mat, ids: &[&str]) -> GalleryIndex {
        GalleryIndex::new(ids.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    #[test]
    fn recall_hand_count() {
        let r = |t: usize| {
            let mut v: Vec<String> = (0..20).map(|i| format!("x{i}")).collect();
            v[t - 1] = "t".into();
            v
        };
        let rankings = vec![r(1), r(2), r(11)];
        let truths = vec!["t"; 3];
        let got = recall_at_k(&rankings, &truths, 10).unwrap();
        assert!((got - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(crate::util::round2(got), 66.67);
        assert_eq!(recall_at_k(&rankings, &truths, 20).unwrap(), 100.0);
        assert_eq!(recall_at_k(&rankings[..1], &truths[..1], 1).unwrap(), 100.0);
        assert!(recall_at_k(&rankings, &truths, 0).is_err());
        assert!(recall_at_k::<&str>(&[], &[], 1).is_err());
    }

    #[test]
    fn exact_row_ranks_first_and_ties_use_ids() {
        let idx = index(array![[1.0, 0.0], [0.0, 1.0], [0.0, 2.0]], &["c", "b", "a"]);
        let r = rank_embedding(&array![[0.0, 3.0]], &idx, None).unwrap();
        assert_eq!(r, vec!["a", "b", "c"]);
        let r = rank_embedding(&array![[1.0, 0.0]], &idx, None).unwrap();
        assert_eq!(r[0], "c");
    }

    #[test]
    fn subset_restricts_candidates() {
        let rows = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64).sin() + 1.5);
        let ids: Vec<String> = (0..8).map(|i| format!("g{i}")).collect();
        let idx = GalleryIndex::new(ids.clone(), rows).unwrap();
        let subset: Vec<String> = ids[..6].to_vec();
        let r = rank_embedding(&array![[1.0, 2.0, 0.5]], &idx, Some(&subset)).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r.iter().all(|id| subset.contains(id)));
        let bad = vec!["nope".to_string()];
        assert!(rank_embedding(&array![[1.0, 2.0, 0.5]], &idx, Some(&bad)).is_err());
    }

    #[test]
    fn single_image_gallery_is_normalized() {
        let idx = index(array![[3.0, 4.0]], &["only"]);
        assert_eq!(idx.embeddings, array![[0.6, 0.8]]);
        assert!(GalleryIndex::new(vec!["z".into()], array![[0.0, 0.0]]).is_err());
    }

    #[test]
    fn cache_counts_model_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::on_disk(dir.path());
        let m = cache.get_or_compute("fp", "img", || Ok(array![[1.0, 2.0]])).unwrap();
        let again = cache.get_or_compute("fp", "img", || panic!("cached")).unwrap();
        assert_eq!(m, again);
        assert_eq!(cache.model_calls(), 1);
        let fresh = EmbeddingCache::on_disk(dir.path());
        fresh.get_or_compute("fp", "img", || panic!("on disk")).unwrap();
        assert_eq!(fresh.model_calls(), 0);
        fresh.get_or_compute("other", "img", || Ok(array![[0.0, 1.0]])).unwrap();
        assert_eq!(fresh.model_calls(), 1);
    }
}
