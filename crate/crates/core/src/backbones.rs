//! Split image/text encoders, captioner and segmenter.
//!
//! Encoders are split at the last block: the *penultimate* part maps raw
//! input to token features and is frozen; the *final* part ([`FinalBlock`])
//! maps tokens to a single L2-normalised embedding and lives in the model's
//! parameter store so the trainer can fine-tune it at the backbone rate.
//!
//! Two families implement the contracts. Stubs are deterministic seeded maps
//! over synthetic attribute records, used by the `stub` profile. Adapters
//! load exported weights from `<checkpoint_root>/<model_ref>/` for the
//! `full` profile.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::data::attributes::{vocab_size, AttributeImage, Slot};
use crate::data::{HyperConfig, Profile};
use crate::error::{Error, Result};
use crate::tensor::{Archive, Bound, Graph, Mat, ParamGroup, ParamId, ParamStore, Var};
use crate::util::stable_u64;

/// Input to image-side models.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageData {
    Attributes(AttributeImage),
    Pixels(RgbImage),
}

pub trait ImageEncoder: Send + Sync {
    fn backbone_id(&self) -> &str;
    /// Penultimate token features, `C×D_I`.
    fn penultimate(&self, image: &ImageData) -> Result<Mat>;
}

/// Penultimate text tokens plus a validity flag per position.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTokens {
    pub features: Mat,
    pub valid: Vec<bool>,
}

impl TextTokens {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

pub trait TextEncoder: Send + Sync {
    fn backbone_id(&self) -> &str;
    /// Token features `S×D_T`, truncated or zero-padded to `S` rows.
    fn penultimate(&self, text: &str) -> Result<TextTokens>;
}

pub trait Captioner: Send + Sync {
    fn model_id(&self) -> &str;
    fn caption(&self, image: &ImageData) -> Result<String>;
}

pub trait Segmenter: Send + Sync {
    fn model_id(&self) -> &str;
    /// Returns the image with everything but the captioned portion masked.
    fn segment(&self, image: &ImageData, caption: &str) -> Result<ImageData>;
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), limit: f64) -> Mat {
    Array2::from_shape_fn(shape, |_| rng.random_range(-limit..limit))
}

fn normalize_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
}

/// Seeded linear map of the attribute one-hot vector.
///
/// Row `c` of the output is `normalize(onehot · A_c + pos_c)`; the all-zero
/// record therefore yields the row-normalised positional matrix.
pub struct StubImageEncoder {
    id: String,
    maps: Vec<Mat>,
    positional: Mat,
}

impl StubImageEncoder {
    pub fn new(seed: u64, channels: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&[b"stub-image", &seed.to_le_bytes()]));
        let maps = (0..channels)
            .map(|_| uniform(&mut rng, (vocab_size(), dim), 1.0))
            .collect();
        let positional = uniform(&mut rng, (channels, dim), 0.5);
        Self {
            id: format!("stub-image-s{seed}-c{channels}-d{dim}"),
            maps,
            positional,
        }
    }

    /// The output for a fully zeroed record.
    pub fn bias_matrix(&self) -> Mat {
        let mut m = self.positional.clone();
        normalize_rows_inplace(&mut m);
        m
    }

    pub fn encode_attributes(&self, attrs: &AttributeImage) -> Result<Mat> {
        let hot = attrs.one_hot()?;
        let mut out = self.positional.clone();
        for (c, map) in self.maps.iter().enumerate() {
            let mut row = out.row_mut(c);
            for (k, &x) in hot.iter().enumerate() {
                if x != 0.0 {
                    row.scaled_add(x, &map.row(k));
                }
            }
        }
        normalize_rows_inplace(&mut out);
        Ok(out)
    }
}

impl ImageEncoder for StubImageEncoder {
    fn backbone_id(&self) -> &str {
        &self.id
    }

    fn penultimate(&self, image: &ImageData) -> Result<Mat> {
        match image {
            ImageData::Attributes(a) => self.encode_attributes(a),
            ImageData::Pixels(_) => Err(Error::Backbone(
                "the stub image encoder only accepts attribute records; use the full profile with an image adapter for pixel data".into(),
            )),
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Seeded per-word embeddings plus positional offsets.
pub struct StubTextEncoder {
    id: String,
    seed: u64,
    dim: usize,
    positional: Mat,
}

impl StubTextEncoder {
    pub fn new(seed: u64, len: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&[b"stub-text", &seed.to_le_bytes()]));
        Self {
            id: format!("stub-text-s{seed}-l{len}-d{dim}"),
            seed,
            dim,
            positional: uniform(&mut rng, (len, dim), 0.5),
        }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&[
            b"stub-word",
            &self.seed.to_le_bytes(),
            word.as_bytes(),
        ]));
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl TextEncoder for StubTextEncoder {
    fn backbone_id(&self) -> &str {
        &self.id
    }

    fn penultimate(&self, text: &str) -> Result<TextTokens> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::Backbone(format!("text {text:?} has no tokens")));
        }
        let len = self.positional.nrows();
        let mut features = Array2::zeros((len, self.dim));
        let mut valid = vec![false; len];
        for (i, w) in words.iter().take(len).enumerate() {
            let v = self.word_vector(w);
            let mut row = features.row_mut(i);
            for j in 0..self.dim {
                row[j] = v[j] + self.positional[[i, j]];
            }
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
            valid[i] = true;
        }
        Ok(TextTokens { features, valid })
    }
}

/// Emits the dominant attribute words, e.g. `"a red striped dog"`.
pub struct StubCaptioner;

impl Captioner for StubCaptioner {
    fn model_id(&self) -> &str {
        "stub-captioner"
    }

    fn caption(&self, image: &ImageData) -> Result<String> {
        let ImageData::Attributes(a) = image else {
            return Err(Error::Backbone("the stub captioner only accepts attribute records".into()));
        };
        a.indices()?;
        let words: Vec<&str> = [Slot::Color, Slot::Pattern, Slot::Object]
            .into_iter()
            .filter_map(|s| a.get(s))
            .collect();
        if words.is_empty() {
            Ok("an empty scene".into())
        } else {
            Ok(format!("a {}", words.join(" ")))
        }
    }
}

/// Keeps the slots named in the caption and zeroes the rest.
pub struct StubSegmenter;

impl Segmenter for StubSegmenter {
    fn model_id(&self) -> &str {
        "stub-segmenter"
    }

    fn segment(&self, image: &ImageData, caption: &str) -> Result<ImageData> {
        let ImageData::Attributes(a) = image else {
            return Err(Error::Backbone("the stub segmenter only accepts attribute records".into()));
        };
        a.indices()?;
        let words = tokenize(caption);
        let mut out = AttributeImage::default();
        for slot in Slot::ALL {
            if let Some(v) = a.get(slot) {
                if words.iter().any(|w| w == v) {
                    out.set(slot, Some(v.to_string()));
                }
            }
        }
        Ok(ImageData::Attributes(out))
    }
}

/// How a [`FinalBlock`] is initialised.
#[derive(Clone, Debug)]
pub enum FinalInit {
    Seeded(u64),
    Weights { w: Mat, b: Mat, proj: Mat },
}

/// Last encoder block plus projection to the joint width:
/// `normalize(pool(tanh(X·W + b)) · proj)`.
#[derive(Clone, Copy, Debug)]
pub struct FinalBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub proj: ParamId,
}

impl FinalBlock {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: &FinalInit,
    ) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let block = match init {
            FinalInit::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&[
                    prefix.as_bytes(),
                    &seed.to_le_bytes(),
                ]));
                FinalBlock {
                    w: store.add_glorot(format!("{prefix}.w"), g, in_dim, in_dim, &mut rng),
                    b: store.add_zeros(format!("{prefix}.b"), g, (1, in_dim)),
                    proj: store.add_glorot(format!("{prefix}.proj"), g, in_dim, out_dim, &mut rng),
                }
            }
            FinalInit::Weights { w, b, proj } => {
                let expect = [
                    ("w", w.dim(), (in_dim, in_dim)),
                    ("b", b.dim(), (1, in_dim)),
                    ("proj", proj.dim(), (in_dim, out_dim)),
                ];
                for (name, got, want) in expect {
                    if got != want {
                        return Err(Error::Shape {
                            role: format!("{prefix}.{name}"),
                            expected: want,
                            got,
                        });
                    }
                }
                FinalBlock {
                    w: store.add(format!("{prefix}.w"), g, w.clone()),
                    b: store.add(format!("{prefix}.b"), g, b.clone()),
                    proj: store.add(format!("{prefix}.proj"), g, proj.clone()),
                }
            }
        };
        Ok(block)
    }

    /// `tokens` is `n×in_dim`; `pool_weights`, when given, is a `1×n` row of
    /// pooling weights (e.g. a normalised padding mask), otherwise rows are
    /// averaged.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var, pool_weights: Option<Var>) -> Var {
        let h = g.matmul(tokens, p.var(self.w));
        let h = g.add_row(h, p.var(self.b));
        let h = g.tanh(h);
        let pooled = match pool_weights {
            Some(wts) => g.matmul(wts, h),
            None => g.mean_rows(h),
        };
        let z = g.matmul(pooled, p.var(self.proj));
        g.normalize_rows(z)
    }
}

/// Pooling weights that average the valid positions of `tokens`.
pub fn mask_weights(tokens: &TextTokens) -> Mat {
    let n = tokens.valid_count().max(1) as f64;
    Array2::from_shape_fn((1, tokens.valid.len()), |(_, j)| {
        if tokens.valid[j] {
            1.0 / n
        } else {
            0.0
        }
    })
}

/// Every external model the pipeline needs, plus initial final-block weights.
pub struct Backbones {
    pub image: Box<dyn ImageEncoder>,
    pub text: Box<dyn TextEncoder>,
    pub captioner: Box<dyn Captioner>,
    pub segmenter: Box<dyn Segmenter>,
    pub image_final: FinalInit,
    pub text_final: FinalInit,
}

impl Backbones {
    pub fn stub(cfg: &HyperConfig) -> Self {
        Backbones {
            image: Box::new(StubImageEncoder::new(
                cfg.seed,
                cfg.visual_channels,
                cfg.visual_dim,
            )),
            text: Box::new(StubTextEncoder::new(cfg.seed, cfg.text_len, cfg.text_dim)),
            captioner: Box::new(StubCaptioner),
            segmenter: Box::new(StubSegmenter),
            image_final: FinalInit::Seeded(cfg.seed),
            text_final: FinalInit::Seeded(cfg.seed),
        }
    }

    /// Stubs for the `stub` profile, adapters for `full`.
    pub fn for_config(cfg: &HyperConfig) -> Result<Self> {
        match cfg.profile {
            Profile::Stub => Ok(Self::stub(cfg)),
            Profile::Full => {
                let root = &cfg.checkpoint_root;
                let image = PatchLinearEncoder::open(cfg, root, &cfg.image_backbone)?;
                let text = HashedTokenEncoder::open(cfg, root, &cfg.text_backbone)?;
                let captioner = open_external(cfg, root, &cfg.captioner, AdapterKind::Captioner)?;
                let segmenter = open_external(cfg, root, &cfg.segmenter, AdapterKind::Segmenter)?;
                let image_final = image.final_init.clone();
                let text_final = text.final_init.clone();
                Ok(Backbones {
                    image: Box::new(image),
                    text: Box::new(text),
                    captioner: Box::new(CaptionerAdapter(captioner)),
                    segmenter: Box::new(SegmenterAdapter(segmenter)),
                    image_final,
                    text_final,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    ImageEncoder,
    TextEncoder,
    Captioner,
    Segmenter,
}

/// `adapter.json` inside a checkpoint directory.
#[derive(Clone, Debug, Deserialize)]
pub struct AdapterMeta {
    pub kind: AdapterKind,
    pub format: String,
    #[serde(default)]
    pub grid: usize,
    #[serde(default)]
    pub patch: usize,
    #[serde(default)]
    pub buckets: usize,
    #[serde(default)]
    pub tokens: usize,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub embed_dim: usize,
}

/// Locates `<root>/<model_ref>` and reads its metadata, refusing under the
/// stub profile.
pub fn locate_checkpoint(
    cfg: &HyperConfig,
    root: &Path,
    model_ref: &str,
    kind: AdapterKind,
) -> Result<(PathBuf, AdapterMeta)> {
    if cfg.profile == Profile::Stub {
        return Err(Error::Config(vec![format!(
            "the stub profile never loads adapters (requested {model_ref:?})"
        )]));
    }
    let dir = root.join(model_ref);
    let meta_path = dir.join("adapter.json");
    if !meta_path.is_file() {
        let what = match kind {
            AdapterKind::ImageEncoder => "image encoder",
            AdapterKind::TextEncoder => "text encoder",
            AdapterKind::Captioner => "captioner",
            AdapterKind::Segmenter => "segmenter",
        };
        return Err(Error::CheckpointMissing {
            id: model_ref.to_string(),
            root: root.to_path_buf(),
            hint: format!(
                "export the {what} to {}/adapter.json (+ weights.ckpt) or set the matching config key",
                dir.display()
            ),
        });
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: AdapterMeta = serde_json::from_str(&text)?;
    if meta.kind != kind {
        return Err(Error::Backbone(format!(
            "{model_ref}: adapter kind is {:?}, expected {kind:?}",
            meta.kind
        )));
    }
    Ok((dir, meta))
}

fn need<'a>(arc: &'a Archive, name: &str, dir: &Path, shape: (usize, usize)) -> Result<&'a Mat> {
    let m = arc.get(name).ok_or_else(|| Error::Archive {
        path: dir.join("weights.ckpt"),
        msg: format!("missing tensor {name}"),
    })?;
    if m.dim() != shape {
        return Err(Error::Shape {
            role: name.to_string(),
            expected: shape,
            got: m.dim(),
        });
    }
    Ok(m)
}

fn final_from_archive(arc: &Archive, dir: &Path, width: usize, embed: usize) -> Result<FinalInit> {
    Ok(FinalInit::Weights {
        w: need(arc, "final.w", dir, (width, width))?.clone(),
        b: need(arc, "final.b", dir, (1, width))?.clone(),
        proj: need(arc, "final.proj", dir, (width, embed))?.clone(),
    })
}

fn check_dims(model_ref: &str, pairs: &[(&str, usize, usize)]) -> Result<()> {
    let bad: Vec<String> = pairs
        .iter()
        .filter(|(_, ckpt, cfg)| ckpt != cfg)
        .map(|(n, ckpt, cfg)| format!("{n}: checkpoint {model_ref} has {ckpt}, config has {cfg}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad))
    }
}

/// Image encoder exported as a patch embedding: the image is resized to a
/// `grid·patch` square, each patch is flattened and mapped linearly to
/// `D_I`, and a positional matrix is added. `C = grid²`.
pub struct PatchLinearEncoder {
    id: String,
    grid: usize,
    patch: usize,
    weight: Mat,
    bias: Mat,
    positional: Mat,
    pub final_init: FinalInit,
}

impl PatchLinearEncoder {
    pub fn open(cfg: &HyperConfig, root: &Path, model_ref: &str) -> Result<Self> {
        let (dir, meta) = locate_checkpoint(cfg, root, model_ref, AdapterKind::ImageEncoder)?;
        if meta.format != "patch-linear" {
            return Err(Error::Backbone(format!(
                "{model_ref}: unsupported image adapter format {:?}",
                meta.format
            )));
        }
        let channels = meta.grid * meta.grid;
        check_dims(
            model_ref,
            &[
                ("visual_channels", channels, cfg.visual_channels),
                ("visual_dim", meta.width, cfg.visual_dim),
                ("embed_dim", meta.embed_dim, cfg.embed_dim),
            ],
        )?;
        let arc = Archive::load(&dir.join("weights.ckpt"))?;
        let fan = 3 * meta.patch * meta.patch;
        Ok(Self {
            id: model_ref.to_string(),
            grid: meta.grid,
            patch: meta.patch,
            weight: need(&arc, "patch.w", &dir, (fan, meta.width))?.clone(),
            bias: need(&arc, "patch.b", &dir, (1, meta.width))?.clone(),
            positional: need(&arc, "pos", &dir, (channels, meta.width))?.clone(),
            final_init: final_from_archive(&arc, &dir, meta.width, meta.embed_dim)?,
        })
    }
}

impl ImageEncoder for PatchLinearEncoder {
    fn backbone_id(&self) -> &str {
        &self.id
    }

    fn penultimate(&self, image: &ImageData) -> Result<Mat> {
        let ImageData::Pixels(img) = image else {
            return Err(Error::Backbone(format!(
                "{}: attribute records need the stub profile",
                self.id
            )));
        };
        let side = (self.grid * self.patch) as u32;
        let img = image::imageops::resize(img, side, side, image::imageops::FilterType::Triangle);
        let fan = 3 * self.patch * self.patch;
        let mut patches = Array2::zeros((self.grid * self.grid, fan));
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let row = gy * self.grid + gx;
                let mut k = 0;
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        let x = (gx * self.patch + px) as u32;
                        let y = (gy * self.patch + py) as u32;
                        for ch in img.get_pixel(x, y).0 {
                            patches[[row, k]] = ch as f64 / 255.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(patches.dot(&self.weight) + &self.bias + &self.positional)
    }
}

/// Text encoder exported as a hashed-bucket embedding table.
pub struct HashedTokenEncoder {
    id: String,
    table: Mat,
    positional: Mat,
    pub final_init: FinalInit,
}

impl HashedTokenEncoder {
    pub fn open(cfg: &HyperConfig, root: &Path, model_ref: &str) -> Result<Self> {
        let (dir, meta) = locate_checkpoint(cfg, root, model_ref, AdapterKind::TextEncoder)?;
        if meta.format != "hashed-token" {
            return Err(Error::Backbone(format!(
                "{model_ref}: unsupported text adapter format {:?}",
                meta.format
            )));
        }
        check_dims(
            model_ref,
            &[
                ("text_len", meta.tokens, cfg.text_len),
                ("text_dim", meta.width, cfg.text_dim),
                ("embed_dim", meta.embed_dim, cfg.embed_dim),
            ],
        )?;
        let arc = Archive::load(&dir.join("weights.ckpt"))?;
        Ok(Self {
            id: model_ref.to_string(),
            table: need(&arc, "embed", &dir, (meta.buckets.max(1), meta.width))?.clone(),
            positional: need(&arc, "pos", &dir, (meta.tokens, meta.width))?.clone(),
            final_init: final_from_archive(&arc, &dir, meta.width, meta.embed_dim)?,
        })
    }
}

impl TextEncoder for HashedTokenEncoder {
    fn backbone_id(&self) -> &str {
        &self.id
    }

    fn penultimate(&self, text: &str) -> Result<TextTokens> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::Backbone(format!("text {text:?} has no tokens")));
        }
        let (len, width) = self.positional.dim();
        let mut features = Array2::zeros((len, width));
        let mut valid = vec![false; len];
        for (i, w) in words.iter().take(len).enumerate() {
            let bucket = (stable_u64(&[w.as_bytes()]) % self.table.nrows() as u64) as usize;
            let row = &self.table.row(bucket) + &self.positional.row(i);
            features.slice_mut(s![i, ..]).assign(&row);
            valid[i] = true;
        }
        Ok(TextTokens { features, valid })
    }
}

/// Captioner or segmenter checkpoint. These run in an external runtime;
/// the adapter validates the checkpoint and reports what is required.
pub struct ExternalModel {
    id: String,
    format: String,
}

fn open_external(
    cfg: &HyperConfig,
    root: &Path,
    model_ref: &str,
    kind: AdapterKind,
) -> Result<ExternalModel> {
    let (_, meta) = locate_checkpoint(cfg, root, model_ref, kind)?;
    Ok(ExternalModel {
        id: model_ref.to_string(),
        format: meta.format,
    })
}

impl ExternalModel {
    fn unavailable(&self) -> Error {
        Error::Backbone(format!(
            "{}: format {:?} needs an external inference runtime; precompute captions and masks into the preprocess cache",
            self.id, self.format
        ))
    }
}

struct CaptionerAdapter(ExternalModel);

impl Captioner for CaptionerAdapter {
    fn model_id(&self) -> &str {
        &self.0.id
    }
    fn caption(&self, _image: &ImageData) -> Result<String> {
        Err(self.0.unavailable())
    }
}

struct SegmenterAdapter(ExternalModel);

impl Segmenter for SegmenterAdapter {
    fn model_id(&self) -> &str {
        &self.0.id
    }
    fn segment(&self, _image: &ImageData, _caption: &str) -> Result<ImageData> {
        Err(self.0.unavailable())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dog() -> AttributeImage {
        AttributeImage {
            object: Some("dog".into()),
            color: Some("white".into()),
            pattern: Some("plain".into()),
            background: Some("tree".into()),
            clutter: Some("leaves".into()),
        }
    }

    #[test]
    fn stub_image_encode_is_deterministic() {
        let e = StubImageEncoder::new(7, 5, 32);
        let a = e.encode_attributes(&dog()).unwrap();
        let b = StubImageEncoder::new(7, 5, 32).encode_attributes(&dog()).unwrap();
        let bits = |m: &Mat| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.dim(), (5, 32));
        for row in a.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_attribute_change_changes_output() {
        let e = StubImageEncoder::new(7, 5, 32);
        let mut other = dog();
        other.color = Some("red".into());
        let diff = e.encode_attributes(&dog()).unwrap() - e.encode_attributes(&other).unwrap();
        assert!(diff.iter().map(|x| x * x).sum::<f64>() > 0.0);
    }

    #[test]
    fn zeroed_record_gives_bias_matrix() {
        let e = StubImageEncoder::new(3, 5, 32);
        let out = e.encode_attributes(&AttributeImage::default()).unwrap();
        // closed form: each row is pos_c / |pos_c|
        let mut expected = e.positional.clone();
        for mut r in expected.rows_mut() {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.mapv_inplace(|x| x / n);
        }
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out, e.bias_matrix());
    }

    #[test]
    fn distinct_seeds_give_distinct_maps() {
        let a = StubImageEncoder::new(1, 5, 32).encode_attributes(&dog()).unwrap();
        let b = StubImageEncoder::new(2, 5, 32).encode_attributes(&dog()).unwrap();
        assert_ne!(a, b);
        let t1 = StubTextEncoder::new(1, 8, 24).penultimate("make it red").unwrap();
        let t2 = StubTextEncoder::new(2, 8, 24).penultimate("make it red").unwrap();
        assert_ne!(t1.features, t2.features);
    }

    #[test]
    fn unknown_vocabulary_is_an_error() {
        let mut a = dog();
        a.object = Some("unicorn".into());
        let e = StubImageEncoder::new(0, 5, 32);
        assert!(matches!(
            e.penultimate(&ImageData::Attributes(a)),
            Err(Error::UnknownAttribute { .. })
        ));
    }

    #[test]
    fn text_is_padded_and_truncated() {
        let e = StubTextEncoder::new(0, 8, 24);
        let short = e.penultimate("change color to red").unwrap();
        assert_eq!(short.features.dim(), (8, 24));
        assert_eq!(short.valid, [true, true, true, true, false, false, false, false]);
        assert!(short.features.row(5).iter().all(|x| *x == 0.0));
        let long = e
            .penultimate("one two three four five six seven eight nine ten")
            .unwrap();
        assert_eq!(long.valid_count(), 8);
        assert!(e.penultimate("  ... ").is_err());
    }

    #[test]
    fn stub_caption_and_segmentation_keep_dominant_portion() {
        let img = ImageData::Attributes(dog());
        let cap = StubCaptioner.caption(&img).unwrap();
        assert_eq!(cap, "a white plain dog");
        let ImageData::Attributes(seg) = StubSegmenter.segment(&img, &cap).unwrap() else {
            panic!()
        };
        assert_eq!(seg.object.as_deref(), Some("dog"));
        assert_eq!(seg.background, None);
        assert_eq!(seg.clutter, None);
    }

    #[test]
    fn final_block_outputs_unit_rows() {
        let mut store = ParamStore::new();
        let fb = FinalBlock::register(&mut store, "img", 32, 16, &FinalInit::Seeded(1)).unwrap();
        let e = StubImageEncoder::new(1, 5, 32);
        let x = e.encode_attributes(&dog()).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let xv = g.constant(x);
        let out = fb.forward(&mut g, &p, xv, None);
        let v = g.value(out);
        assert_eq!(v.dim(), (1, 16));
        assert!((v.row(0).dot(&v.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stub_profile_refuses_adapters() {
        let cfg = HyperConfig::stub();
        let err = locate_checkpoint(&cfg, Path::new("/nonexistent"), "x", AdapterKind::ImageEncoder)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_checkpoint_names_expected_id() {
        let cfg = HyperConfig::full();
        let err = Backbones::for_config(&cfg).err().unwrap();
        match err {
            Error::CheckpointMissing { id, .. } => assert_eq!(id, cfg.image_backbone),
            other => panic!("{other}"),
        }
    }
}
