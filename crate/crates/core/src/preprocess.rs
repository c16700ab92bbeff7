//! Dominant-portion segmentation with a persistent content-addressed cache.
//!
//! Layout under the cache root:
//!
//! ```text
//! index.tsv                          image_id \t content_hash, sorted by id
//! objects/<hash>/caption.txt         UTF-8 caption
//! objects/<hash>/segmented.json|png  masked image (attribute record or pixels)
//! objects/<hash>/local.<backbone>.fmat      penultimate features of the image
//! objects/<hash>/seg_local.<backbone>.fmat  penultimate features of the segmentation
//! objects/<hash>/digest.txt          SHA-256 over caption and segmented bytes
//! ```
//!
//! The content hash covers the source image bytes and the captioner and
//! segmenter ids, so swapping either model never reuses stale records.
//! Every file is written by atomic rename, and the digest is written last.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::backbones::{Captioner, ImageData, ImageEncoder, Segmenter};
use crate::data::{AttributeImage, DatasetManifest, ImageSource};
use crate::error::{Error, Result};
use crate::tensor::archive::{decode_matrix, encode_matrix};
use crate::tensor::Mat;
use crate::util::{atomic_write, sha256_hex};

/// Caption and dominant segmentation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationRecord {
    pub image_id: String,
    pub caption: String,
    pub segmented: ImageData,
    pub content_hash: String,
}

/// Cached record together with the penultimate features of both images.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub record: SegmentationRecord,
    pub local: Mat,
    pub seg_local: Mat,
}

/// Outcome counters of a preprocessing pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub failures: usize,
    pub failed: Vec<(String, String)>,
}

pub struct SegmentationModels<'a> {
    pub captioner: &'a dyn Captioner,
    pub segmenter: &'a dyn Segmenter,
}

pub struct PreprocessCache {
    root: PathBuf,
    index: Mutex<BTreeMap<String, String>>,
    model_calls: AtomicUsize,
}

fn load_source(source: &ImageSource) -> Result<(ImageData, Vec<u8>)> {
    match source {
        ImageSource::Attributes(a) => Ok((ImageData::Attributes(a.clone()), a.canonical_bytes())),
        ImageSource::Path(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let img = image::load_from_memory(&bytes)?.to_rgb8();
            Ok((ImageData::Pixels(img), bytes))
        }
    }
}

fn encode_image(img: &ImageData) -> Result<(&'static str, Vec<u8>)> {
    match img {
        ImageData::Attributes(a) => Ok(("segmented.json", a.canonical_bytes())),
        ImageData::Pixels(p) => {
            let mut buf = Cursor::new(Vec::new());
            p.write_to(&mut buf, image::ImageFormat::Png)?;
            Ok(("segmented.png", buf.into_inner()))
        }
    }
}

fn digest(caption: &[u8], segmented: &[u8]) -> String {
    let mut joined = caption.to_vec();
    joined.push(0);
    joined.extend_from_slice(segmented);
    sha256_hex(&joined)
}

fn spatial_size(img: &ImageData) -> Option<(u32, u32)> {
    match img {
        ImageData::Pixels(p) => Some(p.dimensions()),
        ImageData::Attributes(_) => None,
    }
}

impl PreprocessCache {
    /// Opens (or creates) a cache rooted at `root`, loading its index.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("objects")).map_err(|e| Error::io(&root, e))?;
        let mut index = BTreeMap::new();
        let index_path = root.join("index.tsv");
        if index_path.is_file() {
            let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            for (i, line) in text.lines().enumerate() {
                let Some((id, hash)) = line.split_once('\t') else {
                    return Err(Error::Parse {
                        path: index_path.clone(),
                        line: i + 1,
                        msg: "expected image_id<TAB>hash".into(),
                    });
                };
                index.insert(id.to_string(), hash.to_string());
            }
        }
        Ok(Self {
            root,
            index: Mutex::new(index),
            model_calls: AtomicUsize::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Captioner plus segmenter invocations made through this handle.
    pub fn model_calls(&self) -> usize {
        self.model_calls.load(Ordering::SeqCst)
    }

    pub fn hash_of(&self, image_id: &str) -> Option<String> {
        self.index.lock().unwrap().get(image_id).cloned()
    }

    fn object_dir(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(hash)
    }

    /// Writes the index atomically, sorted by image id.
    pub fn flush_index(&self) -> Result<()> {
        let index = self.index.lock().unwrap();
        let body: String = index.iter().map(|(id, h)| format!("{id}\t{h}\n")).collect();
        atomic_write(&self.root.join("index.tsv"), body.as_bytes())
    }

    /// Reads a stored record; `None` when absent or failing its digest.
    fn read_object(&self, image_id: &str, hash: &str) -> Option<SegmentationRecord> {
        let dir = self.object_dir(hash);
        let caption = fs::read(dir.join("caption.txt")).ok()?;
        let stored = fs::read_to_string(dir.join("digest.txt")).ok()?;
        let (seg_bytes, segmented) = if let Ok(b) = fs::read(dir.join("segmented.json")) {
            let a: AttributeImage = serde_json::from_slice(&b).ok()?;
            (b, ImageData::Attributes(a))
        } else {
            let b = fs::read(dir.join("segmented.png")).ok()?;
            let img = image::load_from_memory(&b).ok()?.to_rgb8();
            (b, ImageData::Pixels(img))
        };
        if digest(&caption, &seg_bytes) != stored.trim() {
            return None;
        }
        Some(SegmentationRecord {
            image_id: image_id.to_string(),
            caption: String::from_utf8(caption).ok()?,
            segmented,
            content_hash: hash.to_string(),
        })
    }

    /// Looks up the record of an already preprocessed image.
    pub fn lookup(&self, image_id: &str) -> Result<SegmentationRecord> {
        let hash = self
            .hash_of(image_id)
            .ok_or_else(|| Error::MissingSegmentation(image_id.to_string()))?;
        self.read_object(image_id, &hash)
            .ok_or_else(|| Error::MissingSegmentation(image_id.to_string()))
    }

    /// Returns the cached record for `image_id`, computing it on a miss.
    /// The flag is `true` on a cache hit.
    pub fn segment_dominant(
        &self,
        image_id: &str,
        source: &ImageSource,
        models: &SegmentationModels<'_>,
    ) -> Result<(SegmentationRecord, bool)> {
        let (image, bytes) = load_source(source)?;
        let mut keyed = bytes;
        for id in [models.captioner.model_id(), models.segmenter.model_id()] {
            keyed.push(0);
            keyed.extend_from_slice(id.as_bytes());
        }
        let hash = sha256_hex(&keyed);
        if let Some(rec) = self.read_object(image_id, &hash) {
            self.index
                .lock()
                .unwrap()
                .insert(image_id.to_string(), hash);
            return Ok((rec, true));
        }

        self.model_calls.fetch_add(1, Ordering::SeqCst);
        let caption = models.captioner.caption(&image)?;
        self.model_calls.fetch_add(1, Ordering::SeqCst);
        let segmented = models.segmenter.segment(&image, &caption)?;
        if spatial_size(&segmented) != spatial_size(&image) {
            return Err(Error::Backbone(format!(
                "segmenter changed the spatial size of {image_id}"
            )));
        }

        let dir = self.object_dir(&hash);
        let (seg_name, seg_bytes) = encode_image(&segmented)?;
        atomic_write(&dir.join("caption.txt"), caption.as_bytes())?;
        atomic_write(&dir.join(seg_name), &seg_bytes)?;
        atomic_write(
            &dir.join("digest.txt"),
            digest(caption.as_bytes(), &seg_bytes).as_bytes(),
        )?;
        self.index
            .lock()
            .unwrap()
            .insert(image_id.to_string(), hash.clone());
        Ok((
            SegmentationRecord {
                image_id: image_id.to_string(),
                caption,
                segmented,
                content_hash: hash,
            },
            false,
        ))
    }

    fn feature_path(&self, hash: &str, stem: &str, backbone: &str) -> PathBuf {
        let safe: String = backbone
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.object_dir(hash).join(format!("{stem}.{safe}.fmat"))
    }

    fn cached_features(
        &self,
        path: &Path,
        compute: impl FnOnce() -> Result<Mat>,
    ) -> Result<Mat> {
        if let Ok(bytes) = fs::read(path) {
            if let Ok(m) = decode_matrix(&bytes, path) {
                return Ok(m);
            }
        }
        let m = compute()?;
        atomic_write(path, &encode_matrix(&m))?;
        Ok(m)
    }

    /// Record plus penultimate features of the image and its segmentation,
    /// computed once per backbone and stored beside the record.
    pub fn prepared(
        &self,
        image_id: &str,
        source: &ImageSource,
        encoder: &dyn ImageEncoder,
    ) -> Result<PreparedImage> {
        let record = self.lookup(image_id)?;
        let bid = encoder.backbone_id();
        let local = self.cached_features(
            &self.feature_path(&record.content_hash, "local", bid),
            || encoder.penultimate(&load_source(source)?.0),
        )?;
        let seg_local = self.cached_features(
            &self.feature_path(&record.content_hash, "seg_local", bid),
            || encoder.penultimate(&record.segmented),
        )?;
        Ok(PreparedImage {
            record,
            local,
            seg_local,
        })
    }
}

/// Segments every reference, target and gallery image. Failures are
/// recorded per image and do not stop the pass. When an encoder is given,
/// its penultimate features are cached as well.
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    cache: &PreprocessCache,
    models: &SegmentationModels<'_>,
    encoder: Option<&dyn ImageEncoder>,
    workers: usize,
) -> Result<CacheStats> {
    let ids = manifest.referenced_images();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Backbone(format!("thread pool: {e}")))?;
    let outcomes: Vec<(String, Result<bool>)> = pool.install(|| {
        ids.par_iter()
            .map(|id| {
                let res = (|| {
                    let source = manifest
                        .images
                        .get(id)
                        .ok_or_else(|| Error::MissingImages(vec![id.clone()]))?;
                    let (_, hit) = cache.segment_dominant(id, source, models)?;
                    if let Some(enc) = encoder {
                        cache.prepared(id, source, enc)?;
                    }
                    Ok(hit)
                })();
                (id.clone(), res)
            })
            .collect()
    });
    let mut stats = CacheStats::default();
    for (id, res) in outcomes {
        match res {
            Ok(true) => stats.hits += 1,
            Ok(false) => stats.misses += 1,
            Err(e) => {
                stats.failures += 1;
                stats.failed.push((id, e.to_string()));
            }
        }
    }
    cache.flush_index()?;
    Ok(stats)
}
