//! Dataset manifests: triplets, the image index, and per-split galleries.
//!
//! The normalized on-disk layout is a directory holding
//!
//! ```text
//! manifest.json        {"name": ..., "format_version": 1}
//! images.jsonl         {"image_id": ..., "path": ...} or {"image_id": ..., "attributes": {...}}
//! train.jsonl          one triplet per line
//! val.jsonl
//! test.jsonl
//! gallery.<split>.txt  one image id per line
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::attributes::AttributeImage;
use crate::error::{Error, Result};
use crate::util::atomic_write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(vec![format!("unknown split {other:?}")])),
        }
    }
}

/// A reference image, a modification text and the target it should retrieve.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTriplet {
    pub query_id: String,
    pub ref_image_id: String,
    pub mod_text: String,
    pub target_image_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
}

impl QueryTriplet {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| {
            Err(Error::Triplet {
                id: self.query_id.clone(),
                msg: msg.to_string(),
            })
        };
        if self.ref_image_id == self.target_image_id {
            return fail("reference and target are the same image");
        }
        if self.mod_text.trim().is_empty() {
            return fail("empty modification text");
        }
        if let Some(subset) = &self.subset_ids {
            if !subset.contains(&self.target_image_id) {
                return fail("target is not a member of its subset");
            }
        }
        Ok(())
    }

    /// Prefix of the query id before the first `:`, used as a category.
    pub fn category(&self) -> Option<&str> {
        self.query_id.split_once(':').map(|(c, _)| c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Path(PathBuf),
    Attributes(AttributeImage),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    #[serde(flatten)]
    source: ImageSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestFormat {
    FashionIq,
    Shoes,
    Cirr,
    /// The normalized layout, as written by [`write_manifest`].
    Synthetic,
}

impl FromStr for ManifestFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fashioniq" => Ok(Self::FashionIq),
            "shoes" => Ok(Self::Shoes),
            "cirr" => Ok(Self::Cirr),
            "synthetic" | "normalized" => Ok(Self::Synthetic),
            other => Err(Error::Config(vec![format!("unknown manifest format {other:?}")])),
        }
    }
}

/// Which metric table a dataset reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStyle {
    FashionIq,
    Shoes,
    Cirr,
    Generic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub report_style: ReportStyle,
    pub images: BTreeMap<String, ImageSource>,
    pub triplets: Vec<QueryTriplet>,
    pub galleries: BTreeMap<Split, Vec<String>>,
}

impl DatasetManifest {
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            report_style: ReportStyle::Generic,
            images: BTreeMap::new(),
            triplets: Vec::new(),
            galleries: BTreeMap::new(),
        }
    }

    pub fn triplets_in(&self, split: Split) -> impl Iterator<Item = &QueryTriplet> {
        self.triplets.iter().filter(move |t| t.split == split)
    }

    pub fn gallery(&self, split: Split) -> &[String] {
        self.galleries.get(&split).map_or(&[], Vec::as_slice)
    }

    /// Unique reference and target ids across all splits, sorted.
    pub fn query_images(&self) -> Vec<String> {
        let set: BTreeSet<_> = self
            .triplets
            .iter()
            .flat_map(|t| [t.ref_image_id.clone(), t.target_image_id.clone()])
            .collect();
        set.into_iter().collect()
    }

    /// Every image referenced by a triplet or a gallery, sorted.
    pub fn referenced_images(&self) -> Vec<String> {
        let mut set: BTreeSet<_> = self.query_images().into_iter().collect();
        for g in self.galleries.values() {
            set.extend(g.iter().cloned());
        }
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut missing = BTreeSet::new();
        for t in &self.triplets {
            t.validate()?;
            for id in [&t.ref_image_id, &t.target_image_id]
                .into_iter()
                .chain(t.subset_ids.iter().flatten())
            {
                if !self.images.contains_key(id) {
                    missing.insert(id.clone());
                }
            }
        }
        for g in self.galleries.values() {
            for id in g {
                if !self.images.contains_key(id) {
                    missing.insert(id.clone());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingImages(missing.into_iter().collect()));
        }
        for split in Split::ALL {
            let gallery: BTreeSet<_> = self.gallery(split).iter().collect();
            if let Some(t) = self
                .triplets_in(split)
                .find(|t| !gallery.contains(&t.target_image_id))
            {
                return Err(Error::Triplet {
                    id: t.query_id.clone(),
                    msg: format!("target missing from the {split} gallery"),
                });
            }
        }
        Ok(())
    }
}

fn parse_err(path: &Path, line: usize, msg: impl fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e))?);
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    name: String,
    format_version: u32,
    #[serde(default = "generic_style")]
    report_style: ReportStyle,
}

fn generic_style() -> ReportStyle {
    ReportStyle::Generic
}

/// Writes the normalized layout into `dir`.
pub fn write_manifest(m: &DatasetManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = ManifestHeader {
        name: m.name.clone(),
        format_version: 1,
        report_style: m.report_style,
    };
    atomic_write(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&header)?,
    )?;
    let mut images = String::new();
    for (id, source) in &m.images {
        let line = ImageLine {
            image_id: id.clone(),
            source: source.clone(),
        };
        images.push_str(&serde_json::to_string(&line)?);
        images.push('\n');
    }
    atomic_write(&dir.join("images.jsonl"), images.as_bytes())?;
    for split in Split::ALL {
        let mut body = String::new();
        for t in m.triplets_in(split) {
            body.push_str(&serde_json::to_string(t)?);
            body.push('\n');
        }
        atomic_write(&dir.join(format!("{split}.jsonl")), body.as_bytes())?;
        let gallery: String = m.gallery(split).iter().map(|id| format!("{id}\n")).collect();
        atomic_write(&dir.join(format!("gallery.{split}.txt")), gallery.as_bytes())?;
    }
    Ok(())
}

fn load_normalized(dir: &Path) -> Result<DatasetManifest> {
    let header: ManifestHeader = read_json(&dir.join("manifest.json"))?;
    let mut m = DatasetManifest::empty(header.name);
    m.report_style = header.report_style;
    for line in read_jsonl::<ImageLine>(&dir.join("images.jsonl"))? {
        m.images.insert(line.image_id, line.source);
    }
    for split in Split::ALL {
        let path = dir.join(format!("{split}.jsonl"));
        let triplets: Vec<QueryTriplet> = read_jsonl(&path)?;
        for (i, t) in triplets.iter().enumerate() {
            if t.split != split {
                return Err(parse_err(
                    &path,
                    i + 1,
                    format!("record has split {} in the {split} file", t.split),
                ));
            }
        }
        m.triplets.extend(triplets);
        let gpath = dir.join(format!("gallery.{split}.txt"));
        let gallery = if gpath.exists() { read_lines(&gpath)? } else { Vec::new() };
        m.galleries.insert(split, gallery);
    }
    Ok(m)
}

/// Loads a dataset from its native layout into a validated manifest.
pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path does not exist"),
        ));
    }
    let m = match format {
        ManifestFormat::Synthetic => load_normalized(path)?,
        ManifestFormat::FashionIq => load_fashioniq(path)?,
        ManifestFormat::Shoes => load_shoes(path)?,
        ManifestFormat::Cirr => load_cirr(path)?,
    };
    m.validate()?;
    Ok(m)
}

/// Finds `<dir>/<stem>.{png,jpg,jpeg}`.
fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "PNG", "JPG"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Resolves image ids to files, failing with every missing id at once.
fn resolve_all(
    ids: &BTreeSet<String>,
    mut lookup: impl FnMut(&str) -> Option<PathBuf>,
) -> Result<BTreeMap<String, ImageSource>> {
    let mut images = BTreeMap::new();
    let mut missing = Vec::new();
    for id in ids {
        match lookup(id) {
            Some(p) => {
                images.insert(id.clone(), ImageSource::Path(p));
            }
            None => missing.push(id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(images)
    } else {
        Err(Error::MissingImages(missing))
    }
}

/// Joins the per-pair captions into a single modification text.
pub fn join_captions(captions: &[String]) -> String {
    captions
        .iter()
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .collect::<Vec<_>>()
        .join(" and ")
}

#[derive(Deserialize)]
struct FashionIqRecord {
    candidate: String,
    target: String,
    captions: Vec<String>,
}

/// `captions/cap.<category>.<split>.json`, `image_splits/split.<category>.<split>.json`,
/// `images/<id>.<ext>`.
fn load_fashioniq(root: &Path) -> Result<DatasetManifest> {
    let cap_dir = root.join("captions");
    let mut files: Vec<_> = fs::read_dir(&cap_dir)
        .map_err(|e| Error::io(&cap_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();

    let mut m = DatasetManifest::empty("fashioniq");
    m.report_style = ReportStyle::FashionIq;
    let mut ids = BTreeSet::new();
    let mut galleries: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for file in files {
        let name = file.file_name().unwrap().to_string_lossy().into_owned();
        let parts: Vec<_> = name.split('.').collect();
        let [_, category, split, _] = parts[..] else {
            continue;
        };
        let Ok(split) = split.parse::<Split>() else {
            continue;
        };
        let records: Vec<FashionIqRecord> = read_json(&file)?;
        for (i, r) in records.into_iter().enumerate() {
            ids.insert(r.candidate.clone());
            ids.insert(r.target.clone());
            let g = galleries.entry(split).or_default();
            g.insert(r.candidate.clone());
            g.insert(r.target.clone());
            m.triplets.push(QueryTriplet {
                query_id: format!("{category}:{split}:{i:05}"),
                ref_image_id: r.candidate,
                mod_text: join_captions(&r.captions),
                target_image_id: r.target,
                split,
                subset_ids: None,
            });
        }
        let split_file = root
            .join("image_splits")
            .join(format!("split.{category}.{split}.json"));
        if split_file.is_file() {
            let listed: Vec<String> = read_json(&split_file)?;
            ids.extend(listed.iter().cloned());
            galleries.entry(split).or_default().extend(listed);
        }
    }
    let img_dir = root.join("images");
    m.images = resolve_all(&ids, |id| find_image(&img_dir, id))?;
    m.galleries = galleries
        .into_iter()
        .map(|(s, g)| (s, g.into_iter().collect()))
        .collect();
    Ok(m)
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct ShoesRecord {
    image_name: String,
    reference_image_name: String,
    relative_caption: String,
}

fn index_images(dir: &Path, out: &mut HashMap<String, PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            index_images(&p, out)?;
        } else if let Some(name) = p.file_name() {
            out.entry(name.to_string_lossy().into_owned()).or_insert(p);
        }
    }
    Ok(())
}

/// `relative_captions_shoes.json`, `train_im_names.txt`, `eval_im_names.txt`,
/// images anywhere under `images/` keyed by file name.
fn load_shoes(root: &Path) -> Result<DatasetManifest> {
    let records: Vec<ShoesRecord> = read_json(&root.join("relative_captions_shoes.json"))?;
    let train: BTreeSet<String> = read_lines(&root.join("train_im_names.txt"))?
        .into_iter()
        .collect();
    let eval: BTreeSet<String> = read_lines(&root.join("eval_im_names.txt"))?
        .into_iter()
        .collect();
    let mut files = HashMap::new();
    index_images(&root.join("images"), &mut files)?;

    let mut m = DatasetManifest::empty("shoes");
    m.report_style = ReportStyle::Shoes;
    let mut ids: BTreeSet<String> = train.union(&eval).cloned().collect();
    for (i, r) in records.into_iter().enumerate() {
        let split = if train.contains(&r.image_name) {
            Split::Train
        } else {
            Split::Test
        };
        ids.insert(r.image_name.clone());
        ids.insert(r.reference_image_name.clone());
        m.triplets.push(QueryTriplet {
            query_id: format!("shoes:{split}:{i:05}"),
            ref_image_id: r.reference_image_name,
            mod_text: r.relative_caption.trim().to_string(),
            target_image_id: r.image_name,
            split,
            subset_ids: None,
        });
    }
    m.images = resolve_all(&ids, |id| files.get(id).cloned())?;
    let mut test_gallery: BTreeSet<String> = eval;
    test_gallery.extend(m.triplets_in(Split::Test).map(|t| t.target_image_id.clone()));
    let mut train_gallery = train;
    train_gallery.extend(m.triplets_in(Split::Train).map(|t| t.target_image_id.clone()));
    m.galleries.insert(Split::Train, train_gallery.into_iter().collect());
    m.galleries.insert(Split::Val, Vec::new());
    m.galleries.insert(Split::Test, test_gallery.into_iter().collect());
    Ok(m)
}

#[derive(Deserialize)]
struct CirrImgSet {
    members: Vec<String>,
}

#[derive(Deserialize)]
struct CirrRecord {
    pairid: u64,
    reference: String,
    target_hard: String,
    caption: String,
    img_set: CirrImgSet,
}

/// `captions/cap.rc2.{train,val}.json` and `image_splits/split.rc2.{train,val}.json`
/// (id → relative path, resolved against the root and `img_raw/`). The hidden
/// test split has no targets and is not loaded.
fn load_cirr(root: &Path) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::empty("cirr");
    m.report_style = ReportStyle::Cirr;
    let mut paths: BTreeMap<String, String> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for (file_split, split) in [("train", Split::Train), ("val", Split::Val)] {
        let cap = root.join("captions").join(format!("cap.rc2.{file_split}.json"));
        if !cap.is_file() {
            continue;
        }
        let records: Vec<CirrRecord> = read_json(&cap)?;
        for r in records {
            ids.insert(r.reference.clone());
            ids.insert(r.target_hard.clone());
            ids.extend(r.img_set.members.iter().cloned());
            m.triplets.push(QueryTriplet {
                query_id: format!("cirr:{split}:{}", r.pairid),
                ref_image_id: r.reference,
                mod_text: r.caption.trim().to_string(),
                target_image_id: r.target_hard,
                split,
                subset_ids: Some(r.img_set.members),
            });
        }
        let split_file = root
            .join("image_splits")
            .join(format!("split.rc2.{file_split}.json"));
        let listed: BTreeMap<String, String> = read_json(&split_file)?;
        ids.extend(listed.keys().cloned());
        m.galleries.insert(split, listed.keys().cloned().collect());
        paths.extend(listed);
    }
    m.images = resolve_all(&ids, |id| {
        let rel = paths.get(id)?;
        [root.join(rel), root.join("img_raw").join(rel)]
            .into_iter()
            .find(|p| p.is_file())
    })?;
    Ok(m)
}
