//! The full network: encoder final blocks, focus mapping, revision, and the
//! batch objective, all parameters held in one [`ParamStore`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::backbones::{mask_weights, Backbones, FinalBlock, FinalInit, TextTokens};
use crate::data::{validate_config, AblationFlag, Dims, FeatureMatrix, HyperConfig, Role};
use crate::error::{Error, Result};
use crate::focus::{
    focused_g, logit_mask, mean_project_g, mgfp_g, tfm_g, vfm_global_g, vfm_local_g, FocusMapParams, Stream,
};
use crate::objective::{total_loss_g, LossVars, ObjectiveTerms};
use crate::preprocess::PreparedImage;
use crate::revision::{compose_g, reduce_g, revision_weights_g, RevisionParams};
use crate::tensor::{Archive, Bound, Graph, Mat, ParamGroup, ParamStore, Var};
use crate::util::{sha256_hex, stable_u64};

/// Parameter handles of every learned map.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub image_final: FinalBlock,
    pub text_final: FinalBlock,
    pub focus: FocusMapParams,
    pub revision: RevisionParams,
}

/// Penultimate features of an image and of its dominant segmentation.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures<'a> {
    pub local: &'a Mat,
    pub seg_local: &'a Mat,
}

impl<'a> From<&'a PreparedImage> for ImageFeatures<'a> {
    fn from(p: &'a PreparedImage) -> Self {
        Self {
            local: &p.local,
            seg_local: &p.seg_local,
        }
    }
}

/// One training triplet with all encoder inputs resolved.
#[derive(Clone, Debug)]
pub struct Example {
    pub query_id: String,
    pub reference: PreparedImage,
    pub text: TextTokens,
    pub target: PreparedImage,
}

/// Which stages run on a visual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct StageSwitch {
    mapping: bool,
    projection: bool,
}

/// Graph nodes of one query.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub reference: Var,
    pub modification: Var,
    pub composed: Var,
    /// `None` when revision is ablated.
    pub gates: Option<(Var, Var)>,
}

pub struct FocusModel {
    pub cfg: HyperConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub layout: Layout,
}

impl FocusModel {
    pub fn new(cfg: &HyperConfig, image_final: &FinalInit, text_final: &FinalInit) -> Result<Self> {
        let cfg = validate_config(cfg.clone())?;
        let dims = Dims::from(&cfg);
        let mut store = ParamStore::new();
        let image_final = FinalBlock::register(&mut store, "image_final", dims.visual_dim, dims.embed_dim, image_final)?;
        let text_final = FinalBlock::register(&mut store, "text_final", dims.text_dim, dims.embed_dim, text_final)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&[b"head", &cfg.seed.to_le_bytes()]));
        let focus = FocusMapParams::register(&mut store, &dims, &mut rng);
        let revision = RevisionParams::register(&mut store, &dims, &mut rng);
        Ok(Self {
            cfg,
            dims,
            store,
            layout: Layout {
                image_final,
                text_final,
                focus,
                revision,
            },
        })
    }

    pub fn from_backbones(cfg: &HyperConfig, backbones: &Backbones) -> Result<Self> {
        Self::new(cfg, &backbones.image_final, &backbones.text_final)
    }

    /// Parameter groups that receive gradients.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        if self.cfg.train_backbone {
            vec![ParamGroup::Head, ParamGroup::Backbone]
        } else {
            vec![ParamGroup::Head]
        }
    }

    fn has(&self, f: AblationFlag) -> bool {
        self.cfg.has(f)
    }

    fn visual_switch(&self, stream: Stream) -> StageSwitch {
        let mut mapping = !(self.has(AblationFlag::NoFm) || self.has(AblationFlag::NoVfm));
        let mut projection = !self.has(AblationFlag::NoMgfp);
        if stream == Stream::Target {
            mapping &= !self.has(AblationFlag::NoTargetVfm);
            projection &= !self.has(AblationFlag::NoTargetMgfp);
        }
        StageSwitch { mapping, projection }
    }

    fn text_switch(&self) -> StageSwitch {
        StageSwitch {
            mapping: !(self.has(AblationFlag::NoFm) || self.has(AblationFlag::NoTfm)),
            projection: !self.has(AblationFlag::NoMgfp),
        }
    }

    fn check_image(&self, img: ImageFeatures) -> Result<()> {
        let want = (self.dims.channels, self.dims.visual_dim);
        for m in [img.local, img.seg_local] {
            if m.dim() != want {
                return Err(Error::Shape {
                    role: "local visual".into(),
                    expected: want,
                    got: m.dim(),
                });
            }
        }
        Ok(())
    }

    fn check_text(&self, t: &TextTokens) -> Result<()> {
        let want = (self.dims.text_len, self.dims.text_dim);
        if t.features.dim() != want || t.valid.len() != want.0 {
            return Err(Error::Shape {
                role: "text tokens".into(),
                expected: want,
                got: t.features.dim(),
            });
        }
        Ok(())
    }

    /// Focused `2P×D` feature of a reference or target image.
    pub fn visual_g(&self, g: &mut Graph, p: &Bound, img: ImageFeatures, stream: Stream) -> Var {
        let vf = &self.layout.focus.visual;
        let fin = &self.layout.image_final;
        let sw = self.visual_switch(stream);
        let local = g.constant(img.local.clone());
        let (mapped, global) = if sw.mapping {
            let seg = g.constant(img.seg_local.clone());
            let (_, mapped) = vfm_local_g(g, p, vf, local, seg);
            let global = vfm_global_g(g, p, vf, fin, local, seg, mapped);
            (mapped, global)
        } else {
            let h = g.matmul(local, p.var(vf.fc_w));
            let mapped = g.add_row(h, p.var(vf.fc_b));
            let raw = fin.forward(g, p, local, None);
            let b = g.matmul(mapped, p.var(vf.bridge_w));
            let b = g.add_row(b, p.var(vf.bridge_b));
            let fused = fin.forward(g, p, b, None);
            (mapped, g.concat_rows(&[raw, raw, fused]))
        };
        let proj = self.layout.focus.projections(stream);
        let (wl, wg) = if sw.projection {
            (
                mgfp_g(g, p, &proj.local, mapped, None).0,
                mgfp_g(g, p, &proj.global, global, None).0,
            )
        } else {
            (
                mean_project_g(g, mapped, self.dims.focus, None),
                mean_project_g(g, global, self.dims.focus, None),
            )
        };
        focused_g(g, wl, wg)
    }

    /// Focused `2P×D` feature of the modification text, guided by the
    /// reference image's segmentation.
    pub fn textual_g(&self, g: &mut Graph, p: &Bound, text: &TextTokens, reference: ImageFeatures) -> Var {
        let tf = &self.layout.focus.textual;
        let sw = self.text_switch();
        let tokens = g.constant(text.features.clone());
        let pool = g.constant(mask_weights(text));
        let text_global = self.layout.text_final.forward(g, p, tokens, Some(pool));
        let (global, local) = if sw.mapping {
            let seg = g.constant(reference.seg_local.clone());
            let seg_global = self.layout.image_final.forward(g, p, seg, None);
            tfm_g(g, p, tf, text_global, seg_global, tokens)
        } else {
            let h = g.matmul(tokens, p.var(tf.fc_w));
            let local = g.add_row(h, p.var(tf.fc_b));
            (g.concat_rows(&[text_global, text_global, text_global]), local)
        };
        let proj = &self.layout.focus.modification;
        let (wl, wg) = if sw.projection {
            let mask = g.constant(logit_mask(&text.valid));
            (
                mgfp_g(g, p, &proj.local, local, Some(mask)).0,
                mgfp_g(g, p, &proj.global, global, None).0,
            )
        } else {
            (
                mean_project_g(g, local, self.dims.focus, Some(pool)),
                mean_project_g(g, global, self.dims.focus, None),
            )
        };
        focused_g(g, wl, wg)
    }

    pub fn query_g(&self, g: &mut Graph, p: &Bound, reference: ImageFeatures, text: &TextTokens) -> QueryVars {
        let rp = &self.layout.revision;
        let fr_full = self.visual_g(g, p, reference, Stream::Reference);
        let fm_full = self.textual_g(g, p, text, reference);
        let fr = reduce_g(g, p, rp.reduce_ref, fr_full);
        let fm = reduce_g(g, p, rp.reduce_mod, fm_full);
        let (composed, gates) = if self.has(AblationFlag::NoRevision) {
            (g.add(fr, fm), None)
        } else {
            let (a, b) = revision_weights_g(g, p, rp, fr, fm);
            (compose_g(g, a, b, fr, fm), Some((a, b)))
        };
        QueryVars {
            reference: fr_full,
            modification: fm_full,
            composed,
            gates,
        }
    }

    /// Batch objective over pooled composed and target features.
    pub fn batch_loss_g(&self, g: &mut Graph, p: &Bound, batch: &[Example]) -> Result<LossVars> {
        let terms = ObjectiveTerms::from_config(&self.cfg)?;
        let mut comp = Vec::with_capacity(batch.len());
        let mut tgt = Vec::with_capacity(batch.len());
        for ex in batch {
            let r = ImageFeatures::from(&ex.reference);
            let t = ImageFeatures::from(&ex.target);
            self.check_image(r)?;
            self.check_image(t)?;
            self.check_text(&ex.text)?;
            let q = self.query_g(g, p, r, &ex.text);
            comp.push(g.mean_rows(q.composed));
            let ft = self.visual_g(g, p, t, Stream::Target);
            tgt.push(g.mean_rows(ft));
        }
        if batch.is_empty() {
            return Err(Error::Batch("empty batch".into()));
        }
        let fc = g.concat_rows(&comp);
        let ft = g.concat_rows(&tgt);
        total_loss_g(g, fc, ft, &terms)
    }

    fn inference(&self) -> (Graph, Bound) {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, &[]);
        (g, p)
    }

    pub fn run_vfm(&self, img: ImageFeatures, stream: Stream) -> Result<FeatureMatrix> {
        self.check_image(img)?;
        let (mut g, p) = self.inference();
        let v = self.visual_g(&mut g, &p, img, stream);
        FeatureMatrix::new(g.value(v).clone(), Role::Focused, &self.dims)
    }

    pub fn run_tfm(&self, text: &TextTokens, reference: ImageFeatures) -> Result<FeatureMatrix> {
        self.check_image(reference)?;
        self.check_text(text)?;
        let (mut g, p) = self.inference();
        let v = self.textual_g(&mut g, &p, text, reference);
        FeatureMatrix::new(g.value(v).clone(), Role::Focused, &self.dims)
    }

    /// Composed `P×D` feature.
    pub fn compose_query(&self, reference: ImageFeatures, text: &TextTokens) -> Result<FeatureMatrix> {
        self.check_image(reference)?;
        self.check_text(text)?;
        let (mut g, p) = self.inference();
        let q = self.query_g(&mut g, &p, reference, text);
        FeatureMatrix::new(g.value(q.composed).clone(), Role::Composed, &self.dims)
    }

    /// Pooled composed feature, `1×D`.
    pub fn query_embedding(&self, reference: ImageFeatures, text: &TextTokens) -> Result<Mat> {
        let c = self.compose_query(reference, text)?;
        crate::objective::pool(c.data())
    }

    /// Pooled target focused feature, `1×D`.
    pub fn target_embedding(&self, img: ImageFeatures) -> Result<Mat> {
        let f = self.run_vfm(img, Stream::Target)?;
        crate::objective::pool(f.data())
    }

    /// Parameters and configuration as an archive.
    pub fn to_archive(&self, extra_meta: serde_json::Value) -> Archive {
        let mut meta = json!({ "config": self.cfg });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra_meta) {
            m.extend(extra);
        }
        Archive {
            meta,
            entries: self
                .store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds a model from [`FocusModel::to_archive`] output. Entries
    /// that do not name a parameter are ignored.
    pub fn from_archive(archive: &Archive, path: &Path) -> Result<Self> {
        let cfg: HyperConfig = serde_json::from_value(
            archive
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Archive {
                    path: path.to_path_buf(),
                    msg: "no config in metadata".into(),
                })?,
        )?;
        let seeded = FinalInit::Seeded(cfg.seed);
        let mut model = Self::new(&cfg, &seeded, &seeded)?;
        model.load_params(archive, path)?;
        Ok(model)
    }

    pub fn load_params(&mut self, archive: &Archive, path: &Path) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.entry(id).name.clone();
            let m = archive.get(&name).ok_or_else(|| Error::Archive {
                path: path.to_path_buf(),
                msg: format!("missing parameter {name}"),
            })?;
            if m.dim() != self.store.value(id).dim() {
                return Err(Error::Shape {
                    role: name,
                    expected: self.store.value(id).dim(),
                    got: m.dim(),
                });
            }
            *self.store.value_mut(id) = m.clone();
        }
        Ok(())
    }

    /// Content hash of the parameters, used to key embedding caches.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_archive(json!({})).encode())
    }
}
