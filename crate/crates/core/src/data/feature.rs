use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::HyperConfig;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Model dimensions that fix feature shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub focus: usize,
}

impl From<&HyperConfig> for Dims {
    fn from(c: &HyperConfig) -> Self {
        Dims {
            channels: c.visual_channels,
            visual_dim: c.visual_dim,
            embed_dim: c.embed_dim,
            text_len: c.text_len,
            text_dim: c.text_dim,
            focus: c.focus_channels,
        }
    }
}

/// Semantic role of a feature matrix; most roles pin the shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Penultimate image-encoder tokens, `C×D_I`.
    LocalVisual,
    /// Projected text tokens, `S×D`.
    LocalText,
    /// Penultimate text-encoder tokens, `S×D_T`.
    TextTokens,
    /// Three stacked global rows, `3×D`.
    GlobalStack,
    /// Cross-attention output; shape follows the query.
    Attended,
    /// Focus-mapped local visual feature after `FC_I`, `C×D`.
    FusedLocal,
    WeightedLocal,
    WeightedGlobal,
    /// Local then global projected rows, `2P×D`.
    Focused,
    Reduced,
    Composed,
    Pooled,
}

impl Role {
    pub fn expected_shape(self, d: &Dims) -> Option<(usize, usize)> {
        use Role::*;
        match self {
            LocalVisual => Some((d.channels, d.visual_dim)),
            LocalText => Some((d.text_len, d.embed_dim)),
            TextTokens => Some((d.text_len, d.text_dim)),
            GlobalStack => Some((3, d.embed_dim)),
            Attended => None,
            FusedLocal => Some((d.channels, d.embed_dim)),
            WeightedLocal | WeightedGlobal | Reduced | Composed => Some((d.focus, d.embed_dim)),
            Focused => Some((2 * d.focus, d.embed_dim)),
            Pooled => Some((1, d.embed_dim)),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Checks `m` against the shape of `role` and that every entry is finite.
pub fn check_role(m: &Mat, role: Role, dims: &Dims) -> Result<()> {
    if let Some(expected) = role.expected_shape(dims) {
        if m.dim() != expected {
            return Err(Error::Shape {
                role: role.to_string(),
                expected,
                got: m.dim(),
            });
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(role.to_string()));
    }
    Ok(())
}

/// A real matrix tagged with its role. Construction enforces the role's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Mat,
    role: Role,
}

impl FeatureMatrix {
    pub fn new(data: Mat, role: Role, dims: &Dims) -> Result<Self> {
        check_role(&data, role, dims)?;
        Ok(Self { data, role })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn into_data(self) -> Mat {
        self.data
    }
}
