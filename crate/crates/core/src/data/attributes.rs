//! Attribute records standing in for images in the synthetic dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Object,
    Color,
    Pattern,
    Background,
    Clutter,
}

impl Slot {
    pub const ALL: [Slot; 5] = [
        Slot::Object,
        Slot::Color,
        Slot::Pattern,
        Slot::Background,
        Slot::Clutter,
    ];
    pub const DOMINANT: [Slot; 3] = [Slot::Object, Slot::Color, Slot::Pattern];
    pub const NOISE: [Slot; 2] = [Slot::Background, Slot::Clutter];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Object => "object",
            Slot::Color => "color",
            Slot::Pattern => "pattern",
            Slot::Background => "background",
            Slot::Clutter => "clutter",
        }
    }

    pub fn vocab(self) -> &'static [&'static str] {
        match self {
            Slot::Object => &["dog", "cat", "dress", "shirt", "shoe", "bag", "hat", "car"],
            Slot::Color => &["red", "blue", "green", "black", "white", "yellow"],
            Slot::Pattern => &["plain", "striped", "dotted", "checked", "floral"],
            Slot::Background => &["tree", "beach", "street", "snow", "room"],
            Slot::Clutter => &["leaves", "people", "boxes", "bench", "rocks"],
        }
    }

    pub fn is_dominant(self) -> bool {
        Slot::DOMINANT.contains(&self)
    }

    /// Offset of this slot's block in the concatenated one-hot vector.
    pub fn offset(self) -> usize {
        Slot::ALL
            .iter()
            .take_while(|s| **s != self)
            .map(|s| s.vocab().len())
            .sum()
    }
}

/// Total length of the concatenated one-hot encoding.
pub fn vocab_size() -> usize {
    Slot::ALL.iter().map(|s| s.vocab().len()).sum()
}

/// An image described by attributes. `None` marks a zeroed (masked) slot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeImage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clutter: Option<String>,
}

impl AttributeImage {
    pub fn get(&self, slot: Slot) -> Option<&str> {
        match slot {
            Slot::Object => self.object.as_deref(),
            Slot::Color => self.color.as_deref(),
            Slot::Pattern => self.pattern.as_deref(),
            Slot::Background => self.background.as_deref(),
            Slot::Clutter => self.clutter.as_deref(),
        }
    }

    pub fn set(&mut self, slot: Slot, value: Option<String>) {
        let field = match slot {
            Slot::Object => &mut self.object,
            Slot::Color => &mut self.color,
            Slot::Pattern => &mut self.pattern,
            Slot::Background => &mut self.background,
            Slot::Clutter => &mut self.clutter,
        };
        *field = value;
    }

    /// Vocabulary index of every present slot.
    pub fn indices(&self) -> Result<Vec<(Slot, usize)>> {
        let mut out = Vec::new();
        for slot in Slot::ALL {
            if let Some(v) = self.get(slot) {
                let idx = slot
                    .vocab()
                    .iter()
                    .position(|w| *w == v)
                    .ok_or_else(|| Error::UnknownAttribute {
                        slot: slot.name(),
                        value: v.to_string(),
                    })?;
                out.push((slot, idx));
            }
        }
        Ok(out)
    }

    pub fn one_hot(&self) -> Result<Vec<f64>> {
        let mut v = vec![0.0; vocab_size()];
        for (slot, idx) in self.indices()? {
            v[slot.offset() + idx] = 1.0;
        }
        Ok(v)
    }

    /// Canonical serialisation; identical records give identical bytes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("attribute record serializes")
    }

    /// Content-derived id, stable across file moves and runs.
    pub fn image_id(&self) -> String {
        format!("syn-{}", &sha256_hex(&self.canonical_bytes())[..16])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AttributeImage {
        AttributeImage {
            object: Some("dog".into()),
            color: Some("red".into()),
            pattern: Some("plain".into()),
            background: Some("tree".into()),
            clutter: Some("rocks".into()),
        }
    }

    #[test]
    fn one_hot_marks_each_present_slot() {
        let v = sample().one_hot().unwrap();
        assert_eq!(v.len(), vocab_size());
        assert_eq!(v.iter().sum::<f64>(), 5.0);
        assert_eq!(AttributeImage::default().one_hot().unwrap().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn unknown_value_rejected() {
        let mut a = sample();
        a.color = Some("mauve".into());
        assert!(matches!(a.one_hot(), Err(Error::UnknownAttribute { slot: "color", .. })));
    }

    #[test]
    fn id_is_content_derived() {
        assert_eq!(sample().image_id(), sample().image_id());
        let mut other = sample();
        other.clutter = None;
        assert_ne!(sample().image_id(), other.image_id());
        assert!(sample().image_id().starts_with("syn-"));
    }
}
