//! Desk-scale synthetic triplets whose ground truth is fixed by
//! construction: the target is the reference with the dominant attributes
//! named by the text changed, plus optional noise resampling.

use std::collections::{BTreeMap, BTreeSet};

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AttributeImage, DatasetManifest, ImageSource, QueryTriplet, ReportStyle, Slot, Split};
use crate::error::{Error, Result};
use crate::util::stable_u64;

/// `(train, val, test)` sizes for `n` triplets: 70% / 15% / rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = 70 * n / 100;
    let val = 15 * n / 100;
    (train, val, n - train - val)
}

fn split_of(i: usize, n: usize) -> Split {
    let (train, val, _) = split_sizes(n);
    if i < train {
        Split::Train
    } else if i < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

fn random_image(rng: &mut ChaCha8Rng) -> AttributeImage {
    let mut a = AttributeImage::default();
    for slot in Slot::ALL {
        a.set(slot, Some(slot.vocab().choose(rng).expect("non-empty").to_string()));
    }
    a
}

/// Text for a list of `(slot, new value)` edits, e.g. `"change color to
/// red and object to car"`; two edits fit in eight tokens.
pub fn edit_text(edits: &[(Slot, &str)]) -> String {
    let parts: Vec<String> = edits
        .iter()
        .map(|(s, v)| format!("{} to {v}", s.name()))
        .collect();
    format!("change {}", parts.join(" and "))
}

/// Generates `n` triplets. Dominant attributes and edits come from one
/// random stream and noise decisions from another, so changing
/// `noise_level` at a fixed seed only changes noise attributes.
pub fn gen_synthetic(n: usize, seed: u64, noise_level: f64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::Config(vec![format!("noise level {noise_level} outside [0, 1]")]));
    }
    let mut main = ChaCha8Rng::seed_from_u64(stable_u64(&[b"synth-main", &seed.to_le_bytes()]));
    let mut noise = ChaCha8Rng::seed_from_u64(stable_u64(&[b"synth-noise", &seed.to_le_bytes()]));
    let mut m = DatasetManifest::empty("synthetic");
    m.report_style = ReportStyle::Generic;
    let mut galleries: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for i in 0..n {
        let reference = random_image(&mut main);
        let count = main.random_range(1..=2);
        let mut slots = Slot::DOMINANT.to_vec();
        slots.shuffle(&mut main);
        slots.truncate(count);
        slots.sort();
        let mut target = reference.clone();
        let mut edits = Vec::new();
        for slot in slots {
            let current = reference.get(slot).expect("full record");
            let choices: Vec<&str> = slot.vocab().iter().copied().filter(|v| *v != current).collect();
            let v = *choices.choose(&mut main).expect("vocab has alternatives");
            target.set(slot, Some(v.to_string()));
            edits.push((slot, v));
        }
        for slot in Slot::NOISE {
            let u: f64 = noise.random();
            let v = slot.vocab().choose(&mut noise).expect("non-empty");
            if u < noise_level {
                target.set(slot, Some(v.to_string()));
            }
        }
        let split = split_of(i, n);
        let (rid, tid) = (reference.image_id(), target.image_id());
        m.images.insert(rid.clone(), ImageSource::Attributes(reference));
        m.images.insert(tid.clone(), ImageSource::Attributes(target));
        let g = galleries.entry(split).or_default();
        g.insert(rid.clone());
        g.insert(tid.clone());
        m.triplets.push(QueryTriplet {
            query_id: format!("syn{i:05}"),
            ref_image_id: rid,
            mod_text: edit_text(&edits),
            target_image_id: tid,
            split,
            subset_ids: None,
        });
    }
    m.galleries = galleries
        .into_iter()
        .map(|(s, ids)| (s, ids.into_iter().collect()))
        .collect();
    Ok(m)
}

fn palette(word: &str) -> [u8; 3] {
    match word {
        "red" => [220, 40, 40],
        "blue" => [40, 70, 220],
        "green" => [40, 170, 60],
        "black" => [20, 20, 20],
        "white" => [245, 245, 245],
        "yellow" => [235, 215, 40],
        other => {
            let h = stable_u64(&[other.as_bytes()]).to_le_bytes();
            [h[0] / 2 + 64, h[1] / 2 + 64, h[2] / 2 + 64]
        }
    }
}

/// Deterministic `size×size` bitmap: noise slots tint the border region,
/// the dominant object is a centred patch in its colour and pattern.
pub fn render(a: &AttributeImage, size: u32) -> RgbImage {
    let bg = a.background.as_deref().map_or([0, 0, 0], palette);
    let clutter = a.clutter.as_deref().map(palette);
    let fg = a.color.as_deref().map(palette);
    let object = a.object.as_deref().map_or(0, |o| (stable_u64(&[o.as_bytes()]) % 3) as u32);
    let pattern = a.pattern.as_deref().unwrap_or("plain");
    let (lo, hi) = (size / 4, size - size / 4);
    RgbImage::from_fn(size, size, |x, y| {
        let inside = match object {
            0 => x >= lo && x < hi && y >= lo && y < hi,
            1 => {
                let (cx, cy, r) = (size as i64 / 2, size as i64 / 2, (hi - lo) as i64 / 2);
                let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                dx * dx + dy * dy <= r * r
            }
            _ => y >= lo && y < hi && x >= lo + (hi - y) / 2 && x < hi - (hi - y) / 2 + (hi - lo) / 2,
        };
        if let (true, Some(c)) = (inside, fg) {
            let off = match pattern {
                "striped" => (y / 3) % 2 == 0,
                "dotted" => x % 4 == 0 && y % 4 == 0,
                "checked" => ((x / 4) + (y / 4)) % 2 == 0,
                "floral" => (x * 7 + y * 3) % 11 == 0,
                _ => false,
            };
            return Rgb(if off { [c[0] / 2, c[1] / 2, c[2] / 2] } else { c });
        }
        match clutter {
            Some(c) if (x * 5 + y * 11) % 13 == 0 => Rgb(c),
            _ => Rgb(bg),
        }
    })
}
