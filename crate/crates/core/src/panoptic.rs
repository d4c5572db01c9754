//! Panoptic maps, segment tables and the label space shared by the network
//! outputs, fusion and evaluation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment id reserved for unassigned pixels.
pub const VOID: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    #[serde(with = "int_flag")]
    pub isthing: bool,
}

/// COCO stores boolean flags as 0/1 integers.
pub(crate) mod int_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Flag {
            Int(u8),
            Bool(bool),
        }
        match Flag::deserialize(d)? {
            Flag::Int(0) | Flag::Bool(false) => Ok(false),
            Flag::Int(1) | Flag::Bool(true) => Ok(true),
            Flag::Int(n) => Err(serde::de::Error::custom(format!("flag must be 0 or 1, got {n}"))),
        }
    }
}

/// Category id -> category, as listed in an archive's `categories` table.
pub type CategoryTable = BTreeMap<u32, Category>;

pub fn category_table(categories: &[Category]) -> Result<CategoryTable> {
    let mut table = CategoryTable::new();
    for c in categories {
        if table.insert(c.id, c.clone()).is_some() {
            return Err(Error::Schema(format!("duplicate category id {}", c.id)));
        }
    }
    Ok(table)
}

/// Maps network channels to dataset category ids.
///
/// Classification channel `k` is thing category `things[k]`. Stuff channel
/// `c < stuff.len()` is stuff category `stuff[c]`; the extra last channel is
/// the `other` class that absorbs thing pixels in the stuff head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub things: Vec<u32>,
    pub stuff: Vec<u32>,
}

impl LabelSpace {
    /// Things `1..=k`, stuff `k+1..=k+s`.
    pub fn contiguous(thing_classes: usize, stuff_classes: usize) -> Self {
        let k = thing_classes as u32;
        Self { things: (1..=k).collect(), stuff: (k + 1..=k + stuff_classes as u32).collect() }
    }

    pub fn thing_index(&self, category_id: u32) -> Option<usize> {
        self.things.iter().position(|&c| c == category_id)
    }

    pub fn stuff_channels(&self) -> usize {
        self.stuff.len() + 1
    }

    pub fn other_channel(&self) -> usize {
        self.stuff.len()
    }

    pub fn categories(&self) -> Vec<Category> {
        let things = self.things.iter().map(|&id| Category { id, name: format!("thing_{id}"), isthing: true });
        let stuff = self.stuff.iter().map(|&id| Category { id, name: format!("stuff_{id}"), isthing: false });
        things.chain(stuff).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &id in self.things.iter().chain(&self.stuff) {
            if id == VOID || !seen.insert(id) {
                return Err(Error::invalid("label space", format!("category id {id} is void or repeated")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub category_id: u32,
    #[serde(with = "int_flag", default)]
    pub iscrowd: bool,
    /// Pixel count; 0 when not listed.
    #[serde(default)]
    pub area: u64,
    #[serde(skip)]
    pub isthing: bool,
    /// Confidence of the detection a thing segment came from; informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

/// Per-pixel segment ids plus the table describing each id.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PanopticMap {
    pub fn void(width: usize, height: usize) -> Self {
        Self { width, height, ids: vec![VOID; width * height], segments: Vec::new() }
    }

    pub fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Pixel count per id present in the raster, void included.
    pub fn id_counts(&self) -> BTreeMap<u32, u64> {
        let mut counts = BTreeMap::new();
        for &id in &self.ids {
            *counts.entry(id).or_insert(0) += 1;
        }
        counts
    }

    pub fn void_fraction(&self) -> f64 {
        if self.ids.is_empty() {
            return 0.0;
        }
        self.ids.iter().filter(|&&id| id == VOID).count() as f64 / self.ids.len() as f64
    }

    /// Checks the raster against the segment table: ids unique and non-void,
    /// every raster id listed, every listed area equal to its pixel count.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.width * self.height {
            return Err(Error::shape("panoptic map", format!("{}x{} raster", self.width, self.height), self.ids.len()));
        }
        let mut listed = HashSet::new();
        for s in &self.segments {
            if s.id == VOID {
                return Err(Error::Schema("segment uses the void id 0".into()));
            }
            if !listed.insert(s.id) {
                return Err(Error::Schema(format!("duplicate segment id {}", s.id)));
            }
        }
        let counts = self.id_counts();
        if let Some(id) = counts.keys().find(|&&id| id != VOID && !listed.contains(&id)) {
            return Err(Error::Schema(format!("raster id {id} is not listed in segments_info")));
        }
        for s in &self.segments {
            let n = counts.get(&s.id).copied().unwrap_or(0);
            if n == 0 {
                return Err(Error::Schema(format!("segment {} is absent from the raster", s.id)));
            }
            if s.area != n {
                return Err(Error::Schema(format!("segment {} lists area {} but covers {n} pixels", s.id, s.area)));
            }
        }
        Ok(())
    }

    /// Fills in `isthing` from a category table; unknown categories are an error.
    pub fn resolve_categories(&mut self, table: &CategoryTable) -> Result<()> {
        for s in &mut self.segments {
            let cat = table
                .get(&s.category_id)
                .ok_or_else(|| Error::Schema(format!("segment {} has unknown category {}", s.id, s.category_id)))?;
            s.isthing = cat.isthing;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: u32, cat: u32, area: u64) -> Segment {
        Segment { id, category_id: cat, iscrowd: false, area, isthing: false, score: None }
    }

    #[test]
    fn validate_catches_inconsistencies() {
        let mut m = PanopticMap::void(2, 2);
        m.ids = vec![0, 1, 1, 2];
        m.segments = vec![seg(1, 5, 2), seg(2, 6, 1)];
        m.validate().unwrap();
        assert_eq!(m.void_fraction(), 0.25);

        let mut bad = m.clone();
        bad.segments[0].area = 3;
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.segments.pop();
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.segments.push(seg(1, 5, 2));
        assert!(bad.validate().is_err());
        let mut bad = m;
        bad.segments.push(seg(3, 5, 1));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn label_space_layout() {
        let l = LabelSpace::contiguous(3, 2);
        assert_eq!(l.things, vec![1, 2, 3]);
        assert_eq!(l.stuff, vec![4, 5]);
        assert_eq!(l.stuff_channels(), 3);
        assert_eq!(l.other_channel(), 2);
        assert_eq!(l.thing_index(3), Some(2));
        assert_eq!(l.thing_index(4), None);
        l.validate().unwrap();
        assert!(LabelSpace { things: vec![1], stuff: vec![1] }.validate().is_err());
    }

    #[test]
    fn category_flags_are_integers() {
        let c = Category { id: 3, name: "road".into(), isthing: false };
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"id":3,"name":"road","isthing":0}"#);
        let back: Category = serde_json::from_str(r#"{"id":3,"name":"road","isthing":true}"#).unwrap();
        assert!(back.isthing);
        assert!(serde_json::from_str::<Category>(r#"{"id":3,"name":"x","isthing":2}"#).is_err());
    }
}
