//! Per-class store of training descriptions with seeded random retrieval.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{derive, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SplitTag {
    #[default]
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DescriptionRecord {
    pub class: usize,
    pub image_id: String,
    pub text: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub split_tag: SplitTag,
    /// Optional key into an embedding cache.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub embedding_ref: Option<String>,
}

impl DescriptionRecord {
    pub fn new(class: usize, image_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { class, image_id: image_id.into(), text: text.into(), split_tag: SplitTag::Seen, embedding_ref: None }
    }
}

/// Class id → descriptions in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBank {
    pub id: String,
    class_count: usize,
    classes: BTreeMap<usize, Vec<DescriptionRecord>>,
}

impl PromptBank {
    pub fn new(id: impl Into<String>, class_count: usize) -> Self {
        Self { id: id.into(), class_count, classes: BTreeMap::new() }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_count {
            return Err(Error::invalid("class", format!("{class} outside [0, {})", self.class_count)));
        }
        Ok(())
    }

    pub fn insert(&mut self, record: DescriptionRecord) -> Result<()> {
        self.check_class(record.class)?;
        if record.text.trim().is_empty() {
            return Err(Error::invalid("text", format!("empty description for image {}", record.image_id)));
        }
        let list = self.classes.entry(record.class).or_default();
        if list.iter().any(|r| r.image_id == record.image_id) {
            return Err(Error::Conflict { class: record.class, image_id: record.image_id });
        }
        list.push(record);
        Ok(())
    }

    pub fn records(&self, class: usize) -> &[DescriptionRecord] {
        self.classes.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, class: usize) -> usize {
        self.records(class).len()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records, class by class, each class in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &DescriptionRecord> {
        self.classes.values().flatten()
    }

    pub fn find(&self, class: usize, image_id: &str) -> Option<&DescriptionRecord> {
        self.records(class).iter().find(|r| r.image_id == image_id)
    }

    /// Copy holding only the records carrying `tag`.
    pub fn with_tag(&self, tag: SplitTag) -> PromptBank {
        let mut out = PromptBank::new(self.id.clone(), self.class_count);
        for (&class, list) in &self.classes {
            let kept: Vec<DescriptionRecord> = list.iter().filter(|r| r.split_tag == tag).cloned().collect();
            if !kept.is_empty() {
                out.classes.insert(class, kept);
            }
        }
        out
    }

    /// Uniform draw over the class list from a stream fixed by `seed`.
    pub fn retrieve_random(&self, class: usize, seed: u64) -> Result<&DescriptionRecord> {
        let mut rng = derive(seed, streams::PROMPT, class as u64);
        self.retrieve_with(class, &mut rng)
    }

    /// Uniform draw using a caller-owned generator.
    pub fn retrieve_with(&self, class: usize, rng: &mut impl Rng) -> Result<&DescriptionRecord> {
        self.check_class(class)?;
        let list = self.records(class);
        if list.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        Ok(&list[rng.random_range(0..list.len())])
    }

    /// Partitions every class into seen and held-out records. Each class holds
    /// out `round(fraction · n)` records, kept within `[1, n − 1]`.
    pub fn split(&self, holdout: f64, seed: u64) -> Result<(PromptBank, PromptBank)> {
        if !(holdout > 0.0 && holdout < 1.0) {
            return Err(Error::invalid("holdout", format!("{holdout} is outside (0, 1)")));
        }
        if let Some((class, list)) = self.classes.iter().find(|(_, l)| l.len() < 2) {
            return Err(Error::invalid("class", format!("class {class} has {} record(s); splitting needs 2", list.len())));
        }
        let mut seen = PromptBank::new(format!("{}-seen", self.id), self.class_count);
        let mut unseen = PromptBank::new(format!("{}-unseen", self.id), self.class_count);
        for (&class, list) in &self.classes {
            let n = list.len();
            let take = ((holdout * n as f64 + 0.5) as usize).clamp(1, n - 1);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut derive(seed, streams::SPLIT, class as u64));
            let mut held: Vec<usize> = order[..take].to_vec();
            held.sort_unstable();
            for (i, rec) in list.iter().enumerate() {
                let mut rec = rec.clone();
                if held.binary_search(&i).is_ok() {
                    rec.split_tag = SplitTag::Unseen;
                    unseen.insert(rec)?;
                } else {
                    rec.split_tag = SplitTag::Seen;
                    seen.insert(rec)?;
                }
            }
        }
        Ok((seen, unseen))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(per_class: usize, classes: usize) -> PromptBank {
        let mut b = PromptBank::new("b", classes);
        for c in 0..classes {
            for i in 0..per_class {
                b.insert(DescriptionRecord::new(c, format!("img-{c}-{i}"), format!("text {c} {i}"))).unwrap();
            }
        }
        b
    }

    #[test]
    fn insert_counts_and_conflicts() {
        let mut b = PromptBank::new("b", 3);
        b.insert(DescriptionRecord::new(1, "x", "hello")).unwrap();
        assert_eq!(b.count(1), 1);
        let before = b.clone();
        assert!(matches!(b.insert(DescriptionRecord::new(1, "x", "again")), Err(Error::Conflict { .. })));
        assert_eq!(b, before);
        assert!(matches!(b.insert(DescriptionRecord::new(3, "y", "t")), Err(Error::Validation { .. })));
        b.insert(DescriptionRecord::new(0, "a", "t")).unwrap();
        b.insert(DescriptionRecord::new(2, "c", "t")).unwrap();
        b.insert(DescriptionRecord::new(2, "d", "t")).unwrap();
        assert_eq!((b.count(0), b.count(1), b.count(2)), (1, 1, 2));
        // same image id in another class is fine
        b.insert(DescriptionRecord::new(0, "x", "t")).unwrap();
    }

    #[test]
    fn retrieval_contracts() {
        let mut b = PromptBank::new("b", 2);
        b.insert(DescriptionRecord::new(0, "only", "solo")).unwrap();
        for seed in 0..20 {
            assert_eq!(b.retrieve_random(0, seed).unwrap().image_id, "only");
        }
        assert!(matches!(b.retrieve_random(1, 0), Err(Error::EmptyClass(1))));
        assert!(matches!(b.retrieve_random(2, 0), Err(Error::Validation { .. })));
        let b = bank(4, 1);
        assert_eq!(b.retrieve_random(0, 42).unwrap(), b.retrieve_random(0, 42).unwrap());
    }

    #[test]
    fn split_half() {
        let b = bank(4, 3);
        let (seen, unseen) = b.split(0.5, 9).unwrap();
        for c in 0..3 {
            assert_eq!((seen.count(c), unseen.count(c)), (2, 2));
            for r in unseen.records(c) {
                assert!(seen.records(c).iter().all(|s| s.image_id != r.image_id));
                assert_eq!(r.split_tag, SplitTag::Unseen);
            }
        }
        assert_eq!(b.split(0.5, 9).unwrap(), (seen, unseen));
    }

    #[test]
    fn split_errors() {
        let mut b = bank(3, 2);
        assert!(b.split(0.0, 1).is_err());
        assert!(b.split(1.0, 1).is_err());
        b.insert(DescriptionRecord::new(1, "extra", "t")).unwrap();
        let mut small = PromptBank::new("s", 2);
        small.insert(DescriptionRecord::new(1, "a", "t")).unwrap();
        let err = small.split(0.5, 1).unwrap_err();
        assert!(format!("{err}").contains("class 1"));
    }
}
