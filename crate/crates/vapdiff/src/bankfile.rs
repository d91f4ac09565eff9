//! Prompt bank persistence as JSON lines, one record per line.
//!
//! The bank id is the file stem, so `save` writes to a path and `load` of the
//! same path restores an equal bank.

use std::path::Path;

use vapdiff_core::bank::{DescriptionRecord, PromptBank};

use crate::dataset::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

pub fn bank_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn save(bank: &PromptBank, path: &Path) -> Result<()> {
    write_jsonl(path, bank.iter())
}

/// Loads every line before building the bank, so a bad file yields no bank at all.
pub fn load(path: &Path, class_count: usize) -> Result<PromptBank> {
    let records: Vec<DescriptionRecord> = read_jsonl(path)?;
    let mut bank = PromptBank::new(bank_id(path), class_count);
    for (i, rec) in records.into_iter().enumerate() {
        bank.insert(rec).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vapdiff_core::bank::SplitTag;

    #[test]
    fn roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.jsonl");
        let mut b = PromptBank::new("b", 3);
        b.insert(DescriptionRecord::new(2, "z", "last class")).unwrap();
        let mut r = DescriptionRecord::new(0, "a", "with \"quotes\"\nand newline");
        r.split_tag = SplitTag::Unseen;
        r.embedding_ref = Some("cache:1".into());
        b.insert(r).unwrap();
        b.insert(DescriptionRecord::new(0, "b", "second")).unwrap();
        save(&b, &p).unwrap();
        assert_eq!(load(&p, 3).unwrap(), b);
        let e = PromptBank::new("b", 3);
        save(&e, &p).unwrap();
        assert_eq!(load(&p, 3).unwrap(), e);
    }

    #[test]
    fn truncated_file_fails_whole() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let mut b = PromptBank::new("t", 2);
        b.insert(DescriptionRecord::new(0, "a", "one")).unwrap();
        b.insert(DescriptionRecord::new(1, "b", "two")).unwrap();
        save(&b, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() - 10]).unwrap();
        assert!(matches!(load(&p, 2), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, format!("{text}{}", text.lines().next().unwrap())).unwrap();
        assert!(matches!(load(&p, 2), Err(Error::Parse { line: 3, .. })));
    }
}
