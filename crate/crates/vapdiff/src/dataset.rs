//! On-disk datasets: `root/<class_name>/<image_id>.png` plus `manifest.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vapdiff_core::toy::{self, ToySample};
use vapdiff_core::Image;

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";
/// Ground-truth attribute descriptions written by the toy generator.
pub const ATTRIBUTES: &str = "attributes.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub class: usize,
    pub class_name: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLine {
    pub image_id: String,
    pub description: String,
}

/// Reads a JSON-lines file; every malformed line is reported with its number.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes a JSON-lines file through a temporary sibling and a rename.
pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp).map_err(Error::io(&tmp))?);
        for item in items {
            let line = serde_json::to_string(item).map_err(|e| Error::config(e.to_string()))?;
            writeln!(w, "{line}").map_err(Error::io(&tmp))?;
        }
        w.flush().map_err(Error::io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(Image::new(3, h, w, data)?)
}

pub fn encode_png(image: &Image) -> Vec<u8> {
    let (c, h, w) = image.shape();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = |ch: usize| (image.at(ch.min(c - 1), y as usize, x as usize) * 255.0).round() as u8;
        image::Rgb([v(0), v(1), v(2)])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_png(image)).map_err(Error::io(path))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::config(format!("dataset manifest {} does not exist", manifest.display())));
        }
        let entries: Vec<ManifestEntry> = read_jsonl(&manifest)?;
        let classes = entries.iter().map(|e| e.class + 1).max().unwrap_or(0);
        let mut class_names = vec![String::new(); classes];
        for (i, e) in entries.iter().enumerate() {
            let slot = &mut class_names[e.class];
            if slot.is_empty() {
                slot.clone_from(&e.class_name);
            } else if *slot != e.class_name {
                return Err(Error::Parse {
                    path: manifest.clone(),
                    line: i + 1,
                    reason: format!("class {} named both {slot} and {}", e.class, e.class_name),
                });
            }
        }
        if let Some(c) = class_names.iter().position(String::is_empty) {
            return Err(Error::config(format!("class {c} has no images in {}", manifest.display())));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(&e.image_id)) {
            return Err(Error::config(format!("image id {} appears twice in the manifest", dup.image_id)));
        }
        Ok(Self { root: root.to_path_buf(), class_names, entries })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.class_name).join(format!("{}.png", entry.image_id))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn read(&self, entry: &ManifestEntry) -> Result<Image> {
        read_png(&self.image_path(entry))
    }

    /// Entries of one split with their decoded images.
    pub fn load_split(&self, split: Split) -> Result<Vec<(ManifestEntry, Image)>> {
        self.split(split).map(|e| Ok((e.clone(), self.read(e)?))).collect()
    }

    pub fn attributes(&self) -> Result<Vec<AttributeLine>> {
        read_jsonl(&self.root.join(ATTRIBUTES))
    }
}

/// Writes the procedural toy benchmark as a dataset directory.
pub fn write_toy(root: &Path, train: &[ToySample], test: &[ToySample]) -> Result<Dataset> {
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let mut entries = Vec::new();
    let mut attrs = Vec::new();
    for (split, samples) in [(Split::Train, train), (Split::Test, test)] {
        for s in samples {
            let class_name = toy::CLASS_NAMES[s.class].to_string();
            let dir = root.join(&class_name);
            fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
            write_png(&dir.join(format!("{}.png", s.id)), &s.image)?;
            entries.push(ManifestEntry { image_id: s.id.clone(), class: s.class, class_name, split });
            attrs.push(AttributeLine { image_id: s.id.clone(), description: s.description.clone() });
        }
    }
    write_jsonl(&root.join(MANIFEST), &entries)?;
    write_jsonl(&root.join(ATTRIBUTES), &attrs)?;
    Dataset::load(root)
}

/// Train and test samples for a toy dataset of `count` training images.
pub fn toy_samples(count: usize, test_count: usize, seed: u64) -> (Vec<ToySample>, Vec<ToySample>) {
    (toy::generate(count, seed, "toy"), toy::generate(test_count, seed ^ 0x5eed_7e57, "toy-test"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let img = toy::generate(1, 3, "x").remove(0).image;
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        write_png(&p, &back).unwrap();
        assert_eq!(read_png(&p).unwrap(), back);
    }

    #[test]
    fn toy_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = toy_samples(6, 3, 1);
        let ds = write_toy(dir.path(), &train, &test).unwrap();
        assert_eq!(ds.class_names, ["round", "angular", "triangular"]);
        assert_eq!(ds.split(Split::Train).count(), 6);
        assert_eq!(ds.split(Split::Test).count(), 3);
        assert!(dir.path().join("angular/toy-0001.png").is_file());
        assert_eq!(ds.attributes().unwrap().len(), 9);
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST);
        fs::write(&m, "{\"image_id\":\"a\",\"class\":0,\"class_name\":\"x\",\"split\":\"train\"}\n{\"image_id\":").unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
