//! CSV outputs and a small bar chart.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use vapdiff_core::classifier::DownstreamComparison;
use vapdiff_core::metrics::MetricReport;
use vapdiff_core::pcm::LossBreakdown;

use crate::error::{Error, Result};

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse { path: path.to_path_buf(), line: 0, reason: e.to_string() }
}

/// Appending writer for per-step losses.
pub struct LossWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl LossWriter {
    /// Creates the file with a header, or appends when `append` is set and the file exists.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.is_file();
        let file = if exists {
            OpenOptions::new().append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(Error::io(path))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            inner.write_record(["step", "l_diffusion", "l_recon", "alpha", "l_total"]).map_err(csv_err(path))?;
        }
        Ok(Self { path: path.to_path_buf(), inner })
    }

    pub fn write(&mut self, step: u64, loss: &LossBreakdown) -> Result<()> {
        let row = [step.to_string(), loss.l_diffusion.to_string(), loss.l_recon.to_string(), loss.alpha.to_string(), loss.l_total.to_string()];
        self.inner.write_record(&row).map_err(csv_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(Error::io(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub l_diffusion: f64,
    pub l_recon: f64,
    pub alpha: f64,
    pub l_total: f64,
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

pub fn write_metrics_csv<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["arm", "fid", "is_mean", "is_std", "precision", "recall", "real_count", "fake_count", "extractor", "config_hash"])
        .map_err(csv_err(path))?;
    for (arm, r) in rows {
        w.write_record([
            arm.to_string(),
            r.fid.to_string(),
            r.is_mean.to_string(),
            r.is_std.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.real_count.to_string(),
            r.fake_count.to_string(),
            r.extractor.clone(),
            r.config_hash.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_downstream_csv(path: &Path, cmp: &DownstreamComparison) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["run", "real_fraction", "classifier_id", "mauc", "f1", "augmentation", "real_count", "synthetic_count"])
        .map_err(csv_err(path))?;
    for (name, r) in [("baseline", &cmp.baseline), ("augmented", &cmp.augmented)] {
        w.write_record([
            name.to_string(),
            r.real_fraction.to_string(),
            r.classifier_id.clone(),
            r.mauc.to_string(),
            r.f1.map(|f| f.to_string()).unwrap_or_default(),
            r.augmentation.clone(),
            r.real_count.to_string(),
            r.synthetic_count.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

const PALETTE: [[u8; 3]; 4] = [[66, 133, 244], [219, 68, 55], [244, 180, 0], [15, 157, 88]];

/// Grouped bars of FID, precision and recall per arm, each metric scaled to its
/// own maximum. Columns follow the order of `rows`, one colour per arm.
pub fn write_metric_bars(path: &Path, rows: &[(&str, &MetricReport)]) -> Result<()> {
    let metrics: [fn(&MetricReport) -> f64; 3] = [|r| r.fid, |r| r.precision, |r| r.recall];
    let (bar, gap, height) = (16u32, 24u32, 120u32);
    let n = rows.len().max(1) as u32;
    let width = gap + metrics.len() as u32 * (n * bar + gap);
    let mut img = RgbImage::from_pixel(width, height + 8, Rgb([255, 255, 255]));
    for (m, get) in metrics.iter().enumerate() {
        let max = rows.iter().map(|(_, r)| get(r)).fold(0.0f64, f64::max);
        for (a, (_, r)) in rows.iter().enumerate() {
            let v = get(r);
            let h = if max > 0.0 && v.is_finite() { ((v / max) * height as f64).round() as u32 } else { 0 };
            let x0 = gap + m as u32 * (n * bar + gap) + a as u32 * bar;
            for x in x0..x0 + bar - 2 {
                for y in (height - h)..height {
                    img.put_pixel(x, y + 4, Rgb(PALETTE[a % PALETTE.len()]));
                }
            }
        }
    }
    for x in 0..width {
        img.put_pixel(x, height + 4, Rgb([0, 0, 0]));
    }
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_csv_appends_without_second_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let l = LossBreakdown::new(1.0, 0.5, 0.1).unwrap();
        let mut w = LossWriter::open(&p, false).unwrap();
        w.write(1, &l).unwrap();
        w.flush().unwrap();
        drop(w);
        let mut w = LossWriter::open(&p, true).unwrap();
        w.write(2, &l).unwrap();
        w.flush().unwrap();
        let rows = read_losses(&p).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
        assert!((rows[0].l_total - 1.05).abs() < 1e-12);
    }
}
