use std::path::Path;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resize target and per-channel normalization for folder datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderConfig {
    /// (height, width)
    pub image_size: (usize, usize),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for FolderConfig {
    fn default() -> Self {
        Self {
            image_size: (32, 32),
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Loads images listed in a CSV with header `filename,task_1,task_2,...`.
/// Rows are ordered by filename; every task column holds class indices.
pub fn load_image_folder(dir: &Path, label_csv: &Path, cfg: &FolderConfig) -> Result<Dataset> {
    let (h, w) = cfg.image_size;
    if h == 0 || w == 0 {
        return Err(Error::Config("dataset.image_size must be positive".into()));
    }
    if cfg.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("dataset.std entries must be > 0".into()));
    }
    let mut reader = csv::Reader::from_path(label_csv).map_err(|e| csv_error(label_csv, e))?;
    let headers = reader.headers().map_err(|e| csv_error(label_csv, e))?.clone();
    if headers.get(0) != Some("filename") {
        return Err(Error::Data(format!(
            "{}: header must start with `filename`",
            label_csv.display()
        )));
    }
    let task_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows: Vec<(String, Vec<u32>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row 1 is the header.
        let row = i + 2;
        let record = record.map_err(|e| Error::Data(format!("{} row {row}: {e}", label_csv.display())))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{} row {row}: expected {} fields, found {}",
                label_csv.display(),
                headers.len(),
                record.len()
            )));
        }
        let labels = record
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<u32>().map_err(|_| {
                    Error::Data(format!("{} row {row}: label `{f}` is not a class index", label_csv.display()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((record[0].to_string(), labels));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut pixels = Vec::with_capacity(rows.len() * 3 * h * w);
    for (name, _) in &rows {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::Data(format!("image `{name}` listed in the label file does not exist")));
        }
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("cannot decode image `{name}`: {e}")))?
            .to_rgb8();
        let img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        for c in 0..3 {
            for p in img.pixels() {
                pixels.push((f32::from(p.0[c]) / 255.0 - cfg.mean[c]) / cfg.std[c]);
            }
        }
    }
    let tasks = task_names
        .into_iter()
        .enumerate()
        .map(|(t, name)| (name, Labels::Class(rows.iter().map(|(_, l)| l[t]).collect())))
        .collect();
    Ok(Dataset {
        images: Tensor::new([rows.len(), 3, h, w], pixels),
        tasks,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}
