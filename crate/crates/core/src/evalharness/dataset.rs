//! Folder datasets.
//!
//! A dataset root either holds two manifests, `train.csv` and `test.csv`,
//! with columns `path,label,mask_path` (paths relative to the root, empty
//! `mask_path` for none), or the directory layout
//!
//! ```text
//! train/normal/*        training images
//! test/normal/*         normal test images
//! test/anomalous/*      anomalous test images
//! test/masks/<stem>.*   optional masks, matched by file stem
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::patchgrid::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(Label::Normal),
            "anomalous" | "anomaly" | "abnormal" | "1" => Ok(Label::Anomalous),
            other => Err(Error::Dataset(format!("unknown label {other:?}"))),
        }
    }
}

/// Training images; every entry is normal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalImageSet {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl NormalImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, image: ImageTensor) {
        self.ids.push(id.into());
        self.images.push(image);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestEntry {
    pub id: String,
    pub image: ImageTensor,
    pub label: Label,
    /// Ground-truth anomaly region, only on anomalous entries.
    pub mask: Option<Array2<bool>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledTestSet {
    pub entries: Vec<TestEntry>,
}

impl LabeledTestSet {
    pub fn push(&mut self, entry: TestEntry) -> Result<()> {
        if let Some(mask) = &entry.mask {
            if entry.label == Label::Normal {
                return Err(Error::Dataset(format!("normal entry {} carries a mask", entry.id)));
            }
            if mask.dim() != (entry.image.height(), entry.image.width()) {
                return Err(Error::Dataset(format!(
                    "mask of {} is {:?}, image is {}×{}",
                    entry.id,
                    mask.dim(),
                    entry.image.height(),
                    entry.image.width()
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: String,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<ManifestRow>,
    pub test: Vec<ManifestRow>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

impl SplitManifest {
    /// Reads `train.csv` and `test.csv` under `root`.
    pub fn read(root: &Path) -> Result<Self> {
        Ok(Self {
            train: read_manifest(&root.join("train.csv"))?,
            test: read_manifest(&root.join("test.csv"))?,
        })
    }

    /// Builds a manifest from the directories-as-labels layout.
    pub fn from_dirs(root: &Path) -> Result<Self> {
        let masks: HashMap<String, PathBuf> = list_images(root, "test/masks")?
            .into_iter()
            .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
            .collect();
        let rows = |dir: &str, label: Label| -> Result<Vec<ManifestRow>> {
            Ok(list_images(root, dir)?
                .into_iter()
                .map(|path| {
                    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
                    let mask_path = match label {
                        Label::Anomalous => stem.and_then(|s| masks.get(&s).cloned()),
                        Label::Normal => None,
                    };
                    ManifestRow {
                        path,
                        label: label.as_str().into(),
                        mask_path,
                    }
                })
                .collect())
        };
        let train = rows("train/normal", Label::Normal)?;
        if train.is_empty() && !root.join("train/normal").is_dir() {
            return Err(Error::Dataset(format!(
                "{} has neither train.csv nor train/normal",
                root.display()
            )));
        }
        let mut test = rows("test/normal", Label::Normal)?;
        test.extend(rows("test/anomalous", Label::Anomalous)?);
        Ok(Self { train, test })
    }

    /// Manifests when present, otherwise the directory layout.
    pub fn discover(root: &Path) -> Result<Self> {
        if root.join("train.csv").is_file() {
            Self::read(root)
        } else {
            Self::from_dirs(root)
        }
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        for (name, rows) in [("train.csv", &self.train), ("test.csv", &self.test)] {
            let mut w = csv::Writer::from_path(root.join(name))?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let mut row: ManifestRow = row?;
        if row.mask_path.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
            row.mask_path = None;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Image files of `root/dir`, relative to `root`, sorted by name.
fn list_images(root: &Path, dir: &str) -> Result<Vec<PathBuf>> {
    let full = root.join(dir);
    if !full.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&full)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            out.push(Path::new(dir).join(path.file_name().expect("file")));
        }
    }
    out.sort();
    Ok(out)
}

/// Decodes an image, converts it to `channels` and resizes it to `size × size`
/// with values in `[0, 1]`.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<ImageTensor> {
    let (pixels, _) = decode(path, channels)?;
    ImageTensor::new(resize_bilinear(&pixels, size, size))
}

fn decode(path: &Path, channels: usize) -> Result<(Array3<f32>, (usize, usize))> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma32f().into_raw(),
        3 => img.to_rgb32f().into_raw(),
        c => return Err(Error::Dimension(format!("{c} channels, expected 1 or 3"))),
    };
    let pixels = Array3::from_shape_vec((h, w, channels), data).expect("decoded buffer matches dimensions");
    Ok((pixels, (h, w)))
}

/// Loads every manifest entry. Masks must have their image's original size;
/// they are resized like the image and binarized at 0.5.
pub fn load_folder_dataset(
    root: &Path,
    manifest: &SplitManifest,
    size: usize,
    channels: usize,
) -> Result<(NormalImageSet, LabeledTestSet)> {
    let mut train = NormalImageSet::default();
    for row in &manifest.train {
        let label: Label = row.label.parse()?;
        if label != Label::Normal || row.mask_path.is_some() {
            return Err(Error::Dataset(format!(
                "training entry {} must be normal and unmasked",
                row.path.display()
            )));
        }
        train.push(entry_id(&row.path), load_image(&root.join(&row.path), size, channels)?);
    }
    let mut test = LabeledTestSet::default();
    for row in &manifest.test {
        let label: Label = row.label.parse()?;
        let (pixels, dims) = decode(&root.join(&row.path), channels)?;
        let image = ImageTensor::new(resize_bilinear(&pixels, size, size))?;
        let mask = match &row.mask_path {
            None => None,
            Some(_) if label == Label::Normal => {
                return Err(Error::Dataset(format!(
                    "normal entry {} carries a mask",
                    row.path.display()
                )))
            }
            Some(mp) => {
                let (m, mdims) = decode(&root.join(mp), 1)?;
                if mdims != dims {
                    return Err(Error::Dataset(format!(
                        "mask {} is {}×{}, image {} is {}×{}",
                        mp.display(),
                        mdims.0,
                        mdims.1,
                        row.path.display(),
                        dims.0,
                        dims.1
                    )));
                }
                let m = resize_bilinear(&m, size, size);
                Some(m.index_axis(ndarray::Axis(2), 0).mapv(|v| v >= 0.5))
            }
        };
        test.push(TestEntry {
            id: entry_id(&row.path),
            image,
            label,
            mask,
        })?;
    }
    Ok((train, test))
}

/// Discovers the layout under `root` and loads it.
pub fn load_dataset(root: &Path, size: usize, channels: usize) -> Result<(NormalImageSet, LabeledTestSet)> {
    let manifest = SplitManifest::discover(root)?;
    load_folder_dataset(root, &manifest, size, channels)
}

fn entry_id(path: &Path) -> String {
    path.with_extension("").to_string_lossy().replace('\\', "/")
}
