//! Dataset ingestion and the synthetic-dataset binary format.
//!
//! Image datasets follow the layout `root/<class_name>/<example>.png` with
//! 8-bit grayscale PNGs at any resolution; ingestion normalizes pixels to
//! `[0,1]` and resizes to 28x28 by exact area averaging. Class directories
//! are keyed in lexicographic order so ingestion is deterministic.
//!
//! Synthetic vector datasets serialize as `MNSYN1\0\0`, a `u32` class
//! count, a `u32` dimension, then little-endian `f64` values, class by
//! class, example by example.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use matchkit_core::episode::{ClassDataset, DatasetMeta};
use matchkit_core::{Real, Tensor};
use thiserror::Error;

pub const SYNTHETIC_MAGIC: &[u8; 8] = b"MNSYN1\0\0";
pub const INGEST_HW: usize = 28;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("class directory {0} holds no png files")]
    EmptyClass(PathBuf),
    #[error("dataset {0} holds no class directories")]
    EmptyTree(PathBuf),
    #[error("bad synthetic dataset file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] matchkit_core::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads `root/<class>/<example>.png`, returning the dataset plus the class
/// directory names in id order.
pub fn load_image_class_tree(root: &Path) -> Result<(ClassDataset, Vec<String>), DataError> {
    let mut class_dirs: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.file_type().map_err(io_err(root))?.is_dir() {
            class_dirs.push(entry.path());
        }
    }
    if class_dirs.is_empty() {
        return Err(DataError::EmptyTree(root.to_path_buf()));
    }
    class_dirs.sort();

    let mut dataset = ClassDataset::new(DatasetMeta {
        source: root.display().to_string(),
        input_shape: vec![1, INGEST_HW, INGEST_HW],
    });
    let mut names = Vec::with_capacity(class_dirs.len());
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(io_err(dir))?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        if files.is_empty() {
            return Err(DataError::EmptyClass(dir.clone()));
        }
        files.sort();
        let examples = files
            .iter()
            .map(|f| load_png(f))
            .collect::<Result<Vec<_>, _>>()?;
        dataset.add_class(class_id as u32, examples)?;
        names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    Ok((dataset, names))
}

/// One PNG to a `[1,28,28]` tensor in `[0,1]`.
pub fn load_png(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Vec<Real> = gray.as_raw().iter().map(|&p| p as Real / 255.0).collect();
    let full = Tensor::from_vec(vec![1, h, w], data)?;
    Ok(full.area_resize(INGEST_HW, INGEST_HW)?)
}

/// Writes a tensor as an 8-bit grayscale PNG. `[C,H,W]`/`[H,W]` tensors map
/// pixel values directly (clamped to `[0,1]`); flat vectors are written as
/// a 1-pixel-tall strip normalized to the example's own range.
pub fn save_png(tensor: &Tensor, path: &Path) -> Result<(), DataError> {
    let (w, h, values): (usize, usize, Vec<Real>) = match tensor.shape() {
        [h, w] => (*w, *h, tensor.to_vec()),
        [1, h, w] => (*w, *h, tensor.to_vec()),
        [d] => {
            let lo = tensor.data().iter().cloned().fold(Real::INFINITY, Real::min);
            let hi = tensor
                .data()
                .iter()
                .cloned()
                .fold(Real::NEG_INFINITY, Real::max);
            let span = (hi - lo).max(1e-12);
            (
                *d,
                1,
                tensor.data().iter().map(|&v| (v - lo) / span).collect(),
            )
        }
        other => {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                reason: format!("cannot render shape {other:?} as an image"),
            })
        }
    };
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("sized buffer");
    img.save(path).map_err(|source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes a vector dataset (classes must be 0..n with equal sizes).
pub fn save_synthetic(dataset: &ClassDataset, path: &Path) -> Result<(), DataError> {
    let [dim] = dataset.meta.input_shape[..] else {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            reason: "only vector datasets serialize to this format".into(),
        });
    };
    let ids = dataset.class_ids();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(SYNTHETIC_MAGIC);
    bytes.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    let per_class = dataset.examples(ids[0])?.len();
    for &id in &ids {
        let examples = dataset.examples(id)?;
        if examples.len() != per_class {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                reason: "classes must hold equally many examples".into(),
            });
        }
        for e in examples {
            for &v in e.data() {
                bytes.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_synthetic(path: &Path) -> Result<ClassDataset, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let bad = |reason: &str| DataError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 16 || &bytes[..8] != SYNTHETIC_MAGIC {
        return Err(bad("missing MNSYN1 header"));
    }
    let n_classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n_classes == 0 || dim == 0 {
        return Err(bad("empty dataset"));
    }
    let payload = &bytes[16..];
    if payload.len() % 8 != 0 {
        return Err(bad("truncated payload"));
    }
    let n_floats = payload.len() / 8;
    if n_floats % (n_classes * dim) != 0 {
        return Err(bad("payload does not divide into equal classes"));
    }
    let per_class = n_floats / (n_classes * dim);
    if per_class == 0 {
        return Err(bad("no examples"));
    }
    let mut dataset = ClassDataset::new(DatasetMeta {
        source: path.display().to_string(),
        input_shape: vec![dim],
    });
    let mut offset = 0;
    for class in 0..n_classes as u32 {
        let mut examples = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            let mut data = Vec::with_capacity(dim);
            for _ in 0..dim {
                data.push(
                    f64::from_le_bytes(payload[offset..offset + 8].try_into().unwrap()) as Real,
                );
                offset += 8;
            }
            examples.push(Tensor::from_vec(vec![dim], data)?);
        }
        dataset.add_class(class, examples)?;
    }
    Ok(dataset)
}

/// Directory -> image tree, file -> synthetic binary.
pub fn load_dataset_auto(path: &Path) -> Result<ClassDataset, DataError> {
    let meta = fs::metadata(path).map_err(io_err(path))?;
    if meta.is_dir() {
        Ok(load_image_class_tree(path)?.0)
    } else {
        load_synthetic(path)
    }
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}
