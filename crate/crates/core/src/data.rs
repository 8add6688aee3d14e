//! Dataset ingestion and synthesis: IDX files, deterministic splits, and a
//! synthetic separable dataset for tests.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: usize,
    /// Per-image dimensions [C, H, W]; model factories size layers off this.
    pub dims: [usize; 3],
}

/// Labeled images, pixels in [0,1]. Images are stored as one contiguous
/// [N, C, H, W] tensor so batches can be assembled by row copies.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dims("Dataset images", images.shape(), &[4]));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::IdxCountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if meta.classes == 0 {
            return Err(Error::Parameter("class count must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= meta.classes) {
            return Err(Error::Parameter(format!(
                "label {bad} out of range for {} classes",
                meta.classes
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Parameter(
                "image values must be finite and within [0,1]".into(),
            ));
        }
        if images.shape()[1..] != meta.dims {
            return Err(Error::dims("Dataset meta dims", images.shape(), &meta.dims));
        }
        Ok(Dataset {
            images,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// [C, H, W] of a single image.
    pub fn image_dims(&self) -> [usize; 3] {
        [
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        ]
    }

    fn image_len(&self) -> usize {
        let d = self.image_dims();
        d[0] * d[1] * d[2]
    }

    /// Copy of one image as a [C,H,W] tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let n = self.image_len();
        let d = self.image_dims();
        Tensor::from_vec(&d, self.images.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }

    /// Assemble a batch tensor [B,C,H,W] plus labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let d = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), d[0], d[1], d[2]], data).unwrap(),
            labels,
        )
    }

    /// New dataset holding the given rows, same metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            meta: self.meta.clone(),
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            expected: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load a big-endian IDX image/label file pair (the MNIST distribution
/// format). Image files carry magic 0x00000803 and three dimension words;
/// label files carry 0x00000801 and one. Pixel bytes are scaled by 1/255.
/// Any other magic is rejected rather than guessed at.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ibytes = fs::read(images_path)?;
    let lbytes = fs::read(labels_path)?;
    parse_idx(
        &ibytes,
        &lbytes,
        &images_path.display().to_string(),
        &labels_path.display().to_string(),
    )
}

/// Parse an already-read IDX pair. Split out from [`load_idx`] so callers
/// with embedded or downloaded buffers (the browser demo compiles the
/// fixture bytes straight into the binary) share the header validation.
/// The names only feed error messages and the dataset name.
pub fn parse_idx(ibytes: &[u8], lbytes: &[u8], iname: &str, lname: &str) -> Result<Dataset> {
    let ipath = iname.to_string();
    let lpath = lname.to_string();

    let imagic = read_u32_be(ibytes, 0, &ipath)?;
    if imagic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: ipath,
            found: imagic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(ibytes, 4, &ipath)? as usize;
    let h = read_u32_be(ibytes, 8, &ipath)? as usize;
    let w = read_u32_be(ibytes, 12, &ipath)? as usize;
    let expected = 16 + n * h * w;
    if ibytes.len() < expected {
        return Err(Error::IdxTruncated {
            path: ipath,
            expected,
            got: ibytes.len(),
        });
    }

    let lmagic = read_u32_be(lbytes, 0, &lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: lpath,
            found: lmagic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let ln = read_u32_be(lbytes, 4, &lpath)? as usize;
    let lexpected = 8 + ln;
    if lbytes.len() < lexpected {
        return Err(Error::IdxTruncated {
            path: lpath,
            expected: lexpected,
            got: lbytes.len(),
        });
    }
    if n != ln {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: ln,
        });
    }

    let data: Vec<f64> = ibytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbytes[8..lexpected].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let name = Path::new(iname)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(
        Tensor::from_vec(&[n, 1, h, w], data)?,
        labels,
        DatasetMeta {
            name,
            classes,
            dims: [1, h, w],
        },
    )
}

/// Write a dataset back out as an IDX pair (single-channel only). Pixels are
/// quantized with round(v·255), so a load→write→load cycle is lossless.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let d = ds.image_dims();
    if d[0] != 1 {
        return Err(Error::Parameter(format!(
            "IDX image files are single-channel, dataset has {} channels",
            d[0]
        )));
    }
    if ds.meta.classes > 256 {
        return Err(Error::Parameter(
            "IDX label files store one byte per label".into(),
        ));
    }
    let mut ibytes = Vec::with_capacity(16 + ds.images.len());
    ibytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ibytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    ibytes.extend_from_slice(&(d[1] as u32).to_be_bytes());
    ibytes.extend_from_slice(&(d[2] as u32).to_be_bytes());
    ibytes.extend(ds.images.data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut lbytes = Vec::with_capacity(8 + ds.len());
    lbytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbytes.extend(ds.labels.iter().map(|&l| l as u8));

    fs::write(images_path, ibytes)?;
    fs::write(labels_path, lbytes)?;
    Ok(())
}

/// Seeded shuffle followed by a partition at ⌊N·fraction⌋. Both sides keep
/// the original metadata; both must be non-empty.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    Rng::new(seed).shuffle(&mut indices);
    let k = (ds.len() as f64 * train_fraction) as usize;
    if k == 0 || k == ds.len() {
        return Err(Error::Parameter(format!(
            "split of {} items at {train_fraction} leaves one side empty",
            ds.len()
        )));
    }
    Ok((ds.subset(&indices[..k]), ds.subset(&indices[k..])))
}

/// Synthetic linearly separable dataset: one Gaussian intensity blob per
/// class at a class-specific location on the image grid, plus mild pixel
/// noise. Useful wherever a test needs "a dataset a linear model can learn".
pub fn synth_gaussian_blobs(
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || image_size < 2 {
        return Err(Error::Parameter(
            "blobs need classes >= 1, per_class >= 1, image_size >= 2".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    // Spread blob centers around a circle so every pair of classes is
    // separated in pixel space.
    let radius = (image_size as f64 - 1.0) / 3.0;
    let mid = (image_size as f64 - 1.0) / 2.0;
    let sigma = image_size as f64 / 8.0;
    for c in 0..classes {
        let angle = std::f64::consts::TAU * c as f64 / classes as f64;
        let (cy, cx) = (mid + radius * angle.sin(), mid + radius * angle.cos());
        for _ in 0..per_class {
            let jy = rng.normal() * 0.3;
            let jx = rng.normal() * 0.3;
            for y in 0..image_size {
                for x in 0..image_size {
                    let dy = y as f64 - cy - jy;
                    let dx = x as f64 - cx - jx;
                    let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
                        + 0.02 * rng.normal();
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::from_vec(&[n, 1, image_size, image_size], data)?,
        labels,
        DatasetMeta {
            name: format!("blobs{classes}x{per_class}"),
            classes,
            dims: [1, image_size, image_size],
        },
    )
}
