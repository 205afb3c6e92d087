//! Datasets: IDX reading and writing, a colourised two-task variant of a
//! grayscale set, a linear-Gaussian generator, and a compact binary cache.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::checksum;
use crate::rng::{normal_vec, Streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Task name of the class labels read from an IDX label file.
pub const DIGIT_TASK: &str = "digit";
pub const COLOR_TASK: &str = "color";

/// Red, green, blue, yellow, magenta, cyan, white.
pub const DEFAULT_PALETTE: [[f64; 3]; 7] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// Shape of one example, e.g. `[28, 28]` or `[28, 28, 3]`.
    pub example_shape: Vec<usize>,
    /// Number of classes per task.
    pub classes: BTreeMap<String, usize>,
    pub provenance: String,
}

/// Examples as rows of `x` with values in `[0, 1]`, plus per-task labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub x: Tensor<S>,
    pub labels: BTreeMap<String, Vec<usize>>,
    pub meta: Metadata,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(x: Tensor<S>, labels: BTreeMap<String, Vec<usize>>, meta: Metadata) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let per: usize = meta.example_shape.iter().product();
        if per != x.cols() {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: meta.example_shape.clone(),
                rhs: vec![x.cols()],
            });
        }
        for (task, l) in &labels {
            if l.len() != x.rows() {
                return Err(Error::Dimension {
                    op: "dataset labels",
                    lhs: vec![x.rows()],
                    rhs: vec![l.len()],
                });
            }
            let k = meta.classes.get(task).copied().unwrap_or(0);
            if l.iter().any(|&c| c >= k) {
                return Err(Error::Config(format!("task {task:?} has labels outside its {k} classes")));
            }
        }
        Ok(Self { x, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn task(&self, name: &str) -> Result<(&[usize], usize)> {
        match (self.labels.get(name), self.meta.classes.get(name)) {
            (Some(l), Some(&k)) => Ok((l, k)),
            _ => Err(Error::Config(format!("dataset has no task {name:?}"))),
        }
    }

    /// Rows `idx` in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.gather_rows(idx),
            labels: self
                .labels
                .iter()
                .map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i]).collect()))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Seeded shuffle, then the first `n_train` rows and the next `n_test`.
    pub fn split(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(Self, Self)> {
        if n_train + n_test > self.len() {
            return Err(Error::Config(format!(
                "cannot split {} examples into {n_train} + {n_test}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut Streams::new(seed).stream("split"));
        Ok((self.select(&order[..n_train]), self.select(&order[n_train..n_train + n_test])))
    }

    /// Hash of pixels and labels.
    pub fn checksum(&self) -> u64 {
        let mut parts = vec![self.x.clone()];
        for l in self.labels.values() {
            parts.push(Tensor::vector(l.iter().map(|&c| S::c(c as f64)).collect()));
        }
        checksum(parts.iter())
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            x: self.x.cast(),
            labels: self.labels.clone(),
            meta: self.meta.clone(),
        }
    }
}

// ---- IDX ------------------------------------------------------------------

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                offset: 0,
                msg: format!("{}: bad gzip stream: {e}", path.display()),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], offset: usize) -> Result<u32> {
    b.get(offset..offset + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: format!("truncated header: need 4 bytes, file has {}", b.len()),
        })
}

/// Decoded IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(b: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(b, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(b, 4)? as usize;
    let r = be_u32(b, 8)? as usize;
    let c = be_u32(b, 12)? as usize;
    let need = n.checked_mul(r).and_then(|v| v.checked_mul(c)).ok_or_else(|| Error::Format {
        offset: 4,
        msg: "image dimensions overflow".into(),
    })?;
    let body = &b[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: b.len() as u64,
            msg: format!("truncated pixels: header promises {need} bytes, found {}", body.len()),
        });
    }
    Ok((n, r, c, &body[..need]))
}

pub fn parse_idx_labels(b: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(b, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(b, 4)? as usize;
    let body = &b[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: b.len() as u64,
            msg: format!("truncated labels: header promises {n}, found {}", body.len()),
        });
    }
    Ok(&body[..n])
}

/// Reads an IDX image/label pair (plain or gzipped); pixels are scaled to `[0, 1]`.
pub fn load_idx<S: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<S>> {
    let ib = read_maybe_gz(images)?;
    let lb = read_maybe_gz(labels)?;
    let (n, r, c, px) = parse_idx_images(&ib)?;
    let lab = parse_idx_labels(&lb)?;
    if lab.len() != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{n} images but {} labels", lab.len()),
        });
    }
    let scale = S::c(1.0 / 255.0);
    let x = Tensor::new(vec![n, r * c], px.iter().map(|&p| S::c(p as f64) * scale).collect())?;
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(
        x,
        BTreeMap::from([(DIGIT_TASK.to_string(), labels)]),
        Metadata {
            example_shape: vec![r, c],
            classes: BTreeMap::from([(DIGIT_TASK.to_string(), classes)]),
            provenance: format!("idx:{}", images.display()),
        },
    )
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let per = rows * cols;
    if per == 0 || pixels.len() % per != 0 {
        return Err(Error::Config(format!("{} pixels do not tile {rows}x{cols} images", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes an uncompressed IDX image/label pair.
pub fn write_idx(images: &Path, labels: &Path, rows: usize, cols: usize, pixels: &[u8], label_bytes: &[u8]) -> Result<()> {
    std::fs::write(images, encode_idx_images(rows, cols, pixels)?).map_err(|e| io_err(images, e))?;
    std::fs::write(labels, encode_idx_labels(label_bytes)).map_err(|e| io_err(labels, e))
}

// ---- derived datasets -------------------------------------------------------

/// Multiplies each grayscale image by a colour drawn uniformly from `palette`
/// and adds the colour index as the `color` task. Output pixels are laid out
/// `[rows, cols, 3]`.
pub fn colorize<S: Scalar>(d: &Dataset<S>, palette: &[[f64; 3]], seed: u64) -> Result<Dataset<S>> {
    if palette.len() < 2 {
        return Err(Error::Config(format!("palette needs at least 2 colours, got {}", palette.len())));
    }
    if palette.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
        return Err(Error::Config("palette entries must lie in [0, 1]".into()));
    }
    if d.meta.example_shape.len() != 2 {
        return Err(Error::Config(format!(
            "colorize expects grayscale [rows, cols] examples, got {:?}",
            d.meta.example_shape
        )));
    }
    let mut rng = Streams::new(seed).stream("colorize");
    let k = palette.len();
    let colors: Vec<usize> = (0..d.len()).map(|_| rng.random_range(0..k)).collect();
    let p = d.dim();
    let mut data = Vec::with_capacity(d.len() * p * 3);
    for (i, &ci) in colors.iter().enumerate() {
        let rgb = palette[ci].map(S::c);
        for &v in d.x.row_slice(i) {
            data.extend(rgb.iter().map(|&c| v * c));
        }
    }
    let mut labels = d.labels.clone();
    labels.insert(COLOR_TASK.to_string(), colors);
    let mut meta = d.meta.clone();
    meta.example_shape.push(3);
    meta.classes.insert(COLOR_TASK.to_string(), k);
    meta.provenance = format!("{} | colorize(k={k}, seed={seed})", meta.provenance);
    Dataset::new(Tensor::new(vec![d.len(), p * 3], data)?, labels, meta)
}

/// `z ~ N(0, I)`, `x = W z + N(0, v I)` with `W` of shape `[obs, latent]`.
/// The `sign` task labels examples by whether `z_1 > 0`.
///
/// Values are not confined to `[0, 1]`; this generator exists for tests.
pub fn synth_linear_gaussian<S: Scalar>(n: usize, w: &Tensor<S>, v: S, seed: u64) -> Result<Dataset<S>> {
    if w.rank() != 2 {
        return Err(Error::Dimension {
            op: "synth_linear_gaussian",
            lhs: w.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !(v >= S::zero()) {
        return Err(Error::Domain(format!("noise variance {v} must be non-negative")));
    }
    let (obs, latent) = (w.rows(), w.cols());
    let streams = Streams::new(seed);
    let z = Tensor::new(vec![n, latent], normal_vec(&mut streams.stream("z"), n * latent))?;
    let mut x = z.matmul(&w.transpose()?)?;
    let noise: Vec<S> = normal_vec(&mut streams.stream("noise"), n * obs);
    let sd = v.sqrt();
    for (xi, e) in x.data_mut().iter_mut().zip(noise) {
        *xi += sd * e;
    }
    let labels: Vec<usize> = (0..n).map(|i| usize::from(latent > 0 && z.row_slice(i)[0] > S::zero())).collect();
    Dataset::new(
        x,
        BTreeMap::from([("sign".to_string(), labels)]),
        Metadata {
            example_shape: vec![obs],
            classes: BTreeMap::from([("sign".to_string(), 2)]),
            provenance: format!("synth_linear_gaussian(n={n}, v={v}, seed={seed})"),
        },
    )
}

// ---- cache ------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"AVDS";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    rows: usize,
    meta: Metadata,
    tasks: Vec<String>,
}

/// `AVDS`, u32 version, u32 header length, JSON header, f32 pixels, u32 labels
/// (all little-endian).
pub fn encode_cache<S: Scalar>(d: &Dataset<S>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CacheHeader {
        rows: d.len(),
        meta: d.meta.clone(),
        tasks: d.labels.keys().cloned().collect(),
    })
    .map_err(|e| Error::Io(e.into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + d.x.len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in d.x.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    for l in d.labels.values() {
        for &c in l {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            msg: format!("truncated {what}"),
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

pub fn decode_cache<S: Scalar>(b: &[u8]) -> Result<Dataset<S>> {
    let mut c = Cursor { b, pos: 0 };
    if c.take(4, "magic")? != CACHE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a dataset cache".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported cache version {version}"),
        });
    }
    let hl = c.u32("header length")? as usize;
    let at = c.pos;
    let header: CacheHeader = serde_json::from_slice(c.take(hl, "header")?).map_err(|e| Error::Format {
        offset: at as u64,
        msg: format!("bad header: {e}"),
    })?;
    let dim: usize = header.meta.example_shape.iter().product();
    let count = header.rows.checked_mul(dim).ok_or_else(|| Error::Format {
        offset: at as u64,
        msg: "dimensions overflow".into(),
    })?;
    let px = c.take(count.checked_mul(4).unwrap_or(usize::MAX), "pixels")?;
    let x: Vec<S> = px
        .chunks_exact(4)
        .map(|s| S::c(f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64))
        .collect();
    let mut labels = BTreeMap::new();
    for t in header.tasks {
        let mut l = Vec::with_capacity(header.rows);
        for _ in 0..header.rows {
            l.push(c.u32("labels")? as usize);
        }
        labels.insert(t, l);
    }
    if c.pos != b.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: "trailing bytes after labels".into(),
        });
    }
    Dataset::new(Tensor::new(vec![header.rows, dim], x)?, labels, header.meta)
}

pub fn save_cache<S: Scalar>(d: &Dataset<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_cache(d)?).map_err(|e| io_err(path, e))
}

pub fn load_cache<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let b = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_cache(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_a_format_error() {
        assert!(matches!(parse_idx_images(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let mut b = encode_idx_images(2, 2, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        b.truncate(20);
        match parse_idx_images(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
    }
}
