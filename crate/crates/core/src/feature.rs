//! Local feature types, keypoint selection and image-pyramid geometry.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of features kept per image after selection.
pub const DEFAULT_FEATURE_CAP: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for Descriptor {
    fn from(v: Vec<f64>) -> Self {
        Descriptor(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalFeature {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub score: f64,
    pub descriptor: Descriptor,
}

impl LocalFeature {
    pub fn location(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite()) {
            return Err(Error::invalid("feature location must be finite"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("feature scale must be positive, got {}", self.scale)));
        }
        if !(self.score >= 0.0 && self.score.is_finite()) {
            return Err(Error::invalid(format!("feature score must be non-negative, got {}", self.score)));
        }
        if self.descriptor.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("descriptor entries must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub image_id: String,
    pub features: Vec<LocalFeature>,
}

impl ImageFeatures {
    pub fn new(image_id: impl Into<String>, features: Vec<LocalFeature>) -> Self {
        ImageFeatures {
            image_id: image_id.into(),
            features,
        }
    }

    /// Dimension shared by all descriptors, `None` for an empty image.
    pub fn descriptor_dim(&self) -> Result<Option<usize>> {
        let mut dim = None;
        for f in &self.features {
            match dim {
                None => dim = Some(f.descriptor.dim()),
                Some(d) if d != f.descriptor.dim() => {
                    return Err(Error::invalid(format!(
                        "image {}: descriptor dimension {} != {}",
                        self.image_id,
                        f.descriptor.dim(),
                        d
                    )))
                }
                _ => {}
            }
        }
        Ok(dim)
    }

    /// Keep the `cap` highest-scoring features.
    pub fn select_top(&self, cap: usize) -> ImageFeatures {
        ImageFeatures {
            image_id: self.image_id.clone(),
            features: select_top_by_score(&self.features, cap),
        }
    }
}

/// Returns the `cap` features with the largest score, best first. Equal
/// scores keep their input order.
pub fn select_top_by_score(features: &[LocalFeature], cap: usize) -> Vec<LocalFeature> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        features[b]
            .score
            .total_cmp(&features[a].score)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(cap)
        .map(|i| features[i].clone())
        .collect()
}

/// Keypoint scores from descriptor magnitude, the selection rule used
/// when no attention scorer is available.
pub fn l2_norm_scores(descriptors: &[Descriptor]) -> Result<Vec<f64>> {
    let Some(first) = descriptors.first() else {
        return Err(Error::invalid("no descriptors to score"));
    };
    let dim = first.dim();
    descriptors
        .iter()
        .map(|d| {
            if d.dim() != dim {
                Err(Error::invalid(format!(
                    "descriptor dimension {} != {}",
                    d.dim(),
                    dim
                )))
            } else {
                Ok(d.norm())
            }
        })
        .collect()
}

/// Geometric sequence of pyramid scales.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSchedule {
    pub min_scale: f64,
    pub max_scale: f64,
    pub factor: f64,
    pub scales: Vec<f64>,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        scale_schedule(0.25, 2.0, std::f64::consts::SQRT_2).expect("default schedule is valid")
    }
}

pub fn scale_schedule(min_scale: f64, max_scale: f64, factor: f64) -> Result<ScaleSchedule> {
    if !(min_scale > 0.0 && min_scale <= max_scale && max_scale.is_finite()) {
        return Err(Error::invalid(format!(
            "scale range must satisfy 0 < min <= max, got [{min_scale}, {max_scale}]"
        )));
    }
    if !(factor > 1.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("scale factor must exceed 1, got {factor}")));
    }
    let limit = max_scale * (1.0 + 1e-9);
    let mut scales = Vec::new();
    let mut i = 0i32;
    loop {
        let s = min_scale * factor.powi(i);
        if s > limit {
            break;
        }
        scales.push(s);
        i += 1;
    }
    // powi drift would otherwise leave the top endpoint a few ulps off
    if let Some(last) = scales.last_mut() {
        if (*last - max_scale).abs() <= max_scale * 1e-9 {
            *last = max_scale;
        }
    }
    Ok(ScaleSchedule {
        min_scale,
        max_scale,
        factor,
        scales,
    })
}

/// Receptive field geometry of the feature extractor at scale 1.0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveFieldSpec {
    pub base_size: u32,
    pub base_stride: u32,
}

impl Default for ReceptiveFieldSpec {
    fn default() -> Self {
        ReceptiveFieldSpec {
            base_size: 291,
            base_stride: 32,
        }
    }
}

/// Receptive field side in original-image pixels; shrinks as the image is
/// upscaled. Rounds half up.
pub fn receptive_field_size(spec: ReceptiveFieldSpec, scale: f64) -> u32 {
    (spec.base_size as f64 / scale + 0.5).floor() as u32
}

/// Center of grid cell `(row, col)` in original-image coordinates.
pub fn feature_center(spec: ReceptiveFieldSpec, row: u32, col: u32, scale: f64) -> (f64, f64) {
    let stride = spec.base_stride as f64;
    (
        (col as f64 + 0.5) * stride / scale,
        (row as f64 + 0.5) * stride / scale,
    )
}

/// Flattens per-scale feature lists into one list (scale order preserved)
/// so that selection ranks across the whole pyramid.
pub fn merge_pyramid(levels: Vec<Vec<LocalFeature>>) -> Vec<LocalFeature> {
    levels.into_iter().flatten().collect()
}

// ---------------------------------------------------------------------------
// Feature files

pub fn write_jsonl<W: Write>(images: &[ImageFeatures], mut out: W) -> Result<()> {
    for img in images {
        serde_json::to_writer(&mut out, img)
            .map_err(|e| Error::format("feature record", e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<ImageFeatures>> {
    let mut images = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let img: ImageFeatures = serde_json::from_str(&line)
            .map_err(|e| Error::format("feature record", format!("line {}: {e}", lineno + 1)))?;
        for f in &img.features {
            f.validate()?;
        }
        img.descriptor_dim()?;
        images.push(img);
    }
    Ok(images)
}

pub const BINARY_MAGIC: [u8; 4] = *b"DLF1";
/// Bytes reserved for the zero-padded UTF-8 image id in a binary record.
pub const BINARY_ID_BYTES: usize = 32;

/// Binary feature file: magic `DLF1`, u32 record count, u32 descriptor
/// dimension, then one fixed-width record per feature:
/// `[u8; 32]` image id, f64 x, y, scale, score, `dim` × f64 descriptor.
/// All little-endian. Features of one image are contiguous.
pub fn write_binary<W: Write>(images: &[ImageFeatures], mut out: W) -> Result<()> {
    let mut dim = None;
    let mut count = 0u64;
    for img in images {
        if img.image_id.len() > BINARY_ID_BYTES {
            return Err(Error::invalid(format!(
                "image id {:?} longer than {BINARY_ID_BYTES} bytes",
                img.image_id
            )));
        }
        if let Some(d) = img.descriptor_dim()? {
            if *dim.get_or_insert(d) != d {
                return Err(Error::invalid("descriptor dimension differs between images"));
            }
        }
        count += img.features.len() as u64;
    }
    let count = u32::try_from(count).map_err(|_| Error::invalid("too many features for u32 count"))?;
    out.write_all(&BINARY_MAGIC)?;
    out.write_all(&count.to_le_bytes())?;
    out.write_all(&(dim.unwrap_or(0) as u32).to_le_bytes())?;
    for img in images {
        let mut id = [0u8; BINARY_ID_BYTES];
        id[..img.image_id.len()].copy_from_slice(img.image_id.as_bytes());
        for f in &img.features {
            out.write_all(&id)?;
            for v in [f.x, f.y, f.scale, f.score] {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in &f.descriptor.0 {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<Vec<ImageFeatures>> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic)?;
    if magic != BINARY_MAGIC {
        return Err(Error::BadMagic {
            field: "feature file magic",
            expected: BINARY_MAGIC,
            found: magic,
        });
    }
    let mut word = [0u8; 4];
    read_exact(&mut input, &mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    read_exact(&mut input, &mut word)?;
    let dim = u32::from_le_bytes(word) as usize;

    let mut images: Vec<ImageFeatures> = Vec::new();
    let mut record = vec![0u8; BINARY_ID_BYTES + 8 * (4 + dim)];
    for _ in 0..count {
        read_exact(&mut input, &mut record)?;
        let id_end = record[..BINARY_ID_BYTES]
            .iter()
            .position(|&b| b == 0)
            .unwrap_or(BINARY_ID_BYTES);
        let image_id = std::str::from_utf8(&record[..id_end])
            .map_err(|_| Error::format("feature record", "image id is not UTF-8"))?;
        let vals: Vec<f64> = record[BINARY_ID_BYTES..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let feature = LocalFeature {
            x: vals[0],
            y: vals[1],
            scale: vals[2],
            score: vals[3],
            descriptor: Descriptor(vals[4..].to_vec()),
        };
        feature.validate()?;
        match images.last_mut() {
            Some(img) if img.image_id == image_id => img.features.push(feature),
            _ => images.push(ImageFeatures::new(image_id, vec![feature])),
        }
    }
    Ok(images)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("feature file", "truncated")
        } else {
            Error::Io(e)
        }
    })
}

/// Reads a feature file, choosing the binary reader when the file starts
/// with the binary magic.
pub fn read_features_file(path: &std::path::Path) -> Result<Vec<ImageFeatures>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&BINARY_MAGIC) {
        read_binary(&bytes[..])
    } else {
        read_jsonl(&bytes[..])
    }
}
