//! Volumetric containers and the on-disk dataset format.
//!
//! Every scalar field is an `M x N x T` array of `f32` stored frame-major:
//! `index = t * (M * N) + m * N + n`. A single frame is therefore one
//! contiguous slice. Masks use the same layout with one byte per pixel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of a dynamic volume: rows, columns and frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
}

impl Dims {
    pub const fn new(rows: usize, cols: usize, frames: usize) -> Self {
        Self { rows, cols, frames }
    }

    /// Pixels per frame.
    pub const fn frame_len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols * self.frames
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, m: usize, n: usize, t: usize) -> usize {
        t * self.rows * self.cols + m * self.cols + n
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let frame_len = self.rows * self.cols;
        let t = index / frame_len;
        let rem = index % frame_len;
        (rem / self.cols, rem % self.cols, t)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.frames)
    }
}

/// What the values of a [`DynamicVolume`] represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeKind {
    Intensity,
    Probability,
    Dqc,
    MaskAsFloat,
}

impl VolumeKind {
    fn admits(self, v: f32) -> bool {
        match self {
            VolumeKind::Intensity => v.is_finite(),
            VolumeKind::Probability => (0.0..=1.0).contains(&v),
            VolumeKind::Dqc => v.is_finite() && v >= 0.0,
            VolumeKind::MaskAsFloat => v == 0.0 || v == 1.0,
        }
    }
}

/// A dense `M x N x T` scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicVolume {
    dims: Dims,
    kind: VolumeKind,
    data: Vec<f32>,
}

impl DynamicVolume {
    /// Builds a volume, validating the length and the value range implied by `kind`.
    pub fn new(dims: Dims, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "volume {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| !kind.admits(v)) {
            let (m, n, t) = dims.coords(pos);
            return Err(Error::Format(format!(
                "value {} at ({m},{n},{t}) is not a valid {kind:?} value",
                data[pos]
            )));
        }
        Ok(Self { dims, kind, data })
    }

    pub fn zeros(dims: Dims, kind: VolumeKind) -> Self {
        Self {
            dims,
            kind,
            data: vec![0.0; dims.len()],
        }
    }

    /// Fills a volume from a function of `(m, n, t)`.
    pub fn from_fn(
        dims: Dims,
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for t in 0..dims.frames {
            for m in 0..dims.rows {
                for n in 0..dims.cols {
                    data.push(f(m, n, t));
                }
            }
        }
        Self::new(dims, kind, data)
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, kind: VolumeKind, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self { dims, kind, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize, t: usize) -> f32 {
        self.data[self.dims.index(m, n, t)]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let len = self.dims.frame_len();
        &self.data[t * len..(t + 1) * len]
    }

    /// Multiplies every value by `c`, keeping the kind. `c` must keep values admissible.
    pub fn scaled(&self, c: f32) -> Result<Self> {
        Self::new(
            self.dims,
            self.kind,
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Decodes little-endian `f32` bytes, rejecting wrong lengths and non-finite values.
    pub fn from_le_bytes(dims: Dims, kind: VolumeKind, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != dims.len() * 4 {
            return Err(Error::Format(format!(
                "expected {} bytes for {dims} f32 volume, found {}",
                dims.len() * 4,
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite value in volume".into()));
        }
        Self::new(dims, kind, data)
    }
}

/// A binary `M x N x T` segmentation, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    dims: Dims,
    bits: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(dims: Dims, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::Shape(format!(
                "mask {dims} needs {} values, got {}",
                dims.len(),
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, bits })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(dims.len());
        for t in 0..dims.frames {
            for m in 0..dims.rows {
                for n in 0..dims.cols {
                    bits.push(u8::from(f(m, n, t)));
                }
            }
        }
        Self { dims, bits }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize, t: usize) -> bool {
        self.bits[self.dims.index(m, n, t)] != 0
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let len = self.dims.frame_len();
        &self.bits[t * len..(t + 1) * len]
    }

    /// Overwrites frame `t`.
    pub fn set_frame(&mut self, t: usize, frame: &[u8]) -> Result<()> {
        let len = self.dims.frame_len();
        if t >= self.dims.frames {
            return Err(Error::Bounds(format!(
                "frame {t} outside 0..{}",
                self.dims.frames
            )));
        }
        if frame.len() != len {
            return Err(Error::Shape(format!(
                "frame needs {len} pixels, got {}",
                frame.len()
            )));
        }
        if frame.iter().any(|&b| b > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        self.bits[t * len..(t + 1) * len].copy_from_slice(frame);
        Ok(())
    }

    /// Number of set pixels in frame `t`.
    pub fn area(&self, t: usize) -> usize {
        self.frame(t).iter().filter(|&&b| b != 0).count()
    }

    pub fn areas(&self) -> Vec<usize> {
        (0..self.dims.frames).map(|t| self.area(t)).collect()
    }

    pub fn to_float(&self) -> DynamicVolume {
        DynamicVolume::from_parts_unchecked(
            self.dims,
            VolumeKind::MaskAsFloat,
            self.bits.iter().map(|&b| f32::from(b)).collect(),
        )
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.bits.clone()
    }

    pub fn from_le_bytes(dims: Dims, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != dims.len() {
            return Err(Error::Format(format!(
                "expected {} bytes for {dims} mask, found {}",
                dims.len(),
                bytes.len()
            )));
        }
        Self::new(dims, bytes.to_vec())
    }
}

/// Anything with a raw little-endian on-disk encoding.
pub trait RawVolume {
    fn raw_bytes(&self) -> Vec<u8>;
}

impl RawVolume for DynamicVolume {
    fn raw_bytes(&self) -> Vec<u8> {
        self.to_le_bytes()
    }
}

impl RawVolume for SegmentationMask {
    fn raw_bytes(&self) -> Vec<u8> {
        self.to_le_bytes()
    }
}

pub fn write_volume(vol: &impl RawVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, vol.raw_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>, dims: Dims, kind: VolumeKind) -> Result<DynamicVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DynamicVolume::from_le_bytes(dims, kind, &bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_mask(path: impl AsRef<Path>, dims: Dims) -> Result<SegmentationMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SegmentationMask::from_le_bytes(dims, &bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One acquired 2D+time series with optional reference data.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub slice_id: String,
    pub image: DynamicVolume,
    pub truth: Option<SegmentationMask>,
    /// Per-frame difficulty grade, 1 = hard.
    pub grades: Option<Vec<u8>>,
}

impl SliceRecord {
    pub fn new(
        slice_id: impl Into<String>,
        image: DynamicVolume,
        truth: Option<SegmentationMask>,
        grades: Option<Vec<u8>>,
    ) -> Result<Self> {
        let record = Self {
            slice_id: slice_id.into(),
            image,
            truth,
            grades,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }

    fn validate(&self) -> Result<()> {
        let dims = self.image.dims();
        if let Some(truth) = &self.truth {
            if truth.dims() != dims {
                return Err(Error::Format(format!(
                    "slice {}: truth dims {} differ from image dims {dims}",
                    self.slice_id,
                    truth.dims()
                )));
            }
        }
        if let Some(grades) = &self.grades {
            if grades.len() != dims.frames {
                return Err(Error::Format(format!(
                    "slice {}: {} grades for {} frames",
                    self.slice_id,
                    grades.len(),
                    dims.frames
                )));
            }
            if grades.iter().any(|&g| g > 1) {
                return Err(Error::Format(format!(
                    "slice {}: grades must be 0 or 1",
                    self.slice_id
                )));
            }
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub slices: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(rename = "M")]
    pub rows: usize,
    #[serde(rename = "N")]
    pub cols: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grades: Option<String>,
}

impl ManifestEntry {
    pub fn dims(&self) -> Dims {
        Dims::new(self.rows, self.cols, self.frames)
    }
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads every slice listed in `dir/manifest.json`, in manifest order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SliceRecord>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .slices
        .iter()
        .map(|entry| read_entry(dir, entry))
        .collect()
}

fn read_entry(dir: &Path, entry: &ManifestEntry) -> Result<SliceRecord> {
    let dims = entry.dims();
    let image = read_volume(dir.join(&entry.image), dims, VolumeKind::Intensity)?;
    let truth = entry
        .truth
        .as_ref()
        .map(|p| read_mask(dir.join(p), dims))
        .transpose()?;
    let grades = entry
        .grades
        .as_ref()
        .map(|p| -> Result<Vec<u8>> {
            let path = dir.join(p);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .transpose()?;
    SliceRecord::new(entry.id.clone(), image, truth, grades)
}

fn slice_paths(id: &str) -> (String, String, String) {
    (
        format!("slices/{id}/image.f32"),
        format!("slices/{id}/truth.u8"),
        format!("slices/{id}/grades.json"),
    )
}

/// Writes `slices` plus a manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: impl AsRef<Path>, slices: &[SliceRecord]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(slices.len());
    for slice in slices {
        let (image_rel, truth_rel, grades_rel) = slice_paths(&slice.slice_id);
        write_volume(&slice.image, dir.join(&image_rel))?;
        let truth = match &slice.truth {
            Some(mask) => {
                write_volume(mask, dir.join(&truth_rel))?;
                Some(truth_rel)
            }
            None => None,
        };
        let grades = match &slice.grades {
            Some(g) => {
                write_json(dir.join(&grades_rel), g)?;
                Some(grades_rel)
            }
            None => None,
        };
        let dims = slice.dims();
        entries.push(ManifestEntry {
            id: slice.slice_id.clone(),
            rows: dims.rows,
            cols: dims.cols,
            frames: dims.frames,
            image: image_rel,
            truth,
            grades,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        slices: entries,
    };
    write_json(dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Writes through a sibling temp file and a rename, so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float_volume_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32");
        let vol = DynamicVolume::new(
            Dims::new(2, 2, 1),
            VolumeKind::Intensity,
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        write_volume(&vol, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
        assert_eq!(read_volume(&path, vol.dims(), VolumeKind::Intensity).unwrap(), vol);
    }

    #[test]
    fn mask_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.u8");
        let mask = SegmentationMask::new(Dims::new(2, 2, 1), vec![1, 0, 0, 1]).unwrap();
        write_volume(&mask, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), vec![1, 0, 0, 1]);
        assert_eq!(read_mask(&path, mask.dims()).unwrap(), mask);
    }

    #[test]
    fn kind_invariants_are_enforced() {
        let dims = Dims::new(1, 2, 1);
        assert!(DynamicVolume::new(dims, VolumeKind::Probability, vec![0.5, 1.2]).is_err());
        assert!(DynamicVolume::new(dims, VolumeKind::Dqc, vec![0.5, -0.1]).is_err());
        assert!(DynamicVolume::new(dims, VolumeKind::MaskAsFloat, vec![0.0, 0.5]).is_err());
        assert!(DynamicVolume::new(dims, VolumeKind::Intensity, vec![f32::NAN, 0.0]).is_err());
        assert!(DynamicVolume::new(dims, VolumeKind::Intensity, vec![0.0]).is_err());
    }

    #[test]
    fn mask_area_counts_per_frame() {
        let mask = SegmentationMask::new(Dims::new(2, 2, 2), vec![1, 1, 0, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(mask.areas(), vec![3, 0]);
    }

    #[test]
    fn missing_manifest_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Config(_))));
    }

    fn sample_slice(id: &str, dims: Dims, seed: u32) -> SliceRecord {
        let image = DynamicVolume::from_fn(dims, VolumeKind::Intensity, |m, n, t| {
            (m * 31 + n * 7 + t * 3 + seed as usize) as f32 * 0.25
        })
        .unwrap();
        let truth = SegmentationMask::from_fn(dims, |m, n, _| (m + n) % 3 == 0);
        let grades = (0..dims.frames).map(|t| (t % 2) as u8).collect();
        SliceRecord::new(id, image, Some(truth), Some(grades)).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(128, 128, 25);
        let slices = vec![sample_slice("a", dims, 1), sample_slice("b", dims, 2)];
        write_dataset(dir.path(), &slices).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].image.data().len(), 409_600);
        assert_eq!(loaded, slices);

        // byte-level comparison of a rewrite
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &loaded).unwrap();
        for rel in ["manifest.json", "slices/a/image.f32", "slices/b/truth.u8"] {
            assert_eq!(
                fs::read(dir.path().join(rel)).unwrap(),
                fs::read(dir2.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn truncated_truth_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(4, 4, 2);
        write_dataset(dir.path(), &[sample_slice("a", dims, 0)]).unwrap();
        fs::write(dir.path().join("slices/a/truth.u8"), vec![0u8; 31]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_image_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(2, 2, 1);
        write_dataset(dir.path(), &[sample_slice("a", dims, 0)]).unwrap();
        let mut bytes = fs::read(dir.path().join("slices/a/image.f32")).unwrap();
        bytes[4..8].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(dir.path().join("slices/a/image.f32"), bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_grade_count_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(2, 2, 3);
        write_dataset(dir.path(), &[sample_slice("a", dims, 0)]).unwrap();
        fs::write(dir.path().join("slices/a/grades.json"), "[0, 1]").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn index_is_bijective(rows in 1usize..9, cols in 1usize..9, frames in 1usize..5) {
            let dims = Dims::new(rows, cols, frames);
            let mut seen = vec![false; dims.len()];
            for t in 0..frames {
                for m in 0..rows {
                    for n in 0..cols {
                        let i = dims.index(m, n, t);
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                        prop_assert_eq!(dims.coords(i), (m, n, t));
                    }
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }

        #[test]
        fn raw_bytes_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let dims = Dims::new(2, 3, 2);
            let vol = DynamicVolume::new(dims, VolumeKind::Intensity, values).unwrap();
            let back = DynamicVolume::from_le_bytes(dims, VolumeKind::Intensity, &vol.to_le_bytes()).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            vol.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
