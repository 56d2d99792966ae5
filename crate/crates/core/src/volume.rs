//! 3-D volumes and their on-disk form: a raw little-endian payload in C
//! order next to a `<payload>.json` header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element types a volume can hold on disk.
pub trait Voxel: Copy + PartialEq + Default + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn push_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
    /// Describes the first value this type refuses, if any.
    fn check(data: &[Self]) -> Option<String>;
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32le";
    const BYTES: usize = 4;

    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    fn check(_: &[Self]) -> Option<String> {
        None
    }
}

/// Masks: only 0 and 1 are valid.
impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;

    fn push_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn from_le(b: &[u8]) -> Self {
        b[0]
    }

    fn check(data: &[Self]) -> Option<String> {
        data.iter()
            .position(|&v| v > 1)
            .map(|i| format!("mask value {} at voxel {i} is not 0 or 1", data[i]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<V>,
}

impl<V: Voxel> Volume<V> {
    /// `shape` is `[D, H, W]`, `spacing` `[sz, sy, sx]` in mm.
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<V>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("volume {shape:?} needs {} voxels, got {}", shape.iter().product::<usize>(), data.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        if let Some(why) = V::check(&data) {
            return Err(Error::InvalidArgument(why));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: V) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> V {
        self.data[self.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[V] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    /// Same geometry, values replaced through `f`.
    pub fn map<U: Voxel>(&self, f: impl Fn(V) -> U) -> Result<Volume<U>> {
        Volume::new(self.shape, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: [usize; 3],
    spacing: [f64; 3],
}

/// Path of the JSON header that describes the payload at `path`.
pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_volume<V: Voxel>(volume: &Volume<V>, path: &Path) -> Result<()> {
    if let Some(why) = V::check(&volume.data) {
        return Err(Error::InvalidArgument(why));
    }
    let header = Header { dtype: V::DTYPE.to_string(), shape: volume.shape, spacing: volume.spacing };
    let mut payload = Vec::with_capacity(volume.data.len() * V::BYTES);
    for &v in &volume.data {
        v.push_le(&mut payload);
    }
    let hpath = header_path(path);
    fs::write(&hpath, serde_json::to_string(&header)?).map_err(|e| Error::io(&hpath, e))?;
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

pub fn read_volume<V: Voxel>(path: &Path) -> Result<Volume<V>> {
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(&hpath, e.to_string()))?;
    match header.dtype.as_str() {
        "f32le" | "u8" => {}
        other => return Err(Error::format(&hpath, format!("unknown dtype {other:?}"))),
    }
    if header.dtype != V::DTYPE {
        return Err(Error::format(&hpath, format!("dtype {}, expected {}", header.dtype, V::DTYPE)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.shape.iter().product::<usize>() * V::BYTES;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("payload has {} bytes, header implies {expected}", bytes.len())));
    }
    let data = bytes.chunks_exact(V::BYTES).map(V::from_le).collect();
    Volume::new(header.shape, header.spacing, data).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.f32raw");
        let v = Volume::new([2, 1, 3], [0.7, 0.5, 0.5], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e30]).unwrap();
        write_volume(&v, &p).unwrap();
        let back: Volume<f32> = read_volume(&p).unwrap();
        assert_eq!(back.shape(), v.shape());
        assert_eq!(back.spacing(), v.spacing());
        let bits = |x: &Volume<f32>| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn short_payload_and_wrong_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.u8raw");
        write_volume(&Volume::new([1, 2, 2], [1.0; 3], vec![0u8, 1, 1, 0]).unwrap(), &p).unwrap();
        assert!(read_volume::<f32>(&p).is_err());
        fs::write(&p, [0u8, 1, 1]).unwrap();
        assert!(matches!(read_volume::<u8>(&p), Err(Error::Format { .. })));
        fs::write(header_path(&p), r#"{"dtype":"i16","shape":[1,2,2],"spacing":[1,1,1]}"#).unwrap();
        assert!(read_volume::<u8>(&p).unwrap_err().to_string().contains("unknown dtype"));
    }

    #[test]
    fn mask_value_two_rejected() {
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0u8, 2]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0u8]).is_err());
    }
}
