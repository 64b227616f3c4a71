//! Row-major rasters and their `.raw` container.
//!
//! Layout: 16-byte little-endian header `b"GAR1"`, `u32` width, `u32`
//! height, `u32` element kind (1 = `f32` depth in meters, 2 = `u8` mask),
//! followed by `width * height` elements, little-endian.

use std::fs;
use std::path::Path;

use super::SceneError;

pub const RASTER_MAGIC: &[u8; 4] = b"GAR1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum RasterKind {
    Depth = 1,
    Mask = 2,
}

impl RasterKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Self::Depth),
            2 => Some(Self::Mask),
            _ => None,
        }
    }

    fn element_size(self) -> usize {
        match self {
            Self::Depth => 4,
            Self::Mask => 1,
        }
    }
}

/// Metric depth per pixel; `0.0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRaster {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthRaster {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, SceneError> {
        check_count("depth", width, height, values.len())?;
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(SceneError::InvalidField {
                field: "depth".into(),
                reason: format!("pixel {i} has invalid depth {v}"),
            });
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.values[(v as usize) * self.width as usize + u as usize]
    }
}

/// Binary instance mask; nonzero bytes are inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRaster {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl MaskRaster {
    pub fn new(width: u32, height: u32, values: Vec<u8>) -> Result<Self, SceneError> {
        check_count("mask", width, height, values.len())?;
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        self.values[(v as usize) * self.width as usize + u as usize] != 0
    }

    /// Tight pixel bound of the inside region as half-open
    /// `[u_min, v_min, u_max, v_max]`, or `None` for an empty mask.
    pub fn bounds(&self) -> Option<[u32; 4]> {
        let mut b: Option<[u32; 4]> = None;
        for (i, _) in self.values.iter().enumerate().filter(|(_, m)| **m != 0) {
            let u = (i % self.width as usize) as u32;
            let v = (i / self.width as usize) as u32;
            b = Some(match b {
                None => [u, v, u + 1, v + 1],
                Some([a, c, d, e]) => [a.min(u), c.min(v), d.max(u + 1), e.max(v + 1)],
            });
        }
        b
    }
}

fn check_count(field: &str, width: u32, height: u32, len: usize) -> Result<(), SceneError> {
    let expected = width as usize * height as usize;
    if width == 0 || height == 0 || expected != len {
        return Err(SceneError::DimensionMismatch {
            field: field.into(),
            expected: format!("{width}x{height} = {expected} values"),
            found: format!("{len} values"),
        });
    }
    Ok(())
}

fn encode(kind: RasterKind, width: u32, height: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(body);
    out
}

fn decode<'a>(path: &Path, bytes: &'a [u8], want: RasterKind) -> Result<(u32, u32, &'a [u8]), SceneError> {
    let malformed = |reason: String| SceneError::MalformedHeader { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(malformed(format!("file is {} bytes, header needs 16", bytes.len())));
    }
    if &bytes[..4] != RASTER_MAGIC {
        return Err(malformed("bad magic, expected GAR1".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height, kind) = (word(4), word(8), word(12));
    let kind = RasterKind::from_u32(kind).ok_or_else(|| malformed(format!("unknown element kind {kind}")))?;
    if kind != want {
        return Err(malformed(format!("element kind {kind:?}, expected {want:?}")));
    }
    let body = &bytes[HEADER_LEN..];
    let expected = width as usize * height as usize * kind.element_size();
    if body.len() != expected {
        return Err(SceneError::DimensionMismatch {
            field: path.display().to_string(),
            expected: format!("{width}x{height} payload of {expected} bytes"),
            found: format!("{} bytes", body.len()),
        });
    }
    Ok((width, height, body))
}

pub fn encode_depth(r: &DepthRaster) -> Vec<u8> {
    let body: Vec<u8> = r.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(RasterKind::Depth, r.width, r.height, &body)
}

pub fn encode_mask(r: &MaskRaster) -> Vec<u8> {
    encode(RasterKind::Mask, r.width, r.height, &r.values)
}

pub fn decode_depth(path: &Path, bytes: &[u8]) -> Result<DepthRaster, SceneError> {
    let (w, h, body) = decode(path, bytes, RasterKind::Depth)?;
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    DepthRaster::new(w, h, values)
}

pub fn decode_mask(path: &Path, bytes: &[u8]) -> Result<MaskRaster, SceneError> {
    let (w, h, body) = decode(path, bytes, RasterKind::Mask)?;
    MaskRaster::new(w, h, body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, SceneError> {
    fs::read(path).map_err(|e| SceneError::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<DepthRaster, SceneError> {
    decode_depth(path, &read(path)?)
}

pub fn read_mask(path: &Path) -> Result<MaskRaster, SceneError> {
    decode_mask(path, &read(path)?)
}

pub fn write_depth(path: &Path, r: &DepthRaster) -> Result<(), SceneError> {
    fs::write(path, encode_depth(r)).map_err(|e| SceneError::io(path, e))
}

pub fn write_mask(path: &Path, r: &MaskRaster) -> Result<(), SceneError> {
    fs::write(path, encode_mask(r)).map_err(|e| SceneError::io(path, e))
}

/// Nearest-neighbour resample to `width x height`.
pub(crate) fn resample_index(dst: u32, dst_extent: u32, src_extent: u32) -> u32 {
    let x = ((dst as f64 + 0.5) * src_extent as f64 / dst_extent as f64).floor() as u32;
    x.min(src_extent - 1)
}

pub fn resample_depth(r: &DepthRaster, width: u32, height: u32) -> DepthRaster {
    let values = (0..height)
        .flat_map(|v| {
            (0..width).map(move |u| r.get(resample_index(u, width, r.width), resample_index(v, height, r.height)))
        })
        .collect();
    DepthRaster { width, height, values }
}

pub fn resample_mask(r: &MaskRaster, width: u32, height: u32) -> MaskRaster {
    let values = (0..height)
        .flat_map(|v| {
            (0..width).map(move |u| {
                let (su, sv) = (resample_index(u, width, r.width), resample_index(v, height, r.height));
                r.values[sv as usize * r.width as usize + su as usize]
            })
        })
        .collect();
    MaskRaster { width, height, values }
}
