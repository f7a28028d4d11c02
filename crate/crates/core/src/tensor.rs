//! Dense multi-channel feature maps.
//!
//! Storage is channel-major and row-major within a channel, so the entry at
//! `(c, y, x)` lives at `(c * H + y) * W + x` and horizontally adjacent pixels
//! are adjacent in memory.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Scalar;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        let shape = Shape {
            channels,
            height,
            width,
        };
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(shape));
        }
        Ok(shape)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        let shape = Shape::new(shape.channels, shape.height, shape.width)?;
        Ok(FeatureMap {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(shape.channels, shape.height, shape.width)?;
        if data.len() != shape.len() {
            return Err(Error::DataLength {
                shape,
                expected: shape.len(),
                len: data.len(),
            });
        }
        Ok(FeatureMap { shape, data })
    }

    /// Builds a map by evaluating `f(c, y, x)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let shape = Shape::new(shape.channels, shape.height, shape.width)?;
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Ok(FeatureMap { shape, data })
    }

    /// Entries drawn uniformly from `[-1, 1)` by a ChaCha8 stream.
    pub fn random(shape: Shape, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(shape, |_, _, _| T::from_f64(rng.gen_range(-1.0..1.0)))
    }

    /// Wraps storage whose length the caller has already checked.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        FeatureMap { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.channels && y < self.shape.height && x < self.shape.width);
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: T) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pads every side by `margin` pixels of `value`.
    pub fn pad(&self, margin: usize, value: T) -> Self {
        self.pad_asym(margin, margin, value)
    }

    /// Pads the top and left by `lead` pixels and the bottom and right by
    /// `trail` pixels.
    pub fn pad_asym(&self, lead: usize, trail: usize, value: T) -> Self {
        let Shape {
            channels,
            height,
            width,
        } = self.shape;
        let out_shape = Shape {
            channels,
            height: height + lead + trail,
            width: width + lead + trail,
        };
        let mut data = vec![value; out_shape.len()];
        for c in 0..channels {
            for y in 0..height {
                let src = &self.data[(c * height + y) * width..][..width];
                let start = (c * out_shape.height + y + lead) * out_shape.width + lead;
                data[start..start + width].copy_from_slice(src);
            }
        }
        FeatureMap {
            shape: out_shape,
            data,
        }
    }

    /// Copies the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let shape = Shape::new(self.shape.channels, height, width)?;
        if top + height > self.shape.height || left + width > self.shape.width {
            return Err(Error::PatchOutOfBounds {
                y: top + height / 2,
                x: left + width / 2,
                size: height.max(width),
                height: self.shape.height,
                width: self.shape.width,
            });
        }
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in top..top + height {
                let row = (c * self.shape.height + y) * self.shape.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(FeatureMap { shape, data })
    }

    /// Extracts the `size x size` patch centred at `(center_y, center_x)`.
    ///
    /// The centre of a patch sits at offset `size / 2`, so for even sizes
    /// the window extends one pixel further before the centre than after it.
    pub fn crop_patch(&self, center_y: usize, center_x: usize, size: usize) -> Result<Self> {
        let half = size / 2;
        let out_of_bounds = || Error::PatchOutOfBounds {
            y: center_y,
            x: center_x,
            size,
            height: self.shape.height,
            width: self.shape.width,
        };
        if size == 0 || center_y < half || center_x < half {
            return Err(out_of_bounds());
        }
        let (top, left) = (center_y - half, center_x - half);
        if top + size > self.shape.height || left + size > self.shape.width {
            return Err(out_of_bounds());
        }
        self.crop(top, left, size, size)
    }

    /// Largest absolute entrywise difference; zero iff the maps are equal.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes as FMAP: magic, three little-endian `u32` dims (C, H, W),
    /// then the entries as little-endian `f32` in storage order.
    pub fn to_fmap_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FMAP_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FMAP_MAGIC);
        for dim in [self.shape.channels, self.shape.height, self.shape.width] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out
    }

    /// Parses one FMAP record from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn from_fmap_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < FMAP_HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != FMAP_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let shape = Shape::new(dim(0) as usize, dim(1) as usize, dim(2) as usize)
            .map_err(|e| Error::Format(e.to_string()))?;
        let end = FMAP_HEADER_LEN + 4 * shape.len();
        if bytes.len() < end {
            return Err(Error::Format(format!(
                "shape {shape} needs {} payload bytes, found {}",
                4 * shape.len(),
                bytes.len() - FMAP_HEADER_LEN
            )));
        }
        let data = bytes[FMAP_HEADER_LEN..end]
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Ok((FeatureMap { shape, data }, end))
    }

    pub fn from_fmap_bytes(bytes: &[u8]) -> Result<Self> {
        let (map, used) = Self::from_fmap_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after record",
                bytes.len() - used
            )));
        }
        Ok(map)
    }

    pub fn read_fmap(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_fmap_bytes(&bytes)
    }

    pub fn write_fmap(&self, path: impl AsRef<Path>) -> Result<()> {
        write_fmaps(path, std::slice::from_ref(self))
    }
}

/// Reads a file holding several concatenated FMAP records.
pub fn read_fmaps<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<FeatureMap<T>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut maps = Vec::new();
    let mut rest = &bytes[..];
    while !rest.is_empty() {
        let (map, used) = FeatureMap::from_fmap_prefix(rest)?;
        maps.push(map);
        rest = &rest[used..];
    }
    Ok(maps)
}

pub fn write_fmaps<T: Scalar>(path: impl AsRef<Path>, maps: &[FeatureMap<T>]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for m in maps {
        file.write_all(&m.to_fmap_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
