use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::scalar::Real;
use crate::{Error, Result};

/// Magic bytes opening the binary field format.
pub const FIELD_MAGIC: [u8; 8] = *b"FCFIELD1";

/// Row-major real grid. All values are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("empty grid {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Size(format!("{} values for a {width}x{height} grid", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at index {i}")));
        }
        Ok(Field { width, height, data })
    }

    /// Builds a field from already-validated data; finiteness is the caller's concern.
    pub(crate) fn from_parts(width: usize, height: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Field { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "empty grid");
        Field::from_parts(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Size("ragged rows".into()));
        }
        Self::new(width, height, rows.concat())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Field::from_parts(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &Field<T>, scale: T) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + scale * b).collect();
        Ok(Field::from_parts(self.width, self.height, data))
    }

    pub fn scaled(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// Sum of squared differences.
    pub fn squared_distance(&self, other: &Field<T>) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b) * (a - b)).sum())
    }

    /// Per-pixel mean squared difference.
    pub fn mse(&self, other: &Field<T>) -> Result<T> {
        Ok(self.squared_distance(other)? / T::from_usize_lossy(self.len()))
    }

    pub fn sum_of_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Population mean and variance.
    pub fn stats(&self) -> (T, T) {
        let n = T::from_usize_lossy(self.len());
        let mean = self.data.iter().copied().sum::<T>() / n;
        let var = self.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        (mean, var)
    }

    /// Averages non-overlapping `factor`×`factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Size(format!("factor {factor} does not divide {}x{}", self.width, self.height)));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let inv = T::one() / T::from_usize_lossy(factor * factor);
        let mut out = vec![T::zero(); w * h];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            let dst = &mut out[(y / factor) * w..(y / factor + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                dst[x / factor] += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(Field::from_parts(w, h, out))
    }

    pub(crate) fn check_same_shape(&self, other: &Field<T>) -> Result<()> {
        if self.resolution() != other.resolution() {
            return Err(Error::MixedResolution { expected: self.resolution(), found: other.resolution() });
        }
        Ok(())
    }

    /// Binary layout: 8-byte magic, width and height as u32 LE, then f64 LE values row-major.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Size(format!("dimension {v} exceeds u32")));
        w.write_all(&FIELD_MAGIC)?;
        w.write_all(&dim(self.width)?.to_le_bytes())?;
        w.write_all(&dim(self.height)?.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[..8] != FIELD_MAGIC {
            return Err(Error::Parse("bad field magic".into()));
        }
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; width * height * 8];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        Self::new(width, height, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(file))
    }

    /// One row per line, comma separated, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.data.chunks(self.width) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{:.16e}", v.as_f64());
            }
            s.push('\n');
        }
        s
    }
}

/// `(mean, variance)` with population normalization.
pub fn field_stats<T: Real>(x: &Field<T>) -> (T, T) {
    x.stats()
}
