//! Iterative radix-2 FFT on rows then columns.
//!
//! Normalization: the forward transform is unnormalized,
//! `X[k] = Σ_n x[n]·exp(−2πi k·n/N)`, and the inverse carries `1/N`, so
//! Parseval reads `Σ|x|² = (1/N)·Σ|X|²` with `N = width·height`.

use num_complex::Complex;

use super::field::Field;
use super::require_power_of_two;
use crate::scalar::Real;
use crate::{Error, Result};

/// Complex 2-D spectrum, row-major, same layout as the field it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    width: usize,
    height: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> Spectrum<T> {
    pub fn new(width: usize, height: usize, data: Vec<Complex<T>>) -> Result<Self> {
        require_power_of_two(width, height)?;
        if data.len() != width * height {
            return Err(Error::Size(format!("{} bins for a {width}x{height} spectrum", data.len())));
        }
        Ok(Spectrum { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn get(&self, kx: usize, ky: usize) -> Complex<T> {
        self.data[ky * self.width + kx]
    }

    /// `Σ|X|²`.
    pub fn energy(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Signed frequency of bin `i` in an `n`-point transform; the Nyquist bin maps to `+n/2`.
#[inline]
pub fn signed_frequency(i: usize, n: usize) -> isize {
    if i <= n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

struct Plan<T> {
    n: usize,
    twiddles: Vec<Complex<T>>,
}

impl<T: Real> Plan<T> {
    fn new(n: usize) -> Self {
        let step = -T::TAU() / T::from_usize_lossy(n);
        let twiddles = (0..n / 2).map(|k| Complex::from_polar(T::one(), step * T::from_usize_lossy(k))).collect();
        Plan { n, twiddles }
    }

    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        let n = self.n;
        if n < 2 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let w = if inverse { w.conj() } else { w };
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

fn transform_2d<T: Real>(width: usize, height: usize, data: &mut [Complex<T>], inverse: bool) {
    let row_plan = Plan::new(width);
    for row in data.chunks_exact_mut(width) {
        row_plan.run(row, inverse);
    }
    let col_plan = Plan::new(height);
    let mut column = vec![Complex::new(T::zero(), T::zero()); height];
    for x in 0..width {
        for (y, c) in column.iter_mut().enumerate() {
            *c = data[y * width + x];
        }
        col_plan.run(&mut column, inverse);
        for (y, c) in column.iter().enumerate() {
            data[y * width + x] = *c;
        }
    }
}

pub fn fft2<T: Real>(x: &Field<T>) -> Result<Spectrum<T>> {
    let (w, h) = x.resolution();
    require_power_of_two(w, h)?;
    let mut data: Vec<Complex<T>> = x.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
    transform_2d(w, h, &mut data, false);
    Ok(Spectrum { width: w, height: h, data })
}

/// Inverse transform; the imaginary residue (rounding noise for Hermitian input) is dropped.
pub fn ifft2<T: Real>(spectrum: &Spectrum<T>) -> Result<Field<T>> {
    let (w, h) = (spectrum.width, spectrum.height);
    require_power_of_two(w, h)?;
    let mut data = spectrum.data.clone();
    transform_2d(w, h, &mut data, true);
    let inv = T::one() / T::from_usize_lossy(w * h);
    Ok(Field::from_parts(w, h, data.into_iter().map(|c| c.re * inv).collect()))
}
