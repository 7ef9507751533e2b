//! Classical images to quantum input states.

use crate::error::{Error, Result};
use crate::state::StateVector;

pub const SOURCE_SIDE: usize = 28;
pub const SIDE: usize = 8;
pub const PIXELS: usize = SIDE * SIDE;

/// Norms at or below this are rejected by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// An 8×8 grayscale image with nonnegative intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image8 {
    pixels: [f64; PIXELS],
}

impl Image8 {
    pub fn new(pixels: [f64; PIXELS]) -> Result<Self> {
        if let Some(&bad) = pixels.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidPixel(bad));
        }
        Ok(Self { pixels })
    }

    pub fn from_slice(pixels: &[f64]) -> Result<Self> {
        let array: [f64; PIXELS] = pixels.try_into().map_err(|_| Error::WrongShape {
            expected: "8x8",
            found: pixels.len(),
        })?;
        Self::new(array)
    }

    pub fn pixels(&self) -> &[f64; PIXELS] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * SIDE + col]
    }
}

/// Source coordinate sampled by output cell `i` (half-pixel centers, no
/// corner alignment), clamped to the source grid.
fn source_coordinate(i: usize) -> f64 {
    let scale = SOURCE_SIDE as f64 / SIDE as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (SOURCE_SIDE - 1) as f64)
}

/// Bilinear 28×28 → 8×8 resampling of a row-major image with entries in [0, 1].
pub fn downsample_bilinear(image: &[f64]) -> Result<Image8> {
    if image.len() != SOURCE_SIDE * SOURCE_SIDE {
        return Err(Error::WrongShape {
            expected: "28x28",
            found: image.len(),
        });
    }
    if let Some(&bad) = image.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidPixel(bad));
    }
    let at = |r: usize, c: usize| image[r * SOURCE_SIDE + c];
    let mut pixels = [0.0; PIXELS];
    for r in 0..SIDE {
        let y = source_coordinate(r);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(SOURCE_SIDE - 1);
        let wy = y - y0 as f64;
        for c in 0..SIDE {
            let x = source_coordinate(c);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(SOURCE_SIDE - 1);
            let wx = x - x0 as f64;
            let top = (1.0 - wx) * at(y0, x0) + wx * at(y0, x1);
            let bottom = (1.0 - wx) * at(y1, x0) + wx * at(y1, x1);
            pixels[r * SIDE + c] = (1.0 - wy) * top + wy * bottom;
        }
    }
    Image8::new(pixels)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > MIN_NORM) {
        return Err(Error::ZeroVector { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Six-qubit amplitude encoding; pixel `(r, c)` is basis state `8r + c`.
pub fn amplitude_encode(image: &Image8) -> Result<StateVector> {
    Ok(StateVector::from_normalized(l2_normalize(image.pixels())?))
}

/// k-fold tensor power of the single-copy encoding.
///
/// With `constant_term = Some(a)`, each copy encodes the normalized vector
/// `[a, pixels.., 0 ..]` on seven qubits so the expansion also carries the
/// constant and lower-order products.
pub fn encode_power(image: &Image8, copies: usize, constant_term: Option<f64>) -> Result<StateVector> {
    if !(1..=3).contains(&copies) {
        return Err(Error::BadCopyCount(copies));
    }
    let single = match constant_term {
        None => amplitude_encode(image)?,
        Some(a) => {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::BadConstantTerm(a));
            }
            let mut v = vec![0.0; 2 * PIXELS];
            v[0] = a;
            v[1..=PIXELS].copy_from_slice(image.pixels());
            StateVector::from_normalized(l2_normalize(&v)?)
        }
    };
    let mut out = single.clone();
    for _ in 1..copies {
        out = out.tensor_product(&single);
    }
    Ok(out)
}
