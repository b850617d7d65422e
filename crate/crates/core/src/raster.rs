//! Polygon rasterization and pixel-set overlap.
//!
//! Pixel `(r, c)` of a `width × height` mask samples the normalized point
//! `((c + 0.5) / width, (r + 0.5) / height)`. Interior is decided with the
//! even-odd rule along each pixel-centre scanline. An edge counts as
//! crossing a scanline when exactly one endpoint lies at or below it
//! (`y <= scan`), and a pixel centre exactly on a crossing belongs to the
//! span starting there (spans are left-closed, right-open).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polygon::Polygon;
use crate::scalar::Scalar;

/// Raster resolution used for dataset evaluation when none is given.
pub const DEFAULT_WIDTH: u32 = 640;
pub const DEFAULT_HEIGHT: u32 = 480;

/// Binary raster, row-major.
///
/// JSON form is `{"width", "height", "rle"}`: alternating run lengths over
/// the row-major bits, starting with a (possibly empty) run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleMask", into = "RleMask")]
pub struct PixelMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u64>,
}

impl PixelMask {
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::from_bits(width, height, vec![false; width as usize * height as usize])
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions {width}x{height} must be positive"
            )));
        }
        if bits.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{} bits do not fill a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Mask with the pixels in columns `c0..c1` and rows `r0..r1` set.
    pub fn from_rect(
        width: u32,
        height: u32,
        cols: std::ops::Range<u32>,
        rows: std::ops::Range<u32>,
    ) -> Result<Self> {
        let mut m = Self::empty(width, height)?;
        for r in rows.start..rows.end.min(height) {
            for c in cols.start..cols.end.min(width) {
                m.set(r, c, true);
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_rle(&self) -> RleMask {
        let mut rle = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &b in &self.bits {
            if b != current {
                rle.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        rle.push(run);
        RleMask {
            width: self.width,
            height: self.height,
            rle,
        }
    }

    pub fn from_rle(rle: &RleMask) -> Result<Self> {
        let total = rle.width as u64 * rle.height as u64;
        let sum: u64 = rle.rle.iter().sum();
        if sum != total {
            return Err(Error::Shape(format!(
                "run lengths sum to {sum}, expected {total}"
            )));
        }
        let mut bits = Vec::with_capacity(total as usize);
        let mut value = false;
        for &run in &rle.rle {
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        Self::from_bits(rle.width, rle.height, bits)
    }
}

impl TryFrom<RleMask> for PixelMask {
    type Error = Error;

    fn try_from(r: RleMask) -> Result<Self> {
        Self::from_rle(&r)
    }
}

impl From<PixelMask> for RleMask {
    fn from(m: PixelMask) -> Self {
        m.to_rle()
    }
}

/// Scanline even-odd rasterization of `poly` onto a `width × height` grid.
///
/// Fails for polygons with fewer than three vertices. Zero-area polygons
/// produce an empty mask.
pub fn rasterize<T: Scalar>(poly: &Polygon<T>, width: u32, height: u32) -> Result<PixelMask> {
    poly.ensure_ring()?;
    let mut mask = PixelMask::empty(width, height)?;
    let (w, h) = (width as f64, height as f64);
    let pts: Vec<[f64; 2]> = poly
        .vertices()
        .iter()
        .map(|v| [v[0].as_f64() * w, v[1].as_f64() * h])
        .collect();
    let n = pts.len();
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    for row in 0..height {
        let scan = row as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            if (a[1] <= scan) != (b[1] <= scan) {
                let t = (scan - a[1]) / (b[1] - a[1]);
                crossings.push(a[0] + t * (b[0] - a[0]));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            // centre c + 0.5 in [x0, x1)
            let start = (span[0] - 0.5).ceil().max(0.0);
            let end = (span[1] - 0.5).ceil().min(w);
            if end <= start {
                continue;
            }
            for col in start as u32..end as u32 {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

/// `|a ∩ b| / |a ∪ b|`, or 0 when both masks are empty.
pub fn mask_iou(a: &PixelMask, b: &PixelMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
