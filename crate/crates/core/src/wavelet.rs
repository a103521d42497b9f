//! Multilevel 2D Haar transform: analysis, synthesis, and pyramid slicing.
//!
//! Conventions fixed here (golden values elsewhere depend on them):
//! - A pair step maps `(x0, x1)` to `(c*(x0+x1), c*(x0-x1))` with `c = 1/sqrt(2)`
//!   when unit-norm (the default) and `c = 1` otherwise.
//! - Analysis filters rows (along x) first, then columns (along y).
//!   "Horizontal" detail = rows filtered lowpass, columns highpass;
//!   "vertical" = rows highpass, columns lowpass; "diagonal" = both highpass.
//! - Dimensions must divide exactly: odd sizes are rejected rather than
//!   padded, which keeps synthesis an exact inverse.
//!
//! With unit-norm filters the transform is orthonormal, so total energy is
//! preserved and the adjoint of synthesis is analysis.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

pub const INV_SQRT2: f32 = core::f32::consts::FRAC_1_SQRT_2;

/// H x W x C raster of real values, row-major `(y, x, channel)`.
/// By convention pixel data lives in `[0, 1]`; intermediate reconstructions
/// may exceed that range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width * channels, data.len(), "image data length mismatch");
        ImageTensor {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        assert_eq!(self.data.len(), other.data.len(), "image shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// The 2-tap analysis pair. Unit-norm (`[1,1]/sqrt(2)`, `[1,-1]/sqrt(2)`) makes
/// the transform orthonormal; the integer variant (`[1,1]`, `[1,-1]`) is kept
/// for debugging and compensates in synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaarFilterPair {
    pub unit_norm: bool,
}

impl HaarFilterPair {
    pub const fn unit() -> Self {
        HaarFilterPair { unit_norm: true }
    }

    pub const fn integer() -> Self {
        HaarFilterPair { unit_norm: false }
    }

    #[inline]
    fn analysis_scale(&self) -> f32 {
        if self.unit_norm {
            INV_SQRT2
        } else {
            1.0
        }
    }

    #[inline]
    fn synthesis_scale(&self) -> f32 {
        if self.unit_norm {
            INV_SQRT2
        } else {
            0.5
        }
    }
}

impl Default for HaarFilterPair {
    fn default() -> Self {
        HaarFilterPair::unit()
    }
}

/// One level's detail coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailTriple {
    pub h: ImageTensor,
    pub v: ImageTensor,
    pub d: ImageTensor,
}

/// Output of an L-level analysis: the approximation block plus one detail
/// triple per level. `details[0]` is level 1 (finest, H/2 x W/2); the last
/// entry is level L (coarsest, matching the approximation's size).
///
/// Total coefficient count always equals the input pixel count times channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DwtPyramid {
    pub levels: usize,
    pub approx: ImageTensor,
    pub details: Vec<DetailTriple>,
    pub filters: HaarFilterPair,
}

impl DwtPyramid {
    /// Spatial size of the image this pyramid reconstructs to.
    pub fn image_height(&self) -> usize {
        self.approx.height << self.levels
    }

    pub fn image_width(&self) -> usize {
        self.approx.width << self.levels
    }

    pub fn channels(&self) -> usize {
        self.approx.channels
    }

    pub fn sum_squares(&self) -> f32 {
        let mut total = self.approx.sum_squares();
        for t in &self.details {
            total += t.h.sum_squares() + t.v.sum_squares() + t.d.sum_squares();
        }
        total
    }

    fn check_shapes(&self) -> Result<(), WaveletError> {
        if self.details.len() != self.levels {
            return Err(WaveletError::InconsistentPyramid);
        }
        let (h, w, c) = (self.approx.height, self.approx.width, self.approx.channels);
        for (i, t) in self.details.iter().enumerate() {
            // details[i] is level i+1; level L matches the approximation.
            let scale = self.levels - 1 - i;
            let (eh, ew) = (h << scale, w << scale);
            for img in [&t.h, &t.v, &t.d] {
                if img.height != eh || img.width != ew || img.channels != c {
                    return Err(WaveletError::InconsistentPyramid);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaveletError {
    /// Input dimension not divisible by `2^levels`.
    DimensionNotDivisible { dim: usize, levels: usize },
    /// `levels` outside the supported range.
    LevelsOutOfRange { levels: usize },
    /// Pyramid shapes do not form a dyadic chain.
    InconsistentPyramid,
    /// `keep_scales` outside `1..=levels+1`.
    KeepScalesOutOfRange { keep_scales: usize, max: usize },
}

impl fmt::Display for WaveletError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaveletError::DimensionNotDivisible { dim, levels } => {
                write!(f, "dimension {dim} is not divisible by 2^{levels}")
            }
            WaveletError::LevelsOutOfRange { levels } => {
                write!(f, "levels must be >= 1, got {levels}")
            }
            WaveletError::InconsistentPyramid => {
                write!(f, "pyramid shapes do not form a dyadic chain")
            }
            WaveletError::KeepScalesOutOfRange { keep_scales, max } => {
                write!(f, "keep_scales {keep_scales} outside 1..={max}")
            }
        }
    }
}

/// One analysis level: rows then columns, subsampled by two.
fn dwt2_level(img: &ImageTensor, filters: HaarFilterPair) -> (ImageTensor, DetailTriple) {
    let s = filters.analysis_scale();
    let (h, w, c) = (img.height, img.width, img.channels);
    let (hh, hw) = (h / 2, w / 2);

    // Pass 1: along x.
    let mut row_lo = ImageTensor::zeros(h, hw, c);
    let mut row_hi = ImageTensor::zeros(h, hw, c);
    for y in 0..h {
        for x in 0..hw {
            for ch in 0..c {
                let a = img.at(y, 2 * x, ch);
                let b = img.at(y, 2 * x + 1, ch);
                row_lo.set(y, x, ch, s * (a + b));
                row_hi.set(y, x, ch, s * (a - b));
            }
        }
    }

    // Pass 2: along y.
    let mut approx = ImageTensor::zeros(hh, hw, c);
    let mut det_h = ImageTensor::zeros(hh, hw, c);
    let mut det_v = ImageTensor::zeros(hh, hw, c);
    let mut det_d = ImageTensor::zeros(hh, hw, c);
    for y in 0..hh {
        for x in 0..hw {
            for ch in 0..c {
                let lo0 = row_lo.at(2 * y, x, ch);
                let lo1 = row_lo.at(2 * y + 1, x, ch);
                let hi0 = row_hi.at(2 * y, x, ch);
                let hi1 = row_hi.at(2 * y + 1, x, ch);
                approx.set(y, x, ch, s * (lo0 + lo1));
                det_h.set(y, x, ch, s * (lo0 - lo1));
                det_v.set(y, x, ch, s * (hi0 + hi1));
                det_d.set(y, x, ch, s * (hi0 - hi1));
            }
        }
    }

    (
        approx,
        DetailTriple {
            h: det_h,
            v: det_v,
            d: det_d,
        },
    )
}

/// One synthesis level: columns then rows (reverse of analysis).
fn idwt2_level(approx: &ImageTensor, detail: &DetailTriple, filters: HaarFilterPair) -> ImageTensor {
    let s = filters.synthesis_scale();
    let (hh, hw, c) = (approx.height, approx.width, approx.channels);
    let (h, w) = (hh * 2, hw * 2);

    let mut row_lo = ImageTensor::zeros(h, hw, c);
    let mut row_hi = ImageTensor::zeros(h, hw, c);
    for y in 0..hh {
        for x in 0..hw {
            for ch in 0..c {
                let a = approx.at(y, x, ch);
                let dh = detail.h.at(y, x, ch);
                let dv = detail.v.at(y, x, ch);
                let dd = detail.d.at(y, x, ch);
                row_lo.set(2 * y, x, ch, s * (a + dh));
                row_lo.set(2 * y + 1, x, ch, s * (a - dh));
                row_hi.set(2 * y, x, ch, s * (dv + dd));
                row_hi.set(2 * y + 1, x, ch, s * (dv - dd));
            }
        }
    }

    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..hw {
            for ch in 0..c {
                let lo = row_lo.at(y, x, ch);
                let hi = row_hi.at(y, x, ch);
                out.set(y, 2 * x, ch, s * (lo + hi));
                out.set(y, 2 * x + 1, ch, s * (lo - hi));
            }
        }
    }
    out
}

/// L-level analysis. Recurses on the approximation block.
pub fn dwt_forward(
    image: &ImageTensor,
    levels: usize,
    filters: HaarFilterPair,
) -> Result<DwtPyramid, WaveletError> {
    if levels < 1 {
        return Err(WaveletError::LevelsOutOfRange { levels });
    }
    let div = 1usize << levels;
    if image.height % div != 0 || image.height == 0 {
        return Err(WaveletError::DimensionNotDivisible {
            dim: image.height,
            levels,
        });
    }
    if image.width % div != 0 || image.width == 0 {
        return Err(WaveletError::DimensionNotDivisible {
            dim: image.width,
            levels,
        });
    }

    let mut details = Vec::with_capacity(levels);
    let mut cur = image.clone();
    for _ in 0..levels {
        let (next, triple) = dwt2_level(&cur, filters);
        details.push(triple);
        cur = next;
    }
    Ok(DwtPyramid {
        levels,
        approx: cur,
        details,
        filters,
    })
}

/// Synthesis; exact inverse of [`dwt_forward`] up to f32 rounding.
/// A zero-level pyramid (approximation only) reconstructs to itself.
pub fn dwt_inverse(pyramid: &DwtPyramid) -> Result<ImageTensor, WaveletError> {
    pyramid.check_shapes()?;
    let mut cur = pyramid.approx.clone();
    for triple in pyramid.details.iter().rev() {
        cur = idwt2_level(&cur, triple, pyramid.filters);
    }
    Ok(cur)
}

/// Keep the approximation and the `keep_scales - 1` coarsest detail triples.
/// Inverting the result yields the image at `1/2^(L - keep_scales + 1)` of
/// the original resolution (`keep_scales = L + 1` is the identity).
pub fn pyramid_truncate(pyramid: &DwtPyramid, keep_scales: usize) -> Result<DwtPyramid, WaveletError> {
    let max = pyramid.levels + 1;
    if keep_scales < 1 || keep_scales > max {
        return Err(WaveletError::KeepScalesOutOfRange { keep_scales, max });
    }
    let kept_levels = keep_scales - 1;
    // Coarsest triples sit at the end of `details`.
    let details = pyramid.details[pyramid.levels - kept_levels..].to_vec();
    Ok(DwtPyramid {
        levels: kept_levels,
        approx: pyramid.approx.clone(),
        details,
        filters: pyramid.filters,
    })
}

/// The scale-s lowpass reconstruction: analyze at `levels`, keep the coarsest
/// `keep_scales` scales, synthesize. Output resolution is dyadically reduced.
pub fn lowpass_reconstruction(
    image: &ImageTensor,
    levels: usize,
    keep_scales: usize,
    filters: HaarFilterPair,
) -> Result<ImageTensor, WaveletError> {
    let pyramid = dwt_forward(image, levels, filters)?;
    let truncated = pyramid_truncate(&pyramid, keep_scales)?;
    dwt_inverse(&truncated)
}
