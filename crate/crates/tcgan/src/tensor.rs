//! Core image types and image file I/O.
//!
//! Every image in the pipeline is a channels-first `3 x H x W` tensor of
//! `f32` values in `[-1, 1]`, normalized from 8-bit via `v / 127.5 - 1`.
//! Residuals live in `[-2, 2]` so that a residual can map any pixel to any
//! other pixel; masks are `1 x H x W` in `[0, 1]`.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Zip};

use crate::error::{Error, Result};

/// Affine map between 8-bit bytes and normalized floats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `v = b / 127.5 - 1`, range `[-1, 1]`. The canonical image range.
    SignedUnit,
    /// `v = b / 255`, range `[0, 1]`. Used for masks.
    ZeroOne,
}

impl Normalization {
    pub fn decode(self, byte: u8) -> f32 {
        match self {
            Normalization::SignedUnit => byte as f32 / 127.5 - 1.0,
            Normalization::ZeroOne => byte as f32 / 255.0,
        }
    }

    /// Inverse map, rounding half away from zero.
    pub fn encode(self, v: f32) -> u8 {
        let raw = match self {
            Normalization::SignedUnit => (v + 1.0) * 127.5,
            Normalization::ZeroOne => v * 255.0,
        };
        raw.round().clamp(0.0, 255.0) as u8
    }
}

/// A channels-first RGB image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                context: "ImageTensor",
                expected: vec![3, 1, 1],
                got: vec![c, h, w],
            });
        }
        if !data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "ImageTensor",
                "values must be finite and within [-1, 1]",
            ));
        }
        Ok(ImageTensor { data })
    }

    /// Builds from interleaved 8-bit RGB rows, top to bottom.
    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::invalid("ImageTensor::from_rgb8", "byte count mismatch"));
        }
        let norm = Normalization::SignedUnit;
        let data = Array3::from_shape_fn((3, height, width), |(c, y, x)| {
            norm.decode(bytes[(y * width + x) * 3 + c])
        });
        Ok(ImageTensor { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// True when both spatial dimensions are positive multiples of 8, the
    /// shape contract for generator input.
    pub fn generator_ready(&self) -> bool {
        let (_, h, w) = self.data.dim();
        h > 0 && w > 0 && h % 8 == 0 && w % 8 == 0
    }

    /// Interleaved RGB bytes under the canonical `[-1, 1]` map.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.data.dim();
        let norm = Normalization::SignedUnit;
        let mut out = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] = norm.encode(self.data[[c, y, x]]);
                }
            }
        }
        out
    }

    /// Mean absolute difference against another image of the same shape.
    pub fn l1_distance(&self, other: &ImageTensor) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::ShapeMismatch {
                context: "l1_distance",
                expected: dims(&self.data),
                got: dims(&other.data),
            });
        }
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / n)
    }
}

/// A signed residual image in `[-2, 2]`, added to a shadow image to remove
/// the shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTensor {
    data: Array3<f32>,
}

impl ResidualTensor {
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                context: "ResidualTensor",
                expected: vec![3, 1, 1],
                got: vec![c, h, w],
            });
        }
        if !data.iter().all(|v| v.is_finite() && (-2.0..=2.0).contains(v)) {
            return Err(Error::invalid(
                "ResidualTensor",
                "values must be finite and within [-2, 2]",
            ));
        }
        Ok(ResidualTensor { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ResidualTensor {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn mean_abs(&self) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().map(|v| (*v as f64).abs()).sum::<f64>() / n
    }
}

/// A single-channel mask aligned with an image; `1` marks shadow pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    data: Array3<f32>,
}

impl MaskTensor {
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                context: "MaskTensor",
                expected: vec![1, 1, 1],
                got: vec![c, h, w],
            });
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "MaskTensor",
                "values must be finite and within [0, 1]",
            ));
        }
        Ok(MaskTensor { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn plane(&self) -> ArrayView2<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), 0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn binarized(&self, threshold: f32) -> MaskTensor {
        MaskTensor {
            data: self.data.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
        }
    }

    /// Fraction of pixels at or above 0.5.
    pub fn coverage(&self) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().filter(|v| **v >= 0.5).count() as f64 / n
    }
}

fn dims(a: &Array3<f32>) -> Vec<usize> {
    let (c, h, w) = a.dim();
    vec![c, h, w]
}

/// Decodes an 8-bit image file (PNG or JPEG) into a normalized tensor.
/// Non-RGB sources with a convertible mode (gray, RGBA) are converted.
pub fn load_image(path: &Path, norm: Normalization) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        norm.decode(rgb.get_pixel(x as u32, y as u32)[c])
    });
    ImageTensor::from_array(data)
}

/// Writes a tensor as an 8-bit PNG under the inverse of the canonical map.
pub fn save_image(t: &ImageTensor, path: &Path) -> Result<()> {
    let (_, h, w) = t.data().dim();
    let buf = t.to_rgb8();
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::invalid("save_image", other.to_string()),
    })
}

/// Loads a grayscale mask file into `[0, 1]`.
pub fn load_mask(path: &Path) -> Result<MaskTensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
        Normalization::ZeroOne.decode(gray.get_pixel(x as u32, y as u32)[0])
    });
    MaskTensor::from_array(data)
}

/// Element-wise sum of image and residual, clamped back to `[-1, 1]`.
pub fn compose_shadow_free(x: &ImageTensor, r: &ResidualTensor) -> Result<ImageTensor> {
    if x.data().dim() != r.data().dim() {
        return Err(Error::ShapeMismatch {
            context: "compose_shadow_free",
            expected: dims(x.data()),
            got: dims(r.data()),
        });
    }
    let mut out = x.data().clone();
    Zip::from(&mut out).and(r.data()).for_each(|o, r| {
        *o = (*o + *r).clamp(-1.0, 1.0);
    });
    Ok(ImageTensor { data: out })
}

// Keys bicubic kernel with a = -0.5 (Catmull-Rom), the common "bicubic"
// used by PIL and OpenCV.
fn cubic_weight(t: f32) -> f32 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Separable bicubic resize of one plane; pixel-center coordinate mapping,
/// edge clamp, weights renormalized per tap window.
pub fn resize_plane_bicubic(src: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }

    let pass = |src: &Array2<f32>, out_len: usize| -> Array2<f32> {
        // Resizes along axis 1.
        let (rows, in_len) = src.dim();
        let scale = in_len as f32 / out_len as f32;
        let mut taps = Vec::with_capacity(out_len);
        for d in 0..out_len {
            let s = (d as f32 + 0.5) * scale - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut w = [
                cubic_weight(frac + 1.0),
                cubic_weight(frac),
                cubic_weight(1.0 - frac),
                cubic_weight(2.0 - frac),
            ];
            let sum: f32 = w.iter().sum();
            for wi in &mut w {
                *wi /= sum;
            }
            let idx = std::array::from_fn::<usize, 4, _>(|k| {
                (base as i64 - 1 + k as i64).clamp(0, in_len as i64 - 1) as usize
            });
            taps.push((idx, w));
        }
        Array2::from_shape_fn((rows, out_len), |(r, d)| {
            let (idx, w) = &taps[d];
            (0..4).map(|k| src[[r, idx[k]]] * w[k]).sum()
        })
    };

    let horiz = pass(&src.to_owned(), out_w); // (in_h, out_w)
    let transposed = horiz.t().to_owned(); // (out_w, in_h)
    pass(&transposed, out_h).t().to_owned()
}

/// Bicubic resize of an image tensor; output clamped to `[-1, 1]`.
pub fn resize_bicubic(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bicubic", "zero output size"));
    }
    let mut out = Array3::zeros((3, out_h, out_w));
    for c in 0..3 {
        let plane = resize_plane_bicubic(
            img.data().index_axis(ndarray::Axis(0), c),
            out_h,
            out_w,
        );
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&plane.mapv(|v| v.clamp(-1.0, 1.0)));
    }
    Ok(ImageTensor { data: out })
}
