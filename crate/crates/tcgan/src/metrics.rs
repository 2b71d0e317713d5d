//! Evaluation suite: Fréchet distance over feature statistics (FID),
//! unbiased polynomial-kernel MMD (KID) reported as mean ± std over
//! subsets, and mask-restricted RMSE in RGB or CIELAB.
//!
//! The feature extractor behind FID/KID is pluggable; the built-in default
//! is a fixed-seed random-projection convolutional embedding so every
//! number is reproducible without external weight files. Reports carry the
//! extractor id, making them self-describing.

use ndarray::{Array2, Array3};
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::autodiff::{Graph, PadMode};
use crate::error::{Error, Result};
use crate::tensor::{resize_bicubic, ImageTensor, MaskTensor};

/// n feature rows of dimension d, tagged with the extractor that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub data: Array2<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(data: Array2<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::InvalidInput {
                context: "feature set",
                reason: format!("need at least 2 rows, got {}", data.nrows()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput {
                context: "feature set",
                reason: "non-finite feature value".into(),
            });
        }
        Ok(FeatureSet {
            data,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

// ---- feature extraction -------------------------------------------------

/// Deterministic per-image embedding. Implementations must be pure.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

/// Built-in default: bicubic resize to 64×64, three stride-2 convolutions
/// with fixed-seed N(0, 1/√fan_in) weights and |·| nonlinearities
/// (3→16→32→64 channels), then per-channel global means — a 64-d
/// random-projection embedding.
pub struct RpConv64 {
    weights: Vec<(Array3<f32>, Vec<usize>)>,
}

pub const DEFAULT_EXTRACTOR_ID: &str = "rpconv64-v1";
const RPCONV_SEED: u64 = 0x7C64;
const RPCONV_SIZE: usize = 64;

impl Default for RpConv64 {
    fn default() -> Self {
        Self::new()
    }
}

impl RpConv64 {
    pub fn new() -> Self {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(RPCONV_SEED);
        let mut weights = Vec::new();
        for (cin, cout) in [(3usize, 16usize), (16, 32), (32, 64)] {
            let fan_in = (cin * 9) as f64;
            let dist = rand_distr::Normal::new(0.0, fan_in.sqrt().recip()).expect("valid normal");
            let n = cout * cin * 9;
            let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
            let w = Array3::from_shape_vec((cout, cin * 3, 3), data).expect("weight shape");
            weights.push((w, vec![cout, cin, 3, 3]));
        }
        RpConv64 { weights }
    }
}

impl FeatureExtractor for RpConv64 {
    fn id(&self) -> &str {
        DEFAULT_EXTRACTOR_ID
    }

    fn dim(&self) -> usize {
        64
    }

    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let (_, h, w) = img.data().dim();
        let resized = if (h, w) == (RPCONV_SIZE, RPCONV_SIZE) {
            img.clone()
        } else {
            resize_bicubic(img, RPCONV_SIZE, RPCONV_SIZE)?
        };
        let mut g = Graph::<f32>::new();
        let mut x = g.constant(resized.data().clone().into_dyn());
        for (flat, shape) in &self.weights {
            let w = flat
                .clone()
                .into_shape_with_order(ndarray::IxDyn(shape))
                .expect("kernel reshape");
            let b = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[shape[0]]));
            let wid = g.leaf(Arc::new(w), false);
            let bid = g.leaf(Arc::new(b), false);
            let conv = g.conv2d(x, wid, bid, 2, 1, PadMode::Zero);
            x = g.abs(conv);
        }
        let pooled = g.channel_mean(x);
        Ok(g.value(pooled).iter().map(|&v| v as f64).collect())
    }
}

/// One row per image, in input order.
pub fn extract_features(
    images: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureSet> {
    if images.len() < 2 {
        return Err(Error::InvalidInput {
            context: "feature extraction",
            reason: format!("need at least 2 images, got {}", images.len()),
        });
    }
    let d = extractor.dim();
    let mut data = Array2::<f64>::zeros((images.len(), d));
    for (i, img) in images.iter().enumerate() {
        let row = extractor.features(img)?;
        if row.len() != d {
            return Err(Error::InvalidInput {
                context: "feature extraction",
                reason: format!(
                    "extractor {} returned {} values, declared {d}",
                    extractor.id(),
                    row.len()
                ),
            });
        }
        for (j, v) in row.into_iter().enumerate() {
            data[[i, j]] = v;
        }
    }
    FeatureSet::new(data, extractor.id())
}

// ---- FID ----------------------------------------------------------------

fn mean_rows(x: &Array2<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols()).map(|j| x.column(j).sum() / n).collect()
}

/// Sample covariance with 1/(n−1); adds 1e-10·I when d > n for stability.
fn covariance(x: &Array2<f64>, mean: &[f64]) -> DMatrix<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    let norm = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / norm;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if d > n {
        for i in 0..d {
            cov[(i, i)] += 1e-10;
        }
    }
    cov
}

/// `Tr((Σa·Σb)^{1/2})` via the (real) eigenvalues of the product, which is
/// similar to a PSD matrix. Tiny negative eigenvalues (> −1e-8·λ_max) are
/// rounding noise and clip to zero.
fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> Result<f64> {
    let product = sa * sb;
    let eigs = product
        .schur()
        .complex_eigenvalues();
    let lambda_max = eigs.iter().map(|c| c.re).fold(0.0f64, f64::max);
    let floor = -1e-8 * lambda_max.max(1e-300);
    let mut tr = 0.0;
    for c in eigs.iter() {
        let re = c.re;
        if re < floor {
            return Err(Error::InvalidInput {
                context: "fid",
                reason: format!(
                    "covariance product has eigenvalue {re}, far below zero — features degenerate?"
                ),
            });
        }
        tr += re.max(0.0).sqrt();
    }
    Ok(tr)
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|μ_a − μ_b|² + Tr(Σ_a + Σ_b − 2·(Σ_a·Σ_b)^{1/2})`, floored at 0.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "fid",
            expected: vec![a.dim()],
            got: vec![b.dim()],
        });
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput {
            context: "fid",
            reason: "each feature set needs at least 2 rows".into(),
        });
    }
    let mu_a = mean_rows(&a.data);
    let mu_b = mean_rows(&b.data);
    let sa = covariance(&a.data, &mu_a);
    let sb = covariance(&b.data, &mu_b);
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(&sa, &sb)?;
    Ok(value.max(0.0))
}

// ---- KID ----------------------------------------------------------------

/// Degree-3 polynomial kernel `(u·v/d + 1)³`.
fn poly3(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() as f64;
    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² between two equal-size index subsets, explicit loops.
fn mmd2_unbiased(a: &Array2<f64>, ai: &[usize], b: &Array2<f64>, bi: &[usize]) -> f64 {
    let m = ai.len() as f64;
    let row = |x: &Array2<f64>, i: usize| x.row(i).to_vec();
    let mut within_a = 0.0;
    let mut within_b = 0.0;
    let mut cross = 0.0;
    for (p, &i) in ai.iter().enumerate() {
        let ui = row(a, i);
        for (q, &j) in ai.iter().enumerate() {
            if p != q {
                within_a += poly3(&ui, &row(a, j));
            }
        }
        for &j in bi {
            cross += poly3(&ui, &row(b, j));
        }
    }
    for (p, &i) in bi.iter().enumerate() {
        let ui = row(b, i);
        for (q, &j) in bi.iter().enumerate() {
            if p != q {
                within_b += poly3(&ui, &row(b, j));
            }
        }
    }
    within_a / (m * (m - 1.0)) + within_b / (m * (m - 1.0)) - 2.0 * cross / (m * m)
}

/// KID: mean and (population) std of unbiased MMD² over `n_subsets`
/// subsets of `subset_size` rows drawn without replacement from each set.
pub fn kid(
    a: &FeatureSet,
    b: &FeatureSet,
    subset_size: usize,
    n_subsets: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "kid",
            expected: vec![a.dim()],
            got: vec![b.dim()],
        });
    }
    let cap = a.len().min(b.len());
    if subset_size < 2 || subset_size > cap {
        return Err(Error::InvalidInput {
            context: "kid",
            reason: format!("subset size {subset_size} outside 2..={cap}"),
        });
    }
    if n_subsets == 0 {
        return Err(Error::InvalidInput {
            context: "kid",
            reason: "need at least one subset".into(),
        });
    }
    let mut values = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let ai = rand::seq::index::sample(rng, a.len(), subset_size).into_vec();
        let bi = rand::seq::index::sample(rng, b.len(), subset_size).into_vec();
        values.push(mmd2_unbiased(&a.data, &ai, &b.data, &bi));
    }
    let mean = values.iter().sum::<f64>() / n_subsets as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_subsets as f64;
    Ok((mean, var.sqrt()))
}

/// Default KID subset policy: up to 100 rows, 10 subsets.
pub fn kid_default_params(n_a: usize, n_b: usize) -> (usize, usize) {
    (100usize.min(n_a.min(n_b)), 10)
}

// ---- masked RMSE --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// Shadow pixels (mask == 1).
    S,
    /// Non-shadow pixels (mask == 0).
    N,
    /// All pixels.
    A,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Lab,
}

impl std::str::FromStr for ColorSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ColorSpace::Rgb),
            "lab" => Ok(ColorSpace::Lab),
            other => Err(Error::Config(format!(
                "unknown color space {other:?}, expected rgb or lab"
            ))),
        }
    }
}

/// Canonical tensor value in [-1, 1] to the 8-bit 0–255 scale.
fn to_255(v: f32) -> f64 {
    (v as f64 + 1.0) * 0.5 * 255.0
}

fn srgb_to_linear(c: f64) -> f64 {
    let c = c / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (0–255 scale, D65) to CIELAB, channels in native LAB ranges.
fn rgb_to_lab(r: f64, g: f64, b: f64) -> [f64; 3] {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    // D65 reference white
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    let (fx, fy, fz) = (lab_f(x / xn), lab_f(y / yn), lab_f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn pixel_channels(img: &ImageTensor, y: usize, x: usize, space: ColorSpace) -> [f64; 3] {
    let d = img.data();
    let (r, g, b) = (
        to_255(d[[0, y, x]]),
        to_255(d[[1, y, x]]),
        to_255(d[[2, y, x]]),
    );
    match space {
        ColorSpace::Rgb => [r, g, b],
        ColorSpace::Lab => rgb_to_lab(r, g, b),
    }
}

/// RMSE between `pred` and `reference` over the pixels a region selects,
/// computed on the 0–255 scale (or native LAB ranges after conversion).
/// The mean square runs over selected pixels × channels.
pub fn masked_rmse(
    pred: &ImageTensor,
    reference: &ImageTensor,
    mask: &MaskTensor,
    region: Region,
    space: ColorSpace,
) -> Result<f64> {
    let dims = pred.data().dim();
    if reference.data().dim() != dims {
        return Err(Error::ShapeMismatch {
            context: "masked_rmse images",
            expected: vec![dims.0, dims.1, dims.2],
            got: {
                let d = reference.data().dim();
                vec![d.0, d.1, d.2]
            },
        });
    }
    let (_, h, w) = dims;
    let plane = mask.plane();
    if plane.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            context: "masked_rmse mask",
            expected: vec![h, w],
            got: vec![plane.dim().0, plane.dim().1],
        });
    }
    if !mask.is_binary() {
        return Err(Error::InvalidInput {
            context: "masked_rmse",
            reason: "mask must be binary (0/1); binarize it first".into(),
        });
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let inside = plane[[y, x]] == 1.0;
            let selected = match region {
                Region::S => inside,
                Region::N => !inside,
                Region::A => true,
            };
            if !selected {
                continue;
            }
            let p = pixel_channels(pred, y, x, space);
            let r = pixel_channels(reference, y, x, space);
            for c in 0..3 {
                let d = p[c] - r[c];
                sum += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput {
            context: "masked_rmse",
            reason: format!("region {region:?} selects no pixels"),
        });
    }
    Ok((sum / (count * 3) as f64).sqrt())
}

/// N-I: how much the output disturbs the input outside the shadow region.
pub fn rmse_n_i(
    pred: &ImageTensor,
    input_shadow: &ImageTensor,
    mask: &MaskTensor,
    space: ColorSpace,
) -> Result<f64> {
    masked_rmse(pred, input_shadow, mask, Region::N, space)
}

// ---- report -------------------------------------------------------------

/// Evaluation summary; a field is present exactly when the corresponding
/// metric was requested.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_n_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color_space: Option<ColorSpace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor_id: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use ndarray::Array3 as A3;
    use rand::{Rng, SeedableRng};

    fn random_set(seed: u64, n: usize, d: usize, shift: f64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0) + shift);
        FeatureSet::new(data, "test").unwrap()
    }

    fn image(seed: u64, size: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_array(A3::from_shape_fn((3, size, size), |_| {
            rng.random_range(-0.95..0.95)
        }))
        .unwrap()
    }

    // FID of N(μa, Σ) vs N(μb, Σ) with identical Σ is exactly |μa − μb|².
    #[test]
    fn fid_equal_covariance_closed_form() {
        // construct two sets with *identical sample covariance* by shifting
        // every row of a by a constant vector
        let a = random_set(1, 40, 4, 0.0);
        let mut shifted = a.data.clone();
        for mut row in shifted.rows_mut() {
            for v in row.iter_mut() {
                *v += 0.5;
            }
        }
        let b = FeatureSet::new(shifted, "test").unwrap();
        let d = fid(&a, &b).unwrap();
        assert!((d - 4.0 * 0.25).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn fid_identical_sets_is_zero_and_symmetric() {
        let a = random_set(2, 30, 6, 0.0);
        let same = fid(&a, &a).unwrap();
        assert!(same <= 1e-8, "fid(a,a) = {same}");
        let b = random_set(3, 25, 6, 0.3);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
    }

    /// Independent oracle: Tr((Σa Σb)^{1/2}) computed by diagonalizing the
    /// symmetric matrix Σa^{1/2} Σb Σa^{1/2}.
    fn fid_oracle(a: &FeatureSet, b: &FeatureSet) -> f64 {
        let mu_a = mean_rows(&a.data);
        let mu_b = mean_rows(&b.data);
        let sa = covariance(&a.data, &mu_a);
        let sb = covariance(&b.data, &mu_b);
        let ea = SymmetricEigen::new(sa.clone());
        let mut half = DMatrix::<f64>::zeros(sa.nrows(), sa.ncols());
        for (i, &l) in ea.eigenvalues.iter().enumerate() {
            let s = l.max(0.0).sqrt();
            let v = ea.eigenvectors.column(i);
            half += s * &v * v.transpose();
        }
        let middle = &half * &sb * &half;
        let em = SymmetricEigen::new((middle.clone() + middle.transpose()) * 0.5);
        let tr: f64 = em.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
        let mean_term: f64 = mu_a
            .iter()
            .zip(&mu_b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        mean_term + sa.trace() + sb.trace() - 2.0 * tr
    }

    #[test]
    fn fid_matches_alternative_formula_oracle() {
        let a = random_set(4, 64, 8, 0.0);
        let b = random_set(5, 64, 8, 0.2);
        let got = fid(&a, &b).unwrap();
        let want = fid_oracle(&a, &b);
        let rel = (got - want).abs() / want.abs().max(1e-12);
        assert!(rel < 1e-6, "fid {got} vs oracle {want}, rel {rel}");
    }

    #[test]
    fn fid_rejects_dim_mismatch() {
        let a = random_set(6, 10, 4, 0.0);
        let b = random_set(7, 10, 5, 0.0);
        assert!(fid(&a, &b).is_err());
    }

    #[test]
    fn fid_handles_d_greater_than_n() {
        // 3 rows of 8-d features: covariance is rank-deficient, the
        // regularizer must keep the square root finite
        let a = random_set(8, 3, 8, 0.0);
        let b = random_set(9, 3, 8, 0.4);
        let d = fid(&a, &b).unwrap();
        assert!(d.is_finite() && d >= 0.0);
    }

    #[test]
    fn kid_kernel_and_tiny_case_match_brute_force() {
        // kernel: u == v with u·u = d gives (1+1)³ = 8
        let u = vec![1.0; 5];
        assert_eq!(poly3(&u, &u), 8.0);

        // deterministic tiny case, subset == full set
        let a = FeatureSet::new(
            Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            "test",
        )
        .unwrap();
        let b = FeatureSet::new(
            Array2::from_shape_vec((3, 2), vec![0.5, 0.5, -0.5, 0.5, 0.0, -1.0]).unwrap(),
            "test",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mean, std) = kid(&a, &b, 3, 4, &mut rng).unwrap();
        // brute-force triple loop over all pairs
        let k = |u: &[f64], v: &[f64]| poly3(u, v);
        let rows = |s: &FeatureSet| -> Vec<Vec<f64>> {
            (0..3).map(|i| s.data.row(i).to_vec()).collect()
        };
        let (ra, rb) = (rows(&a), rows(&b));
        let mut wa = 0.0;
        let mut wb = 0.0;
        let mut cr = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    wa += k(&ra[i], &ra[j]);
                    wb += k(&rb[i], &rb[j]);
                }
                cr += k(&ra[i], &rb[j]);
            }
        }
        let expect = wa / 6.0 + wb / 6.0 - 2.0 * cr / 9.0;
        assert_eq!(mean, expect, "full-set subsets must be exact");
        assert_eq!(std, 0.0);

        // degenerate subsetting: seed cannot matter when subset == set
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let (mean2, _) = kid(&a, &b, 3, 4, &mut rng2).unwrap();
        assert_eq!(mean, mean2);
    }

    #[test]
    fn kid_is_unbiased_near_zero_for_same_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut values = Vec::new();
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                Array2::from_shape_fn((24, 4), |_| {
                    // sum of uniforms ≈ normal; exact shape is irrelevant
                    (0..4).map(|_| rng.random_range(-0.5..0.5)).sum::<f64>()
                })
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            values.push(mmd2_unbiased(
                &a,
                &(0..24).collect::<Vec<_>>(),
                &b,
                &(0..24).collect::<Vec<_>>(),
            ));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            mean.abs() <= 3.0 * se,
            "MMD² mean {mean} exceeds 3 standard errors ({se})"
        );
    }

    #[test]
    fn kid_validates_subset_size() {
        let a = random_set(11, 10, 3, 0.0);
        let b = random_set(12, 8, 3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(kid(&a, &b, 9, 2, &mut rng).is_err());
        assert!(kid(&a, &b, 1, 2, &mut rng).is_err());
        assert!(kid(&a, &b, 8, 2, &mut rng).is_ok());
        assert_eq!(kid_default_params(300, 250), (100, 10));
        assert_eq!(kid_default_params(30, 50), (30, 10));
    }

    fn checker_mask(h: usize, w: usize) -> MaskTensor {
        MaskTensor::from_array(A3::from_shape_fn((1, h, w), |(_, y, x)| {
            ((y + x) % 2) as f32
        }))
        .unwrap()
    }

    #[test]
    fn rmse_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        // leave headroom so a +10 (8-bit) shift stays inside [-1, 1]
        let img = ImageTensor::from_array(A3::from_shape_fn((3, 8, 8), |_| {
            rng.random_range(-0.8..0.8)
        }))
        .unwrap();
        let mask = checker_mask(8, 8);
        for region in [Region::S, Region::N, Region::A] {
            for space in [ColorSpace::Rgb, ColorSpace::Lab] {
                let v = masked_rmse(&img, &img, &mask, region, space).unwrap();
                assert_eq!(v, 0.0);
            }
        }
        // +10 on the 8-bit scale everywhere → RMSE exactly 10 in rgb
        let shifted = ImageTensor::from_array(img.data().mapv(|v| v + 10.0 * 2.0 / 255.0)).unwrap();
        for region in [Region::S, Region::N, Region::A] {
            let v = masked_rmse(&shifted, &img, &mask, region, ColorSpace::Rgb).unwrap();
            assert!((v - 10.0).abs() < 1e-4, "region {region:?}: {v}");
        }
    }

    #[test]
    fn rmse_matches_scalar_oracle() {
        let pred = image(21, 10);
        let reference = image(22, 10);
        let mask = checker_mask(10, 10);
        for space in [ColorSpace::Rgb, ColorSpace::Lab] {
            for region in [Region::S, Region::N, Region::A] {
                let got = masked_rmse(&pred, &reference, &mask, region, space).unwrap();
                // independent scalar loop
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for y in 0..10 {
                    for x in 0..10 {
                        let inside = mask.plane()[[y, x] ] == 1.0;
                        let take = match region {
                            Region::S => inside,
                            Region::N => !inside,
                            Region::A => true,
                        };
                        if !take {
                            continue;
                        }
                        let p = pixel_channels(&pred, y, x, space);
                        let r = pixel_channels(&reference, y, x, space);
                        for c in 0..3 {
                            sum += (p[c] - r[c]) * (p[c] - r[c]);
                        }
                        cnt += 1;
                    }
                }
                let want = (sum / (cnt * 3) as f64).sqrt();
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rmse_region_degenerate_masks() {
        let pred = image(23, 6);
        let reference = image(24, 6);
        let ones = MaskTensor::from_array(A3::from_elem((1, 6, 6), 1.0)).unwrap();
        let zeros = MaskTensor::from_array(A3::from_elem((1, 6, 6), 0.0)).unwrap();
        let s = masked_rmse(&pred, &reference, &ones, Region::S, ColorSpace::Rgb).unwrap();
        let a = masked_rmse(&pred, &reference, &ones, Region::A, ColorSpace::Rgb).unwrap();
        assert_eq!(s, a);
        let n = masked_rmse(&pred, &reference, &zeros, Region::N, ColorSpace::Rgb).unwrap();
        let a2 = masked_rmse(&pred, &reference, &zeros, Region::A, ColorSpace::Rgb).unwrap();
        assert_eq!(n, a2);
        // empty regions error
        assert!(masked_rmse(&pred, &reference, &ones, Region::N, ColorSpace::Rgb).is_err());
        assert!(masked_rmse(&pred, &reference, &zeros, Region::S, ColorSpace::Rgb).is_err());
        // non-binary mask rejected
        let soft = MaskTensor::from_array(A3::from_elem((1, 6, 6), 0.5)).unwrap();
        assert!(masked_rmse(&pred, &reference, &soft, Region::S, ColorSpace::Rgb).is_err());
    }

    #[test]
    fn rmse_n_i_is_the_documented_alias() {
        let pred = image(25, 8);
        let input = image(26, 8);
        let mask = checker_mask(8, 8);
        let a = rmse_n_i(&pred, &input, &mask, ColorSpace::Lab).unwrap();
        let b = masked_rmse(&pred, &input, &mask, Region::N, ColorSpace::Lab).unwrap();
        assert_eq!(a, b);
        assert_eq!(rmse_n_i(&input, &input, &mask, ColorSpace::Rgb).unwrap(), 0.0);
    }

    #[test]
    fn extractor_is_deterministic_and_order_preserving() {
        let ex = RpConv64::new();
        let imgs: Vec<ImageTensor> = (0..4).map(|i| image(30 + i, 16)).collect();
        let fa = extract_features(&imgs, &ex).unwrap();
        let fb = extract_features(&imgs, &ex).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(fa.dim(), 64);
        assert_eq!(fa.extractor_id, DEFAULT_EXTRACTOR_ID);

        // permuting image order permutes rows correspondingly
        let perm: Vec<ImageTensor> = vec![
            imgs[2].clone(),
            imgs[0].clone(),
            imgs[3].clone(),
            imgs[1].clone(),
        ];
        let fp = extract_features(&perm, &ex).unwrap();
        for (new_row, &old) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(fp.data.row(new_row), fa.data.row(old));
        }
    }

    #[test]
    fn metrics_are_permutation_invariant_over_rows() {
        let a = random_set(40, 12, 5, 0.0);
        let b = random_set(41, 12, 5, 0.3);
        let mut perm = a.data.clone();
        // reverse the rows
        for i in 0..12 {
            for j in 0..5 {
                perm[[i, j]] = a.data[[11 - i, j]];
            }
        }
        let ap = FeatureSet::new(perm, "test").unwrap();
        let f1 = fid(&a, &b).unwrap();
        let f2 = fid(&ap, &b).unwrap();
        assert!((f1 - f2).abs() < 1e-10);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let k1 = kid(&a, &b, 12, 3, &mut r1).unwrap();
        let k2 = kid(&ap, &b, 12, 3, &mut r2).unwrap();
        assert!((k1.0 - k2.0).abs() < 1e-10);
    }

    #[test]
    fn default_extractor_separates_synthetic_domains() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::data::SynthSpec {
            n_shadow: 40,
            n_nonshadow: 80,
            image_size: 32,
            seed: 50,
            ..crate::data::SynthSpec::default()
        };
        crate::data::synthesize_corpus(&spec, dir.path()).unwrap();
        let ds = crate::data::UnpairedDataset::scan(dir.path()).unwrap();
        let load = |paths: &[std::path::PathBuf]| -> Vec<ImageTensor> {
            paths
                .iter()
                .map(|p| crate::tensor::load_image(p, crate::tensor::Normalization::SignedUnit).unwrap())
                .collect()
        };
        let shadow = load(&ds.shadow_paths);
        let nonshadow = load(&ds.nonshadow_paths);
        let ex = RpConv64::new();
        // equal set sizes on both sides so covariance sampling bias cancels
        // and only the domain gap decides the comparison
        let fs = extract_features(&shadow, &ex).unwrap();
        let half_a = extract_features(&nonshadow[..40], &ex).unwrap();
        let half_b = extract_features(&nonshadow[40..], &ex).unwrap();
        let cross = fid(&fs, &half_a).unwrap();
        let within = fid(&half_a, &half_b).unwrap();
        assert!(
            cross > within,
            "shadow/non-shadow FID {cross} should exceed within-set FID {within}"
        );
    }

    #[test]
    fn eval_report_serializes_only_requested_fields() {
        let report = EvalReport {
            fid: Some(1.5),
            extractor_id: Some(DEFAULT_EXTRACTOR_ID.into()),
            ..EvalReport::default()
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"fid\":1.5"));
        assert!(!json.contains("kid_mean"));
        assert!(!json.contains("rmse_s"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
