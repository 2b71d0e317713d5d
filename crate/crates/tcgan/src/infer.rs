//! End-to-end shadow removal: run both restoration branches, score each
//! candidate with the selection classifier, return the higher-scoring one.
//! Also hosts the encoder feature-map exporter used for qualitative
//! inspection of what the two encoders learn.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::{Generator, GeneratorPair, Msm};
use crate::tensor::{compose_shadow_free, ImageTensor};

/// Outcome of classifier-selected removal. Both candidates are retained so
/// branch-level ablations can compare them.
#[derive(Debug, Clone)]
pub struct RemovalResult {
    pub selected: ImageTensor,
    /// 1 or 2; ties go to branch 1.
    pub selected_branch: u8,
    pub prob1: f32,
    pub prob2: f32,
    pub y1: ImageTensor,
    pub y2: ImageTensor,
}

/// Documented tie-break: branch 1 wins when the probabilities are equal.
fn select_branch(prob1: f32, prob2: f32) -> u8 {
    if prob1 >= prob2 {
        1
    } else {
        2
    }
}

/// Single-branch removal: compose the clamped shadow-free estimate of one
/// generator. Requires spatial dims that are multiples of 8.
pub fn remove_shadow_fixed(g: &Generator<f32>, x: &ImageTensor) -> Result<ImageTensor> {
    let r = g.residual(x)?;
    compose_shadow_free(x, &r)
}

/// Full removal: both branches, classifier scores, argmax selection.
pub fn remove_shadow(
    gp: &GeneratorPair<f32>,
    msm: &Msm<f32>,
    x: &ImageTensor,
) -> Result<RemovalResult> {
    let y1 = remove_shadow_fixed(&gp.g1, x)?;
    let y2 = remove_shadow_fixed(&gp.g2, x)?;
    let prob1 = msm.probability(&y1);
    let prob2 = msm.probability(&y2);
    let selected_branch = select_branch(prob1, prob2);
    let selected = if selected_branch == 1 {
        y1.clone()
    } else {
        y2.clone()
    };
    Ok(RemovalResult {
        selected,
        selected_branch,
        prob1,
        prob2,
        y1,
        y2,
    })
}

/// Files written by [`dump_ste_features`], one grid image and one raw
/// binary per encoder.
#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub grids: [PathBuf; 2],
    pub raws: [PathBuf; 2],
}

const FEATURE_CHANNELS: usize = 256;
const GRID_MAX_COLS: usize = 5;

/// Monotone viridis-like anchor colors, dark-blue to yellow.
const COLORMAP: [[f32; 3]; 8] = [
    [68.0, 1.0, 84.0],
    [70.0, 50.0, 127.0],
    [54.0, 92.0, 141.0],
    [39.0, 127.0, 143.0],
    [31.0, 161.0, 136.0],
    [74.0, 194.0, 109.0],
    [159.0, 218.0, 58.0],
    [253.0, 231.0, 37.0],
];

fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f32;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - i as f32;
    std::array::from_fn(|c| {
        (COLORMAP[i][c] * (1.0 - f) + COLORMAP[i + 1][c] * f).round() as u8
    })
}

/// Renders the first `k` channels as a tile grid (row-major, up to five
/// tiles per row). Each tile is min-max normalized on its own; a constant
/// channel renders as uniform mid-gray (128) — the degenerate min==max
/// rule — so dead channels are visually obvious.
fn render_grid(features: &Array3<f32>, k: usize) -> (Vec<u8>, usize, usize) {
    let (_, th, tw) = features.dim();
    let cols = GRID_MAX_COLS.min(k);
    let rows = k.div_ceil(cols);
    let (gh, gw) = (rows * th, cols * tw);
    let mut rgb = vec![0u8; 3 * gh * gw];
    for ch in 0..k {
        let (gy, gx) = (ch / cols, ch % cols);
        let plane = features.index_axis(ndarray::Axis(0), ch);
        let min = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = max - min;
        for y in 0..th {
            for x in 0..tw {
                let px = if span > 1e-12 {
                    colormap((plane[[y, x]] - min) / span)
                } else {
                    [128, 128, 128]
                };
                let o = 3 * ((gy * th + y) * gw + (gx * tw + x));
                rgb[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    (rgb, gh, gw)
}

fn write_raw(path: &Path, features: &Array3<f32>, k: usize) -> Result<()> {
    let (_, h, w) = features.dim();
    let mut bytes = Vec::with_capacity(12 + 4 * k * h * w);
    for dim in [k as u32, h as u32, w as u32] {
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for ch in 0..k {
        for y in 0..h {
            for x in 0..w {
                bytes.extend_from_slice(&features[[ch, y, x]].to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes heat-map grids and raw values of the first `k` encoder channels
/// of both branches under `out_dir` (`ste1_features.png/.bin`, likewise
/// `ste2`). `k` is capped by the encoder width (256).
pub fn dump_ste_features(
    gp: &GeneratorPair<f32>,
    x: &ImageTensor,
    k: usize,
    out_dir: &Path,
) -> Result<FeatureDump> {
    if k == 0 || k > FEATURE_CHANNELS {
        return Err(Error::InvalidInput {
            context: "feature dump",
            reason: format!("channel count {k} outside 1..={FEATURE_CHANNELS}"),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut grids = Vec::with_capacity(2);
    let mut raws = Vec::with_capacity(2);
    for (idx, gen) in [&gp.g1, &gp.g2].into_iter().enumerate() {
        let features = gen.ste_features(x)?;
        let (rgb, gh, gw) = render_grid(&features, k);
        let grid_path = out_dir.join(format!("ste{}_features.png", idx + 1));
        image::save_buffer(
            &grid_path,
            &rgb,
            gw as u32,
            gh as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Data(format!("failed to write {grid_path:?}: {e}")))?;
        let raw_path = out_dir.join(format!("ste{}_features.bin", idx + 1));
        write_raw(&raw_path, &features, k)?;
        grids.push(grid_path);
        raws.push(raw_path);
    }
    Ok(FeatureDump {
        grids: [grids.remove(0), grids.remove(0)],
        raws: [raws.remove(0), raws.remove(0)],
    })
}
