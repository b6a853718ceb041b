//! Grayscale rendering and gradient-histogram feature encoding.
//!
//! Images are 96x96 grayscale in [0, 1]. The feature encoder computes
//! histograms of oriented gradients: centered differences with edge
//! replication, unsigned orientation in [0, 180) split into 6 bins with
//! linear interpolation between neighbouring bin centers, 16-pixel cells,
//! 2x2-cell blocks at stride one cell, and L2 block normalization with
//! clipping at 0.2 followed by renormalization. For the default geometry
//! this yields 5x5 blocks x 24 values = 600 features.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid image file: {0}")]
    Format(String),
    #[error("image {width}x{height} incompatible with cell size {cell}")]
    Geometry { width: usize, height: usize, cell: usize },
}

/// Row-major grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = GrayImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.pixels[y * width + x] = f(x, y);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel with indices clamped to the image border (edge replication).
    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// Writes the image as an 8-bit binary PGM file.
    pub fn save_pgm(&self, path: &Path) -> Result<(), VisionError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Reads an 8-bit binary PGM file.
    pub fn load_pgm(path: &Path) -> Result<Self, VisionError> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let mut pos = 0usize;

        // PGM headers are ASCII tokens separated by whitespace, with
        // '#'-to-end-of-line comments allowed between them.
        let mut next_token = |raw: &[u8]| -> Result<String, VisionError> {
            loop {
                while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < raw.len() && raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(VisionError::Format("truncated header".into()));
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };

        if next_token(&raw)? != "P5" {
            return Err(VisionError::Format("not a binary PGM (P5) file".into()));
        }
        let parse = |s: String| {
            s.parse::<usize>()
                .map_err(|_| VisionError::Format(format!("bad header token '{s}'")))
        };
        let width = parse(next_token(&raw)?)?;
        let height = parse(next_token(&raw)?)?;
        let maxval = parse(next_token(&raw)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(VisionError::Format(format!("unsupported maxval {maxval}")));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height;
        if raw.len() < pos + need {
            return Err(VisionError::Format("truncated pixel data".into()));
        }
        let pixels = raw[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / maxval as f64)
            .collect();
        Ok(GrayImage { width, height, pixels })
    }
}

/// Feature encoder geometry.
#[derive(Clone, Copy, Debug)]
pub struct HogParams {
    pub cell_size: usize,
    pub n_bins: usize,
    /// Block side length in cells.
    pub block_size: usize,
    /// L2 clipping threshold applied before renormalization.
    pub clip: f64,
}

impl Default for HogParams {
    fn default() -> Self {
        HogParams {
            cell_size: 16,
            n_bins: 6,
            block_size: 2,
            clip: 0.2,
        }
    }
}

impl HogParams {
    pub fn cells(&self, img_w: usize, img_h: usize) -> (usize, usize) {
        (img_w / self.cell_size, img_h / self.cell_size)
    }

    /// Total feature length for an image of the given size.
    pub fn feature_len(&self, img_w: usize, img_h: usize) -> usize {
        let (cx, cy) = self.cells(img_w, img_h);
        let bx = cx + 1 - self.block_size;
        let by = cy + 1 - self.block_size;
        bx * by * self.block_size * self.block_size * self.n_bins
    }
}

/// Per-cell orientation histograms, row-major over cells.
pub fn hog_cell_histograms(img: &GrayImage, params: &HogParams) -> Result<Vec<Vec<f64>>, VisionError> {
    if img.width % params.cell_size != 0
        || img.height % params.cell_size != 0
        || img.width < params.cell_size * params.block_size
        || img.height < params.cell_size * params.block_size
    {
        return Err(VisionError::Geometry {
            width: img.width,
            height: img.height,
            cell: params.cell_size,
        });
    }
    let (cx, cy) = params.cells(img.width, img.height);
    let bin_width = 180.0 / params.n_bins as f64;
    let mut cells = vec![vec![0.0; params.n_bins]; cx * cy];

    for y in 0..img.height {
        for x in 0..img.width {
            let gx = img.get_clamped(x as isize + 1, y as isize)
                - img.get_clamped(x as isize - 1, y as isize);
            let gy = img.get_clamped(x as isize, y as isize + 1)
                - img.get_clamped(x as isize, y as isize - 1);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx).to_degrees();
            if theta < 0.0 {
                theta += 180.0;
            }
            if theta >= 180.0 {
                theta -= 180.0;
            }
            // Bins are centered at k * bin_width; a vote splits linearly
            // between the two nearest centers, wrapping at 180.
            let p = theta / bin_width;
            let k = p.floor() as usize;
            let frac = p - k as f64;
            let cell = (y / params.cell_size) * cx + x / params.cell_size;
            cells[cell][k % params.n_bins] += mag * (1.0 - frac);
            cells[cell][(k + 1) % params.n_bins] += mag * frac;
        }
    }
    Ok(cells)
}

/// Full block-normalized descriptor: blocks row-major, cells within a block
/// row-major, bins in order. L2 normalization, clip, renormalize; blocks
/// with zero energy stay zero.
pub fn hog_encode(img: &GrayImage, params: &HogParams) -> Result<Vec<f64>, VisionError> {
    let cells = hog_cell_histograms(img, params)?;
    let (cx, cy) = params.cells(img.width, img.height);
    let bs = params.block_size;
    let mut out = Vec::with_capacity(params.feature_len(img.width, img.height));

    for by in 0..=(cy - bs) {
        for bx in 0..=(cx - bs) {
            let mut block = Vec::with_capacity(bs * bs * params.n_bins);
            for dy in 0..bs {
                for dx in 0..bs {
                    block.extend_from_slice(&cells[(by + dy) * cx + (bx + dx)]);
                }
            }
            l2_hys(&mut block, params.clip);
            out.extend_from_slice(&block);
        }
    }
    Ok(out)
}

fn l2_hys(block: &mut [f64], clip: f64) {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in block.iter_mut() {
            *v = (*v / norm).min(clip);
        }
        let norm2 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm2 > 0.0 {
            for v in block.iter_mut() {
                *v /= norm2;
            }
        }
    }
}

/// World-space window rendered by the fixed side-view camera: world x maps
/// to image columns, world z to image rows (z increasing upward).
#[derive(Clone, Copy, Debug)]
pub struct ViewBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

/// Axis-aligned rectangle in world x/z with a gray shade, painted over
/// whatever is below it.
#[derive(Clone, Copy, Debug)]
pub struct ShadedRect {
    pub x0: f64,
    pub x1: f64,
    pub z0: f64,
    pub z1: f64,
    pub shade: f64,
}

/// Paints rectangles back-to-front over a uniform background with exact
/// per-pixel area coverage, so sub-pixel motion produces smooth intensity
/// changes.
pub fn rasterize(
    view: &ViewBounds,
    background: f64,
    rects: &[ShadedRect],
    width: usize,
    height: usize,
) -> GrayImage {
    let mut img = GrayImage::from_fn(width, height, |_, _| background);
    let sx = width as f64 / (view.x_max - view.x_min);
    let sz = height as f64 / (view.z_max - view.z_min);

    for r in rects {
        // Image-space extents; rows count down from the top of the window.
        let ix0 = (r.x0.min(r.x1) - view.x_min) * sx;
        let ix1 = (r.x0.max(r.x1) - view.x_min) * sx;
        let iy0 = (view.z_max - r.z0.max(r.z1)) * sz;
        let iy1 = (view.z_max - r.z0.min(r.z1)) * sz;

        let px0 = ix0.floor().max(0.0) as usize;
        let px1 = (ix1.ceil() as isize).clamp(0, width as isize) as usize;
        let py0 = iy0.floor().max(0.0) as usize;
        let py1 = (iy1.ceil() as isize).clamp(0, height as isize) as usize;

        for py in py0..py1 {
            let cov_y = overlap(py as f64, py as f64 + 1.0, iy0, iy1);
            if cov_y == 0.0 {
                continue;
            }
            for px in px0..px1 {
                let cov = cov_y * overlap(px as f64, px as f64 + 1.0, ix0, ix1);
                if cov > 0.0 {
                    let old = img.get(px, py);
                    img.set(px, py, old * (1.0 - cov) + r.shade * cov);
                }
            }
        }
    }
    img
}

#[inline]
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}
