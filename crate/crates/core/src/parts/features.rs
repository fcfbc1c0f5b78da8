//! Grayscale images and the single-scale HOG patch descriptor.
//!
//! One descriptor covers an N x N patch split into c x c cells; each cell
//! holds a histogram of unsigned gradient orientations with bilinear votes
//! by gradient magnitude, and the concatenated histograms are normalized by
//! the global patch L2 norm. Defaults (32px patch, 4x4 cells, 9 bins) give
//! the 144-dimensional descriptor the rest of the module is sized for.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::{Error, Result};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    /// Loads a PGM or PPM file (any format the PNM decoder accepts),
    /// converted to grayscale.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Self::new(w, h, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixel read with edge replication outside the bounds.
    pub fn get(&self, x: i64, y: i64) -> f64 {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.pixels[yc * self.width + xc]
    }

    /// Horizontally mirrored copy, for testing the feature-level mirror.
    pub fn mirrored(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get((self.width - 1 - x) as i64, y as i64)
        })
    }
}

/// HOG layout parameters. `patch_size` must be divisible by `cells`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub patch_size: usize,
    pub cells: usize,
    pub bins: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { patch_size: 32, cells: 4, bins: 9 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.bins < 2 || self.patch_size == 0 {
            return Err(Error::Config("degenerate feature configuration".into()));
        }
        if self.patch_size % self.cells != 0 {
            return Err(Error::Config(format!(
                "patch size {} not divisible into {} cells",
                self.patch_size, self.cells
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cells * self.cells * self.bins
    }
}

/// Descriptor at `center`, requiring the patch to lie fully inside the
/// image. Callers that cannot guarantee that use
/// [`extract_feature_padded`].
pub fn extract_feature(
    image: &GrayImage,
    center_x: f64,
    center_y: f64,
    config: &FeatureConfig,
) -> Result<DVector<f64>> {
    config.validate()?;
    let half = (config.patch_size / 2) as i64;
    let cx = center_x.round() as i64;
    let cy = center_y.round() as i64;
    let n = config.patch_size as i64;
    if cx - half < 0
        || cy - half < 0
        || cx - half + n > image.width as i64
        || cy - half + n > image.height as i64
    {
        return Err(Error::PatchOutOfBounds(center_x, center_y));
    }
    Ok(hog_at(image, cx, cy, config))
}

/// Descriptor at `center` with edge replication wherever the patch leaves
/// the image.
pub fn extract_feature_padded(
    image: &GrayImage,
    center_x: f64,
    center_y: f64,
    config: &FeatureConfig,
) -> DVector<f64> {
    hog_at(image, center_x.round() as i64, center_y.round() as i64, config)
}

fn hog_at(image: &GrayImage, cx: i64, cy: i64, config: &FeatureConfig) -> DVector<f64> {
    let n = config.patch_size;
    let half = (n / 2) as i64;
    let cell_px = n / config.cells;
    let b = config.bins;
    let mut hist = vec![0.0f64; config.dim()];
    for py in 0..n {
        for px in 0..n {
            let x = cx - half + px as i64;
            let y = cy - half + py as i64;
            let gx = 0.5 * (image.get(x + 1, y) - image.get(x - 1, y));
            let gy = 0.5 * (image.get(x, y + 1) - image.get(x, y - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            // Unsigned orientation in [0, pi); bin centers at h*pi/b with
            // circular bilinear votes.
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            if theta >= std::f64::consts::PI {
                theta -= std::f64::consts::PI;
            }
            let u = theta * b as f64 / std::f64::consts::PI;
            let lo = u.floor();
            let frac = u - lo;
            let bin0 = (lo as usize) % b;
            let bin1 = (bin0 + 1) % b;
            let cell = (py / cell_px) * config.cells + px / cell_px;
            hist[cell * b + bin0] += mag * (1.0 - frac);
            hist[cell * b + bin1] += mag * frac;
        }
    }
    let norm: f64 = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = 1.0 / (norm + 1e-6);
    DVector::from_iterator(config.dim(), hist.into_iter().map(|v| v * scale))
}

/// Feature-level horizontal mirror: cells flip left-right and each
/// orientation maps to its reflection `theta -> pi - theta`, which is the
/// bin permutation `h -> (b - h) mod b`. Equals extracting from the
/// mirrored image at center `width - cx` (the patch span `[c-N/2, c+N/2)`
/// is asymmetric around an integer center, so the mirrored center shifts
/// by one).
pub fn mirror_feature(feature: &DVector<f64>, config: &FeatureConfig) -> Result<DVector<f64>> {
    if feature.len() != config.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature length {} for configuration dimension {}",
            feature.len(),
            config.dim()
        )));
    }
    let c = config.cells;
    let b = config.bins;
    let mut out = DVector::zeros(feature.len());
    for cy in 0..c {
        for cx in 0..c {
            let src = (cy * c + cx) * b;
            let dst = (cy * c + (c - 1 - cx)) * b;
            for h in 0..b {
                out[dst + (b - h) % b] = feature[src + h];
            }
        }
    }
    Ok(out)
}
