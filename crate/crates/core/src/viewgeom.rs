//! Two-view sampling and cross-view cell correspondence.
//!
//! A view is a random crop of the source image, optionally flipped, then
//! photometrically augmented and resized to the training resolution. Every
//! geometric fact needed later (which feature cells of view A are spatially
//! close to which cells of view B) is derived from the recorded [`ViewSpec`]s
//! alone, with distances measured in the source image's coordinate frame.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::panoptic::PanopticMap;
use crate::{Error, Result};

/// An RGB raster with values in [0, 1], row-major (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                context: "float image",
                expected: format!("{} values", height * width * 3),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_rgb8(img: &crate::io::RgbImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            data: img.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Photometric settings actually applied to one view. Factors of 1.0 and a
/// hue shift of 0.0 mean "untouched".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
    pub grayscale: bool,
    /// Solarize threshold when applied.
    pub solarize: Option<f64>,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 0.0,
            grayscale: false,
            solarize: None,
        }
    }
}

/// Geometry and augmentation record of one sampled view, in source-image
/// pixels. Serializes to JSON for reproducibility logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub origin_row: usize,
    pub origin_col: usize,
    pub height: usize,
    pub width: usize,
    #[serde(rename = "flip")]
    pub flip_horizontal: bool,
    pub aug: AugmentationParams,
}

/// A cropped, augmented, resized view plus its spec.
#[derive(Clone, Debug)]
pub struct AugmentedView {
    pub pixels: FloatImage,
    pub spec: ViewSpec,
}

/// Sampling configuration for view pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSampleConfig {
    /// Crop area as a fraction of the source area.
    pub scale_range: (f64, f64),
    /// Aspect (width/height) jitter range, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    /// Training resolution every view is resized to.
    pub out_height: usize,
    pub out_width: usize,
    /// Feature stride of the encoder; crops never get smaller than this.
    pub feature_stride: usize,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub saturation_jitter: f64,
    pub hue_jitter: f64,
    pub grayscale_prob: f64,
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
}

impl Default for ViewSampleConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.2, 1.0),
            aspect_range: (0.75, 4.0 / 3.0),
            out_height: 64,
            out_width: 128,
            feature_stride: 8,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness_jitter: 0.4,
            contrast_jitter: 0.4,
            saturation_jitter: 0.4,
            hue_jitter: 0.1,
            grayscale_prob: 0.2,
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
        }
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Apply the recorded photometric chain in a fixed order: brightness,
/// contrast, saturation, hue rotation, grayscale, solarize. Values are
/// clamped to [0, 1] after every step.
pub fn apply_photometric(img: &mut FloatImage, aug: &AugmentationParams) {
    if aug.brightness != 1.0 {
        for v in &mut img.data {
            *v = clamp01(*v * aug.brightness);
        }
    }
    if aug.contrast != 1.0 {
        let mean: f64 = {
            let mut sum = 0.0;
            for i in 0..img.height * img.width {
                sum += luma(img.pixel(i / img.width, i % img.width));
            }
            sum / (img.height * img.width) as f64
        };
        for v in &mut img.data {
            *v = clamp01((*v - mean) * aug.contrast + mean);
        }
    }
    if aug.saturation != 1.0 {
        for i in 0..img.height * img.width {
            let (r, c) = (i / img.width, i % img.width);
            let p = img.pixel(r, c);
            let l = luma(p);
            img.set_pixel(
                r,
                c,
                [
                    clamp01(l + (p[0] - l) * aug.saturation),
                    clamp01(l + (p[1] - l) * aug.saturation),
                    clamp01(l + (p[2] - l) * aug.saturation),
                ],
            );
        }
    }
    if aug.hue_shift != 0.0 {
        // rotate the chroma plane in YIQ space
        let angle = aug.hue_shift * std::f64::consts::TAU;
        let (sin, cos) = angle.sin_cos();
        for i in 0..img.height * img.width {
            let (r, c) = (i / img.width, i % img.width);
            let [red, green, blue] = img.pixel(r, c);
            let y = 0.299 * red + 0.587 * green + 0.114 * blue;
            let iq = 0.596 * red - 0.274 * green - 0.322 * blue;
            let q = 0.211 * red - 0.523 * green + 0.312 * blue;
            let i2 = iq * cos - q * sin;
            let q2 = iq * sin + q * cos;
            img.set_pixel(
                r,
                c,
                [
                    clamp01(y + 0.956 * i2 + 0.621 * q2),
                    clamp01(y - 0.272 * i2 - 0.647 * q2),
                    clamp01(y - 1.106 * i2 + 1.703 * q2),
                ],
            );
        }
    }
    if aug.grayscale {
        for i in 0..img.height * img.width {
            let (r, c) = (i / img.width, i % img.width);
            let l = luma(img.pixel(r, c));
            img.set_pixel(r, c, [l, l, l]);
        }
    }
    if let Some(threshold) = aug.solarize {
        for v in &mut img.data {
            if *v > threshold {
                *v = clamp01(1.0 - *v);
            }
        }
    }
}

/// Crop, flip and bilinearly resize the source image according to the spec's
/// geometry. Photometric parameters are not applied here.
pub fn extract_view_geometry(
    image: &FloatImage,
    spec: &ViewSpec,
    out_height: usize,
    out_width: usize,
) -> FloatImage {
    let mut out = FloatImage::zeros(out_height, out_width);
    let scale_r = spec.height as f64 / out_height as f64;
    let scale_c = spec.width as f64 / out_width as f64;
    for y in 0..out_height {
        let v = ((y as f64 + 0.5) * scale_r - 0.5).clamp(0.0, spec.height as f64 - 1.0);
        let r0 = v.floor() as usize;
        let r1 = (r0 + 1).min(spec.height - 1);
        let fr = v - r0 as f64;
        for x in 0..out_width {
            let mut u = ((x as f64 + 0.5) * scale_c - 0.5).clamp(0.0, spec.width as f64 - 1.0);
            if spec.flip_horizontal {
                u = spec.width as f64 - 1.0 - u;
            }
            let c0 = u.floor() as usize;
            let c1 = (c0 + 1).min(spec.width - 1);
            let fc = u - c0 as f64;
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let at = |r: usize, c: usize| {
                    image.pixel(spec.origin_row + r, spec.origin_col + c)[ch]
                };
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                rgb[ch] = top * (1.0 - fr) + bot * fr;
            }
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

/// Apply the spec's crop/flip/resize to a label raster with nearest-neighbor
/// sampling. Photometric parameters never touch labels, so the output depends
/// only on the crop geometry and the flip.
pub fn extract_view_labels(
    labels: &PanopticMap,
    spec: &ViewSpec,
    out_height: usize,
    out_width: usize,
) -> PanopticMap {
    let mut ids = Vec::with_capacity(out_height * out_width);
    let scale_r = spec.height as f64 / out_height as f64;
    let scale_c = spec.width as f64 / out_width as f64;
    for y in 0..out_height {
        let v = (((y as f64 + 0.5) * scale_r - 0.5).round()).clamp(0.0, spec.height as f64 - 1.0);
        for x in 0..out_width {
            let mut u =
                (((x as f64 + 0.5) * scale_c - 0.5).round()).clamp(0.0, spec.width as f64 - 1.0);
            if spec.flip_horizontal {
                u = spec.width as f64 - 1.0 - u;
            }
            ids.push(labels.id(spec.origin_row + v as usize, spec.origin_col + u as usize));
        }
    }
    PanopticMap {
        height: out_height,
        width: out_width,
        ids,
    }
}

fn sample_aug(rng: &mut ChaCha8Rng, cfg: &ViewSampleConfig) -> AugmentationParams {
    let mut aug = AugmentationParams::identity();
    if rng.random_bool(cfg.jitter_prob) {
        aug.brightness = 1.0 + rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
        aug.contrast = 1.0 + rng.random_range(-cfg.contrast_jitter..=cfg.contrast_jitter);
        aug.saturation = 1.0 + rng.random_range(-cfg.saturation_jitter..=cfg.saturation_jitter);
        aug.hue_shift = rng.random_range(-cfg.hue_jitter..=cfg.hue_jitter);
    }
    aug.grayscale = rng.random_bool(cfg.grayscale_prob);
    if rng.random_bool(cfg.solarize_prob) {
        aug.solarize = Some(cfg.solarize_threshold);
    }
    aug
}

/// Sample one view spec: a random resized crop with aspect jitter, falling
/// back to the full image when ten attempts stay out of bounds.
pub fn sample_view_spec(
    image_height: usize,
    image_width: usize,
    rng: &mut ChaCha8Rng,
    cfg: &ViewSampleConfig,
) -> ViewSpec {
    let area = (image_height * image_width) as f64;
    let min = cfg.feature_stride.max(1);
    let mut crop = None;
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        let aspect = (rng.random_range(cfg.aspect_range.0.ln()..=cfg.aspect_range.1.ln())).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= min && h >= min && w <= image_width && h <= image_height {
            let row = rng.random_range(0..=image_height - h);
            let col = rng.random_range(0..=image_width - w);
            crop = Some((row, col, h, w));
            break;
        }
    }
    let (origin_row, origin_col, height, width) =
        crop.unwrap_or((0, 0, image_height, image_width));
    ViewSpec {
        origin_row,
        origin_col,
        height,
        width,
        flip_horizontal: rng.random_bool(cfg.flip_prob),
        aug: sample_aug(rng, cfg),
    }
}

/// Sample a pair of augmented views from one image. Overlap is permitted but
/// not required; both views are resized to the configured resolution.
pub fn sample_view_pair(
    image: &FloatImage,
    rng: &mut ChaCha8Rng,
    cfg: &ViewSampleConfig,
) -> Result<(AugmentedView, AugmentedView)> {
    let min = 2 * cfg.feature_stride;
    if image.height < min || image.width < min {
        return Err(Error::ImageTooSmall {
            height: image.height,
            width: image.width,
            min,
        });
    }
    let make = |rng: &mut ChaCha8Rng| {
        let spec = sample_view_spec(image.height, image.width, rng, cfg);
        let mut pixels = extract_view_geometry(image, &spec, cfg.out_height, cfg.out_width);
        apply_photometric(&mut pixels, &spec.aug);
        AugmentedView { pixels, spec }
    };
    Ok((make(rng), make(rng)))
}

/// Source-image coordinates of the center of feature cell (row, col) for a
/// view whose feature grid has `grid_shape` cells. Linear in both indices.
pub fn cell_center_in_source(
    spec: &ViewSpec,
    cell: (usize, usize),
    grid_shape: (usize, usize),
) -> Result<(f64, f64)> {
    let (rows, cols) = grid_shape;
    if cell.0 >= rows || cell.1 >= cols {
        return Err(Error::CellOutOfGrid {
            row: cell.0,
            col: cell.1,
            rows,
            cols,
        });
    }
    let bin_h = spec.height as f64 / rows as f64;
    let bin_w = spec.width as f64 / cols as f64;
    let row = spec.origin_row as f64 + (cell.0 as f64 + 0.5) * bin_h;
    let offset = (cell.1 as f64 + 0.5) * bin_w;
    let col = if spec.flip_horizontal {
        spec.origin_col as f64 + spec.width as f64 - offset
    } else {
        spec.origin_col as f64 + offset
    };
    Ok((row, col))
}

/// Partition of cross-view cell pairs into positives and negatives, plus the
/// threshold that produced it. `positives[i]` lists the view-B cells whose
/// source-space center lies within the threshold of view-A cell `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub grid_shape_a: (usize, usize),
    pub grid_shape_b: (usize, usize),
    pub positives: Vec<Vec<u32>>,
    pub negatives: Vec<Vec<u32>>,
    /// Dimensionless threshold: fraction of the larger bin diagonal.
    pub threshold_ratio: f64,
    /// Resolved absolute distance threshold in source-image pixels.
    pub threshold_px: f64,
}

impl CorrespondenceSet {
    pub fn cells_a(&self) -> usize {
        self.grid_shape_a.0 * self.grid_shape_a.1
    }

    pub fn cells_b(&self) -> usize {
        self.grid_shape_b.0 * self.grid_shape_b.1
    }

    /// Total number of positive pairs.
    pub fn positive_pairs(&self) -> usize {
        self.positives.iter().map(|p| p.len()).sum()
    }

    pub fn has_positives(&self) -> bool {
        self.positives.iter().any(|p| !p.is_empty())
    }

    /// The same partition seen from view B: `j ∈ positives_A(i)` becomes
    /// `i ∈ positives_B(j)`.
    pub fn swap(&self) -> CorrespondenceSet {
        let cells_b = self.cells_b();
        let mut positives = vec![Vec::new(); cells_b];
        for (i, pos) in self.positives.iter().enumerate() {
            for &j in pos {
                positives[j as usize].push(i as u32);
            }
        }
        let cells_a = self.cells_a() as u32;
        let negatives = positives
            .iter()
            .map(|pos| (0..cells_a).filter(|i| !pos.contains(i)).collect())
            .collect();
        CorrespondenceSet {
            grid_shape_a: self.grid_shape_b,
            grid_shape_b: self.grid_shape_a,
            positives,
            negatives,
            threshold_ratio: self.threshold_ratio,
            threshold_px: self.threshold_px,
        }
    }
}

/// Build the positive/negative partition for a pair of view specs.
///
/// A pair (i, j) is positive iff the Euclidean distance between the cells'
/// source-space centers is at most `threshold_ratio` times the larger of the
/// two views' bin diagonals. Every other pair is negative.
pub fn build_correspondence(
    spec_a: &ViewSpec,
    spec_b: &ViewSpec,
    grid_a: (usize, usize),
    grid_b: (usize, usize),
    threshold_ratio: f64,
) -> Result<CorrespondenceSet> {
    if !(threshold_ratio > 0.0) {
        return Err(Error::invalid(
            "threshold_ratio",
            format!("{threshold_ratio} must be > 0"),
        ));
    }
    let diag = |spec: &ViewSpec, grid: (usize, usize)| {
        let bin_h = spec.height as f64 / grid.0 as f64;
        let bin_w = spec.width as f64 / grid.1 as f64;
        bin_h.hypot(bin_w)
    };
    let threshold_px = threshold_ratio * diag(spec_a, grid_a).max(diag(spec_b, grid_b));

    let centers = |spec: &ViewSpec, grid: (usize, usize)| -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(grid.0 * grid.1);
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                out.push(cell_center_in_source(spec, (r, c), grid)?);
            }
        }
        Ok(out)
    };
    let centers_a = centers(spec_a, grid_a)?;
    let centers_b = centers(spec_b, grid_b)?;

    let mut positives = Vec::with_capacity(centers_a.len());
    let mut negatives = Vec::with_capacity(centers_a.len());
    for &(ra, ca) in &centers_a {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (j, &(rb, cb)) in centers_b.iter().enumerate() {
            if (ra - rb).hypot(ca - cb) <= threshold_px {
                pos.push(j as u32);
            } else {
                neg.push(j as u32);
            }
        }
        positives.push(pos);
        negatives.push(neg);
    }
    Ok(CorrespondenceSet {
        grid_shape_a: grid_a,
        grid_shape_b: grid_b,
        positives,
        negatives,
        threshold_ratio,
        threshold_px,
    })
}
