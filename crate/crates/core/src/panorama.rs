//! Equirectangular panoramas: field-of-view cropping with column wraparound,
//! the FoV sweep harness, and a procedural synthetic scene generator that
//! emits paired RGB / panoptic-label rasters.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::RgbImage;
use crate::panoptic::{
    class_of, encode_id, ClassTable, PanopticMap, PqAccumulator, PqReport, VOID,
};
use crate::{Error, Result};

/// A full-wrap (360°) equirectangular panorama: RGB raster plus an aligned
/// panoptic label raster. Column `width` adjoins column 0.
#[derive(Clone, Debug)]
pub struct Panorama {
    pub rgb: RgbImage,
    pub labels: PanopticMap,
}

impl Panorama {
    pub fn new(rgb: RgbImage, labels: PanopticMap) -> Result<Self> {
        if rgb.height != labels.height || rgb.width != labels.width {
            return Err(Error::DimensionMismatch(
                rgb.height,
                rgb.width,
                labels.height,
                labels.width,
            ));
        }
        Ok(Self { rgb, labels })
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }
}

/// Width in columns of a `fov_degrees` crop from a raster `width` columns
/// wide, proportional to degrees with round-half-up.
pub fn fov_crop_width(width: usize, fov_degrees: f64) -> usize {
    (fov_degrees / 360.0 * width as f64).round() as usize
}

/// Roll columns to the right by `shift` (content at column 0 moves to column
/// `shift`); negative shifts roll left. Rows are untouched.
pub fn roll_columns(map: &PanopticMap, shift: i64) -> PanopticMap {
    let w = map.width as i64;
    let mut ids = vec![0u16; map.ids.len()];
    for row in 0..map.height {
        for col in 0..map.width {
            let src = (col as i64 - shift).rem_euclid(w) as usize;
            ids[row * map.width + col] = map.id(row, src);
        }
    }
    PanopticMap {
        height: map.height,
        width: map.width,
        ids,
    }
}

fn crop_columns_map(map: &PanopticMap, start: usize, out_w: usize) -> PanopticMap {
    let mut ids = Vec::with_capacity(map.height * out_w);
    for row in 0..map.height {
        for k in 0..out_w {
            ids.push(map.id(row, (start + k) % map.width));
        }
    }
    PanopticMap {
        height: map.height,
        width: out_w,
        ids,
    }
}

fn crop_columns_rgb(img: &RgbImage, start: usize, out_w: usize) -> RgbImage {
    let mut pixels = Vec::with_capacity(img.height * out_w * 3);
    for row in 0..img.height {
        for k in 0..out_w {
            pixels.extend_from_slice(&img.pixel(row, (start + k) % img.width));
        }
    }
    RgbImage {
        height: img.height,
        width: out_w,
        pixels,
    }
}

fn crop_start(width: usize, out_w: usize, center_col: usize) -> usize {
    (center_col as i64 - out_w as i64 / 2).rem_euclid(width as i64) as usize
}

/// Crop a centered field-of-view window from a panoptic map, wrapping across
/// the seam. Full height is retained; segments split by the crop boundary
/// keep their ids. `fov = 360` returns the map as stored.
pub fn crop_fov_map(map: &PanopticMap, fov_degrees: f64, center_col: usize) -> Result<PanopticMap> {
    if !(fov_degrees > 0.0 && fov_degrees <= 360.0) {
        return Err(Error::invalid(
            "fov",
            format!("{fov_degrees} not in (0, 360]"),
        ));
    }
    let out_w = fov_crop_width(map.width, fov_degrees);
    if out_w == map.width {
        return Ok(map.clone());
    }
    Ok(crop_columns_map(
        map,
        crop_start(map.width, out_w, center_col),
        out_w,
    ))
}

/// [`crop_fov_map`] applied to RGB and labels together.
pub fn crop_fov(p: &Panorama, fov_degrees: f64, center_col: usize) -> Result<Panorama> {
    let labels = crop_fov_map(&p.labels, fov_degrees, center_col)?;
    if labels.width == p.width() {
        return Ok(p.clone());
    }
    let start = crop_start(p.width(), labels.width, center_col);
    Ok(Panorama {
        rgb: crop_columns_rgb(&p.rgb, start, labels.width),
        labels,
    })
}

/// FoV sweep configuration. The default grid spans 140 to 338 degrees.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FovSweepConfig {
    pub fovs: Vec<f64>,
    /// Crop center; panoramas are cropped starting from this column.
    pub center_col: usize,
}

impl FovSweepConfig {
    pub fn with_center(center_col: usize) -> Self {
        Self {
            fovs: vec![140.0, 170.0, 205.0, 237.0, 271.0, 304.0, 338.0],
            center_col,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &fov in &self.fovs {
            if !(fov > 0.0 && fov <= 360.0) {
                return Err(Error::invalid("fov", format!("{fov} not in (0, 360]")));
            }
        }
        Ok(())
    }
}

/// One sweep row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FovSweepRow {
    pub fov_deg: f64,
    pub pq: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub pq_things: Option<f64>,
}

/// For each FoV (ascending), crop every prediction/ground-truth pair to the
/// centered window and evaluate dataset-level PQ over the crops.
pub fn fov_sweep(
    pairs: &[(PanopticMap, PanopticMap)],
    table: &ClassTable,
    cfg: &FovSweepConfig,
) -> Result<Vec<FovSweepRow>> {
    cfg.validate()?;
    let mut fovs = cfg.fovs.clone();
    fovs.sort_by(|a, b| a.partial_cmp(b).expect("finite fovs"));
    let mut rows = Vec::with_capacity(fovs.len());
    for fov in fovs {
        let mut acc = PqAccumulator::new();
        for (pred, gt) in pairs {
            let pred_crop = crop_fov_map(pred, fov, cfg.center_col)?;
            let gt_crop = crop_fov_map(gt, fov, cfg.center_col)?;
            acc.add(&crate::panoptic::match_segments(&pred_crop, &gt_crop)?);
        }
        let report: PqReport = acc.report(table)?;
        rows.push(FovSweepRow {
            fov_deg: fov,
            pq: report.pq_all,
            pq_stuff: report.pq_stuff,
            pq_things: report.pq_things,
        });
    }
    Ok(rows)
}

/// Render sweep rows as CSV (`fov_deg,pq,pq_stuff,pq_things`).
pub fn sweep_csv(rows: &[FovSweepRow]) -> String {
    let mut out = String::from("fov_deg,pq,pq_stuff,pq_things\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.fov_deg,
            fmt(r.pq),
            fmt(r.pq_stuff),
            fmt(r.pq_things)
        )
        .expect("string write");
    }
    out
}

/// Parameters of the procedural street-scene generator. Labels use the four
/// street-scene classes plus void; everything is deterministic in `seed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive count ranges for thing blobs.
    pub cars: (usize, usize),
    pub persons: (usize, usize),
    /// Sidewalk islands (bow-shaped bands above the street).
    pub sidewalk_islands: (usize, usize),
    /// Car half-extent range, pixels (height half-axis; width is ~2x).
    pub car_size: (usize, usize),
    pub person_size: (usize, usize),
    /// Per-channel uniform texture noise amplitude, 0..=255 scale.
    pub texture_noise: u8,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 100,
            width: 512,
            cars: (2, 5),
            persons: (2, 6),
            sidewalk_islands: (2, 4),
            car_size: (4, 9),
            person_size: (3, 6),
            texture_noise: 28,
        }
    }
}

const STREET: u16 = 1;
const SIDEWALK: u16 = 2;
const CAR: u16 = 3;
const PERSON: u16 = 4;

fn base_color(class: u16) -> [u8; 3] {
    match class {
        STREET => [96, 96, 104],
        SIDEWALK => [188, 148, 110],
        CAR => [48, 92, 180],
        PERSON => [200, 72, 40],
        _ => [150, 200, 230], // void: sky-ish backdrop
    }
}

/// Class whose base color is nearest to `rgb` (void included). Used to check
/// that the rendered texture stays faithful to the labels.
pub fn dominant_texture_class(rgb: [u8; 3]) -> u16 {
    let mut best = (u32::MAX, VOID);
    for class in [STREET, SIDEWALK, CAR, PERSON, VOID] {
        let c = base_color(class);
        let d: u32 = (0..3)
            .map(|i| {
                let diff = rgb[i] as i32 - c[i] as i32;
                (diff * diff) as u32
            })
            .sum();
        if d < best.0 {
            best = (d, class);
        }
    }
    best.1
}

fn sample_range(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Generate one synthetic panorama: a full-width street band with a wavy
/// horizon, bow-shaped sidewalk islands, and elliptical car/person blobs with
/// unique instance ids. RGB is the per-class base color plus uniform noise.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<Panorama> {
    if spec.height < 8 || spec.width < 16 {
        return Err(Error::invalid("scene", "raster smaller than 8x16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let mut labels = PanopticMap::filled(h, w, VOID);

    // Street band: lower part of the frame below a wavy, wrap-periodic horizon.
    let horizon_base = h as f64 * rng.random_range(0.45..0.60);
    let wave_amp = h as f64 * rng.random_range(0.02..0.08);
    let wave_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let horizon = |col: usize| -> usize {
        let angle = col as f64 / w as f64 * std::f64::consts::TAU;
        let r = horizon_base + wave_amp * (angle + wave_phase).sin();
        (r.round() as isize).clamp(0, h as isize - 2) as usize
    };
    for col in 0..w {
        for row in horizon(col)..h {
            labels.set_id(row, col, encode_id(STREET, 0)?);
        }
    }

    // Sidewalk islands: bow-shaped bands whose centerline follows a parabola,
    // sitting in the central rows where panoramic distortion puts them.
    let island_count = sample_range(&mut rng, spec.sidewalk_islands);
    for _ in 0..island_count {
        let c0 = rng.random_range(0..w) as f64;
        let half_span = rng.random_range(w as f64 * 0.05..w as f64 * 0.14);
        let r0 = horizon_base + rng.random_range(-0.05..0.18) * h as f64;
        let bow = rng.random_range(-0.12..0.12) * h as f64;
        let half_thick = rng.random_range(h as f64 * 0.02..h as f64 * 0.06).max(1.0);
        let span = half_span as isize;
        for dc in -span..=span {
            let t = dc as f64 / half_span;
            let center_row = r0 + bow * t * t;
            let col = (c0 as isize + dc).rem_euclid(w as isize) as usize;
            let lo = (center_row - half_thick).floor().max(0.0) as usize;
            let hi = ((center_row + half_thick).ceil() as usize).min(h - 1);
            for row in lo..=hi {
                labels.set_id(row, col, encode_id(SIDEWALK, 0)?);
            }
        }
    }

    // Thing blobs: ellipses with unique per-class instance ids, drawn over
    // the stuff layers. Cars are wide, persons upright.
    let draw_ellipse = |labels: &mut PanopticMap,
                            rng: &mut ChaCha8Rng,
                            class: u16,
                            instance: u16,
                            size: (usize, usize),
                            wide: bool|
     -> Result<()> {
        let a = sample_range(rng, size) as f64; // vertical half-axis
        let b = if wide { a * 2.0 } else { a * 0.6 }; // horizontal half-axis
        let row0 = rng.random_range(horizon_base as usize..h.max(horizon_base as usize + 1))
            .min(h - 1) as f64;
        let col0 = rng.random_range(0..w) as f64;
        let id = encode_id(class, instance)?;
        let rl = (row0 - a).floor().max(0.0) as usize;
        let rh = ((row0 + a).ceil() as usize).min(h - 1);
        for row in rl..=rh {
            let dr = (row as f64 - row0) / a;
            let reach = (1.0 - dr * dr).max(0.0).sqrt() * b;
            let cl = (col0 - reach).floor() as isize;
            let ch = (col0 + reach).ceil() as isize;
            for col in cl..=ch {
                let cc = col.rem_euclid(w as isize) as usize;
                let dc = (col as f64 - col0) / b;
                if dr * dr + dc * dc <= 1.0 {
                    labels.set_id(row, cc, id);
                }
            }
        }
        Ok(())
    };

    let car_count = sample_range(&mut rng, spec.cars);
    for k in 0..car_count {
        draw_ellipse(&mut labels, &mut rng, CAR, (k + 1) as u16, spec.car_size, true)?;
    }
    let person_count = sample_range(&mut rng, spec.persons);
    for k in 0..person_count {
        draw_ellipse(
            &mut labels,
            &mut rng,
            PERSON,
            (k + 1) as u16,
            spec.person_size,
            false,
        )?;
    }

    // Texture: base color per label class plus uniform noise, clamped.
    let noise = spec.texture_noise as i32;
    let mut pixels = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            let class = match labels.id(row, col) {
                VOID => VOID,
                id => class_of(id),
            };
            let base = base_color(class);
            for ch in 0..3 {
                let n = if noise > 0 {
                    rng.random_range(-noise..=noise)
                } else {
                    0
                };
                pixels.push((base[ch] as i32 + n).clamp(0, 255) as u8);
            }
        }
    }

    Panorama::new(RgbImage::new(h, w, pixels)?, labels)
}
