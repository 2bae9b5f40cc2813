//! Browser bindings for the interactive demo page: a synthetic panorama
//! explorer with field-of-view cropping, a PQ-vs-FoV curve under outer-column
//! corruption, and a live pretraining loop with a feature-separation readout.
//!
//! Rendering stays in JavaScript; everything here returns plain buffers.

use wasm_bindgen::prelude::*;

use panocon_core::analysis::{class_similarity_gap, labeled_cells, majority_cell_classes};
use panocon_core::encoder::optim::OptimizerConfig;
use panocon_core::encoder::train::{TrainConfig, Trainer};
use panocon_core::encoder::Mode;
use panocon_core::grid::Provenance;
use panocon_core::io::RgbImage;
use panocon_core::panoptic::{class_of, instance_of, ClassTable, PanopticMap, VOID};
use panocon_core::panorama::{
    crop_fov, fov_crop_width, fov_sweep, generate_synthetic, FovSweepConfig, Panorama,
    SyntheticSceneSpec,
};
use panocon_core::viewgeom::{
    extract_view_geometry, extract_view_labels, AugmentationParams, FloatImage, ViewSpec,
};

const FOV_GRID: [f64; 7] = [140.0, 170.0, 205.0, 237.0, 271.0, 304.0, 338.0];

fn rgb_to_rgba(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height * img.width * 4);
    for px in img.pixels.chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

fn label_color(id: u16) -> [u8; 3] {
    match (id, class_of(id)) {
        (VOID, _) => [24, 24, 32],
        (_, 1) => [130, 130, 140],
        (_, 2) => [235, 160, 80],
        (_, 3) => [70, 130, 240],
        (_, 4) => [230, 60, 50],
        _ => [255, 0, 255],
    }
}

fn labels_to_rgba(map: &PanopticMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.ids.len() * 4);
    for &id in &map.ids {
        let mut c = label_color(id);
        // vary thing instances a little so neighbors are distinguishable
        if id != VOID && instance_of(id) > 0 {
            let wiggle = (instance_of(id) * 53 % 60) as i16 - 30;
            for ch in &mut c {
                *ch = (*ch as i16 + wiggle).clamp(0, 255) as u8;
            }
        }
        out.extend_from_slice(&c);
        out.push(255);
    }
    out
}

/// Relabel columns whose circular distance from `center` exceeds
/// `(1 - fraction)` of the half-width: street and sidewalk swap, cars and
/// persons swap. Models a predictor that fails toward the panorama edges.
fn corrupt_outer(map: &PanopticMap, center: usize, fraction: f64) -> PanopticMap {
    let w = map.width;
    let mut out = map.clone();
    let limit = (1.0 - fraction) * (w as f64 / 2.0);
    for r in 0..map.height {
        for c in 0..w {
            let d = (c as i64 - center as i64).unsigned_abs() as usize;
            let circ = d.min(w - d) as f64;
            if circ < limit {
                continue;
            }
            let id = map.id(r, c);
            let new = match (id, class_of(id)) {
                (VOID, _) => 1000,
                (_, 1) => 2000,
                (_, 2) => 1000,
                (_, 3) => 4000 + instance_of(id),
                (_, 4) => 3000 + instance_of(id),
                _ => id,
            };
            out.set_id(r, c, new);
        }
    }
    out
}

/// A synthetic street-scene panorama with its label raster.
#[wasm_bindgen]
pub struct Scene {
    panorama: Panorama,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u32,
        height: usize,
        width: usize,
        cars: usize,
        persons: usize,
        noise: u8,
    ) -> Result<Scene, JsError> {
        let spec = SyntheticSceneSpec {
            seed: seed as u64,
            height,
            width,
            cars: (cars, cars),
            persons: (persons, persons),
            texture_noise: noise,
            ..Default::default()
        };
        let panorama = generate_synthetic(&spec).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Scene { panorama })
    }

    pub fn width(&self) -> usize {
        self.panorama.width()
    }

    pub fn height(&self) -> usize {
        self.panorama.height()
    }

    /// Full panorama as RGBA bytes for `putImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        rgb_to_rgba(&self.panorama.rgb)
    }

    /// Color-coded label raster as RGBA bytes.
    pub fn labels_rgba(&self) -> Vec<u8> {
        labels_to_rgba(&self.panorama.labels)
    }

    pub fn crop_width(&self, fov_degrees: f64) -> usize {
        fov_crop_width(self.panorama.width(), fov_degrees)
    }

    /// Centered FoV crop of the RGB raster, RGBA bytes.
    pub fn crop_rgba(&self, fov_degrees: f64, center_col: usize) -> Result<Vec<u8>, JsError> {
        let crop = crop_fov(&self.panorama, fov_degrees, center_col)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(rgb_to_rgba(&crop.rgb))
    }

    /// Centered FoV crop of the labels, RGBA bytes.
    pub fn crop_labels_rgba(&self, fov_degrees: f64, center_col: usize) -> Result<Vec<u8>, JsError> {
        let crop = crop_fov(&self.panorama, fov_degrees, center_col)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(labels_to_rgba(&crop.labels))
    }

    /// The FoV grid used by the PQ curve, in degrees.
    pub fn fov_grid(&self) -> Vec<f64> {
        FOV_GRID.to_vec()
    }

    /// Corrupted-prediction labels for display, RGBA bytes.
    pub fn corrupted_rgba(&self, corruption: f64) -> Vec<u8> {
        let center = self.panorama.width() / 2;
        labels_to_rgba(&corrupt_outer(&self.panorama.labels, center, corruption))
    }

    /// PQ over the FoV grid when the outer `corruption` fraction of columns
    /// is mislabeled. One value per grid entry, NaN where undefined.
    pub fn pq_curve(&self, corruption: f64) -> Result<Vec<f64>, JsError> {
        let center = self.panorama.width() / 2;
        let pred = corrupt_outer(&self.panorama.labels, center, corruption.clamp(0.0, 1.0));
        let pairs = vec![(pred, self.panorama.labels.clone())];
        let cfg = FovSweepConfig {
            fovs: FOV_GRID.to_vec(),
            center_col: center,
        };
        let rows = fov_sweep(&pairs, &ClassTable::street_scene(), &cfg)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(rows
            .iter()
            .map(|r| r.pq.unwrap_or(f64::NAN))
            .collect())
    }
}

/// Interactive pretraining on a small in-memory synthetic dataset.
#[wasm_bindgen]
pub struct LiveTrainer {
    trainer: Trainer,
    eval_data: Vec<(FloatImage, PanopticMap)>,
}

#[wasm_bindgen]
impl LiveTrainer {
    /// Builds the dataset (8 two-texture panoramas) and the trainer.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, alpha: f64, tau: f64, use_lars: bool) -> Result<LiveTrainer, JsError> {
        let data: Vec<(FloatImage, PanopticMap)> = (0..8)
            .map(|i| {
                let spec = SyntheticSceneSpec {
                    seed: seed as u64 * 1000 + i,
                    height: 64,
                    width: 256,
                    cars: (0, 0),
                    persons: (0, 0),
                    sidewalk_islands: (3, 5),
                    texture_noise: 40,
                    ..Default::default()
                };
                let p = generate_synthetic(&spec)?;
                Ok((FloatImage::from_rgb8(&p.rgb), p.labels))
            })
            .collect::<panocon_core::Result<_>>()
            .map_err(|e| JsError::new(&e.to_string()))?;
        let config = TrainConfig {
            epochs: 100_000,
            batch_size: 2,
            input_height: 32,
            input_width: 64,
            seed: seed as u64,
            alpha,
            tau,
            optimizer: if use_lars {
                OptimizerConfig::lars()
            } else {
                OptimizerConfig::sgd()
            },
            ..Default::default()
        };
        let images = data.iter().map(|(img, _)| img.clone()).collect();
        let trainer = Trainer::new(config, images).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(LiveTrainer {
            trainer,
            eval_data: data,
        })
    }

    pub fn step_count(&self) -> usize {
        self.trainer.state().step
    }

    /// Run `n` optimizer steps and return the combined loss of each.
    pub fn step(&mut self, n: usize) -> Result<Vec<f64>, JsError> {
        let mut losses = Vec::with_capacity(n);
        for _ in 0..n {
            let record = self.trainer.step().map_err(|e| JsError::new(&e.to_string()))?;
            losses.push(record.l_total);
        }
        Ok(losses)
    }

    /// `[intra, inter]` mean cosine similarity of projection features over
    /// street/sidewalk cells of the evaluation crops.
    pub fn separation(&mut self) -> Result<Vec<f64>, JsError> {
        let mut encoder = self.trainer.state().pair.regular.clone();
        let stride = encoder.arch.total_stride();
        let (h, w) = (32usize, 64usize);
        let grid = (h / stride, w / stride);
        let mut cells = Vec::new();
        for (img, labels) in &self.eval_data {
            for (r0, c0) in [(0usize, 0usize), (16, 64), (32, 128), (16, 192)] {
                if r0 + h > img.height || c0 + w > img.width {
                    continue;
                }
                let spec = ViewSpec {
                    origin_row: r0,
                    origin_col: c0,
                    height: h,
                    width: w,
                    flip_horizontal: false,
                    aug: AugmentationParams::identity(),
                };
                let view = extract_view_geometry(img, &spec, h, w);
                let view_labels = extract_view_labels(labels, &spec, h, w);
                let features = encoder
                    .forward(&view, Mode::Eval, Provenance::Regular)
                    .map_err(|e| JsError::new(&e.to_string()))?;
                let classes = majority_cell_classes(&view_labels, grid.0, grid.1);
                cells.extend(labeled_cells(&features, &classes));
            }
        }
        let (intra, inter) =
            class_similarity_gap(&cells).ok_or_else(|| JsError::new("no labeled cells"))?;
        Ok(vec![intra, inter])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_buffers_have_canvas_shape() {
        let scene = Scene::new(1, 40, 128, 2, 2, 25).unwrap();
        assert_eq!(scene.rgba().len(), 40 * 128 * 4);
        assert_eq!(scene.labels_rgba().len(), 40 * 128 * 4);
        let w = scene.crop_width(180.0);
        assert_eq!(w, 64);
        assert_eq!(scene.crop_rgba(180.0, 64).unwrap().len(), 40 * w * 4);
    }

    #[test]
    fn pq_curve_degrades_with_corruption() {
        let scene = Scene::new(3, 48, 256, 3, 3, 25).unwrap();
        let clean = scene.pq_curve(0.0).unwrap();
        assert!(clean.iter().all(|&v| v == 1.0));
        let corrupted = scene.pq_curve(0.25).unwrap();
        assert!(corrupted[0] >= corrupted[6], "{corrupted:?}");
        assert!(corrupted[6] < 1.0);
    }

    #[test]
    fn live_trainer_steps_and_reports_separation() {
        let mut trainer = LiveTrainer::new(7, 1.0, 0.3, true).unwrap();
        let losses = trainer.step(3).unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(trainer.step_count(), 3);
        let separation = trainer.separation().unwrap();
        assert_eq!(separation.len(), 2);
        assert!(separation.iter().all(|v| v.is_finite()));
    }
}
