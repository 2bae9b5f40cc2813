//! The pretraining loop: sample a view pair, forward the regular and the
//! momentum encoder, evaluate the combined loss, step the optimizer on the
//! regular encoder and the smoothing transform, then update the momentum
//! encoder. Single-threaded and deterministic under the seed.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{read_container, write_container, Container};
use super::layers::{Param, ParamKind};
use super::optim::{Optimizer, OptimizerConfig};
use super::{EncoderArch, EncoderPair, Mode};
use crate::analysis::majority_cell_classes;
use crate::contrastive::{combined_loss, LossConfig, SmoothingTransform};
use crate::grid::FeatureGrid;
use crate::panoptic::PanopticMap;
use crate::viewgeom::{
    build_correspondence, extract_view_geometry, extract_view_labels, sample_view_pair,
    AugmentationParams, FloatImage, ViewSpec, ViewSampleConfig,
};
use crate::{Error, Result};

/// Pretraining configuration. The flagless defaults mirror the reference
/// recipe at reduced scale: 90 epochs, half-resolution inputs scaled down to
/// 64x128, weight decay 1e-5, temperature 0.3, alpha 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier for the large-batch variant (2 doubles the batch).
    pub batch_scale: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub seed: u64,
    pub alpha: f64,
    pub tau: f64,
    pub threshold_ratio: f64,
    pub beta: f64,
    /// Hard cap on optimizer steps, for short runs.
    pub max_steps: Option<usize>,
    /// Supervised warm-start epochs on label rasters before the contrastive
    /// phase. Off by default; requires labels alongside the images.
    pub warm_start_epochs: usize,
    /// Learning rate of the warm-start classifier phase.
    pub warm_start_lr: f64,
    /// Retries per batch slot when a sampled pair has no positive cells.
    pub resample_limit: usize,
    pub arch: EncoderArch,
    pub optimizer: OptimizerConfig,
    pub view: ViewSampleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 10,
            batch_scale: 1,
            input_height: 64,
            input_width: 128,
            seed: 0,
            alpha: 1.0,
            tau: 0.3,
            threshold_ratio: 0.7,
            beta: 0.99,
            max_steps: None,
            warm_start_epochs: 0,
            warm_start_lr: 0.01,
            resample_limit: 20,
            arch: EncoderArch::default(),
            optimizer: OptimizerConfig::sgd(),
            view: ViewSampleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("batch_scale", self.batch_scale),
            ("input_height", self.input_height),
            ("input_width", self.input_width),
        ] {
            if v == 0 {
                return Err(Error::invalid("train config", format!("{name} must be > 0")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("train config", "tau must be > 0"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("train config", "alpha must be >= 0"));
        }
        if !(self.threshold_ratio > 0.0) {
            return Err(Error::invalid("train config", "threshold_ratio must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("train config", "beta must be in [0, 1]"));
        }
        let stride = self.arch.total_stride();
        if self.input_height % stride != 0 || self.input_width % stride != 0 {
            return Err(Error::invalid(
                "train config",
                format!("input resolution must be divisible by the stride {stride}"),
            ));
        }
        self.optimizer.validate()
    }

    /// Effective batch size including the large-batch multiplier.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.batch_scale
    }

    /// View sampler with the output resolution tied to the input resolution.
    fn view_config(&self) -> ViewSampleConfig {
        let mut view = self.view.clone();
        view.out_height = self.input_height;
        view.out_width = self.input_width;
        view.feature_stride = self.arch.total_stride();
        view
    }
}

/// One trace row per optimizer step; losses are batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_spatial: f64,
    pub l_glopro: f64,
    pub l_total: f64,
}

/// Render trace rows as CSV (`step,epoch,lr,l_spatial,l_glopro,l_total`).
pub fn trace_csv(records: &[StepRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("step,epoch,lr,l_spatial,l_glopro,l_total\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, r.l_spatial, r.l_glopro, r.l_total
        )
        .expect("string write");
    }
    out
}

/// Everything that persists across steps and into checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub pair: EncoderPair,
    pub smoothing: Param,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pair = EncoderPair::new(&config.arch, config.seed, config.beta)?;
        let dim = config.arch.head_out;
        let smoothing = Param::new(
            "smoothing.matrix",
            ParamKind::Weight,
            vec![dim, dim],
            SmoothingTransform::identity(dim).matrix,
        );
        let optimizer = Optimizer::new(config.optimizer);
        Ok(Self {
            pair,
            smoothing,
            optimizer,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn smoothing_transform(&self) -> SmoothingTransform {
        SmoothingTransform {
            dim: self.config.arch.head_out,
            matrix: self.smoothing.data.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
        self.pair.regular.for_each_param(&mut |p| {
            tensors.push((format!("regular.{}", p.name), p.data.clone()));
        });
        for (name, values) in self.pair.regular.running_stats() {
            tensors.push((format!("regular.{name}"), values));
        }
        self.pair.momentum.for_each_param(&mut |p| {
            tensors.push((format!("momentum.{}", p.name), p.data.clone()));
        });
        for (name, values) in self.pair.momentum.running_stats() {
            tensors.push((format!("momentum.{name}"), values));
        }
        tensors.push(("smoothing.matrix".into(), self.smoothing.data.clone()));
        for (i, v) in self.optimizer.velocities().iter().enumerate() {
            tensors.push((format!("optim.v{i}"), v.clone()));
        }
        let meta = json!({
            "config": serde_json::to_value(&self.config)?,
            "epoch": self.epoch,
            "step": self.step,
        });
        write_container(path, &Container { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = read_container(path)?;
        let config: TrainConfig = serde_json::from_value(
            container
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::invalid("checkpoint", "missing config"))?,
        )?;
        let mut state = TrainState::new(config)?;
        state.epoch = container.meta["epoch"].as_u64().unwrap_or(0) as usize;
        state.step = container.meta["step"].as_u64().unwrap_or(0) as usize;

        let mut velocities: Vec<Vec<f64>> = Vec::new();
        for (name, values) in container.tensors {
            if let Some(rest) = name.strip_prefix("regular.") {
                apply_tensor(&mut state.pair.regular, rest, &values)?;
            } else if let Some(rest) = name.strip_prefix("momentum.") {
                apply_tensor(&mut state.pair.momentum, rest, &values)?;
            } else if name == "smoothing.matrix" {
                if values.len() != state.smoothing.data.len() {
                    return Err(Error::invalid("checkpoint", "smoothing size mismatch"));
                }
                state.smoothing.data = values;
            } else if name.starts_with("optim.v") {
                velocities.push(values);
            } else {
                return Err(Error::invalid("checkpoint", format!("unknown tensor {name}")));
            }
        }
        if !velocities.is_empty() {
            state.optimizer.restore_velocities(velocities);
        }
        Ok(state)
    }
}

fn apply_tensor(encoder: &mut super::Encoder, name: &str, values: &[f64]) -> Result<()> {
    if name.ends_with("running_mean") || name.ends_with("running_var") {
        return encoder.set_running_stats(name, values);
    }
    let mut found = false;
    let mut err = None;
    encoder.for_each_param_mut(&mut |p| {
        if p.name == name {
            found = true;
            if p.data.len() == values.len() {
                p.data.copy_from_slice(values);
            } else {
                err = Some(Error::invalid(
                    "checkpoint",
                    format!("size mismatch for {name}"),
                ));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !found {
        return Err(Error::invalid("checkpoint", format!("unknown tensor {name}")));
    }
    Ok(())
}

/// Result of a pretraining run.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub trace: Vec<StepRecord>,
    /// Pairs that were re-sampled because no cell had a positive partner.
    pub resampled_pairs: usize,
}

/// Run the pretraining loop over an in-memory image set.
pub fn pretrain(config: &TrainConfig, images: &[FloatImage]) -> Result<PretrainOutcome> {
    pretrain_labeled(config, images, None)
}

/// [`pretrain`] with label rasters available for the optional supervised
/// warm start.
pub fn pretrain_labeled(
    config: &TrainConfig,
    images: &[FloatImage],
    labels: Option<&[PanopticMap]>,
) -> Result<PretrainOutcome> {
    let mut trainer =
        Trainer::with_labels(config.clone(), images.to_vec(), labels.map(<[_]>::to_vec))?;
    let mut trace = Vec::with_capacity(trainer.total_steps());
    while !trainer.finished() {
        trace.push(trainer.step()?);
    }
    Ok(PretrainOutcome {
        resampled_pairs: trainer.resampled_pairs,
        state: trainer.into_state(),
        trace,
    })
}

/// Incremental pretraining: owns the state, the dataset and the random
/// stream, and advances one optimizer step at a time. [`pretrain`] is a thin
/// loop over this.
pub struct Trainer {
    state: TrainState,
    images: Vec<FloatImage>,
    rng: ChaCha8Rng,
    steps_per_epoch: usize,
    total_steps: usize,
    pub resampled_pairs: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, images: Vec<FloatImage>) -> Result<Self> {
        Self::with_labels(config, images, None)
    }

    /// Like [`Trainer::new`], with label rasters enabling the optional
    /// supervised warm start.
    pub fn with_labels(
        config: TrainConfig,
        images: Vec<FloatImage>,
        labels: Option<Vec<PanopticMap>>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("dataset", "no images"));
        }
        let state = TrainState::new(config.clone())?;
        let batch = config.effective_batch();
        let steps_per_epoch = images.len().div_ceil(batch).max(1);
        let mut total_steps = config.epochs.saturating_mul(steps_per_epoch);
        if let Some(cap) = config.max_steps {
            total_steps = total_steps.min(cap);
        }
        let mut trainer = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            state,
            images,
            steps_per_epoch,
            total_steps,
            resampled_pairs: 0,
        };
        if config.warm_start_epochs > 0 {
            let labels = labels.ok_or_else(|| {
                Error::invalid("warm start", "label rasters required but not provided")
            })?;
            if labels.len() != trainer.images.len() {
                return Err(Error::invalid(
                    "warm start",
                    format!("{} labels for {} images", labels.len(), trainer.images.len()),
                ));
            }
            trainer.warm_start(&labels)?;
        }
        Ok(trainer)
    }

    /// Preliminary supervised phase: a throwaway linear softmax classifier on
    /// the projection features, trained per cell against the majority label
    /// class (void, street, sidewalk, car, person), plain SGD. Afterwards the
    /// momentum encoder is re-synchronized to the warmed regular weights and
    /// the classifier is dropped.
    fn warm_start(&mut self, labels: &[PanopticMap]) -> Result<()> {
        const CLASSES: usize = 5;
        let config = self.state.config.clone();
        let dim = config.arch.head_out;
        let stride = config.arch.total_stride();
        let grid = (config.input_height / stride, config.input_width / stride);
        let lr = config.warm_start_lr;

        let mut head_w = Param::new("warm.head.weight", ParamKind::Weight, vec![CLASSES, dim], {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5741524d);
            (0..CLASSES * dim)
                .map(|_| super::layers::sample_normal(&mut rng) * (1.0 / dim as f64).sqrt())
                .collect()
        });
        let mut head_b = Param::new(
            "warm.head.bias",
            ParamKind::Bias,
            vec![CLASSES],
            vec![0.0; CLASSES],
        );

        let class_index = |id: u16| -> usize {
            match id {
                crate::panoptic::VOID => 0,
                class => (class as usize).min(CLASSES - 1),
            }
        };

        for _ in 0..config.warm_start_epochs {
            for (image, label_map) in self.images.iter().zip(labels) {
                let spec = ViewSpec {
                    origin_row: 0,
                    origin_col: 0,
                    height: image.height,
                    width: image.width,
                    flip_horizontal: false,
                    aug: AugmentationParams::identity(),
                };
                let view =
                    extract_view_geometry(image, &spec, config.input_height, config.input_width);
                let view_labels =
                    extract_view_labels(label_map, &spec, config.input_height, config.input_width);
                let targets = majority_cell_classes(&view_labels, grid.0, grid.1);

                self.state.pair.regular.zero_grads();
                head_w.zero_grad();
                head_b.zero_grad();
                let features = self.state.pair.forward_regular(&view, Mode::Train)?;
                let cells = features.cells();
                let mut grad_features =
                    FeatureGrid::zeros(features.rows, features.cols, dim, features.provenance);
                for cell in 0..cells {
                    let f = features.cell(cell);
                    let mut logits = [0.0f64; CLASSES];
                    for (k, logit) in logits.iter_mut().enumerate() {
                        *logit = head_b.data[k]
                            + head_w.data[k * dim..(k + 1) * dim]
                                .iter()
                                .zip(f)
                                .map(|(w, x)| w * x)
                                .sum::<f64>();
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                    let target = class_index(targets[cell]);
                    let scale = 1.0 / cells as f64;
                    let grad_cell = grad_features.cell_mut(cell);
                    for k in 0..CLASSES {
                        let p = (logits[k] - max).exp() / sum;
                        let gz = scale * (p - if k == target { 1.0 } else { 0.0 });
                        head_b.grad[k] += gz;
                        for d in 0..dim {
                            head_w.grad[k * dim + d] += gz * f[d];
                            grad_cell[d] += gz * head_w.data[k * dim + d];
                        }
                    }
                }
                self.state.pair.regular.backward(&grad_features)?;
                let apply = |p: &mut Param| {
                    for (v, g) in p.data.iter_mut().zip(&p.grad) {
                        *v -= lr * g;
                    }
                };
                for p in self.state.pair.regular.params_mut() {
                    apply(p);
                }
                apply(&mut head_w);
                apply(&mut head_b);
            }
        }
        // the contrastive phase starts from the warmed weights on both sides
        self.state.pair.momentum = self.state.pair.regular.clone();
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.total_steps
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// One optimizer step: a batch of view pairs, forward both encoders,
    /// combined loss, backward into the regular encoder and the smoothing
    /// transform, optimizer update, momentum update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let state = &mut self.state;
        let config = state.config.clone();
        let view_cfg = config.view_config();
        let loss_cfg = LossConfig {
            tau: config.tau,
            alpha: config.alpha,
        };
        let batch = config.effective_batch();
        let epoch = state.step / self.steps_per_epoch;
        state.epoch = epoch;
        state.pair.regular.zero_grads();
        state.smoothing.zero_grad();
        let smoothing = state.smoothing_transform();

        let mut sums = (0.0, 0.0, 0.0);
        for _ in 0..batch {
            // sample until the views share at least one positive pair
            let mut tries = 0;
            let (view_a, view_b, corr) = loop {
                let image = &self.images[self.rng.random_range(0..self.images.len())];
                let (va, vb) = sample_view_pair(image, &mut self.rng, &view_cfg)?;
                let stride = config.arch.total_stride();
                let grid = (config.input_height / stride, config.input_width / stride);
                let corr = build_correspondence(
                    &va.spec,
                    &vb.spec,
                    grid,
                    grid,
                    config.threshold_ratio,
                )?;
                if corr.has_positives() {
                    break (va, vb, corr);
                }
                tries += 1;
                self.resampled_pairs += 1;
                if tries > config.resample_limit {
                    return Err(Error::invalid(
                        "pretraining",
                        format!("no overlapping views after {tries} attempts"),
                    ));
                }
            };

            let f_a = state.pair.forward_regular(&view_a.pixels, Mode::Train)?;
            let f_b = state.pair.forward_momentum(&view_b.pixels, Mode::Train)?;
            let mut report = combined_loss(&f_a, &f_b, &corr, &smoothing, &loss_cfg)?;
            if !report.l_total.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                });
            }
            sums.0 += report.l_spatial;
            sums.1 += report.l_glopro;
            sums.2 += report.l_total;

            // average over the batch while accumulating
            let inv = 1.0 / batch as f64;
            for v in &mut report.grad_a.values {
                *v *= inv;
            }
            state.pair.regular.backward(&report.grad_a)?;
            for (g, v) in state.smoothing.grad.iter_mut().zip(&report.grad_g) {
                *g += inv * v;
            }
        }

        let lr = state.optimizer.effective_lr(epoch);
        {
            let mut params = state.pair.regular.params_mut();
            params.push(&mut state.smoothing);
            state.optimizer.step(&mut params, epoch)?;
        }
        state.pair.ema_update()?;

        let inv = 1.0 / batch as f64;
        let record = StepRecord {
            step: state.step,
            epoch,
            lr,
            l_spatial: sums.0 * inv,
            l_glopro: sums.1 * inv,
            l_total: sums.2 * inv,
        };
        state.step += 1;
        Ok(record)
    }
}
