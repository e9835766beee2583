//! Training: data pipeline, Adam, the triangular learning-rate schedule and
//! the epoch loop with best-validation checkpointing.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_png, RgbImage};
use crate::metrics::{downscale_image, psnr};
use crate::model::{save_checkpoint, ModelConfig, ModelParams, Network};
use crate::ops::{charbonnier_loss, charbonnier_loss_grad};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Shape, Tensor, TensorError};

pub const INTENSITY_FACTORS: [f32; 3] = [1.0, 0.7, 0.5];
pub const NUM_AUGMENTATIONS: u8 = 8;
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatches_per_epoch: usize,
    pub batch_size: usize,
    /// Side of the low-resolution training crop.
    pub patch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_peak_epoch: usize,
    pub lr_final: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub charbonnier_epsilon: f64,
    pub rng_seed: u64,
    pub desk_scale: bool,
    /// Images taken from the front of the sorted list; 0 means all that are
    /// not used for validation.
    pub train_images: usize,
    /// Images taken from the end of the sorted list.
    pub val_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            minibatches_per_epoch: 100,
            batch_size: 16,
            patch_size: 32,
            lr_start: 5e-5,
            lr_peak: 2.5e-3,
            lr_peak_epoch: 50,
            lr_final: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            charbonnier_epsilon: 0.1,
            rng_seed: 0,
            desk_scale: false,
            train_images: 0,
            val_images: 8,
        }
    }
}

impl TrainConfig {
    /// 32 training images, 4 validation images, 200 epochs.
    pub fn desk_scale() -> Self {
        TrainConfig { epochs: 200, desk_scale: true, train_images: 32, val_images: 4, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.epochs == 0 || self.minibatches_per_epoch == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return bad("epochs, minibatches, batch size and patch size must be positive".into());
        }
        if !(self.lr_start < self.lr_peak && self.lr_final < self.lr_peak) {
            return bad(format!(
                "need lr_start ({}) < lr_peak ({}) and lr_final ({}) < lr_peak",
                self.lr_start, self.lr_peak, self.lr_final
            ));
        }
        if self.lr_start <= 0.0 || self.lr_final <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.lr_peak_epoch >= self.epochs {
            return bad(format!("lr_peak_epoch ({}) must be below epochs ({})", self.lr_peak_epoch, self.epochs));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_epsilon <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        if self.charbonnier_epsilon <= 0.0 {
            return bad("charbonnier epsilon must be positive".into());
        }
        if self.val_images == 0 {
            return bad("at least one validation image is required".into());
        }
        Ok(())
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (1.0 - t) * a + t * b
}

/// Piecewise-linear schedule: `lr_start` at epoch 0, rising to `lr_peak` at
/// `lr_peak_epoch`, then falling to `lr_final` at the last epoch.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidTrainConfig(format!("epoch {epoch} outside [0, {})", cfg.epochs)));
    }
    if epoch <= cfg.lr_peak_epoch {
        if cfg.lr_peak_epoch == 0 {
            return Ok(cfg.lr_peak);
        }
        return Ok(lerp(cfg.lr_start, cfg.lr_peak, epoch as f64 / cfg.lr_peak_epoch as f64));
    }
    let span = (cfg.epochs - 1 - cfg.lr_peak_epoch) as f64;
    Ok(lerp(cfg.lr_peak, cfg.lr_final, (epoch - cfg.lr_peak_epoch) as f64 / span))
}

/// Element of the dihedral group: ids 0–3 rotate by `id · 90°`
/// counter-clockwise; ids 4–7 mirror left-right first, then rotate by
/// `(id − 4) · 90°`.
pub fn augment<T: Real>(t: &Tensor<T>, id: u8) -> Result<Tensor<T>> {
    if id >= NUM_AUGMENTATIONS {
        return Err(TensorError::InvalidArgument { op: "augment", detail: format!("augmentation id {id} > 7") }.into());
    }
    let mut out = if id >= 4 { flip(t) } else { t.clone() };
    for _ in 0..id % 4 {
        out = rotate90(&out);
    }
    Ok(out)
}

/// The id undoing [`augment`] with `id`.
pub fn inverse_augmentation(id: u8) -> u8 {
    match id {
        0..=3 => (4 - id) % 4,
        // mirrors are involutions
        _ => id,
    }
}

fn flip<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(s, |n, y, x, c| t.at(n, y, s.w - 1 - x, c))
}

fn rotate90<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.w, s.h, s.c), |n, y, x, c| t.at(n, x, s.w - 1 - y, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lr_patch: Tensor,
    pub hr_patch: Tensor,
    pub augmentation_id: u8,
    pub intensity_factor: f32,
}

/// Aligned random crop (`patch` LR pixels, `scale · patch` HR pixels), a
/// random dihedral transform and a random intensity factor, all shared by
/// both patches.
pub fn sample_patch(hr: &Tensor, lr: &Tensor, scale: usize, patch: usize, rng: &mut impl Rng) -> Result<PatchPair> {
    let (hs, ls) = (hr.shape(), lr.shape());
    if ls.h < patch || ls.w < patch {
        return Err(Error::Dataset(format!("LR image {ls} is smaller than the {patch}x{patch} crop")));
    }
    if hs.h != ls.h * scale || hs.w != ls.w * scale || hs.n != ls.n || hs.c != ls.c {
        return Err(Error::Dataset(format!("HR image {hs} is not ×{scale} of LR image {ls}")));
    }
    let y0 = rng.random_range(0..=ls.h - patch);
    let x0 = rng.random_range(0..=ls.w - patch);
    let augmentation_id = rng.random_range(0..NUM_AUGMENTATIONS);
    let intensity_factor = INTENSITY_FACTORS[rng.random_range(0..INTENSITY_FACTORS.len())];
    let prepare = |t: Tensor| -> Result<Tensor> {
        let t = augment(&t, augmentation_id)?;
        Ok(if intensity_factor == 1.0 { t } else { t.map(|v| v * intensity_factor) })
    };
    Ok(PatchPair {
        lr_patch: prepare(lr.crop(y0, x0, patch, patch)?)?,
        hr_patch: prepare(hr.crop(y0 * scale, x0 * scale, patch * scale, patch * scale)?)?,
        augmentation_id,
        intensity_factor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        AdamConfig { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, epsilon: cfg.adam_epsilon }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::from_train(&TrainConfig::default())
    }
}

/// One bias-corrected Adam update of a flat array; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f32],
    grads: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Optimizer(format!(
            "length mismatch: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Optimizer("step counter starts at 1".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimizer("non-finite gradient".into()));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
        params[i] = (params[i] as f64 - step) as f32;
    }
    Ok(())
}

/// Moment estimates for every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Adam { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if params.layers.len() != grads.layers.len() || params.layers.len() != self.m.layers.len() {
            return Err(Error::Optimizer("parameter, gradient and moment layer counts differ".into()));
        }
        self.step += 1;
        let t = self.step;
        let arrays = params.arrays_mut().zip(grads.arrays()).zip(self.m.arrays_mut().zip(self.v.arrays_mut()));
        for ((p, g), (m, v)) in arrays {
            adam_update(p, g, m, v, t, lr, &self.config)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub hr: RgbImage,
    pub lr: RgbImage,
}

/// Reads `<root>/hr/*.png` in file-name order, pairing each with
/// `<root>/lr/<same name>` when an `lr/` directory exists and with its bicubic
/// downscale otherwise. HR images are cropped to a multiple of `scale`.
pub fn load_pairs(root: &Path, scale: usize) -> Result<Vec<ImagePair>> {
    let hr_dir = root.join("hr");
    if !hr_dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", hr_dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&hr_dir)
        .map_err(|e| Error::io(&hr_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", hr_dir.display())));
    }
    let lr_dir = root.join("lr");
    let have_lr = lr_dir.is_dir();
    files
        .iter()
        .map(|path| {
            let name = path.file_name().expect("listed files have names").to_string_lossy().into_owned();
            let hr = read_png(path)?.mod_crop(scale)?;
            let lr = if have_lr {
                let lr = read_png(&lr_dir.join(&name))?;
                if lr.height * scale != hr.height || lr.width * scale != hr.width {
                    return Err(Error::Dataset(format!(
                        "{name}: LR {}x{} is not 1/{scale} of HR {}x{}",
                        lr.height, lr.width, hr.height, hr.width
                    )));
                }
                lr
            } else {
                downscale_image(&hr, scale)?
            };
            Ok(ImagePair { name, hr, lr })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

impl Dataset {
    /// Validation takes the last `val_images`, training the first
    /// `train_images` of the rest (all of it when 0).
    pub fn split(mut pairs: Vec<ImagePair>, train_images: usize, val_images: usize) -> Result<Dataset> {
        let needed = train_images.max(1) + val_images;
        if pairs.len() < needed {
            return Err(Error::Dataset(format!("{} images found, {needed} needed", pairs.len())));
        }
        let val = pairs.split_off(pairs.len() - val_images);
        if train_images > 0 {
            pairs.truncate(train_images);
        }
        Ok(Dataset { train: pairs, val })
    }

    pub fn load(root: &Path, scale: usize, cfg: &TrainConfig) -> Result<Dataset> {
        Dataset::split(load_pairs(root, scale)?, cfg.train_images, cfg.val_images)
    }
}

/// Mean RGB PSNR (no shave) of the float model's 8-bit output.
pub fn validation_psnr(network: &Network, params: &ModelParams, val: &[ImagePair]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    let mut total = 0.0;
    for pair in val {
        total += psnr(&network.upscale(params, &pair.lr)?.to_f64(), &pair.hr.to_f64(), 0)?;
    }
    Ok(total / val.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: f64,
    pub best: bool,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tlr\tloss\tval_psnr\tbest";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{:e}\t{:.6}\t{:.4}\t{}", self.epoch, self.lr, self.loss, self.val_psnr, u8::from(self.best))
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub adam: Adam,
    pub best_psnr: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub best_params: Option<ModelParams>,
    pub history: Vec<EpochRecord>,
}

/// One minibatch of stacked patches for global step `step`.
pub fn sample_batch(
    train: &[(Tensor, Tensor)],
    scale: usize,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Tensor, Tensor)> {
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut rng = stream_rng(cfg.rng_seed, Stream::Data, step);
    let mut lr = Vec::with_capacity(cfg.batch_size);
    let mut hr = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (h, l) = &train[rng.random_range(0..train.len())];
        let p = sample_patch(h, l, scale, cfg.patch_size, &mut rng)?;
        lr.push(p.lr_patch);
        hr.push(p.hr_patch);
    }
    Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
}

/// Minimizes the Charbonnier loss of `params` on `data`. After every epoch the
/// validation PSNR is measured; each improvement is saved to
/// `out_dir/best.ckpt`. A tab-separated log goes to `out_dir/train_log.tsv`.
pub fn train(
    config: &ModelConfig,
    mut params: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainState)> {
    cfg.validate()?;
    params.check_matches(config)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let network = Network::new(*config)?;
    let train: Vec<(Tensor, Tensor)> = data.train.iter().map(|p| (p.hr.to_unit(), p.lr.to_unit())).collect();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", EpochRecord::TSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    let best_path = out_dir.join(BEST_CHECKPOINT);

    let mut state = TrainState {
        epoch: 0,
        adam: Adam::new(&params, AdamConfig::from_train(cfg)),
        best_psnr: f64::NEG_INFINITY,
        best_checkpoint: None,
        best_params: None,
        history: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg)?;
        let mut loss_sum = 0.0;
        for b in 0..cfg.minibatches_per_epoch {
            let step = (epoch * cfg.minibatches_per_epoch + b) as u64;
            let (x, y) = sample_batch(&train, config.scale, cfg, step)?;
            let trace = network.forward_trace(&params, &x)?;
            let loss = charbonnier_loss(trace.output(), &y, cfg.charbonnier_epsilon)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: b, loss });
            }
            let grad = charbonnier_loss_grad(trace.output(), &y, cfg.charbonnier_epsilon)?;
            let grads = network.backward(&params, &trace, grad, false)?;
            drop(trace);
            state.adam.step(&mut params, &grads.params, lr)?;
            loss_sum += loss;
        }
        let val_psnr = validation_psnr(&network, &params, &data.val)?;
        let best = val_psnr > state.best_psnr;
        if best {
            state.best_psnr = val_psnr;
            save_checkpoint(&params, config, &best_path)?;
            state.best_checkpoint = Some(best_path.clone());
            state.best_params = Some(params.clone());
        }
        let record = EpochRecord { epoch, lr, loss: loss_sum / cfg.minibatches_per_epoch as f64, val_psnr, best };
        writeln!(log, "{}", record.to_tsv()).map_err(|e| Error::io(&log_path, e))?;
        on_epoch(&record);
        state.history.push(record);
        state.epoch = epoch + 1;
    }
    Ok((params, state))
}
