//! Mini-batch gradient-descent CNN trainer: exact reverse-mode gradients
//! through the dense head, pooling, activation, and same-padded convolution,
//! with Adam updates and best-validation checkpointing. Also hosts hybrid
//! training, which freezes a trained encoder and refits the head in closed
//! form.
//!
//! Loss is mean squared error over normalized label components: for a batch
//! of B samples with m outputs each, `L = sum_i ||o_i - t_i||^2 / (B*m)`.

use std::io::Write as IoWrite;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::archgen::ArchSpec;
use crate::data::PreparedSplit;
use crate::elm::{CelmFit, Normalizer};
use crate::error::{Error, Result};
use crate::imagery::CameraModel;
use crate::labels::LabelSet;
use crate::neural::{
    forward_cached, HeadParams, LayerCache, ModelParams, Pooling, Tensor3,
};
use crate::preprocess::S2Sample;

/// Epoch budget used for paper-scale training runs.
pub const PAPER_EPOCHS: usize = 300;
/// Reduced epoch budget for desk-scale runs and CI.
pub const DESK_EPOCHS: usize = 30;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mini-batch training configuration. The loss is fixed (MSE on normalized
/// labels); batch size, learning rate, epoch budget, and seed vary across
/// the bootstrap grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(batch_size: usize, lr: f64, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            lr,
            epochs,
            seed,
        }
    }

    /// Paper-scale budget (300 epochs).
    pub fn paper(batch_size: usize, lr: f64, seed: u64) -> Self {
        Self::new(batch_size, lr, PAPER_EPOCHS, seed)
    }

    /// Desk-scale budget (30 epochs).
    pub fn desk(batch_size: usize, lr: f64, seed: u64) -> Self {
        Self::new(batch_size, lr, DESK_EPOCHS, seed)
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::invalid(format!(
                "batch size {} must be in 1..={n_train}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {} must be positive and finite",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Per-layer gradient block, shaped like [`crate::neural::LayerParams`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub kernels: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients (or Adam moment accumulators) mirroring a full [`ModelParams`]
/// including the head.
#[derive(Debug, Clone)]
pub struct GradStore {
    pub layers: Vec<LayerGrads>,
    pub beta: Array2<f64>,
    pub beta0: Array1<f64>,
}

impl GradStore {
    pub fn zeros_like(params: &ModelParams) -> Result<Self> {
        let head = params
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("gradient store needs a model with a head"))?;
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrads {
                kernels: Array2::zeros(l.kernels.raw_dim()),
                bias: Array1::zeros(l.bias.raw_dim()),
            })
            .collect();
        Ok(GradStore {
            layers,
            beta: Array2::zeros(head.beta.raw_dim()),
            beta0: Array1::zeros(head.beta.ncols()),
        })
    }

    /// Largest absolute entry across every block; handy for convergence and
    /// zero-gradient checks.
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for l in &self.layers {
            for v in l.kernels.iter().chain(l.bias.iter()) {
                m = m.max(v.abs());
            }
        }
        for v in self.beta.iter().chain(self.beta0.iter()) {
            m = m.max(v.abs());
        }
        m
    }
}

/// Adjoint of `im2col_3x3`: scatters column-block gradients back onto the
/// input map, accumulating where patches overlap. Mirrors the forward index
/// arithmetic exactly.
fn col2im_3x3(dcols: &Array2<f64>, h: usize, w: usize, c: usize) -> Tensor3 {
    let mut out = Array2::<f64>::zeros((h * w, c));
    for ky in 0..3usize {
        let dy = ky as i64 - 1;
        for kx in 0..3usize {
            let dx = kx as i64 - 1;
            let col0 = (ky * 3 + kx) * c;
            for y in 0..h as i64 {
                let sy = y + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                let x0 = (-dx).max(0);
                let x1 = (w as i64 - dx).min(w as i64);
                if x0 >= x1 {
                    continue;
                }
                let dst_r0 = (y * w as i64 + x0) as usize;
                let src_r0 = (sy * w as i64 + x0 + dx) as usize;
                let n = (x1 - x0) as usize;
                let add = dcols.slice(ndarray::s![dst_r0..dst_r0 + n, col0..col0 + c]);
                let mut dst = out.slice_mut(ndarray::s![src_r0..src_r0 + n, ..]);
                dst += &add;
            }
        }
    }
    Tensor3::from_data(h, w, out).expect("col2im shape is consistent by construction")
}

/// Backward pass through 2x2 stride-2 pooling. Mean pooling splits the
/// gradient uniformly; max pooling routes it to the cached winner.
fn pool2_backward(
    dout: &Tensor3,
    kind: Pooling,
    argmax: Option<&Array2<u8>>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor3> {
    let (oh, ow, c) = (dout.height(), dout.width(), dout.channels());
    if oh * 2 != in_h || ow * 2 != in_w {
        return Err(Error::ShapeMismatch(format!(
            "pool backward: output {oh}x{ow} does not halve input {in_h}x{in_w}"
        )));
    }
    let mut din = Array2::<f64>::zeros((in_h * in_w, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let r = oy * ow + ox;
            let base = (2 * oy) * in_w + 2 * ox;
            let idx = [base, base + 1, base + in_w, base + in_w + 1];
            match kind {
                Pooling::Mean => {
                    for ch in 0..c {
                        let g = 0.25 * dout.data[(r, ch)];
                        for &i in &idx {
                            din[(i, ch)] += g;
                        }
                    }
                }
                Pooling::Max => {
                    let arg = argmax.ok_or_else(|| {
                        Error::invalid("max-pool backward needs cached argmax")
                    })?;
                    for ch in 0..c {
                        din[(idx[arg[(r, ch)] as usize], ch)] += dout.data[(r, ch)];
                    }
                }
            }
        }
    }
    Tensor3::from_data(in_h, in_w, din)
}

fn accumulate_sample_grads(
    caches: &[LayerCache],
    features: &Array1<f64>,
    dout: &Array1<f64>,
    params: &ModelParams,
    spec: &ArchSpec,
    grads: &mut GradStore,
) -> Result<()> {
    let head = params.head.as_ref().expect("caller validated the head");
    // Head: output = beta^T f + beta0, so dbeta = f dout^T, dbeta0 = dout.
    for (l, &f) in features.iter().enumerate() {
        for (j, &g) in dout.iter().enumerate() {
            grads.beta[(l, j)] += f * g;
        }
    }
    grads.beta0 += dout;

    // Feature gradient, reshaped back onto the last pooled map. The
    // flattening convention is row-major (h, w, c), i.e. the Tensor3 data
    // layout itself.
    let last = caches.last().expect("encoder has at least one layer");
    let (fh, fw) = (last.in_h / 2, last.in_w / 2);
    let fc = params.layers.last().unwrap().c_out();
    let dfeat = head.beta.dot(dout);
    let mut d = Tensor3::from_data(
        fh,
        fw,
        Array2::from_shape_vec((fh * fw, fc), dfeat.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
    )?;

    for (layer_idx, (layer, cache)) in params.layers.iter().zip(caches).enumerate().rev() {
        let dact = pool2_backward(&d, spec.pooling, cache.argmax.as_ref(), cache.in_h, cache.in_w)?;
        let mut dpre = dact.data;
        dpre.zip_mut_with(&cache.pre.data, |g, &p| *g *= spec.activation.grad(p));
        grads.layers[layer_idx].kernels += &cache.cols.t().dot(&dpre);
        grads.layers[layer_idx].bias += &dpre.sum_axis(Axis(0));
        if layer_idx > 0 {
            let dcols = dpre.dot(&layer.kernels.t());
            d = col2im_3x3(&dcols, cache.in_h, cache.in_w, layer.c_in);
        }
    }
    Ok(())
}

fn loss_and_grad_refs(
    batch: &[&S2Sample],
    params: &ModelParams,
    spec: &ArchSpec,
    normalizer: &Normalizer,
) -> Result<(f64, GradStore)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::invalid("loss_and_grad needs a model with a head"))?;
    let m = head.beta.ncols();
    let scale = 1.0 / (batch.len() * m) as f64;
    let mut grads = GradStore::zeros_like(params)?;
    let mut total_sq = 0.0;
    for (si, sample) in batch.iter().enumerate() {
        let input = Tensor3::from_gray(&sample.image);
        let (caches, features, output) = forward_cached(&input, params, spec)?;
        let target =
            normalizer.normalize_vec(Array1::from(sample.labels.target_vector()).view());
        if target.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} label components, head emits {m}",
                target.len()
            )));
        }
        let r = &output - &target;
        let sq = r.dot(&r);
        if !sq.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss".into(),
                sample: si,
            });
        }
        total_sq += sq;
        let dout = r.mapv(|x| 2.0 * x * scale);
        accumulate_sample_grads(&caches, &features, &dout, params, spec, &mut grads)?;
    }
    Ok((total_sq * scale, grads))
}

/// MSE loss over normalized labels plus exact gradients for every parameter
/// (kernels, biases, head weights, head bias). Errors with the offending
/// in-batch sample index if the loss goes non-finite.
pub fn loss_and_grad(
    batch: &[S2Sample],
    params: &ModelParams,
    spec: &ArchSpec,
    normalizer: &Normalizer,
) -> Result<(f64, GradStore)> {
    let refs: Vec<&S2Sample> = batch.iter().collect();
    loss_and_grad_refs(&refs, params, spec, normalizer)
}

/// Mean squared error of the model over a sample list (no gradients).
pub fn eval_loss(
    samples: &[S2Sample],
    params: &ModelParams,
    spec: &ArchSpec,
    normalizer: &Normalizer,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::invalid("eval_loss needs a model with a head"))?;
    let m = head.beta.ncols();
    let mut total_sq = 0.0;
    for sample in samples {
        let input = Tensor3::from_gray(&sample.image);
        let (_, output) = crate::neural::forward(&input, params, spec)?;
        let target =
            normalizer.normalize_vec(Array1::from(sample.labels.target_vector()).view());
        let r = &output - &target;
        total_sq += r.dot(&r);
    }
    Ok(total_sq / (samples.len() * m) as f64)
}

/// Denormalized prediction for one sample, as a label set in the sample's
/// own strategy.
pub fn predict_labels(
    params: &ModelParams,
    spec: &ArchSpec,
    normalizer: &Normalizer,
    sample: &S2Sample,
) -> Result<LabelSet> {
    let input = Tensor3::from_gray(&sample.image);
    let (_, output) = crate::neural::forward(&input, params, spec)?;
    let denorm = normalizer.denormalize_vec(output.view());
    LabelSet::from_target_vector(
        sample.labels.strategy(),
        denorm.as_slice().expect("contiguous"),
    )
}

/// Batch prediction across a prepared split.
pub fn predict_split(
    params: &ModelParams,
    spec: &ArchSpec,
    normalizer: &Normalizer,
    split: &PreparedSplit,
) -> Result<Vec<LabelSet>> {
    split
        .samples
        .iter()
        .map(|s| predict_labels(params, spec, normalizer, s))
        .collect()
}

fn adam_update(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..theta.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam optimizer state: per-parameter first/second moment accumulators and
/// the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradStore,
    pub v: GradStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Result<Self> {
        Ok(AdamState {
            m: GradStore::zeros_like(params)?,
            v: GradStore::zeros_like(params)?,
            step: 0,
        })
    }

    /// One bias-corrected Adam step over every parameter block.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &GradStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let head = params.head.as_mut().expect("trainer always attaches a head");
        for ((layer, g), (ms, vs)) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()))
        {
            adam_update(
                layer.kernels.as_slice_mut().expect("standard layout"),
                g.kernels.as_slice().expect("standard layout"),
                ms.kernels.as_slice_mut().expect("standard layout"),
                vs.kernels.as_slice_mut().expect("standard layout"),
                lr,
                bc1,
                bc2,
            );
            adam_update(
                layer.bias.as_slice_mut().expect("contiguous"),
                g.bias.as_slice().expect("contiguous"),
                ms.bias.as_slice_mut().expect("contiguous"),
                vs.bias.as_slice_mut().expect("contiguous"),
                lr,
                bc1,
                bc2,
            );
        }
        adam_update(
            head.beta.as_slice_mut().expect("standard layout"),
            grads.beta.as_slice().expect("standard layout"),
            self.m.beta.as_slice_mut().expect("standard layout"),
            self.v.beta.as_slice_mut().expect("standard layout"),
            lr,
            bc1,
            bc2,
        );
        if let Some(b0) = head.beta0.as_mut() {
            adam_update(
                b0.as_slice_mut().expect("contiguous"),
                grads.beta0.as_slice().expect("contiguous"),
                self.m.beta0.as_slice_mut().expect("contiguous"),
                self.v.beta0.as_slice_mut().expect("contiguous"),
                lr,
                bc1,
                bc2,
            );
        }
    }
}

/// Best-validation snapshot from a training run. Carries the fitted
/// normalizer so the checkpoint is usable for prediction on its own.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub epoch: usize,
    pub val_loss: f64,
    pub normalizer: Normalizer,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_s: f64,
}

/// Writes the training log CSV (epoch, train loss, val loss, wall time).
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "epoch,train_loss,val_loss,wall_s").map_err(io_err)?;
    for row in log {
        writeln!(
            w,
            "{},{},{},{:.6}",
            row.epoch, row.train_loss, row.val_loss, row.wall_s
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Uniform(-1/sqrt(L), 1/sqrt(L)) head with a zero bias; the kernel
/// distributions come from the spec, but gradient training needs a starting
/// head too.
pub fn init_head(l: usize, n_o: usize, seed: u64) -> HeadParams {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x4845_4144);
    let bound = 1.0 / (l as f64).sqrt();
    HeadParams {
        beta: Array2::from_shape_fn((l, n_o), |_| rng.random_range(-bound..bound)),
        beta0: Some(Array1::zeros(n_o)),
    }
}

/// Trains a CNN by shuffled mini-batch Adam for the configured epoch budget,
/// tracking the best validation loss. Returns the best checkpoint (epoch 0
/// is the initialization, so `epochs = 0` returns exactly that) plus the
/// full epoch log.
pub fn train_cnn(
    train: &PreparedSplit,
    val: &PreparedSplit,
    spec: &ArchSpec,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and val splits must be nonempty"));
    }
    config.validate(train.len())?;
    let strategy = train.strategy();
    let n_o = strategy.output_size();

    let targets = crate::elm::target_matrix(&train.samples)?;
    let normalizer = Normalizer::fit(targets.view())?;

    let mut params = crate::neural::init_kernels(spec, config.seed);
    // Head width from the actual encode length of the first sample, so the
    // trainer also works on reduced test-harness inputs.
    let first = Tensor3::from_gray(&train.samples[0].image);
    let features = crate::neural::encode(&first, &params, spec)?;
    params.head = Some(init_head(features.len(), n_o, config.seed));

    let mut adam = AdamState::new(&params)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x5348_5546);

    let init_val = eval_loss(&val.samples, &params, spec, &normalizer)?;
    if !init_val.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut best = Checkpoint {
        params: params.clone(),
        epoch: 0,
        val_loss: init_val,
        normalizer: normalizer.clone(),
    };
    let mut log = Vec::with_capacity(config.epochs);

    let n = train.len();
    let m = n_o;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_sq = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&S2Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let (loss, grads) = match loss_and_grad_refs(&batch, &params, spec, &normalizer) {
                Ok(ok) => ok,
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            epoch_sq += loss * (chunk.len() * m) as f64;
            adam.apply(&mut params, &grads, config.lr);
        }
        let train_loss = epoch_sq / (n * m) as f64;
        let val_loss = eval_loss(&val.samples, &params, spec, &normalizer)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if val_loss < best.val_loss {
            best = Checkpoint {
                params: params.clone(),
                epoch,
                val_loss,
                normalizer: normalizer.clone(),
            };
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }
    Ok((best, log))
}

/// Hybrid training: freezes the source checkpoint's encoder, discards its
/// head, and refits a CELM head in closed form. Returns the assembled model
/// (frozen encoder + LS head, no head bias) together with the fit record.
pub fn train_hybrid(
    source: &Checkpoint,
    train: &PreparedSplit,
    val: &PreparedSplit,
    spec: &ArchSpec,
    c_grid: &[f64],
    camera: &CameraModel,
    rotation_phase_rad: f64,
) -> Result<(ModelParams, CelmFit)> {
    let encoder = ModelParams {
        layers: source.params.layers.clone(),
        head: None,
    };
    encoder.validate_encoder(spec)?;
    let fit = crate::elm::train_celm(train, val, &encoder, spec, c_grid, camera, rotation_phase_rad)?;
    let model = ModelParams {
        head: Some(HeadParams {
            beta: fit.beta.clone(),
            beta0: None,
        }),
        layers: encoder.layers,
    };
    Ok((model, fit))
}
