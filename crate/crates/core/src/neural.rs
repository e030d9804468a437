//! From-scratch tensor operations for the shared encoder architecture:
//! same-padded 3x3 convolution, activations, 2x2 pooling, flattening, dense
//! head, kernel initializers, and the model blob format.
//!
//! Feature maps are stored as an `(h*w) x c` matrix in row-major `(y, x)`
//! order, so the flattened feature vector comes out in `(height, width,
//! channel)` order by construction. Convolution runs as im2col followed by
//! a single GEMM per layer.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archgen::ArchSpec;
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::linalg::mgs_orthonormalize;

/// Activation applied after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Negative ReLU, min(0, x).
    NRelu,
    Relu,
    Tanh,
    /// Identity.
    None,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::NRelu,
        Activation::Relu,
        Activation::Tanh,
        Activation::None,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::NRelu => x.min(0.0),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::None => x,
        }
    }

    /// Derivative as a function of the pre-activation value.
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::NRelu => {
                if x < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::None => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::NRelu => "nrelu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::None => "none",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown activation {tag:?}")))
    }
}

/// Pooling strategy after the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

impl Pooling {
    pub const ALL: [Pooling; 2] = [Pooling::Mean, Pooling::Max];

    pub fn tag(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown pooling {tag:?}")))
    }
}

/// Weight distribution for the random kernel draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDist {
    /// Uniform on (-1, 1); biases from the same law.
    Uniform,
    /// Standard normal; biases from the same law.
    Normal,
    /// Orthogonal columns (or rows when the layer is wider than its patch
    /// dimension); biases zero.
    Orthogonal,
}

impl WeightDist {
    pub const ALL: [WeightDist; 3] = [
        WeightDist::Uniform,
        WeightDist::Normal,
        WeightDist::Orthogonal,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            WeightDist::Uniform => "uniform",
            WeightDist::Normal => "normal",
            WeightDist::Orthogonal => "orthogonal",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown distribution {tag:?}")))
    }
}

/// A channel-last feature map: `data` is `(h*w) x c` with rows in row-major
/// `(y, x)` order. Flattening `data` therefore yields `(h, w, c)` order,
/// which is the fixed flattening convention of the dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    pub data: Array2<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 {
            h,
            w,
            data: Array2::zeros((h * w, c)),
        }
    }

    pub fn from_gray(image: &GrayImage) -> Self {
        let (w, h) = (image.width(), image.height());
        let data = Array2::from_shape_fn((h * w, 1), |(r, _)| image.get(r % w, r / w) as f64);
        Tensor3 { h, w, data }
    }

    pub fn from_data(h: usize, w: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor data has {} rows, expected {}x{}",
                data.nrows(),
                h,
                w
            )));
        }
        Ok(Tensor3 { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.w + x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.w + x, c)] = v;
    }

    /// Flattened feature vector in `(h, w, c)` order.
    pub fn flatten(&self) -> Array1<f64> {
        Array1::from_iter(self.data.iter().copied())
    }
}

/// One convolutional layer: 3x3 kernels stored as a `(9*c_in) x c_out`
/// matrix whose row index is the row-major flattening of `(ky, kx, c_in)`,
/// i.e. the 4D kernel tensor `(3, 3, c_in, c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kernels: Array2<f64>,
    pub bias: Array1<f64>,
    pub c_in: usize,
}

impl LayerParams {
    pub fn c_out(&self) -> usize {
        self.kernels.ncols()
    }

    /// Kernel element at spatial offset `(ky, kx)` for channel pair
    /// `(ci, co)`.
    pub fn kernel_at(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        self.kernels[((ky * 3 + kx) * self.c_in + ci, co)]
    }
}

/// Dense head: `beta` is `L x n_o`; `beta0` is absent in CELM mode.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub beta: Array2<f64>,
    pub beta0: Option<Array1<f64>>,
}

/// Full parameter set theta = (W, b, beta, beta0). The head is absent until
/// a trainer provides one.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub head: Option<HeadParams>,
}

impl ModelParams {
    /// Checks the channel chain against a spec and returns the flattened
    /// feature length.
    pub fn validate_encoder(&self, spec: &ArchSpec) -> Result<usize> {
        if self.layers.len() != spec.d {
            return Err(Error::ShapeMismatch(format!(
                "model has {} layers, spec depth is {}",
                self.layers.len(),
                spec.d
            )));
        }
        let mut c_prev = 1usize;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.c_in != c_prev || layer.kernels.nrows() != 9 * c_prev {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} expects {} input channels, got {}",
                    i + 1,
                    c_prev,
                    layer.c_in
                )));
            }
            let want = ArchSpec::kernel_count(i + 1);
            if layer.c_out() != want || layer.bias.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} has {} kernels, spec wants {}",
                    i + 1,
                    layer.c_out(),
                    want
                )));
            }
            c_prev = want;
        }
        Ok(spec.n_fc())
    }
}

/// im2col for a 3x3 same-padded window: output is `(h*w) x (9*c)`, with
/// column blocks ordered by `(ky, kx)` offset and zero fill outside the
/// image.
pub fn im2col_3x3(t: &Tensor3) -> Array2<f64> {
    let (h, w, c) = (t.h, t.w, t.channels());
    let mut out = Array2::<f64>::zeros((h * w, 9 * c));
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
                let src = t.data.slice(s![src_r0..src_r0 + n, ..]).to_owned();
                out.slice_mut(s![dst_r0..dst_r0 + n, col0..col0 + c])
                    .assign(&src);
            }
        }
    }
    out
}

/// Same-padded 3x3 convolution, stride 1. Returns the pre-activation map.
pub fn conv2d_same(input: &Tensor3, layer: &LayerParams) -> Result<Tensor3> {
    if input.channels() != layer.c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv input has {} channels, kernels expect {}",
            input.channels(),
            layer.c_in
        )));
    }
    let cols = im2col_3x3(input);
    let mut pre = cols.dot(&layer.kernels);
    pre += &layer.bias;
    Tensor3::from_data(input.h, input.w, pre)
}

/// Elementwise activation.
pub fn activate(input: &Tensor3, kind: Activation) -> Tensor3 {
    Tensor3 {
        h: input.h,
        w: input.w,
        data: input.data.mapv(|x| kind.apply(x)),
    }
}

/// Non-overlapping 2x2 pooling, stride 2.
pub fn pool2(input: &Tensor3, kind: Pooling) -> Result<Tensor3> {
    Ok(pool2_with_argmax(input, kind)?.0)
}

/// Pooling that also returns, for max mode, the in-window winner index
/// (0..4 in `(dy, dx)` scan order, first index winning ties) needed by the
/// backward pass.
pub fn pool2_with_argmax(input: &Tensor3, kind: Pooling) -> Result<(Tensor3, Option<Array2<u8>>)> {
    let (h, w, c) = (input.h, input.w, input.channels());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::<f64>::zeros((oh * ow, c));
    let mut arg = match kind {
        Pooling::Max => Some(Array2::<u8>::zeros((oh * ow, c))),
        Pooling::Mean => None,
    };
    for oy in 0..oh {
        for ox in 0..ow {
            let r = oy * ow + ox;
            let base = (2 * oy) * w + 2 * ox;
            let idx = [base, base + 1, base + w, base + w + 1];
            match kind {
                Pooling::Mean => {
                    for ch in 0..c {
                        let s: f64 = idx.iter().map(|&i| input.data[(i, ch)]).sum();
                        out[(r, ch)] = 0.25 * s;
                    }
                }
                Pooling::Max => {
                    let arg = arg.as_mut().unwrap();
                    for ch in 0..c {
                        let mut best = input.data[(idx[0], ch)];
                        let mut win = 0u8;
                        for (k, &i) in idx.iter().enumerate().skip(1) {
                            let v = input.data[(i, ch)];
                            if v > best {
                                best = v;
                                win = k as u8;
                            }
                        }
                        out[(r, ch)] = best;
                        arg[(r, ch)] = win;
                    }
                }
            }
        }
    }
    Ok((Tensor3 { h: oh, w: ow, data: out }, arg))
}

/// Per-layer intermediates kept by [`forward_cached`] for the backward pass.
pub struct LayerCache {
    /// im2col of the layer input.
    pub cols: Array2<f64>,
    /// Pre-activation map.
    pub pre: Tensor3,
    /// Max-pool winner indices, when max pooling.
    pub argmax: Option<Array2<u8>>,
    /// Input spatial size of this layer.
    pub in_h: usize,
    pub in_w: usize,
}

/// Encoder forward pass returning the flattened feature vector.
pub fn encode(input: &Tensor3, params: &ModelParams, spec: &ArchSpec) -> Result<Array1<f64>> {
    let (features, _) = encode_trace(input, params, spec)?;
    Ok(features)
}

/// Encoder forward pass that also reports the output shape after every
/// block as `(h, w, c)`.
pub fn encode_trace(
    input: &Tensor3,
    params: &ModelParams,
    spec: &ArchSpec,
) -> Result<(Array1<f64>, Vec<(usize, usize, usize)>)> {
    params.validate_encoder(spec)?;
    let mut t = input.clone();
    let mut shapes = Vec::with_capacity(spec.d);
    for layer in &params.layers {
        let pre = conv2d_same(&t, layer)?;
        let act = activate(&pre, spec.activation);
        t = pool2(&act, spec.pooling)?;
        shapes.push((t.h, t.w, t.channels()));
    }
    Ok((t.flatten(), shapes))
}

/// Full forward pass with caches, used by the gradient trainer. Returns the
/// per-layer caches, the flattened features, and the head output.
pub fn forward_cached(
    input: &Tensor3,
    params: &ModelParams,
    spec: &ArchSpec,
) -> Result<(Vec<LayerCache>, Array1<f64>, Array1<f64>)> {
    params.validate_encoder(spec)?;
    let mut t = input.clone();
    let mut caches = Vec::with_capacity(spec.d);
    for layer in &params.layers {
        let cols = im2col_3x3(&t);
        let mut pre_m = cols.dot(&layer.kernels);
        pre_m += &layer.bias;
        let pre = Tensor3::from_data(t.h, t.w, pre_m)?;
        let act = activate(&pre, spec.activation);
        let (pooled, argmax) = pool2_with_argmax(&act, spec.pooling)?;
        caches.push(LayerCache {
            cols,
            pre,
            argmax,
            in_h: t.h,
            in_w: t.w,
        });
        t = pooled;
    }
    let features = t.flatten();
    let output = apply_head(
        features.view(),
        params
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no head"))?,
    );
    Ok((caches, features, output))
}

/// `beta^T f (+ beta0)`.
pub fn apply_head(features: ArrayView1<'_, f64>, head: &HeadParams) -> Array1<f64> {
    let mut out = head.beta.t().dot(&features);
    if let Some(b0) = &head.beta0 {
        out += b0;
    }
    out
}

/// Forward pass through encoder and head.
pub fn forward(
    input: &Tensor3,
    params: &ModelParams,
    spec: &ArchSpec,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let features = encode(input, params, spec)?;
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no head"))?;
    if head.beta.nrows() != features.len() {
        return Err(Error::ShapeMismatch(format!(
            "head expects {} features, encoder produced {}",
            head.beta.nrows(),
            features.len()
        )));
    }
    let output = apply_head(features.view(), head);
    Ok((features, output))
}

/// Seeded random encoder parameters per the spec's distribution. The head
/// is left empty; trainers attach their own.
pub fn init_kernels(spec: &ArchSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.d);
    let mut c_in = 1usize;
    for depth in 1..=spec.d {
        let c_out = ArchSpec::kernel_count(depth);
        let rows = 9 * c_in;
        let (kernels, bias) = match spec.dist {
            WeightDist::Uniform => {
                let k = Array2::from_shape_fn((rows, c_out), |_| rng.random_range(-1.0..1.0));
                let b = Array1::from_shape_fn(c_out, |_| rng.random_range(-1.0..1.0));
                (k, b)
            }
            WeightDist::Normal => {
                let k = Array2::from_shape_fn((rows, c_out), |_| {
                    StandardNormal.sample(&mut rng)
                });
                let b = Array1::from_shape_fn(c_out, |_| StandardNormal.sample(&mut rng));
                (k, b)
            }
            WeightDist::Orthogonal => {
                // Orthonormalize over the smaller dimension: Gaussian matrix
                // of shape (max, min), modified Gram-Schmidt on its columns
                // (equivalent to thin QR with a positive-diagonal R), then
                // transpose if needed to land on (9*c_in) x c_out.
                let (gr, gc) = (rows.max(c_out), rows.min(c_out));
                let mut g =
                    Array2::from_shape_fn((gr, gc), |_| StandardNormal.sample(&mut rng));
                mgs_orthonormalize(&mut g).expect("gaussian matrix is almost surely full rank");
                let k = if rows >= c_out { g } else { g.reversed_axes().as_standard_layout().to_owned() };
                (k, Array1::zeros(c_out))
            }
        };
        layers.push(LayerParams {
            kernels,
            bias,
            c_in,
        });
        c_in = c_out;
    }
    ModelParams { layers, head: None }
}

const BLOB_MAGIC: &[u8; 4] = b"CEL1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// JSON sidecar written next to every model blob. Mirrors the spec plus the
/// training metadata a closed-form run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format_version: u32,
    pub spec: ArchSpec,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_min: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_max: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
}

impl ModelSidecar {
    pub fn new(spec: &ArchSpec, seed: u64) -> Self {
        ModelSidecar {
            format_version: MODEL_FORMAT_VERSION,
            spec: spec.clone(),
            seed,
            c_star: None,
            val_score: None,
            label_min: None,
            label_max: None,
            strategy: None,
        }
    }
}

fn write_f32_slice<W: IoWrite>(w: &mut W, vals: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32_vec<R: IoRead>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn write_u32<W: IoWrite>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: IoRead>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Saves a model blob (little-endian f32 arrays) plus its `.json` sidecar.
pub fn save_model(path: &Path, params: &ModelParams, sidecar: &ModelSidecar) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(BLOB_MAGIC).map_err(io_err)?;
    write_u32(&mut w, MODEL_FORMAT_VERSION).map_err(io_err)?;
    write_u32(&mut w, params.layers.len() as u32).map_err(io_err)?;
    for layer in &params.layers {
        write_u32(&mut w, layer.c_in as u32).map_err(io_err)?;
        write_u32(&mut w, layer.c_out() as u32).map_err(io_err)?;
        write_f32_slice(&mut w, layer.kernels.iter().copied()).map_err(io_err)?;
        write_f32_slice(&mut w, layer.bias.iter().copied()).map_err(io_err)?;
    }
    match &params.head {
        None => write_u32(&mut w, 0).map_err(io_err)?,
        Some(head) => {
            write_u32(&mut w, 1).map_err(io_err)?;
            write_u32(&mut w, head.beta.nrows() as u32).map_err(io_err)?;
            write_u32(&mut w, head.beta.ncols() as u32).map_err(io_err)?;
            write_f32_slice(&mut w, head.beta.iter().copied()).map_err(io_err)?;
            match &head.beta0 {
                None => write_u32(&mut w, 0).map_err(io_err)?,
                Some(b0) => {
                    write_u32(&mut w, 1).map_err(io_err)?;
                    write_f32_slice(&mut w, b0.iter().copied()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)?;
    let sidecar_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Loads a model blob and its sidecar.
pub fn load_model(path: &Path) -> Result<(ModelParams, ModelSidecar)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::ModelFormat(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model format version {version}"
        )));
    }
    let n_layers = read_u32(&mut r).map_err(io_err)? as usize;
    if n_layers > 16 {
        return Err(Error::ModelFormat(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let c_in = read_u32(&mut r).map_err(io_err)? as usize;
        let c_out = read_u32(&mut r).map_err(io_err)? as usize;
        let k = read_f32_vec(&mut r, 9 * c_in * c_out).map_err(io_err)?;
        let b = read_f32_vec(&mut r, c_out).map_err(io_err)?;
        layers.push(LayerParams {
            kernels: Array2::from_shape_vec((9 * c_in, c_out), k)
                .map_err(|e| Error::ModelFormat(e.to_string()))?,
            bias: Array1::from_vec(b),
            c_in,
        });
    }
    let head = if read_u32(&mut r).map_err(io_err)? == 1 {
        let rows = read_u32(&mut r).map_err(io_err)? as usize;
        let cols = read_u32(&mut r).map_err(io_err)? as usize;
        let beta = read_f32_vec(&mut r, rows * cols).map_err(io_err)?;
        let beta0 = if read_u32(&mut r).map_err(io_err)? == 1 {
            Some(Array1::from_vec(read_f32_vec(&mut r, cols).map_err(io_err)?))
        } else {
            None
        };
        Some(HeadParams {
            beta: Array2::from_shape_vec((rows, cols), beta)
                .map_err(|e| Error::ModelFormat(e.to_string()))?,
            beta0,
        })
    } else {
        None
    };
    let sidecar_path = sidecar_path(path);
    let json = std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: ModelSidecar = serde_json::from_str(&json)?;
    Ok((ModelParams { layers, head }, sidecar))
}
