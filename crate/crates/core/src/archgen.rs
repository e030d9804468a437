//! Procedural generation of the architecture and hyper-parameter space,
//! with exact parameter accounting.
//!
//! Every architecture follows the same rules: at depth level `i` the
//! spatial size is `2^(7-i)` (inputs are 128x128) and the kernel count is
//! `2^(3+i)`, starting from a single input channel. The search space is the
//! Cartesian product of depth, kernel distribution, activation, and pooling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelStrategy;
use crate::neural::{Activation, Pooling, WeightDist};

/// The nine-decade regularization grid.
pub fn default_c_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

/// Batch sizes explored by the gradient trainer.
pub const BATCH_GRID: [usize; 3] = [64, 128, 256];

/// Learning rates explored by the gradient trainer.
pub const LR_GRID: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

/// One point of the hyper-parameter space Theta: architecture choices plus
/// the training knobs attached to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Depth, 1..=5.
    pub d: usize,
    /// Kernel weight distribution.
    pub dist: WeightDist,
    pub activation: Activation,
    pub pooling: Pooling,
    /// Output neurons: 4 for spherical labels, 3 otherwise.
    pub n_o: usize,
    /// Regularization grid for the closed-form head.
    pub c_grid: Vec<f64>,
    /// Mini-batch size for the gradient trainer.
    pub batch: usize,
    /// Learning rate for the gradient trainer.
    pub lr: f64,
}

impl ArchSpec {
    pub fn new(
        d: usize,
        dist: WeightDist,
        activation: Activation,
        pooling: Pooling,
        n_o: usize,
    ) -> Self {
        ArchSpec {
            d,
            dist,
            activation,
            pooling,
            n_o,
            c_grid: default_c_grid(),
            batch: BATCH_GRID[0],
            lr: 1e-3,
        }
    }

    /// Spatial side after depth level `i` (level 0 is the input): `2^(7-i)`.
    pub fn spatial_size(i: usize) -> usize {
        128 >> i
    }

    /// Kernel count at depth level `i`: `2^(3+i)`, with one input channel
    /// at level 0.
    pub fn kernel_count(i: usize) -> usize {
        if i == 0 {
            1
        } else {
            8 << i
        }
    }

    /// Flattened feature length `n_fc = s_d^2 * n_d_ker`.
    pub fn n_fc(&self) -> usize {
        let s = Self::spatial_size(self.d);
        s * s * Self::kernel_count(self.d)
    }

    /// Stable identity for manifests and file names, e.g. `d3-orthogonal-relu-max`.
    pub fn key(&self) -> String {
        format!(
            "d{}-{}-{}-{}",
            self.d,
            self.dist.tag(),
            self.activation.tag(),
            self.pooling.tag()
        )
    }

    /// Parses a [`Self::key`] string back into a spec with default training
    /// knobs. The output width must be supplied because the key does not
    /// encode the labeling strategy.
    pub fn from_key(key: &str, n_o: usize) -> Result<Self> {
        let parts: Vec<&str> = key.split('-').collect();
        let bad = || Error::invalid(format!("malformed spec key '{key}'"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let d: usize = parts[0].strip_prefix('d').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if !(1..=5).contains(&d) {
            return Err(bad());
        }
        Ok(ArchSpec::new(
            d,
            WeightDist::from_tag(parts[1])?,
            Activation::from_tag(parts[2])?,
            Pooling::from_tag(parts[3])?,
            n_o,
        ))
    }
}

/// Per-layer and cumulative parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Kernel weights per depth level: `9 * n_i * n_{i-1}`.
    pub layer_weights: Vec<usize>,
    /// Biases per depth level: `n_i`.
    pub layer_biases: Vec<usize>,
    /// Running totals of weights + biases through each depth level.
    pub cumulative: Vec<usize>,
    /// Head weights `n_fc * n_o`.
    pub head_beta: usize,
    /// Head biases `n_o` (used by the gradient trainer; absent in CELM).
    pub head_beta0: usize,
}

impl ParamCount {
    /// Encoder parameters through the last level.
    pub fn encoder_total(&self) -> usize {
        *self.cumulative.last().unwrap_or(&0)
    }

    /// Everything, head included.
    pub fn total_with_head(&self) -> usize {
        self.encoder_total() + self.head_beta + self.head_beta0
    }

    /// Head parameters as counted with the bias term.
    pub fn head_total(&self) -> usize {
        self.head_beta + self.head_beta0
    }
}

/// Exact integer parameter accounting for a spec.
pub fn count_params(spec: &ArchSpec) -> ParamCount {
    let mut layer_weights = Vec::with_capacity(spec.d);
    let mut layer_biases = Vec::with_capacity(spec.d);
    let mut cumulative = Vec::with_capacity(spec.d);
    let mut running = 0usize;
    for i in 1..=spec.d {
        let w = 9 * ArchSpec::kernel_count(i) * ArchSpec::kernel_count(i - 1);
        let b = ArchSpec::kernel_count(i);
        running += w + b;
        layer_weights.push(w);
        layer_biases.push(b);
        cumulative.push(running);
    }
    ParamCount {
        layer_weights,
        layer_biases,
        cumulative,
        head_beta: spec.n_fc() * spec.n_o,
        head_beta0: spec.n_o,
    }
}

/// Full Cartesian product d x K_d x A x P in stable lexicographic order
/// (120 specs). The output size follows the labeling strategy.
pub fn enumerate_specs(strategy: LabelStrategy) -> Vec<ArchSpec> {
    let n_o = strategy.output_size();
    let mut specs = Vec::with_capacity(120);
    for d in 1..=5 {
        for dist in WeightDist::ALL {
            for activation in Activation::ALL {
                for pooling in Pooling::ALL {
                    specs.push(ArchSpec::new(d, dist, activation, pooling, n_o));
                }
            }
        }
    }
    specs
}

/// Writes the spec grid as CSV for audit, one row per (spec, seed).
pub fn export_grid_csv(path: &Path, specs: &[ArchSpec], seeds: &[u64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(["idx", "key", "d", "dist", "activation", "pooling", "n_o", "seed"])?;
    let mut idx = 0usize;
    for spec in specs {
        for &seed in seeds {
            w.write_record([
                idx.to_string(),
                spec.key(),
                spec.d.to_string(),
                spec.dist.tag().to_string(),
                spec.activation.tag().to_string(),
                spec.pooling.tag().to_string(),
                spec.n_o.to_string(),
                seed.to_string(),
            ])?;
            idx += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One row of the published best-Theta reference table. Shipped as a
/// fixture for comparison; never asserted against as ground truth because
/// those values depend on imagery this workspace does not reproduce.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceTheta {
    pub dataset: String,
    pub body: String,
    pub strategy: String,
    pub d: usize,
    pub dist: String,
    pub activation: String,
    pub pooling: String,
    pub c: f64,
    pub batch: usize,
    pub lr: f64,
}

/// Loads the embedded reference best-Theta table (20 rows).
pub fn reference_best_theta() -> Result<Vec<ReferenceTheta>> {
    let raw = include_str!("../resources/reference_best_theta.csv");
    let mut rdr = csv::Reader::from_reader(raw.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
