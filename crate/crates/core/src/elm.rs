//! CELM training: hidden-matrix assembly from encoder forward passes,
//! closed-form regularized least squares for the head, label normalization,
//! and the regularization sweep.
//!
//! The optimization problem is min over beta of ||beta||^2 + C ||H beta - T||^2,
//! solved in whichever of its two equivalent closed forms is cheaper:
//! beta = H^T (I/C + H H^T)^-1 T when N <= L, else
//! beta = (I/C + H^T H)^-1 H^T T. Both go through a symmetric
//! positive-definite factorization; nothing is ever inverted explicitly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archgen::ArchSpec;
use crate::error::{Error, Result};
use crate::labels::{LabelSet, LabelStrategy};
use crate::linalg::{cholesky_lower, cholesky_solve};
use crate::neural::{encode, ModelParams, Tensor3};
use crate::preprocess::S2Sample;

/// Per-component min-max statistics fitted on a training set, mapping raw
/// targets to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Normalizer {
    /// Fits per-column extrema. A component with no spread cannot be
    /// normalized and is reported as degenerate.
    pub fn fit(targets: ArrayView2<'_, f64>) -> Result<Self> {
        let m = targets.ncols();
        let mut mins = vec![f64::INFINITY; m];
        let mut maxs = vec![f64::NEG_INFINITY; m];
        for row in targets.rows() {
            for (j, &v) in row.iter().enumerate() {
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        for j in 0..m {
            if !(maxs[j] > mins[j]) {
                return Err(Error::DegenerateNormalizer {
                    component: j,
                    value: mins[j],
                });
            }
        }
        Ok(Normalizer { mins, maxs })
    }

    pub fn len(&self) -> usize {
        self.mins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mins.is_empty()
    }

    pub fn normalize(&self, targets: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = targets.to_owned();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mins[j]) / (self.maxs[j] - self.mins[j]);
            }
        }
        out
    }

    pub fn normalize_vec(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::from_shape_fn(v.len(), |j| (v[j] - self.mins[j]) / (self.maxs[j] - self.mins[j]))
    }

    pub fn denormalize_vec(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::from_shape_fn(v.len(), |j| v[j] * (self.maxs[j] - self.mins[j]) + self.mins[j])
    }

    pub fn denormalize(&self, targets: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = targets.to_owned();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = row[j] * (self.maxs[j] - self.mins[j]) + self.mins[j];
            }
        }
        out
    }
}

/// Stacks encoder features row per sample. Fails on the first non-finite
/// feature, naming the sample. Samples encode in parallel; the error
/// reported is still the lowest-index failure, so behavior does not depend
/// on the thread count.
pub fn assemble_h(
    samples: &[S2Sample],
    params: &ModelParams,
    spec: &ArchSpec,
) -> Result<Array2<f64>> {
    let l = spec.n_fc();
    let rows: Vec<Result<Array1<f64>>> = samples
        .par_iter()
        .map(|sample| {
            let t = Tensor3::from_gray(&sample.image);
            encode(&t, params, spec)
        })
        .collect();
    let mut h = Array2::<f64>::zeros((samples.len(), l));
    for (i, row) in rows.into_iter().enumerate() {
        let f = row?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "encoder features".into(),
                sample: i,
            });
        }
        h.row_mut(i).assign(&f);
    }
    Ok(h)
}

/// Stacks raw (unnormalized) target vectors row per sample.
pub fn target_matrix(samples: &[S2Sample]) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("empty sample list"));
    }
    let m = samples[0].labels.strategy().output_size();
    let mut t = Array2::<f64>::zeros((samples.len(), m));
    for (i, sample) in samples.iter().enumerate() {
        let v = sample.labels.target_vector();
        if v.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} has {} target components, expected {m}",
                v.len()
            )));
        }
        t.row_mut(i).assign(&Array1::from_vec(v));
    }
    Ok(t)
}

/// Which closed form [`solve_beta`] uses, decided by the sample/feature
/// ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsBranch {
    /// N <= L: factorize the N x N Gram matrix `H H^T`.
    Gram,
    /// N > L: factorize the L x L normal matrix `H^T H`.
    Normal,
}

pub fn branch_for(n: usize, l: usize) -> LsBranch {
    if n <= l {
        LsBranch::Gram
    } else {
        LsBranch::Normal
    }
}

/// Closed-form ridge solution for the head weights.
pub fn solve_beta(h: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>, c: f64) -> Result<Array2<f64>> {
    let branch = branch_for(h.nrows(), h.ncols());
    let gram = branch_gram(h, branch);
    solve_beta_with_gram(&gram, h, t, c, branch)
}

/// The branch's symmetric product (`H H^T` or `H^T H`), computed over
/// fixed-size row blocks in parallel. The block size does not depend on the
/// thread count, so the partitioning (and the result) is the same at any
/// parallelism level.
fn branch_gram(h: ArrayView2<'_, f64>, branch: LsBranch) -> Array2<f64> {
    const BLOCK: usize = 128;
    let rows = match branch {
        LsBranch::Gram => h.nrows(),
        LsBranch::Normal => h.ncols(),
    };
    if rows <= BLOCK {
        return match branch {
            LsBranch::Gram => h.dot(&h.t()),
            LsBranch::Normal => h.t().dot(&h),
        };
    }
    let ranges: Vec<(usize, usize)> = (0..rows)
        .step_by(BLOCK)
        .map(|a| (a, (a + BLOCK).min(rows)))
        .collect();
    let blocks: Vec<Array2<f64>> = ranges
        .par_iter()
        .map(|&(a, b)| match branch {
            LsBranch::Gram => h.slice(ndarray::s![a..b, ..]).dot(&h.t()),
            LsBranch::Normal => h.slice(ndarray::s![.., a..b]).t().dot(&h),
        })
        .collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("blocks share the column count")
}

/// Branch-forced variant used by tests and by the sweep, which computes the
/// Gram matrix once and reuses it for every C.
pub fn solve_beta_with_gram(
    gram: &Array2<f64>,
    h: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
    c: f64,
    branch: LsBranch,
) -> Result<Array2<f64>> {
    if c <= 0.0 || !c.is_finite() {
        return Err(Error::invalid(format!("C must be positive, got {c}")));
    }
    if t.nrows() != h.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "H has {} rows, T has {}",
            h.nrows(),
            t.nrows()
        )));
    }
    let mut a = gram.clone();
    let ridge = 1.0 / c;
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let l_factor = cholesky_lower(a.view())?;
    match branch {
        LsBranch::Gram => {
            // beta = H^T (I/C + H H^T)^-1 T
            let x = cholesky_solve(l_factor.view(), t)?;
            Ok(h.t().dot(&x))
        }
        LsBranch::Normal => {
            // beta = (I/C + H^T H)^-1 H^T T
            let rhs = h.t().dot(&t);
            cholesky_solve(l_factor.view(), rhs.view())
        }
    }
}

/// Result of a regularization sweep: the winning head and bookkeeping.
#[derive(Debug, Clone)]
pub struct CelmFit {
    pub beta: Array2<f64>,
    pub c_star: f64,
    pub val_score: f64,
    pub normalizer: Normalizer,
    /// (C, val score) per grid point, in grid order.
    pub sweep: Vec<(f64, f64)>,
}

/// Core regularization sweep. `h_train`/`targets_train` are raw (the
/// normalizer is fitted here); `score_val` maps denormalized validation
/// predictions to a scalar (lower is better, mean epsilon_n in practice).
/// Ties prefer the smaller C.
pub fn sweep_c<F>(
    h_train: ArrayView2<'_, f64>,
    targets_train: ArrayView2<'_, f64>,
    h_val: ArrayView2<'_, f64>,
    c_grid: &[f64],
    mut score_val: F,
) -> Result<CelmFit>
where
    F: FnMut(&Array2<f64>) -> Result<f64>,
{
    if c_grid.is_empty() {
        return Err(Error::invalid("empty C grid"));
    }
    let normalizer = Normalizer::fit(targets_train)?;
    let t_norm = normalizer.normalize(targets_train);
    let branch = branch_for(h_train.nrows(), h_train.ncols());
    let gram = branch_gram(h_train, branch);
    // Grid points sorted ascending so the tie-break "smaller C wins" is a
    // strict-improvement scan; the recorded sweep keeps the caller's order.
    let mut order: Vec<usize> = (0..c_grid.len()).collect();
    order.sort_by(|&a, &b| c_grid[a].partial_cmp(&c_grid[b]).unwrap());

    let mut sweep = vec![(0.0, f64::INFINITY); c_grid.len()];
    let mut best: Option<(f64, f64, Array2<f64>)> = None;
    for idx in order {
        let c = c_grid[idx];
        let beta = solve_beta_with_gram(&gram, h_train, t_norm.view(), c, branch)?;
        let pred_norm = h_val.dot(&beta);
        let pred = normalizer.denormalize(pred_norm.view());
        let score = score_val(&pred)?;
        sweep[idx] = (c, score);
        let better = match &best {
            None => true,
            Some((_, s, _)) => score < *s,
        };
        if better {
            best = Some((c, score, beta));
        }
    }
    let (c_star, val_score, beta) = best.expect("grid checked nonempty");
    Ok(CelmFit {
        beta,
        c_star,
        val_score,
        normalizer,
        sweep,
    })
}

/// Denormalizes a raw head output into a label estimate in S2 units.
pub fn predict(
    features: ArrayView1<'_, f64>,
    beta: &Array2<f64>,
    normalizer: &Normalizer,
    strategy: LabelStrategy,
) -> Result<LabelSet> {
    let raw = beta.t().dot(&features);
    let denorm = normalizer.denormalize_vec(raw.view());
    LabelSet::from_target_vector(strategy, denorm.as_slice().unwrap())
}

/// Batch variant of [`predict`] over hidden-matrix rows.
pub fn predict_batch(
    h: ArrayView2<'_, f64>,
    beta: &Array2<f64>,
    normalizer: &Normalizer,
    strategy: LabelStrategy,
) -> Result<Vec<LabelSet>> {
    let pred = normalizer.denormalize(h.dot(beta).view());
    pred.rows()
        .into_iter()
        .map(|row| LabelSet::from_target_vector(strategy, row.as_slice().unwrap()))
        .collect()
}

/// Dataset-level CELM training: one H assembly per split, one Gram matrix,
/// then the C sweep scored by mean eps_n of the reconstructed positions on
/// the validation split.
pub fn train_celm(
    train: &crate::data::PreparedSplit,
    val: &crate::data::PreparedSplit,
    params: &ModelParams,
    spec: &ArchSpec,
    c_grid: &[f64],
    camera: &crate::imagery::CameraModel,
    rotation_phase_rad: f64,
) -> Result<CelmFit> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and val splits must be nonempty"));
    }
    let strategy = train.strategy();
    let h_train = assemble_h(&train.samples, params, spec)?;
    let h_val = assemble_h(&val.samples, params, spec)?;
    let targets = target_matrix(&train.samples)?;
    sweep_c(
        h_train.view(),
        targets.view(),
        h_val.view(),
        c_grid,
        |pred| {
            let labels = pred
                .rows()
                .into_iter()
                .map(|row| LabelSet::from_target_vector(strategy, row.as_slice().unwrap()))
                .collect::<Result<Vec<_>>>()?;
            crate::data::mean_eps_n(&labels, val, camera, rotation_phase_rad)
        },
    )
}

/// The constant predictor used as a sanity baseline: the componentwise mean
/// of the training targets, mapped back through the label parametrization.
pub fn mean_label_prediction(train: &crate::data::PreparedSplit) -> Result<LabelSet> {
    let targets = target_matrix(&train.samples)?;
    let mean = targets.mean_axis(ndarray::Axis(0)).unwrap();
    LabelSet::from_target_vector(train.strategy(), mean.as_slice().unwrap())
}
