//! Acceptance gate: nine checks covering parameter accounting, solver and
//! gradient correctness, preprocessing and geometric closure, desk-scale
//! learning sanity, CELM/CNN speed ordering, grid bookkeeping, and report
//! regeneration. Each criterion is one test so the harness prints one
//! pass/fail line per criterion.
//!
//! The desk-scale stages (render, preprocess, CELM search, CNN bootstrap)
//! are shared across criteria through lazily built statics; the CNN stage
//! dominates the suite's runtime because the gradient trainer is the slow
//! side of the speed-ordering comparison by design.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, Rotation3, UnitQuaternion, Vector3};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tempfile::TempDir;

use celmnav::archgen::{count_params, enumerate_specs, ArchSpec};
use celmnav::data::{
    mean_eps_n, metric_rows_for_predictions, prepare_dataset, sample_seed, PreparedDataset,
    PreparedSplit,
};
use celmnav::elm::{
    assemble_h, mean_label_prediction, predict_batch, solve_beta, solve_beta_with_gram, LsBranch,
    Normalizer,
};
use celmnav::gd::{init_head, loss_and_grad, eval_loss, Checkpoint};
use celmnav::gray::GrayImage;
use celmnav::imagery::{
    build_dataset, camera_attitude, default_sun_w, sample_cloud, BodyModel, CameraModel,
    DatasetManifest, GroundTruth,
};
use celmnav::labels::{Frame, FrameGroup, LabelSet, LabelStrategy};
use celmnav::navmetrics::{
    emit_report, reconstruct_position, spherical_to_cartesian, MetricTable, ReconstructionContext,
};
use celmnav::neural::{
    activate, conv2d_same, encode, init_kernels, pool2, Activation, HeadParams, ModelParams,
    Pooling, Tensor3, WeightDist,
};
use celmnav::preprocess::{
    invert_labels, preprocess_image, select_gamma, Bbox, BlobResult, PreprocessRecord, S2Sample,
    GAMMA_CHOICES,
};
use celmnav::search::{
    bootstrap_cnn, build_hybrids, desk_grid, run_celm_search, CelmSearchOutcome, CnnGrid,
    ExperimentManifest, HybridInput, MethodTag, SelectOn,
};

// ---------------------------------------------------------------------------
// Shared desk-scale artifacts
// ---------------------------------------------------------------------------

const SENSOR_PX: usize = 256;
const FOV_DEG: f64 = 10.0;
const FILL: f64 = 0.9;
const BODY_SEED: u64 = 11;
const CLOUD_SEED: u64 = 99;
const MASTER_SEED: u64 = 64;
const SPLIT: [usize; 3] = [600, 200, 200];

struct Desk {
    _tmp: TempDir,
    manifest: DatasetManifest,
    prepared: PreparedDataset,
    outcome: CelmSearchOutcome,
    baseline_eps: f64,
    render_s: f64,
    prep_s: f64,
    search_s: f64,
}

static DESK: OnceLock<Desk> = OnceLock::new();

/// Renders the desk dataset, preprocesses it, and runs the 24-spec CELM
/// search once; later criteria reuse the outcome.
fn desk() -> &'static Desk {
    DESK.get_or_init(|| {
        let tmp = TempDir::new().expect("temp dir");
        let camera = CameraModel::new(FOV_DEG, SENSOR_PX);
        let body = BodyModel::procedural(BODY_SEED).scaled_to_fov(&camera, FILL);
        let cloud = sample_cloud(SPLIT.iter().sum(), CLOUD_SEED);

        let t0 = Instant::now();
        let manifest = build_dataset(
            &body,
            &camera,
            &cloud,
            LabelStrategy::DeltaRho,
            &default_sun_w(),
            CLOUD_SEED,
            Some(SPLIT),
            &tmp.path().join("raw"),
        )
        .expect("render desk dataset");
        let render_s = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let prepared = prepare_dataset(&manifest, SPLIT, MASTER_SEED, None).expect("preprocess");
        let prep_s = t0.elapsed().as_secs_f64();

        let grid = desk_grid(prepared.strategy);
        assert_eq!(grid.len(), 24, "desk grid must hold 24 specs");
        let t0 = Instant::now();
        let outcome = run_celm_search(
            &prepared,
            &grid,
            &[MASTER_SEED],
            SelectOn::Test,
            Some(&tmp.path().join("run")),
        )
        .expect("CELM search");
        let search_s = t0.elapsed().as_secs_f64();

        let baseline = mean_label_prediction(&prepared.train).expect("baseline");
        let preds = vec![baseline; prepared.test.len()];
        let baseline_eps = mean_eps_n(
            &preds,
            &prepared.test,
            &prepared.camera,
            prepared.rotation_phase_rad,
        )
        .expect("baseline score");

        Desk {
            _tmp: tmp,
            manifest,
            prepared,
            outcome,
            baseline_eps,
            render_s,
            prep_s,
            search_s,
        }
    })
}

struct CnnStage {
    manifest: ExperimentManifest,
}

static CNN: OnceLock<CnnStage> = OnceLock::new();

/// Trains the desk CNN grid (two cases, desk epochs) on the architecture the
/// CELM search selected, recording wall times into a manifest copy.
fn cnn_stage() -> &'static CnnStage {
    CNN.get_or_init(|| {
        let d = desk();
        let mut manifest = d.outcome.manifest.clone();
        bootstrap_cnn(
            &d.prepared,
            &d.outcome.best_spec,
            &CnnGrid::desk(),
            MASTER_SEED,
            &mut manifest,
            None,
        )
        .expect("CNN bootstrap");
        CnnStage { manifest }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: parameter accounting
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_parameter_accounting() {
    let t0 = Instant::now();
    let per_layer: [usize; 5] = [160, 4640, 18496, 73856, 295168];
    let cumulative: [usize; 5] = [160, 4800, 23296, 97152, 392320];

    for d in 1..=5usize {
        let spec = ArchSpec::new(
            d,
            WeightDist::Uniform,
            Activation::NRelu,
            Pooling::Mean,
            3,
        );
        let count = count_params(&spec);
        assert_eq!(count.cumulative.len(), d);
        for i in 0..d {
            assert_eq!(
                count.layer_weights[i] + count.layer_biases[i],
                per_layer[i],
                "level {} parameter count at d={d}",
                i + 1
            );
            assert_eq!(count.cumulative[i], cumulative[i], "cumulative at level {}", i + 1);
        }
        assert_eq!(count.encoder_total(), cumulative[d - 1]);
    }

    // Flattened feature width and head size at full depth.
    let d5 = ArchSpec::new(5, WeightDist::Uniform, Activation::NRelu, Pooling::Mean, 3);
    assert_eq!(d5.n_fc(), 4096, "flatten width at d=5");
    let count = count_params(&d5);
    assert_eq!(count.head_beta, 4096 * 3);
    assert_eq!(count.head_beta0, 3);
    assert_eq!(count.head_total(), 12291, "head parameter count");
    assert_eq!(count.total_with_head(), 392320 + 12291);

    assert!(t0.elapsed().as_secs_f64() < 1.0, "criterion 1 must finish in under 1 s");
}

// ---------------------------------------------------------------------------
// Criterion 2: least-squares solver correctness
// ---------------------------------------------------------------------------

/// Dense ridge oracle built entirely in nalgebra: solves
/// (I/C + H^T H) beta = H^T T by LU factorization.
fn ridge_oracle(h: &Array2<f64>, t: &Array2<f64>, c: f64) -> Array2<f64> {
    let (n, l) = h.dim();
    let m = t.ncols();
    let hm = DMatrix::from_fn(n, l, |i, j| h[(i, j)]);
    let tm = DMatrix::from_fn(n, m, |i, j| t[(i, j)]);
    let mut a = hm.transpose() * &hm;
    for i in 0..l {
        a[(i, i)] += 1.0 / c;
    }
    let rhs = hm.transpose() * tm;
    let sol = a.lu().solve(&rhs).expect("oracle solve");
    Array2::from_shape_fn((l, m), |(i, j)| sol[(i, j)])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn criterion_2_ls_solver_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0x5EED);
    let mut gram_branch_seen = 0usize;
    let mut normal_branch_seen = 0usize;

    for case in 0..50 {
        // Alternate the tall/wide shapes so both branches appear.
        let (n, l) = if case % 2 == 0 {
            let l = rng.random_range(6..40);
            (rng.random_range(3..=l), l)
        } else {
            let n = rng.random_range(6..40);
            (n, rng.random_range(3..n))
        };
        if n <= l {
            gram_branch_seen += 1;
        } else {
            normal_branch_seen += 1;
        }
        let m = rng.random_range(1..=3);
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let h = Array2::from_shape_fn((n, l), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0));

        let beta = solve_beta(h.view(), t.view(), c).expect("solver");
        let oracle = ridge_oracle(&h, &t, c);
        for (a, b) in beta.iter().zip(oracle.iter()) {
            assert!(
                rel_err(*a, *b) < 1e-8,
                "case {case} (n={n}, l={l}, m={m}, C={c:.3e}): solver {a} vs oracle {b}"
            );
        }

        // The two closed-form branches agree on predictions.
        let gram = h.dot(&h.t());
        let normal = h.t().dot(&h);
        let beta_g =
            solve_beta_with_gram(&gram, h.view(), t.view(), c, LsBranch::Gram).expect("gram");
        let beta_n =
            solve_beta_with_gram(&normal, h.view(), t.view(), c, LsBranch::Normal).expect("normal");
        let pred_g = h.dot(&beta_g);
        let pred_n = h.dot(&beta_n);
        for (a, b) in pred_g.iter().zip(pred_n.iter()) {
            assert!(
                rel_err(*a, *b) < 1e-8,
                "case {case}: branch predictions disagree: {a} vs {b}"
            );
        }
    }

    assert!(gram_branch_seen >= 10 && normal_branch_seen >= 10, "both branches exercised");
    assert!(t0.elapsed().as_secs_f64() < 10.0, "criterion 2 must finish in under 10 s");
}

// ---------------------------------------------------------------------------
// Criterion 3: gradient correctness by finite differences
// ---------------------------------------------------------------------------

fn identity_normalizer(m: usize) -> Normalizer {
    Normalizer {
        mins: vec![0.0; m],
        maxs: vec![1.0; m],
    }
}

fn fd_record() -> PreprocessRecord {
    PreprocessRecord {
        blob: BlobResult {
            bbox: Bbox {
                x0: 0,
                y0: 0,
                w: 8,
                h: 8,
            },
            threshold: 0.0,
            cob: [4.0, 4.0],
        },
        gamma: 128,
        alpha_u: 0,
        alpha_v: 0,
        noise_applied: false,
        seed: 0,
    }
}

fn fd_sample(rng: &mut ChaCha12Rng, side: usize) -> S2Sample {
    let image = GrayImage::from_fn(side, side, |_, _| rng.random_range(0.0f32..1.0f32));
    let labels = LabelSet::DeltaRho {
        delta: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        rho: rng.random_range(0.1..1.0),
    };
    S2Sample {
        image,
        labels,
        record: fd_record(),
    }
}

/// Point of maximum clearance from a sorted value set within a symmetric
/// window, used to shift pre-activations away from kinks.
fn best_gap_point(sorted: &[f64], half_window: f64) -> f64 {
    let mut cands = vec![-half_window, half_window];
    for w in sorted.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if mid.abs() <= half_window {
            cands.push(mid);
        }
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for p in cands {
        let clearance = sorted
            .iter()
            .fold(f64::INFINITY, |m, v| m.min((v - p).abs()));
        if clearance > best.0 {
            best = (clearance, p);
        }
    }
    best.1
}

/// Collects every pre-activation value of layer `li` per output channel.
fn layer_pre_values(
    params: &ModelParams,
    spec: &ArchSpec,
    batch: &[S2Sample],
    li: usize,
) -> Vec<Vec<f64>> {
    let mut per_channel = vec![Vec::new(); params.layers[li].c_out()];
    for s in batch {
        let mut t = Tensor3::from_gray(&s.image);
        for (i, layer) in params.layers.iter().enumerate() {
            let pre = conv2d_same(&t, layer).unwrap();
            if i == li {
                for ch in 0..pre.channels() {
                    for p in 0..pre.data.nrows() {
                        per_channel[ch].push(pre.data[(p, ch)]);
                    }
                }
                break;
            }
            t = pool2(&activate(&pre, spec.activation), spec.pooling).unwrap();
        }
    }
    per_channel
}

/// Shifts each bias channel to the point of maximum kink clearance so the
/// finite-difference oracle stays valid at every coordinate.
fn nudge_biases(params: &mut ModelParams, spec: &ArchSpec, batch: &[S2Sample]) {
    for li in 0..params.layers.len() {
        let per_channel = layer_pre_values(params, spec, batch, li);
        for (ch, vals) in per_channel.into_iter().enumerate() {
            let mut sorted = vals;
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            params.layers[li].bias[ch] -= best_gap_point(&sorted, 0.4);
        }
    }
}

/// Returns the smallest |pre-activation| across layers and whether every
/// max-pool window keeps its winner under FD-sized perturbations.
fn kink_clearances(params: &ModelParams, spec: &ArchSpec, batch: &[S2Sample]) -> (f64, bool) {
    let mut min_pre = f64::INFINITY;
    let mut windows_ok = true;
    for s in batch {
        let mut t = Tensor3::from_gray(&s.image);
        for layer in &params.layers {
            let pre = conv2d_same(&t, layer).unwrap();
            for v in pre.data.iter() {
                min_pre = min_pre.min(v.abs());
            }
            let act = activate(&pre, spec.activation);
            if spec.pooling == Pooling::Max {
                let live = |p: f64| match spec.activation {
                    Activation::Relu => p > 0.0,
                    Activation::NRelu => p < 0.0,
                    Activation::Tanh | Activation::None => true,
                };
                let (h, w, c) = (act.height(), act.width(), act.channels());
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let base = (2 * oy) * w + 2 * ox;
                        let idx = [base, base + 1, base + w, base + w + 1];
                        for ch in 0..c {
                            let a: Vec<f64> = idx.iter().map(|&i| act.data[(i, ch)]).collect();
                            let p: Vec<f64> = idx.iter().map(|&i| pre.data[(i, ch)]).collect();
                            let mut win = 0usize;
                            for k in 1..4 {
                                if a[k] > a[win] {
                                    win = k;
                                }
                            }
                            for k in 0..4 {
                                if k == win {
                                    continue;
                                }
                                if a[win] == a[k] {
                                    if live(p[win]) || live(p[k]) {
                                        windows_ok = false;
                                    }
                                } else if live(p[win])
                                    && live(p[k])
                                    && (p[win] - p[k]).abs() <= 2e-3
                                {
                                    windows_ok = false;
                                }
                            }
                        }
                    }
                }
            }
            t = pool2(&act, spec.pooling).unwrap();
        }
    }
    (min_pre, windows_ok)
}

#[test]
fn criterion_3_gradient_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let batch: Vec<S2Sample> = (0..3).map(|_| fd_sample(&mut rng, 8)).collect();
    let norm = identity_normalizer(3);
    let step = 1e-4;

    for act in Activation::ALL {
        for pool in Pooling::ALL {
            let spec = ArchSpec::new(2, WeightDist::Uniform, act, pool, 3);
            let mut chosen = None;
            for seed in 0..500u64 {
                let mut p = init_kernels(&spec, 2000 + seed);
                nudge_biases(&mut p, &spec, &batch);
                let (min_pre, ok) = kink_clearances(&p, &spec, &batch);
                if min_pre >= 3e-3 && ok {
                    chosen = Some(p);
                    break;
                }
            }
            let mut params =
                chosen.unwrap_or_else(|| panic!("no kink-clear seed for {act:?}/{pool:?}"));
            let mut head_rng = ChaCha12Rng::seed_from_u64(9);
            let probe = Tensor3::from_gray(&batch[0].image);
            let l = encode(&probe, &params, &spec).unwrap().len();
            params.head = Some(HeadParams {
                beta: Array2::from_shape_fn((l, 3), |_| head_rng.random_range(-0.3..0.3)),
                beta0: Some(Array1::from_shape_fn(3, |_| head_rng.random_range(-0.3..0.3))),
            });

            let (_, grads) = loss_and_grad(&batch, &params, &spec, &norm).unwrap();
            let loss_at = |p: &ModelParams| eval_loss(&batch, p, &spec, &norm).unwrap();
            let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
                let fd = (plus - minus) / (2.0 * step);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < 1e-3,
                    "{what}: analytic {analytic} vs fd {fd} ({act:?}/{pool:?})"
                );
            };

            for li in 0..params.layers.len() {
                for idx in 0..params.layers[li].kernels.len() {
                    let (r, c) = (
                        idx / params.layers[li].kernels.ncols(),
                        idx % params.layers[li].kernels.ncols(),
                    );
                    let mut p = params.clone();
                    p.layers[li].kernels[(r, c)] += step;
                    let plus = loss_at(&p);
                    p.layers[li].kernels[(r, c)] -= 2.0 * step;
                    let minus = loss_at(&p);
                    check(
                        grads.layers[li].kernels[(r, c)],
                        plus,
                        minus,
                        &format!("layer {li} kernel {r},{c}"),
                    );
                }
                for b in 0..params.layers[li].bias.len() {
                    let mut p = params.clone();
                    p.layers[li].bias[b] += step;
                    let plus = loss_at(&p);
                    p.layers[li].bias[b] -= 2.0 * step;
                    let minus = loss_at(&p);
                    check(
                        grads.layers[li].bias[b],
                        plus,
                        minus,
                        &format!("layer {li} bias {b}"),
                    );
                }
            }
            let head = params.head.as_ref().unwrap();
            for r in 0..head.beta.nrows() {
                for c in 0..head.beta.ncols() {
                    let mut p = params.clone();
                    p.head.as_mut().unwrap().beta[(r, c)] += step;
                    let plus = loss_at(&p);
                    p.head.as_mut().unwrap().beta[(r, c)] -= 2.0 * step;
                    let minus = loss_at(&p);
                    check(grads.beta[(r, c)], plus, minus, &format!("beta {r},{c}"));
                }
            }
            for b in 0..3 {
                let mut p = params.clone();
                *p.head.as_mut().unwrap().beta0.as_mut().unwrap().get_mut(b).unwrap() += step;
                let plus = loss_at(&p);
                *p.head.as_mut().unwrap().beta0.as_mut().unwrap().get_mut(b).unwrap() -=
                    2.0 * step;
                let minus = loss_at(&p);
                check(grads.beta0[b], plus, minus, &format!("beta0 {b}"));
            }
        }
    }

    assert!(t0.elapsed().as_secs_f64() < 60.0, "criterion 3 must finish in under 60 s");
}

// ---------------------------------------------------------------------------
// Criterion 4: preprocessing closure on drawn blobs
// ---------------------------------------------------------------------------

/// Draws a shaded ellipse blob on a dark canvas. Centers and axes are chosen
/// so bounding boxes span both the 128 and 256 pad sizes.
fn drawn_blob(rng: &mut ChaCha12Rng) -> GrayImage {
    let cu = rng.random_range(70.0..186.0);
    let cv = rng.random_range(70.0..186.0);
    let a: f64 = rng.random_range(9.0..78.0);
    let b = rng.random_range(7.0..a.max(7.5));
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    GrayImage::from_fn(256, 256, |x, y| {
        let dx = x as f64 - cu;
        let dy = y as f64 - cv;
        let u = (c * dx + s * dy) / a;
        let v = (-s * dx + c * dy) / b;
        let r2 = u * u + v * v;
        if r2 <= 1.0 {
            (0.35 + 0.6 * (1.0 - r2)) as f32
        } else {
            0.0
        }
    })
}

#[test]
fn criterion_4_preprocessing_closure() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let mut gammas_seen = std::collections::BTreeSet::new();

    for i in 0..500 {
        let image = drawn_blob(&mut rng);
        // Cycle the label shapes so every spatial-scaling rule is exercised.
        let labels = match i % 3 {
            0 => LabelSet::DeltaRho {
                delta: [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)],
                rho: rng.random_range(5.0..30.0),
            },
            1 => LabelSet::Spherical {
                frame: Frame::AS,
                phi1_deg: rng.random_range(-180.0..180.0),
                phi2_deg: rng.random_range(-45.0..45.0),
                rho: rng.random_range(5.0..30.0),
            },
            _ => LabelSet::Cartesian {
                frame: Frame::W,
                pos: [
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                ],
            },
        };

        let sample = preprocess_image(&image, &labels, 9000 + i as u64, None)
            .unwrap_or_else(|e| panic!("sample {i}: {e}"));
        let record = &sample.record;
        gammas_seen.insert(record.gamma);

        // Label round trip through the S2 scaling is exact to 1e-9.
        let back = invert_labels(&sample.labels, record);
        assert!(
            back.max_abs_diff(&labels) <= 1e-9,
            "sample {i}: label round trip drift {}",
            back.max_abs_diff(&labels)
        );

        // Re-running the blob analysis on the S2 image lands within 1.5 px
        // of the transformed CoB.
        let threshold = celmnav::preprocess::otsu_threshold(&sample.image);
        let blob2 = celmnav::preprocess::blob_analysis(&sample.image, threshold)
            .unwrap_or_else(|e| panic!("sample {i} S2 blob: {e}"));
        let expect = record.cob_s2();
        let dist = (blob2.cob[0] - expect[0]).hypot(blob2.cob[1] - expect[1]);
        assert!(dist <= 1.5, "sample {i}: S2 CoB moved {dist:.3} px");

        // Gamma is the smallest admissible pad size and the pad offsets
        // stay inside their bounds.
        let side = record.blob.bbox.w.max(record.blob.bbox.h);
        assert_eq!(record.gamma, select_gamma(side).unwrap(), "sample {i}: gamma");
        for g in GAMMA_CHOICES {
            if g >= side {
                assert!(record.gamma <= g, "sample {i}: gamma {} not minimal", record.gamma);
                break;
            }
        }
        assert!(
            record.alpha_u <= record.gamma - record.blob.bbox.w
                && record.alpha_v <= record.gamma - record.blob.bbox.h,
            "sample {i}: pad offsets out of bounds"
        );
    }

    assert!(
        gammas_seen.len() >= 2,
        "blob sizes must exercise more than one pad size, saw {gammas_seen:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: geometric closure through all five strategies
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_geometric_closure() {
    let d = desk();
    let strategies = [
        LabelStrategy::DeltaRho,
        LabelStrategy::Spherical(Frame::W),
        LabelStrategy::Spherical(Frame::AS),
        LabelStrategy::Cartesian(Frame::W),
        LabelStrategy::Cartesian(Frame::AS),
    ];
    let camera = &d.manifest.meta.camera;
    let phase = d.manifest.meta.body.rotation_phase_rad;

    for strategy in strategies {
        let mut pass = 0usize;
        let total = d.manifest.records.len();
        for (i, rec) in d.manifest.records.iter().enumerate() {
            let image = GrayImage::load_png(&d.manifest.image_path(rec)).expect("image");
            let labels = rec.truth.labels_for(strategy);
            let sample = preprocess_image(&image, &labels, sample_seed(MASTER_SEED, rec.idx), None)
                .expect("preprocess");
            let ctx = ReconstructionContext {
                camera,
                q_cam_to_w: rec.truth.quaternion(),
                rotation_phase_rad: phase,
            };
            let est =
                reconstruct_position(&sample.labels, &sample.record, &ctx, MethodTag::Celm, i);
            let p = rec.truth.position_w;
            let err = ((est.p_est[0] - p[0]).powi(2)
                + (est.p_est[1] - p[1]).powi(2)
                + (est.p_est[2] - p[2]).powi(2))
            .sqrt();
            let eps_n = 100.0 * err / rec.truth.rho_km;
            if eps_n < 0.1 {
                pass += 1;
            }
        }
        let frac = pass as f64 / total as f64;
        assert!(
            frac >= 0.99,
            "strategy {}: only {pass}/{total} samples close within eps_n < 0.1",
            strategy.tag()
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end learning sanity at desk scale
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_end_to_end_learning_sanity() {
    let d = desk();
    let stage_total = d.render_s + d.prep_s + d.search_s;
    assert!(
        stage_total < 900.0,
        "desk stages took {stage_total:.1} s (render {:.1} + prep {:.1} + search {:.1})",
        d.render_s,
        d.prep_s,
        d.search_s
    );
    assert_eq!(d.outcome.manifest.records.len(), 24, "one record per desk spec");
    assert!(d.outcome.manifest.records.iter().all(|r| r.ok));
    assert!(
        d.baseline_eps >= 3.0 * d.outcome.test_eps_n,
        "selected CELM test eps_n {:.3} not 3x better than baseline {:.3}",
        d.outcome.test_eps_n,
        d.baseline_eps
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: speed ordering between CELM and CNN training
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_speed_ordering() {
    let d = desk();
    let stage = cnn_stage();
    let key = d.outcome.best_spec.key();

    let celm_wall = stage
        .manifest
        .records
        .iter()
        .find(|r| r.method == MethodTag::Celm && r.spec_key == key && r.ok)
        .expect("CELM record for the selected spec")
        .wall_s;
    let cnn_walls: Vec<f64> = stage
        .manifest
        .records
        .iter()
        .filter(|r| r.method == MethodTag::Cnn && r.spec_key == key && r.ok)
        .map(|r| r.wall_s)
        .collect();
    assert_eq!(cnn_walls.len(), CnnGrid::desk().total_cases(), "desk CNN cases recorded");

    let min_cnn = cnn_walls.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        min_cnn >= 20.0 * celm_wall,
        "CNN wall {min_cnn:.1} s is only {:.1}x the CELM wall {celm_wall:.1} s on {key}",
        min_cnn / celm_wall
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: methodology reproduction (grid sizes, hybrid grouping)
// ---------------------------------------------------------------------------

fn cart_to_sph(p: &[f64; 3]) -> [f64; 3] {
    let rho = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let phi2 = (p[2] / rho).asin().to_degrees();
    let phi1 = p[1].atan2(p[0]).to_degrees();
    [phi1, phi2, rho]
}

fn synthetic_split(
    strategy: LabelStrategy,
    n: usize,
    camera: &CameraModel,
    phase: f64,
    rng: &mut ChaCha12Rng,
) -> PreparedSplit {
    let mut samples = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    let rot_w_to_as = Rotation3::from_axis_angle(&Vector3::z_axis(), -phase);
    for _ in 0..n {
        let rho = rng.random_range(4.0..7.0);
        let phi1: f64 = rng.random_range(-179.0..179.0);
        let phi2: f64 = rng.random_range(-60.0..60.0);
        let position_w = spherical_to_cartesian(phi1, phi2, rho);
        let p = Vector3::new(position_w[0], position_w[1], position_w[2]);
        let q: UnitQuaternion<f64> = camera_attitude(&p);
        let p_as = rot_w_to_as * p;
        let position_as = [p_as.x, p_as.y, p_as.z];
        let cof = camera.principal_point();
        let cob = [
            cof[0] + rng.random_range(-20.0..20.0),
            cof[1] + rng.random_range(-20.0..20.0),
        ];
        let truth = GroundTruth {
            position_w,
            position_as,
            sph_w: [phi1, phi2, rho],
            sph_as: cart_to_sph(&position_as),
            cob,
            cof,
            delta: [cof[0] - cob[0], cof[1] - cob[1]],
            rho_km: rho,
            q_cam_to_w: [q.w, q.i, q.j, q.k],
            sun_w: [1.0, 0.0, 0.0],
        };
        let labels = truth.labels_for(strategy);
        let image = GrayImage::from_fn(128, 128, |_, _| rng.random_range(0.0f32..1.0f32));
        let record = PreprocessRecord {
            blob: BlobResult {
                bbox: Bbox {
                    x0: 0,
                    y0: 0,
                    w: 128,
                    h: 128,
                },
                threshold: 0.1,
                cob,
            },
            gamma: 128,
            alpha_u: 0,
            alpha_v: 0,
            noise_applied: false,
            seed: 0,
        };
        samples.push(S2Sample {
            image,
            labels,
            record,
        });
        truths.push(truth);
    }
    PreparedSplit { samples, truths }
}

fn synthetic_dataset(strategy: LabelStrategy, name: &str, seed: u64) -> PreparedDataset {
    let camera = CameraModel::new(10.0, 1024);
    let phase = 0.3;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let train = synthetic_split(strategy, 6, &camera, phase, &mut rng);
    let val = synthetic_split(strategy, 2, &camera, phase, &mut rng);
    let test = synthetic_split(strategy, 2, &camera, phase, &mut rng);
    PreparedDataset {
        name: name.to_string(),
        strategy,
        camera,
        rotation_phase_rad: phase,
        train,
        val,
        test,
    }
}

fn untrained_checkpoint(ds: &PreparedDataset, sp: &ArchSpec, seed: u64, val_loss: f64) -> Checkpoint {
    let mut params = init_kernels(sp, seed);
    let probe = Tensor3::from_gray(&ds.train.samples[0].image);
    let l = encode(&probe, &params, sp).unwrap().len();
    params.head = Some(init_head(l, ds.strategy.output_size(), seed));
    Checkpoint {
        params,
        epoch: 0,
        val_loss,
        normalizer: identity_normalizer(ds.strategy.output_size()),
    }
}

#[test]
fn criterion_8_methodology_reproduction() {
    // Architecture grid: 120 specs, 360 runs at three seeds.
    let specs = enumerate_specs(LabelStrategy::DeltaRho);
    assert_eq!(specs.len(), 120, "spec grid size");
    let keys: std::collections::BTreeSet<String> = specs.iter().map(|s| s.key()).collect();
    assert_eq!(keys.len(), 120, "spec keys are distinct");
    assert_eq!(specs.len() * 3, 360, "runs at three seeds");

    // CNN bootstrap grid: 45 cases.
    assert_eq!(CnnGrid::paper().total_cases(), 45, "CNN grid size");

    // Hybrid encoder sharing: 4 bodies x 5 strategies = 20 datasets collapse
    // onto exactly 3 donor encoders, one per reference-frame group.
    let strategies = [
        LabelStrategy::DeltaRho,
        LabelStrategy::Spherical(Frame::AS),
        LabelStrategy::Spherical(Frame::W),
        LabelStrategy::Cartesian(Frame::AS),
        LabelStrategy::Cartesian(Frame::W),
    ];
    let mut datasets = Vec::new();
    let mut idx = 0u64;
    for body in 0..4u64 {
        for strategy in strategies {
            let name = format!("body{body}-{}", strategy.tag());
            datasets.push(synthetic_dataset(strategy, &name, 100 + idx));
            idx += 1;
        }
    }
    let spec_of = |ds: &PreparedDataset| {
        ArchSpec::new(
            1,
            WeightDist::Uniform,
            Activation::Tanh,
            Pooling::Mean,
            ds.strategy.output_size(),
        )
    };
    // Distinct validation losses make the per-group winner unambiguous.
    let checkpoints: Vec<Checkpoint> = datasets
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            untrained_checkpoint(ds, &spec_of(ds), 500 + i as u64, 0.1 + ((i * 7) % 20) as f64 * 0.013)
        })
        .collect();
    let entries: Vec<HybridInput<'_>> = datasets
        .iter()
        .zip(&checkpoints)
        .map(|(ds, ckpt)| HybridInput {
            dataset: ds,
            spec: spec_of(ds),
            checkpoint: Some(ckpt),
        })
        .collect();

    let builds = build_hybrids(&entries).expect("hybrid construction");
    assert_eq!(builds.len(), 20);

    // Expected donor per group: strict minimum validation loss.
    let group_of = |s: LabelStrategy| s.frame_group();
    let mut expect: std::collections::BTreeMap<u8, usize> = std::collections::BTreeMap::new();
    for (i, (ds, ckpt)) in datasets.iter().zip(&checkpoints).enumerate() {
        let g = match group_of(ds.strategy) {
            FrameGroup::Observables => 0u8,
            FrameGroup::As => 1,
            FrameGroup::W => 2,
        };
        let cur = expect.entry(g).or_insert(i);
        if ckpt.val_loss < checkpoints[*cur].val_loss {
            *cur = i;
        }
    }

    let mut donors = std::collections::BTreeSet::new();
    for (i, b) in builds.iter().enumerate() {
        donors.insert(b.donor);
        let own_group = group_of(datasets[i].strategy);
        let donor_group = group_of(datasets[b.donor].strategy);
        assert_eq!(own_group, donor_group, "dataset {i} borrowed across groups");
        let g = match own_group {
            FrameGroup::Observables => 0u8,
            FrameGroup::As => 1,
            FrameGroup::W => 2,
        };
        assert_eq!(b.donor, expect[&g], "dataset {i} donor");
    }
    assert_eq!(donors.len(), 3, "exactly three shared encoders");
}

// ---------------------------------------------------------------------------
// Criterion 9: report artifact regeneration from desk-scale runs
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_report_artifact_regeneration() {
    let d = desk();
    let spec = &d.outcome.best_spec;
    let fit = &d.outcome.fit;

    let h_test = assemble_h(&d.prepared.test.samples, &d.outcome.params, spec).expect("encode");
    let preds = predict_batch(h_test.view(), &fit.beta, &fit.normalizer, d.prepared.strategy)
        .expect("predict");
    let celm_rows = metric_rows_for_predictions(
        &preds,
        &d.prepared.test,
        &d.prepared.camera,
        d.prepared.rotation_phase_rad,
        MethodTag::Celm,
    )
    .expect("celm metrics");

    let baseline = mean_label_prediction(&d.prepared.train).expect("baseline");
    let base_rows = metric_rows_for_predictions(
        &vec![baseline; d.prepared.test.len()],
        &d.prepared.test,
        &d.prepared.camera,
        d.prepared.rotation_phase_rad,
        MethodTag::Celm,
    )
    .expect("baseline metrics");

    let tables = vec![
        MetricTable {
            method: "celm".into(),
            dataset: d.prepared.name.clone(),
            rows: celm_rows,
        },
        MetricTable {
            method: "baseline".into(),
            dataset: d.prepared.name.clone(),
            rows: base_rows,
        },
    ];

    let out = TempDir::new().expect("report dir");
    let files = emit_report(&tables, out.path()).expect("emit report");

    let expected = [
        "quantiles_eps_n.csv",
        "mean_eps_n.csv",
        "best_method_share.csv",
        "hist_eps_cof.csv",
        "hist_eps_rho.csv",
        "ellipses_cof.csv",
        "cam_axis_errors.csv",
        "series.json",
    ];
    for name in expected {
        let path = out.path().join(name);
        assert!(
            files.iter().any(|f| f == &path),
            "report did not list {name}"
        );
        assert!(path.is_file(), "missing report artifact {name}");
        let body = std::fs::read_to_string(&path).expect("readable artifact");
        assert!(!body.trim().is_empty(), "{name} is empty");
        if name.ends_with(".csv") {
            let mut lines = body.lines();
            let header = lines.next().unwrap_or_default();
            assert!(header.contains(','), "{name} header not CSV: {header}");
            assert!(lines.next().is_some(), "{name} has no data rows");
        } else {
            let parsed: serde_json::Value = serde_json::from_str(&body).expect("series.json parses");
            assert!(parsed.is_object() || parsed.is_array(), "series.json shape");
        }
    }
}
