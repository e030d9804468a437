//! Prepared (preprocessed) datasets: batch preprocessing of rendered
//! datasets into 128x128 training tensors, on-disk persistence, and the
//! mean-eps_n scoring used for model selection.
//!
//! A prepared split is stored as four files so each piece stays inspectable:
//! `images.f32` (count x 128 x 128 little-endian floats), `labels.csv`,
//! `records.csv` (one preprocessing record per row: bounding box, gamma,
//! pad offsets, S0 CoB, seed), and `truths.jsonl`. Preparation is
//! deterministic given the rendered manifest and a master seed.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::imagery::{CameraModel, DatasetManifest, GroundTruth};
use crate::labels::{LabelSet, LabelStrategy};
use crate::navmetrics::{
    compute_metrics, reconstruct_position, MetricRow, PositionEstimate, ReconstructionContext,
};
use crate::preprocess::{
    preprocess_image, Bbox, BlobResult, NoiseSpec, PreprocessRecord, S2Sample, TARGET_SIDE,
};
use crate::search::MethodTag;

/// One preprocessed split: S2 samples plus their ground truths, aligned.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub samples: Vec<S2Sample>,
    pub truths: Vec<GroundTruth>,
}

/// A fully prepared dataset with the context needed for reconstruction.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub strategy: LabelStrategy,
    pub camera: CameraModel,
    /// AS-to-W rotation angle of the body, needed to bring AS-frame labels
    /// back into W during evaluation.
    pub rotation_phase_rad: f64,
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
}

/// Deterministic per-sample seed derived from the master seed (splitmix64
/// finalizer over the sample index).
pub fn sample_seed(master: u64, idx: usize) -> u64 {
    let mut z = master ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the preprocessing pipeline over a contiguous index range of a
/// rendered dataset.
pub fn prepare_range(
    manifest: &DatasetManifest,
    start: usize,
    count: usize,
    master_seed: u64,
    noise: Option<NoiseSpec>,
) -> Result<PreparedSplit> {
    if start + count > manifest.records.len() {
        return Err(Error::invalid(format!(
            "range {start}..{} exceeds {} rendered samples",
            start + count,
            manifest.records.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let mut truths = Vec::with_capacity(count);
    for rec in &manifest.records[start..start + count] {
        let image = GrayImage::load_png(&manifest.image_path(rec))?;
        let sample = preprocess_image(&image, &rec.labels, sample_seed(master_seed, rec.idx), noise)?;
        samples.push(sample);
        truths.push(rec.truth.clone());
    }
    Ok(PreparedSplit { samples, truths })
}

/// Prepares train/val/test splits (taken in manifest order) from a rendered
/// dataset.
pub fn prepare_dataset(
    manifest: &DatasetManifest,
    split: [usize; 3],
    master_seed: u64,
    noise: Option<NoiseSpec>,
) -> Result<PreparedDataset> {
    let strategy = LabelStrategy::from_tag(&manifest.meta.strategy)?;
    let [n_train, n_val, n_test] = split;
    let train = prepare_range(manifest, 0, n_train, master_seed, noise)?;
    let val = prepare_range(manifest, n_train, n_val, master_seed, noise)?;
    let test = prepare_range(manifest, n_train + n_val, n_test, master_seed, noise)?;
    Ok(PreparedDataset {
        name: manifest
            .dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        strategy,
        camera: manifest.meta.camera.clone(),
        rotation_phase_rad: manifest.meta.body.rotation_phase_rad,
        train,
        val,
        test,
    })
}

fn label_header(strategy: LabelStrategy) -> &'static [&'static str] {
    match strategy {
        LabelStrategy::DeltaRho => &["idx", "delta_u", "delta_v", "rho"],
        LabelStrategy::Spherical(_) => &["idx", "phi1_deg", "phi2_deg", "rho"],
        LabelStrategy::Cartesian(_) => &["idx", "x", "y", "z"],
    }
}

fn label_row(labels: &LabelSet) -> Vec<f64> {
    match labels {
        LabelSet::DeltaRho { delta, rho } => vec![delta[0], delta[1], *rho],
        LabelSet::Spherical {
            phi1_deg,
            phi2_deg,
            rho,
            ..
        } => vec![*phi1_deg, *phi2_deg, *rho],
        LabelSet::Cartesian { pos, .. } => pos.to_vec(),
    }
}

fn labels_from_row(strategy: LabelStrategy, row: &[f64]) -> LabelSet {
    match strategy {
        LabelStrategy::DeltaRho => LabelSet::DeltaRho {
            delta: [row[0], row[1]],
            rho: row[2],
        },
        LabelStrategy::Spherical(frame) => LabelSet::Spherical {
            frame,
            phi1_deg: row[0],
            phi2_deg: row[1],
            rho: row[2],
        },
        LabelStrategy::Cartesian(frame) => LabelSet::Cartesian {
            frame,
            pos: [row[0], row[1], row[2]],
        },
    }
}

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    strategy: String,
    count: usize,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Strategy of the stored labels. Panics on an empty split.
    pub fn strategy(&self) -> LabelStrategy {
        self.samples[0].labels.strategy()
    }

    /// Writes `images.f32`, `labels.csv`, `records.csv`, `truths.jsonl`,
    /// and `meta.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensor_path = dir.join("images.f32");
        {
            let file =
                std::fs::File::create(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
            let mut w = std::io::BufWriter::new(file);
            for s in &self.samples {
                for &p in s.image.pixels() {
                    w.write_all(&p.to_le_bytes())
                        .map_err(|e| Error::io(&tensor_path, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&tensor_path, e))?;
        }

        let labels_path = dir.join("labels.csv");
        {
            let mut w = csv::Writer::from_writer(
                std::fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?,
            );
            w.write_record(label_header(self.strategy()))?;
            for (i, s) in self.samples.iter().enumerate() {
                let mut row = vec![i.to_string()];
                row.extend(label_row(&s.labels).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io(&labels_path, e))?;
        }

        let records_path = dir.join("records.csv");
        {
            let mut w = csv::Writer::from_writer(
                std::fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?,
            );
            w.write_record([
                "idx",
                "bbox_x0",
                "bbox_y0",
                "bbox_w",
                "bbox_h",
                "threshold",
                "cob_u",
                "cob_v",
                "gamma",
                "alpha_u",
                "alpha_v",
                "noise_applied",
                "seed",
            ])?;
            for (i, s) in self.samples.iter().enumerate() {
                let r = &s.record;
                w.write_record([
                    i.to_string(),
                    r.blob.bbox.x0.to_string(),
                    r.blob.bbox.y0.to_string(),
                    r.blob.bbox.w.to_string(),
                    r.blob.bbox.h.to_string(),
                    r.blob.threshold.to_string(),
                    r.blob.cob[0].to_string(),
                    r.blob.cob[1].to_string(),
                    r.gamma.to_string(),
                    r.alpha_u.to_string(),
                    r.alpha_v.to_string(),
                    r.noise_applied.to_string(),
                    r.seed.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&records_path, e))?;
        }

        let truths_path = dir.join("truths.jsonl");
        {
            let file =
                std::fs::File::create(&truths_path).map_err(|e| Error::io(&truths_path, e))?;
            let mut w = std::io::BufWriter::new(file);
            for t in &self.truths {
                serde_json::to_writer(&mut w, t)?;
                w.write_all(b"\n").map_err(|e| Error::io(&truths_path, e))?;
            }
            w.flush().map_err(|e| Error::io(&truths_path, e))?;
        }

        let meta_path = dir.join("meta.json");
        let meta = SplitMeta {
            strategy: self.strategy().tag().to_string(),
            count: self.len(),
        };
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: SplitMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        let strategy = LabelStrategy::from_tag(&meta.strategy)?;
        let side = TARGET_SIDE;
        let px_per_image = side * side;

        let tensor_path = dir.join("images.f32");
        let mut raw = Vec::new();
        std::fs::File::open(&tensor_path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::io(&tensor_path, e))?;
        if raw.len() != meta.count * px_per_image * 4 {
            return Err(Error::ShapeMismatch(format!(
                "tensor file holds {} bytes, expected {}",
                raw.len(),
                meta.count * px_per_image * 4
            )));
        }
        let mut images = Vec::with_capacity(meta.count);
        for i in 0..meta.count {
            let mut pixels = Vec::with_capacity(px_per_image);
            let base = i * px_per_image * 4;
            for j in 0..px_per_image {
                let o = base + j * 4;
                pixels.push(f32::from_le_bytes([
                    raw[o],
                    raw[o + 1],
                    raw[o + 2],
                    raw[o + 3],
                ]));
            }
            images.push(GrayImage::from_vec(side, side, pixels)?);
        }

        let labels_path = dir.join("labels.csv");
        let mut labels = Vec::with_capacity(meta.count);
        {
            let mut r = csv::Reader::from_path(&labels_path)?;
            for rec in r.records() {
                let rec = rec?;
                let row: Vec<f64> = rec
                    .iter()
                    .skip(1)
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::invalid(format!("labels.csv: {e}")))?;
                labels.push(labels_from_row(strategy, &row));
            }
        }

        let records_path = dir.join("records.csv");
        let mut records = Vec::with_capacity(meta.count);
        {
            let mut r = csv::Reader::from_path(&records_path)?;
            for rec in r.records() {
                let rec = rec?;
                let f = |i: usize| -> Result<f64> {
                    rec.get(i)
                        .ok_or_else(|| Error::invalid("records.csv: short row"))?
                        .parse()
                        .map_err(|e| Error::invalid(format!("records.csv: {e}")))
                };
                let u = |i: usize| -> Result<usize> { Ok(f(i)? as usize) };
                records.push(PreprocessRecord {
                    blob: BlobResult {
                        cob: [f(6)?, f(7)?],
                        bbox: Bbox {
                            x0: u(1)?,
                            y0: u(2)?,
                            w: u(3)?,
                            h: u(4)?,
                        },
                        threshold: f(5)?,
                    },
                    gamma: u(8)?,
                    alpha_u: u(9)?,
                    alpha_v: u(10)?,
                    noise_applied: rec.get(11) == Some("true"),
                    seed: rec
                        .get(12)
                        .ok_or_else(|| Error::invalid("records.csv: short row"))?
                        .parse()
                        .map_err(|e| Error::invalid(format!("records.csv: {e}")))?,
                });
            }
        }

        let truths_path = dir.join("truths.jsonl");
        let mut truths = Vec::with_capacity(meta.count);
        for line in std::fs::read_to_string(&truths_path)
            .map_err(|e| Error::io(&truths_path, e))?
            .lines()
        {
            if line.trim().is_empty() {
                continue;
            }
            truths.push(serde_json::from_str(line)?);
        }

        if images.len() != meta.count
            || labels.len() != meta.count
            || records.len() != meta.count
            || truths.len() != meta.count
        {
            return Err(Error::ShapeMismatch(format!(
                "split files disagree: {} images, {} labels, {} records, {} truths",
                images.len(),
                labels.len(),
                records.len(),
                truths.len()
            )));
        }
        let samples = images
            .into_iter()
            .zip(labels)
            .zip(records)
            .map(|((image, labels), record)| S2Sample {
                image,
                labels,
                record,
            })
            .collect();
        Ok(PreparedSplit { samples, truths })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMetaFile {
    name: String,
    strategy: String,
    camera: CameraModel,
    rotation_phase_rad: f64,
    split: [usize; 3],
}

impl PreparedDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save(&dir.join("train"))?;
        self.val.save(&dir.join("val"))?;
        self.test.save(&dir.join("test"))?;
        let meta = DatasetMetaFile {
            name: self.name.clone(),
            strategy: self.strategy.tag().to_string(),
            camera: self.camera.clone(),
            rotation_phase_rad: self.rotation_phase_rad,
            split: [self.train.len(), self.val.len(), self.test.len()],
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: DatasetMetaFile = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        Ok(PreparedDataset {
            name: meta.name,
            strategy: LabelStrategy::from_tag(&meta.strategy)?,
            camera: meta.camera,
            rotation_phase_rad: meta.rotation_phase_rad,
            train: PreparedSplit::load(&dir.join("train"))?,
            val: PreparedSplit::load(&dir.join("val"))?,
            test: PreparedSplit::load(&dir.join("test"))?,
        })
    }

    /// Reconstruction context pieces shared by every sample of the dataset.
    pub fn eval_context(&self) -> (&CameraModel, f64) {
        (&self.camera, self.rotation_phase_rad)
    }
}

/// Reconstructs positions from per-sample S2 label predictions and returns
/// the full metric rows against the split's truths.
pub fn metric_rows_for_predictions(
    predictions_s2: &[LabelSet],
    split: &PreparedSplit,
    camera: &CameraModel,
    rotation_phase_rad: f64,
    source: MethodTag,
) -> Result<Vec<MetricRow>> {
    if predictions_s2.len() != split.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} samples",
            predictions_s2.len(),
            split.len()
        )));
    }
    let estimates: Vec<PositionEstimate> = predictions_s2
        .iter()
        .zip(&split.samples)
        .zip(&split.truths)
        .enumerate()
        .map(|(i, ((labels, sample), truth))| {
            let ctx = ReconstructionContext {
                camera,
                q_cam_to_w: truth.quaternion(),
                rotation_phase_rad,
            };
            reconstruct_position(labels, &sample.record, &ctx, source, i)
        })
        .collect();
    compute_metrics(&estimates, &split.truths)
}

/// Mean eps_n of predictions over a split: the model-selection score.
pub fn mean_eps_n(
    predictions_s2: &[LabelSet],
    split: &PreparedSplit,
    camera: &CameraModel,
    rotation_phase_rad: f64,
) -> Result<f64> {
    let rows = metric_rows_for_predictions(
        predictions_s2,
        split,
        camera,
        rotation_phase_rad,
        MethodTag::Celm,
    )?;
    Ok(rows.iter().map(|r| r.eps_n).sum::<f64>() / rows.len() as f64)
}
