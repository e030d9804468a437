//! Experiment orchestration: CELM grid search, the CNN comparison runs,
//! and hybrid model construction.
//!
//! Every run appends a [`RunRecord`] to a per-dataset [`ExperimentManifest`]
//! that persists as `manifest.jsonl` plus a `records.csv` mirror. Searches
//! are resumable: a record keyed by (method, spec, seed, batch, lr) is never
//! recomputed, and selections are recomputed from records alone so an
//! offline argmin over the CSV reproduces them exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archgen::{ArchSpec, BATCH_GRID, LR_GRID};
use crate::data::{mean_eps_n, sample_seed, PreparedDataset};
use crate::elm::{assemble_h, predict_batch, train_celm, CelmFit};
use crate::error::{Error, Result};
use crate::gd::{
    predict_split, train_cnn, train_hybrid, Checkpoint, TrainConfig, DESK_EPOCHS, PAPER_EPOCHS,
};
use crate::labels::FrameGroup;
use crate::neural::{init_kernels, ModelParams};

/// Which family produced a model or an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodTag {
    Celm,
    Cnn,
    Hcelm,
    Hcelm3,
}

impl MethodTag {
    pub const ALL: [MethodTag; 4] = [
        MethodTag::Celm,
        MethodTag::Cnn,
        MethodTag::Hcelm,
        MethodTag::Hcelm3,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MethodTag::Celm => "celm",
            MethodTag::Cnn => "cnn",
            MethodTag::Hcelm => "hcelm",
            MethodTag::Hcelm3 => "hcelm3",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown method tag '{tag}'")))
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which split supplies the CELM selection score. The default follows the
/// source methodology (test-set selection); `Val` is the methodologically
/// clean alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectOn {
    Test,
    Val,
}

/// One grid run: configuration, scores, timing, and outcome. Failed runs
/// keep their key and message so a restart does not retry them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: MethodTag,
    /// Position in the enumeration order of the grid; ties in score resolve
    /// to the smallest index (lexicographically earliest configuration).
    pub idx: usize,
    pub spec_key: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_star: Option<f64>,
    /// Validation metric: mean epsilon_n for closed-form heads, MSE loss
    /// for the CNN.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
    /// Mean epsilon_n on the test split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_eps_n: Option<f64>,
    pub wall_s: f64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub message: String,
}

/// Identity of a run within a manifest.
pub type RunKey = (MethodTag, String, u64, Option<usize>, Option<u64>);

impl RunRecord {
    pub fn key(&self) -> RunKey {
        (
            self.method,
            self.spec_key.clone(),
            self.seed,
            self.batch,
            self.lr.map(f64::to_bits),
        )
    }
}

/// Selected best run for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: MethodTag,
    pub idx: usize,
    pub spec_key: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub score: f64,
}

/// Per-dataset experiment ledger: every run record plus the selected best
/// per method, reproducible from the records alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub dataset: String,
    pub master_seed: u64,
    /// Spec keys of the search grid, in enumeration order.
    pub grid: Vec<String>,
    pub records: Vec<RunRecord>,
    /// Method tag -> selection.
    pub selected: BTreeMap<String, Selection>,
}

/// Line format of `manifest.jsonl`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Meta {
        dataset: String,
        master_seed: u64,
        grid: Vec<String>,
    },
    Record(RunRecord),
    Selected(Selection),
}

impl ExperimentManifest {
    pub fn new(dataset: impl Into<String>, master_seed: u64) -> Self {
        ExperimentManifest {
            dataset: dataset.into(),
            master_seed,
            grid: Vec::new(),
            records: Vec::new(),
            selected: BTreeMap::new(),
        }
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.jsonl")
    }

    pub fn records_path(dir: &Path) -> PathBuf {
        dir.join("records.csv")
    }

    pub fn find(&self, key: &RunKey) -> Option<&RunRecord> {
        self.records.iter().find(|r| &r.key() == key)
    }

    /// Inserts or replaces the record with the same key.
    pub fn upsert(&mut self, record: RunRecord) {
        let key = record.key();
        if let Some(slot) = self.records.iter_mut().find(|r| r.key() == key) {
            *slot = record;
        } else {
            self.records.push(record);
        }
    }

    /// Recomputes the best run of a method from the records: minimum score
    /// (val metric or test epsilon_n per `select_on`), ties resolved to the
    /// smallest grid index. `None` when no successful scored run exists.
    pub fn argmin(&self, method: MethodTag, select_on: SelectOn) -> Option<Selection> {
        let mut best: Option<(&RunRecord, f64)> = None;
        for r in self.records.iter().filter(|r| r.method == method && r.ok) {
            let score = match select_on {
                SelectOn::Test => r.test_eps_n,
                SelectOn::Val => r.val_metric,
            };
            let Some(score) = score else { continue };
            if !score.is_finite() {
                continue;
            }
            best = match best {
                None => Some((r, score)),
                Some((b, s)) => {
                    if score < s || (score == s && r.idx < b.idx) {
                        Some((r, score))
                    } else {
                        Some((b, s))
                    }
                }
            };
        }
        best.map(|(r, score)| Selection {
            method,
            idx: r.idx,
            spec_key: r.spec_key.clone(),
            seed: r.seed,
            batch: r.batch,
            lr: r.lr,
            score,
        })
    }

    /// Writes `manifest.jsonl` and the `records.csv` mirror.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Self::manifest_path(dir);
        let mut lines = Vec::with_capacity(self.records.len() + self.selected.len() + 1);
        lines.push(serde_json::to_string(&ManifestLine::Meta {
            dataset: self.dataset.clone(),
            master_seed: self.master_seed,
            grid: self.grid.clone(),
        })?);
        for r in &self.records {
            lines.push(serde_json::to_string(&ManifestLine::Record(r.clone()))?);
        }
        for s in self.selected.values() {
            lines.push(serde_json::to_string(&ManifestLine::Selected(s.clone()))?);
        }
        std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;

        let csv_path = Self::records_path(dir);
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "method",
            "idx",
            "spec",
            "seed",
            "batch",
            "lr",
            "c_star",
            "val_metric",
            "test_eps_n",
            "wall_s",
            "status",
            "message",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.method.tag().to_string(),
                r.idx.to_string(),
                r.spec_key.clone(),
                r.seed.to_string(),
                r.batch.map(|b| b.to_string()).unwrap_or_default(),
                opt(r.lr),
                opt(r.c_star),
                opt(r.val_metric),
                opt(r.test_eps_n),
                r.wall_s.to_string(),
                if r.ok { "ok" } else { "failed" }.to_string(),
                r.message.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }

    /// Loads a manifest from a run directory; `Ok(None)` when absent.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = Self::manifest_path(dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = ExperimentManifest::new("", 0);
        let mut saw_meta = false;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<ManifestLine>(line)? {
                ManifestLine::Meta {
                    dataset,
                    master_seed,
                    grid,
                } => {
                    out.dataset = dataset;
                    out.master_seed = master_seed;
                    out.grid = grid;
                    saw_meta = true;
                }
                ManifestLine::Record(r) => out.records.push(r),
                ManifestLine::Selected(s) => {
                    out.selected.insert(s.method.tag().to_string(), s);
                }
            }
        }
        if !saw_meta {
            return Err(Error::invalid(format!(
                "{} has no meta line",
                path.display()
            )));
        }
        Ok(Some(out))
    }
}

/// Mean test epsilon_n of a closed-form fit.
fn celm_test_score(
    ds: &PreparedDataset,
    params: &ModelParams,
    spec: &ArchSpec,
    fit: &CelmFit,
) -> Result<f64> {
    let h = assemble_h(&ds.test.samples, params, spec)?;
    let preds = predict_batch(h.view(), &fit.beta, &fit.normalizer, ds.test.strategy())?;
    mean_eps_n(&preds, &ds.test, &ds.camera, ds.rotation_phase_rad)
}

fn celm_single_run(
    ds: &PreparedDataset,
    spec: &ArchSpec,
    seed: u64,
) -> Result<(ModelParams, CelmFit, f64)> {
    let params = init_kernels(spec, seed);
    let fit = train_celm(
        &ds.train,
        &ds.val,
        &params,
        spec,
        &spec.c_grid,
        &ds.camera,
        ds.rotation_phase_rad,
    )?;
    let test = celm_test_score(ds, &params, spec, &fit)?;
    Ok((params, fit, test))
}

/// Result of a CELM grid search: the winning configuration materialized as
/// a trained model, plus the full manifest.
#[derive(Debug)]
pub struct CelmSearchOutcome {
    pub best_spec: ArchSpec,
    pub best_seed: u64,
    pub params: ModelParams,
    pub fit: CelmFit,
    pub test_eps_n: f64,
    pub selection: Selection,
    pub manifest: ExperimentManifest,
}

/// Grid-searches CELMs over `grid x seeds`, records every run, and selects
/// the best by minimum mean epsilon_n on the split named by `select_on`.
/// With an output directory the search persists after every run and resumes
/// past completed (spec, seed) records on restart. Individual failures are
/// recorded and skipped; only a fully failed search errors.
pub fn run_celm_search(
    ds: &PreparedDataset,
    grid: &[ArchSpec],
    seeds: &[u64],
    select_on: SelectOn,
    out_dir: Option<&Path>,
) -> Result<CelmSearchOutcome> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("search needs a nonempty grid and seed list"));
    }
    let mut manifest = match out_dir {
        Some(dir) => ExperimentManifest::load(dir)?
            .unwrap_or_else(|| ExperimentManifest::new(ds.name.clone(), seeds[0])),
        None => ExperimentManifest::new(ds.name.clone(), seeds[0]),
    };
    manifest.grid = grid.iter().map(|s| s.key()).collect();

    let mut idx = 0usize;
    for spec in grid {
        for &seed in seeds {
            let key: RunKey = (MethodTag::Celm, spec.key(), seed, None, None);
            if manifest.find(&key).is_some() {
                idx += 1;
                continue;
            }
            let t0 = Instant::now();
            let record = match celm_single_run(ds, spec, seed) {
                Ok((_, fit, test)) => RunRecord {
                    method: MethodTag::Celm,
                    idx,
                    spec_key: spec.key(),
                    seed,
                    batch: None,
                    lr: None,
                    c_star: Some(fit.c_star),
                    val_metric: Some(fit.val_score),
                    test_eps_n: Some(test),
                    wall_s: t0.elapsed().as_secs_f64(),
                    ok: true,
                    message: String::new(),
                },
                Err(e) => RunRecord {
                    method: MethodTag::Celm,
                    idx,
                    spec_key: spec.key(),
                    seed,
                    batch: None,
                    lr: None,
                    c_star: None,
                    val_metric: None,
                    test_eps_n: None,
                    wall_s: t0.elapsed().as_secs_f64(),
                    ok: false,
                    message: e.to_string().replace([',', '\n'], ";"),
                },
            };
            manifest.upsert(record);
            if let Some(dir) = out_dir {
                manifest.save(dir)?;
            }
            idx += 1;
        }
    }

    let selection = manifest
        .argmin(MethodTag::Celm, select_on)
        .ok_or(Error::AllRunsFailed)?;
    manifest
        .selected
        .insert(MethodTag::Celm.tag().to_string(), selection.clone());
    if let Some(dir) = out_dir {
        manifest.save(dir)?;
    }

    // Materialize the winner (deterministic retrain from its seed).
    let best_spec = grid
        .iter()
        .find(|s| s.key() == selection.spec_key)
        .ok_or_else(|| Error::invalid(format!("selected spec {} not in grid", selection.spec_key)))?
        .clone();
    let (params, fit, test_eps_n) = celm_single_run(ds, &best_spec, selection.seed)?;
    Ok(CelmSearchOutcome {
        best_spec,
        best_seed: selection.seed,
        params,
        fit,
        test_eps_n,
        selection,
        manifest,
    })
}

/// CI-sized CELM grid: 24 specs over d in 1..=3, two distributions, two
/// activations, both poolings, in the same lexicographic axis order as the
/// full enumeration.
pub fn desk_grid(strategy: crate::labels::LabelStrategy) -> Vec<ArchSpec> {
    use crate::neural::{Activation, Pooling, WeightDist};
    let n_o = strategy.output_size();
    let mut grid = Vec::with_capacity(24);
    for d in 1..=3 {
        for dist in [WeightDist::Uniform, WeightDist::Normal] {
            for act in [Activation::Relu, Activation::Tanh] {
                for pool in Pooling::ALL {
                    grid.push(ArchSpec::new(d, dist, act, pool, n_o));
                }
            }
        }
    }
    grid
}

/// Hyper-parameter grid for the CNN bootstrap stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnGrid {
    pub batches: Vec<usize>,
    pub lrs: Vec<f64>,
    pub runs: usize,
    pub epochs: usize,
}

impl CnnGrid {
    /// Full published grid: 3 batch sizes x 5 learning rates x 3 runs = 45
    /// cases at 300 epochs.
    pub fn paper() -> Self {
        CnnGrid {
            batches: BATCH_GRID.to_vec(),
            lrs: LR_GRID.to_vec(),
            runs: 3,
            epochs: PAPER_EPOCHS,
        }
    }

    /// Small CI-sized subset: 1 batch size x 2 learning rates x 1 run at 30
    /// epochs.
    pub fn desk() -> Self {
        CnnGrid {
            batches: vec![64],
            lrs: vec![1e-2, 1e-3],
            runs: 1,
            epochs: DESK_EPOCHS,
        }
    }

    pub fn total_cases(&self) -> usize {
        self.batches.len() * self.lrs.len() * self.runs
    }
}

/// Best CNN from a bootstrap stage.
#[derive(Debug)]
pub struct CnnOutcome {
    pub checkpoint: Checkpoint,
    pub config: TrainConfig,
    pub selection: Selection,
    pub test_eps_n: Option<f64>,
}

/// Trains the CNN grid on the winning CELM architecture and returns the
/// checkpoint with the lowest validation loss. Per-run failures (divergence
/// included) are recorded, not fatal. Appends records to `manifest`.
pub fn bootstrap_cnn(
    ds: &PreparedDataset,
    best_spec: &ArchSpec,
    grid: &CnnGrid,
    master_seed: u64,
    manifest: &mut ExperimentManifest,
    out_dir: Option<&Path>,
) -> Result<CnnOutcome> {
    if grid.total_cases() == 0 {
        return Err(Error::invalid("empty CNN grid"));
    }
    let mut in_memory: Option<(usize, Checkpoint, TrainConfig, Option<f64>)> = None;
    let mut idx = 0usize;
    for &batch in &grid.batches {
        for &lr in &grid.lrs {
            for _run in 0..grid.runs {
                let seed = sample_seed(master_seed, idx);
                let key: RunKey = (
                    MethodTag::Cnn,
                    best_spec.key(),
                    seed,
                    Some(batch),
                    Some(lr.to_bits()),
                );
                if manifest.find(&key).is_some() {
                    idx += 1;
                    continue;
                }
                let config = TrainConfig::new(batch, lr, grid.epochs, seed);
                let t0 = Instant::now();
                let record = match train_cnn(&ds.train, &ds.val, best_spec, &config) {
                    Ok((ckpt, _log)) => {
                        let test = if ds.test.is_empty() {
                            None
                        } else {
                            let preds = predict_split(
                                &ckpt.params,
                                best_spec,
                                &ckpt.normalizer,
                                &ds.test,
                            )?;
                            Some(mean_eps_n(
                                &preds,
                                &ds.test,
                                &ds.camera,
                                ds.rotation_phase_rad,
                            )?)
                        };
                        let rec = RunRecord {
                            method: MethodTag::Cnn,
                            idx,
                            spec_key: best_spec.key(),
                            seed,
                            batch: Some(batch),
                            lr: Some(lr),
                            c_star: None,
                            val_metric: Some(ckpt.val_loss),
                            test_eps_n: test,
                            wall_s: t0.elapsed().as_secs_f64(),
                            ok: true,
                            message: String::new(),
                        };
                        let better = match &in_memory {
                            None => true,
                            Some((_, best, _, _)) => ckpt.val_loss < best.val_loss,
                        };
                        if better {
                            in_memory = Some((idx, ckpt, config, test));
                        }
                        rec
                    }
                    Err(e) => RunRecord {
                        method: MethodTag::Cnn,
                        idx,
                        spec_key: best_spec.key(),
                        seed,
                        batch: Some(batch),
                        lr: Some(lr),
                        c_star: None,
                        val_metric: None,
                        test_eps_n: None,
                        wall_s: t0.elapsed().as_secs_f64(),
                        ok: false,
                        message: e.to_string().replace([',', '\n'], ";"),
                    },
                };
                manifest.upsert(record);
                if let Some(dir) = out_dir {
                    manifest.save(dir)?;
                }
                idx += 1;
            }
        }
    }

    let selection = manifest
        .argmin(MethodTag::Cnn, SelectOn::Val)
        .ok_or(Error::AllRunsFailed)?;
    manifest
        .selected
        .insert(MethodTag::Cnn.tag().to_string(), selection.clone());
    if let Some(dir) = out_dir {
        manifest.save(dir)?;
    }

    // Reuse the in-memory winner when it matches the selection; otherwise
    // (resumed search) retrain that configuration deterministically.
    let (checkpoint, config, test_eps_n) = match in_memory {
        Some((idx, ckpt, config, test)) if idx == selection.idx => (ckpt, config, test),
        _ => {
            let config = TrainConfig::new(
                selection
                    .batch
                    .ok_or_else(|| Error::invalid("cnn selection lacks batch size"))?,
                selection
                    .lr
                    .ok_or_else(|| Error::invalid("cnn selection lacks learning rate"))?,
                grid.epochs,
                selection.seed,
            );
            let (ckpt, _) = train_cnn(&ds.train, &ds.val, best_spec, &config)?;
            let test = if ds.test.is_empty() {
                None
            } else {
                let preds = predict_split(&ckpt.params, best_spec, &ckpt.normalizer, &ds.test)?;
                Some(mean_eps_n(
                    &preds,
                    &ds.test,
                    &ds.camera,
                    ds.rotation_phase_rad,
                )?)
            };
            (ckpt, config, test)
        }
    };
    Ok(CnnOutcome {
        checkpoint,
        config,
        selection,
        test_eps_n,
    })
}

/// One dataset's input to hybrid construction: the dataset, the spec its
/// CNN was trained with, and that CNN's best checkpoint.
pub struct HybridInput<'a> {
    pub dataset: &'a PreparedDataset,
    pub spec: ArchSpec,
    pub checkpoint: Option<&'a Checkpoint>,
}

/// Hybrid models for one dataset.
#[derive(Debug)]
pub struct HybridBuild {
    pub dataset: String,
    pub group: FrameGroup,
    /// Own-encoder hybrid: (model, fit).
    pub hcelm: (ModelParams, CelmFit),
    /// Shared-encoder hybrid using the frame group's best CNN.
    pub hcelm3: (ModelParams, CelmFit),
    /// Index into the input slice of the HCELM3 encoder donor.
    pub donor: usize,
    pub hcelm_test: Option<f64>,
    pub hcelm3_test: Option<f64>,
    pub hcelm_wall_s: f64,
    pub hcelm3_wall_s: f64,
}

fn hybrid_test_score(
    ds: &PreparedDataset,
    model: &ModelParams,
    spec: &ArchSpec,
    fit: &CelmFit,
) -> Result<Option<f64>> {
    if ds.test.is_empty() {
        return Ok(None);
    }
    let encoder = ModelParams {
        layers: model.layers.clone(),
        head: None,
    };
    celm_test_score(ds, &encoder, spec, fit).map(Some)
}

/// Builds HCELM (own encoder) and HCELM3 (frame-group best encoder, groups
/// {observables, AS, W}) for every dataset. The donor for a group is the
/// checkpoint with the lowest validation loss; ties resolve to the earliest
/// entry. Heads are retrained in closed form; encoders are never mutated.
pub fn build_hybrids(entries: &[HybridInput<'_>]) -> Result<Vec<HybridBuild>> {
    if entries.is_empty() {
        return Err(Error::invalid("no datasets for hybrid construction"));
    }
    let group_id = |g: FrameGroup| match g {
        FrameGroup::Observables => 0usize,
        FrameGroup::As => 1,
        FrameGroup::W => 2,
    };
    let mut group_best: [Option<(usize, f64)>; 3] = [None, None, None];
    for (i, e) in entries.iter().enumerate() {
        let Some(ckpt) = e.checkpoint else { continue };
        let g = group_id(e.dataset.strategy.frame_group());
        let better = match group_best[g] {
            None => true,
            Some((_, best)) => ckpt.val_loss < best,
        };
        if better {
            group_best[g] = Some((i, ckpt.val_loss));
        }
    }

    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let ds = e.dataset;
        let group = ds.strategy.frame_group();
        let own = e.checkpoint.ok_or_else(|| {
            Error::invalid(format!("dataset {} has no CNN best for HCELM", ds.name))
        })?;
        let t0 = Instant::now();
        let hcelm = train_hybrid(
            own,
            &ds.train,
            &ds.val,
            &e.spec,
            &e.spec.c_grid,
            &ds.camera,
            ds.rotation_phase_rad,
        )?;
        let hcelm_wall_s = t0.elapsed().as_secs_f64();
        let (donor, _) = group_best[group_id(group)].ok_or_else(|| {
            Error::invalid(format!(
                "frame group {group:?} has no CNN best for HCELM3 (dataset {})",
                ds.name
            ))
        })?;
        let donor_entry = &entries[donor];
        let donor_ckpt = donor_entry
            .checkpoint
            .expect("group best always has a checkpoint");
        let t0 = Instant::now();
        let hcelm3 = train_hybrid(
            donor_ckpt,
            &ds.train,
            &ds.val,
            &donor_entry.spec,
            &donor_entry.spec.c_grid,
            &ds.camera,
            ds.rotation_phase_rad,
        )?;
        let hcelm3_wall_s = t0.elapsed().as_secs_f64();
        let hcelm_test = hybrid_test_score(ds, &hcelm.0, &e.spec, &hcelm.1)?;
        let hcelm3_test = hybrid_test_score(ds, &hcelm3.0, &donor_entry.spec, &hcelm3.1)?;
        out.push(HybridBuild {
            dataset: ds.name.clone(),
            group,
            hcelm,
            hcelm3,
            donor,
            hcelm_test,
            hcelm3_test,
            hcelm_wall_s,
            hcelm3_wall_s,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PreparedSplit;
    use crate::gray::GrayImage;
    use crate::imagery::{camera_attitude, CameraModel, GroundTruth};
    use crate::labels::LabelStrategy;
    use crate::navmetrics::spherical_to_cartesian;
    use crate::neural::{encode, Activation, Pooling, Tensor3, WeightDist};
    use crate::preprocess::{Bbox, BlobResult, PreprocessRecord, S2Sample};
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cart_to_sph(p: &[f64; 3]) -> [f64; 3] {
        let rho = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let phi2 = (p[2] / rho).asin().to_degrees();
        let phi1 = p[1].atan2(p[0]).to_degrees();
        [phi1, phi2, rho]
    }

    /// Fabricated geometrically consistent dataset on 128x128 noise images:
    /// exercises the search plumbing without paying for rendering. The
    /// truth fields follow the render-time construction exactly (perfect
    /// pointing, so CoF sits on the principal point).
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
            let q = camera_attitude(&p);
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

    fn synthetic_dataset(strategy: LabelStrategy, n: [usize; 3], seed: u64) -> PreparedDataset {
        let camera = CameraModel::new(10.0, 1024);
        let phase = 0.3;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let train = synthetic_split(strategy, n[0], &camera, phase, &mut rng);
        let val = synthetic_split(strategy, n[1], &camera, phase, &mut rng);
        let test = synthetic_split(strategy, n[2], &camera, phase, &mut rng);
        PreparedDataset {
            name: format!("synth-{}", strategy.tag()),
            strategy,
            camera,
            rotation_phase_rad: phase,
            train,
            val,
            test,
        }
    }

    fn spec(d: usize, act: Activation, pool: Pooling, n_o: usize) -> ArchSpec {
        ArchSpec::new(d, WeightDist::Uniform, act, pool, n_o)
    }

    fn untrained_checkpoint(
        ds: &PreparedDataset,
        sp: &ArchSpec,
        seed: u64,
        val_loss: f64,
    ) -> Checkpoint {
        let mut params = init_kernels(sp, seed);
        let probe = Tensor3::from_gray(&ds.train.samples[0].image);
        let l = encode(&probe, &params, sp).unwrap().len();
        params.head = Some(crate::gd::init_head(l, ds.strategy.output_size(), seed));
        Checkpoint {
            params,
            epoch: 0,
            val_loss,
            normalizer: crate::elm::Normalizer {
                mins: vec![0.0; ds.strategy.output_size()],
                maxs: vec![1.0; ds.strategy.output_size()],
            },
        }
    }

    #[test]
    fn single_run_grid_selects_that_run() {
        let ds = synthetic_dataset(LabelStrategy::DeltaRho, [12, 6, 6], 1);
        let grid = vec![spec(1, Activation::Relu, Pooling::Mean, 3)];
        let out = run_celm_search(&ds, &grid, &[7], SelectOn::Test, None).unwrap();
        assert_eq!(out.manifest.records.len(), 1);
        assert_eq!(out.selection.spec_key, grid[0].key());
        assert_eq!(out.selection.seed, 7);
        assert_eq!(out.best_seed, 7);
        assert_eq!(
            out.selection.score,
            out.manifest.records[0].test_eps_n.unwrap()
        );
        // The materialized winner reproduces the recorded scores exactly.
        assert_eq!(out.fit.val_score, out.manifest.records[0].val_metric.unwrap());
        assert_eq!(out.test_eps_n, out.selection.score);
    }

    #[test]
    fn desk_grid_records_every_run_and_argmin_matches_csv() {
        let ds = synthetic_dataset(LabelStrategy::DeltaRho, [12, 6, 6], 2);
        // d in 1..=3, 2 activations, 1 distribution, both poolings, 2 seeds
        // = 24 runs.
        let mut grid = Vec::new();
        for d in 1..=3 {
            for act in [Activation::Relu, Activation::Tanh] {
                for pool in Pooling::ALL {
                    grid.push(spec(d, act, pool, 3));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let out = run_celm_search(&ds, &grid, &[3, 4], SelectOn::Test, Some(dir.path())).unwrap();
        assert_eq!(out.manifest.records.len(), 24);
        assert!(out.manifest.records.iter().all(|r| r.ok));

        // Offline recompute from the CSV must agree with the selection.
        let mut rdr = csv::Reader::from_path(ExperimentManifest::records_path(dir.path())).unwrap();
        let mut best: Option<(usize, String, u64, f64)> = None;
        for row in rdr.records() {
            let row = row.unwrap();
            let idx: usize = row[1].parse().unwrap();
            let score: f64 = row[8].parse().unwrap();
            let better = match &best {
                None => true,
                Some((bi, _, _, bs)) => score < *bs || (score == *bs && idx < *bi),
            };
            if better {
                best = Some((idx, row[2].to_string(), row[3].parse().unwrap(), score));
            }
        }
        let (idx, spec_key, seed, score) = best.unwrap();
        assert_eq!(idx, out.selection.idx);
        assert_eq!(spec_key, out.selection.spec_key);
        assert_eq!(seed, out.selection.seed);
        assert_eq!(score, out.selection.score);
    }

    #[test]
    fn equal_scores_pick_the_earlier_grid_entry() {
        let mut m = ExperimentManifest::new("tie", 0);
        for idx in [1usize, 0, 2] {
            m.upsert(RunRecord {
                method: MethodTag::Celm,
                idx,
                spec_key: format!("spec{idx}"),
                seed: idx as u64,
                batch: None,
                lr: None,
                c_star: Some(1.0),
                val_metric: Some(0.5),
                test_eps_n: Some(0.5),
                wall_s: 0.0,
                ok: true,
                message: String::new(),
            });
        }
        let sel = m.argmin(MethodTag::Celm, SelectOn::Test).unwrap();
        assert_eq!(sel.idx, 0);
        assert_eq!(sel.spec_key, "spec0");
    }

    #[test]
    fn failed_runs_are_recorded_and_skipped_by_selection() {
        let mut m = ExperimentManifest::new("fails", 0);
        m.upsert(RunRecord {
            method: MethodTag::Celm,
            idx: 0,
            spec_key: "bad".into(),
            seed: 0,
            batch: None,
            lr: None,
            c_star: None,
            val_metric: None,
            test_eps_n: None,
            wall_s: 0.1,
            ok: false,
            message: "cholesky".into(),
        });
        assert!(m.argmin(MethodTag::Celm, SelectOn::Test).is_none());
        m.upsert(RunRecord {
            method: MethodTag::Celm,
            idx: 1,
            spec_key: "good".into(),
            seed: 1,
            batch: None,
            lr: None,
            c_star: Some(1.0),
            val_metric: Some(2.0),
            test_eps_n: Some(3.0),
            wall_s: 0.1,
            ok: true,
            message: String::new(),
        });
        let sel = m.argmin(MethodTag::Celm, SelectOn::Test).unwrap();
        assert_eq!(sel.spec_key, "good");
        assert_eq!(sel.score, 3.0);
        let val = m.argmin(MethodTag::Celm, SelectOn::Val).unwrap();
        assert_eq!(val.score, 2.0);
    }

    #[test]
    fn restart_reuses_completed_records() {
        let ds = synthetic_dataset(LabelStrategy::DeltaRho, [12, 6, 6], 3);
        let grid = vec![
            spec(1, Activation::Relu, Pooling::Mean, 3),
            spec(1, Activation::Tanh, Pooling::Mean, 3),
        ];
        let dir = tempfile::tempdir().unwrap();
        // First pass: one seed only.
        let first =
            run_celm_search(&ds, &grid, &[11], SelectOn::Test, Some(dir.path())).unwrap();
        assert_eq!(first.manifest.records.len(), 2);
        let walls: Vec<f64> = first.manifest.records.iter().map(|r| r.wall_s).collect();

        // Second pass re-runs the same search: every record reused bit-for-bit.
        let again = run_celm_search(&ds, &grid, &[11], SelectOn::Test, Some(dir.path())).unwrap();
        assert_eq!(again.manifest.records, first.manifest.records);
        let walls_again: Vec<f64> = again.manifest.records.iter().map(|r| r.wall_s).collect();
        assert_eq!(walls, walls_again);
        assert_eq!(again.selection, first.selection);

        // Widening the seed list reuses the two finished runs and adds two.
        let wider =
            run_celm_search(&ds, &grid, &[11, 12], SelectOn::Test, Some(dir.path())).unwrap();
        assert_eq!(wider.manifest.records.len(), 4);
        for r in &first.manifest.records {
            assert!(wider.manifest.records.contains(r), "record lost on resume");
        }
    }

    #[test]
    fn manifest_roundtrips_through_disk() {
        let ds = synthetic_dataset(LabelStrategy::Cartesian(crate::labels::Frame::W), [10, 5, 5], 4);
        let grid = vec![spec(1, Activation::None, Pooling::Max, 3)];
        let dir = tempfile::tempdir().unwrap();
        let out = run_celm_search(&ds, &grid, &[1, 2], SelectOn::Val, Some(dir.path())).unwrap();
        let loaded = ExperimentManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(loaded, out.manifest);
        assert_eq!(loaded.selected["celm"], out.selection);
    }

    #[test]
    fn cnn_bootstrap_selects_by_val_loss_and_tolerates_failures() {
        let ds = synthetic_dataset(LabelStrategy::DeltaRho, [12, 6, 6], 5);
        let sp = spec(1, Activation::Tanh, Pooling::Mean, 3);
        // Second batch size exceeds the train split: those runs fail and
        // are recorded, the search continues.
        let grid = CnnGrid {
            batches: vec![6, 64],
            lrs: vec![1e-2, 1e-3],
            runs: 1,
            epochs: 2,
        };
        let mut manifest = ExperimentManifest::new(ds.name.clone(), 9);
        let out = bootstrap_cnn(&ds, &sp, &grid, 9, &mut manifest, None).unwrap();
        let cnn_records: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.method == MethodTag::Cnn)
            .collect();
        assert_eq!(cnn_records.len(), 4);
        assert_eq!(cnn_records.iter().filter(|r| r.ok).count(), 2);
        assert_eq!(cnn_records.iter().filter(|r| !r.ok).count(), 2);
        // Selection is the minimum recorded validation loss.
        let best_val = cnn_records
            .iter()
            .filter(|r| r.ok)
            .map(|r| r.val_metric.unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.selection.score, best_val);
        assert_eq!(out.checkpoint.val_loss, best_val);
        assert_eq!(manifest.selected["cnn"], out.selection);

        // Deterministic rerun reproduces the same selection.
        let mut manifest2 = ExperimentManifest::new(ds.name.clone(), 9);
        let out2 = bootstrap_cnn(&ds, &sp, &grid, 9, &mut manifest2, None).unwrap();
        assert_eq!(out2.selection, out.selection);
        assert_eq!(out2.checkpoint.params, out.checkpoint.params);
    }

    #[test]
    fn paper_cnn_grid_enumerates_45_cases() {
        assert_eq!(CnnGrid::paper().total_cases(), 45);
        assert_eq!(CnnGrid::desk().total_cases(), 2);
    }

    #[test]
    fn hybrids_share_group_encoders_and_single_groups_coincide() {
        // Four datasets across three frame groups: observables alone, two
        // AS variants, one W variant.
        let strategies = [
            LabelStrategy::DeltaRho,
            LabelStrategy::Spherical(crate::labels::Frame::AS),
            LabelStrategy::Cartesian(crate::labels::Frame::AS),
            LabelStrategy::Cartesian(crate::labels::Frame::W),
        ];
        let datasets: Vec<PreparedDataset> = strategies
            .iter()
            .enumerate()
            .map(|(i, &s)| synthetic_dataset(s, [12, 6, 6], 30 + i as u64))
            .collect();
        let specs: Vec<ArchSpec> = datasets
            .iter()
            .map(|d| spec(1, Activation::Relu, Pooling::Mean, d.strategy.output_size()))
            .collect();
        // Val losses force the AS donor to be the cartesian variant (idx 2).
        let ckpts: Vec<Checkpoint> = datasets
            .iter()
            .zip(&specs)
            .enumerate()
            .map(|(i, (d, sp))| {
                untrained_checkpoint(d, sp, 100 + i as u64, [0.4, 0.5, 0.1, 0.2][i])
            })
            .collect();
        let entries: Vec<HybridInput<'_>> = datasets
            .iter()
            .zip(&specs)
            .zip(&ckpts)
            .map(|((dataset, sp), ckpt)| HybridInput {
                dataset,
                spec: sp.clone(),
                checkpoint: Some(ckpt),
            })
            .collect();
        let builds = build_hybrids(&entries).unwrap();
        assert_eq!(builds.len(), 4);

        // Donors: observables -> itself, AS pair -> index 2, W -> itself.
        assert_eq!(builds[0].donor, 0);
        assert_eq!(builds[1].donor, 2);
        assert_eq!(builds[2].donor, 2);
        assert_eq!(builds[3].donor, 3);
        let distinct: std::collections::BTreeSet<usize> =
            builds.iter().map(|b| b.donor).collect();
        assert_eq!(distinct.len(), 3);

        for (i, b) in builds.iter().enumerate() {
            // HCELM encoder bit-equals its own CNN encoder; HCELM3 encoder
            // bit-equals the donor's.
            assert_eq!(b.hcelm.0.layers, ckpts[i].params.layers);
            assert_eq!(b.hcelm3.0.layers, ckpts[b.donor].params.layers);
            // Closed-form heads carry no bias.
            assert!(b.hcelm.0.head.as_ref().unwrap().beta0.is_none());
            assert!(b.hcelm3.0.head.as_ref().unwrap().beta0.is_none());
        }
        // Groups of one: HCELM and HCELM3 are the same model.
        assert_eq!(builds[0].hcelm.0, builds[0].hcelm3.0);
        assert_eq!(builds[0].hcelm.1.c_star, builds[0].hcelm3.1.c_star);
        // The AS-spherical dataset (idx 1) borrows a foreign encoder, so
        // its two hybrids genuinely differ.
        assert_ne!(builds[1].hcelm.0.layers, builds[1].hcelm3.0.layers);
    }

    #[test]
    fn hybrid_requires_checkpoints() {
        let ds = synthetic_dataset(LabelStrategy::DeltaRho, [10, 5, 0], 8);
        let sp = spec(1, Activation::Relu, Pooling::Mean, 3);
        let entries = [HybridInput {
            dataset: &ds,
            spec: sp,
            checkpoint: None,
        }];
        let err = build_hybrids(&entries).unwrap_err();
        assert!(err.to_string().contains("no CNN best"), "{err}");
        assert!(build_hybrids(&[]).is_err());
    }

    #[test]
    fn method_tags_roundtrip() {
        for m in MethodTag::ALL {
            assert_eq!(MethodTag::from_tag(m.tag()).unwrap(), m);
        }
        assert!(MethodTag::from_tag("nope").is_err());
    }
}
