//! Pipeline driver: renders datasets, preprocesses them, runs the CELM
//! grid search and CNN bootstrap, builds hybrids, and evaluates models into
//! report tables.
//!
//! A typical desk-scale session:
//!
//! ```text
//! celmnav gen-dataset --out runs/raw --strategy deltarho --count 1000
//! celmnav preprocess --dataset runs/raw --out runs/prepared --split 600,200,200
//! celmnav search-celm --data runs/prepared --run-dir runs/r1 --preset desk
//! celmnav train-cnn   --run-dir runs/r1 --preset desk
//! celmnav build-hybrids --run-dir runs/r1
//! celmnav evaluate    --run-dir runs/r1 --model runs/r1/model_celm.bin
//! celmnav report      --run-dir runs/r1 --out runs/r1/report
//! ```
//!
//! Every search output lands under the run directory: `manifest.jsonl` with
//! one JSON line per run record, a `records.csv` mirror, model blobs with
//! JSON sidecars, and `run.json` tying the run to its prepared dataset.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use celmnav::archgen::{enumerate_specs, export_grid_csv, ArchSpec};
use celmnav::data::{
    mean_eps_n, metric_rows_for_predictions, prepare_dataset, PreparedDataset, PreparedSplit,
};
use celmnav::elm::{mean_label_prediction, Normalizer};
use celmnav::gd::{predict_split, Checkpoint};
use celmnav::imagery::{
    build_dataset, default_sun_w, sample_cloud, BodyModel, CameraModel, DatasetManifest,
};
use celmnav::labels::LabelStrategy;
use celmnav::navmetrics::{emit_report, MetricRow, MetricTable};
use celmnav::neural::{load_model, save_model, HeadParams, ModelParams, ModelSidecar};
use celmnav::preprocess::NoiseSpec;
use celmnav::search::{
    bootstrap_cnn, build_hybrids, desk_grid, run_celm_search, CnnGrid, ExperimentManifest,
    HybridInput, MethodTag, RunRecord, Selection, SelectOn,
};

#[derive(Parser)]
#[command(
    name = "celmnav",
    version,
    about = "CELM / CNN / hybrid position-regression pipeline for synthetic small-body imagery"
)]
struct Cli {
    /// Worker threads for rendering and feature assembly (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// CI-sized: 24-spec CELM grid, one seed; 2-case CNN grid, 30 epochs.
    Desk,
    /// Full methodology: 120 specs x 3 seeds; 45 CNN cases, 300 epochs.
    Paper,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectOnArg {
    /// Select on test-set mean eps_n (the source methodology).
    Test,
    /// Select on the validation split (methodologically clean).
    Val,
}

impl From<SelectOnArg> for SelectOn {
    fn from(v: SelectOnArg) -> Self {
        match v {
            SelectOnArg::Test => SelectOn::Test,
            SelectOnArg::Val => SelectOn::Val,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (images + ground-truth manifest).
    GenDataset {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Labeling strategy: deltarho | as-sph | as-cart | w-sph | w-cart.
        #[arg(long, default_value = "deltarho")]
        strategy: String,
        /// Number of viewpoints to render.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Intended train,val,test split recorded in the metadata.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
        /// Viewpoint cloud seed.
        #[arg(long, default_value_t = 99)]
        cloud_seed: u64,
        /// Procedural body seed.
        #[arg(long, default_value_t = 11)]
        body_seed: u64,
        /// Camera field of view, degrees.
        #[arg(long, default_value_t = 10.0)]
        fov_deg: f64,
        /// Sensor side, pixels.
        #[arg(long, default_value_t = 1024)]
        sensor_px: usize,
        /// Fraction of the field of view the body fills at closest range.
        #[arg(long, default_value_t = 0.9)]
        fill: f64,
    },
    /// Run the S0 -> S1 -> S2 preprocessing pipeline over a rendered dataset.
    Preprocess {
        /// Rendered dataset directory (from gen-dataset).
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for the prepared train/val/test splits.
        #[arg(long)]
        out: PathBuf,
        /// train,val,test sizes; defaults to the split recorded at render time.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
        /// Master seed for the per-image pad draws.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Gaussian pixel-noise sigma (intensity units); omit for no noise.
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Grid-search CELMs and materialize the selected model.
    SearchCelm {
        /// Prepared dataset directory (from preprocess).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for manifest.jsonl, records.csv, and models.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Spec grid CSV (as written by this command's grid.csv); overrides
        /// the preset's grid and seeds.
        #[arg(long)]
        grid_file: Option<PathBuf>,
        /// Master seed; run seeds derive from it.
        #[arg(long, default_value_t = 64)]
        master_seed: u64,
        #[arg(long, value_enum, default_value_t = SelectOnArg::Test)]
        select_on: SelectOnArg,
    },
    /// Train the CNN grid on the selected CELM architecture.
    TrainCnn {
        /// Run directory holding the CELM search manifest.
        #[arg(long)]
        run_dir: PathBuf,
        /// Prepared dataset directory; defaults to the one recorded in run.json.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Architecture key (e.g. d2-uniform-relu-max); defaults to the
        /// manifest's selected CELM spec.
        #[arg(long)]
        spec_key: Option<String>,
        /// Override the preset's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Restrict the grid to these batch sizes (repeat the flag).
        #[arg(long)]
        batch: Vec<usize>,
        /// Restrict the grid to these learning rates (repeat the flag).
        #[arg(long)]
        lr: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        master_seed: u64,
    },
    /// Build HCELM / HCELM3 models from the CNN bests of one or more runs.
    BuildHybrids {
        /// Run directories (repeat the flag); frame groups span all of them.
        #[arg(long, required = true)]
        run_dir: Vec<PathBuf>,
    },
    /// Evaluate a model (or the mean-label baseline) and write metric rows.
    Evaluate {
        /// Run directory; metric files land here. Defaults to the model's
        /// directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Prepared dataset directory; defaults to the run.json entry.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model blob (expects its .json sidecar next to it).
        #[arg(long, required_unless_present = "baseline")]
        model: Option<PathBuf>,
        /// Evaluate the mean-label predictor instead of a model.
        #[arg(long, default_value_t = false)]
        baseline: bool,
        /// Method tag for the output rows; inferred from the model file
        /// name when omitted.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Aggregate metric rows from one or more runs into report tables.
    Report {
        /// Run directories containing metrics_*.jsonl files.
        #[arg(long, required = true)]
        run_dir: Vec<PathBuf>,
        /// Output directory for the report CSVs.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(v: &[usize], expect_total: Option<usize>) -> Result<[usize; 3]> {
    if v.len() != 3 {
        bail!("--split needs exactly three comma-separated sizes, got {v:?}");
    }
    let s = [v[0], v[1], v[2]];
    if let Some(total) = expect_total {
        if s.iter().sum::<usize>() != total {
            bail!("split {s:?} does not sum to --count {total}");
        }
    }
    Ok(s)
}

/// Ties a run directory to its prepared dataset.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    data: PathBuf,
    dataset: String,
    strategy: String,
}

impl RunInfo {
    fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("run.json")
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(Self::path(run_dir), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let raw = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {} (is this a run directory?)", path.display()))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenDataset {
            out,
            strategy,
            count,
            split,
            cloud_seed,
            body_seed,
            fov_deg,
            sensor_px,
            fill,
        } => cmd_gen_dataset(
            &out, &strategy, count, split, cloud_seed, body_seed, fov_deg, sensor_px, fill,
        ),
        Command::Preprocess {
            dataset,
            out,
            split,
            seed,
            noise_sigma,
        } => cmd_preprocess(&dataset, &out, split, seed, noise_sigma),
        Command::SearchCelm {
            data,
            run_dir,
            preset,
            grid_file,
            master_seed,
            select_on,
        } => cmd_search_celm(
            &data,
            &run_dir,
            preset,
            grid_file.as_deref(),
            master_seed,
            select_on.into(),
        ),
        Command::TrainCnn {
            run_dir,
            data,
            preset,
            spec_key,
            epochs,
            batch,
            lr,
            master_seed,
        } => cmd_train_cnn(
            &run_dir,
            data.as_deref(),
            preset,
            spec_key.as_deref(),
            epochs,
            &batch,
            &lr,
            master_seed,
        ),
        Command::BuildHybrids { run_dir } => cmd_build_hybrids(&run_dir),
        Command::Evaluate {
            run_dir,
            data,
            model,
            baseline,
            method,
            split,
        } => cmd_evaluate(
            run_dir.as_deref(),
            data.as_deref(),
            model.as_deref(),
            baseline,
            method.as_deref(),
            split,
        ),
        Command::Report { run_dir, out } => cmd_report(&run_dir, &out),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_dataset(
    out: &Path,
    strategy: &str,
    count: usize,
    split: Option<Vec<usize>>,
    cloud_seed: u64,
    body_seed: u64,
    fov_deg: f64,
    sensor_px: usize,
    fill: f64,
) -> Result<()> {
    let strategy = LabelStrategy::from_tag(strategy)?;
    let split = split.map(|v| parse_split(&v, Some(count))).transpose()?;
    let camera = CameraModel::new(fov_deg, sensor_px);
    let body = BodyModel::procedural(body_seed).scaled_to_fov(&camera, fill);
    let cloud = sample_cloud(count, cloud_seed);
    let t0 = Instant::now();
    let manifest = build_dataset(
        &body,
        &camera,
        &cloud,
        strategy,
        &default_sun_w(),
        cloud_seed,
        split,
        out,
    )?;
    println!(
        "rendered {} images ({}, {}x{} px) to {} in {:.1}s",
        manifest.records.len(),
        strategy.tag(),
        sensor_px,
        sensor_px,
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_preprocess(
    dataset: &Path,
    out: &Path,
    split: Option<Vec<usize>>,
    seed: u64,
    noise_sigma: Option<f64>,
) -> Result<()> {
    let manifest = DatasetManifest::load(dataset)?;
    let split = match split {
        Some(v) => parse_split(&v, None)?,
        None => manifest
            .meta
            .split
            .context("dataset records no split; pass --split train,val,test")?,
    };
    let noise = noise_sigma.map(|sigma| NoiseSpec { sigma });
    let t0 = Instant::now();
    let prepared = prepare_dataset(&manifest, split, seed, noise)?;
    prepared.save(out)?;
    println!(
        "prepared {}/{}/{} samples ({}) to {} in {:.1}s",
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len(),
        prepared.strategy.tag(),
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Reads a grid CSV in the export_grid_csv layout back into specs (first
/// appearance order) and the seed list.
fn load_grid_csv(path: &Path, n_o: usize) -> Result<(Vec<ArchSpec>, Vec<u64>)> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("opening grid file {}", path.display()))?;
    let mut specs: Vec<ArchSpec> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let key = &row[1];
        let spec = ArchSpec::from_key(key, n_o)?;
        let row_n_o: usize = row[6].parse().context("bad n_o column")?;
        if row_n_o != n_o {
            bail!(
                "grid row {key} declares {row_n_o} outputs but the dataset's strategy needs {n_o}"
            );
        }
        if !specs.iter().any(|s| s.key() == spec.key()) {
            specs.push(spec);
        }
        let seed: u64 = row[7].parse().context("bad seed column")?;
        if !seeds.contains(&seed) {
            seeds.push(seed);
        }
    }
    if specs.is_empty() {
        bail!("grid file {} has no rows", path.display());
    }
    Ok((specs, seeds))
}

fn celm_model_sidecar(
    spec: &ArchSpec,
    seed: u64,
    c_star: f64,
    val_score: f64,
    normalizer: &Normalizer,
    strategy: LabelStrategy,
) -> ModelSidecar {
    let mut sc = ModelSidecar::new(spec, seed);
    sc.c_star = Some(c_star);
    sc.val_score = Some(val_score);
    sc.label_min = Some(normalizer.mins.clone());
    sc.label_max = Some(normalizer.maxs.clone());
    sc.strategy = Some(strategy.tag().to_string());
    sc
}

fn cmd_search_celm(
    data: &Path,
    run_dir: &Path,
    preset: Preset,
    grid_file: Option<&Path>,
    master_seed: u64,
    select_on: SelectOn,
) -> Result<()> {
    let ds = PreparedDataset::load(data)?;
    let n_o = ds.strategy.output_size();
    let (grid, seeds) = match grid_file {
        Some(path) => load_grid_csv(path, n_o)?,
        None => match preset {
            Preset::Desk => (desk_grid(ds.strategy), vec![master_seed]),
            Preset::Paper => (
                enumerate_specs(ds.strategy),
                vec![master_seed, master_seed + 1, master_seed + 2],
            ),
        },
    };
    std::fs::create_dir_all(run_dir)?;
    export_grid_csv(&run_dir.join("grid.csv"), &grid, &seeds)?;
    println!(
        "searching {} specs x {} seeds = {} CELM runs on {}",
        grid.len(),
        seeds.len(),
        grid.len() * seeds.len(),
        ds.name
    );
    let t0 = Instant::now();
    let outcome = run_celm_search(&ds, &grid, &seeds, select_on, Some(run_dir))?;
    let model_path = run_dir.join("model_celm.bin");
    let params = ModelParams {
        layers: outcome.params.layers.clone(),
        head: Some(HeadParams {
            beta: outcome.fit.beta.clone(),
            beta0: None,
        }),
    };
    let sidecar = celm_model_sidecar(
        &outcome.best_spec,
        outcome.best_seed,
        outcome.fit.c_star,
        outcome.fit.val_score,
        &outcome.fit.normalizer,
        ds.strategy,
    );
    save_model(&model_path, &params, &sidecar)?;
    RunInfo {
        data: data.to_path_buf(),
        dataset: ds.name.clone(),
        strategy: ds.strategy.tag().to_string(),
    }
    .save(run_dir)?;
    println!(
        "selected {} seed {} (C* = {:.0e}): val eps_n {:.3}, test eps_n {:.3} in {:.1}s",
        outcome.best_spec.key(),
        outcome.best_seed,
        outcome.fit.c_star,
        outcome.fit.val_score,
        outcome.test_eps_n,
        t0.elapsed().as_secs_f64()
    );
    println!("model: {}", model_path.display());
    Ok(())
}

fn load_run_manifest(run_dir: &Path) -> Result<ExperimentManifest> {
    ExperimentManifest::load(run_dir)?
        .ok_or_else(|| anyhow!("no manifest.jsonl under {}", run_dir.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_cnn(
    run_dir: &Path,
    data: Option<&Path>,
    preset: Preset,
    spec_key: Option<&str>,
    epochs: Option<usize>,
    batch: &[usize],
    lr: &[f64],
    master_seed: u64,
) -> Result<()> {
    let info = RunInfo::load(run_dir)?;
    let data = data.unwrap_or(&info.data);
    let ds = PreparedDataset::load(data)?;
    let mut manifest = load_run_manifest(run_dir)?;
    let key = match spec_key {
        Some(k) => k.to_string(),
        None => {
            manifest
                .selected
                .get(MethodTag::Celm.tag())
                .context("manifest has no selected CELM; run search-celm first or pass --spec-key")?
                .spec_key
                .clone()
        }
    };
    let spec = ArchSpec::from_key(&key, ds.strategy.output_size())?;
    let mut grid = match preset {
        Preset::Desk => CnnGrid::desk(),
        Preset::Paper => CnnGrid::paper(),
    };
    if let Some(e) = epochs {
        grid.epochs = e;
    }
    if !batch.is_empty() {
        grid.batches = batch.to_vec();
    }
    if !lr.is_empty() {
        grid.lrs = lr.to_vec();
    }
    println!(
        "training {} CNN cases on {} ({} epochs each)",
        grid.total_cases(),
        key,
        grid.epochs
    );
    let t0 = Instant::now();
    let outcome = bootstrap_cnn(&ds, &spec, &grid, master_seed, &mut manifest, Some(run_dir))?;
    let model_path = run_dir.join("model_cnn.bin");
    let mut sidecar = ModelSidecar::new(&spec, outcome.config.seed);
    sidecar.val_score = Some(outcome.checkpoint.val_loss);
    sidecar.label_min = Some(outcome.checkpoint.normalizer.mins.clone());
    sidecar.label_max = Some(outcome.checkpoint.normalizer.maxs.clone());
    sidecar.strategy = Some(ds.strategy.tag().to_string());
    save_model(&model_path, &outcome.checkpoint.params, &sidecar)?;
    print!(
        "selected batch {} lr {:.0e} seed {}: val loss {:.3e}",
        outcome.config.batch_size, outcome.config.lr, outcome.config.seed, outcome.checkpoint.val_loss,
    );
    match outcome.test_eps_n {
        Some(t) => println!(", test eps_n {t:.3} in {:.1}s", t0.elapsed().as_secs_f64()),
        None => println!(" in {:.1}s", t0.elapsed().as_secs_f64()),
    }
    println!("model: {}", model_path.display());
    Ok(())
}

/// Rebuilds the CNN checkpoint persisted by train-cnn from its blob and
/// sidecar.
fn load_checkpoint(path: &Path) -> Result<(Checkpoint, ArchSpec, u64)> {
    let (params, sidecar) = load_model(path)?;
    let normalizer = Normalizer {
        mins: sidecar
            .label_min
            .clone()
            .with_context(|| format!("{} lacks label_min in its sidecar", path.display()))?,
        maxs: sidecar
            .label_max
            .clone()
            .with_context(|| format!("{} lacks label_max in its sidecar", path.display()))?,
    };
    let val_loss = sidecar
        .val_score
        .with_context(|| format!("{} lacks val_score in its sidecar", path.display()))?;
    Ok((
        Checkpoint {
            params,
            epoch: 0,
            val_loss,
            normalizer,
        },
        sidecar.spec,
        sidecar.seed,
    ))
}

fn cmd_build_hybrids(run_dirs: &[PathBuf]) -> Result<()> {
    let mut datasets = Vec::with_capacity(run_dirs.len());
    let mut loaded = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let info = RunInfo::load(dir)?;
        let ds = PreparedDataset::load(&info.data)?;
        let (ckpt, spec, seed) = load_checkpoint(&dir.join("model_cnn.bin"))
            .with_context(|| format!("loading the CNN best of {}", dir.display()))?;
        datasets.push(ds);
        loaded.push((ckpt, spec, seed));
    }
    let entries: Vec<HybridInput<'_>> = datasets
        .iter()
        .zip(&loaded)
        .map(|(dataset, (ckpt, spec, _))| HybridInput {
            dataset,
            spec: spec.clone(),
            checkpoint: Some(ckpt),
        })
        .collect();
    let builds = build_hybrids(&entries)?;
    for (((dir, build), ds), (_, own_spec, own_seed)) in
        run_dirs.iter().zip(&builds).zip(&datasets).zip(&loaded)
    {
        let mut manifest = load_run_manifest(dir)?;
        let donor = &loaded[build.donor];
        for (method, (model, fit), test, wall_s, spec, seed) in [
            (
                MethodTag::Hcelm,
                &build.hcelm,
                build.hcelm_test,
                build.hcelm_wall_s,
                own_spec,
                *own_seed,
            ),
            (
                MethodTag::Hcelm3,
                &build.hcelm3,
                build.hcelm3_test,
                build.hcelm3_wall_s,
                &donor.1,
                donor.2,
            ),
        ] {
            let record = RunRecord {
                method,
                idx: 0,
                spec_key: spec.key(),
                seed,
                batch: None,
                lr: None,
                c_star: Some(fit.c_star),
                val_metric: Some(fit.val_score),
                test_eps_n: test,
                wall_s,
                ok: true,
                message: String::new(),
            };
            manifest.upsert(record);
            manifest.selected.insert(
                method.tag().to_string(),
                Selection {
                    method,
                    idx: 0,
                    spec_key: spec.key(),
                    seed,
                    batch: None,
                    lr: None,
                    score: fit.val_score,
                },
            );
            let path = dir.join(format!("model_{}.bin", method.tag()));
            let sidecar =
                celm_model_sidecar(spec, seed, fit.c_star, fit.val_score, &fit.normalizer, ds.strategy);
            save_model(&path, model, &sidecar)?;
        }
        manifest.save(dir)?;
        println!(
            "{}: hcelm val eps_n {:.3}, hcelm3 val eps_n {:.3} (encoder from {})",
            build.dataset,
            build.hcelm.1.val_score,
            build.hcelm3.1.val_score,
            datasets[build.donor].name,
        );
    }
    Ok(())
}

fn split_of(ds: &PreparedDataset, which: SplitArg) -> &PreparedSplit {
    match which {
        SplitArg::Train => &ds.train,
        SplitArg::Val => &ds.val,
        SplitArg::Test => &ds.test,
    }
}

fn infer_method(model: &Path) -> Result<MethodTag> {
    let stem = model
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let tag = stem.strip_prefix("model_").unwrap_or(stem);
    MethodTag::from_tag(tag)
        .map_err(|_| anyhow!("cannot infer a method from '{stem}'; pass --method"))
}

fn cmd_evaluate(
    run_dir: Option<&Path>,
    data: Option<&Path>,
    model: Option<&Path>,
    baseline: bool,
    method: Option<&str>,
    split: SplitArg,
) -> Result<()> {
    let run_dir = match (run_dir, model) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(m)) => m
            .parent()
            .context("model path has no parent directory")?
            .to_path_buf(),
        (None, None) => bail!("pass --run-dir or --model"),
    };
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => RunInfo::load(&run_dir)?.data,
    };
    let ds = PreparedDataset::load(&data)?;
    let eval = split_of(&ds, split);
    if eval.is_empty() {
        bail!("the requested split is empty");
    }

    let (label, source, predictions) = if baseline {
        let mean = mean_label_prediction(&ds.train)?;
        (
            "baseline".to_string(),
            MethodTag::Celm,
            vec![mean; eval.len()],
        )
    } else {
        let model = model.expect("clap enforces --model unless --baseline");
        let (params, sidecar) = load_model(model)?;
        if let Some(tag) = &sidecar.strategy {
            if tag != ds.strategy.tag() {
                bail!(
                    "model was trained for strategy {tag}, dataset uses {}",
                    ds.strategy.tag()
                );
            }
        }
        let normalizer = Normalizer {
            mins: sidecar.label_min.clone().context("sidecar lacks label_min")?,
            maxs: sidecar.label_max.clone().context("sidecar lacks label_max")?,
        };
        let tag = match method {
            Some(m) => MethodTag::from_tag(m)?,
            None => infer_method(model)?,
        };
        let preds = predict_split(&params, &sidecar.spec, &normalizer, eval)?;
        (tag.tag().to_string(), tag, preds)
    };

    let rows = metric_rows_for_predictions(
        &predictions,
        eval,
        &ds.camera,
        ds.rotation_phase_rad,
        source,
    )?;
    let mean = mean_eps_n(&predictions, eval, &ds.camera, ds.rotation_phase_rad)?;
    let out_path = run_dir.join(format!("metrics_{label}.jsonl"));
    std::fs::create_dir_all(&run_dir)?;
    let mut lines = Vec::with_capacity(rows.len());
    for row in &rows {
        lines.push(serde_json::to_string(row)?);
    }
    std::fs::write(&out_path, lines.join("\n") + "\n")?;
    println!(
        "{label}: mean eps_n {mean:.3} over {} samples -> {}",
        rows.len(),
        out_path.display()
    );
    Ok(())
}

fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut tables = Vec::new();
    for dir in run_dirs {
        let dataset = RunInfo::load(dir)
            .map(|i| i.dataset)
            .unwrap_or_else(|_| dir.display().to_string());
        let mut found = false;
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
                continue;
            };
            let Some(method) = name
                .strip_prefix("metrics_")
                .and_then(|n| n.strip_suffix(".jsonl"))
            else {
                continue;
            };
            let raw = std::fs::read_to_string(&path)?;
            let rows: Vec<MetricRow> = raw
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()?;
            tables.push(MetricTable {
                method: method.to_string(),
                dataset: dataset.clone(),
                rows,
            });
            found = true;
        }
        if !found {
            bail!(
                "{} has no metrics_*.jsonl files; run evaluate first",
                dir.display()
            );
        }
    }
    let written = emit_report(&tables, out)?;
    println!(
        "report over {} tables ({} run dirs):",
        tables.len(),
        run_dirs.len()
    );
    for path in written {
        println!("  {}", path.display());
    }
    Ok(())
}
