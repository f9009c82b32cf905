//! The `mstiles` command line. Every subcommand is a thin wrapper over the
//! library; all randomness comes from `--seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::class::ScaleSet;
use crate::dataset::{
    choose_test_patients, class_counts, read_manifest, samples_from_archive, write_manifest,
    DatasetSplit, SplitTag,
};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, f1_scores, write_metrics_csv};
use crate::model::{
    build_model, count_params, format_millions, precompute_features, read_cache, write_cache, Arch,
    BranchKind, FeatureCache, Model, ModelConfig,
};
use crate::pipeline::{build_features, cache_items, cohort_specs};
use crate::pyramid::{
    generate_synthetic, load_annotations, load_pyramid, save_annotations, save_pyramid,
};
use crate::roi::classify_slide;
use crate::tiling::{extract_regions, read_archive, write_archive, ExtractionPlan, TileArchive};
use crate::training::{
    finish_run, predict_labels, resume, run_grid, run_log_csv, GridSpec, RunRecord, SplitFeatures,
    TrainConfig, TrainState,
};

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const ARCHIVE_EXT: &str = "tstl";
pub const CHECKPOINT_FILE: &str = "checkpoint.tsck";

#[derive(Debug, Parser)]
#[command(
    name = "mstiles",
    version,
    about = "Multiscale tile classification for slide pyramids"
)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores). `--threads 1` is bit-reproducible.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a cohort of synthetic annotated slides, one patient each.
    Generate {
        #[arg(long, default_value_t = 12)]
        slides: usize,
        #[arg(long, default_value_t = 3072)]
        width: u32,
        #[arg(long, default_value_t = 3072)]
        height: u32,
        #[arg(long, default_value_t = 1024)]
        cell_size: u32,
        #[arg(long, default_value_t = 256)]
        margin: u32,
    },
    /// Extract co-centered tile triplets from annotated slides.
    Extract {
        /// Directory of slide directories, as written by `generate`.
        #[arg(long)]
        slides: PathBuf,
        #[arg(long, default_value_t = 128)]
        stride: u32,
        #[arg(long, default_value = "25x,100x,400x")]
        scales: ScaleSet,
        #[arg(long, default_value_t = 255)]
        pad: u8,
    },
    /// Split archives by patient and balance the training partition.
    BuildDataset {
        /// Directory of `.tstl` archives.
        #[arg(long)]
        archives: PathBuf,
        /// Comma-separated test patient ids.
        #[arg(long, value_delimiter = ',', conflicts_with = "test_count")]
        test_patients: Vec<String>,
        /// Number of test patients drawn with the seed.
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Continue runs from their checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Train the hyperparameter grid and select a configuration per architecture.
    Gridsearch {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "MONO,DI,TRI")]
        archs: Vec<Arch>,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,1536,2048,4096")]
        fc: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.5")]
        dropout: Vec<f32>,
        #[arg(long, default_value = "vgg16")]
        branch: BranchKind,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Evaluate a saved model on one partition of a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitTag,
    },
    /// Print trainable and total parameter counts.
    CountParams {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Classify every stride cell of a slide and write a class map.
    ClassifySlide {
        #[arg(long)]
        model: PathBuf,
        /// Slide directory, as written by `generate`.
        #[arg(long)]
        slide: PathBuf,
        #[arg(long, default_value_t = 128)]
        stride: u32,
        #[arg(long, default_value_t = 255)]
        pad: u8,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature cache file, reused when its branch weights match.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub arch: Arch,
    #[arg(long, default_value_t = 2048)]
    pub fc: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f32,
    #[arg(long, default_value = "vgg16")]
    pub branch: BranchKind,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            patience: self.patience,
            max_epochs: self.max_epochs,
        };
        c.validate()?;
        Ok(c)
    }
}

fn required_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::usage("out", "this command needs an output path"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Sorted entries of `dir` accepted by `keep`.
fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if keep(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Archive path as stored in a manifest: relative to the manifest's
/// directory when the archive lives below it, absolute otherwise.
fn manifest_entry(archive: &Path, manifest_dir: &Path) -> Result<String> {
    let abs = archive.canonicalize().map_err(|e| Error::io(archive, e))?;
    let base = manifest_dir
        .canonicalize()
        .map_err(|e| Error::io(manifest_dir, e))?;
    let p = abs.strip_prefix(&base).unwrap_or(&abs);
    Ok(p.to_string_lossy().into_owned())
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn load_dataset(manifest: &Path) -> Result<(DatasetSplit, Vec<TileArchive>)> {
    let dir = parent_dir(manifest);
    read_manifest(manifest, |entry| read_archive(&dir.join(entry)))
}

/// Loads `cache` when it matches `model`, otherwise computes every feature the
/// split needs (and saves it when a path is given).
fn feature_cache(
    model: &Model,
    split: &DatasetSplit,
    archives: &[TileArchive],
    path: Option<&Path>,
) -> Result<FeatureCache> {
    if let Some(p) = path.filter(|p| p.exists()) {
        let cache = read_cache(p)?;
        if cache.check_model(model).is_ok() {
            return Ok(cache);
        }
    }
    let cache = precompute_features(model, &cache_items(split, archives)?)?;
    if let Some(p) = path {
        write_cache(&cache, p)?;
    }
    Ok(cache)
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        // Fails only if a global pool already exists, e.g. when called twice
        // in one process; the existing pool is then kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::Generate {
            slides,
            width,
            height,
            cell_size,
            margin,
        } => {
            let out = required_out(&cli.out)?;
            if slides == 0 {
                return Err(Error::usage("slides", "at least one slide is required"));
            }
            create_dir(out)?;
            for mut spec in cohort_specs(slides, width, height, seed) {
                spec.cell_size = cell_size;
                spec.margin = margin;
                let (pyramid, regions) = generate_synthetic(&spec)?;
                let dir = out.join(&spec.slide_id);
                save_pyramid(&pyramid, &dir)?;
                save_annotations(&regions, &dir.join(ANNOTATIONS_FILE))?;
            }
            println!("generated {slides} slides in {}", out.display());
        }
        Command::Extract {
            slides,
            stride,
            scales,
            pad,
        } => {
            let out = required_out(&cli.out)?;
            let plan = ExtractionPlan {
                stride,
                scales,
                pad_value: pad,
            };
            plan.validate()?;
            create_dir(out)?;
            let dirs = sorted_entries(&slides, |p| p.join(ANNOTATIONS_FILE).is_file())?;
            if dirs.is_empty() {
                return Err(Error::Input(format!(
                    "no annotated slides in {}",
                    slides.display()
                )));
            }
            let mut total = 0;
            for dir in dirs {
                let pyramid = load_pyramid(&dir)?;
                let regions = load_annotations(&dir.join(ANNOTATIONS_FILE), &pyramid.slide_id)?;
                let tiles = extract_regions(&pyramid, &regions, &plan)?;
                total += tiles.len();
                write_archive(
                    &tiles,
                    &out.join(format!("{}.{ARCHIVE_EXT}", pyramid.slide_id)),
                )?;
            }
            println!("extracted {total} triplets into {}", out.display());
        }
        Command::BuildDataset {
            archives,
            test_patients,
            test_count,
        } => {
            let out = required_out(&cli.out)?;
            let paths = sorted_entries(&archives, |p| {
                p.extension().is_some_and(|e| e == ARCHIVE_EXT)
            })?;
            if paths.is_empty() {
                return Err(Error::Input(format!(
                    "no .{ARCHIVE_EXT} archives in {}",
                    archives.display()
                )));
            }
            create_dir(parent_dir(out))?;
            let mut names = Vec::new();
            let mut samples = Vec::new();
            for (i, p) in paths.iter().enumerate() {
                samples.extend(samples_from_archive(i as u32, &read_archive(p)?));
                names.push(manifest_entry(p, parent_dir(out))?);
            }
            let test: BTreeSet<String> = match (test_count, test_patients.is_empty()) {
                (Some(n), _) => choose_test_patients(&samples, n, seed)?,
                (None, false) => test_patients.into_iter().collect(),
                (None, true) => {
                    return Err(Error::usage(
                        "test-patients",
                        "give --test-patients or --test-count",
                    ))
                }
            };
            let split = DatasetSplit::build(names, &samples, &test, seed)?;
            split.check_patient_disjoint()?;
            write_manifest(&split, out)?;
            println!(
                "train {} (per class {:?}), val {}, test {} from patients {}",
                split.train.len(),
                class_counts(&split.train),
                split.val.len(),
                split.test.len(),
                test.into_iter().collect::<Vec<_>>().join(",")
            );
        }
        Command::Train {
            data,
            model,
            train,
            runs,
            resume: resume_runs,
        } => {
            let out = required_out(&cli.out)?;
            let config = ModelConfig::new(model.arch, model.fc, model.dropout, model.branch, seed)?;
            let train = train.config()?;
            if runs == 0 {
                return Err(Error::usage("runs", "at least one run is required"));
            }
            let (split, archives) = load_dataset(&data.manifest)?;
            let mut m = build_model(&config)?;
            let cache = feature_cache(&m, &split, &archives, data.cache.as_deref())?;
            let features = build_features(&m, &split, &archives, &cache)?;
            features.check_nonempty()?;
            create_dir(out)?;
            let spec = GridSpec {
                archs: vec![config.arch],
                runs_per_config: runs,
                ..GridSpec::full(config.branch, seed, train)
            };
            let mut records = Vec::new();
            for run in 0..runs {
                let dir = out.join(format!("run_{run}"));
                create_dir(&dir)?;
                let ckpt = dir.join(CHECKPOINT_FILE);
                let mut state = if resume_runs && ckpt.exists() {
                    resume(&ckpt)?
                } else {
                    TrainState::new(&m.head, train, spec.run_seed(run))?
                };
                state.run(
                    &m.head,
                    &features.train,
                    &mut &features.val,
                    Some(&ckpt),
                    None,
                )?;
                let record = finish_run(&mut m, &state, &features, run)?;
                m.save(&dir.join("model"))?;
                write_text(&dir.join("run_log.csv"), &run_log_csv(&record.history))?;
                write_json(&dir.join("record.json"), &record)?;
                println!(
                    "run {run}: stopped at epoch {}, best epoch {}, val loss {:.6}, test macro F1 {:.4}",
                    record.stop_epoch, record.best_epoch, record.best_val_loss, record.test_metrics.macro_f1
                );
                records.push(record);
            }
            report_runs(out, &records)?;
        }
        Command::Gridsearch {
            data,
            archs,
            fc,
            dropout,
            branch,
            train,
            runs,
        } => {
            let out = required_out(&cli.out)?;
            let spec = GridSpec {
                archs,
                fc,
                dropout,
                runs_per_config: runs,
                branch,
                base_seed: seed,
                train: train.config()?,
            };
            spec.configs()?;
            let (split, archives) = load_dataset(&data.manifest)?;
            // Scale sets are nested (MONO within DI within TRI), so the widest
            // architecture computes every branch feature the grid needs.
            let widest = spec.archs.iter().copied().max().unwrap_or(Arch::Tri);
            let feature_model = build_model(&ModelConfig::new(
                widest,
                spec.fc[0],
                spec.dropout[0],
                branch,
                seed,
            )?)?;
            let cache = feature_cache(&feature_model, &split, &archives, data.cache.as_deref())?;
            let mut features: BTreeMap<Arch, SplitFeatures> = BTreeMap::new();
            for &arch in &spec.archs {
                let m = build_model(&ModelConfig::new(
                    arch,
                    spec.fc[0],
                    spec.dropout[0],
                    branch,
                    seed,
                )?)?;
                features.insert(arch, build_features(&m, &split, &archives, &cache)?);
            }
            let (records, summary) = run_grid(&spec, &features)?;
            create_dir(out)?;
            write_text(&out.join("grid_summary.csv"), &summary.to_csv())?;
            write_json(&out.join("runs.json"), &records)?;
            for (arch, &i) in &summary.best {
                let chosen = &summary.configs[i].config;
                let runs: Vec<_> = records
                    .iter()
                    .filter(|r| r.config == *chosen)
                    .map(|r| r.test_metrics.clone())
                    .collect();
                write_metrics_csv(&runs, &out.join(format!("metrics_{arch}.csv")))?;
                println!(
                    "{arch}: selected {} (val macro F1 {:.4}), test macro F1 {:.4} ± {:.4}",
                    chosen.key(),
                    summary.configs[i].val_macro_f1,
                    summary.configs[i].test.macro_f1_mean,
                    summary.configs[i].test.f1_std
                );
            }
        }
        Command::Evaluate {
            model,
            manifest,
            split,
        } => {
            let out = required_out(&cli.out)?;
            let m = Model::load(&model)?;
            let (dataset, archives) = load_dataset(&manifest)?;
            let empty = FeatureCache::for_model(&m);
            let features = build_features(&m, &dataset, &archives, &empty)?;
            let set = match split {
                SplitTag::Train => &features.train,
                SplitTag::Val => &features.val,
                SplitTag::Test => &features.test,
            };
            let predicted = predict_labels(&m.head, &m.weights, set)?;
            let matrix = confusion(&set.labels, &predicted)?;
            let metrics = f1_scores(&matrix);
            create_dir(parent_dir(out))?;
            write_metrics_csv(std::slice::from_ref(&metrics), out)?;
            println!(
                "{split}: {} tiles, macro F1 {:.4}, accuracy {:.4}",
                set.len(),
                metrics.macro_f1,
                metrics.accuracy
            );
        }
        Command::CountParams { model } => {
            let config = ModelConfig::new(model.arch, model.fc, model.dropout, model.branch, seed)?;
            let (trainable, total) = count_params(&config);
            println!("{trainable} trainable / {total} total");
            println!("{}/{}", format_millions(trainable), format_millions(total));
        }
        Command::ClassifySlide {
            model,
            slide,
            stride,
            pad,
        } => {
            let out = required_out(&cli.out)?;
            let m = Model::load(&model)?;
            let pyramid = load_pyramid(&slide)?;
            let map = classify_slide(&pyramid, &m, stride, pad)?;
            create_dir(out)?;
            map.save_png(&out.join("class_map.png"))?;
            write_text(&out.join("class_map.txt"), &map.to_text())?;
            write_text(&out.join("class_map.csv"), &map.to_csv())?;
            println!(
                "class map {}x{} written to {}",
                map.cols,
                map.rows,
                out.display()
            );
        }
    }
    Ok(())
}

fn report_runs(out: &Path, records: &[RunRecord]) -> Result<()> {
    let runs: Vec<_> = records.iter().map(|r| r.test_metrics.clone()).collect();
    write_metrics_csv(&runs, &out.join("metrics.csv"))
}
