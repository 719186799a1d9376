//! The `crossview` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Every command that writes an output directory also writes the
//! fully resolved configuration to `config.txt` inside it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossview_core::geocalib::{estimate_orientation, GeocalibResult};
use crossview_core::synth::{make_geocal_instance, AlignedPair, CLASSES, CLASS_NAMES};
use crossview_core::train::{copy_backbone, missing_aerial_classes, train_aerial_direct, train_crossview, Progress};
use crossview_core::verify::{report, run_suite, Suite};
use crossview_core::viz::{render_labelmap, render_orientation_map, render_transform_matrix, MatrixLayout};
use crossview_core::{CrossViewModel, LabelMap, Tensor};

use crate::checkpoint;
use crate::config::{RunConfig, CONFIG_ENV};
use crate::dataset;
use crate::error::{Error, Result};
use crate::parallel::{self, Target};
use crate::tnsr;

#[derive(Debug, Parser)]
#[command(name = "crossview", version, about = "Aerial-to-ground semantic transfer on a synthetic world")]
pub struct Cli {
    /// `key = value` config file; falls back to $CROSSVIEW_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for dataset generation, evaluation and geocalibration.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Ground,
    Aerial,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Raw,
    Cellgrid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Grad,
    Invariants,
    Oracle,
}

/// One aerial image: a CVTN `[3, S, S]` file or a pair of a dataset.
#[derive(Debug, Args)]
pub struct ImageInput {
    /// CVTN aerial image `[3, S, S]`.
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub aerial: Option<PathBuf>,
    /// Dataset directory to take the image from (with --index).
    #[arg(long, requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub index: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        asymmetric: Option<bool>,
        #[arg(long)]
        random_orientation: Option<bool>,
        /// Replace an existing dataset in a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Cross-view training against ground labels.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset evaluated after each epoch.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the aerial branch directly on aerial labels.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        init: InitArg,
        /// Cross-view checkpoint supplying the pretrained backbone.
        #[arg(long, required_if_eq("init", "pretrained"))]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Number of labeled images taken from the front of the dataset.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metrics of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "ground")]
        target: TargetArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ground label distribution predicted from one aerial image.
    PredictGround {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: ImageInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aerial label map of one aerial image.
    SegmentAerial {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: ImageInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Orientation PDF of a ground query against one aerial image.
    EstimateOrientation {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: ImageInput,
        /// CVTN ground labels `[h_g, w_g, K]`; defaults to the dataset
        /// pair's ground labels.
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Location and orientation search over a grid of aerial offsets.
    Geocalibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generate the large aerial image and query from this seed.
        #[arg(long, conflicts_with_all = ["aerial", "query"])]
        synthetic_seed: Option<u64>,
        /// CVTN aerial image large enough for every offset.
        #[arg(long, requires = "query")]
        aerial: Option<PathBuf>,
        #[arg(long, requires = "aerial")]
        query: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        step: Option<i64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heat map of the transformation matrix for one aerial image.
    RenderTransform {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: ImageInput,
        #[arg(long, value_enum, default_value = "cellgrid")]
        mode: LayoutArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a self-check suite.
    Verify {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut c = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        c.set_assignment(kv)?;
    }
    if let Some(t) = cli.threads {
        c.threads = t;
    }
    Ok(c)
}

fn set_opt<T: ToString>(c: &mut RunConfig, key: &str, v: &Option<T>) -> Result<()> {
    match v {
        Some(v) => c.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

fn out_dir(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write(&dir.join("config.txt"), config.echo())
}

fn load_checkpoint(path: &Path, config: &RunConfig) -> Result<CrossViewModel<f32>> {
    let (model, stored) = checkpoint::load(path)?;
    let diffs = checkpoint::model_mismatches(&stored, config);
    if !diffs.is_empty() {
        return Err(Error::Config(format!("{}: {}", path.display(), diffs.join("; "))));
    }
    Ok(model)
}

struct Image {
    data: Tensor<f32>,
    pair: Option<AlignedPair>,
}

fn load_image(input: &ImageInput, config: &RunConfig) -> Result<Image> {
    let s = config.model.backbone.input_size;
    let (data, pair) = match (&input.aerial, &input.data, input.index) {
        (Some(p), _, _) => (tnsr::decode::<f32>(&fs::read(p).map_err(Error::io(p))?)?, None),
        (None, Some(dir), Some(i)) => {
            let m = dataset::read_manifest(dir)?;
            if i >= m.count {
                return Err(Error::Config(format!("index {i} out of range ({} pairs)", m.count)));
            }
            let pair = dataset::read_pair(dir, i)?;
            (pair.aerial_image.clone(), Some(pair))
        }
        _ => return Err(Error::Config("give --aerial FILE or --data DIR --index I".into())),
    };
    if data.shape() != [3, s, s] {
        return Err(Error::Config(format!("aerial image has shape {:?}, expected [3, {s}, {s}]", data.shape())));
    }
    Ok(Image { data, pair })
}

fn load_labels(path: &Path, h: usize, w: usize) -> Result<LabelMap> {
    let t = tnsr::decode::<f32>(&fs::read(path).map_err(Error::io(path))?)?;
    if t.shape() != [h, w, CLASSES] {
        return Err(Error::Config(format!(
            "{}: labels have shape {:?}, expected [{h}, {w}, {CLASSES}]",
            path.display(),
            t.shape()
        )));
    }
    Ok(LabelMap::new(h, w, CLASSES, t.into_data())?)
}

fn labels_tensor(l: &LabelMap) -> Tensor<f32> {
    Tensor::new(vec![l.height(), l.width(), l.classes()], l.probs().to_vec()).unwrap()
}

pub fn run(cli: Cli) -> Result<i32> {
    let mut c = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData {
            out,
            scenes,
            seed,
            split,
            asymmetric,
            random_orientation,
            force,
        } => {
            set_opt(&mut c, "data.scenes", scenes)?;
            set_opt(&mut c, "data.seed", seed)?;
            set_opt(&mut c, "synth.asymmetric", asymmetric)?;
            set_opt(&mut c, "synth.random_orientation", random_orientation)?;
            c.validate()?;
            let split = match split {
                SplitArg::Train => crossview_core::synth::Split::Train,
                SplitArg::Test => crossview_core::synth::Split::Test,
            };
            let pairs = parallel::pool(c.threads)?.install(|| dataset::generate(&c, split, c.scenes))?;
            dataset::write(out, &pairs, split, &c, *force)?;
            eprintln!("wrote {} {} pairs to {}", pairs.len(), split.name(), out.display());
        }
        Command::Train {
            data,
            out,
            eval,
            epochs,
            lr,
            batch_size,
            seed,
        } => {
            set_opt(&mut c, "train.epochs", epochs)?;
            set_opt(&mut c, "train.lr", lr)?;
            set_opt(&mut c, "train.batch_size", batch_size)?;
            set_opt(&mut c, "train.seed", seed)?;
            c.validate()?;
            let (_, train) = dataset::read(data, &c)?;
            let held_out = eval.as_ref().map(|d| dataset::read(d, &c)).transpose()?.map(|x| x.1);
            let mut model = CrossViewModel::<f32>::new(c.model.clone(), c.model_seed)?;
            let start = std::time::Instant::now();
            let mut log = train_crossview(&mut model, &train, &c.train, held_out.as_deref(), &mut |p| {
                if let Progress::Epoch { epoch, metrics } = p {
                    match metrics {
                        Some(m) => eprintln!("epoch {epoch} {}", m.to_text(&CLASS_NAMES)),
                        None => eprintln!("epoch {epoch} done"),
                    }
                }
            })?;
            log.wall_seconds = Some(start.elapsed().as_secs_f64());
            out_dir(out, &c)?;
            checkpoint::save(&out.join("model.ckpt"), &model, &c)?;
            write(&out.join("train_log.txt"), log.to_text(&CLASS_NAMES))?;
            eprintln!("trained {} steps in {:.1}s", log.losses.len(), log.wall_seconds.unwrap_or(0.0));
        }
        Command::Finetune {
            data,
            out,
            init,
            checkpoint: ck,
            eval,
            steps,
            images,
            seed,
        } => {
            set_opt(&mut c, "finetune.steps", steps)?;
            set_opt(&mut c, "finetune.images", images)?;
            set_opt(&mut c, "train.seed", seed)?;
            c.validate()?;
            let (_, mut labeled) = dataset::read(data, &c)?;
            if c.finetune_images > labeled.len() {
                return Err(Error::Config(format!(
                    "finetune.images = {} but {} holds {} pairs",
                    c.finetune_images,
                    data.display(),
                    labeled.len()
                )));
            }
            labeled.truncate(c.finetune_images);
            let held_out = eval.as_ref().map(|d| dataset::read(d, &c)).transpose()?.map(|x| x.1);
            let mut model = CrossViewModel::<f32>::new(c.model.clone(), c.model_seed)?;
            if *init == InitArg::Pretrained {
                let path = ck.as_ref().expect("clap requires --checkpoint");
                let pre = load_checkpoint(path, &c)?;
                copy_backbone(&pre, &mut model)?;
            }
            for k in missing_aerial_classes(&labeled, c.model.classes) {
                eprintln!("warning: class {} absent from the training labels", CLASS_NAMES[k]);
            }
            let log = train_aerial_direct(&mut model, &labeled, &c.train, c.finetune_steps)?;
            out_dir(out, &c)?;
            checkpoint::save(&out.join("model.ckpt"), &model, &c)?;
            write(&out.join("train_log.txt"), log.to_text(&CLASS_NAMES))?;
            if let Some(e) = held_out {
                let m = parallel::pool(c.threads)?.install(|| parallel::evaluate(&model, &e, Target::Aerial))?;
                let text = m.to_text(&CLASS_NAMES);
                println!("{text}");
                write(&out.join("metrics.txt"), text + "\n")?;
            }
        }
        Command::Evaluate {
            checkpoint: ck,
            data,
            target,
            out,
        } => {
            c.validate()?;
            let model = load_checkpoint(ck, &c)?;
            let (_, pairs) = dataset::read(data, &c)?;
            let target = match target {
                TargetArg::Ground => Target::Ground,
                TargetArg::Aerial => Target::Aerial,
            };
            let m = parallel::pool(c.threads)?.install(|| parallel::evaluate(&model, &pairs, target))?;
            let text = m.to_text(&CLASS_NAMES);
            println!("{text}");
            if let Some(dir) = out {
                out_dir(dir, &c)?;
                write(&dir.join("metrics.txt"), text + "\n")?;
            }
        }
        Command::PredictGround { checkpoint: ck, input, out } => {
            c.validate()?;
            let model = load_checkpoint(ck, &c)?;
            let img = load_image(input, &c)?;
            let labels = model.predict_ground_labels(img.data.data())?;
            out_dir(out, &c)?;
            write(&out.join("ground.tnsr"), tnsr::encode(&labels_tensor(&labels)))?;
            write(&out.join("ground.ppm"), render_labelmap(&labels, &c.render)?.to_ppm())?;
            // One line per ground pixel, row-major.
            let w = labels.width();
            for (r, k) in labels.argmax().iter().enumerate() {
                println!("{} {} {}", r / w, r % w, CLASS_NAMES[*k as usize]);
            }
        }
        Command::SegmentAerial { checkpoint: ck, input, out } => {
            c.validate()?;
            let model = load_checkpoint(ck, &c)?;
            let img = load_image(input, &c)?;
            let labels = model.aerial_labels(img.data.data(), c.model.h_a, c.model.w_a)?;
            out_dir(out, &c)?;
            write(&out.join("aerial.tnsr"), tnsr::encode(&labels_tensor(&labels)))?;
            write(&out.join("aerial.ppm"), render_labelmap(&labels, &c.render)?.to_ppm())?;
        }
        Command::EstimateOrientation {
            checkpoint: ck,
            input,
            query,
            out,
        } => {
            c.validate()?;
            let model = load_checkpoint(ck, &c)?;
            let img = load_image(input, &c)?;
            let query = match (query, &img.pair) {
                (Some(p), _) => load_labels(p, c.model.h_g, c.model.w_g)?,
                (None, Some(pair)) => pair.ground_labels.clone(),
                (None, None) => return Err(Error::Config("--query is required with --aerial".into())),
            };
            let pdf = estimate_orientation(&model, img.data.data(), &query)?;
            let truth = img.pair.as_ref().map(|p| (0, p.true_orientation));
            let result = GeocalibResult::assemble(vec![(0, 0)], (1, 1), vec![pdf])?;
            out_dir(out, &c)?;
            write(&out.join("orientation.txt"), result.to_text())?;
            write(&out.join("orientation.ppm"), render_orientation_map(&result, truth, &c.render)?.to_ppm())?;
            println!(
                "bin={} radians={:?} energy={:?}",
                result.pdfs[0].argmin,
                result.pdfs[0].argmin_radians(),
                result.pdfs[0].min_energy()
            );
        }
        Command::Geocalibrate {
            checkpoint: ck,
            synthetic_seed,
            aerial,
            query,
            grid,
            step,
            out,
        } => {
            set_opt(&mut c, "geocal.grid", grid)?;
            set_opt(&mut c, "geocal.step", step)?;
            c.validate()?;
            let model = load_checkpoint(ck, &c)?;
            let n = c.geocal_grid;
            let offsets = crossview_core::synth::offset_grid(n, c.geocal_step);
            let (image, query, truth) = match (synthetic_seed, aerial, query) {
                (Some(seed), _, _) => {
                    let inst = make_geocal_instance(*seed, &c.synth, n, c.geocal_step)?;
                    debug_assert_eq!(inst.offsets, offsets);
                    let theta = inst.true_shift as f64 * c.synth.column_step();
                    (inst.image, inst.query, Some((inst.true_index, theta)))
                }
                (None, Some(a), Some(q)) => {
                    let image = tnsr::decode::<f32>(&fs::read(a).map_err(Error::io(a))?)?;
                    (image, load_labels(q, c.model.h_g, c.model.w_g)?, None)
                }
                _ => return Err(Error::Config("give --synthetic-seed or both --aerial and --query".into())),
            };
            let result = parallel::pool(c.threads)?.install(|| parallel::geocalibrate(&model, &image, &query, &offsets, (n, n)))?;
            out_dir(out, &c)?;
            write(&out.join("geocal.txt"), result.to_text())?;
            write(&out.join("flowmap.ppm"), render_orientation_map(&result, truth, &c.render)?.to_ppm())?;
            if let Some((i, theta)) = truth {
                // The generated inputs, so the run can be repeated with --aerial/--query.
                write(&out.join("aerial.tnsr"), tnsr::encode(&image))?;
                write(&out.join("query.tnsr"), tnsr::encode(&labels_tensor(&query)))?;
                write(&out.join("truth.txt"), format!("index={i} offset={:?} radians={theta:?}\n", offsets[i]))?;
            }
            let (bx, by) = result.best_offset();
            println!(
                "best offset=({bx}, {by}) bin={} radians={:?}",
                result.best.1,
                result.pdfs[result.best.0].bin_to_radians(result.best.1)
            );
        }
        Command::RenderTransform {
            checkpoint: ck,
            input,
            mode,
            out,
        } => {
            c.validate()?;
            let model = load_checkpoint(ck, &c)?;
            let img = load_image(input, &c)?;
            let (layout, name) = match mode {
                LayoutArg::Raw => (MatrixLayout::Raw, "transform_raw.ppm"),
                LayoutArg::Cellgrid => (MatrixLayout::CellGrid, "transform_cellgrid.ppm"),
            };
            let ppm = render_transform_matrix(&model, img.data.data(), layout, c.render.scale)?.to_ppm();
            out_dir(out, &c)?;
            write(&out.join(name), ppm)?;
        }
        Command::Verify { suite, seed } => {
            let suite = match suite {
                SuiteArg::Grad => Suite::Grad,
                SuiteArg::Invariants => Suite::Invariants,
                SuiteArg::Oracle => Suite::Oracle,
            };
            let checks = run_suite(suite, *seed)?;
            print!("{}", report(&checks));
            if checks.iter().any(|c| !c.passed) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}
