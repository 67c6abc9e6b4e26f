//! Command-line front end: `synthesize`, `train`, `transfer`, `eval` and
//! `fixtures`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_and_preprocess, load_image_dir, load_matrix_store, load_style_corpus,
    procedural_content_images, procedural_texture_corpus, save_image_dir, save_matrix_store,
    save_style_corpus, synthesize_image_matrix, ProceduralStylizer, Stylizer, TEXTURE_GENERATORS,
};
use crate::error::{Error, Result};
use crate::evaluation::{cluster_quality, compare_param_counts, embed_corpus, export_eval_grid, export_pca_csv};
use crate::image::ImageTensor;
use crate::models::a1::{A1Bundle, A1Config};
use crate::models::a2::{A2Config, GeneratorA2};
use crate::models::{Embedder, StyleTransfer};
use crate::training::{load_checkpoint, train_loop, Approach, LoopOptions, Models, TrainConfig, TrainData};
use crate::util;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "RGAN_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rgan", version, about = "Multi-style adversarial style transfer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML or JSON training config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an image-matrix store from content and style images.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        contents: PathBuf,
        #[arg(long)]
        styles: PathBuf,
        /// Square image side; defaults to the config's image size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train either approach, writing checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        approach: Option<Approach>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        /// Image-matrix store (A1).
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Content image directory (A2).
        #[arg(long)]
        contents: Option<PathBuf>,
        /// Labelled style corpus directory (A2).
        #[arg(long)]
        styles: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stylise one content image with one style image.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        /// Expected approach of the checkpoint.
        #[arg(long)]
        approach: Option<Approach>,
    },
    /// Cluster report, evaluation grid and parameter-count report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled style corpus directory.
        #[arg(long)]
        styles: PathBuf,
        /// Content image directory for the grid.
        #[arg(long)]
        contents: PathBuf,
        /// Grid size as ROWSxCOLS (contents x styles).
        #[arg(long, default_value = "2x3", value_parser = parse_grid)]
        grid: (usize, usize),
    },
    /// Write procedural content images and a labelled texture corpus.
    Fixtures {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 6)]
        n_contents: usize,
        #[arg(long, default_value_t = 8)]
        n_per_class: usize,
        #[arg(long, value_delimiter = ',', default_value = "stripes,checker,dots")]
        classes: Vec<String>,
        #[arg(long)]
        size: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synthesize { .. } => "synthesize",
            Command::Train { .. } => "train",
            Command::Transfer { .. } => "transfer",
            Command::Eval { .. } => "eval",
            Command::Fixtures { .. } => "fixtures",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synthesize { common, .. }
            | Command::Train { common, .. }
            | Command::Transfer { common, .. }
            | Command::Eval { common, .. }
            | Command::Fixtures { common, .. } => common,
        }
    }
}

impl clap::ValueEnum for Approach {
    fn value_variants<'a>() -> &'a [Self] {
        &[Approach::A1, Approach::A2]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Approach::A1 => "a1",
            Approach::A2 => "a2",
        }))
    }
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
    let r = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let c = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    if r == 0 || c == 0 {
        return Err("grid dimensions must be >= 1".into());
    }
    Ok((r, c))
}

/// Provenance record written next to every command's artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

/// SHA-256 of the key-sorted JSON form, so field order never matters.
pub fn canonical_hash(value: &serde_json::Value) -> Result<String> {
    Ok(util::sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

fn base_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} directory not found")),
        ))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ))
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Images of a style directory: flat files if any, otherwise the images
/// of a labelled (directory-per-class) corpus.
fn load_styles_any(dir: &Path, size: (usize, usize)) -> Result<Vec<ImageTensor>> {
    let flat = load_image_dir(dir, size)?;
    if !flat.is_empty() {
        return Ok(flat.into_iter().map(|(_, i)| i).collect());
    }
    Ok(load_style_corpus(dir, size)?.images)
}

struct Outcome {
    config: serde_json::Value,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// Runs a parsed command. On failure an output directory created by this
/// run is renamed with a `.failed` suffix.
pub fn run(cli: Cli) -> Result<()> {
    let started = chrono::Utc::now();
    let cmd = cli.command;
    let out = cmd
        .common()
        .out
        .clone()
        .ok_or_else(|| Error::Config(vec!["--out DIR is required".into()]))?;
    let created = !out.exists();
    let result = (|| -> Result<Outcome> {
        let outcome = dispatch(&cmd, &out)?;
        let manifest = RunManifest {
            command: cmd.name().to_string(),
            tool_version: VERSION.to_string(),
            config_hash: canonical_hash(&outcome.config)?,
            config: outcome.config.clone(),
            seed: outcome.seed,
            inputs: outcome.inputs.clone(),
            outputs: outcome.outputs.clone(),
            started_at: started.to_rfc3339(),
            finished_at: chrono::Utc::now().to_rfc3339(),
        };
        util::write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(outcome)
    })();
    match result {
        Ok(_) => Ok(()),
        Err(e) => {
            if created && out.exists() {
                let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
                name.push(".failed");
                let failed = out.with_file_name(name);
                if failed.exists() {
                    let _ = fs::remove_dir_all(&failed);
                }
                if fs::rename(&out, &failed).is_ok() {
                    log::warn!("partial outputs moved to {}", failed.display());
                }
            }
            Err(e)
        }
    }
}

fn dispatch(cmd: &Command, out: &Path) -> Result<Outcome> {
    match cmd {
        Command::Synthesize {
            common,
            contents,
            styles,
            size,
        } => {
            let mut cfg = base_config(common)?;
            if let Some(s) = size {
                cfg.image_size = (*s, *s);
            }
            require_dir(contents, "content")?;
            require_dir(styles, "style")?;
            let size = cfg.image_size;
            let cs: Vec<_> = load_image_dir(contents, size)?.into_iter().map(|(_, i)| i).collect();
            let ss = load_styles_any(styles, size)?;
            if cs.is_empty() {
                return Err(Error::arg(format!("no images in {}", contents.display())));
            }
            if ss.is_empty() {
                return Err(Error::arg(format!("no images in {}", styles.display())));
            }
            let stylizer = ProceduralStylizer::default();
            let matrix = synthesize_image_matrix(&cs, &ss, &stylizer, cfg.seed)?;
            let m = save_matrix_store(&matrix, out, stylizer.name(), cfg.seed)?;
            log::info!("wrote {}x{} image matrix to {}", m.rows, m.cols, out.display());
            let mut outputs = vec!["matrix.json".to_string()];
            outputs.extend(m.contents.iter().chain(&m.styles).chain(&m.cells).map(|f| f.file.clone()));
            Ok(Outcome {
                config: serde_json::json!({
                    "image_size": size,
                    "stylizer": stylizer.name(),
                    "detail_gain": stylizer.detail_gain,
                    "levels": stylizer.levels,
                }),
                seed: cfg.seed,
                inputs: BTreeMap::from([
                    ("contents".into(), path_str(contents)),
                    ("styles".into(), path_str(styles)),
                ]),
                outputs,
            })
        }
        Command::Train {
            common,
            approach,
            steps,
            checkpoint_every,
            size,
            matrix,
            contents,
            styles,
            resume,
        } => {
            let mut cfg = base_config(common)?;
            if let Some(a) = approach {
                cfg.approach = *a;
            }
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            if let Some(c) = checkpoint_every {
                cfg.checkpoint_every = *c;
            }
            if let Some(s) = size {
                cfg.image_size = (*s, *s);
            }
            let mut errs = cfg.validation_errors();
            match cfg.approach {
                Approach::A1 => {
                    if matrix.is_none() {
                        errs.push("approach a1 needs --matrix DIR (an image-matrix store)".into());
                    }
                }
                Approach::A2 => {
                    if contents.is_none() {
                        errs.push("approach a2 needs --contents DIR".into());
                    }
                    if styles.is_none() {
                        errs.push("approach a2 needs --styles DIR (a labelled style corpus)".into());
                    }
                }
            }
            if !errs.is_empty() {
                return Err(Error::Config(errs));
            }
            let size = cfg.image_size;
            let mut inputs = BTreeMap::new();
            let data = match cfg.approach {
                Approach::A1 => {
                    let dir = matrix.as_ref().unwrap();
                    require_dir(dir, "matrix store")?;
                    inputs.insert("matrix".into(), path_str(dir));
                    TrainData::A1 {
                        matrix: load_matrix_store(dir)?.0,
                    }
                }
                Approach::A2 => {
                    let (cdir, sdir) = (contents.as_ref().unwrap(), styles.as_ref().unwrap());
                    require_dir(cdir, "content")?;
                    require_dir(sdir, "style")?;
                    inputs.insert("contents".into(), path_str(cdir));
                    inputs.insert("styles".into(), path_str(sdir));
                    TrainData::A2 {
                        contents: load_image_dir(cdir, size)?.into_iter().map(|(_, i)| i).collect(),
                        styles: load_style_corpus(sdir, size)?,
                    }
                }
            };
            if let Some(r) = resume {
                inputs.insert("resume".into(), path_str(r));
            }
            let t0 = Instant::now();
            let outcome = train_loop(
                &cfg,
                &data,
                &LoopOptions {
                    out_dir: Some(out.to_path_buf()),
                    resume_from: resume.clone(),
                },
            )?;
            log::info!(
                "trained {} steps in {:.1}s",
                outcome.metrics.len(),
                t0.elapsed().as_secs_f64()
            );
            let mut outputs = vec!["metrics.jsonl".to_string()];
            for c in &outcome.checkpoints {
                if let Ok(rel) = c.strip_prefix(out) {
                    outputs.push(rel.display().to_string());
                }
            }
            Ok(Outcome {
                config: serde_json::to_value(cfg.resolved())?,
                seed: cfg.seed,
                inputs,
                outputs,
            })
        }
        Command::Transfer {
            common: _,
            checkpoint,
            content,
            style,
            approach,
        } => {
            require_file(content, "content image")?;
            require_file(style, "style image")?;
            let state = load_checkpoint(checkpoint)?;
            let cfg = state.config().clone();
            if let Some(a) = approach {
                if *a != cfg.approach {
                    return Err(Error::arg(format!(
                        "checkpoint {} holds an {} model, --approach asked for {a}",
                        checkpoint.display(),
                        cfg.approach
                    )));
                }
            }
            let size = cfg.image_size;
            let c = load_and_preprocess(content, size)?;
            let s = load_and_preprocess(style, size)?;
            let t0 = Instant::now();
            let img = state.models.transfer(&c, &s)?;
            let wall = t0.elapsed();
            util::create_dir_all(out)?;
            img.save_png(&out.join("transfer.png"))?;
            println!("transfer took {:.1} ms", wall.as_secs_f64() * 1e3);
            Ok(Outcome {
                config: serde_json::to_value(&cfg)?,
                seed: cfg.seed,
                inputs: BTreeMap::from([
                    ("checkpoint".into(), path_str(checkpoint)),
                    ("content".into(), path_str(content)),
                    ("style".into(), path_str(style)),
                ]),
                outputs: vec!["transfer.png".into()],
            })
        }
        Command::Eval {
            common: _,
            checkpoint,
            styles,
            contents,
            grid,
        } => {
            require_dir(styles, "style")?;
            require_dir(contents, "content")?;
            let state = load_checkpoint(checkpoint)?;
            let cfg = state.config().clone();
            let size = cfg.image_size;
            let corpus = load_style_corpus(styles, size)?;
            let cs: Vec<_> = load_image_dir(contents, size)?.into_iter().map(|(_, i)| i).collect();
            let (rows, cols) = *grid;
            if cs.len() < rows || corpus.len() < cols {
                return Err(Error::arg(format!(
                    "grid {rows}x{cols} needs {rows} contents and {cols} styles, have {} and {}",
                    cs.len(),
                    corpus.len()
                )));
            }
            util::create_dir_all(out)?;
            let embedder: &dyn Embedder = match &state.models {
                Models::A1(b) => &b.style_head,
                Models::A2(g) => &g.style_encoder,
            };
            let emb = embed_corpus(embedder, &corpus.images, 16)?;
            let report = cluster_quality(&emb, &corpus.labels, &corpus.class_names)?;
            util::write_atomic(&out.join("cluster_report.json"), &serde_json::to_vec_pretty(&report)?)?;
            export_pca_csv(&out.join("pca.csv"), &emb, &corpus.labels)?;

            let picks: Vec<ImageTensor> = (0..cols)
                .map(|k| corpus.images[k * corpus.len() / cols].clone())
                .collect();
            export_eval_grid(&state.models as &dyn StyleTransfer, &cs[..rows], &picks, &out.join("grid.png"))?;

            let defaults = compare_param_counts(
                &A1Bundle::new(&A1Config::default(), 0)?,
                &GeneratorA2::new(&A2Config::default(), 0)?,
            );
            let params = serde_json::json!({
                "checkpoint": {
                    "approach": cfg.approach,
                    "total": state.models.param_count(),
                    "breakdown": state.models.breakdown(),
                },
                "defaults": defaults,
            });
            util::write_atomic(&out.join("param_report.json"), &serde_json::to_vec_pretty(&params)?)?;
            log::info!(
                "silhouette {:.3}, centroid accuracy {:.3}",
                report.silhouette,
                report.nearest_centroid_accuracy
            );
            Ok(Outcome {
                config: serde_json::json!({ "grid": [rows, cols], "train": cfg }),
                seed: cfg.seed,
                inputs: BTreeMap::from([
                    ("checkpoint".into(), path_str(checkpoint)),
                    ("styles".into(), path_str(styles)),
                    ("contents".into(), path_str(contents)),
                ]),
                outputs: vec![
                    "cluster_report.json".into(),
                    "pca.csv".into(),
                    "grid.png".into(),
                    "param_report.json".into(),
                ],
            })
        }
        Command::Fixtures {
            common,
            n_contents,
            n_per_class,
            classes,
            size,
        } => {
            let mut cfg = base_config(common)?;
            if let Some(s) = size {
                cfg.image_size = (*s, *s);
            }
            let (h, w) = cfg.image_size;
            if h != w {
                return Err(Error::arg("fixtures are square; set a square image size"));
            }
            for c in classes {
                if !TEXTURE_GENERATORS.contains(&c.as_str()) {
                    return Err(Error::arg(format!(
                        "unknown texture generator `{c}` (known: {})",
                        TEXTURE_GENERATORS.join(", ")
                    )));
                }
            }
            let names: Vec<&str> = classes.iter().map(String::as_str).collect();
            let contents = procedural_content_images(*n_contents, h, cfg.seed);
            save_image_dir(&contents, &out.join("contents"), "content")?;
            let corpus = procedural_texture_corpus(&names, *n_per_class, h, cfg.seed)?;
            save_style_corpus(&corpus, &out.join("styles"))?;
            Ok(Outcome {
                config: serde_json::json!({
                    "image_size": [h, w],
                    "n_contents": n_contents,
                    "n_per_class": n_per_class,
                    "classes": classes,
                }),
                seed: cfg.seed,
                inputs: BTreeMap::new(),
                outputs: vec!["contents".into(), "styles".into()],
            })
        }
    }
}

/// Maps `RGAN_NUM_THREADS` onto the tensor backend's worker pool. Must run
/// before any tensor work.
pub fn apply_thread_limit() {
    if let Ok(n) = std::env::var(THREADS_ENV) {
        if n.trim().parse::<usize>().is_ok_and(|v| v > 0) {
            std::env::set_var("RAYON_NUM_THREADS", n.trim());
        } else {
            log::warn!("ignoring {THREADS_ENV}={n}: expected a positive integer");
        }
    }
}

/// Process entry point; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}
