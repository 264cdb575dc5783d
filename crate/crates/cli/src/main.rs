//! `kuronet` command-line tool.

mod config;
mod render;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kuronet::corpus::synth::generate_synthetic_corpus;
use kuronet::corpus::{load_book, read_gray, PageSample, CSV_NAME, IMAGE_DIR};
use kuronet::evaluation::{book_rows, evaluate, render_table, Evaluation};
use kuronet::postprocess::{read_predictions, write_predictions, Recognizer};
use kuronet::training::{load_checkpoint, save_checkpoint, Preset, Trainer};
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "kuronet", version, about = "Whole-page character recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        config::load(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labelled books.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory; one sub-directory per book.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        books: usize,
        /// Book names are the prefix followed by a 3-digit index.
        #[arg(long, default_value = "synth")]
        prefix: String,
    },
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Book directories or directories containing books.
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preset: Option<Preset>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recognise characters on page images; writes JSON lines.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// PNG files, book directories, or directories of PNG files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score predictions against labelled books.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Vec<PathBuf>,
        /// Prediction file, optionally labelled as `label=path`; repeatable.
        #[arg(long, required = true)]
        predictions: Vec<String>,
        /// Directory for `report.json` and `report.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw ground truth and predictions over a page image.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Book directory holding the page's labels.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Page id; defaults to the image file stem.
        #[arg(long)]
        page_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Render { .. } => "render",
        }
    }
}

/// Book directories under `roots`, in sorted order.
fn discover_books(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut books = Vec::new();
    for root in roots {
        if root.join(CSV_NAME).is_file() {
            books.push(root.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = fs::read_dir(root)
            .with_context(|| format!("reading corpus directory {}", root.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(CSV_NAME).is_file())
            .collect();
        if found.is_empty() {
            bail!("no book (directory with {CSV_NAME}) under {}", root.display());
        }
        found.sort();
        books.extend(found);
    }
    if books.is_empty() {
        bail!("no corpus given; pass --corpus or set paths.corpus");
    }
    Ok(books)
}

fn load_corpus(cli: &[PathBuf], cfg: &RunConfig) -> Result<Vec<PageSample>> {
    let roots = if cli.is_empty() { &cfg.paths.corpus } else { cli };
    let mut pages = Vec::new();
    for book in discover_books(roots)? {
        pages.extend(load_book(&book)?);
    }
    Ok(pages)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn page_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parent_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn synth(cfg: &RunConfig, out: &Path, books: usize, prefix: &str) -> Result<()> {
    let corpus = generate_synthetic_corpus(&cfg.synth, books, cfg.seed, prefix)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for book in &corpus {
        book.write(out)?;
    }
    config::echo(cfg, out, "synth")?;
    let pages: usize = corpus.iter().map(|b| b.pages.len()).sum();
    println!("{}", json!({"books": corpus.len(), "pages": pages, "out": out}));
    Ok(())
}

fn train(cfg: &RunConfig, corpus: &[PathBuf], out: &Path, resume: Option<&Path>) -> Result<()> {
    let pages = load_corpus(corpus, cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    config::echo(cfg, out, "train")?;
    let log_path = out.join("train_log.jsonl");
    let ckpt_path = out.join("checkpoint.kuro");
    let (mut trainer, log) = match resume {
        Some(from) => {
            let ckpt = load_checkpoint(from).with_context(|| format!("loading {}", from.display()))?;
            let mut t = Trainer::<f32>::resume(ckpt, &pages)?;
            t.set_epochs(cfg.train.epochs);
            let log = OpenOptions::new().create(true).append(true).open(&log_path);
            (t, log)
        }
        None => (
            Trainer::<f32>::new(&cfg.model, cfg.train.clone(), &pages)?,
            fs::File::create(&log_path),
        ),
    };
    let mut log = log.with_context(|| format!("opening {}", log_path.display()))?;
    let start = Instant::now();
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    let mut last = None;
    while trainer.epoch() < trainer.config().epochs {
        let entry = trainer.run_epoch()?;
        writeln!(log, "{}", serde_json::to_string(&entry)?)
            .with_context(|| format!("writing {}", log_path.display()))?;
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
        last = Some(entry);
    }
    println!(
        "{}",
        json!({
            "epochs": trainer.epoch(),
            "classes": trainer.vocab().len(),
            "final_loss": last.map(|l| l.mean_loss),
            "seconds": start.elapsed().as_secs_f64(),
            "checkpoint": ckpt_path,
        })
    );
    Ok(())
}

fn predict(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let Some(path) = checkpoint.or(cfg.paths.checkpoint.as_deref()) else {
        bail!("no checkpoint given; pass --checkpoint or set paths.checkpoint");
    };
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let recognizer = Recognizer::from_checkpoint(ckpt, cfg.inference.clone())?;
    let mut images = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let dir = if input.join(IMAGE_DIR).is_dir() {
                input.join(IMAGE_DIR)
            } else {
                input.clone()
            };
            images.extend(png_files(&dir)?);
        } else {
            images.push(input.clone());
        }
    }
    let mut predictions = Vec::new();
    for img in &images {
        let page = read_gray(img)?;
        predictions.extend(recognizer.predict_page(&page_id_of(img), &page)?);
    }
    let dir = parent_dir(out);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_predictions(out, &predictions)?;
    config::echo(cfg, dir, "predict")?;
    println!(
        "{}",
        json!({"pages": images.len(), "predictions": predictions.len(), "out": out})
    );
    Ok(())
}

fn eval(cfg: &RunConfig, corpus: &[PathBuf], predictions: &[String], out: &Path) -> Result<()> {
    let pages = load_corpus(corpus, cfg)?;
    let mut runs: Vec<(String, Evaluation)> = Vec::new();
    for spec in predictions {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => (page_id_of(Path::new(spec)), PathBuf::from(spec)),
        };
        let preds = read_predictions(&path)?;
        let e = evaluate(&pages, &preds).with_context(|| format!("scoring {}", path.display()))?;
        runs.push((label, e));
    }
    let labels: Vec<String> = runs.iter().map(|(l, _)| l.clone()).collect();
    let rows = book_rows(&pages, &runs);
    let table = render_table(&labels, &rows);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = json!({
        "runs": runs.iter().map(|(l, e)| json!({"label": l, "evaluation": e})).collect::<Vec<_>>(),
        "table": rows,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("report.txt"), &table)?;
    config::echo(cfg, out, "eval")?;
    print!("{table}");
    Ok(())
}

fn render_page(
    cfg: &RunConfig,
    image: &Path,
    predictions: &Path,
    ground_truth: Option<&Path>,
    page_id: Option<&str>,
    out: &Path,
) -> Result<()> {
    let page_id = page_id.map_or_else(|| page_id_of(image), str::to_string);
    let page = read_gray(image)?;
    let boxes = match ground_truth {
        Some(book) => {
            let pages = load_book(book)?;
            let Some(s) = pages.into_iter().find(|s| s.page_id == page_id) else {
                bail!("page {page_id} is not part of {}", book.display());
            };
            if s.image.dimensions() != page.dimensions() {
                bail!("page {page_id}: image size differs from the labelled page");
            }
            Some(s.boxes)
        }
        None => None,
    };
    let preds: Vec<_> = read_predictions(predictions)?
        .into_iter()
        .filter(|p| p.page_id == page_id)
        .collect();
    let img = render::render(&page, &preds, boxes.as_deref());
    let dir = parent_dir(out);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    config::echo(cfg, dir, "render")?;
    println!(
        "{}",
        json!({"page_id": page_id, "predictions": preds.len(), "out": out})
    );
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            out,
            books,
            prefix,
        } => synth(&common.load()?, &out, books, &prefix),
        Command::Train {
            common,
            corpus,
            out,
            preset,
            resume,
        } => {
            let mut cfg = common.load()?;
            if let Some(p) = preset {
                cfg.train.preset = p;
            }
            train(&cfg, &corpus, &out, resume.as_deref())
        }
        Command::Predict {
            common,
            checkpoint,
            out,
            inputs,
        } => predict(&common.load()?, checkpoint.as_deref(), &out, &inputs),
        Command::Eval {
            common,
            corpus,
            predictions,
            out,
        } => eval(&common.load()?, &corpus, &predictions, &out),
        Command::Render {
            common,
            image,
            predictions,
            ground_truth,
            page_id,
            out,
        } => render_page(
            &common.load()?,
            &image,
            &predictions,
            ground_truth.as_deref(),
            page_id.as_deref(),
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"command": name, "error": format!("{e:#}")}));
            ExitCode::FAILURE
        }
    }
}
