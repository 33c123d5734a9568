//! `langedit` command line: training, evaluation, single-shot inference to
//! files, toy-corpus generation and the HTTP service.

pub mod service;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use langedit_core::classifier::ToyClassifier;
use langedit_core::data::{load_split, normalize, read_image, resize_square, write_png};
use langedit_core::eval::{
    attention_heatmaps, eval_caption, interpolate_text, label_entropy_probe, pixel_losses, EntropySummary,
};
use langedit_core::nn::device;
use langedit_core::synth::{synth_generate, NUM_CLASSES};
use langedit_core::train::{eval_image, run_training};
use langedit_core::{
    load_editor, CaptionedImage, DatasetKind, Editor, EvalReport, GeneratorMode, RgbImage, RunOptions, Split,
    SynthCorpus, Tensor, TrainingConfig, Vocabulary,
};

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Parser)]
#[command(name = "langedit", version, about = "Text-guided image attribute manipulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Pixel losses (and optionally the label-entropy probe) on a split.
    Eval(EvalArgs),
    /// Edit one image with one description.
    Manipulate(ManipulateArgs),
    /// Frames between two same-length descriptions.
    Interpolate(InterpolateArgs),
    /// Per-word attention heatmaps for one image and description.
    Heatmap(HeatmapArgs),
    /// Write the synthetic shapes corpus.
    Synth(SynthArgs),
    /// Start the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, env = "LANGEDIT_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long, env = "LANGEDIT_VOCAB")]
    pub vocab: Option<PathBuf>,
}

impl ModelArgs {
    fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| sibling(&self.checkpoint, VOCAB_FILE))
    }

    fn load(&self) -> Result<Editor> {
        let vocab_path = self.vocab_path();
        let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
        let (editor, manifest) =
            load_editor(&self.checkpoint, &vocab).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        log::info!(
            "checkpoint {} ({:?}, epoch {}, {}px)",
            short(&manifest.id),
            manifest.kind,
            manifest.epoch,
            manifest.image_size
        );
        Ok(editor)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, default_value = "synth")]
    pub dataset: DatasetKind,
    /// Dataset root (`images/`, `text/`, `splits/`). With `--dataset synth`
    /// and no root, a corpus is generated in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Size of the in-memory synthetic corpus.
    #[arg(long, default_value_t = 500)]
    pub synth_n: usize,
    #[arg(long, default_value_t = 7)]
    pub synth_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, conflicts_with = "config")]
    pub mode: Option<GeneratorMode>,
    #[arg(long, default_value_t = 64, conflicts_with = "config")]
    pub image_size: usize,
    /// Full training configuration (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Built from the training captions when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "synth")]
    pub dataset: DatasetKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Also run the label-entropy probe (trains a small classifier on the
    /// training split).
    #[arg(long)]
    pub entropy: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..=16))]
    pub steps: u64,
    /// Output directory for `frame-NN.png`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Fusion scale to read (0 = deepest).
    #[arg(long)]
    pub scale: Option<usize>,
    /// Output directory: `grid.png`, one `word-NN-<word>.png` per word and
    /// `words.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    /// Fraction of items in the training split; the rest form the test split.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a parameter-free identity checkpoint matching the corpus
    /// vocabulary.
    #[arg(long)]
    pub identity_stub: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "LANGEDIT_HOST", default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, env = "LANGEDIT_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "LANGEDIT_MAX_PAYLOAD_BYTES", default_value_t = service::DEFAULT_MAX_PAYLOAD)]
    pub max_payload_bytes: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Manipulate(a) => manipulate(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}

fn corpus_vocab(items: &[CaptionedImage]) -> Vocabulary {
    Vocabulary::build(items.iter().flat_map(|i| i.captions.iter().map(String::as_str)))
}

fn load_items(args: &DataArgs, split: Split, image_size: usize) -> Result<Vec<CaptionedImage>> {
    match &args.data {
        Some(root) => load_split(root, args.dataset, split, image_size)
            .with_context(|| format!("loading {} split from {}", split.name(), root.display())),
        None if args.dataset == DatasetKind::Synth => Ok(synth_generate(args.synth_n, args.synth_seed, image_size)?.items),
        None => bail!("--data is required for the {} dataset", args.dataset),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(TrainingConfig::from_toml(&text)?)
        }
        None => None,
    };
    let image_size = config.as_ref().map_or(args.image_size, |c| c.image_size());
    let items = load_items(&args.data, Split::Train, image_size)?;
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => corpus_vocab(&items),
    };
    let mut config = config
        .take()
        .unwrap_or_else(|| {
            let mode = args.mode.unwrap_or(GeneratorMode::Multi);
            if args.data.dataset == DatasetKind::Synth && image_size == 64 {
                TrainingConfig::toy(mode, vocab.len())
            } else {
                TrainingConfig::new(mode, image_size, vocab.len())
            }
        });
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        config.checkpoint_every = v;
    }
    if args.clip_norm.is_some() {
        config.clip_norm = args.clip_norm;
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    vocab.save(&args.out.join(VOCAB_FILE))?;
    log::info!(
        "training {} mode at {}px on {} images, {} epochs, batch {}",
        config.mode(),
        image_size,
        items.len(),
        config.epochs,
        config.batch_size
    );
    let options = RunOptions {
        out_dir: args.out.clone(),
        resume: args.resume.clone(),
        stop_after: None,
    };
    let (_, summary) = run_training(config, vocab, &items, &options)?;
    match summary.checkpoints.last() {
        Some(p) => println!("checkpoint {}", p.display()),
        None => println!("no new checkpoint (already at the requested epoch)"),
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let editor = args.model.load()?;
    let items = load_split(&args.data, args.dataset, args.split, editor.image_size())
        .with_context(|| format!("loading {} split from {}", args.split.name(), args.data.display()))?;
    let losses = pixel_losses(&editor, &items, args.batch_size)?;
    let entropy = if args.entropy {
        Some(entropy_probe(&editor, &args, &items)?)
    } else {
        None
    };
    let report = EvalReport {
        checkpoint: args.model.checkpoint.display().to_string(),
        split: args.split.name().to_string(),
        losses,
        entropy,
    };
    print!("{}", report.table());
    if let Some(path) = &args.record {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Reconstructions use each item's own caption, manipulations the caption of
/// the next item in the split.
fn entropy_probe(editor: &Editor, args: &EvalArgs, items: &[CaptionedImage]) -> Result<EntropySummary> {
    let size = editor.image_size();
    let train = load_split(&args.data, args.dataset, Split::Train, size)?;
    let classes = match args.dataset {
        DatasetKind::Synth => NUM_CLASSES,
        _ => train.iter().chain(items).map(|i| i.label + 1).max().unwrap_or(0),
    };
    let train: Vec<CaptionedImage> = train
        .iter()
        .map(|i| Ok(CaptionedImage { image: eval_image(i, size)?, ..i.clone() }))
        .collect::<langedit_core::Result<_>>()?;
    let mut classifier = ToyClassifier::new(classes, args.seed)?;
    let accuracy = classifier.fit(&train, 8, 20, args.seed)?;
    log::info!("probe classifier training accuracy {accuracy:.3}");
    let (mut recon, mut manip) = (Vec::new(), Vec::new());
    let n = items.len();
    for start in (0..n).step_by(args.batch_size.max(1)) {
        let end = (start + args.batch_size.max(1)).min(n);
        let images = (start..end).map(|i| eval_image(&items[i], size)).collect::<langedit_core::Result<Vec<_>>>()?;
        let x = normalize(&images.iter().collect::<Vec<_>>(), editor.dtype(), &device())?;
        let own: Vec<&str> = (start..end).map(|i| eval_caption(&items[i], i)).collect();
        let other: Vec<&str> = (start..end).map(|i| eval_caption(&items[(i + 1) % n], i)).collect();
        recon.extend(label_entropy_probe(&classifier, &editor.manipulate(&x, &own)?.image, classes)?);
        manip.extend(label_entropy_probe(&classifier, &editor.manipulate(&x, &other)?.image, classes)?);
    }
    Ok(EntropySummary::new(&recon, &manip))
}

fn input_tensor(editor: &Editor, path: &Path) -> Result<(RgbImage, Tensor)> {
    let image = resize_square(
        &read_image(path).with_context(|| format!("reading {}", path.display()))?,
        editor.image_size(),
    );
    let x = normalize(&[&image], editor.dtype(), &device())?;
    Ok((image, x))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn manipulate(args: ManipulateArgs) -> Result<()> {
    let editor = args.model.load()?;
    let (_, x) = input_tensor(&editor, &args.image)?;
    let out = editor.manipulate(&x, &[args.text.as_str()])?;
    let image = langedit_core::data::denormalize(&out.image)?.remove(0);
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_png(&args.out, &image)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn interpolate(args: InterpolateArgs) -> Result<()> {
    let editor = args.model.load()?;
    let (_, x) = input_tensor(&editor, &args.image)?;
    let frames = interpolate_text(&editor, &x, &args.from, &args.to, args.steps as usize)?;
    create_dir(&args.out)?;
    for (k, frame) in frames.iter().enumerate() {
        let image = langedit_core::data::denormalize(frame)?.remove(0);
        write_png(&args.out.join(format!("frame-{k:02}.png")), &image)?;
    }
    println!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

fn heatmap(args: HeatmapArgs) -> Result<()> {
    let editor = args.model.load()?;
    let (source, x) = input_tensor(&editor, &args.image)?;
    let set = attention_heatmaps(&editor, &x, &args.text, args.scale)?;
    create_dir(&args.out)?;
    write_png(&args.out.join("grid.png"), &set.grid(&source))?;
    for (k, word) in set.words.iter().enumerate() {
        let name: String = word.chars().filter(|c| c.is_alphanumeric()).collect();
        let path = args.out.join(format!("word-{k:02}-{name}.png"));
        std::fs::write(&path, set.map_png(k)?).with_context(|| format!("writing {}", path.display()))?;
    }
    let meta = serde_json::json!({ "words": set.words, "size": set.size });
    std::fs::write(args.out.join("words.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {} heatmaps to {}", set.words.len(), args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.train_fraction) {
        bail!("--train-fraction must be in [0, 1], got {}", args.train_fraction);
    }
    let corpus: SynthCorpus = synth_generate(args.n, args.seed, args.canvas)?;
    let vocab = corpus_vocab(&corpus.items);
    let train = (args.n as f64 * args.train_fraction).round() as usize;
    if let Some(out) = &args.out {
        corpus.write(out, train)?;
        vocab.save(&out.join(VOCAB_FILE))?;
        log::info!("wrote {} train / {} test items to {}", train, args.n - train, out.display());
    }
    if let Some(stub) = &args.identity_stub {
        if let Some(dir) = stub.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        let manifest = langedit_core::checkpoint::save_identity(stub, &vocab, args.canvas)?;
        let vocab_path = sibling(stub, VOCAB_FILE);
        if !vocab_path.exists() {
            vocab.save(&vocab_path)?;
        }
        log::info!("identity checkpoint {} ({})", stub.display(), short(&manifest.id));
    }
    println!("corpus {} items {} vocab {}", corpus.digest(), corpus.len(), vocab.hash());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = service::ServiceConfig {
        checkpoint: args.model.checkpoint.clone(),
        vocab: args.model.vocab_path(),
        max_payload_bytes: args.max_payload_bytes,
    };
    let addr = SocketAddr::new(args.host, args.port);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(service::serve(config, addr))
}
