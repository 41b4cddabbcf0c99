//! The CLI subcommands. Each returns `Ok(())` on success; errors map to the
//! fixed exit-code table in [`crate::error`].

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::Args;
use maemi_core::checkpoint::{load_checkpoint, save_checkpoint, ModelBundle};
use maemi_core::fusion::{FusionModel, GenStrategy, VisualInput};
use maemi_core::gradcheck;
use maemi_core::metrics;
use maemi_core::prng::Prng;
use maemi_core::trainer;
use maemi_core::vision::VisionEncoder;
use maemi_core::vocab;
use maemi_datagen::client::TeacherClient;
use maemi_datagen::dataset::{self, SplitFractions};
use maemi_datagen::sampling;

use crate::config::CliConfig;
use crate::error::{CliError, Result};
use crate::pipeline;

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Directory of images (optionally in per-category subdirectories)
    #[arg(long)]
    pub images: PathBuf,
    /// Output JSONL file
    #[arg(long)]
    pub out: PathBuf,
    /// Offline mock-answer directory (no network)
    #[arg(long, conflicts_with = "endpoint")]
    pub mock: Option<PathBuf>,
    /// Live teacher endpoint URL
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Config file (teacher section applies in live mode)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also ask for short answers (two records per question)
    #[arg(long)]
    pub both_styles: bool,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
}

pub fn cmd_datagen(args: &DatagenArgs) -> Result<()> {
    let cfg = CliConfig::load(args.config.as_deref())?;
    cfg.echo();
    let client = match (&args.mock, &args.endpoint) {
        (Some(dir), _) => TeacherClient::mock(dir),
        (None, endpoint) => {
            let t = &cfg.teacher;
            let url = endpoint.as_deref().unwrap_or(&t.endpoint);
            TeacherClient::live(url, &t.model, &t.api_key_env)
                .with_timeout(Duration::from_secs(t.timeout_secs))
                .with_max_retries(t.max_retries)
        }
    };
    let fractions = SplitFractions {
        train: args.train_frac,
        val: args.val_frac,
        test: args.test_frac,
    };
    let report = dataset::generate_dataset(
        &args.images,
        &client,
        &args.out,
        fractions,
        args.seed,
        args.both_styles,
    )?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Instruction dataset JSONL
    #[arg(long)]
    pub data: PathBuf,
    /// Directory the dataset's image paths are relative to
    #[arg(long)]
    pub images: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Quantize base weights before saving
    #[arg(long)]
    pub quantize: bool,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = CliConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(batch) = args.batch {
        cfg.train.batch = batch;
    }
    // the train section owns the rank range; keep the model in lockstep
    cfg.fusion.r_min = cfg.train.r_min;
    cfg.fusion.r_max = cfg.train.r_max;
    cfg.echo();

    let records = dataset::load_dataset(&args.data)?;
    if records.is_empty() {
        return Err(CliError::Runtime("dataset is empty".into()));
    }
    let vocab = pipeline::build_vocab_for_records(&records)?;
    let (train_set, val_set, _test) = pipeline::split_samples(&records, &vocab)?;

    let mut prng = Prng::new(cfg.train.seed);
    let encoder = VisionEncoder::<f64>::init(cfg.vision.clone(), &mut prng)?;
    let states = pipeline::vision_states(
        &encoder,
        &args.images,
        records.iter().map(|r| r.image.as_str()),
    )?;
    let mut model = FusionModel::<f64>::init(cfg.fusion.clone(), vocab.size(), &mut prng)?;

    let outcome = trainer::train(&mut model, &states, &train_set, &val_set, &cfg.train)?;
    for rec in &outcome.history {
        println!(
            "epoch {} train_loss={:.6} val_loss={:.6} lr={:.3e} halved={}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.lr, rec.halved
        );
    }
    println!(
        "best_val={:.6} stopped_early={} halvings={:?}",
        outcome.best_val, outcome.stopped_early, outcome.halvings
    );

    let mut fusion = outcome.best_model;
    if args.quantize {
        fusion.quantize_base()?;
    }
    let bundle = ModelBundle {
        fusion,
        vision: encoder,
        vocab,
        train: Some(cfg.train.clone()),
        epoch: outcome.history.len(),
        history: outcome.history,
    };
    save_checkpoint(&args.out, &bundle)?;
    println!("saved checkpoint to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL of {"id", "reference", "candidate"} pairs
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output JSON report path
    #[arg(long)]
    pub report: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let file = std::fs::File::open(&args.pairs)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.pairs.display())))?;
    let pairs = metrics::read_pairs(std::io::BufReader::new(file))?;
    let report = metrics::evaluate_corpus(&pairs)?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::File::create(&args.report)?.write_all(json.as_bytes())?;
    print!("{}", metrics::render_table(&report));
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Question to answer (captioning uses a fixed describe instruction)
    #[arg(long)]
    pub question: Option<String>,
    /// Auxiliary image description for the prompt
    #[arg(long)]
    pub description: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Adapter rank at inference time
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample with this softmax temperature instead of greedy decoding
    #[arg(long)]
    pub temperature: Option<f64>,
}

fn generate_text(args: &GenerateArgs, default_question: &str) -> Result<String> {
    let bundle = load_checkpoint::<f64>(&args.ckpt)?;
    let states = pipeline::encode_image(&bundle.vision, &args.image)?;
    let question = args.question.as_deref().unwrap_or(default_question);
    let description = args
        .description
        .clone()
        .unwrap_or_else(|| pipeline::description_for(None));
    let prompt = vocab::assemble_prompt(&bundle.vocab, &description, question)?;
    let rank = args.rank.unwrap_or(bundle.fusion.cfg.r_max);
    let strategy = match args.temperature {
        Some(tau) => GenStrategy::Temperature(tau),
        None => GenStrategy::Greedy,
    };
    let mut prng = Prng::new(args.seed);
    let ids = bundle.fusion.generate(
        &prompt.ids,
        prompt.image_slot,
        VisualInput::Full(&states),
        rank,
        args.max_new,
        strategy,
        &mut prng,
    )?;
    Ok(vocab::decode_text(&bundle.vocab, &ids))
}

pub fn cmd_caption(args: &GenerateArgs) -> Result<()> {
    println!("{}", generate_text(args, "describe the image.")?);
    Ok(())
}

pub fn cmd_vqa(args: &GenerateArgs) -> Result<()> {
    if args.question.is_none() {
        return Err(CliError::Usage("vqa requires --question".into()));
    }
    println!("{}", generate_text(args, "")?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated candidate labels
    #[arg(long)]
    pub labels: String,
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_classify(args: &ClassifyArgs) -> Result<()> {
    let labels: Vec<&str> = args
        .labels
        .split(',')
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect();
    let bundle = load_checkpoint::<f64>(&args.ckpt)?;
    let states = pipeline::encode_image(&bundle.vision, &args.image)?;
    let rank = args.rank.unwrap_or(bundle.fusion.cfg.r_max);
    let mut prng = Prng::new(args.seed);
    let ranked = bundle.fusion.classify_labels(
        &bundle.vocab,
        &pipeline::description_for(None),
        "what type of nanomaterial is depicted in the image?",
        VisualInput::Full(&states),
        &labels,
        rank,
        &mut prng,
    )?;
    for (idx, score) in ranked.into_iter().take(args.topk) {
        println!("{}\t{score:.6}", labels[idx]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ShotStrategy {
    /// Most similar overall (few-shot demonstrations)
    Topk,
    /// Most dissimilar within the target's class
    Intra,
    /// Most similar across other classes
    Inter,
}

#[derive(Debug, Args)]
pub struct SampleShotsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Corpus directory (per-category subdirectories supply class labels)
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum)]
    pub strategy: ShotStrategy,
    /// Target class label; required for intra/inter strategies
    #[arg(long)]
    pub label: Option<String>,
}

pub fn cmd_sample_shots(args: &SampleShotsArgs) -> Result<()> {
    let bundle = load_checkpoint::<f64>(&args.ckpt)?;
    let images = dataset::discover_images(&args.corpus)?;
    let mut embeddings = Vec::new();
    for (rel, _) in &images {
        let states = pipeline::encode_image(&bundle.vision, &args.corpus.join(rel))?;
        embeddings.push(states.row(0).to_vec()); // h_cls row
    }
    let dim = embeddings[0].len();
    let corpus = maemi_core::tensor::Tensor::from_vec(
        &[embeddings.len(), dim],
        embeddings.concat(),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let target = pipeline::encode_image(&bundle.vision, &args.image)?
        .row(0)
        .to_vec();

    let picked = match args.strategy {
        ShotStrategy::Topk => sampling::select_few_shot(&target, &corpus, args.k)?,
        ShotStrategy::Intra | ShotStrategy::Inter => {
            let label = args.label.as_deref().ok_or_else(|| {
                CliError::Usage("intra/inter strategies require --label".into())
            })?;
            let labels: Vec<String> = images
                .iter()
                .map(|(_, cat)| cat.clone().unwrap_or_default())
                .collect();
            let label = label.to_string();
            if args.strategy == ShotStrategy::Intra {
                sampling::select_intra_dissimilar(&target, &corpus, &labels, &label, args.k)?
            } else {
                sampling::select_inter_similar(&target, &corpus, &labels, &label, args.k)?
            }
        }
    };
    for idx in picked {
        println!("{}", images[idx].0);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    let mut bundle = load_checkpoint::<f64>(&args.ckpt)?;
    bundle.fusion.quantize_base()?;
    save_checkpoint(&args.out, &bundle)?;
    println!("saved quantized checkpoint to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let report = gradcheck::run_all(args.seed)?;
    for r in &report.results {
        println!(
            "gradcheck {}: max_rel_err={:.3e} threshold={:.1e} {}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}
