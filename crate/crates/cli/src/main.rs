use clap::{Parser, Subcommand};
use maemi::commands::{self, *};

/// Desk-scale multimodal assistant for electron micrograph analysis.
#[derive(Parser)]
#[command(name = "maemi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the instruction dataset from a teacher model (live or mock)
    Datagen(DatagenArgs),
    /// Train adapters on an instruction dataset
    Train(TrainArgs),
    /// Score candidate/reference pairs with BLEU/ROUGE/METEOR
    Eval(EvalArgs),
    /// Caption an image
    Caption(GenerateArgs),
    /// Answer a question about an image
    Vqa(GenerateArgs),
    /// Rank candidate labels for an image
    Classify(ClassifyArgs),
    /// Select demonstration images by embedding similarity
    SampleShots(SampleShotsArgs),
    /// Quantize a checkpoint's base weights to int8
    Quantize(QuantizeArgs),
    /// Finite-difference gradient self-check
    Gradcheck(GradcheckArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Datagen(args) => commands::cmd_datagen(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Caption(args) => commands::cmd_caption(args),
        Command::Vqa(args) => commands::cmd_vqa(args),
        Command::Classify(args) => commands::cmd_classify(args),
        Command::SampleShots(args) => commands::cmd_sample_shots(args),
        Command::Quantize(args) => commands::cmd_quantize(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
