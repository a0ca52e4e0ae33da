use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdg::alignment::{AlignmentMode, PaddingPattern};
use sdg::bench::{build_abc_contrast, generate_cc500, run_headtohead, DEFAULT_COLORS};
use sdg::checkpoint::{init_model, load_checkpoint, save_checkpoint, ModelWeights};
use sdg::config::RunConfig;
use sdg::dataset::{make_dataset, save_dataset};
use sdg::error::{Result, SdgError};
use sdg::mat::pearson;
use sdg::pipeline::{GuidanceMethod, Pipeline, SampleRequest};
use sdg::prompt::{concept_set, ParserSource};
use sdg::record::export_record;
use sdg::train::train;
use sdg::vocab::{default_vocab, tokenize, Vocabulary};

#[derive(Parser)]
#[command(name = "sdg", about = "Structured cross-attention guidance, toy scale")]
struct Cli {
    /// Flat `key = value` config file; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Echo the fully resolved configuration before running.
    #[arg(long, global = true)]
    print_config: bool,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the concept spans extracted from a prompt.
    Parse(ParseArgs),
    /// Sample an image for a prompt and write it plus a manifest.
    Generate(GenerateArgs),
    /// Generate the shapes dataset and train the toy model.
    Train,
    /// Build concept-conjunction prompts and run the head-to-head evaluation.
    Bench(BenchArgs),
    /// Padding-pattern / alignment-mode ablation on one prompt.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ParseArgs {
    /// Prompt text; for --parser=tree the tree's leaves are used if omitted.
    prompt: Option<String>,
    /// chunk, tree, or sg.
    #[arg(long, default_value = "chunk")]
    parser: String,
    /// Parse-tree s-expression or scene-graph file (for tree/sg).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    prompt: String,
    /// base, mv, mk, or compose.
    #[arg(long, default_value = "base")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    scale: Option<f32>,
    /// Also dump the recorded attention maps as SDGT tensors.
    #[arg(long)]
    dump_attn: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Prompt file (one per line); defaults to generated conjunctions over
    /// the dataset lexicon.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Also emit contrast pairs for this caption file.
    #[arg(long)]
    abc: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    prompt: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// full, nearest-pad, no-pad, or nearest-alone; default runs all four.
    #[arg(long)]
    padding_pattern: Option<String>,
    /// realign or naive.
    #[arg(long, default_value = "realign")]
    alignment_mode: String,
    /// base, mv, mk, or compose.
    #[arg(long, default_value = "mv")]
    mode: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.display().to_string();
    }
    Ok(cfg)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    if cfg.vocab.is_empty() {
        Ok(default_vocab())
    } else {
        Vocabulary::load(Path::new(&cfg.vocab))
    }
}

/// Trained checkpoint if one exists in the output directory, otherwise
/// freshly initialized weights (deterministic in the config seeds).
fn load_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelWeights> {
    let path = Path::new(&cfg.out_dir).join("model.sdgw");
    if path.exists() {
        load_checkpoint(&path)
    } else {
        init_model(&cfg.encoder_config(vocab.len()), &cfg.unet_config())
    }
}

fn build_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    let vocab = load_vocab(cfg)?;
    let model = load_model(cfg, &vocab)?;
    Ok(Pipeline::new(model, vocab, cfg.diffusion_config()?))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{cfg}");
    }
    match &cli.command {
        Command::Parse(args) => cmd_parse(&cfg, args),
        Command::Generate(args) => cmd_generate(&cfg, args),
        Command::Train => cmd_train(&cfg),
        Command::Bench(args) => cmd_bench(&cfg, args),
        Command::Ablate(args) => cmd_ablate(&cfg, args),
    }
}

fn cmd_parse(cfg: &RunConfig, args: &ParseArgs) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let read = |what: &str| -> Result<String> {
        let path = args
            .input
            .as_ref()
            .ok_or_else(|| SdgError::Config(format!("--parser={what} requires --input")))?;
        Ok(std::fs::read_to_string(path)?)
    };
    let (source, prompt) = match args.parser.as_str() {
        "chunk" => (ParserSource::Chunker, args.prompt.clone()),
        "tree" => {
            let tree = sdg::parse_tree::parse_sexpr(&read("tree")?)?;
            let prompt = args.prompt.clone().or_else(|| Some(tree.leaves().join(" ")));
            (ParserSource::Tree(tree), prompt)
        }
        "sg" => (
            ParserSource::SceneGraph(sdg::scene_graph::parse_scene_graph(&read("sg")?)?),
            args.prompt.clone(),
        ),
        other => return Err(SdgError::Config(format!("unknown parser '{other}'"))),
    };
    let prompt = prompt.ok_or_else(|| SdgError::Config("missing prompt".into()))?;
    let tokens = tokenize(&prompt, &vocab)?;
    let set = concept_set(&prompt, &source, &tokens, &vocab)?;
    for span in &set.spans {
        println!("{}\t{}..{}", span.text, span.token_start, span.token_end);
    }
    if set.dropped > 0 {
        eprintln!("note: {} concepts dropped by the cap", set.dropped);
    }
    Ok(())
}

fn method_of(s: &str) -> Result<GuidanceMethod> {
    GuidanceMethod::parse(s).ok_or_else(|| SdgError::Config(format!("unknown mode '{s}'")))
}

fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(scale) = args.scale {
        cfg.guidance_scale = scale;
    }
    let pipeline = build_pipeline(&cfg)?;
    let req = SampleRequest::new(&args.prompt, method_of(&args.mode)?, args.seed);
    let mut rec = pipeline.sample(&req)?;
    if !args.dump_attn {
        rec.attention.clear();
    }
    let dir = PathBuf::from(&cfg.out_dir);
    let stem = format!("gen_{}_seed{}", rec.mode, args.seed);
    let manifest = export_record(&rec, &dir, &stem)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let shapes = cfg.shapes_config();
    let samples = make_dataset(&shapes)?;
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    let manifest = save_dataset(&dir.join("dataset"), &samples)?;
    println!("dataset: {}", manifest.display());
    let init = init_model(&cfg.encoder_config(vocab.len()), &cfg.unet_config())?;
    let out = train(&samples, init, &vocab, &cfg.diffusion_config()?, &cfg.train_config())?;
    for (step, loss) in &out.losses {
        println!("step {step}: loss {loss:.6}");
    }
    let path = dir.join("model.sdgw");
    save_checkpoint(&path, &out.model)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, args: &BenchArgs) -> Result<()> {
    let pipeline = build_pipeline(cfg)?;
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;

    if let Some(path) = &args.abc {
        let captions = std::fs::read_to_string(path)?;
        let colors: Vec<String> = DEFAULT_COLORS.iter().map(|s| s.to_string()).collect();
        let (pairs, skipped) = build_abc_contrast(&captions, &colors, &pipeline.vocab);
        let out = dir.join("abc_pairs.tsv");
        let text: String = pairs.iter().map(|p| p.to_line() + "\n").collect();
        std::fs::write(&out, text)?;
        println!("abc pairs: {} ({} captions skipped) -> {}", pairs.len(), skipped, out.display());
    }

    let shapes = cfg.shapes_config();
    let prompts = match &args.prompts {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        None => {
            let colors: Vec<String> = shapes.colors.iter().map(|(n, _)| n.clone()).collect();
            let objects: Vec<String> =
                shapes.shapes.iter().map(|s| s.as_str().to_string()).collect();
            generate_cc500(&colors, &objects, cfg.bench_prompts, cfg.seed)?
        }
    };
    let prompts_path = dir.join("bench_prompts.txt");
    std::fs::write(&prompts_path, prompts.join("\n") + "\n")?;

    let seeds: Vec<u64> = (0..cfg.bench_seeds as u64).map(|i| cfg.seed + i).collect();
    let report = run_headtohead(&pipeline, &prompts, &GuidanceMethod::ALL, &seeds, &shapes)?;
    let report_path = dir.join("eval_report.txt");
    std::fs::write(&report_path, report.to_key_values())?;
    print!("{}", report.to_table());
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<()> {
    let pipeline = build_pipeline(cfg)?;
    let dir = PathBuf::from(&cfg.out_dir);
    let alignment = AlignmentMode::parse(&args.alignment_mode)
        .ok_or_else(|| SdgError::Config(format!("unknown alignment '{}'", args.alignment_mode)))?;
    let patterns: Vec<PaddingPattern> = match &args.padding_pattern {
        Some(s) => vec![PaddingPattern::parse(s)
            .ok_or_else(|| SdgError::Config(format!("unknown padding pattern '{s}'")))?],
        None => PaddingPattern::ALL.to_vec(),
    };

    let zt = pipeline.initial_latent(args.seed);
    let mut runs = Vec::new();
    for &padding in &patterns {
        let req = SampleRequest {
            prompt: args.prompt.clone(),
            method: method_of(&args.mode)?,
            parser: ParserSource::Chunker,
            alignment,
            padding,
            seed: args.seed,
        };
        let rec = pipeline.sample_from(&req, Some(zt.clone()))?;
        let stem = format!("ablate_{}_seed{}", padding.as_str(), args.seed);
        export_record(&rec, &dir, &stem)?;
        runs.push((padding, rec));
    }

    // Latent correlation of each pattern against the first listed pattern.
    println!("{:<16} {:>12}", "pattern", "z0 corr");
    let reference = runs[0].1.z0.clone();
    for (padding, rec) in &runs {
        println!("{:<16} {:>12.6}", padding.as_str(), pearson(&reference, &rec.z0));
    }
    Ok(())
}
