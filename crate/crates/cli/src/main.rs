use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use attnseg::attention::TimestepRange;
use attnseg::fixtures::FixtureSet;
use attnseg::mask::{adopt_pseudo_labels, read_mask, write_mask, Normalization};
use attnseg::pipeline::{
    evaluate_dirs, fixture_container_dirs, load_fixture_dir, make_fixture_dir, run_ablation, run_generate,
    write_json, AblationGrid, DecisionResolution, PipelineConfig, UncertainScoring,
};
use attnseg::prompt::{build_prompts, load_captions, plan_dataset, ClassVocabulary};

#[derive(Parser)]
#[command(name = "attnseg", version, about = "Segmentation masks from diffusion attention dumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build generation prompts from captions.
    #[command(subcommand)]
    Prompts(PromptsCmd),
    /// Fabricate synthetic scenes with ground truth.
    #[command(subcommand)]
    Fixtures(FixturesCmd),
    /// Synthesize or replace masks.
    #[command(subcommand)]
    Masks(MasksCmd),
    /// Score masks.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Score a grid of pipeline settings over a fixture directory.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum PromptsCmd {
    Build(PromptsBuild),
}

#[derive(Args)]
struct PromptsBuild {
    /// JSON list of {caption, classes, provenance?}.
    #[arg(long)]
    captions: PathBuf,
    /// Class vocabulary JSON; PASCAL VOC when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Images to plan per class.
    #[arg(long, default_value_t = 2000)]
    per_class: u64,
    /// Most classes appended to one caption.
    #[arg(long, default_value_t = attnseg::prompt::DEFAULT_TOP_K)]
    limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the plan here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FixturesCmd {
    Make {
        /// Fixture set JSON: {"scenes": [...], "random": {...}}.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, env = "ATTNSEG_FIXTURES")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MasksCmd {
    Generate(GenerateArgs),
    /// Replace an initial mask with a segmenter's prediction.
    Adopt {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DecideAt {
    Image,
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum UncertainPolicy {
    Background,
    Ignore,
}

impl From<UncertainPolicy> for UncertainScoring {
    fn from(p: UncertainPolicy) -> Self {
        match p {
            UncertainPolicy::Background => UncertainScoring::Background,
            UncertainPolicy::Ignore => UncertainScoring::Ignore,
        }
    }
}

/// Pipeline settings; flags override the config file, which overrides
/// defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long, env = "ATTNSEG_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<u32>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    cross_scale: Option<u16>,
    #[arg(long)]
    self_scale: Option<u16>,
    /// Inclusive timestep window, e.g. 50:100.
    #[arg(long, value_parser = parse_range)]
    timesteps: Option<TimestepRange>,
    #[arg(long, value_enum)]
    decide_at: Option<DecideAt>,
    /// Skip per-channel min-max normalization.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, value_enum)]
    uncertain: Option<UncertainPolicy>,
    #[arg(long)]
    exclude_background: bool,
}

fn parse_range(s: &str) -> Result<TimestepRange, String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| e.to_string());
    Ok(TimestepRange { lo: parse(lo)?, hi: parse(hi)? })
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.cross_scale {
            cfg.cross_scale = v;
        }
        if let Some(v) = self.self_scale {
            cfg.self_scale = v;
        }
        if self.timesteps.is_some() {
            cfg.timestep_range = self.timesteps;
        }
        match self.decide_at {
            Some(DecideAt::Image) => cfg.decide_at = DecisionResolution::Image,
            Some(DecideAt::Grid) => cfg.decide_at = DecisionResolution::AttentionGrid,
            None => {}
        }
        if self.no_normalize {
            cfg.normalization = Normalization::None;
        }
        if let Some(p) = self.uncertain {
            cfg.uncertain_scoring = p.into();
        }
        if self.exclude_background {
            cfg.include_background = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Container directories. A directory without a manifest is searched
    /// one level deep.
    #[arg(required = true, env = "ATTNSEG_CONTAINERS", value_delimiter = ',')]
    containers: Vec<PathBuf>,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long, env = "ATTNSEG_OUT")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Also write palette-coloured masks.
    #[arg(long)]
    color: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Subcommand)]
enum EvalCmd {
    Miou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Class vocabulary JSON; PASCAL VOC when omitted.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long)]
        exclude_background: bool,
        /// How 255 in predictions is scored; without it, 255 is rejected.
        #[arg(long, value_enum)]
        uncertain: Option<UncertainPolicy>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AblateArgs {
    /// Directory written by `fixtures make`.
    #[arg(long, env = "ATTNSEG_FIXTURES")]
    fixtures: PathBuf,
    /// Grid JSON: {"taus": [...], "alpha_beta": [[a, b], ...], "cross_scales": [...], "self_scales": [...]}.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn load_vocab(path: Option<&Path>) -> Result<ClassVocabulary> {
    Ok(match path {
        Some(p) => ClassVocabulary::load(p)?,
        None => ClassVocabulary::pascal_voc(),
    })
}

fn expand_containers(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.join(attnseg::store::MANIFEST_FILE).exists() {
            out.push(input.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(input)
            .with_context(|| format!("reading {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        if children.is_empty() {
            // Left in so the run reports it as a failed container.
            out.push(input.clone());
        }
        out.extend(children);
    }
    Ok(out)
}

fn prompts_build(args: &PromptsBuild) -> Result<ExitCode> {
    let vocab = load_vocab(args.vocab.as_deref())?;
    let captions = load_captions(&args.captions)?;
    let specs = build_prompts(&captions, &vocab, args.limit)?;
    let plan = plan_dataset(&specs, args.per_class, args.seed, &[])?;
    let text = serde_json::to_string_pretty(&plan)?;
    match &args.out {
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    eprintln!(
        "{} prompts, {} planned images, {} class incidences",
        specs.len(),
        plan.items.len(),
        plan.class_incidences()
    );
    Ok(ExitCode::SUCCESS)
}

fn masks_generate(args: &GenerateArgs) -> Result<ExitCode> {
    let mut cfg = args.config.resolve()?;
    cfg.color_masks |= args.color;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir in the config")?;
    let dirs = expand_containers(&args.containers)?;
    let (report, timing) = run_generate(&cfg, &dirs, &out, args.workers)?;
    for row in report.rows.iter().filter(|r| !r.ok) {
        eprintln!("failed {}: {}", row.container, row.error.as_deref().unwrap_or("unknown error"));
    }
    eprintln!(
        "{} masks, {} failed, {:.0} ms",
        report.rows.len() - report.failures(),
        report.failures(),
        timing.total_ms
    );
    Ok(if report.failures() == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn masks_adopt(original: &Path, predicted: &Path, vocab: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let vocab = load_vocab(vocab)?;
    let original = read_mask(original)?;
    let predicted = read_mask(predicted)?;
    let adoption = adopt_pseudo_labels(&original, &predicted, &vocab)?;
    write_mask(&adoption.mask, out)?;
    if !adoption.introduced.is_empty() {
        eprintln!("prediction introduces classes absent from the original: {:?}", adoption.introduced);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prompts(PromptsCmd::Build(args)) => prompts_build(args),
        Command::Fixtures(FixturesCmd::Make { spec, out }) => (|| {
            let scenes = FixtureSet::load(spec)?.all_scenes();
            if scenes.is_empty() {
                bail!("{} lists no scenes", spec.display());
            }
            make_fixture_dir(&scenes, out)?;
            eprintln!("{} scenes written to {}", scenes.len(), out.display());
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Masks(MasksCmd::Generate(args)) => masks_generate(args),
        Command::Masks(MasksCmd::Adopt { original, predicted, vocab, out }) => {
            masks_adopt(original, predicted, vocab.as_deref(), out)
        }
        Command::Eval(EvalCmd::Miou { pred, gt, classes, exclude_background, uncertain, json }) => (|| {
            let vocab = load_vocab(classes.as_deref())?;
            let report = evaluate_dirs(pred, gt, &vocab, !exclude_background, uncertain.map(Into::into))
                .with_context(|| match uncertain {
                    None => "scoring masks (use --uncertain to score 255 pixels)",
                    Some(_) => "scoring masks",
                })?;
            print!("{}", report.to_text());
            if let Some(path) = json {
                write_json(path, &report)?;
            }
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Ablate(args) => (|| {
            let base = args.config.resolve()?;
            let text = fs::read_to_string(&args.grid).with_context(|| format!("reading {}", args.grid.display()))?;
            let grid: AblationGrid = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.grid.display()))?;
            let cases = load_fixture_dir(&args.fixtures)?;
            let table = run_ablation(&grid, &base, &cases)?;
            print!("{}", table.to_text());
            if let Some(path) = &args.json {
                let doc: BTreeMap<&str, serde_json::Value> = [
                    ("fixtures", serde_json::json!(fixture_container_dirs(&args.fixtures)?.len())),
                    ("rows", serde_json::to_value(&table.rows)?),
                ]
                .into_iter()
                .collect();
                write_json(path, &doc)?;
            }
            Ok(ExitCode::SUCCESS)
        })(),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
