use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xalign::data::{generate_synthetic, raster_from_file, DatasetManifest, RasterFormat, Split, SyntheticSpec};
use xalign::eval::oracle::oracle_metrics;
use xalign::eval::{evaluate, rank_csv, rank_gallery, Cutoffs, EvalReport, EvalSet};
use xalign::gradcheck;
use xalign::text::{
    generate_descriptions, DescriptionSet, EndpointClient, GenerateOptions, HttpClient, OfflineCorpus, PromptTemplate,
    ResponseCache,
};
use xalign::train::{Checkpoint, StepLog, Trainer};
use xalign::vision::Modality;
use xalign::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "xalign", version, about = "Zero-shot sketch-based image retrieval with text-bridged cross-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic glyph corpus with its manifest and offline description corpus.
    SynthData(SynthArgs),
    /// Produce per-category descriptions for the seen categories.
    GenDescriptions(GenArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate(EvalArgs),
    /// Rank a gallery for a single query sketch.
    Retrieve(RetrieveArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Grid,
}

#[derive(Args)]
struct SynthArgs {
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Sketches and images per category.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["offline_corpus", "endpoint"])))]
struct GenArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Prompt template id (1-4).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    template: u8,
    /// JSONL corpus served in place of a language model.
    #[arg(long)]
    offline_corpus: Option<PathBuf>,
    /// HTTP completion endpoint.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, env = "XALIGN_LLM_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Completions requested per category.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 3)]
    attempts: usize,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Shipped profile (desk, paper).
    #[arg(long)]
    profile: Option<String>,
    /// Dotted-key override, e.g. `train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || self.profile.is_some() || !self.overrides.is_empty()
    }

    fn resolve(&self) -> xalign::Result<RunConfig> {
        match (&self.config, &self.profile) {
            (Some(path), _) => RunConfig::load(path, &self.overrides),
            (None, Some(p)) => RunConfig::profile(p)?.with_overrides(&self.overrides),
            (None, None) => RunConfig::desk().with_overrides(&self.overrides),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    out: PathBuf,
    /// Stop after this many total steps instead of the configured epochs.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write a checkpoint every this many steps.
    #[arg(long)]
    save_every: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Refuse the checkpoint unless it was trained with this configuration.
    #[command(flatten)]
    config: ConfigArgs,
    /// Manifest to evaluate on; defaults to the one in the checkpoint config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "unseen", value_parser = parse_split)]
    split: Split,
    /// Report path (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute every metric with the brute-force oracle and require equality.
    #[arg(long)]
    oracle: bool,
    /// Per-query ranking CSV.
    #[arg(long)]
    ranks_csv: Option<PathBuf>,
    /// Rows per query in the ranking CSV.
    #[arg(long)]
    ranks_top: Option<usize>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query sketch (PNG or float grid).
    #[arg(long)]
    sketch: PathBuf,
    /// Manifest whose images form the gallery.
    #[arg(long)]
    gallery: PathBuf,
    /// Restrict the gallery to one split.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    /// Suites to run: all, ops, composites, or suite names.
    #[arg(long = "module", default_value = "all", value_delimiter = ',')]
    modules: Vec<String>,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Runs the command line given in `args` (program name first) and returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::GenDescriptions(a) => gen_descriptions(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn synth_data(a: SynthArgs) -> CmdResult {
    if !a.out.is_dir() {
        return Err(Failure::Usage(format!("output directory {} does not exist", a.out.display())));
    }
    let spec = SyntheticSpec {
        seed: a.seed,
        instances_per_modality: a.instances,
        image_size: a.image_size,
        format: match a.format {
            Format::Png => RasterFormat::Png,
            Format::Grid => RasterFormat::FloatGrid,
        },
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(&spec, &a.out)?;
    eprintln!("manifest digest {}", manifest.digest());
    println!("{}", a.out.join("manifest.json").display());
    Ok(())
}

fn gen_descriptions(a: GenArgs) -> CmdResult {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let template = PromptTemplate::builtin(a.template)?;
    let client: Box<dyn EndpointClient> = match (&a.offline_corpus, &a.endpoint) {
        (Some(path), _) => Box::new(OfflineCorpus::load(path)?),
        (None, Some(url)) => {
            Box::new(HttpClient::new(url.clone(), a.api_key.clone()).with_timeout(Duration::from_secs(a.timeout_secs)))
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let cache = a.cache.as_ref().map(ResponseCache::new).transpose()?;
    let opts = GenerateOptions {
        k: a.k,
        concurrency: a.concurrency,
        attempts: a.attempts,
        ..GenerateOptions::default()
    };
    let seen = manifest.category_names(true);
    let set = generate_descriptions(&seen, &template, client.as_ref(), cache.as_ref(), &opts)?;
    set.write(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn load_descriptions(config: &RunConfig) -> xalign::Result<Option<DescriptionSet>> {
    match config.train.text_mode {
        xalign::train::TextMode::Full => DescriptionSet::read(&config.data.descriptions).map(Some),
        xalign::train::TextMode::NoText => Ok(None),
    }
}

fn train(a: TrainArgs) -> CmdResult {
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if a.config.given() {
                let wanted = a.config.resolve()?.digest();
                if wanted != ckpt.config_digest() {
                    return Err(Failure::Runtime(format!(
                        "config digest mismatch: checkpoint has {}, flags give {wanted}",
                        ckpt.config_digest()
                    )));
                }
            }
            let manifest = DatasetManifest::load(&ckpt.config.data.manifest)?;
            let descriptions = load_descriptions(&ckpt.config)?;
            Trainer::resume(ckpt, &manifest, descriptions.as_ref())?
        }
        None => {
            let config = a.config.resolve()?;
            let manifest = DatasetManifest::load(&config.data.manifest)?;
            let descriptions = load_descriptions(&config)?;
            Trainer::new(config, &manifest, descriptions.as_ref())?
        }
    };
    let total = a.steps.unwrap_or_else(|| trainer.total_steps());
    let eval_every = trainer.config.train.eval_every as u64;
    let eval_set = if eval_every > 0 {
        let manifest = DatasetManifest::load(&trainer.config.data.manifest)?;
        let m = &trainer.config.model;
        Some(EvalSet::load(&manifest, Split::SeenTest, m.image_size, m.channels)?)
    } else {
        None
    };
    let log_path = a.out.join("train.jsonl");
    let mut log = String::new();
    if a.resume.is_some() {
        log = fs::read_to_string(&log_path).unwrap_or_default();
    }
    let ckpt_path = a.out.join("model.ckpt");
    if !a.quiet {
        eprintln!(
            "training {} steps ({} per epoch), config digest {}",
            total,
            trainer.steps_per_epoch(),
            trainer.config.digest()
        );
    }
    fs::write(a.out.join("config.toml"), trainer.config.to_toml())
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    while trainer.step < total {
        let entry = trainer.step_once()?;
        log.push_str(&entry.to_json());
        log.push('\n');
        if !a.quiet && (entry.step % 20 == 0 || entry.step == total) {
            print_step(&entry);
        }
        if let Some(set) = &eval_set {
            if entry.step % eval_every == 0 {
                let e = evaluate(&trainer.model, set, &Cutoffs::default())?;
                let line = serde_json::json!({"step": entry.step, "eval": "seen-test", "map_all": e.report.map_all});
                log.push_str(&line.to_string());
                log.push('\n');
                if !a.quiet {
                    eprintln!("step {} seen-test mAP@all {:.4}", entry.step, e.report.map_all);
                }
            }
        }
        if a.save_every.is_some_and(|n| n > 0 && entry.step % n == 0) {
            trainer.checkpoint().save(&ckpt_path)?;
            write_log(&log_path, &log)?;
        }
    }
    trainer.checkpoint().save(&ckpt_path)?;
    write_log(&log_path, &log)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

fn print_step(s: &StepLog) {
    eprintln!("step {:>6}  l_tri {:.5}  l_rn {:.5}  total {:.5}", s.step, s.l_tri, s.l_rn, s.l_total);
}

fn write_log(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path, config: &ConfigArgs) -> Result<Checkpoint, Failure> {
    if config.given() {
        Ok(Checkpoint::load_expecting(path, &config.resolve()?.digest())?)
    } else {
        Ok(Checkpoint::load(path)?)
    }
}

fn evaluate_cmd(a: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint, &a.config)?;
    let model = ckpt.model()?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| ckpt.config.data.manifest.clone());
    let manifest = DatasetManifest::load(&manifest_path)?;
    let m = &ckpt.config.model;
    let set = EvalSet::load(&manifest, a.split, m.image_size, m.channels)?;
    let cutoffs = Cutoffs::default();
    let e = evaluate(&model, &set, &cutoffs)?;
    let report = EvalReport::new(&ckpt.config_digest(), a.split, &e.report, set.gallery.len())?;
    if a.oracle {
        let o = oracle_metrics(&set.query_side(), &set.gallery_side(), &e.scores, &cutoffs.map, &cutoffs.prec);
        let agree = o.map_all == e.report.map_all && o.map_at == e.report.map_at && o.prec_at == e.report.prec_at;
        if !agree {
            return Err(Failure::Runtime(format!(
                "oracle disagrees: mAP@all {} vs {}, mAP@k {:?} vs {:?}, Prec@k {:?} vs {:?}",
                e.report.map_all, o.map_all, e.report.map_at, o.map_at, e.report.prec_at, o.prec_at
            )));
        }
        eprintln!("oracle: all metrics agree exactly");
    }
    println!(
        "{} queries={} gallery={} mAP@all={:.4} mAP@200={:.4} Prec@100={:.4} Prec@200={:.4}",
        a.split, report.query_count, report.gallery_count, report.map_all, report.map_200, report.prec_100, report.prec_200
    );
    if let Some(path) = &a.ranks_csv {
        write_log(path, &rank_csv(&e.rankings, a.ranks_top))?;
    }
    if let Some(path) = &a.out {
        report.save(path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> CmdResult {
    if a.top == 0 {
        return Err(Failure::Usage("--top must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let m = &ckpt.config.model;
    let manifest = DatasetManifest::load(&a.gallery)?;
    let query = raster_from_file(&a.sketch, m.image_size, m.channels, Modality::Sketch, usize::MAX, "query")?;
    let splits = match a.split {
        Some(s) => vec![s],
        None => vec![Split::SeenTrain, Split::SeenTest, Split::Unseen],
    };
    let mut gallery = Vec::new();
    for split in splits {
        for entry in manifest.entries_in(split, Modality::Image) {
            gallery.push(xalign::data::load_raster(&manifest, entry, m.image_size, m.channels)?);
        }
    }
    if gallery.is_empty() {
        return Err(Failure::Runtime("gallery is empty".into()));
    }
    let ranked = rank_gallery(&model, &query, &gallery)?;
    let names = manifest.categories.iter().map(|c| (c.label, c.name.clone())).collect::<std::collections::BTreeMap<_, _>>();
    println!("{:>4}  {:<28} {:<12} {:>10}", "rank", "gallery_id", "category", "score");
    for (i, item) in ranked.items.iter().take(a.top).enumerate() {
        println!("{:>4}  {:<28} {:<12} {:>10.6}", i + 1, item.gallery_id, names[&item.label], item.score);
    }
    if let Some(path) = &a.csv {
        let mut out = String::from("rank,gallery_id,category,score\n");
        for (i, item) in ranked.items.iter().take(a.top).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i + 1, item.gallery_id, names[&item.label], item.score));
        }
        write_log(path, &out)?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradArgs) -> CmdResult {
    let names = gradcheck::select(&a.modules).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(op) = &a.corrupt {
        let op = gradcheck::OPS
            .iter()
            .find(|&&o| o == op)
            .ok_or_else(|| Failure::Usage(format!("unknown op `{op}`")))?;
        xalign::tensor::set_gradient_fault(Some(op));
    }
    let mut failed = Vec::new();
    for name in names {
        let r = gradcheck::run_suite(name, a.seed)?;
        println!("{}", r.line());
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}
