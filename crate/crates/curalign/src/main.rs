//! Pipeline driver: synthesize or ingest a corpus, build the ontology,
//! train the aligner, evaluate checkpoints, and inspect intermediate state.
//!
//! Exit codes: 0 on success, 1 for usage and validation problems, 2 for
//! failures during the work itself.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use curalign::corpus::{
    self, CaptionRecord, ImageRecord, Triplet, TripletDataset,
};
use curalign::manifest::RunManifest;
use curalign::ontology::{build_for_dataset, Ontology};
use curalign::retrieval::{
    build_hard_pools, eval_ontology, evaluate, evaluate_hard_pools, Direction, EvalSet,
};
use curalign::sampler::{CurriculumConfig, SamplerState};
use curalign::synth::{generate, SynthConfig};
use curalign::trainer::{
    self, checkpoint, ModelConfig, TrainConfig,
};
use curalign::Error;

#[derive(Parser)]
#[command(name = "curalign", version, about = "Curriculum-sampled contrastive alignment of caption nouns and image regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a known noun-to-class mapping
    Synth(SynthArgs),
    /// Map caption nouns to object classes by mutual information and extract triplets
    Ingest(IngestArgs),
    /// Group triplets under the entity/object ontology and save it
    BuildOntology(BuildOntologyArgs),
    /// Train the aligner, checkpointing into the output directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on an eval set
    Eval(EvalArgs),
    /// Print ontology nodes and sizes
    InspectOntology(InspectOntologyArgs),
    /// Print the refresh-by-refresh curriculum schedule as CSV
    InspectCurriculum(InspectCurriculumArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images.jsonl, captions.jsonl, gold_map.json
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    contexts: usize,
    #[arg(long, default_value_t = 200)]
    pairs_per_class: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 3)]
    regions: usize,
    #[arg(long, default_value_t = 1.0)]
    object_scale: f64,
    #[arg(long, default_value_t = 0.7)]
    context_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_scale: f64,
    /// Chance that each region after the first depicts another class
    #[arg(long, default_value_t = 0.0)]
    distractor_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// Candidate nouns, one per line
    #[arg(long)]
    nouns: PathBuf,
    /// Manual noun-class assignments, tab-separated, taking precedence
    #[arg(long)]
    overrides: Option<PathBuf>,
    /// Drop object classes with fewer triplets than this
    #[arg(long, default_value_t = 10)]
    min_instances: usize,
    /// Output directory for noun_map.json and triplets.jsonl
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BuildOntologyArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    noun_map: PathBuf,
    /// Output directory for ontology.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config with [data], [train], [model], [curriculum] sections
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and log.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Continue from this checkpoint directory instead of initializing;
    /// training settings come from the checkpoint, [data] from the config
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    /// Nouns query, images are candidates
    Image,
    /// Images query, nouns are candidates
    Text,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::Image => Direction::Image,
            DirectionArg::Text => Direction::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PoolArg {
    /// One pool over the whole eval set
    All,
    /// One pool per object class, candidates all containing that class
    SameObject,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory holding params.json and params.bin
    #[arg(long)]
    checkpoint: PathBuf,
    /// TOML config with [data] paths and an optional [eval] section
    #[arg(long)]
    eval_set: PathBuf,
    #[arg(long, value_enum, default_value_t = DirectionArg::Image)]
    direction: DirectionArg,
    #[arg(long, value_enum, default_value_t = PoolArg::All)]
    pool: PoolArg,
    /// Also write report.json and manifest.json here
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InspectOntologyArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    noun_map: PathBuf,
    /// Also write the full ontology JSON to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectCurriculumArgs {
    /// Ontology JSON produced by build-ontology
    #[arg(long)]
    ontology: PathBuf,
    /// Fraction of entity mass kept per refresh
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Entity-mass floor below which refreshes stop
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    /// Number of refreshes to simulate
    #[arg(long, default_value_t = 10)]
    refreshes: u64,
    /// Also write the CSV to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Runtime(format!("json error: {e}"))
    }
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::BuildOntology(args) => cmd_build_ontology(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::InspectOntology(args) => cmd_inspect_ontology(args),
        Command::InspectCurriculum(args) => cmd_inspect_curriculum(args),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

/// Creates the directory if missing; refuses a non-empty one without --force.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        if fs::read_dir(dir)?.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

/// Runs `work` between the "running" and final writes of the manifest, so
/// an aborted run still leaves a status behind.
fn with_manifest<F>(
    out: &Path,
    mut manifest: RunManifest,
    work: F,
) -> Result<(), CliError>
where
    F: FnOnce() -> Result<Vec<String>, CliError>,
{
    let path = out.join("manifest.json");
    manifest.write(&path)?;
    match work() {
        Ok(mut outputs) => {
            outputs.push("manifest.json".to_string());
            manifest.finish_ok(outputs);
            manifest.write(&path)?;
            Ok(())
        }
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Runtime(m) => m.clone(),
            };
            manifest.finish_error(&msg);
            manifest.write(&path)?;
            Err(e)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        n_classes: args.classes,
        n_contexts: args.contexts,
        pairs_per_class: args.pairs_per_class,
        d_in: args.feature_dim,
        n_regions: args.regions,
        object_scale: args.object_scale,
        context_scale: args.context_scale,
        noise_scale: args.noise_scale,
        distractor_prob: args.distractor_prob,
        seed: args.seed,
    };
    config.validate()?;
    prepare_out_dir(&args.out, args.force)?;
    let manifest = RunManifest::begin("synth", serde_json::to_value(&config)?);
    with_manifest(&args.out, manifest, || {
        let (images, captions, gold) = generate(&config)?;
        corpus::write_jsonl(&args.out.join("images.jsonl"), &images)?;
        corpus::write_jsonl(&args.out.join("captions.jsonl"), &captions)?;
        let mut text = serde_json::to_string_pretty(&gold)?;
        text.push('\n');
        fs::write(args.out.join("gold_map.json"), text)?;
        log::info!(
            "wrote {} images and captions across {} classes",
            images.len(),
            config.n_classes
        );
        Ok(vec![
            "images.jsonl".into(),
            "captions.jsonl".into(),
            "gold_map.json".into(),
        ])
    })
}

fn cmd_ingest(args: IngestArgs) -> Result<(), CliError> {
    require_file(&args.images, "images file")?;
    require_file(&args.captions, "captions file")?;
    require_file(&args.nouns, "noun list")?;
    if let Some(o) = &args.overrides {
        require_file(o, "overrides file")?;
    }
    prepare_out_dir(&args.out, args.force)?;

    let config = serde_json::json!({
        "min_instances": args.min_instances,
        "overrides": args.overrides.as_ref().map(|p| p.display().to_string()),
    });
    let mut manifest = RunManifest::begin("ingest", config);
    manifest.add_input(&args.images)?;
    manifest.add_input(&args.captions)?;
    manifest.add_input(&args.nouns)?;
    if let Some(o) = &args.overrides {
        manifest.add_input(o)?;
    }
    with_manifest(&args.out, manifest, || {
        let images: Vec<ImageRecord> = corpus::read_jsonl(&args.images)?;
        let captions: Vec<CaptionRecord> = corpus::read_jsonl(&args.captions)?;
        let nouns = corpus::read_noun_list(&args.nouns)?;
        let overrides = match &args.overrides {
            Some(path) => corpus::read_overrides(path)?,
            None => Default::default(),
        };
        let map = corpus::compute_pmi_mapping(&images, &captions, &nouns, &overrides)?;
        let (triplets, map) =
            corpus::build_triplets(&images, &captions, &map, args.min_instances)?;
        corpus::write_noun_map(&args.out.join("noun_map.json"), &map)?;
        corpus::write_jsonl(&args.out.join("triplets.jsonl"), &triplets)?;
        log::info!(
            "mapped {} nouns onto {} classes, {} triplets survive the cutoff",
            map.entries.len(),
            map.noun_sets.len(),
            triplets.len()
        );
        Ok(vec!["noun_map.json".into(), "triplets.jsonl".into()])
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DataPaths {
    images: PathBuf,
    captions: PathBuf,
    triplets: PathBuf,
    noun_map: PathBuf,
}

impl DataPaths {
    /// Paths in a config file are taken relative to the file's directory.
    fn resolved(&self, base: &Path) -> DataPaths {
        let fix = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        DataPaths {
            images: fix(&self.images),
            captions: fix(&self.captions),
            triplets: fix(&self.triplets),
            noun_map: fix(&self.noun_map),
        }
    }

    fn check(&self) -> Result<(), CliError> {
        require_file(&self.images, "images file")?;
        require_file(&self.captions, "captions file")?;
        require_file(&self.triplets, "triplets file")?;
        require_file(&self.noun_map, "noun map")?;
        Ok(())
    }
}

fn load_dataset(paths: &DataPaths) -> Result<TripletDataset, CliError> {
    let images: Vec<ImageRecord> = corpus::read_jsonl(&paths.images)?;
    let captions: Vec<CaptionRecord> = corpus::read_jsonl(&paths.captions)?;
    let triplets: Vec<Triplet> = corpus::read_jsonl(&paths.triplets)?;
    let map = corpus::read_noun_map(&paths.noun_map)?;
    Ok(TripletDataset::new(images, captions, triplets, map)?)
}

fn load_dataset_args(
    images: &Path,
    captions: &Path,
    triplets: &Path,
    noun_map: &Path,
) -> Result<TripletDataset, CliError> {
    let paths = DataPaths {
        images: images.to_path_buf(),
        captions: captions.to_path_buf(),
        triplets: triplets.to_path_buf(),
        noun_map: noun_map.to_path_buf(),
    };
    paths.check()?;
    load_dataset(&paths)
}

fn cmd_build_ontology(args: BuildOntologyArgs) -> Result<(), CliError> {
    prepare_out_dir(&args.out, args.force)?;
    let mut manifest = RunManifest::begin("build-ontology", serde_json::Value::Null);
    for p in [&args.images, &args.captions, &args.triplets, &args.noun_map] {
        require_file(p, "input")?;
        manifest.add_input(p)?;
    }
    with_manifest(&args.out, manifest, || {
        let dataset =
            load_dataset_args(&args.images, &args.captions, &args.triplets, &args.noun_map)?;
        let ontology = build_for_dataset(&dataset)?;
        let mut text = serde_json::to_string_pretty(&ontology)?;
        text.push('\n');
        fs::write(args.out.join("ontology.json"), text)?;
        log::info!(
            "ontology has {} object nodes over {} instances",
            ontology.object_nodes().count(),
            dataset.triplets.len()
        );
        Ok(vec!["ontology.json".into()])
    })
}

#[derive(Debug, Deserialize)]
struct TrainFile {
    data: DataPaths,
    #[serde(default)]
    train: TrainConfig,
    model: Option<ModelConfig>,
    curriculum: Option<CurriculumConfig>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file: TrainFile = read_toml(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let paths = file.data.resolved(base);
    paths.check()?;

    let mut config = file.train;
    if let Some(model) = file.model {
        config.model = model;
    }
    if let Some(curriculum) = file.curriculum {
        config.curriculum = curriculum;
    }
    config.validate()?;

    if let Some(resume) = &args.resume {
        if !resume.join("trainer.json").is_file() {
            return Err(CliError::Usage(format!(
                "{} is not a checkpoint directory",
                resume.display()
            )));
        }
    }
    prepare_out_dir(&args.out, args.force)?;

    let mut manifest = RunManifest::begin("train", serde_json::to_value(&config)?);
    manifest.add_input(&args.config)?;
    for p in [&paths.images, &paths.captions, &paths.triplets, &paths.noun_map] {
        manifest.add_input(p)?;
    }
    with_manifest(&args.out, manifest, || {
        let dataset = load_dataset(&paths)?;
        let outcome = match &args.resume {
            Some(resume) => trainer::resume_training(resume, &dataset, Some(&args.out))?,
            None => trainer::run_training(&dataset, &config, Some(&args.out))?,
        };
        log::info!(
            "trained to step {}, last holdout accuracy {:?}",
            outcome.step,
            outcome.last_holdout_accuracy
        );
        Ok(vec!["log.csv".into(), "final".into()])
    })
}

#[derive(Debug, Deserialize)]
struct EvalFile {
    data: DataPaths,
    #[serde(default)]
    eval: EvalSection,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(default)]
struct EvalSection {
    k: Vec<usize>,
    /// Same-object pools need at least this many members.
    pool_min: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: vec![1, 5, 10],
            pool_min: 10,
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if !args.checkpoint.join("params.json").is_file() {
        return Err(CliError::Usage(format!(
            "{} is not a checkpoint directory",
            args.checkpoint.display()
        )));
    }
    let file: EvalFile = read_toml(&args.eval_set)?;
    let base = args.eval_set.parent().unwrap_or(Path::new("."));
    let paths = file.data.resolved(base);
    paths.check()?;

    if let Some(out) = &args.out {
        prepare_out_dir(out, args.force)?;
    }

    let run = || -> Result<String, CliError> {
        let params = checkpoint::read_params(&args.checkpoint)?;
        let dataset = load_dataset(&paths)?;
        let eval_set = EvalSet::from_dataset(&dataset, &file.eval.k)?;
        let direction = args.direction.into();
        let report = match args.pool {
            PoolArg::All => {
                let report = evaluate(&params, &eval_set, direction)?;
                serde_json::to_string_pretty(&report)?
            }
            PoolArg::SameObject => {
                let ontology = eval_ontology(&eval_set.instances, &dataset.map)?;
                let pools = build_hard_pools(
                    &eval_set.instances,
                    &ontology,
                    file.eval.pool_min,
                    &file.eval.k,
                )?;
                let report = evaluate_hard_pools(&params, &pools, direction)?;
                serde_json::to_string_pretty(&report)?
            }
        };
        Ok(report)
    };

    match &args.out {
        Some(out) => {
            let mut manifest = RunManifest::begin(
                "eval",
                serde_json::json!({
                    "direction": format!("{:?}", args.direction),
                    "pool": format!("{:?}", args.pool),
                    "k": file.eval.k,
                    "pool_min": file.eval.pool_min,
                    "checkpoint": args.checkpoint.display().to_string(),
                }),
            );
            manifest.add_input(&args.checkpoint.join("params.bin"))?;
            manifest.add_input(&args.eval_set)?;
            let out = out.clone();
            with_manifest(&out.clone(), manifest, move || {
                let report = run()?;
                fs::write(out.join("report.json"), format!("{report}\n"))?;
                println!("{report}");
                Ok(vec!["report.json".into()])
            })
        }
        None => {
            let report = run()?;
            println!("{report}");
            Ok(())
        }
    }
}

fn cmd_inspect_ontology(args: InspectOntologyArgs) -> Result<(), CliError> {
    let dataset =
        load_dataset_args(&args.images, &args.captions, &args.triplets, &args.noun_map)?;
    let ontology = build_for_dataset(&dataset)?;
    println!("{:<24} {:<8} {:>9}", "node", "kind", "instances");
    for node in &ontology.nodes {
        // The root's index is empty by convention; it spans the dataset.
        let (kind, size) = match node.kind {
            curalign::ontology::NodeKind::Entity => ("entity", ontology.dataset_len),
            curalign::ontology::NodeKind::Object => ("object", node.instance_index.len()),
        };
        println!("{:<24} {:<8} {:>9}", node.node_id, kind, size);
    }
    if let Some(out) = &args.out {
        let mut text = serde_json::to_string_pretty(&ontology)?;
        text.push('\n');
        fs::write(out, text)?;
    }
    Ok(())
}

fn cmd_inspect_curriculum(args: InspectCurriculumArgs) -> Result<(), CliError> {
    require_file(&args.ontology, "ontology file")?;
    let text = fs::read_to_string(&args.ontology)?;
    let ontology: Ontology = serde_json::from_str(&text)?;
    let config = CurriculumConfig {
        alpha: args.alpha,
        beta: args.beta,
        ..CurriculumConfig::default()
    };
    config.validate()?;

    let mut sampler = SamplerState::init(&ontology, 0);
    let classes: Vec<String> = sampler.p_object.keys().cloned().collect();
    let mut csv = String::from("refresh,p_entity");
    for c in &classes {
        csv.push(',');
        csv.push_str(c);
    }
    csv.push('\n');
    let row = |idx: u64, s: &SamplerState| {
        let mut line = format!("{idx},{}", s.p_entity);
        for c in &classes {
            line.push_str(&format!(",{}", s.p_object[c]));
        }
        line.push('\n');
        line
    };
    csv.push_str(&row(0, &sampler));
    for i in 1..=args.refreshes {
        if !sampler.refresh(&ontology, &config) {
            log::info!("refresh {i} blocked by the entity floor; schedule is final");
            break;
        }
        csv.push_str(&row(i, &sampler));
    }
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::write(out, &csv)?;
    }
    Ok(())
}
