//! `ion`: command-line driver for the desk-scale Inside-Outside Net lab.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! malformed input), 3 verification failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ion_core::eval::{coco_map, GroundTruthObject};
use ion_core::io::{load_jsonl, save_jsonl};
use ion_core::postprocess::{postprocess, threshold_search, Detection, VotingConfig};
use ion_core::rfield::{probe, ProbeOperator};
use ion_core::train::model::init_rng;
use ion_core::train::runner::{ground_truth, raw_detections, TEST_ID_OFFSET};
use ion_core::train::{
    build_model, curve_to_csv, datasets, evaluate_model, generate_shapes_dataset, run_staged_training, ExperimentConfig,
    IonModel, SyntheticScene,
};
use ion_core::verify::{registry, run_suite, DEFAULT_INSTANCES};

#[derive(Parser, Debug)]
#[command(name = "ion", version, about = "Inside-Outside Net desk-scale lab")]
struct Cli {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Receptive field of a context operator by center perturbation.
    Rfield(RfieldArgs),
    /// Train on the synthetic shapes set; writes checkpoint, curve and metrics.
    Train(TrainArgs),
    /// Raw (pre-NMS) detections of a checkpoint on a scenes file.
    Detect(DetectArgs),
    /// Score threshold, NMS, box voting and per-image cap.
    Postprocess(PostprocessArgs),
    /// COCO-style and PASCAL-style metrics of a detections file.
    Eval(EvalArgs),
    /// Random search of NMS and voting IoU thresholds for COCO mAP.
    Threshsearch(ThreshsearchArgs),
    /// Write synthetic scenes and their ground truth.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    /// Deliberately perturb this op's backward pass (negative control).
    #[arg(long)]
    corrupt: Vec<String>,
}

#[derive(Args, Debug)]
struct RfieldArgs {
    /// conv3x3x2, conv5x5x2, gap, irnn or irnn2dir.
    #[arg(long)]
    operator: String,
    /// Side length of the square probe grid.
    #[arg(long, default_value_t = 15)]
    size: usize,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config (`key = value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for model.ckpt, curve.csv, metrics.txt, config.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scenes JSONL as written by `gen-data`.
    #[arg(long)]
    scenes: PathBuf,
    /// Raw detections JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VotingArgs {
    /// Voting settings come from this config's `nms_iou`, `vote_iou`, ... keys.
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    nms_iou: Option<f64>,
    /// IoU for box voting, or `none` to disable.
    #[arg(long)]
    vote_iou: Option<String>,
    #[arg(long)]
    score_thresh: Option<f64>,
    #[arg(long)]
    max_per_image: Option<usize>,
}

#[derive(Args, Debug)]
struct PostprocessArgs {
    #[command(flatten)]
    voting: VotingArgs,
    /// Raw detections JSONL.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Also write the key=value report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ThreshsearchArgs {
    #[command(flatten)]
    voting: VotingArgs,
    /// Raw detections JSONL.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Random (nms_iou, vote_iou) samples.
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// `train` or `test`: the same images `train` uses for that split.
    #[arg(long, default_value = "test")]
    split: String,
    /// Number of scenes; the config's split size when omitted.
    #[arg(long)]
    count: Option<usize>,
    /// Output directory for scenes.jsonl and gt.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<ion_core::Error> for Failure {
    fn from(e: ion_core::Error) -> Self {
        match e {
            ion_core::Error::Verification(_) => Failure::Verification(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn data_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &arg.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| data_err(p, e))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn voting_config(args: &VotingArgs, seed: Option<u64>) -> Result<VotingConfig, Failure> {
    let mut v = load_config(&args.config, seed)?.voting;
    if let Some(x) = args.nms_iou {
        v.nms_iou = x;
    }
    if let Some(x) = &args.vote_iou {
        v.vote_iou = match x.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| Failure::Usage(format!("--vote-iou: expected a number or `none`, got {s:?}")))?),
        };
    }
    if let Some(x) = args.score_thresh {
        v.score_thresh = x;
    }
    if let Some(x) = args.max_per_image {
        v.max_per_image = x;
    }
    v.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(v)
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    load_jsonl(path).map_err(|e| data_err(path, e))
}

fn write<T: serde::Serialize>(path: &Path, records: &[T]) -> CliResult {
    save_jsonl(path, records).map_err(|e| data_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| data_err(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| data_err(path, e))
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> CliResult {
    let names: Vec<&str> = registry().iter().map(|o| o.name).collect();
    if let Some(bad) = a.corrupt.iter().find(|c| !names.contains(&c.as_str())) {
        return Err(Failure::Usage(format!("--corrupt: unknown op {bad:?}; known: {}", names.join(", "))));
    }
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be >= 1".into()));
    }
    let suite = run_suite(seed, a.instances, &a.corrupt)?;
    print!("{}", suite.to_table());
    if suite.all_pass() {
        Ok(())
    } else {
        let failed: Vec<&str> = suite
            .reports
            .iter()
            .filter(|r| !r.passes(suite.tolerance))
            .map(|r| r.op_name.as_str())
            .collect();
        Err(Failure::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_rfield(a: &RfieldArgs, seed: u64) -> CliResult {
    let op: ProbeOperator = a.operator.parse().map_err(|e: ion_core::Error| Failure::Usage(e.to_string()))?;
    if a.size < 3 {
        return Err(Failure::Usage("--size must be >= 3".into()));
    }
    print!("{}", probe(op, a.size, seed)?.to_text());
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>, verbose: bool) -> CliResult {
    let cfg = load_config(&a.config, seed)?;
    create_dir(&a.out_dir)?;
    let (train, test) = datasets(&cfg);
    let mut model = build_model(&cfg, &train)?;
    if verbose {
        eprintln!("training {} parameters on {} images", model.num_parameters(), train.len());
    }
    let curve = run_staged_training(&mut model, &train, &cfg)?;
    let eval = evaluate_model(&model, &test, &cfg.voting)?;
    let ckpt = a.out_dir.join("model.ckpt");
    model.to_checkpoint().save(&ckpt).map_err(|e| data_err(&ckpt, e))?;
    write_text(&a.out_dir.join("curve.csv"), &curve_to_csv(&curve))?;
    write_text(&a.out_dir.join("metrics.txt"), &eval.to_key_values())?;
    write_text(&a.out_dir.join("config.txt"), &cfg.to_text())?;
    print!("{}", eval.to_table());
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<IonModel, Failure> {
    let ck = ion_core::checkpoint::Checkpoint::load(path).map_err(|e| data_err(path, e))?;
    let mut model = IonModel::new(cfg, &mut init_rng(cfg.seed))?;
    model.load_checkpoint(&ck).map_err(|e| data_err(path, e))?;
    Ok(model)
}

fn cmd_detect(a: &DetectArgs, seed: Option<u64>) -> CliResult {
    let cfg = load_config(&a.config, seed)?;
    let model = load_model(&cfg, &a.checkpoint)?;
    let scenes: Vec<SyntheticScene> = read(&a.scenes)?;
    let mut raw = Vec::new();
    for s in &scenes {
        raw.extend(raw_detections(&model, s, cfg.voting.rounds).map_err(|e| data_err(&a.scenes, e))?);
    }
    write(&a.out, &raw)?;
    eprintln!("{} raw detections for {} scenes", raw.len(), scenes.len());
    Ok(())
}

fn cmd_postprocess(a: &PostprocessArgs, seed: Option<u64>) -> CliResult {
    let v = voting_config(&a.voting, seed)?;
    let raw: Vec<Detection> = read(&a.input)?;
    let out = postprocess(&raw, &v);
    write(&a.out, &out)?;
    eprintln!("{} -> {} detections", raw.len(), out.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let dets: Vec<Detection> = read(&a.detections)?;
    let gts: Vec<GroundTruthObject> = read(&a.ground_truth)?;
    let r = coco_map(&dets, &gts);
    print!("{}\n{}", r.to_table(), r.to_key_values());
    if let Some(p) = &a.out {
        write_text(p, &r.to_key_values())?;
    }
    Ok(())
}

fn cmd_threshsearch(a: &ThreshsearchArgs, seed: u64) -> CliResult {
    let base = voting_config(&a.voting, Some(seed))?;
    let raw: Vec<Detection> = read(&a.detections)?;
    let gts: Vec<GroundTruthObject> = read(&a.ground_truth)?;
    if a.samples == 0 {
        return Err(Failure::Usage("--samples must be >= 1".into()));
    }
    let best = threshold_search(&raw, &gts, a.samples, seed, &base).map_err(|e| data_err(&a.ground_truth, e))?;
    println!("nms_iou={:.6}\nvote_iou={:.6}\nmap_50_95={:.6}", best.nms_iou, best.vote_iou, best.score);
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs, seed: Option<u64>) -> CliResult {
    let cfg = load_config(&a.config, seed)?;
    let sc = ion_core::train::runner::shapes_config(&cfg);
    // same seeds and ids as the training harness's splits
    let (split_seed, first_id, default_n) = match a.split.as_str() {
        "train" => (cfg.seed, 0, cfg.train_images),
        "test" => (cfg.seed.wrapping_add(1), TEST_ID_OFFSET, cfg.test_images),
        s => return Err(Failure::Usage(format!("--split: expected train or test, got {s:?}"))),
    };
    let n = a.count.unwrap_or(default_n);
    if n == 0 {
        return Err(Failure::Usage("--count must be >= 1".into()));
    }
    let scenes = generate_shapes_dataset(split_seed, n, first_id, &sc);
    create_dir(&a.out_dir)?;
    write(&a.out_dir.join("scenes.jsonl"), &scenes)?;
    write(&a.out_dir.join("gt.jsonl"), &ground_truth(&scenes))?;
    eprintln!("{} scenes written to {}", scenes.len(), a.out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a, seed.unwrap_or(0)),
        Command::Rfield(a) => cmd_rfield(a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, seed, cli.verbose),
        Command::Detect(a) => cmd_detect(a, seed),
        Command::Postprocess(a) => cmd_postprocess(a, seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Threshsearch(a) => cmd_threshsearch(a, seed.unwrap_or(0)),
        Command::GenData(a) => cmd_gen_data(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
