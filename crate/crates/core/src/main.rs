use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dhcnet::data::{self, DatasetSpec, Split};
use dhcnet::gradsuite;
use dhcnet::hcl;
use dhcnet::train::{self, apply_overrides, AblationConfig, TrainConfig};
use dhcnet::Error;

#[derive(Parser)]
#[command(name = "dhcnet", version, about = "Holistic-cue training for ultra-fine-grained classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic contour dataset (PNG tree + manifest.csv).
    GenData(GenDataArgs),
    /// Train a model. Accepts --config PATH and --key value overrides.
    Train(OverrideArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write the shuffled variants of one image with JSON sidecars.
    Augment(AugmentArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Run the ablation grid. Accepts --config PATH and --key value overrides.
    Ablate(OverrideArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class in each split.
    #[arg(long)]
    per_class: Option<usize>,
    /// Test images per class, when different from --per-class.
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    texture_seed: Option<u64>,
    /// DatasetSpec JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    args: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = 3)]
    m: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    independent_regions: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, default_value_t = gradsuite::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = gradsuite::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

const OVERRIDE_USAGE: &str = "usage: dhcnet <train|ablate> [--config PATH] [--KEY VALUE]...\n\
KEY names a config field; nested fields use dots (optimizer.lr, weights.beta).";

struct Overrides {
    config: Option<PathBuf>,
    pairs: Vec<(String, String)>,
}

fn parse_overrides(args: &[String]) -> Result<Overrides, Failure> {
    let mut out = Overrides {
        config: None,
        pairs: Vec::new(),
    };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Failure::Usage(format!("unexpected argument {arg:?}\n{OVERRIDE_USAGE}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::Usage(format!("--{flag} needs a value\n{OVERRIDE_USAGE}")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(Failure::Usage(OVERRIDE_USAGE.into()));
        }
        if key == "config" {
            out.config = Some(PathBuf::from(value));
        } else {
            out.pairs.push((key, value));
        }
    }
    Ok(out)
}

fn load_json<T: Default + for<'de> serde::Deserialize<'de>>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn wants_help(args: &[String]) -> bool {
    args.iter().any(|a| a == "--help" || a == "-h")
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut spec: DatasetSpec = load_json(a.config.as_deref())?;
    if let Some(k) = a.classes {
        spec.num_classes = k;
    }
    if let Some(n) = a.per_class {
        spec.train_per_class = n;
        spec.test_per_class = n;
    }
    if let Some(n) = a.test_per_class {
        spec.test_per_class = n;
    }
    if let Some(s) = a.size {
        spec.image_size = s;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.texture_seed {
        spec.texture_seed = s;
    }
    spec.validate()?;
    let manifest = data::gen_dataset(&spec, &a.out).map_err(runtime)?;
    println!(
        "wrote {} images ({} train, {} test) to {}",
        manifest.rows.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: OverrideArgs) -> CliResult {
    if wants_help(&a.args) {
        println!("{OVERRIDE_USAGE}\n\ndefault config:\n{}", TrainConfig::default().to_json());
        return Ok(());
    }
    let o = parse_overrides(&a.args)?;
    let base: TrainConfig = load_json(o.config.as_deref())?;
    let config = apply_overrides(&base, &o.pairs)?;
    config.validate()?;
    let outcome = train::train(&config).map_err(runtime)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        output: &'a Path,
        epochs: usize,
        final_test_acc: f64,
        best_test_acc: f64,
        best_epoch: usize,
    }
    print_json(&Summary {
        output: &outcome.output,
        epochs: outcome.metrics.len(),
        final_test_acc: outcome.final_test_acc,
        best_test_acc: outcome.best_test_acc,
        best_epoch: outcome.best_epoch,
    });
    Ok(())
}

fn run_ablate(a: OverrideArgs) -> CliResult {
    if wants_help(&a.args) {
        println!("{OVERRIDE_USAGE}\n\ndefault config:\n{}", serde_json::to_string_pretty(&AblationConfig::default()).unwrap());
        return Ok(());
    }
    let o = parse_overrides(&a.args)?;
    let base: AblationConfig = load_json(o.config.as_deref())?;
    let config = apply_overrides(&base, &o.pairs)?;
    config.base.validate()?;
    print_json(&train::ablate(&config).map_err(runtime)?);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let dataset = match a.dataset {
        Some(d) => d,
        None => train::Checkpoint::load(&a.checkpoint).map_err(runtime)?.config.dataset,
    };
    print_json(&train::evaluate(&a.checkpoint, &dataset, a.split).map_err(runtime)?);
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    source: &'a str,
    corner: hcl::Corner,
    sigma: f64,
    k: u32,
    n: usize,
    permutation: &'a [usize],
}

fn augment(a: AugmentArgs) -> CliResult {
    let image = data::load_png(&a.image)?;
    let schedule = hcl::granularity_schedule(a.m, dhcnet::backbone::NUM_STAGES)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let source = a.image.to_string_lossy().into_owned();
    let set = hcl::augment(&source, &image, a.sigma, &schedule, a.independent_regions, &mut rng)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    for entry in &set.entries {
        let png = a.out.join(format!("{stem}_k{}.png", entry.k));
        data::save_png(&entry.image, &png)?;
        let sidecar = Sidecar {
            source: &set.source,
            corner: entry.region.corner,
            sigma: a.sigma,
            k: entry.k,
            n: entry.n,
            permutation: &entry.permutation,
        };
        let json_path = png.with_extension("json");
        let text = serde_json::to_string_pretty(&sidecar).expect("serializable");
        std::fs::write(&json_path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", json_path.display())))?;
        println!("{}", png.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let results = gradsuite::run_all(a.points, a.epsilon, a.seed).map_err(runtime)?;
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed(a.tolerance);
        println!(
            "{:<24} max_rel_error {:.3e}  checked {:>5}  excluded {:>3}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.excluded,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Augment(a) => augment(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
