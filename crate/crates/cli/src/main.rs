//! `cedpp`: train, evaluate and query low-rank DPP basket models.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde_json::{json, Value};

use cedpp::conditioning::extension_scores;
use cedpp::data::{load_transactions, remap_baskets, toy_corpus, Corpus, LoadOptions, Split, SplitFractions};
use cedpp::eval::{evaluate, toy_diagnostics, EvalConfig, RankingMode, ToyDiagnostics};
use cedpp::model_file::{digest, ModelFile};
use cedpp::rng::stream;
use cedpp::timing::{time_conditioning, ConditioningRoute};
use cedpp::training::{train, Method, StepSchedule, TrainConfig, TrainError};
use cedpp::DppError;

/// Exit status for bad flags, unreadable inputs and unknown items.
const EXIT_USAGE: u8 = 2;
/// Exit status for aborted training runs.
const EXIT_ABORT: u8 = 1;

#[derive(Parser)]
#[command(name = "cedpp", version, about = "Contrastive and maximum-likelihood learning of low-rank DPPs")]
struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and print the training report.
    Train(TrainArgs),
    /// Score a model on a corpus' test split.
    Eval(EvalArgs),
    /// Rank next items for a partial basket.
    Predict(PredictArgs),
    /// Run the two-basket toy experiment for each method.
    Toy(ToyArgs),
    /// Time dual against primal conditioning as CSV.
    BenchCondition(BenchArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Transactions file, canonical corpus directory, or `toy`.
    #[arg(long)]
    data: String,
    /// Baskets larger than this are clipped.
    #[arg(long)]
    max_basket: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "mle", value_parser = parse_method)]
    method: Method,
    /// Defaults to the largest basket size.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Negatives per positive; defaults to 0.5.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Maximum number of epochs.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long)]
    constant_step: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Split seed; defaults to the seed stored in the model.
    #[arg(long)]
    seed: Option<u64>,
    /// Rank by inclusion marginals instead of determinant ratios.
    #[arg(long)]
    marginal: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Observed item ids, comma or space separated.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    items: Vec<String>,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Catalog sizes.
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    rank: usize,
    /// Observed set sizes.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    set_sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

struct Failure {
    code: u8,
    message: String,
}

impl From<DppError> for Failure {
    fn from(e: DppError) -> Self {
        let code = match e {
            DppError::Singular(_) | DppError::Conditioning(_) | DppError::Generation(_) => EXIT_ABORT,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Toy(a) => cmd_toy(a),
        Command::BenchCondition(a) => cmd_bench_condition(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_corpus(args: &DataArgs, seed: u64) -> Result<Corpus, Failure> {
    let mut rng = stream(seed, u64::MAX);
    if args.data == "toy" {
        return Ok(toy_corpus(&mut rng)?);
    }
    let path = Path::new(&args.data);
    if path.is_dir() {
        return Ok(Corpus::load_canonical(path)?);
    }
    let options = LoadOptions {
        max_size: args.max_basket,
        splits: SplitFractions::default(),
        ..LoadOptions::default()
    };
    Ok(load_transactions(path, &options, &mut rng)?)
}

fn print_json(value: &Value) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    // A closed pipe downstream is not an error for us.
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let ratio = match (a.method, a.ratio) {
        (Method::Mle, Some(r)) => {
            warn!("--ratio {r} is ignored for mle");
            0.5
        }
        (_, r) => r.unwrap_or(0.5),
    };
    let config = TrainConfig {
        method: a.method,
        rank: a.rank,
        alpha: a.alpha,
        negative_ratio: ratio,
        step_size_initial: a.step_size,
        step_schedule: if a.constant_step {
            StepSchedule::Constant
        } else {
            StepSchedule::InverseT
        },
        epsilon: a.epsilon,
        max_iters: a.max_iters,
        seed: a.seed,
        batch_size: a.batch_size,
        ..TrainConfig::default()
    };
    config.validate()?;
    let corpus = load_corpus(&a.data, a.seed)?;
    let config_json = serde_json::to_vec(&config).expect("serializable");
    let save = |factor: cedpp::KernelFactor| -> Result<(), Failure> {
        ModelFile {
            factor,
            catalog_ids: corpus.catalog.ids().to_vec(),
            seed: a.seed,
            config_digest: digest(&config_json),
        }
        .save(&a.out)
        .map_err(Failure::from)
    };
    match train(&corpus, &config) {
        Ok((factor, mut report)) => {
            save(factor)?;
            report.checkpoint = Some(a.out.display().to_string());
            print_json(&json!({ "status": "ok", "corpus": corpus.provenance, "report": report }));
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            message,
            last_good,
            report,
        }) => {
            save(*last_good)?;
            print_json(&json!({ "status": "aborted", "epoch": epoch, "reason": message, "report": report }));
            Err(Failure {
                code: EXIT_ABORT,
                message: format!("training aborted at epoch {epoch}: {message}"),
            })
        }
        Err(TrainError::Dpp(e)) => Err(e.into()),
    }
}

fn load_model(path: &Path) -> Result<ModelFile, Failure> {
    ModelFile::load(path).map_err(|e| usage(format!("cannot load model {}: {e}", path.display())))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.data, a.seed.unwrap_or(model.seed))?;
    let catalog = cedpp::data::Catalog::from_ordered(model.catalog_ids.clone())?;
    let test = remap_baskets(&corpus.split_ids(Split::Test), &catalog, 2);
    if test.is_empty() {
        return Err(usage("no test baskets of size ≥ 2 share the model's catalog"));
    }
    let config = EvalConfig {
        trials: a.trials,
        seed: a.seed.unwrap_or(model.seed),
        mode: if a.marginal {
            RankingMode::Marginal
        } else {
            RankingMode::DeterminantRatio
        },
    };
    let mut report = evaluate(&model.factor, &test, &config)?;
    if a.data.data == "toy" {
        report.toy = Some(toy_diagnostics(&model.factor, &corpus)?);
    }
    print_json(&json!(report));
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let catalog = cedpp::data::Catalog::from_ordered(model.catalog_ids.clone())?;
    let mut observed = BTreeSet::new();
    for token in a.items.iter().flat_map(|s| s.split_whitespace()) {
        let id: u64 = token.parse().map_err(|_| usage(format!("not an item id: {token:?}")))?;
        let index = catalog
            .index_of(id)
            .ok_or_else(|| usage(format!("unknown item id {id}")))?;
        if !observed.insert(index) {
            warn!("duplicate item {id} ignored");
        }
    }
    let observed: Vec<usize> = observed.into_iter().collect();
    let mut ranked: Vec<(u64, f64)> = if observed.len() == catalog.len() {
        Vec::new()
    } else {
        match extension_scores(&model.factor, &observed)?.normalized() {
            Some(n) => n.items.iter().map(|&i| catalog.id_of(i)).zip(n.values).collect(),
            None => Vec::new(),
        }
    };
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate(a.top_n);
    let observed_ids: Vec<u64> = observed.iter().map(|&i| catalog.id_of(i)).collect();
    let predictions: Vec<Value> = ranked
        .into_iter()
        .map(|(id, score)| json!({ "item": id, "score": score }))
        .collect();
    print_json(&json!({ "observed": observed_ids, "predictions": predictions }));
    Ok(())
}

fn mean_std(xs: &[f64]) -> Value {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    json!({ "mean": mean, "std": std })
}

fn cmd_toy(a: ToyArgs) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(usage("--trials must be ≥ 1"));
    }
    let methods = [Method::Mle, Method::CeExplicit, Method::CeDynamic];
    let mut per_method: Vec<Vec<ToyDiagnostics>> = vec![Vec::new(); methods.len()];
    for trial in 0..a.trials as u64 {
        let seed = a.seed + trial;
        let corpus = toy_corpus(&mut stream(seed, u64::MAX))?;
        for (m, &method) in methods.iter().enumerate() {
            let config = TrainConfig {
                method,
                seed,
                max_iters: a.max_iters,
                negative_ratio: a.ratio,
                ..TrainConfig::default()
            };
            let factor = match train(&corpus, &config) {
                Ok((f, _)) => f,
                Err(TrainError::Diverged { message, .. }) => {
                    return Err(Failure {
                        code: EXIT_ABORT,
                        message: format!("{} diverged on trial {trial}: {message}", method.name()),
                    })
                }
                Err(TrainError::Dpp(e)) => return Err(e.into()),
            };
            per_method[m].push(toy_diagnostics(&factor, &corpus)?);
        }
    }
    let kl = |d: &ToyDiagnostics| d.net_symmetric_kl.unwrap_or(f64::INFINITY);
    let rows: Vec<Value> = methods
        .iter()
        .zip(&per_method)
        .map(|(method, runs)| {
            let correct: Vec<f64> = runs.iter().map(|d| d.correct_prediction_prob).collect();
            let net: Vec<f64> = runs.iter().map(kl).collect();
            let beats_mle = runs.iter().zip(&per_method[0]).filter(|(d, m)| kl(d) < kl(m)).count();
            json!({
                "method": method.name(),
                "correct_prediction_prob": mean_std(&correct),
                "net_symmetric_kl": mean_std(&net),
                "trials_with_lower_kl_than_mle": beats_mle,
                "runs": runs,
            })
        })
        .collect();
    print_json(&json!({ "trials": a.trials, "methods": rows }));
    Ok(())
}

fn cmd_bench_condition(a: BenchArgs) -> Result<(), Failure> {
    if a.sizes.iter().any(|&m| m < a.rank) {
        return Err(usage("every size must be ≥ rank"));
    }
    if a.set_sizes.iter().any(|&s| s > a.rank) {
        return Err(usage("set sizes must be ≤ rank"));
    }
    println!("M,K,|A|,method,seconds");
    for &set_size in &a.set_sizes {
        for &m in &a.sizes {
            for route in [ConditioningRoute::Dual, ConditioningRoute::Primal] {
                let secs = time_conditioning(m, a.rank, set_size, route, a.repeats, a.seed)?;
                println!("{m},{},{set_size},{},{secs:.9}", a.rank, route.name());
            }
        }
    }
    Ok(())
}
