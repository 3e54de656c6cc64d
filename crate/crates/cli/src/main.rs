use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsiml::codes::{sign_quantize, BinaryCodeMatrix, EmbeddingMatrix};
use dsiml::data::{
    filter_min_degree, load_interactions, load_split, split_train_test, InteractionSet,
};
use dsiml::eval::{evaluate_model, rq4_settings, run_rq4, Model, RankingMetrics};
use dsiml::retrieval::{benchmark_speedup, RetrievalIndex};
use dsiml::trainer::{train_dsiml_with, train_siml, DsimlOptions, Init, Solver, TrainReport};
use dsiml::{Error, Hyperparams};
use serde_json::json;

const TRAIN_FILE: &str = "train.tsv";
const TEST_FILE: &str = "test.tsv";
const USER_EMB: &str = "user_emb.dsmr";
const ITEM_EMB: &str = "item_emb.dsmr";
const USER_CODES: &str = "user_codes.dsml";
const ITEM_CODES: &str = "item_codes.dsml";
const REPORT: &str = "report.jsonl";
const MODEL_META: &str = "model.json";

#[derive(Parser)]
#[command(
    name = "dsiml",
    version,
    about = "Binary recommendation codes with a scale-invariant margin"
)]
struct Cli {
    /// Worker threads for parallel phases.
    #[arg(long, global = true, env = "DSIML_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a log, filter by degree, split, and write train/test files.
    Prepare(PrepareArgs),
    /// Train embeddings, and codes unless `--mode siml`.
    Train(TrainArgs),
    /// Ranking metrics of a trained model on the held-out split.
    Eval(EvalArgs),
    /// Top-k items per user.
    Recommend(RecommendArgs),
    /// Hamming vs float full-ranking throughput.
    Bench(BenchArgs),
    /// Train and evaluate over a gamma x lambda x seed grid.
    Grid(GridArgs),
    /// Scale-invariant vs fixed-margin loss on synthetic imbalanced data.
    Rq4(Rq4Args),
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction log: user, item, optional rating per line.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "\\t", value_parser = parse_sep)]
    sep: char,
    /// Ratings below this are dropped.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    /// Minimum interactions per user and item; 0 skips filtering.
    #[arg(long, default_value_t = 20)]
    min_degree: usize,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for train.tsv and test.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Siml,
    Dsiml,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Flip,
    Exhaustive,
}

#[derive(Args, Clone)]
struct HpArgs {
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Fixed margin of the CML baseline.
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    /// Negatives per positive.
    #[arg(long, default_value_t = 5)]
    neg: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_users: usize,
    /// Outer iterations of the discrete optimizer.
    #[arg(long, default_value_t = 30)]
    iters: usize,
    /// Relative bound decrease that ends discrete training.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Flip-descent trajectories per subproblem.
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SolverArg::Flip)]
    solver: SolverArg,
}

impl HpArgs {
    fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            dim: self.dim,
            gamma: self.gamma,
            lambda: self.lambda,
            cml_margin: self.margin,
            n_neg: self.neg,
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_users: self.batch_users,
            bqp_restarts: self.restarts,
            seed: self.seed,
            max_iters: self.iters,
            tol: self.tol,
            ..Hyperparams::default()
        }
    }

    fn solver(&self) -> Solver {
        match self.solver {
            SolverArg::Flip => Solver::FlipDescent,
            SolverArg::Exhaustive => Solver::Exhaustive,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "\\t", value_parser = parse_sep)]
    sep: char,
    #[arg(long, value_enum, default_value_t = Mode::Dsiml)]
    mode: Mode,
    #[command(flatten)]
    hp: HpArgs,
    /// Model output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "\\t", value_parser = parse_sep)]
    sep: char,
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
    k: Vec<usize>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "\\t", value_parser = parse_sep)]
    sep: char,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// External user keys, comma separated; all users when absent.
    #[arg(long, value_delimiter = ',')]
    users: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Number of items.
    #[arg(long, default_value_t = 100_000)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "\\t", value_parser = parse_sep)]
    sep: char,
    #[arg(long, value_enum, default_value_t = Mode::Dsiml)]
    mode: Mode,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.8,1.1,1.4,1.7")]
    gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,10,100")]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    k: Vec<usize>,
    #[command(flatten)]
    hp: HpArgs,
}

#[derive(Args)]
struct Rq4Args {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    seeds: Vec<u64>,
    #[command(flatten)]
    hp: HpArgs,
}

fn parse_sep(s: &str) -> Result<char, String> {
    match s {
        "\\t" | "tab" => Ok('\t'),
        "space" => Ok(' '),
        _ => {
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(format!("separator must be a single character, got {s:?}")),
            }
        }
    }
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) | Error::DimensionTooLarge(_) => 2,
            Error::Diverged { .. } | Error::DegenerateGeometry { .. } => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

type CmdResult = Result<(), Failure>;

fn emit(line: &str) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn load_prepared(dir: &Path, sep: char) -> Result<InteractionSet, Failure> {
    let (train, test) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
    for p in [&train, &test] {
        if !p.is_file() {
            return Err(Failure {
                code: 3,
                message: format!("{} not found (run `dsiml prepare` first)", p.display()),
            });
        }
    }
    Ok(load_split(&train, &test, sep)?)
}

fn cmd_prepare(args: &PrepareArgs) -> CmdResult {
    if !(args.train_frac > 0.0 && args.train_frac < 1.0) {
        return Err(usage("--train-frac must lie in (0, 1)"));
    }
    if !args.data.is_file() {
        return Err(Failure {
            code: 3,
            message: format!("{}: no such file", args.data.display()),
        });
    }
    let set = load_interactions(&args.data, args.sep, args.threshold)?;
    let set = if args.min_degree == 0 {
        set
    } else {
        filter_min_degree(&set, args.min_degree)?
    };
    let split = split_train_test(&set, args.train_frac, args.seed)?;
    create_dir(&args.out)?;
    split.write_split(
        &args.out.join(TRAIN_FILE),
        &args.out.join(TEST_FILE),
        args.sep,
    )?;
    let n_test: usize = (0..split.n_users()).map(|u| split.test(u).len()).sum();
    emit(
        &json!({
            "users": split.n_users(),
            "items": split.n_items(),
            "train": split.n_interactions() - n_test,
            "test": n_test,
        })
        .to_string(),
    );
    eprintln!(
        "prepared {} users, {} items into {}",
        split.n_users(),
        split.n_items(),
        args.out.display()
    );
    Ok(())
}

fn report_lines(phase: &str, report: &TrainReport) -> Vec<String> {
    report
        .records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("records serialize");
            v["phase"] = json!(phase);
            v.to_string()
        })
        .collect()
}

struct Trained {
    emb: (EmbeddingMatrix, EmbeddingMatrix),
    codes: Option<(BinaryCodeMatrix, BinaryCodeMatrix)>,
    lines: Vec<String>,
}

fn train_model(
    data: &InteractionSet,
    hp: &Hyperparams,
    mode: Mode,
    solver: Solver,
) -> Result<Trained, Failure> {
    hp.validate()?;
    let siml = train_siml(data, hp)?;
    let mut lines = report_lines("siml", &siml.report);
    let codes = if mode == Mode::Dsiml {
        let opts = DsimlOptions {
            init: Init::Codes(sign_quantize(&siml.users), sign_quantize(&siml.items)),
            solver,
            batch: None,
        };
        let out = train_dsiml_with(data, hp, &opts)?;
        lines.extend(report_lines("dsiml", &out.codes.report));
        Some((out.codes.users, out.codes.items))
    } else {
        None
    };
    Ok(Trained {
        emb: (siml.users, siml.items),
        codes,
        lines,
    })
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let hp = args.hp.hyperparams();
    hp.validate()?;
    let data = load_prepared(&args.data, args.sep)?;
    let trained = train_model(&data, &hp, args.mode, args.hp.solver())?;
    create_dir(&args.out)?;
    trained.emb.0.save(&args.out.join(USER_EMB))?;
    trained.emb.1.save(&args.out.join(ITEM_EMB))?;
    if let Some((b, d)) = &trained.codes {
        b.save(&args.out.join(USER_CODES))?;
        d.save(&args.out.join(ITEM_CODES))?;
    }
    let mut report = trained.lines.join("\n");
    report.push('\n');
    let path = args.out.join(REPORT);
    fs::write(&path, &report).map_err(|e| io_failure(&path, e))?;
    let meta = json!({
        "mode": if args.mode == Mode::Dsiml { "dsiml" } else { "siml" },
        "dim": hp.dim,
        "gamma": hp.gamma,
        "lambda": hp.lambda,
        "seed": hp.seed,
    });
    let path = args.out.join(MODEL_META);
    fs::write(&path, meta.to_string()).map_err(|e| io_failure(&path, e))?;
    for line in &trained.lines {
        emit(line);
    }
    eprintln!("model written to {}", args.out.display());
    Ok(())
}

/// A model loaded from disk: codes when present, else embeddings.
enum Loaded {
    Codes(BinaryCodeMatrix, BinaryCodeMatrix),
    Embeddings(EmbeddingMatrix, EmbeddingMatrix),
}

impl Loaded {
    fn model(&self) -> Model<'_> {
        match self {
            Loaded::Codes(users, items) => Model::Codes { users, items },
            Loaded::Embeddings(users, items) => Model::InnerProduct { users, items },
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Loaded::Codes(..) => "dsiml",
            Loaded::Embeddings(..) => "siml",
        }
    }
}

fn load_model(dir: &Path) -> Result<(Loaded, u64), Failure> {
    let seed = fs::read_to_string(dir.join(MODEL_META))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v["seed"].as_u64())
        .unwrap_or(0);
    let codes = dir.join(USER_CODES);
    let loaded = if codes.is_file() {
        Loaded::Codes(
            BinaryCodeMatrix::load(&codes)?,
            BinaryCodeMatrix::load(&dir.join(ITEM_CODES))?,
        )
    } else {
        Loaded::Embeddings(
            EmbeddingMatrix::load(&dir.join(USER_EMB))?,
            EmbeddingMatrix::load(&dir.join(ITEM_EMB))?,
        )
    };
    Ok((loaded, seed))
}

fn metrics_lines(metrics: &RankingMetrics, model: &str, seed: u64) -> Vec<String> {
    metrics.json_lines(model, seed)
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    if args.k.contains(&0) {
        return Err(usage("--k values must be >= 1"));
    }
    let data = load_prepared(&args.data, args.sep)?;
    let (loaded, seed) = load_model(&args.model)?;
    let metrics = evaluate_model(&loaded.model(), &data, &args.k)?;
    for line in metrics_lines(&metrics, loaded.name(), seed) {
        emit(&line);
    }
    eprintln!("evaluated {} users", metrics.users);
    Ok(())
}

fn cmd_recommend(args: &RecommendArgs) -> CmdResult {
    if args.k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    let data = load_prepared(&args.data, args.sep)?;
    let (loaded, _) = load_model(&args.model)?;
    let users: Vec<usize> = if args.users.is_empty() {
        (0..data.n_users()).collect()
    } else {
        args.users
            .iter()
            .map(|key| {
                data.user_id(key).ok_or_else(|| Failure {
                    code: 3,
                    message: format!("unknown user {key:?}"),
                })
            })
            .collect::<Result<_, _>>()?
    };
    let index = match &loaded {
        Loaded::Codes(_, items) => Some(RetrievalIndex::from_train(items.clone(), &data)?),
        Loaded::Embeddings(..) => None,
    };
    for u in users {
        let (ids, distances): (Vec<usize>, Option<Vec<u32>>) = match (&loaded, &index) {
            (Loaded::Codes(b, _), Some(index)) => {
                let top = index.top_k(b.row(u), args.k, Some(u))?;
                (
                    top.iter().map(|p| p.0).collect(),
                    Some(top.iter().map(|p| p.1).collect()),
                )
            }
            _ => (loaded.model().rank(u, args.k, data.train(u)), None),
        };
        let items: Vec<&str> = ids.iter().map(|&i| data.item_key(i)).collect();
        let mut line = json!({ "user": data.user_key(u), "items": items });
        if let Some(d) = distances {
            line["distances"] = json!(d);
        }
        emit(&line.to_string());
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> CmdResult {
    let result = benchmark_speedup(args.m, args.dim, args.queries, args.seed)?;
    emit(&serde_json::to_string(&result).expect("bench serializes"));
    eprintln!("speedup {:.2}x", result.speedup);
    Ok(())
}

fn cmd_grid(args: &GridArgs) -> CmdResult {
    if args.gammas.is_empty() || args.lambdas.is_empty() || args.seeds.is_empty() {
        return Err(usage("grid axes must be nonempty"));
    }
    if args.k.contains(&0) {
        return Err(usage("--k values must be >= 1"));
    }
    // Validate every cell before any training starts.
    let cells: Vec<Hyperparams> = args
        .gammas
        .iter()
        .flat_map(|&gamma| {
            args.lambdas.iter().flat_map(move |&lambda| {
                args.seeds.iter().map(move |&seed| Hyperparams {
                    gamma,
                    lambda,
                    seed,
                    ..args.hp.hyperparams()
                })
            })
        })
        .collect();
    for hp in &cells {
        hp.validate()?;
    }
    let data = load_prepared(&args.data, args.sep)?;
    for hp in &cells {
        let trained = train_model(&data, hp, args.mode, args.hp.solver())?;
        let (metrics, name) = match &trained.codes {
            Some((b, d)) => (
                evaluate_model(&Model::Codes { users: b, items: d }, &data, &args.k)?,
                "dsiml",
            ),
            None => (
                evaluate_model(
                    &Model::InnerProduct {
                        users: &trained.emb.0,
                        items: &trained.emb.1,
                    },
                    &data,
                    &args.k,
                )?,
                "siml",
            ),
        };
        for line in metrics.json_lines(name, hp.seed) {
            let mut v: serde_json::Value = serde_json::from_str(&line).expect("valid json");
            v["gamma"] = json!(hp.gamma);
            v["lambda"] = json!(hp.lambda);
            emit(&v.to_string());
        }
        eprintln!(
            "gamma {} lambda {} seed {} done",
            hp.gamma, hp.lambda, hp.seed
        );
    }
    Ok(())
}

fn cmd_rq4(args: &Rq4Args) -> CmdResult {
    let hp = args.hp.hyperparams();
    hp.validate()?;
    let settings = rq4_settings();
    let report = run_rq4(&args.seeds, &hp, &settings)?;
    for row in &report.rows {
        emit(&serde_json::to_string(row).expect("rows serialize"));
    }
    for (name, _) in &settings {
        eprintln!(
            "{name}: mean NDCG@10 siml {:.4} cml {:.4}",
            report.mean_siml_ndcg(name),
            report.mean_cml_ndcg(name)
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Recommend(a) => cmd_recommend(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Rq4(a) => cmd_rq4(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
