use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use demoval::backends::{Evaluator, ResponseCache};
use demoval::baselines::{build_prompt_log, condacc_scores, influence_scores, loo_scores, random_select, FailurePolicy};
use demoval::config::{BackendKind, RunConfig};
use demoval::engine::{exact_values, ShapleyEngine, DEFAULT_EXACT_BUDGET};
use demoval::harness::{
    config_hash, random_base_prompt, run_add_experiment, run_fairness_experiment, run_ood_experiment,
    run_remove_experiment, select, Direction, Exporter,
};
use demoval::noise::{detection_report, inject_label_noise};
use demoval::table::{ScoreTable, ValueTable};
use demoval::{CandidatePool, Error, Result};

#[derive(Parser)]
#[command(name = "demoval", version, about = "Value in-context demonstrations and run selection experiments")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Candidate pool to use instead of the configured one.
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Synthetic,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    High,
    Low,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::High => Direction::High,
            DirectionArg::Low => Direction::Low,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate demonstration values by permutation sampling.
    Value {
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mu: Option<f64>,
        /// Enumerate every ordered arrangement instead of sampling.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value_t = DEFAULT_EXACT_BUDGET)]
        budget: u128,
    },
    /// Compute a baseline score.
    Baseline {
        #[command(subcommand)]
        kind: BaselineCmd,
    },
    /// Print the top or bottom k demos of a value table.
    Select {
        #[arg(long)]
        values: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "high")]
        direction: DirectionArg,
        #[arg(long)]
        k: usize,
    },
    /// Add demos one at a time in value order.
    ExpAdd {
        #[arg(long)]
        values: Option<PathBuf>,
        /// Run a single direction (both by default).
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        #[arg(long)]
        max_k: Option<usize>,
    },
    /// Remove demos one at a time from a random base prompt.
    ExpRemove {
        #[arg(long)]
        values: Option<PathBuf>,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
    },
    /// Accuracy and group fairness of top-valued prompts across context parities.
    ExpFairness,
    /// Accuracy of top-valued prompts on the out-of-distribution set.
    ExpOod {
        #[arg(long)]
        values: Option<PathBuf>,
    },
    /// Label-noise injection and detection.
    Noise {
        #[command(subcommand)]
        cmd: NoiseCmd,
    },
    /// Inspect or compact the LLM response cache.
    Cache {
        #[command(subcommand)]
        cmd: CacheCmd,
    },
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// Mean score of sampled prompts containing each demo.
    Condacc {
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Mean score with each demo minus mean score without it.
    Influence {
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Leave-one-out drop on a random base prompt.
    Loo {
        #[arg(long)]
        size: Option<usize>,
    },
    /// Uniformly random selection.
    Random {
        #[arg(long)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum NoiseCmd {
    /// Flip a fraction of pool labels.
    Inject {
        #[arg(long)]
        rate: Option<f64>,
        /// File name of the noisy pool inside the output directory.
        #[arg(long, default_value = "noisy_pool.jsonl")]
        output: String,
    },
    /// Report where the flipped demos rank by value.
    Report {
        #[arg(long)]
        values: Option<PathBuf>,
        #[arg(long)]
        flipped: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
    },
}

#[derive(Subcommand)]
enum CacheCmd {
    Stats {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    Gc {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

/// Outcome of a command that completed but may have done so only partly.
enum Status {
    Complete,
    Partial,
}

struct Ctx {
    config: RunConfig,
    backend: BackendKind,
    out: PathBuf,
    pool_override: Option<PathBuf>,
    hash: String,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
        let mut config = RunConfig::load(path)?;
        if let Some(seed) = cli.seed {
            config.set_seed(seed);
        }
        let backend = match cli.backend {
            Some(BackendArg::Synthetic) => BackendKind::Synthetic,
            Some(BackendArg::Llm) => BackendKind::Llm,
            None => config.backend,
        };
        config.backend = backend;
        if let Some(p) = &cli.pool {
            config.pool = p.clone();
        }
        let hash = config_hash(&config)?;
        Ok(Self {
            config,
            backend,
            out: cli.out.clone(),
            pool_override: cli.pool.clone(),
            hash,
        })
    }

    fn pool(&self) -> Result<CandidatePool> {
        self.config.load_pool(self.pool_override.as_deref())
    }

    fn evaluator(&self) -> Result<Box<dyn Evaluator>> {
        self.config.evaluator(self.backend)
    }

    fn exporter(&self) -> Result<Exporter> {
        Exporter::open(&self.out, &self.hash)
    }

    fn values_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("values.csv"))
    }
}

fn load_scores(path: &Path) -> Result<ScoreTable> {
    ScoreTable::load(path)
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    Ok(text)
}

fn finish(ex: Exporter) -> Result<Status> {
    let partial = ex.is_partial();
    ex.finish()?;
    Ok(if partial { Status::Partial } else { Status::Complete })
}

fn cmd_value(ctx: &Ctx, passes: Option<usize>, k: Option<usize>, mu: Option<f64>, exact: bool, budget: u128) -> Result<Status> {
    let pool = ctx.pool()?;
    let dev = ctx.config.load_dev()?;
    let evaluator = ctx.evaluator()?;
    let mut cfg = ctx.config.engine.clone();
    cfg.n_passes = passes.unwrap_or(cfg.n_passes);
    cfg.k = k.unwrap_or(cfg.k);
    cfg.mu = mu.unwrap_or(cfg.mu);
    let mut ex = ctx.exporter()?;

    if exact {
        let table = exact_values(&pool, cfg.k, &ctx.config.task, &dev, &evaluator, budget)?;
        ex.write_values("values.csv", &table)?;
        ex.write_json("value_report.json", "report", &json!({"method": "exact", "k": cfg.k, "n": pool.len()}))?;
        println!("wrote {}", ex.dir().join("values.csv").display());
        return finish(ex);
    }

    let stem_name = format!("checkpoints/values-{}", &ctx.hash[..12]);
    std::fs::create_dir_all(ctx.out.join("checkpoints")).map_err(|e| Error::io(ctx.out.join("checkpoints"), e))?;
    let engine = ShapleyEngine::new(cfg.clone(), &ctx.config.task, &dev, &pool, &evaluator)?.with_checkpoint(ctx.out.join(&stem_name));
    let (table, completed, error) = match engine.compute_values() {
        Ok(t) => (t, cfg.n_passes, None),
        Err(Error::Partial { completed, cause, .. }) => {
            let (t, _) = demoval::engine::Checkpoint::new(ctx.out.join(&stem_name)).load()?;
            ex.mark_partial();
            (t, completed, Some(cause.to_string()))
        }
        Err(e) => return Err(e),
    };
    ex.register(&format!("{stem_name}.csv"), "checkpoint")?;
    ex.register(&format!("{stem_name}.json"), "checkpoint")?;
    ex.write_values("values.csv", &table)?;
    ex.write_json(
        "value_report.json",
        "report",
        &json!({
            "method": "permutation",
            "k": cfg.k,
            "mu": cfg.mu,
            "seed": cfg.seed,
            "passes_requested": cfg.n_passes,
            "passes_completed": completed,
            "zero_shot": engine.zero_shot()?,
            "error": error,
        }),
    )?;
    if let Some(e) = &error {
        eprintln!("partial result after {completed} of {} passes: {e}", cfg.n_passes);
    }
    println!("wrote {}", ex.dir().join("values.csv").display());
    finish(ex)
}

fn cmd_baseline(ctx: &Ctx, kind: &BaselineCmd) -> Result<Status> {
    let pool = ctx.pool()?;
    let dev = ctx.config.load_dev()?;
    let mut ex = ctx.exporter()?;
    let ids: Vec<&str> = pool.ids().collect();
    match kind {
        BaselineCmd::Condacc { m, k } | BaselineCmd::Influence { m, k } => {
            let evaluator = ctx.evaluator()?;
            let m = m.unwrap_or(ctx.config.baselines.m);
            let k = k.unwrap_or(ctx.config.engine.k);
            let log = build_prompt_log(&pool, k, m, &ctx.config.task, &dev, &evaluator, ctx.config.seed, FailurePolicy::Skip)?;
            if log.is_empty() {
                return Err(Error::Backend("every sampled prompt failed".into()));
            }
            if !log.skipped.is_empty() {
                eprintln!("{} of {m} prompts failed and were skipped", log.skipped.len());
                ex.mark_partial();
            }
            ex.write_text("prompt_log.jsonl", "prompt_log", &jsonl(&log.entries)?)?;
            let (name, scores) = if matches!(kind, BaselineCmd::Condacc { .. }) {
                ("condacc.csv", condacc_scores(&log, &ids))
            } else {
                ("influence.csv", influence_scores(&log, &ids))
            };
            let undefined = scores.undefined_ids().len();
            if undefined > 0 {
                eprintln!("{undefined} demos have undefined scores");
            }
            ex.write_scores(name, &scores)?;
            println!("wrote {}", ex.dir().join(name).display());
        }
        BaselineCmd::Loo { size } => {
            let evaluator = ctx.evaluator()?;
            let size = size.unwrap_or(ctx.config.harness.remove_base_size);
            let base = random_base_prompt(&pool, size, ctx.config.seed)?;
            let scores = loo_scores(&pool.resolve(&base)?, &ctx.config.task, &dev, &evaluator)?;
            ex.write_scores("loo.csv", &scores)?;
            println!("wrote {}", ex.dir().join("loo.csv").display());
        }
        BaselineCmd::Random { k } => {
            let chosen = random_select(&pool, *k, ctx.config.seed)?;
            ex.write_json("random_selection.json", "selection", &chosen)?;
            for id in &chosen {
                println!("{id}");
            }
        }
    }
    finish(ex)
}

fn cmd_select(ctx: &Ctx, values: &Option<PathBuf>, direction: DirectionArg, k: usize) -> Result<Status> {
    let scores = load_scores(&ctx.values_path(values))?;
    let chosen = select(&scores, direction.into(), k)?;
    let mut ex = ctx.exporter()?;
    ex.write_json("selection.json", "selection", &chosen)?;
    for id in &chosen {
        println!("{id}");
    }
    finish(ex)
}

fn directions(d: Option<DirectionArg>) -> Vec<Direction> {
    match d {
        Some(d) => vec![d.into()],
        None => vec![Direction::High, Direction::Low],
    }
}

fn cmd_add(ctx: &Ctx, values: &Option<PathBuf>, direction: Option<DirectionArg>, max_k: Option<usize>) -> Result<Status> {
    let scores = load_scores(&ctx.values_path(values))?;
    let pool = ctx.pool()?;
    let dev = ctx.config.load_dev()?;
    let evaluator = ctx.evaluator()?;
    let max_k = max_k.unwrap_or(ctx.config.harness.max_k);
    let mut ex = ctx.exporter()?;
    let mut report = serde_json::Map::new();
    for d in directions(direction) {
        let curve = run_add_experiment(&scores, d, max_k, &pool, &ctx.config.task, &dev, &evaluator)?;
        ex.write_curve(&format!("add_{d}.csv"), &curve)?;
        println!("add-{d}: {:?}", curve.points);
        report.insert(d.to_string(), serde_json::to_value(&curve)?);
    }
    ex.write_json("add_report.json", "report", &report)?;
    finish(ex)
}

fn cmd_remove(ctx: &Ctx, values: &Option<PathBuf>, direction: Option<DirectionArg>) -> Result<Status> {
    let scores = load_scores(&ctx.values_path(values))?;
    let pool = ctx.pool()?;
    let dev = ctx.config.load_dev()?;
    let evaluator = ctx.evaluator()?;
    let h = &ctx.config.harness;
    let base = random_base_prompt(&pool, h.remove_base_size, ctx.config.seed)?;
    let mut ex = ctx.exporter()?;
    let mut report = serde_json::Map::new();
    report.insert("base_prompt".into(), json!(base));
    for d in directions(direction) {
        let curve = run_remove_experiment(&scores, &base, d, h.remove_keep, &pool, &ctx.config.task, &dev, &evaluator)?;
        ex.write_curve(&format!("remove_{d}.csv"), &curve)?;
        println!("remove-{d}: {:?}", curve.points);
        report.insert(d.to_string(), serde_json::to_value(&curve)?);
    }
    ex.write_json("remove_report.json", "report", &report)?;
    finish(ex)
}

fn cmd_fairness(ctx: &Ctx) -> Result<Status> {
    let task = ctx.config.fairness_task()?.clone();
    let setup = ctx.config.fairness_setup()?;
    let (context, test, dev) = ctx.config.load_fairness_data()?;
    let valuer = ctx.evaluator()?;
    let predictor = ctx.config.per_example_evaluator(ctx.backend)?;
    let engine_cfg = ctx.config.engine.clone();
    let reports = run_fairness_experiment(&setup, &task, &context, &test, &predictor, |pool| {
        let mut cfg = engine_cfg.clone();
        cfg.k = cfg.k.min(pool.len());
        ShapleyEngine::new(cfg, &task, &dev, pool, &valuer)?.compute_values()
    })?;
    let mut ex = ctx.exporter()?;
    for r in &reports {
        println!(
            "bpc={} shots={} acc={:.3} m_dpd={:?} m_eod={:?} refusals={}",
            r.bpc, r.shots, r.acc, r.m_dpd, r.m_eod, r.refusals
        );
    }
    ex.write_json("fairness_report.json", "report", &reports)?;
    finish(ex)
}

fn cmd_ood(ctx: &Ctx, values: &Option<PathBuf>) -> Result<Status> {
    let scores = load_scores(&ctx.values_path(values))?;
    let pool = ctx.pool()?;
    let ood = ctx.config.load_ood()?;
    let evaluator = ctx.evaluator()?;
    let report = run_ood_experiment(&scores, &ctx.config.harness.ood_k, &pool, &ctx.config.task, &ood, &evaluator, ctx.config.seed)?;
    for row in &report.rows {
        println!("k={} accuracy={:.4} random={:.4}", row.k, row.accuracy, row.random_accuracy);
    }
    let mut ex = ctx.exporter()?;
    ex.write_json("ood_report.json", "report", &report)?;
    finish(ex)
}

fn cmd_noise(ctx: &Ctx, cmd: &NoiseCmd) -> Result<Status> {
    match cmd {
        NoiseCmd::Inject { rate, output } => {
            let pool = ctx.pool()?;
            let rate = rate.unwrap_or(ctx.config.noise.rate);
            let (noisy, flipped) = inject_label_noise(pool.demos(), &ctx.config.task.label_set, rate, ctx.config.seed)?;
            let mut ex = ctx.exporter()?;
            let path = ex.write_text(output, "pool", &jsonl(&noisy)?)?;
            ex.write_json("flipped.json", "flipped", &flipped)?;
            println!("flipped {} of {} labels; wrote {}", flipped.len(), noisy.len(), path.display());
            finish(ex)
        }
        NoiseCmd::Report { values, flipped, cutoffs } => {
            let table = ValueTable::load(&ctx.values_path(values))?;
            let flipped_path = flipped.clone().unwrap_or_else(|| ctx.out.join("flipped.json"));
            let text = std::fs::read_to_string(&flipped_path).map_err(|e| Error::io(&flipped_path, e))?;
            let flipped: BTreeSet<String> = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: flipped_path.clone(),
                message: e.to_string(),
            })?;
            let cutoffs = cutoffs.clone().unwrap_or_else(|| ctx.config.noise.cutoffs.clone());
            let report = detection_report(&table, &flipped, &cutoffs)?;
            println!("{}", serde_json::to_string(&report)?);
            let mut ex = ctx.exporter()?;
            ex.write_json("noise_report.json", "report", &report)?;
            finish(ex)
        }
    }
}

fn cmd_cache(cli: &Cli, cmd: &CacheCmd) -> Result<Status> {
    let given = match cmd {
        CacheCmd::Stats { cache } | CacheCmd::Gc { cache } => cache.clone(),
    };
    let path = match given {
        Some(p) => p,
        None => {
            let ctx = Ctx::new(cli)?;
            ctx.config
                .llm
                .and_then(|l| l.cache_path)
                .ok_or_else(|| Error::Config("no cache path: pass --cache or set llm.cache_path".into()))?
        }
    };
    let cache = ResponseCache::open(&path)?;
    match cmd {
        CacheCmd::Stats { .. } => println!("{}", serde_json::to_string_pretty(&cache.stats()?)?),
        CacheCmd::Gc { .. } => println!("dropped {} lines", cache.compact()?),
    }
    Ok(Status::Complete)
}

fn run(cli: &Cli) -> Result<Status> {
    if let Command::Cache { cmd } = &cli.command {
        return cmd_cache(cli, cmd);
    }
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Value { passes, k, mu, exact, budget } => cmd_value(&ctx, *passes, *k, *mu, *exact, *budget),
        Command::Baseline { kind } => cmd_baseline(&ctx, kind),
        Command::Select { values, direction, k } => cmd_select(&ctx, values, *direction, *k),
        Command::ExpAdd { values, direction, max_k } => cmd_add(&ctx, values, *direction, *max_k),
        Command::ExpRemove { values, direction } => cmd_remove(&ctx, values, *direction),
        Command::ExpFairness => cmd_fairness(&ctx),
        Command::ExpOod { values } => cmd_ood(&ctx, values),
        Command::Noise { cmd } => cmd_noise(&ctx, cmd),
        Command::Cache { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial) => {
            eprintln!("finished with partial results");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
