use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use autoda::analysis::{dead_instructions, inputs_check};
use autoda::attack::{attack, distortion_ratio, AttackConfig, Start, StartConfig};
use autoda::compiler::compile;
use autoda::dsl::{format_program, format_tac, parse_program, SsaProgram, TacProgram};
use autoda::gen::{gen_random, GenConfig};
use autoda::oracle::{Example, Oracle, OracleSpec};
use autoda::report::{
    benchmark, emit_reports, load_runs, save_runs, summarize, write_run_log, Aggregate, BenchConfig,
};
use autoda::rng::{stream, tag};
use autoda::search::{load_examples, run_ablation, run_search, AblationConfig, SearchConfig, Technique};

#[derive(Parser)]
#[command(name = "autoda", version, about = "Random search for decision-based attack programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate random programs.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        n_hyperparams: usize,
        #[arg(long, default_value_t = 4.0)]
        unused_bias: f64,
        #[arg(long)]
        no_predefined: bool,
        /// Write one file per program into this directory instead of
        /// printing them separated by `---`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the inputs check and list dead instructions.
    Check {
        program: PathBuf,
        /// Do not require hyperparameters to reach the result.
        #[arg(long)]
        ignore_hyperparams: bool,
    },
    /// Compile an SSA program to three-address code.
    Compile {
        program: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Attack one example and write the run log as JSON lines.
    Attack {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        oracle: String,
        #[arg(long)]
        budget: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dimension for oracle specs that do not fix one.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        no_adapt: bool,
        /// Report whether the final distance is below this threshold.
        #[arg(long)]
        epsilon: Option<f64>,
        /// JSON-lines example file; the first line is attacked unless
        /// `--index` is given. Without it an example is synthesized.
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Boundary distance of a synthesized example.
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the two-stage search.
    Search {
        /// TOML configuration; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "search-out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Print the default configuration and exit.
        #[arg(long)]
        print_default: bool,
    },
    /// Benchmark programs over an example set.
    Bench {
        #[arg(long = "program", required = true)]
        programs: Vec<PathBuf>,
        #[arg(long)]
        oracle: String,
        #[arg(long)]
        dim: Option<usize>,
        /// JSON-lines example file; otherwise `--n-examples` are synthesized.
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        n_examples: usize,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        /// TOML benchmark configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        aggregate: Option<Aggregate>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Rebuild curves and summaries from saved run logs.
    Report {
        /// The `runs` directory written by `bench`.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value = "median")]
        aggregate: Aggregate,
        #[arg(long, value_delimiter = ',', default_value = "2000,4000,20000")]
        checkpoints: Vec<u64>,
    },
    /// Compare the best stage-1 ratios of cumulative technique subsets.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_programs: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Bad input (exit 1) versus a failure while running (exit 2).
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_program(path: &Path) -> Result<SsaProgram, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).invalid()?;
    parse_program(&text).with_context(|| format!("parsing {}", path.display())).invalid()
}

fn compile_program(p: &SsaProgram) -> Result<TacProgram, Failure> {
    compile(p).invalid()
}

fn oracle_spec(spec: &str, dim: Option<usize>) -> Result<OracleSpec, Failure> {
    let spec = match dim {
        Some(d) if !spec.contains("dim=") && !spec.contains("w=") && !spec.contains("c=") => {
            let sep = if spec.contains(':') { ";" } else { ":" };
            format!("{spec}{sep}dim={d}")
        }
        _ => spec.to_string(),
    };
    OracleSpec::parse(&spec).invalid()
}

fn build_oracle(spec: &str, dim: Option<usize>) -> Result<Oracle, Failure> {
    oracle_spec(spec, dim)?.build().invalid()
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).invalid()?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display())).invalid()
}

fn synthesize(oracle: &Oracle, n: usize, margin: f64, seed: u64) -> Result<Vec<Example>, Failure> {
    let mut rng = stream(seed, &[tag::POOL]);
    (0..n)
        .map(|_| {
            oracle
                .synthesize(margin, &mut rng)
                .ok_or_else(|| anyhow!("this oracle cannot synthesize examples; pass --examples"))
                .invalid()
        })
        .collect()
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())).runtime(),
        None => io::stdout().write_all(text.as_bytes()).runtime(),
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen { seed, count, max_len, n_hyperparams, unused_bias, no_predefined, out } => {
            let cfg = GenConfig { max_len, n_hyperparams, unused_bias, predefined: !no_predefined, seed, ..GenConfig::default() };
            cfg.validate().invalid()?;
            let mut rng = stream(seed, &[tag::GENERATE]);
            if let Some(dir) = &out {
                fs::create_dir_all(dir).runtime()?;
            }
            let mut text = String::new();
            for i in 0..count {
                let p = format_program(&gen_random(&cfg, &mut rng));
                match &out {
                    Some(dir) => fs::write(dir.join(format!("prog{i:06}.ssa")), p).runtime()?,
                    None => {
                        if i > 0 {
                            text.push_str("---\n");
                        }
                        text.push_str(&p);
                    }
                }
            }
            if out.is_none() {
                write_output(None, &text)?;
            }
            Ok(())
        }
        Command::Check { program, ignore_hyperparams } => {
            let p = read_program(&program)?;
            let outcome = inputs_check(&p, !ignore_hyperparams);
            let dead: Vec<String> = dead_instructions(&p).iter().map(ToString::to_string).collect();
            println!("inputs check: {outcome}");
            println!("dead instructions: {}", if dead.is_empty() { "none".into() } else { dead.join(" ") });
            if outcome.passed() {
                Ok(())
            } else {
                Err(Failure::Invalid(anyhow!("{} failed the inputs check", program.display())))
            }
        }
        Command::Compile { program, out } => {
            let tac = compile_program(&read_program(&program)?)?;
            write_output(out.as_deref(), &format_tac(&tac))
        }
        Command::Attack { program, oracle, budget, seed, dim, no_adapt, epsilon, examples, index, margin, out } => {
            let tac = compile_program(&read_program(&program)?)?;
            let oracle = build_oracle(&oracle, dim)?;
            let example = match &examples {
                Some(path) => load_examples(path)
                    .invalid()?
                    .into_iter()
                    .nth(index)
                    .ok_or_else(|| Failure::Invalid(anyhow!("{} has no example {index}", path.display())))?,
                None => synthesize(&oracle, index + 1, margin, seed)?.pop().unwrap(),
            };
            if example.x0.len() != oracle.dim() {
                return Err(Failure::Invalid(anyhow!("example dimension {} differs from oracle dimension {}", example.x0.len(), oracle.dim())));
            }
            if oracle.peek(&example.x0).runtime()? {
                return Err(Failure::Invalid(anyhow!("example is already adversarial")));
            }
            let cfg = AttackConfig { adapt: !no_adapt, ..AttackConfig::with_query_budget(budget) };
            let start = Start::Search { fallback: &example.fallback, cfg: StartConfig::default() };
            let mut rng = stream(seed, &[tag::ATTACK]);
            let (log, failure) = match attack(&tac, &oracle, &example.x0, None, start, &cfg, &mut rng) {
                Ok(log) => (log, None),
                Err(f) => (*f.partial, Some(f.error)),
            };
            let mut buf = Vec::new();
            write_run_log(&mut buf, &log).runtime()?;
            write_output(out.as_deref(), &String::from_utf8(buf).expect("json is utf-8"))?;
            if let Some(e) = failure {
                return Err(Failure::Runtime(anyhow!(e).context("attack aborted; partial log written")));
            }
            if let Some(ratio) = distortion_ratio(&log) {
                eprintln!("queries {} distortion ratio {ratio}", log.summary.queries);
            }
            if let (Some(eps), Some(d)) = (epsilon, log.summary.d_min) {
                eprintln!("success (d < {eps}): {}", d < eps);
            }
            Ok(())
        }
        Command::Search { config, out, seed, workers, print_default } => {
            if print_default {
                let text = toml::to_string(&SearchConfig::default()).runtime()?;
                return write_output(None, &text);
            }
            let mut cfg: SearchConfig = match &config {
                Some(path) => read_toml(path)?,
                None => SearchConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate().invalid()?;
            let outcome = run_search(&cfg, Some(&out)).map_err(|e| match e {
                autoda::search::SearchError::Config(_) | autoda::search::SearchError::Pool(_) => Failure::Invalid(e.into()),
                other => Failure::Runtime(anyhow!(other).context(format!("partial results in {}", out.display()))),
            })?;
            let s = &outcome.stats;
            eprintln!(
                "generated {} failed_inputs {} failed_distance {} evaluated {} batches {} queries {}",
                s.counters.generated, s.counters.failed_inputs, s.counters.failed_distance, s.counters.evaluated, s.batches, s.queries
            );
            if let Some(best) = outcome.records.first() {
                eprintln!("best stage-2 ratio {:?} (batch {})", best.stage2_ratio, best.batch);
            }
            Ok(())
        }
        Command::Bench {
            programs,
            oracle,
            dim,
            examples,
            n_examples,
            margin,
            config,
            budget,
            epsilon,
            seed,
            workers,
            aggregate,
            out,
        } => {
            let mut cfg: BenchConfig = match &config {
                Some(path) => read_toml(path)?,
                None => BenchConfig::default(),
            };
            cfg.budget = budget.unwrap_or(cfg.budget);
            cfg.epsilon = epsilon.unwrap_or(cfg.epsilon);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.workers = workers.unwrap_or(cfg.workers);
            cfg.aggregate = aggregate.unwrap_or(cfg.aggregate);
            cfg.validate().invalid()?;
            let oracle = build_oracle(&oracle, dim)?;
            let examples = match &examples {
                Some(path) => load_examples(path).invalid()?,
                None => synthesize(&oracle, n_examples, margin, cfg.seed)?,
            };
            let mut named = Vec::new();
            for path in &programs {
                let name = path.file_stem().map_or_else(|| "program".into(), |s| s.to_string_lossy().into_owned());
                if named.iter().any(|(n, _)| n == &name) {
                    return Err(Failure::Invalid(anyhow!("two programs named `{name}`")));
                }
                named.push((name, compile_program(&read_program(path)?)?));
            }
            let runs = benchmark(&named, &oracle, &examples, &cfg).runtime()?;
            save_runs(&out.join("runs"), &runs).runtime()?;
            emit_reports(&out.join("report"), &summarize(&runs, &cfg)).runtime()?;
            for r in &runs {
                if !r.excluded.is_empty() {
                    eprintln!("{}: excluded already-adversarial examples {:?}", r.name, r.excluded);
                }
            }
            Ok(())
        }
        Command::Report { runs, out, epsilon, aggregate, checkpoints } => {
            let cfg = BenchConfig { epsilon, aggregate, checkpoints, ..BenchConfig::default() };
            cfg.validate().invalid()?;
            let runs = load_runs(&runs).invalid()?;
            emit_reports(&out, &summarize(&runs, &cfg)).runtime()
        }
        Command::Ablate { config, seed, n_programs, out } => {
            let mut cfg: AblationConfig = match &config {
                Some(path) => read_toml(path)?,
                None => AblationConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.n_programs = n_programs.unwrap_or(cfg.n_programs);
            let mut lines = String::new();
            for t in Technique::ALL {
                let r = run_ablation(t, &cfg).runtime()?;
                eprintln!("{:<16} best {:.6} generated {}", t.name(), r.best, r.generated);
                lines.push_str(&serde_json::to_string(&r).runtime()?);
                lines.push('\n');
            }
            write_output(out.as_deref(), &lines)
        }
    }
}
