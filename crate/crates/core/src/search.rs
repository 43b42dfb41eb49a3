//! Two-stage batched random search.
//!
//! Programs are generated in numbered chunks, each from its own random
//! stream, and filtered (inputs check, then distance test). Survivors are
//! grouped into batches; every batch is scored for a few iterations on one
//! example with shared noise (stage 1), and the batch winner is scored on a
//! fixed set of examples for many iterations (stage 2). All oracle queries,
//! starting-point searches included, count against one global budget.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::inputs_check;
use crate::attack::{
    attack_with_noise, distortion_ratio, find_start, AttackConfig, AttackError, ControllerConfig, DistanceTest,
    GaussianNoise, NoiseTape, Start, StartConfig, StartOutcome,
};
use crate::compiler::compile;
use crate::dsl::{format_program, ExecEnv, SsaProgram, TacProgram};
use crate::gen::{gen_random, GenConfig};
use crate::oracle::{Example, Oracle, OracleError, OracleSpec};
use crate::rng::{stream, tag};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("example pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// filters

/// Which filters run before a program may spend oracle queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub inputs_check: bool,
    /// Treat hyperparameters as inputs in the inputs check.
    pub require_hyperparams: bool,
    pub distance_test: bool,
    pub distance_cases: usize,
    pub distance_dim: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            inputs_check: true,
            require_hyperparams: true,
            distance_test: true,
            distance_cases: DistanceTest::DEFAULT_CASES,
            distance_dim: DistanceTest::DEFAULT_DIM,
        }
    }
}

impl FilterConfig {
    /// No filtering at all.
    pub fn none() -> Self {
        FilterConfig { inputs_check: false, distance_test: false, ..FilterConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOutcome {
    FailedInputs,
    FailedDistance,
    Survived,
}

/// The static and dynamic filters, with distance-test cases fixed per seed.
#[derive(Debug, Clone)]
pub struct Filter {
    cfg: FilterConfig,
    test: Option<DistanceTest>,
}

impl Filter {
    pub fn new(cfg: &FilterConfig, seed: u64) -> Self {
        let test = cfg
            .distance_test
            .then(|| DistanceTest::new(cfg.distance_cases, cfg.distance_dim, &mut stream(seed, &[tag::DISTANCE_TEST])));
        Filter { cfg: cfg.clone(), test }
    }

    pub fn apply(&self, p: &SsaProgram, env: &mut ExecEnv) -> FilterOutcome {
        if self.cfg.inputs_check && !inputs_check(p, self.cfg.require_hyperparams).passed() {
            return FilterOutcome::FailedInputs;
        }
        if let Some(test) = &self.test {
            if !test.passes(p, env) {
                return FilterOutcome::FailedDistance;
            }
        }
        FilterOutcome::Survived
    }
}

/// Filter tallies over a plain stream of generated programs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub generated: u64,
    pub failed_inputs: u64,
    pub failed_distance: u64,
    pub survived: u64,
}

/// Generates and filters `count` programs, split into chunks exactly as the
/// search does.
pub fn filter_stats(gen: &GenConfig, filters: &FilterConfig, count: u64, seed: u64, chunk_size: usize) -> FilterStats {
    let filter = Filter::new(filters, seed);
    let chunk_size = chunk_size.max(1) as u64;
    let n_chunks = count.div_ceil(chunk_size);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = chunk_size.min(count - c * chunk_size) as usize;
            let chunk = generate_chunk(gen, &filter, seed, c, len);
            let mut s = FilterStats { generated: len as u64, ..FilterStats::default() };
            for o in chunk.outcomes {
                match o {
                    FilterOutcome::FailedInputs => s.failed_inputs += 1,
                    FilterOutcome::FailedDistance => s.failed_distance += 1,
                    FilterOutcome::Survived => s.survived += 1,
                }
            }
            s
        })
        .reduce(FilterStats::default, |a, b| FilterStats {
            generated: a.generated + b.generated,
            failed_inputs: a.failed_inputs + b.failed_inputs,
            failed_distance: a.failed_distance + b.failed_distance,
            survived: a.survived + b.survived,
        })
}

struct Chunk {
    outcomes: Vec<FilterOutcome>,
    survivors: VecDeque<SsaProgram>,
}

fn generate_chunk(gen: &GenConfig, filter: &Filter, seed: u64, index: u64, len: usize) -> Chunk {
    let mut rng = stream(seed, &[tag::GENERATE, index]);
    let mut env = ExecEnv::new(filter.cfg.distance_dim);
    let mut outcomes = Vec::with_capacity(len);
    let mut survivors = VecDeque::new();
    for _ in 0..len {
        let p = gen_random(gen, &mut rng);
        let o = filter.apply(&p, &mut env);
        if o == FilterOutcome::Survived {
            survivors.push_back(p);
        }
        outcomes.push(o);
    }
    Chunk { outcomes, survivors }
}

/// Search counters. `generated = failed_inputs + failed_distance + evaluated`
/// always holds: generation is accounted only up to the last program that
/// reached stage 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub generated: u64,
    pub failed_inputs: u64,
    pub failed_distance: u64,
    pub evaluated: u64,
}

/// In-order stream of filter survivors, generated chunk by chunk with up to
/// `parallel` chunks in flight.
struct ProgramSource<'a> {
    gen: &'a GenConfig,
    filter: &'a Filter,
    seed: u64,
    chunk_size: usize,
    parallel: usize,
    next_chunk: u64,
    ready: VecDeque<Chunk>,
    pos: usize,
    tally: Counters,
}

impl<'a> ProgramSource<'a> {
    fn new(gen: &'a GenConfig, filter: &'a Filter, seed: u64, chunk_size: usize, parallel: usize) -> Self {
        ProgramSource {
            gen,
            filter,
            seed,
            chunk_size,
            parallel: parallel.max(1),
            next_chunk: 0,
            ready: VecDeque::new(),
            pos: 0,
            tally: Counters::default(),
        }
    }

    /// Next survivor and the counters as of having consumed it.
    fn next_survivor(&mut self) -> (SsaProgram, Counters) {
        loop {
            if self.ready.is_empty() {
                let first = self.next_chunk;
                let (gen, filter, seed, len) = (self.gen, self.filter, self.seed, self.chunk_size);
                let chunks: Vec<Chunk> = (first..first + self.parallel as u64)
                    .into_par_iter()
                    .map(|c| generate_chunk(gen, filter, seed, c, len))
                    .collect();
                self.next_chunk += self.parallel as u64;
                self.ready.extend(chunks);
                self.pos = 0;
            }
            let chunk = self.ready.front_mut().expect("chunk available");
            while self.pos < chunk.outcomes.len() {
                let o = chunk.outcomes[self.pos];
                self.pos += 1;
                self.tally.generated += 1;
                match o {
                    FilterOutcome::FailedInputs => self.tally.failed_inputs += 1,
                    FilterOutcome::FailedDistance => self.tally.failed_distance += 1,
                    FilterOutcome::Survived => {
                        self.tally.evaluated += 1;
                        let p = chunk.survivors.pop_front().expect("survivor recorded");
                        return (p, self.tally);
                    }
                }
            }
            self.ready.pop_front();
            self.pos = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

/// Where benign examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// JSON-lines file of `{"x0": [...], "fallback": [...]}`; when absent,
    /// examples are synthesized from the oracle geometry.
    pub path: Option<PathBuf>,
    pub size: usize,
    /// Distance of synthesized examples from the decision boundary.
    pub margin: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { path: None, size: 256, margin: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub batch_size: usize,
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub n_stage2_examples: usize,
    pub query_budget: u64,
    /// Adapt hyperparameters during stage 2 (stage 1 never adapts).
    pub stage2_adapt: bool,
    /// Oracle spec string, e.g. `halfspace:dim=16`.
    pub oracle: String,
    pub workers: usize,
    pub seed: u64,
    /// Programs per generation work item.
    pub chunk_size: usize,
    /// Number of best programs written as individual files.
    pub top_k: usize,
    /// Stop after this many batches even if budget remains.
    pub max_batches: Option<u64>,
    /// Programs are generated with `gen`; its `seed` is ignored in favor of
    /// the search seed.
    pub gen: GenConfig,
    pub filters: FilterConfig,
    pub controller: ControllerConfig,
    pub start: StartConfig,
    pub pool: PoolConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            batch_size: 150,
            stage1_iters: 100,
            stage2_iters: 10_000,
            n_stage2_examples: 10,
            query_budget: 5_000_000,
            stage2_adapt: true,
            oracle: "halfspace:dim=16".into(),
            workers: 1,
            seed: 0,
            chunk_size: 1024,
            top_k: 10,
            max_batches: None,
            gen: GenConfig::default(),
            filters: FilterConfig::default(),
            controller: ControllerConfig::default(),
            start: StartConfig::default(),
            pool: PoolConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<Self, SearchError> {
        let cfg: SearchConfig = toml::from_str(text).map_err(|e| SearchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.stage2_iters <= self.stage1_iters {
            return bad("stage2_iters must exceed stage1_iters");
        }
        if self.stage1_iters == 0 {
            return bad("stage1_iters must be at least 1");
        }
        if self.n_stage2_examples == 0 {
            return bad("n_stage2_examples must be at least 1");
        }
        if self.workers == 0 || self.chunk_size == 0 {
            return bad("workers and chunk_size must be at least 1");
        }
        if self.filters.distance_test && (self.filters.distance_cases == 0 || self.filters.distance_dim == 0) {
            return bad("distance test needs at least one case of positive dimension");
        }
        if self.pool.path.is_none() && self.pool.size == 0 {
            return bad("pool.size must be at least 1");
        }
        if !(self.pool.margin > 0.0) {
            return bad("pool.margin must be positive");
        }
        self.gen.validate().map_err(|e| SearchError::Config(e.to_string()))?;
        self.controller.validate().map_err(|e| SearchError::Config(e.to_string()))?;
        OracleSpec::parse(&self.oracle)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// examples

/// Examples that are benign with an adversarial fallback, checked without
/// spending budget.
pub fn build_pool(oracle: &Oracle, cfg: &PoolConfig, seed: u64) -> Result<Vec<Example>, SearchError> {
    let candidates = match &cfg.path {
        Some(path) => load_examples(path)?,
        None => {
            let mut rng = stream(seed, &[tag::POOL]);
            let mut out = Vec::with_capacity(cfg.size);
            for _ in 0..cfg.size {
                let e = oracle
                    .synthesize(cfg.margin, &mut rng)
                    .ok_or_else(|| SearchError::Pool("oracle cannot synthesize examples; set pool.path".into()))?;
                out.push(e);
            }
            out
        }
    };
    let mut pool = Vec::with_capacity(candidates.len());
    for e in candidates {
        if e.x0.len() != oracle.dim() || e.fallback.len() != oracle.dim() {
            return Err(SearchError::Pool(format!("example dimension differs from oracle dimension {}", oracle.dim())));
        }
        if !oracle.peek(&e.x0)? && oracle.peek(&e.fallback)? {
            pool.push(e);
        }
    }
    if pool.is_empty() {
        return Err(SearchError::Pool("no usable example (benign x0 with adversarial fallback)".into()));
    }
    Ok(pool)
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>, SearchError> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example =
            serde_json::from_str(&line).map_err(|e| SearchError::Pool(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Fixed stage-2 examples with their starting points.
#[derive(Debug, Clone)]
pub struct Stage2Set {
    pub examples: Vec<Example>,
    pub starts: Vec<Vec<f64>>,
    seed: u64,
}

impl Stage2Set {
    /// Picks the examples and finds their starting points with at most
    /// `allowance` queries. Returns `None` when the allowance runs out.
    pub fn prepare(
        oracle: &Oracle,
        pool: &[Example],
        n: usize,
        start: &StartConfig,
        allowance: u64,
        seed: u64,
    ) -> Result<(Option<Stage2Set>, u64), SearchError> {
        let mut rng = stream(seed, &[tag::STAGE2_EXAMPLE]);
        let picks: Vec<usize> = if pool.len() >= n {
            index::sample(&mut rng, pool.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let mut used = 0;
        let mut examples = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        for (i, &k) in picks.iter().enumerate() {
            let e = &pool[k];
            let mut srng = stream(seed, &[tag::STAGE2_START, i as u64]);
            match find_start(oracle, &e.x0, &e.fallback, start, allowance - used, &mut srng)? {
                StartOutcome::Found { x1, queries, .. } => {
                    used += queries;
                    starts.push(x1);
                    examples.push(e.clone());
                }
                StartOutcome::Exhausted { queries } => return Ok((None, used + queries)),
            }
        }
        Ok((Some(Stage2Set { examples, starts, seed }), used))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// evaluation

/// Ratio of a run started from a given point; 1 when nothing improved.
fn run_ratio(
    program: &TacProgram,
    oracle: &Oracle,
    x0: &[f64],
    x1: &[f64],
    cfg: &AttackConfig,
    noise: &mut dyn crate::attack::NoiseSource,
) -> Result<f64, SearchError> {
    let mut unused = stream(0, &[]);
    let log = attack_with_noise(program, oracle, x0, None, Start::Given(x1), cfg, &mut unused, Some(noise))
        .map_err(|f| SearchError::Attack(f.error))?;
    Ok(distortion_ratio(&log).unwrap_or(1.0))
}

/// Stage-1 ratios for a batch sharing one example, one starting point and
/// one noise sequence. Adaptation is off; each program runs `iters`
/// iterations. With `cap`, programs run in order and each may spend at most
/// the queries left under the cap; programs beyond it are not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn stage1_batch(
    programs: &[TacProgram],
    oracle: &Oracle,
    x0: &[f64],
    x1: &[f64],
    tape: &NoiseTape,
    iters: u64,
    controller: &ControllerConfig,
    cap: Option<u64>,
) -> Result<Vec<f64>, SearchError> {
    let cfg = |max_queries| AttackConfig { max_queries, max_iterations: iters, adapt: false, controller: controller.clone() };
    match cap {
        None => programs.par_iter().map(|p| run_ratio(p, oracle, x0, x1, &cfg(iters), &mut tape.player())).collect(),
        Some(mut left) => {
            let mut out = Vec::new();
            for p in programs {
                if left == 0 {
                    break;
                }
                let before = oracle.queries();
                out.push(run_ratio(p, oracle, x0, x1, &cfg(iters.min(left)), &mut tape.player())?);
                left -= oracle.queries() - before;
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Score {
    pub ratios: Vec<f64>,
    pub mean: f64,
}

/// Mean ratio over the fixed examples; noise for example `i` is the same for
/// every program scored against this set.
pub fn stage2_eval(
    program: &TacProgram,
    oracle: &Oracle,
    set: &Stage2Set,
    iters: u64,
    adapt: bool,
    controller: &ControllerConfig,
) -> Result<Stage2Score, SearchError> {
    let cfg = AttackConfig { max_queries: iters, max_iterations: iters, adapt, controller: controller.clone() };
    let ratios = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut noise = GaussianNoise(stream(set.seed, &[tag::STAGE2_NOISE, i as u64]));
            run_ratio(program, oracle, &set.examples[i].x0, &set.starts[i], &cfg, &mut noise)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(Stage2Score { ratios, mean })
}

// ---------------------------------------------------------------------------
// the search

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Pass,
    Skipped,
}

/// One stage-1 batch winner. Timestamps are logical: the batch index and
/// the global query count when the record was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub batch: u64,
    pub program: String,
    pub inputs_check: FilterStatus,
    pub distance_test: FilterStatus,
    pub stage1_ratio: f64,
    pub stage2_ratio: Option<f64>,
    /// Programs scored in this batch.
    pub batch_evaluated: usize,
    pub queries_at: u64,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    #[serde(flatten)]
    pub counters: Counters,
    pub stage2_evaluated: u64,
    pub batches: u64,
    pub queries: u64,
    pub start_queries: u64,
    pub query_budget: u64,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Ranked: by stage-2 ratio, records without one last.
    pub records: Vec<SearchRecord>,
    pub stats: SearchStats,
    pub stage2: Option<Stage2Set>,
}

pub fn rank(records: &mut [SearchRecord]) {
    records.sort_by(|a, b| {
        let key = |r: &SearchRecord| (r.stage2_ratio.is_none(), r.stage2_ratio.unwrap_or(f64::INFINITY));
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(a.stage1_ratio.total_cmp(&b.stage1_ratio))
            .then(a.batch.cmp(&b.batch))
    });
}

struct Sink {
    dir: PathBuf,
    results: BufWriter<File>,
}

impl Sink {
    fn create(dir: &Path) -> Result<Self, SearchError> {
        fs::create_dir_all(dir)?;
        let results = BufWriter::new(File::create(dir.join("results.jsonl"))?);
        Ok(Sink { dir: dir.to_path_buf(), results })
    }

    fn record(&mut self, r: &SearchRecord) -> Result<(), SearchError> {
        serde_json::to_writer(&mut self.results, r).map_err(std::io::Error::from)?;
        self.results.write_all(b"\n")?;
        self.results.flush()?;
        Ok(())
    }

    fn finish(&mut self, stats: &SearchStats, ranked: &[SearchRecord], top_k: usize) -> Result<(), SearchError> {
        let mut f = BufWriter::new(File::create(self.dir.join("stats.json"))?);
        serde_json::to_writer_pretty(&mut f, stats).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
        f.flush()?;
        let top = self.dir.join("top");
        fs::create_dir_all(&top)?;
        for (i, r) in ranked.iter().take(top_k).enumerate() {
            fs::write(top.join(format!("rank{:02}.ssa", i + 1)), &r.program)?;
        }
        Ok(())
    }
}

/// Runs the search until the query budget is spent (or `max_batches` is
/// reached). When `out_dir` is given, `results.jsonl` is appended as batches
/// finish and `stats.json` plus `top/rankNN.ssa` are written at the end, also
/// when an oracle failure aborts the search.
pub fn run_search(cfg: &SearchConfig, out_dir: Option<&Path>) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let oracle = OracleSpec::parse(&cfg.oracle)?.build()?;
    let pool = build_pool(&oracle, &cfg.pool, cfg.seed)?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| SearchError::Config(e.to_string()))?;
    let mut sink = out_dir.map(Sink::create).transpose()?;
    let mut state = SearchState {
        records: Vec::new(),
        stats: SearchStats {
            counters: Counters::default(),
            stage2_evaluated: 0,
            batches: 0,
            queries: 0,
            start_queries: 0,
            query_budget: cfg.query_budget,
            aborted: None,
        },
        stage2: None,
    };
    let result = threads.install(|| search_loop(cfg, &oracle, &pool, &mut state, sink.as_mut()));
    state.stats.queries = oracle.queries();
    if let Err(e) = &result {
        state.stats.aborted = Some(e.to_string());
    }
    rank(&mut state.records);
    if let Some(s) = sink.as_mut() {
        s.finish(&state.stats, &state.records, cfg.top_k)?;
    }
    result?;
    Ok(SearchOutcome { records: state.records, stats: state.stats, stage2: state.stage2 })
}

struct SearchState {
    records: Vec<SearchRecord>,
    stats: SearchStats,
    stage2: Option<Stage2Set>,
}

fn search_loop(
    cfg: &SearchConfig,
    oracle: &Oracle,
    pool: &[Example],
    state: &mut SearchState,
    mut sink: Option<&mut Sink>,
) -> Result<(), SearchError> {
    let remaining = || cfg.query_budget.saturating_sub(oracle.queries());
    let (set, used) =
        Stage2Set::prepare(oracle, pool, cfg.n_stage2_examples, &cfg.start, remaining(), cfg.seed)?;
    state.stats.start_queries += used;
    let Some(set) = set else {
        return Ok(());
    };
    state.stage2 = Some(set.clone());
    let stage2_cost = cfg.stage2_iters * set.len() as u64;

    let filter = Filter::new(&cfg.filters, cfg.seed);
    let mut source = ProgramSource::new(&cfg.gen, &filter, cfg.seed, cfg.chunk_size, cfg.workers);
    let status = |on: bool| if on { FilterStatus::Pass } else { FilterStatus::Skipped };
    let dim = oracle.dim();
    let mut batch_index = 0u64;
    while remaining() > 0 && cfg.max_batches.is_none_or(|m| batch_index < m) {
        let b = batch_index;
        batch_index += 1;
        let (programs, tallies): (Vec<SsaProgram>, Vec<Counters>) =
            (0..cfg.batch_size).map(|_| source.next_survivor()).unzip();
        let compiled: Vec<TacProgram> =
            programs.par_iter().map(|p| compile(p).expect("generated programs are valid")).collect();

        let example = &pool[stream(cfg.seed, &[tag::BATCH_EXAMPLE, b]).random_range(0..pool.len())];
        let mut srng = stream(cfg.seed, &[tag::BATCH_START, b]);
        let x1 = match find_start(oracle, &example.x0, &example.fallback, &cfg.start, remaining(), &mut srng)? {
            StartOutcome::Found { x1, queries, .. } => {
                state.stats.start_queries += queries;
                x1
            }
            StartOutcome::Exhausted { queries } => {
                state.stats.start_queries += queries;
                break;
            }
        };
        let tape = NoiseTape::record(dim, cfg.stage1_iters as usize, &mut stream(cfg.seed, &[tag::BATCH_NOISE, b]));
        let worst = cfg.batch_size as u64 * cfg.stage1_iters;
        let cap = (remaining() < worst).then(remaining);
        let ratios = stage1_batch(&compiled, oracle, &example.x0, &x1, &tape, cfg.stage1_iters, &cfg.controller, cap)?;
        if ratios.is_empty() {
            break;
        }
        state.stats.counters = tallies[ratios.len() - 1];
        state.stats.batches += 1;
        let winner = (0..ratios.len()).min_by(|&i, &j| ratios[i].total_cmp(&ratios[j]).then(i.cmp(&j))).unwrap();

        let stage2_ratio = if remaining() >= stage2_cost {
            state.stats.stage2_evaluated += 1;
            let score =
                stage2_eval(&compiled[winner], oracle, &set, cfg.stage2_iters, cfg.stage2_adapt, &cfg.controller)?;
            Some(score.mean)
        } else {
            None
        };
        let record = SearchRecord {
            batch: b,
            program: format_program(&programs[winner]),
            inputs_check: status(cfg.filters.inputs_check),
            distance_test: status(cfg.filters.distance_test),
            stage1_ratio: ratios[winner],
            stage2_ratio,
            batch_evaluated: ratios.len(),
            queries_at: oracle.queries(),
            counters: state.stats.counters,
        };
        if let Some(s) = sink.as_deref_mut() {
            s.record(&record)?;
        }
        state.records.push(record);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablation

/// Cumulative search techniques, in the order they are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Base,
    Predefined,
    InputsCheck,
    DistanceTest,
    Compact,
}

impl Technique {
    pub const ALL: [Technique; 5] =
        [Technique::Base, Technique::Predefined, Technique::InputsCheck, Technique::DistanceTest, Technique::Compact];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Base => "base",
            Technique::Predefined => "+predefined",
            Technique::InputsCheck => "+inputs_check",
            Technique::DistanceTest => "+distance_test",
            Technique::Compact => "+compact",
        }
    }

    /// Generator and filter settings with this and all earlier techniques on.
    pub fn configs(self, base: &GenConfig) -> (GenConfig, FilterConfig) {
        let level = Technique::ALL.iter().position(|&t| t == self).unwrap();
        let gen = GenConfig { predefined: level >= 1, unused_bias: if level >= 4 { base.unused_bias } else { 1.0 }, ..base.clone() };
        let filters = FilterConfig { inputs_check: level >= 2, distance_test: level >= 3, ..FilterConfig::default() };
        (gen, filters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Programs evaluated (after the enabled filters) per technique subset.
    pub n_programs: u64,
    pub n_examples: usize,
    pub iters: u64,
    pub oracle: String,
    pub seed: u64,
    pub workers: usize,
    pub chunk_size: usize,
    /// Size of the reported best-ratio list.
    pub top: usize,
    /// Whether the inputs check also demands live hyperparameters. Off by
    /// default: the scores are taken with adaptation disabled, where a
    /// hyperparameter is just a constant.
    pub require_hyperparams: bool,
    /// Generator settings; `predefined` is overridden per subset and
    /// `unused_bias` is 1 until the compact technique switches it on.
    pub gen: GenConfig,
    pub start: StartConfig,
    pub pool: PoolConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            n_programs: 100_000,
            n_examples: 5,
            iters: 100,
            oracle: "halfspace:dim=16".into(),
            seed: 0,
            workers: 1,
            chunk_size: 1024,
            top: 200,
            require_hyperparams: false,
            gen: GenConfig::default(),
            start: StartConfig::default(),
            pool: PoolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub technique: Technique,
    pub generated: u64,
    pub evaluated: u64,
    pub best: f64,
    pub best_program: String,
    /// Lowest mean ratios, ascending.
    pub top: Vec<f64>,
}

/// Scores `n_programs` filter survivors of one technique subset on fixed
/// examples with shared noise and no adaptation.
pub fn run_ablation(technique: Technique, cfg: &AblationConfig) -> Result<AblationResult, SearchError> {
    let oracle = OracleSpec::parse(&cfg.oracle)?.build()?;
    let pool = build_pool(&oracle, &cfg.pool, cfg.seed)?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| SearchError::Config(e.to_string()))?;
    let (gen, mut filters) = technique.configs(&cfg.gen);
    filters.require_hyperparams = cfg.require_hyperparams;
    gen.validate().map_err(|e| SearchError::Config(e.to_string()))?;
    let (set, _) = Stage2Set::prepare(&oracle, &pool, cfg.n_examples, &cfg.start, u64::MAX, cfg.seed)?;
    let set = set.expect("unbounded allowance");
    let dim = oracle.dim();
    let tapes: Vec<NoiseTape> = (0..set.len())
        .map(|i| NoiseTape::record(dim, cfg.iters as usize, &mut stream(cfg.seed, &[tag::BATCH_NOISE, i as u64])))
        .collect();
    let attack_cfg =
        AttackConfig { max_queries: cfg.iters, max_iterations: cfg.iters, adapt: false, controller: ControllerConfig::default() };
    threads.install(|| {
        let filter = Filter::new(&filters, cfg.seed);
        let mut source = ProgramSource::new(&gen, &filter, cfg.seed, cfg.chunk_size, cfg.workers.max(1));
        let mut scores = Vec::with_capacity(cfg.n_programs as usize);
        let mut tally = Counters::default();
        let mut best: Option<(f64, SsaProgram)> = None;
        const BLOCK: u64 = 4096;
        while (scores.len() as u64) < cfg.n_programs {
            let take = BLOCK.min(cfg.n_programs - scores.len() as u64);
            let (programs, tallies): (Vec<SsaProgram>, Vec<Counters>) =
                (0..take).map(|_| source.next_survivor()).unzip();
            tally = *tallies.last().unwrap();
            let block: Vec<f64> = programs
                .par_iter()
                .map(|p| {
                    let tac = compile(p).expect("generated programs are valid");
                    let mut sum = 0.0;
                    for (i, tape) in tapes.iter().enumerate() {
                        sum += run_ratio(&tac, &oracle, &set.examples[i].x0, &set.starts[i], &attack_cfg, &mut tape.player())?;
                    }
                    Ok(sum / set.len() as f64)
                })
                .collect::<Result<Vec<f64>, SearchError>>()?;
            for (score, p) in block.iter().zip(programs) {
                if best.as_ref().is_none_or(|(b, _)| score < b) {
                    best = Some((*score, p));
                }
            }
            scores.extend(block);
        }
        scores.sort_by(f64::total_cmp);
        scores.truncate(cfg.top);
        Ok(AblationResult {
            technique,
            generated: tally.generated,
            evaluated: tally.evaluated,
            best: scores.first().copied().unwrap_or(1.0),
            best_program: best.map(|(_, p)| format_program(&p)).unwrap_or_default(),
            top: scores,
        })
    })
}
