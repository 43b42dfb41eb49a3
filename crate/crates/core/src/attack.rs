//! The random-walk attack driven by a `generate()` program.
//!
//! Each iteration draws Gaussian noise, runs the program on `(x0, x, n)` and
//! proposes the result. Proposals that are non-finite or not strictly closer
//! to `x0` than the current adversarial point are discarded without a query.
//! The rest are sent to the oracle and accepted if adversarial. After every
//! iteration the step-size controller may rescale the hyperparameters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::interp::kernels;
use crate::dsl::{ExecEnv, ExecError, SsaProgram, TacProgram};
use crate::oracle::{Oracle, OracleError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("oracle failure: {0}")]
    Oracle(#[from] OracleError),
    #[error("fallback starting point is not adversarial")]
    FallbackNotAdversarial,
    #[error("program execution failed: {0}")]
    Exec(#[from] ExecError),
    #[error("starting point coincides with the original example")]
    ZeroStartDistance,
    #[error("program declares {program} hyperparameters but {given} values were supplied")]
    HyperCount { program: usize, given: usize },
}

/// Anything that can play the `generate()` role.
pub trait Generator {
    fn hyper_inits(&self) -> Vec<f64>;

    fn generate<'e>(
        &self,
        env: &'e mut ExecEnv,
        hyper: &[f64],
        x0: &[f64],
        x: &[f64],
        n: &[f64],
    ) -> Result<&'e [f64], ExecError>;
}

impl Generator for TacProgram {
    fn hyper_inits(&self) -> Vec<f64> {
        TacProgram::hyper_inits(self)
    }

    fn generate<'e>(&self, env: &'e mut ExecEnv, hyper: &[f64], x0: &[f64], x: &[f64], n: &[f64]) -> Result<&'e [f64], ExecError> {
        env.run_tac(self, hyper, x0, x, n)
    }
}

impl Generator for SsaProgram {
    fn hyper_inits(&self) -> Vec<f64> {
        SsaProgram::hyper_inits(self)
    }

    fn generate<'e>(&self, env: &'e mut ExecEnv, hyper: &[f64], x0: &[f64], x: &[f64], n: &[f64]) -> Result<&'e [f64], ExecError> {
        env.run_ssa(self, hyper, x0, x, n)
    }
}

// ---------------------------------------------------------------------------
// step-size controller

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Decay rate of the running success rate.
    pub alpha: f64,
    /// Factor at success rate 0.
    pub low: f64,
    /// Factor at success rate 1.
    pub high: f64,
    /// Success rate the controller steers toward.
    pub target: f64,
    /// Exponent applied to the factor each step.
    pub damping: f64,
    /// Starting success rate; `None` starts at `target`.
    pub p_init: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { alpha: 0.95, low: 0.5, high: 1.5, target: 0.25, damping: 0.1, p_init: None }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("invalid controller config: {0}")]
pub struct ControllerConfigError(String);

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerConfigError> {
        let err = |m: &str| Err(ControllerConfigError(m.into()));
        if !(0.0 < self.low && self.low < 1.0 && 1.0 < self.high && self.high.is_finite()) {
            return err("need 0 < low < 1 < high");
        }
        if !(0.0 < self.target && self.target < 1.0) {
            return err("need 0 < target < 1");
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return err("need 0 < alpha < 1");
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return err("need damping > 0");
        }
        if self.p_init.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return err("p_init must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Piecewise linear map through `(0, low)`, `(target, 1)` and `(1, high)`.
pub fn controller_f(p: f64, cfg: &ControllerConfig) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if p <= cfg.target {
        cfg.low + (1.0 - cfg.low) * p / cfg.target
    } else {
        1.0 + (cfg.high - 1.0) * (p - cfg.target) / (1.0 - cfg.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub p: f64,
    cfg: ControllerConfig,
}

impl Controller {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Controller { p: cfg.p_init.unwrap_or(cfg.target), cfg: cfg.clone() }
    }

    /// Folds one trial outcome into the running success rate, then scales
    /// every hyperparameter by `f(p)^damping`. Returns the factor applied.
    pub fn step(&mut self, success: bool, hyper: &mut [f64]) -> f64 {
        self.step_rate(if success { 1.0 } else { 0.0 }, hyper)
    }

    /// Like [`Controller::step`] with a fractional outcome `k ∈ [0, 1]`.
    pub fn step_rate(&mut self, k: f64, hyper: &mut [f64]) -> f64 {
        self.p = self.cfg.alpha * self.p + (1.0 - self.cfg.alpha) * k;
        let factor = controller_f(self.p, &self.cfg).powf(self.cfg.damping);
        for s in hyper.iter_mut() {
            *s *= factor;
        }
        factor
    }
}

// ---------------------------------------------------------------------------
// noise

/// Source of the per-iteration Gaussian noise vector.
pub trait NoiseSource {
    fn fill(&mut self, out: &mut [f64]);
}

/// Fresh standard normal samples from an RNG.
#[derive(Debug)]
pub struct GaussianNoise<R>(pub R);

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.0.sample(StandardNormal);
        }
    }
}

/// Pre-drawn noise replayed in order, so many programs can be evaluated on
/// exactly the same noise sequence.
#[derive(Debug, Clone)]
pub struct NoiseTape {
    dim: usize,
    data: Vec<f64>,
}

impl NoiseTape {
    pub fn record(dim: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let mut data = vec![0.0; dim * steps];
        GaussianNoise(rng).fill(&mut data);
        NoiseTape { dim, data }
    }

    pub fn steps(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn player(&self) -> TapePlayer<'_> {
        TapePlayer { tape: self, pos: 0 }
    }
}

#[derive(Debug)]
pub struct TapePlayer<'a> {
    tape: &'a NoiseTape,
    pos: usize,
}

impl NoiseSource for TapePlayer<'_> {
    fn fill(&mut self, out: &mut [f64]) {
        let d = out.len();
        assert!(self.pos + d <= self.tape.data.len(), "noise tape exhausted");
        out.copy_from_slice(&self.tape.data[self.pos..self.pos + d]);
        self.pos += d;
    }
}

// ---------------------------------------------------------------------------
// starting point

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartConfig {
    /// Random tries before falling back.
    pub max_tries: u64,
    /// Standard deviation of the added Gaussian noise.
    pub noise_scale: f64,
}

impl Default for StartConfig {
    fn default() -> Self {
        StartConfig { max_tries: 100, noise_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StartOutcome {
    Found { x1: Vec<f64>, queries: u64, via_fallback: bool },
    /// The query allowance ran out first.
    Exhausted { queries: u64 },
}

/// Adds fresh Gaussian noise to `x0` until the oracle reports a
/// misclassification; after `max_tries` failures verifies and returns the
/// fallback. Every query, including the fallback check, is counted and no
/// more than `max_queries` are spent.
pub fn find_start(
    oracle: &Oracle,
    x0: &[f64],
    fallback: &[f64],
    cfg: &StartConfig,
    max_queries: u64,
    rng: &mut impl Rng,
) -> Result<StartOutcome, AttackError> {
    let mut queries = 0;
    let mut candidate = vec![0.0; x0.len()];
    for _ in 0..cfg.max_tries {
        if queries == max_queries {
            return Ok(StartOutcome::Exhausted { queries });
        }
        for (c, &x) in candidate.iter_mut().zip(x0) {
            let z: f64 = rng.sample(StandardNormal);
            *c = x + cfg.noise_scale * z;
        }
        queries += 1;
        if oracle.query(&candidate)? {
            return Ok(StartOutcome::Found { x1: candidate, queries, via_fallback: false });
        }
    }
    if queries == max_queries {
        return Ok(StartOutcome::Exhausted { queries });
    }
    queries += 1;
    if oracle.query(fallback)? {
        Ok(StartOutcome::Found { x1: fallback.to_vec(), queries, via_fallback: true })
    } else {
        Err(AttackError::FallbackNotAdversarial)
    }
}

// ---------------------------------------------------------------------------
// distance test

/// Fixed input tuples on which a program must move strictly closer to `x0`.
#[derive(Debug, Clone)]
pub struct DistanceTest {
    cases: Vec<[Vec<f64>; 3]>,
}

impl DistanceTest {
    pub const DEFAULT_CASES: usize = 10;
    pub const DEFAULT_DIM: usize = 32;

    /// Cases with `x0, n ~ N(0, I)` and `x = x0 + N(0, I)`.
    pub fn new(n_cases: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut g = GaussianNoise(rng);
        let cases = (0..n_cases)
            .map(|_| {
                let mut x0 = vec![0.0; dim];
                let mut off = vec![0.0; dim];
                let mut n = vec![0.0; dim];
                g.fill(&mut x0);
                g.fill(&mut off);
                g.fill(&mut n);
                let x = x0.iter().zip(&off).map(|(a, b)| a + b).collect();
                [x0, x, n]
            })
            .collect();
        DistanceTest { cases }
    }

    pub fn dim(&self) -> usize {
        self.cases.first().map_or(0, |c| c[0].len())
    }

    /// Passes iff every case yields a finite output strictly closer to `x0`
    /// than `x` is. Hyperparameters are taken at their initial values.
    pub fn passes(&self, program: &impl Generator, env: &mut ExecEnv) -> bool {
        let hyper = program.hyper_inits();
        self.cases.iter().all(|[x0, x, n]| {
            let limit = kernels::distance(x, x0);
            match program.generate(env, &hyper, x0, x, n) {
                Ok(out) => out.iter().all(|v| v.is_finite()) && kernels::distance(out, x0) < limit,
                Err(_) => false,
            }
        })
    }
}

pub fn distance_test(program: &impl Generator, n_cases: usize, dim: usize, rng: &mut impl Rng) -> bool {
    let test = DistanceTest::new(n_cases, dim, rng);
    test.passes(program, &mut ExecEnv::new(dim))
}

// ---------------------------------------------------------------------------
// the attack loop

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based index of the query that produced the update, counted from the
    /// start of the run (starting-point queries included).
    pub q: u64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub queries: u64,
    pub distance: f64,
    pub via_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub queries: u64,
    pub iterations: u64,
    /// Final best distance; absent when no starting point was found.
    pub d_min: Option<f64>,
    pub hyper_values: Vec<f64>,
    pub success_rate: f64,
}

/// Trace of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub start: Option<StartRecord>,
    /// Accepted random-walk updates; `q` strictly increasing, `d` strictly
    /// decreasing.
    pub updates: Vec<LogRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    /// Best distance after `q` queries; `None` before a start exists.
    pub fn distance_at(&self, q: u64) -> Option<f64> {
        let start = self.start.as_ref().filter(|s| s.queries <= q)?;
        let idx = self.updates.partition_point(|r| r.q <= q);
        Some(if idx == 0 { start.distance } else { self.updates[idx - 1].d })
    }
}

/// Final over initial distance; `None` without a starting point.
pub fn distortion_ratio(log: &RunLog) -> Option<f64> {
    let start = log.start.as_ref()?;
    let d = log.summary.d_min?;
    Some(d / start.distance)
}

#[derive(Debug, Clone)]
pub enum Start<'a> {
    /// Random search around `x0` with a fallback point.
    Search { fallback: &'a [f64], cfg: StartConfig },
    /// A known adversarial point, used without spending queries.
    Given(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Oracle queries allowed in total, starting-point search included.
    pub max_queries: u64,
    /// Iterations allowed (an iteration whose proposal is discarded costs no
    /// query).
    pub max_iterations: u64,
    pub adapt: bool,
    pub controller: ControllerConfig,
}

impl AttackConfig {
    /// Query budget with an iteration cap of `100 × budget`.
    pub fn with_query_budget(budget: u64) -> Self {
        AttackConfig {
            max_queries: budget,
            max_iterations: budget.saturating_mul(100),
            adapt: true,
            controller: ControllerConfig::default(),
        }
    }

    /// Fixed iteration count; each iteration sends at most one query.
    pub fn with_iterations(iterations: u64) -> Self {
        AttackConfig { max_iterations: iterations, ..AttackConfig::with_query_budget(iterations) }
    }
}

/// Failed run together with everything logged before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct AttackFailure {
    pub error: AttackError,
    pub partial: Box<RunLog>,
}

pub fn attack(
    program: &impl Generator,
    oracle: &Oracle,
    x0: &[f64],
    hyper: Option<&[f64]>,
    start: Start<'_>,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<RunLog, AttackFailure> {
    attack_with_noise(program, oracle, x0, hyper, start, cfg, rng, None)
}

/// [`attack`] with an explicit noise source; when `noise` is `None`, noise
/// comes from `rng` after the starting-point search.
#[allow(clippy::too_many_arguments)]
pub fn attack_with_noise<R: Rng>(
    program: &impl Generator,
    oracle: &Oracle,
    x0: &[f64],
    hyper: Option<&[f64]>,
    start: Start<'_>,
    cfg: &AttackConfig,
    rng: &mut R,
    noise: Option<&mut dyn NoiseSource>,
) -> Result<RunLog, AttackFailure> {
    let mut hyper_values = hyper.map_or_else(|| program.hyper_inits(), <[f64]>::to_vec);
    let mut log = RunLog {
        start: None,
        updates: Vec::new(),
        summary: RunSummary { queries: 0, iterations: 0, d_min: None, hyper_values: hyper_values.clone(), success_rate: 0.0 },
    };
    let fail = |error: AttackError, log: RunLog| AttackFailure { error, partial: Box::new(log) };
    let n_hyper = program.hyper_inits().len();
    if hyper_values.len() != n_hyper {
        return Err(fail(AttackError::HyperCount { program: n_hyper, given: hyper_values.len() }, log));
    }

    let (mut x, mut queries) = match start {
        Start::Given(x1) => (x1.to_vec(), 0),
        Start::Search { fallback, cfg: start_cfg } => {
            match find_start(oracle, x0, fallback, &start_cfg, cfg.max_queries, rng) {
                Ok(StartOutcome::Found { x1, queries, via_fallback }) => {
                    log.start = Some(StartRecord { queries, distance: f64::NAN, via_fallback });
                    (x1, queries)
                }
                Ok(StartOutcome::Exhausted { queries }) => {
                    log.summary.queries = queries;
                    return Ok(log);
                }
                Err(e) => return Err(fail(e, log)),
            }
        }
    };
    let mut d_min = kernels::distance(&x, x0);
    if !(d_min > 0.0) {
        return Err(fail(AttackError::ZeroStartDistance, log));
    }
    let via_fallback = log.start.as_ref().is_some_and(|s| s.via_fallback);
    log.start = Some(StartRecord { queries, distance: d_min, via_fallback });

    let mut own_noise;
    let noise: &mut dyn NoiseSource = match noise {
        Some(n) => n,
        None => {
            own_noise = GaussianNoise(&mut *rng);
            &mut own_noise
        }
    };
    let dim = x0.len();
    let mut env = ExecEnv::new(dim);
    let mut n = vec![0.0; dim];
    let mut controller = Controller::new(&cfg.controller);
    let mut iterations = 0;
    let mut error = None;
    while queries < cfg.max_queries && iterations < cfg.max_iterations {
        iterations += 1;
        noise.fill(&mut n);
        let mut success = false;
        match program.generate(&mut env, &hyper_values, x0, &x, &n) {
            Ok(candidate) => {
                let finite = candidate.iter().all(|v| v.is_finite());
                let d = if finite { kernels::distance(candidate, x0) } else { f64::NAN };
                if d < d_min {
                    queries += 1;
                    match oracle.query(candidate) {
                        Ok(true) => {
                            x.copy_from_slice(candidate);
                            d_min = d;
                            log.updates.push(LogRecord { q: queries, d });
                            success = true;
                        }
                        Ok(false) => {}
                        Err(e) => {
                            error = Some(AttackError::Oracle(e));
                            break;
                        }
                    }
                }
            }
            Err(e) => {
                error = Some(AttackError::Exec(e));
                break;
            }
        }
        if cfg.adapt {
            controller.step(success, &mut hyper_values);
        }
    }
    log.summary = RunSummary {
        queries,
        iterations,
        d_min: Some(d_min),
        hyper_values,
        success_rate: controller.p,
    };
    match error {
        Some(e) => Err(fail(e, log)),
        None => Ok(log),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::compile;
    use crate::dsl::parse_program;
    use crate::oracle::{Classifier, Halfspace};
    use crate::reference;
    use crate::rng::stream;

    const HEADER: &str = "param s0 = 0.01\ninput v1\ninput v2\ninput v3\n";

    fn tac(body: &str) -> TacProgram {
        compile(&parse_program(&format!("{HEADER}{body}")).unwrap()).unwrap()
    }

    fn cfg() -> ControllerConfig {
        ControllerConfig::default()
    }

    #[test]
    fn controller_anchor_values() {
        let c = cfg();
        assert_eq!(controller_f(0.0, &c), 0.5);
        assert_eq!(controller_f(0.25, &c), 1.0);
        assert_eq!(controller_f(1.0, &c), 1.5);
        assert!((controller_f(0.5, &c) - 7.0 / 6.0).abs() < 1e-15);
        assert_eq!(controller_f(-3.0, &c), 0.5);
        assert_eq!(controller_f(7.0, &c), 1.5);
    }

    #[test]
    fn controller_update() {
        let mut ctl = Controller::new(&cfg());
        assert_eq!(ctl.p, 0.25);
        let mut s = [0.01];
        ctl.step(true, &mut s);
        assert!((ctl.p - 0.2875).abs() < 1e-15);
        assert!(s[0] > 0.01);

        let mut ctl = Controller { p: 0.25, cfg: ControllerConfig { alpha: 0.5, ..cfg() } };
        // p stays at target when k equals target
        let mut s = [3.0];
        ctl.step_rate(0.25, &mut s);
        assert_eq!(s[0], 3.0);
    }

    #[test]
    fn controller_ten_step_bounds() {
        for (k, lo, hi) in [(false, 0.5, 1.0), (true, 1.0, 1.5)] {
            let mut ctl = Controller::new(&cfg());
            let mut s = [1.0];
            for _ in 0..200 {
                let before = s[0];
                for _ in 0..10 {
                    ctl.step(k, &mut s);
                }
                let ratio = s[0] / before;
                assert!(ratio >= lo - 1e-12 && ratio <= hi + 1e-12 && ratio != 1.0, "{ratio}");
            }
        }
    }

    #[test]
    fn controller_config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(ControllerConfig { low: 1.2, ..cfg() }.validate().is_err());
        assert!(ControllerConfig { target: 1.0, ..cfg() }.validate().is_err());
        assert!(ControllerConfig { alpha: 1.0, ..cfg() }.validate().is_err());
    }

    #[derive(Debug)]
    struct Never;

    impl Classifier for Never {
        fn dim(&self) -> usize {
            2
        }
        fn is_adversarial(&self, _: &[f64]) -> Result<bool, OracleError> {
            Ok(false)
        }
    }

    #[derive(Debug)]
    struct Broken;

    impl Classifier for Broken {
        fn dim(&self) -> usize {
            2
        }
        fn is_adversarial(&self, x: &[f64]) -> Result<bool, OracleError> {
            if x[0] > 1.5 {
                Ok(true)
            } else {
                Err(OracleError::Unavailable("backend down".into()))
            }
        }
    }

    #[test]
    fn start_falls_back_after_max_tries() {
        // noise never reaches the far-away adversarial side
        let o = Oracle::new(Halfspace { w: vec![1.0, 0.0], b: -1000.0 });
        let x0 = [0.0, 0.0];
        let fallback = [2000.0, 0.0];
        let out = find_start(&o, &x0, &fallback, &StartConfig::default(), u64::MAX, &mut stream(1, &[])).unwrap();
        assert_eq!(out, StartOutcome::Found { x1: fallback.to_vec(), queries: 101, via_fallback: true });
        assert_eq!(o.queries(), 101);
    }

    #[test]
    fn start_rejects_bad_fallback() {
        let o = Oracle::new(Never);
        let err = find_start(&o, &[0.0, 0.0], &[1.0, 1.0], &StartConfig::default(), u64::MAX, &mut stream(1, &[]));
        assert!(matches!(err, Err(AttackError::FallbackNotAdversarial)));
        assert_eq!(o.queries(), 101);
    }

    #[test]
    fn start_respects_allowance() {
        let o = Oracle::new(Never);
        let out = find_start(&o, &[0.0, 0.0], &[1.0, 1.0], &StartConfig::default(), 7, &mut stream(1, &[])).unwrap();
        assert_eq!(out, StartOutcome::Exhausted { queries: 7 });
        assert_eq!(o.queries(), 7);
    }

    #[test]
    fn start_success_rate_matches_gaussian_tail() {
        // x0 at distance 1 from the plane: a single try crosses with
        // probability P(Z > 1) = 0.158655...
        let o = Oracle::new(Halfspace { w: vec![1.0, 0.0, 0.0], b: -1.0 });
        let x0 = [0.0; 3];
        let fallback = [5.0, 0.0, 0.0];
        let cfg = StartConfig { max_tries: 1, noise_scale: 1.0 };
        let mut rng = stream(11, &[]);
        let trials = 40_000;
        let hits = (0..trials)
            .filter(|_| {
                matches!(
                    find_start(&o, &x0, &fallback, &cfg, u64::MAX, &mut rng),
                    Ok(StartOutcome::Found { via_fallback: false, .. })
                )
            })
            .count();
        let rate = hits as f64 / trials as f64;
        let tail = 0.158_655_253_931_457_05;
        let sd = (tail * (1.0 - tail) / trials as f64).sqrt();
        assert!((rate - tail).abs() < 4.0 * sd, "{rate} vs {tail}");
    }

    #[test]
    fn distance_test_examples() {
        let mut rng = stream(2, &[]);
        let test = DistanceTest::new(10, 32, &mut rng);
        let mut env = ExecEnv::new(32);
        // returns x: equal distance, not strictly less
        assert!(!test.passes(&tac("v4 = ADD(v2,v2)\nv5 = SUB(v4,v2)\nreturn v5\n"), &mut env));
        // returns x0: distance 0
        assert!(test.passes(&tac("v4 = SUB(v1,v2)\nv5 = ADD(v4,v2)\nreturn v5\n"), &mut env));
        // SSA form works too
        let p = reference::boundary();
        assert!(test.passes(&p, &mut env));
        assert!(test.passes(&compile(&p).unwrap(), &mut env));
        // non-finite output fails
        assert!(!test.passes(&tac("s4 = SUB(s0,s0)\nv5 = DIV(v1,s4)\nreturn v5\n"), &mut env));
    }

    #[test]
    fn noisy_step_fails_distance_test() {
        // x + s0*n moves farther away about half the time
        let p = tac("v4 = MUL(v3,s0)\nv5 = ADD(v2,v4)\nreturn v5\n");
        let mut rng = stream(4, &[]);
        let mut single_pass = 0;
        for _ in 0..2000 {
            if distance_test(&p, 1, 32, &mut rng) {
                single_pass += 1;
            }
        }
        let rate = single_pass as f64 / 2000.0;
        assert!((rate - 0.5).abs() < 0.05, "{rate}");
        let passes = (0..200).filter(|_| distance_test(&p, 10, 32, &mut rng)).count();
        assert!(passes <= 2, "{passes}");
    }

    fn halfspace_run(budget: u64, adapt: bool, seed: u64) -> (Oracle, RunLog) {
        let o = Oracle::new(Halfspace { w: vec![1.0, 0.0, 0.0, 0.0], b: -1.0 });
        let x0 = [0.0; 4];
        let fallback = [2.0, 0.0, 0.0, 0.0];
        let p = compile(&reference::boundary()).unwrap();
        let cfg = AttackConfig { adapt, ..AttackConfig::with_query_budget(budget) };
        let start = Start::Search { fallback: &fallback, cfg: StartConfig::default() };
        let log = attack(&p, &o, &x0, None, start, &cfg, &mut stream(seed, &[])).unwrap();
        (o, log)
    }

    #[test]
    fn attack_log_invariants() {
        let (o, log) = halfspace_run(500, true, 3);
        assert_eq!(log.summary.queries, 500);
        assert_eq!(o.queries(), 500);
        let start = log.start.as_ref().unwrap();
        let mut prev = (start.queries, start.distance);
        for r in &log.updates {
            assert!(r.q > prev.0 && r.d < prev.1);
            prev = (r.q, r.d);
        }
        assert_eq!(log.summary.d_min, Some(prev.1));
        let ratio = distortion_ratio(&log).unwrap();
        assert!(ratio > 0.0 && ratio < 1.0);
    }

    #[test]
    fn budget_below_start_cost() {
        let o = Oracle::new(Never);
        let p = compile(&reference::boundary()).unwrap();
        let cfg = AttackConfig::with_query_budget(5);
        let start = Start::Search { fallback: &[1.0, 1.0], cfg: StartConfig::default() };
        let log = attack(&p, &o, &[0.0, 0.0], None, start, &cfg, &mut stream(0, &[])).unwrap();
        assert!(log.start.is_none() && log.updates.is_empty());
        assert_eq!(log.summary.queries, 5);
        assert_eq!(distortion_ratio(&log), None);
    }

    #[test]
    fn no_adaptation_keeps_hyperparameters() {
        let (_, log) = halfspace_run(300, false, 5);
        assert_eq!(log.summary.hyper_values, reference::boundary().hyper_inits());
        let (_, log) = halfspace_run(300, true, 5);
        assert_ne!(log.summary.hyper_values, reference::boundary().hyper_inits());
    }

    #[test]
    fn no_progress_means_unit_ratio() {
        // proposals equal x: never strictly closer, never queried
        let o = Oracle::new(Halfspace { w: vec![1.0, 0.0], b: -1.0 });
        let p = tac("v4 = ADD(v2,v2)\nv5 = SUB(v4,v2)\nreturn v5\n");
        let cfg = AttackConfig::with_iterations(50);
        let log = attack(&p, &o, &[0.0, 0.0], None, Start::Given(&[3.0, 0.0]), &cfg, &mut stream(0, &[])).unwrap();
        assert_eq!(distortion_ratio(&log), Some(1.0));
        assert_eq!(log.summary.queries, 0);
        assert_eq!(log.summary.iterations, 50);
        assert_eq!(o.queries(), 0);
    }

    #[test]
    fn nan_candidates_cost_nothing() {
        let o = Oracle::new(Halfspace { w: vec![1.0, 0.0], b: -1.0 });
        let p = tac("s4 = SUB(s0,s0)\nv5 = DIV(v2,s4)\nreturn v5\n");
        let cfg = AttackConfig::with_iterations(20);
        let log = attack(&p, &o, &[0.0, 0.0], None, Start::Given(&[3.0, 0.0]), &cfg, &mut stream(0, &[])).unwrap();
        assert_eq!(o.queries(), 0);
        assert_eq!(log.summary.iterations, 20);
    }

    #[test]
    fn oracle_failure_keeps_partial_log() {
        let o = Oracle::new(Broken);
        let p = compile(&reference::boundary()).unwrap();
        let cfg = AttackConfig::with_query_budget(100);
        let err = attack(&p, &o, &[0.0, 0.0], None, Start::Given(&[3.0, 0.0]), &cfg, &mut stream(0, &[])).unwrap_err();
        assert!(matches!(err.error, AttackError::Oracle(_)));
        assert_eq!(err.partial.summary.queries, o.queries());
        assert!(err.partial.summary.queries >= 1);
        assert!(err.partial.start.is_some());
    }

    #[test]
    fn tape_and_rng_noise_agree() {
        let p = compile(&reference::boundary()).unwrap();
        let o = Oracle::new(Halfspace { w: vec![1.0, 0.0, 0.0], b: -1.0 });
        let x1 = [2.0, 1.0, 0.5];
        let cfg = AttackConfig::with_iterations(200);
        let a = attack(&p, &o, &[0.0; 3], None, Start::Given(&x1), &cfg, &mut stream(8, &[])).unwrap();
        let tape = NoiseTape::record(3, 200, &mut stream(8, &[]));
        let b = attack_with_noise(&p, &o, &[0.0; 3], None, Start::Given(&x1), &cfg, &mut stream(99, &[]), Some(&mut tape.player())).unwrap();
        assert_eq!(a, b);
    }
}
