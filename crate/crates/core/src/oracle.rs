//! Black-box decision oracles with exact query counting.
//!
//! An oracle answers one question per query: is `x` adversarial? The
//! analytic geometries (halfspace, sphere) have closed-form optimal
//! distortions and serve as ground truth; the feedforward classifier is
//! loaded from a small text weight file.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::interp::kernels;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("query has dimension {got}, oracle expects {expected}")]
    Dim { expected: usize, got: usize },
    #[error("bad oracle spec `{spec}`: {msg}")]
    Spec { spec: String, msg: String },
    #[error("weight file: unexpected end of input at byte offset {offset} (expected {expected})")]
    Truncated { offset: usize, expected: String },
    #[error("weight file: bad token `{token}` at byte offset {offset} (expected {expected})")]
    BadToken { offset: usize, token: String, expected: String },
    #[error("weight file: layer {layer} takes {got} inputs but the previous layer produces {expected}")]
    LayerChain { layer: usize, expected: usize, got: usize },
    #[error("weight file: trailing data at byte offset {offset}")]
    Trailing { offset: usize },
    #[error("{0}")]
    Unavailable(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Label function behind an oracle. Implementations must be pure: the
/// answer depends only on `x`.
pub trait Classifier: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn is_adversarial(&self, x: &[f64]) -> Result<bool, OracleError>;

    /// Smallest distance from `x0` to an adversarial point, when known in
    /// closed form.
    fn optimal_distance(&self, _x0: &[f64]) -> Option<f64> {
        None
    }

    /// Draws a benign example at distance `margin` from the decision
    /// boundary together with an adversarial fallback starting point.
    fn synthesize(&self, _margin: f64, _rng: &mut dyn rand::RngCore) -> Option<Example> {
        None
    }
}

/// A benign example and an adversarial point to fall back on when random
/// starting-point search fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x0: Vec<f64>,
    pub fallback: Vec<f64>,
}

/// `w·x + b > 0` is adversarial.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Halfspace {
    fn margin(&self, x: &[f64]) -> f64 {
        kernels::dot(&self.w, x) + self.b
    }
}

impl Classifier for Halfspace {
    fn dim(&self) -> usize {
        self.w.len()
    }

    fn is_adversarial(&self, x: &[f64]) -> Result<bool, OracleError> {
        check_dim(self.dim(), x)?;
        Ok(self.margin(x) > 0.0)
    }

    fn optimal_distance(&self, x0: &[f64]) -> Option<f64> {
        Some(self.margin(x0).abs() / kernels::norm(&self.w))
    }

    fn synthesize(&self, margin: f64, rng: &mut dyn rand::RngCore) -> Option<Example> {
        let z = gaussian(self.dim(), rng);
        let wn = kernels::norm(&self.w);
        let along = self.margin(&z) / (wn * wn);
        let on_plane: Vec<f64> = z.iter().zip(&self.w).map(|(z, w)| z - along * w).collect();
        let shift = |s: f64| on_plane.iter().zip(&self.w).map(|(p, w)| p + s * margin * w / wn).collect();
        Some(Example { x0: shift(-1.0), fallback: shift(1.0) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Inside,
    Outside,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    pub center: Vec<f64>,
    pub radius: f64,
    pub adversarial: Side,
}

impl Classifier for Sphere {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn is_adversarial(&self, x: &[f64]) -> Result<bool, OracleError> {
        check_dim(self.dim(), x)?;
        let r = kernels::distance(x, &self.center);
        Ok(match self.adversarial {
            Side::Outside => r > self.radius,
            Side::Inside => r < self.radius,
        })
    }

    fn optimal_distance(&self, x0: &[f64]) -> Option<f64> {
        Some((self.radius - kernels::distance(x0, &self.center)).abs())
    }

    fn synthesize(&self, margin: f64, rng: &mut dyn rand::RngCore) -> Option<Example> {
        let mut dir = gaussian(self.dim(), rng);
        let n = kernels::norm(&dir);
        dir.iter_mut().for_each(|d| *d /= n);
        let at = |r: f64| self.center.iter().zip(&dir).map(|(c, d)| c + r * d).collect::<Vec<_>>();
        Some(match self.adversarial {
            Side::Outside => Example { x0: at((self.radius - margin).max(0.0)), fallback: at(self.radius + margin) },
            Side::Inside => Example { x0: at(self.radius + margin), fallback: self.center.clone() },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Feedforward ReLU network; the label is the argmax of the final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self, OracleError> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].cols != pair[0].rows {
                return Err(OracleError::LayerChain { layer: i + 1, expected: pair[0].rows, got: pair[1].cols });
            }
        }
        if layers.is_empty() {
            return Err(OracleError::Unavailable("network has no layers".into()));
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out: Vec<f64> = (0..layer.rows)
                .map(|r| kernels::dot(&layer.weights[r * layer.cols..(r + 1) * layer.cols], &h) + layer.bias[r])
                .collect();
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    /// Index of the largest score; the first one wins ties.
    pub fn label(&self, x: &[f64]) -> usize {
        let scores = self.scores(x);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }

    /// Parses the text weight format:
    ///
    /// ```text
    /// layers: <k>
    /// <rows> <cols>
    /// <rows × cols floats, row-major>
    /// <rows floats of bias>
    /// ... repeated k times
    /// ```
    pub fn parse(text: &str) -> Result<Self, OracleError> {
        let mut tokens = Tokens { text, pos: 0 };
        let head = tokens.next("`layers:`")?;
        if head.1 != "layers:" {
            return Err(OracleError::BadToken { offset: head.0, token: head.1.into(), expected: "`layers:`".into() });
        }
        let k: usize = tokens.parse("layer count")?;
        let mut layers = Vec::with_capacity(k);
        for _ in 0..k {
            let rows: usize = tokens.parse("row count")?;
            let cols: usize = tokens.parse("column count")?;
            let weights = (0..rows * cols).map(|_| tokens.parse("weight")).collect::<Result<Vec<f64>, _>>()?;
            let bias = (0..rows).map(|_| tokens.parse("bias")).collect::<Result<Vec<f64>, _>>()?;
            layers.push(Layer { rows, cols, weights, bias });
        }
        if let Some((offset, _)) = tokens.peek() {
            return Err(OracleError::Trailing { offset });
        }
        Mlp::new(layers)
    }

    pub fn format(&self) -> String {
        use std::fmt::Write as _;
        let mut out = format!("layers: {}\n", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "{} {}", l.rows, l.cols);
            for r in 0..l.rows {
                let row: Vec<String> = l.weights[r * l.cols..(r + 1) * l.cols].iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
            let bias: Vec<String> = l.bias.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", bias.join(" "));
        }
        out
    }
}

struct Tokens<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn peek(&self) -> Option<(usize, &'a str)> {
        let rest = &self.text[self.pos..];
        let start = self.pos + (rest.len() - rest.trim_start().len());
        let tail = &self.text[start..];
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        (len > 0).then(|| (start, &tail[..len]))
    }

    fn next(&mut self, expected: &str) -> Result<(usize, &'a str), OracleError> {
        let tok = self.peek().ok_or_else(|| OracleError::Truncated { offset: self.text.len(), expected: expected.into() })?;
        self.pos = tok.0 + tok.1.len();
        Ok(tok)
    }

    fn parse<T: std::str::FromStr>(&mut self, expected: &str) -> Result<T, OracleError> {
        let (offset, tok) = self.next(expected)?;
        tok.parse().map_err(|_| OracleError::BadToken { offset, token: tok.into(), expected: expected.into() })
    }
}

/// Classifier reduced to the untargeted decision "label differs from the
/// benign label".
#[derive(Debug, Clone)]
pub struct MlpOracle {
    pub net: Mlp,
    pub benign: usize,
}

impl Classifier for MlpOracle {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn is_adversarial(&self, x: &[f64]) -> Result<bool, OracleError> {
        check_dim(self.dim(), x)?;
        Ok(self.net.label(x) != self.benign)
    }
}

pub fn load_mlp(path: &Path) -> Result<Mlp, OracleError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| OracleError::Io { path: path.display().to_string(), source })?;
    Mlp::parse(&text)
}

fn check_dim(expected: usize, x: &[f64]) -> Result<(), OracleError> {
    if x.len() == expected {
        Ok(())
    } else {
        Err(OracleError::Dim { expected, got: x.len() })
    }
}

pub(crate) fn gaussian(dim: usize, rng: &mut (impl rand::RngCore + ?Sized)) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// A classifier plus an atomic query counter shared by every caller.
#[derive(Debug)]
pub struct Oracle {
    classifier: Box<dyn Classifier>,
    queries: AtomicU64,
}

impl Oracle {
    pub fn new(classifier: impl Classifier + 'static) -> Self {
        Oracle { classifier: Box::new(classifier), queries: AtomicU64::new(0) }
    }

    pub fn dim(&self) -> usize {
        self.classifier.dim()
    }

    /// One counted query.
    pub fn query(&self, x: &[f64]) -> Result<bool, OracleError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.classifier.is_adversarial(x)
    }

    /// Label lookup that is not charged to any budget; only for vetting
    /// benchmark examples before an attack starts.
    pub fn peek(&self, x: &[f64]) -> Result<bool, OracleError> {
        self.classifier.is_adversarial(x)
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn optimal_distance(&self, x0: &[f64]) -> Option<f64> {
        self.classifier.optimal_distance(x0)
    }

    pub fn synthesize(&self, margin: f64, rng: &mut dyn rand::RngCore) -> Option<Example> {
        self.classifier.synthesize(margin, rng)
    }

    /// Builds an oracle from a spec string:
    ///
    /// - `halfspace:w=1,0,0;b=0` or `halfspace:dim=16[;b=0]` (w = e₀)
    /// - `sphere:c=0,0;r=2;adv=outside` or `sphere:dim=16;r=2[;adv=inside]`
    /// - `mlp:path=net.txt;benign=0`
    pub fn from_spec(spec: &str) -> Result<Oracle, OracleError> {
        OracleSpec::parse(spec)?.build()
    }
}

/// Parsed form of an oracle spec string.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    Halfspace { w: Vec<f64>, b: f64 },
    Sphere { center: Vec<f64>, radius: f64, adversarial: Side },
    Mlp { path: String, benign: usize },
}

impl OracleSpec {
    pub fn parse(spec: &str) -> Result<OracleSpec, OracleError> {
        let err = |msg: &str| OracleError::Spec { spec: spec.to_string(), msg: msg.to_string() };
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut fields = std::collections::BTreeMap::new();
        for part in rest.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| err(&format!("expected key=value, found `{part}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let floats = |key: &str| -> Result<Option<Vec<f64>>, OracleError> {
            fields
                .get(key)
                .map(|v| {
                    v.split(',')
                        .map(|t| t.trim().parse::<f64>().map_err(|_| err(&format!("bad number `{t}` in {key}"))))
                        .collect()
                })
                .transpose()
        };
        let float = |key: &str, default: Option<f64>| -> Result<f64, OracleError> {
            match fields.get(key) {
                Some(v) => v.parse().map_err(|_| err(&format!("bad number for {key}"))),
                None => default.ok_or_else(|| err(&format!("missing {key}"))),
            }
        };
        let dim = fields
            .get("dim")
            .map(|d| d.parse::<usize>().map_err(|_| err("bad dim")))
            .transpose()?;
        let vector = |key: &str, default: fn(usize) -> Vec<f64>| -> Result<Vec<f64>, OracleError> {
            match (floats(key)?, dim) {
                (Some(v), None) => Ok(v),
                (Some(v), Some(d)) if v.len() == d => Ok(v),
                (Some(_), Some(_)) => Err(err(&format!("{key} does not match dim"))),
                (None, Some(d)) if d > 0 => Ok(default(d)),
                _ => Err(err(&format!("need {key}=... or dim=..."))),
            }
        };
        let parsed = match kind {
            "halfspace" => {
                let w = vector("w", |d| {
                    let mut w = vec![0.0; d];
                    w[0] = 1.0;
                    w
                })?;
                if !(kernels::norm(&w) > 0.0) {
                    return Err(err("w must be nonzero"));
                }
                OracleSpec::Halfspace { w, b: float("b", Some(0.0))? }
            }
            "sphere" => {
                let center = vector("c", |d| vec![0.0; d])?;
                let radius = float("r", None)?;
                if !(radius > 0.0) {
                    return Err(err("radius must be positive"));
                }
                let adversarial = match fields.get("adv").copied().unwrap_or("outside") {
                    "outside" => Side::Outside,
                    "inside" => Side::Inside,
                    other => return Err(err(&format!("adv must be inside or outside, not `{other}`"))),
                };
                OracleSpec::Sphere { center, radius, adversarial }
            }
            "mlp" => {
                let path = fields.get("path").ok_or_else(|| err("missing path"))?.to_string();
                let benign = fields
                    .get("benign")
                    .ok_or_else(|| err("missing benign label"))?
                    .parse()
                    .map_err(|_| err("bad benign label"))?;
                OracleSpec::Mlp { path, benign }
            }
            other => return Err(err(&format!("unknown oracle kind `{other}`"))),
        };
        Ok(parsed)
    }

    pub fn build(&self) -> Result<Oracle, OracleError> {
        Ok(match self.clone() {
            OracleSpec::Halfspace { w, b } => Oracle::new(Halfspace { w, b }),
            OracleSpec::Sphere { center, radius, adversarial } => Oracle::new(Sphere { center, radius, adversarial }),
            OracleSpec::Mlp { path, benign } => Oracle::new(MlpOracle { net: load_mlp(Path::new(&path))?, benign }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn halfspace2() -> Halfspace {
        Halfspace { w: vec![1.0, 0.0], b: 0.0 }
    }

    #[test]
    fn halfspace_decisions_and_distance() {
        let o = Oracle::new(halfspace2());
        assert!(o.query(&[0.5, 0.0]).unwrap());
        assert!(!o.query(&[-0.5, 3.0]).unwrap());
        assert_eq!(o.optimal_distance(&[-1.0, 0.0]), Some(1.0));
        assert_eq!(o.queries(), 2);
        assert!(matches!(o.query(&[1.0]), Err(OracleError::Dim { expected: 2, got: 1 })));
    }

    #[test]
    fn sphere_decisions_and_distance() {
        let outside = Oracle::new(Sphere { center: vec![0.0, 0.0], radius: 1.0, adversarial: Side::Outside });
        assert!(!outside.query(&[0.5, 0.0]).unwrap());
        assert!(outside.query(&[1.5, 0.0]).unwrap());
        let s2 = Sphere { center: vec![0.0, 0.0], radius: 2.0, adversarial: Side::Outside };
        assert_eq!(s2.optimal_distance(&[1.0, 0.0]), Some(1.0));
        assert_eq!(s2.optimal_distance(&[0.0, 0.0]), Some(2.0));
    }

    #[test]
    fn counter_counts_every_call() {
        let o = Oracle::new(halfspace2());
        for i in 0..37 {
            let _ = o.query(&[i as f64, 0.0]);
        }
        assert_eq!(o.queries(), 37);
    }

    #[test]
    fn synthesized_examples_sit_at_margin() {
        let mut rng = stream(3, &[]);
        let h = Halfspace { w: vec![0.5, -2.0, 1.0], b: 0.3 };
        let s = Sphere { center: vec![1.0, 1.0, 1.0], radius: 2.0, adversarial: Side::Outside };
        for c in [&h as &dyn Classifier, &s] {
            let e = c.synthesize(1.0, &mut rng).unwrap();
            assert!(!c.is_adversarial(&e.x0).unwrap());
            assert!(c.is_adversarial(&e.fallback).unwrap());
            assert!((c.optimal_distance(&e.x0).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_strings() {
        let o = Oracle::from_spec("halfspace:w=1,0;b=0").unwrap();
        assert_eq!(o.dim(), 2);
        assert_eq!(
            OracleSpec::parse("halfspace:dim=3;b=-1").unwrap(),
            OracleSpec::Halfspace { w: vec![1.0, 0.0, 0.0], b: -1.0 }
        );
        assert_eq!(
            OracleSpec::parse("sphere:c=0,0;r=2;adv=outside").unwrap(),
            OracleSpec::Sphere { center: vec![0.0, 0.0], radius: 2.0, adversarial: Side::Outside }
        );
        assert!(OracleSpec::parse("sphere:c=0,0;r=-1").is_err());
        assert!(OracleSpec::parse("halfspace:w=0,0").is_err());
        assert!(OracleSpec::parse("cube:dim=2").is_err());
        assert_eq!(
            OracleSpec::parse("mlp:path=a.txt;benign=1").unwrap(),
            OracleSpec::Mlp { path: "a.txt".into(), benign: 1 }
        );
    }

    #[test]
    fn mlp_identity_argmax() {
        let net = Mlp::parse("layers: 1\n2 2\n1 0\n0 1\n0 0\n").unwrap();
        assert_eq!(net.label(&[3.0, 1.0]), 0);
        assert_eq!(net.label(&[-3.0, 1.0]), 1);
        assert_eq!(Mlp::parse(&net.format()).unwrap(), net);
    }

    #[test]
    fn mlp_load_errors() {
        let text = "layers: 1\n2 2\n1 0\n0 1\n0";
        match Mlp::parse(text) {
            Err(OracleError::Truncated { offset, .. }) => assert_eq!(offset, text.len()),
            other => panic!("{other:?}"),
        }
        match Mlp::parse("layers: 1\n2 2\n1 x\n0 1\n0 0\n") {
            Err(OracleError::BadToken { offset, token, .. }) => {
                assert_eq!(offset, 16);
                assert_eq!(token, "x");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Mlp::parse("layers: 2\n2 3\n1 0 0\n0 1 0\n0 0\n2 4\n1 0 0 0\n0 1 0 0\n0 0\n"),
            Err(OracleError::LayerChain { layer: 1, expected: 2, got: 4 })
        ));
        assert!(matches!(Mlp::parse("layers: 1\n1 1\n1\n0\n9"), Err(OracleError::Trailing { .. })));
    }
}
