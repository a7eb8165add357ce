//! Fuzzy evaluation of normalized formulas and operator bias diagnostics.
//!
//! An implication operator maps premise/consequent confidences in
//! `[0, 1]^2` to a satisfaction degree in `[0, 1]`.  Three operators are
//! supported:
//!
//! ```text
//! Reichenbach   I(x, y) = 1 - x + x*y
//! Łukasiewicz   I(x, y) = min(1 - x + y, 1)
//! Sigmoidal     I(x, y) = d * (h * sigmoid(s * (R + b0)) - 1),  R = Reichenbach
//!               d = (1 + e^(-s(1+b0))) / (e^(-b0 s) - e^(-s(1+b0))),  h = 1 + e^(-b0 s)
//! ```
//!
//! The sigmoidal constants normalise the endpoints so that a Reichenbach
//! value of 0 maps to 0 and 1 maps to 1.
//!
//! [`logic_likelihood`] evaluates a formula that only uses the core
//! connectives: atoms read from a [`Valuation`], `!g` becomes `1 - s(g)`,
//! `p -> q` applies the operator, `forall` averages its groundings and
//! `exists` takes their minimum.  Quantifier domains are supplied by the
//! caller on the valuation; there is no universe construction.
//!
//! The `check_*` functions probe an operator's partial derivatives on a
//! grid through the autodiff tape, which keeps them honest for any
//! piecewise definition.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::logic::{Atom, Formula, Term};
use crate::tape::{Tape, TapeError, Value};

/// Errors from fuzzy evaluation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FuzzyError {
    #[error("invalid operator parameter: {0}")]
    Parameter(String),
    #[error("implication input {0} outside [0, 1]")]
    InputRange(f64),
    #[error("valuation value {0} outside [0, 1]")]
    ValueRange(f64),
    #[error("atom `{0}` is not ground")]
    NonGroundAtom(String),
    #[error("atom `{0}` has no valuation")]
    MissingAtom(String),
    #[error("no grounding domain for quantified variable `{0}`")]
    MissingDomain(String),
    #[error("empty grounding domain for quantified variable `{0}`")]
    EmptyDomain(String),
    #[error("variable `{0}` is not bound")]
    UnboundVariable(String),
    #[error("formula is not normalized: contains `{0}`")]
    NotNormalized(&'static str),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Differentiable implication operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FuzzyOperator {
    Reichenbach,
    Lukasiewicz,
    Sigmoidal { s: f64, b0: f64 },
}

impl FuzzyOperator {
    /// Sigmoidal smoothing of the Reichenbach operator with steepness `s`
    /// and offset `b0`.  Rejects parameters whose normalisation constants
    /// would overflow.
    pub fn sigmoidal(s: f64, b0: f64) -> Result<Self, FuzzyError> {
        if !(s > 0.0) || !b0.is_finite() {
            return Err(FuzzyError::Parameter(alloc::format!(
                "sigmoidal needs s > 0 and finite b0, got s={s}, b0={b0}"
            )));
        }
        if s * (1.0 + libm::fabs(b0)) > 700.0 {
            return Err(FuzzyError::Parameter(alloc::format!(
                "sigmoidal constants overflow for s={s}, b0={b0}"
            )));
        }
        Ok(FuzzyOperator::Sigmoidal { s, b0 })
    }

    /// Records `I(x, y)` on the tape.  Inputs must lie in `[0, 1]`; the
    /// result does too, for every operator.
    pub fn implication(&self, tape: &mut Tape, x: Value, y: Value) -> Result<Value, FuzzyError> {
        for v in [x.value(), y.value()] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FuzzyError::InputRange(v));
            }
        }
        match *self {
            // 1 - x*(1 - y): same function as 1 - x + x*y, but every
            // intermediate stays inside [0, 1] in floating point.
            FuzzyOperator::Reichenbach => {
                let one = Tape::constant(1.0);
                let ny = tape.sub(one, y);
                let xny = tape.mul(x, ny);
                Ok(tape.sub(one, xny))
            }
            // min(1, 1 - x + y) with the constant on the left, so the
            // subgradient in x is exactly -1 where x > y and 0 elsewhere.
            FuzzyOperator::Lukasiewicz => {
                let one = Tape::constant(1.0);
                let nx = tape.sub(one, x);
                let u = tape.add(nx, y);
                Ok(tape.min(one, u))
            }
            FuzzyOperator::Sigmoidal { s, b0 } => {
                let e_low = libm::exp(-b0 * s);
                let e_high = libm::exp(-s * (1.0 + b0));
                let d = (1.0 + e_high) / (e_low - e_high);
                let h = 1.0 + e_low;

                let one = Tape::constant(1.0);
                let ny = tape.sub(one, y);
                let xny = tape.mul(x, ny);
                let r = tape.sub(one, xny);

                let shifted = tape.add(r, Tape::constant(b0));
                let u = tape.mul(shifted, Tape::constant(s));
                let nu = tape.neg(u);
                let e = tape.exp(nu)?;
                let denom = tape.add(one, e);
                let f = tape.div(one, denom)?;

                let hf = tape.mul(f, Tape::constant(h));
                let centered = tape.sub(hf, one);
                let out = tape.mul(centered, Tape::constant(d));

                // The normalisation is exact only in real arithmetic; clamp
                // the last ulp so the range invariant holds bit-for-bit.
                let clipped = tape.min(out, one);
                Ok(tape.max(clipped, Tape::constant(0.0)))
            }
        }
    }
}

/// Ground-atom confidences plus the grounding domains for quantified
/// variables.  Values must lie in `[0, 1]`.
#[derive(Default)]
pub struct Valuation {
    atoms: BTreeMap<Atom, Value>,
    domains: BTreeMap<String, Vec<String>>,
}

impl Valuation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, atom: Atom, value: Value) -> Result<(), FuzzyError> {
        if !atom.is_ground() {
            return Err(FuzzyError::NonGroundAtom(atom.to_string()));
        }
        if !(0.0..=1.0).contains(&value.value()) {
            return Err(FuzzyError::ValueRange(value.value()));
        }
        self.atoms.insert(atom, value);
        Ok(())
    }

    pub fn get(&self, atom: &Atom) -> Option<Value> {
        self.atoms.get(atom).copied()
    }

    /// Declares the constants a quantified variable ranges over.
    pub fn set_domain(&mut self, var: &str, constants: Vec<String>) {
        self.domains.insert(var.to_string(), constants);
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

fn ground_atom(atom: &Atom, env: &[(String, String)]) -> Result<Atom, FuzzyError> {
    if atom.is_ground() {
        return Ok(atom.clone());
    }
    let mut args = Vec::with_capacity(atom.args.len());
    for t in &atom.args {
        match t {
            Term::Constant(c) => args.push(Term::Constant(c.clone())),
            Term::Variable(v) => {
                let bound = env
                    .iter()
                    .rev()
                    .find(|(name, _)| name == v)
                    .map(|(_, c)| c.clone())
                    .ok_or_else(|| FuzzyError::UnboundVariable(v.clone()))?;
                args.push(Term::Constant(bound));
            }
        }
    }
    Ok(Atom {
        predicate: atom.predicate.clone(),
        args,
    })
}

fn likelihood_rec(
    tape: &mut Tape,
    op: &FuzzyOperator,
    f: &Formula,
    v: &Valuation,
    env: &mut Vec<(String, String)>,
) -> Result<Value, FuzzyError> {
    match f {
        Formula::Atom(a) => {
            let ga = ground_atom(a, env)?;
            v.get(&ga)
                .ok_or_else(|| FuzzyError::MissingAtom(ga.to_string()))
        }
        Formula::Not(g) => {
            let s = likelihood_rec(tape, op, g, v, env)?;
            Ok(tape.sub(Tape::constant(1.0), s))
        }
        Formula::Implies(p, q) => {
            let sp = likelihood_rec(tape, op, p, v, env)?;
            let sq = likelihood_rec(tape, op, q, v, env)?;
            op.implication(tape, sp, sq)
        }
        Formula::Forall(var, body) => {
            let dom = v
                .domains
                .get(var)
                .ok_or_else(|| FuzzyError::MissingDomain(var.clone()))?
                .clone();
            if dom.is_empty() {
                return Err(FuzzyError::EmptyDomain(var.clone()));
            }
            let mut vals = Vec::with_capacity(dom.len());
            for c in dom {
                env.push((var.clone(), c));
                let r = likelihood_rec(tape, op, body, v, env);
                env.pop();
                vals.push(r?);
            }
            Ok(tape.mean(&vals))
        }
        Formula::Exists(var, body) => {
            let dom = v
                .domains
                .get(var)
                .ok_or_else(|| FuzzyError::MissingDomain(var.clone()))?
                .clone();
            if dom.is_empty() {
                return Err(FuzzyError::EmptyDomain(var.clone()));
            }
            let mut acc: Option<Value> = None;
            for c in dom {
                env.push((var.clone(), c));
                let r = likelihood_rec(tape, op, body, v, env);
                env.pop();
                let r = r?;
                acc = Some(match acc {
                    Some(prev) => tape.min(prev, r),
                    None => r,
                });
            }
            Ok(acc.expect("domain checked non-empty"))
        }
        Formula::And(..) => Err(FuzzyError::NotNormalized("&")),
        Formula::Or(..) => Err(FuzzyError::NotNormalized("|")),
        Formula::Iff(..) => Err(FuzzyError::NotNormalized("<->")),
    }
}

/// Satisfaction degree of a normalized formula under a valuation:
/// atoms look up their confidence, `!g` is `1 - s(g)`, `p -> q` applies the
/// operator, `forall` averages over its domain and `exists` takes the
/// minimum.  The result lies in `[0, 1]`.
pub fn logic_likelihood(
    tape: &mut Tape,
    op: &FuzzyOperator,
    f: &Formula,
    v: &Valuation,
) -> Result<Value, FuzzyError> {
    likelihood_rec(tape, op, f, v, &mut Vec::new())
}

/// Value and both partial derivatives of `I` at a point, via the tape.
pub fn implication_with_grads(
    op: &FuzzyOperator,
    x: f64,
    y: f64,
) -> Result<(f64, f64, f64), FuzzyError> {
    let mut tape = Tape::new();
    let lx = tape.leaf(x);
    let ly = tape.leaf(y);
    let i = op.implication(&mut tape, lx, ly)?;
    let g = tape.backward(i);
    Ok((i.value(), g.wrt(lx), g.wrt(ly)))
}

/// One row of an operator scan: point, value, partials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub x: f64,
    pub y: f64,
    pub i: f64,
    pub di_dx: f64,
    pub di_dy: f64,
}

/// Dense scan of `I` and its partials over the closed `[0, 1]^2` grid with
/// `grid + 1` points per axis.
pub fn implication_scan(op: &FuzzyOperator, grid: usize) -> Result<Vec<ScanPoint>, FuzzyError> {
    let mut out = Vec::with_capacity((grid + 1) * (grid + 1));
    for ix in 0..=grid {
        let x = ix as f64 / grid as f64;
        for iy in 0..=grid {
            let y = iy as f64 / grid as f64;
            let (i, di_dx, di_dy) = implication_with_grads(op, x, y)?;
            out.push(ScanPoint { x, y, i, di_dx, di_dy });
        }
    }
    Ok(out)
}

/// Result of the confidence-monotonicity probe.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicReport {
    /// True when both clauses hold with strict derivative signs everywhere
    /// on the probed grid.
    pub strict: bool,
    /// Grid points violating either clause.
    pub violations: Vec<(f64, f64)>,
}

/// Numerically verifies both monotonicity clauses on a `grid + 1` point
/// lattice: `I(., y)` strictly decreasing in `x` for `y` in `[0, delta)`,
/// and `I(x, .)` strictly increasing in `y` for `x` in `(1 - delta, 1]`.
///
/// # Panics
///
/// Panics unless `0 < delta <= 1` and `grid >= 10`.
pub fn check_confidence_monotonic(
    op: &FuzzyOperator,
    delta: f64,
    grid: usize,
) -> MonotonicReport {
    assert!(delta > 0.0 && delta <= 1.0, "delta must lie in (0, 1]");
    assert!(grid >= 10, "grid resolution must be at least 10");
    let mut violations = Vec::new();
    let step = |i: usize| i as f64 / grid as f64;
    for ix in 0..=grid {
        let x = step(ix);
        for iy in 0..=grid {
            let y = step(iy);
            let (_, di_dx, di_dy) =
                implication_with_grads(op, x, y).expect("operator valid on the unit square");
            let decreasing_clause = y < delta && !(di_dx < 0.0);
            let increasing_clause = x > 1.0 - delta && !(di_dy > 0.0);
            if decreasing_clause || increasing_clause {
                violations.push((x, y));
            }
        }
    }
    MonotonicReport {
        strict: violations.is_empty(),
        violations,
    }
}

/// Result of the implication-bias probe.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    /// Largest grid `delta` such that `dI/dx < 0` at every interior grid
    /// point of `(0, delta)^2` (vacuously `1/grid` when the square holds no
    /// grid point).
    pub max_strict_delta: f64,
    /// `(delta, fraction of interior grid points of `(0, delta)^2` with
    /// `dI/dx < 0`)` for every grid delta; empty squares report 1.
    pub biased_fraction: Vec<(f64, f64)>,
}

impl BiasReport {
    /// Fraction entry closest to `delta`.
    pub fn fraction_at(&self, delta: f64) -> f64 {
        let mut best = (f64::INFINITY, 1.0);
        for &(d, f) in &self.biased_fraction {
            let gap = libm::fabs(d - delta);
            if gap < best.0 {
                best = (gap, f);
            }
        }
        best.1
    }
}

/// Probes `dI/dx` on the interior lattice of the unit square and reports
/// where the premise-negating direction persists.
///
/// # Panics
///
/// Panics unless `grid >= 10`.
pub fn check_implication_biased(op: &FuzzyOperator, grid: usize) -> BiasReport {
    assert!(grid >= 10, "grid resolution must be at least 10");
    let n = grid;
    // negative[i][j] for interior points ((i+1)/n, (j+1)/n)
    let mut negative = alloc::vec![false; (n - 1) * (n - 1)];
    for i in 1..n {
        let x = i as f64 / n as f64;
        for j in 1..n {
            let y = j as f64 / n as f64;
            let (_, di_dx, _) =
                implication_with_grads(op, x, y).expect("operator valid on the unit square");
            negative[(i - 1) * (n - 1) + (j - 1)] = di_dx < 0.0;
        }
    }

    let mut biased_fraction = Vec::with_capacity(n);
    let mut max_strict_delta = 1.0 / n as f64;
    let mut all_strict = true;
    let mut neg_count = 0usize;
    for k in 1..=n {
        // grow the square to delta = k/n: new interior points have
        // max(i, j) = k - 1
        if k >= 2 {
            let b = k - 1;
            for (p, q) in (1..=b).map(|i| (i, b)).chain((1..b).map(|j| (b, j))) {
                if negative[(p - 1) * (n - 1) + (q - 1)] {
                    neg_count += 1;
                } else {
                    all_strict = false;
                }
            }
        }
        let total = (k - 1) * (k - 1);
        let fraction = if total == 0 {
            1.0
        } else {
            neg_count as f64 / total as f64
        };
        biased_fraction.push((k as f64 / n as f64, fraction));
        if all_strict {
            max_strict_delta = k as f64 / n as f64;
        }
    }
    BiasReport {
        max_strict_delta,
        biased_fraction,
    }
}
