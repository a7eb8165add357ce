//! From satisfaction degrees to training losses.
//!
//! A likelihood `s` in `[0, 1]` becomes a loss through the decreasing outer
//! map `g(s) = 1 - log2(s + 1)`, which pins `g(1) = 0` and `g(0) = 1`.  The
//! base-2 logarithm is what makes both endpoints exact.
//!
//! The reduction transforms reshape a loss to mute its low-loss region:
//!
//! ```text
//! identity    l
//! l2          l^2
//! hinge       l * [l > eps]
//! l2+hinge    l^2 * [l <= eps] + l * [l > eps]
//! ```
//!
//! Indicators are hard gates: zero value and zero gradient on the closed
//! branch, untouched payload on the open one.  `l2+hinge` is deliberately
//! discontinuous at `eps` (it jumps from `eps^2` to values above `eps`).
//!
//! [`semantic_loss_bruteforce`] is the probabilistic-logic counterpart used
//! for comparison: minus the log of the weighted model count, computed by
//! exact enumeration over at most 20 ground atoms.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::fuzzy::{logic_likelihood, FuzzyError, FuzzyOperator, Valuation};
use crate::logic::{normalize_core, Atom, Formula, KnowledgeBase, LogicError};
use crate::tape::{GateMode, Tape, TapeError, Value};

/// Errors from loss assembly.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Fuzzy(#[from] FuzzyError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error("semantic loss supports at most 20 distinct atoms, got {0}")]
    TooManyAtoms(usize),
    #[error("formula is unsatisfiable: weighted model count is zero")]
    Unsatisfiable,
    #[error("atom `{0}` has no probability")]
    MissingProbability(alloc::string::String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty knowledge base")]
    EmptyKnowledgeBase,
}

/// Decreasing map from likelihood to loss; only `1 - log2(s + 1)` is
/// provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OuterMap {
    #[default]
    NegLogBase2,
}

impl OuterMap {
    /// `g(s)`, recorded on the tape.  Requires `s` in `[0, 1]` and maps it
    /// into `[0, 1]`.
    pub fn apply(&self, tape: &mut Tape, s: Value) -> Result<Value, TapeError> {
        match self {
            OuterMap::NegLogBase2 => {
                let one = Tape::constant(1.0);
                let shifted = tape.add(s, one);
                let log = tape.log2(shifted)?;
                Ok(tape.sub(one, log))
            }
        }
    }
}

/// Loss reduction transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossTransform {
    Identity,
    L2,
    Hinge { epsilon: f64 },
    L2Hinge { epsilon: f64 },
}

impl LossTransform {
    /// Validates the truncation threshold where one is present.
    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            LossTransform::Hinge { epsilon } | LossTransform::L2Hinge { epsilon } => {
                if !(*epsilon > 0.0 && *epsilon < 1.0) {
                    return Err(LossError::Fuzzy(FuzzyError::Parameter(alloc::format!(
                        "epsilon must lie in (0, 1), got {epsilon}"
                    ))));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Applies a reduction transform to a loss value in `[0, 1]`.
pub fn rill(tape: &mut Tape, transform: &LossTransform, loss: Value) -> Value {
    match *transform {
        LossTransform::Identity => loss,
        LossTransform::L2 => tape.mul(loss, loss),
        LossTransform::Hinge { epsilon } => tape.gate(loss.value(), epsilon, GateMode::Gt, loss),
        LossTransform::L2Hinge { epsilon } => {
            let sq = tape.mul(loss, loss);
            let low = tape.gate(loss.value(), epsilon, GateMode::Le, sq);
            let high = tape.gate(loss.value(), epsilon, GateMode::Gt, loss);
            tape.add(low, high)
        }
    }
}

/// Unsatisfiability of a normalized formula under a valuation:
/// `g(s(f, v))`, in `[0, 1]`.
pub fn logic_loss(
    tape: &mut Tape,
    op: &FuzzyOperator,
    g: &OuterMap,
    f: &Formula,
    v: &Valuation,
) -> Result<Value, LossError> {
    let s = logic_likelihood(tape, op, f, v)?;
    Ok(g.apply(tape, s)?)
}

/// Exact semantic loss by weighted model counting: enumerates every
/// assignment of the formula's ground atoms, sums the product weights of
/// the satisfying ones and returns `-ln(WMC)`.  Differentiable through the
/// probabilities; an unsatisfiable formula (WMC = 0) is an error.
///
/// The formula may use any connective but no quantifiers; ground it first.
pub fn semantic_loss_bruteforce(
    tape: &mut Tape,
    f: &Formula,
    probs: &BTreeMap<Atom, Value>,
) -> Result<Value, LossError> {
    let mut atoms: Vec<&Atom> = Vec::new();
    for a in f.atoms() {
        if !atoms.contains(&a) {
            atoms.push(a);
        }
    }
    if atoms.len() > 20 {
        return Err(LossError::TooManyAtoms(atoms.len()));
    }
    let mut p = Vec::with_capacity(atoms.len());
    let mut not_p = Vec::with_capacity(atoms.len());
    for a in &atoms {
        let v = probs
            .get(a)
            .copied()
            .ok_or_else(|| LossError::MissingProbability(a.to_string()))?;
        p.push(v);
        not_p.push(tape.sub(Tape::constant(1.0), v));
    }

    let mut terms = Vec::new();
    let mut factors = Vec::with_capacity(atoms.len());
    for mask in 0u32..(1u32 << atoms.len()) {
        let truth = |a: &Atom| {
            let idx = atoms.iter().position(|b| *b == a).expect("atom collected");
            mask & (1 << idx) != 0
        };
        if !f.eval_bool(&truth)? {
            continue;
        }
        factors.clear();
        for (idx, _) in atoms.iter().enumerate() {
            factors.push(if mask & (1 << idx) != 0 { p[idx] } else { not_p[idx] });
        }
        terms.push(tape.product(&factors));
    }
    if terms.is_empty() {
        return Err(LossError::Unsatisfiable);
    }
    let wmc = tape.sum(&terms);
    let ln = tape.ln(wmc).map_err(|e| match e {
        TapeError::LogDomain(_) => LossError::Unsatisfiable,
        other => LossError::Tape(other),
    })?;
    Ok(tape.neg(ln))
}

/// Logic-risk coefficient in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskWeights {
    pub lambda: f64,
}

impl RiskWeights {
    /// # Panics
    ///
    /// Panics when `lambda` is negative or not finite.
    pub fn new(lambda: f64) -> Self {
        assert!(lambda >= 0.0 && lambda.is_finite(), "lambda must be >= 0");
        RiskWeights { lambda }
    }
}

/// Mean transformed logic loss over every (sample, rule) pair:
/// rules are normalized, evaluated under each valuation in the batch,
/// mapped through `g` and the transform, then averaged.
pub fn empirical_logic_risk(
    tape: &mut Tape,
    op: &FuzzyOperator,
    g: &OuterMap,
    transform: &LossTransform,
    kb: &KnowledgeBase,
    batch: &[Valuation],
) -> Result<Value, LossError> {
    let rules: Vec<Formula> = kb.rules().iter().map(normalize_core).collect();
    empirical_logic_risk_normalized(tape, op, g, transform, &rules, batch)
}

/// As [`empirical_logic_risk`], for rules already in core form.  Training
/// loops normalize once and call this per step.
pub fn empirical_logic_risk_normalized(
    tape: &mut Tape,
    op: &FuzzyOperator,
    g: &OuterMap,
    transform: &LossTransform,
    rules: &[Formula],
    batch: &[Valuation],
) -> Result<Value, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if rules.is_empty() {
        return Err(LossError::EmptyKnowledgeBase);
    }
    let mut terms = Vec::with_capacity(batch.len() * rules.len());
    for v in batch {
        for rule in rules {
            let l = logic_loss(tape, op, g, rule, v)?;
            terms.push(rill(tape, transform, l));
        }
    }
    Ok(tape.mean(&terms))
}

/// `task + lambda * logic`.
pub fn combined_objective(
    tape: &mut Tape,
    task_risk: Value,
    logic_risk: Value,
    w: &RiskWeights,
) -> Value {
    let scaled = tape.mul(logic_risk, Tape::constant(w.lambda));
    tape.add(task_risk, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{parse_kb, parse_rule};
    use alloc::vec;

    fn g_of(s: f64) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(s);
        OuterMap::NegLogBase2.apply(&mut tape, v).unwrap().value()
    }

    #[test]
    fn outer_map_endpoints_and_midpoint() {
        assert_eq!(g_of(1.0), 0.0);
        assert_eq!(g_of(0.0), 1.0);
        let mid = g_of(0.5);
        let want = 1.0 - libm::log(1.5) / libm::log(2.0);
        assert!((mid - want).abs() < 1e-12);
        assert!((mid - 0.41504).abs() < 1e-5);
    }

    #[test]
    fn outer_map_is_decreasing() {
        let mut prev = g_of(0.0);
        for i in 1..=100 {
            let cur = g_of(i as f64 / 100.0);
            assert!(cur < prev);
            prev = cur;
        }
    }

    fn rill_at(t: &LossTransform, l: f64) -> (f64, f64) {
        let mut tape = Tape::new();
        let lv = tape.leaf(l);
        let out = rill(&mut tape, t, lv);
        let g = tape.backward(out);
        (out.value(), g.wrt(lv))
    }

    #[test]
    fn transform_shapes() {
        assert_eq!(rill_at(&LossTransform::L2, 0.5).0, 0.25);

        let hinge = LossTransform::Hinge { epsilon: 0.25 };
        assert_eq!(rill_at(&hinge, 0.1), (0.0, 0.0));
        assert_eq!(rill_at(&hinge, 0.5), (0.5, 1.0));
        // the indicator is strict at the threshold
        assert_eq!(rill_at(&hinge, 0.25).0, 0.0);

        let l2h = LossTransform::L2Hinge { epsilon: 0.25 };
        assert_eq!(rill_at(&l2h, 0.25).0, 0.0625);
        assert_eq!(rill_at(&l2h, 0.5), (0.5, 1.0));
        // below the threshold the gradient is the l2 one
        let (v, d) = rill_at(&l2h, 0.2);
        assert!((v - 0.04).abs() < 1e-15);
        assert!((d - 0.4).abs() < 1e-15);
    }

    #[test]
    fn transforms_preserve_endpoints() {
        for t in [
            LossTransform::Identity,
            LossTransform::L2,
            LossTransform::Hinge { epsilon: 0.25 },
            LossTransform::L2Hinge { epsilon: 0.25 },
        ] {
            assert_eq!(rill_at(&t, 0.0).0, 0.0, "{t:?} at 0");
            assert_eq!(rill_at(&t, 1.0).0, 1.0, "{t:?} at 1");
        }
    }

    #[test]
    fn hinge_kills_everything_at_or_below_epsilon() {
        let t = LossTransform::Hinge { epsilon: 0.3 };
        for i in 0..=30 {
            let l = i as f64 / 100.0;
            assert_eq!(rill_at(&t, l), (0.0, 0.0), "l = {l}");
        }
    }

    #[test]
    fn transform_validation() {
        assert!(LossTransform::Hinge { epsilon: 0.0 }.validate().is_err());
        assert!(LossTransform::L2Hinge { epsilon: 1.0 }.validate().is_err());
        assert!(LossTransform::Hinge { epsilon: 0.25 }.validate().is_ok());
        assert!(LossTransform::Identity.validate().is_ok());
    }

    fn wmc_loss(text: &str, vals: &[(&str, f64)]) -> Result<(f64, Vec<f64>), LossError> {
        let mut tape = Tape::new();
        let mut probs = BTreeMap::new();
        let mut leaves = Vec::new();
        for (name, p) in vals {
            let leaf = tape.leaf(*p);
            leaves.push(leaf);
            probs.insert(Atom::prop(name).unwrap(), leaf);
        }
        let f = parse_rule(text).unwrap();
        let loss = semantic_loss_bruteforce(&mut tape, &f, &probs)?;
        let g = tape.backward(loss);
        Ok((loss.value(), leaves.iter().map(|l| g.wrt(*l)).collect()))
    }

    #[test]
    fn wmc_of_single_implication_matches_reichenbach() {
        let (loss, _) = wmc_loss("p -> q", &[("p", 0.3), ("q", 0.6)]).unwrap();
        let want = -libm::log(0.88);
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.12783).abs() < 1e-5);
    }

    #[test]
    fn wmc_tautology_and_contradiction() {
        let (loss, grads) = wmc_loss("p | !p", &[("p", 0.4)]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grads[0].abs() < 1e-12);

        assert_eq!(
            wmc_loss("p & !p", &[("p", 0.4)]).unwrap_err(),
            LossError::Unsatisfiable
        );
    }

    #[test]
    fn wmc_rejects_oversized_formulas() {
        let mut text = alloc::string::String::from("p0");
        let mut vals = vec![("p0".to_string(), 0.5)];
        for i in 1..21 {
            text.push_str(&alloc::format!(" | p{i}"));
            vals.push((alloc::format!("p{i}"), 0.5));
        }
        let refs: Vec<(&str, f64)> = vals.iter().map(|(s, p)| (s.as_str(), *p)).collect();
        assert_eq!(
            wmc_loss(&text, &refs).unwrap_err(),
            LossError::TooManyAtoms(21)
        );
    }

    #[test]
    fn empirical_risk_is_a_plain_mean() {
        // one satisfied rule -> zero risk
        let kb = parse_kb("P -> Q\n").unwrap();
        let mut tape = Tape::new();
        let mut v = Valuation::new();
        v.insert(Atom::prop("P").unwrap(), tape.leaf(1.0)).unwrap();
        v.insert(Atom::prop("Q").unwrap(), tape.leaf(1.0)).unwrap();
        let risk = empirical_logic_risk(
            &mut tape,
            &FuzzyOperator::Reichenbach,
            &OuterMap::NegLogBase2,
            &LossTransform::Identity,
            &kb,
            core::slice::from_ref(&v),
        )
        .unwrap();
        assert_eq!(risk.value(), 0.0);

        // two samples with per-rule losses {g(s1), g(s2)} average plainly
        let mut tape = Tape::new();
        let mut mk = |p: f64, q: f64| {
            let mut v = Valuation::new();
            v.insert(Atom::prop("P").unwrap(), tape.leaf(p)).unwrap();
            v.insert(Atom::prop("Q").unwrap(), tape.leaf(q)).unwrap();
            v
        };
        let batch = vec![mk(1.0, 0.2), mk(1.0, 0.6)];
        let risk = empirical_logic_risk(
            &mut tape,
            &FuzzyOperator::Reichenbach,
            &OuterMap::NegLogBase2,
            &LossTransform::Identity,
            &kb,
            &batch,
        )
        .unwrap();
        let want = (g_of(0.2) + g_of(0.6)) / 2.0;
        assert!((risk.value() - want).abs() < 1e-15);
    }

    #[test]
    fn empirical_risk_rejects_empty_inputs() {
        let kb = parse_kb("P -> Q\n").unwrap();
        let mut tape = Tape::new();
        assert_eq!(
            empirical_logic_risk(
                &mut tape,
                &FuzzyOperator::Reichenbach,
                &OuterMap::NegLogBase2,
                &LossTransform::Identity,
                &kb,
                &[],
            )
            .unwrap_err(),
            LossError::EmptyBatch
        );
    }

    #[test]
    fn combined_objective_is_conic() {
        let mut tape = Tape::new();
        let task = tape.leaf(0.2);
        let logic = tape.leaf(0.5);
        let total = combined_objective(&mut tape, task, logic, &RiskWeights::new(0.7));
        assert!((total.value() - 0.55).abs() < 1e-15);
        let off = combined_objective(&mut tape, task, logic, &RiskWeights::new(0.0));
        assert_eq!(off.value(), 0.2);
        let zero_task = Tape::constant(0.0);
        let zero_logic = Tape::constant(0.0);
        let z = combined_objective(&mut tape, zero_task, zero_logic, &RiskWeights::new(3.0));
        assert_eq!(z.value(), 0.0);
    }
}
