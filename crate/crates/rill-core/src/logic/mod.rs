//! First-order rule syntax: terms, atoms, formulas and knowledge bases.
//!
//! Rules are immutable trees over atoms, the connectives `!`, `&`, `|`,
//! `->`, `<->` and the quantifiers `forall`/`exists`.  A [`KnowledgeBase`]
//! is an ordered list of closed rules with a consistent arity signature per
//! predicate.  Parsing lives in [`parse_rule`]/[`parse_kb`]; structural
//! rewrites (connective reduction, completion transforms, subsampling) in
//! the sibling `transform` module.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

mod parse;
mod transform;

pub use parse::{parse_kb, parse_rule, ParseError};
pub use transform::{clark_grouped_completion, clark_iff_transform, normalize_core, sample_kb};

/// Errors from constructing or validating logic objects.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LogicError {
    /// Identifier is empty, contains a non `[A-Za-z0-9_]` character, starts
    /// with a digit, or collides with a DSL keyword.
    #[error("invalid identifier `{0}`")]
    InvalidIdentifier(String),
    /// A predicate was used with two different arities.
    #[error("predicate `{predicate}` used with arity {found}, expected {expected}")]
    Arity {
        predicate: String,
        expected: usize,
        found: usize,
    },
    /// A rule mentions a variable that no quantifier binds.
    #[error("rule contains free variable `{0}`")]
    FreeVariable(String),
    /// A quantifier rebinds a variable already bound on the path above it.
    #[error("quantifier rebinds variable `{0}`")]
    ShadowedVariable(String),
    /// A completion transform expected the rule matrix to be an implication.
    #[error("rule matrix is not an implication")]
    NotAnImplication,
    /// Grouped completion expected an atomic implication head.
    #[error("implication head is not an atom")]
    NonAtomicHead,
    /// Grouped completion only handles universally quantified rules.
    #[error("rule prefix contains an existential quantifier")]
    ExistentialPrefix,
    /// Two-valued evaluation reached a quantifier.
    #[error("cannot evaluate a quantified formula propositionally")]
    QuantifiedEval,
}

/// Checks the DSL identifier rules: ASCII `[A-Za-z_][A-Za-z0-9_]*`, not a
/// keyword.
pub fn check_ident(name: &str) -> Result<(), LogicError> {
    let mut chars = name.chars();
    let ok = match chars.next() {
        Some(c) => {
            (c.is_ascii_alphabetic() || c == '_')
                && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        }
        None => false,
    };
    if !ok || name == "forall" || name == "exists" {
        return Err(LogicError::InvalidIdentifier(name.to_string()));
    }
    Ok(())
}

/// A term: a quantified variable or a constant symbol.
///
/// The DSL does not distinguish the two lexically; an identifier in argument
/// position is a variable exactly when some enclosing quantifier binds it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Variable(String),
    Constant(String),
}

impl Term {
    pub fn variable(name: &str) -> Result<Self, LogicError> {
        check_ident(name)?;
        Ok(Term::Variable(name.to_string()))
    }

    pub fn constant(name: &str) -> Result<Self, LogicError> {
        check_ident(name)?;
        Ok(Term::Constant(name.to_string()))
    }

    pub fn name(&self) -> &str {
        match self {
            Term::Variable(n) | Term::Constant(n) => n,
        }
    }
}

/// A predicate applied to zero or more terms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub predicate: String,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn new(predicate: &str, args: Vec<Term>) -> Result<Self, LogicError> {
        check_ident(predicate)?;
        Ok(Atom {
            predicate: predicate.to_string(),
            args,
        })
    }

    /// Zero-ary (propositional) atom.
    pub fn prop(predicate: &str) -> Result<Self, LogicError> {
        Atom::new(predicate, Vec::new())
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }

    /// True when no argument is a variable.
    pub fn is_ground(&self) -> bool {
        self.args.iter().all(|t| matches!(t, Term::Constant(_)))
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.predicate)?;
        if !self.args.is_empty() {
            f.write_str("(")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                f.write_str(a.name())?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

/// Quantifier kind, used when splitting a rule into prefix and matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quant {
    Forall,
    Exists,
}

/// A rule syntax tree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Formula {
    Atom(Atom),
    Not(Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Iff(Box<Formula>, Box<Formula>),
    Forall(String, Box<Formula>),
    Exists(String, Box<Formula>),
}

impl Formula {
    pub fn atom(a: Atom) -> Formula {
        Formula::Atom(a)
    }

    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }

    pub fn implies(p: Formula, q: Formula) -> Formula {
        Formula::Implies(Box::new(p), Box::new(q))
    }

    pub fn and(p: Formula, q: Formula) -> Formula {
        Formula::And(Box::new(p), Box::new(q))
    }

    pub fn or(p: Formula, q: Formula) -> Formula {
        Formula::Or(Box::new(p), Box::new(q))
    }

    pub fn iff(p: Formula, q: Formula) -> Formula {
        Formula::Iff(Box::new(p), Box::new(q))
    }

    pub fn forall(var: &str, body: Formula) -> Result<Formula, LogicError> {
        check_ident(var)?;
        Ok(Formula::Forall(var.to_string(), Box::new(body)))
    }

    pub fn exists(var: &str, body: Formula) -> Result<Formula, LogicError> {
        check_ident(var)?;
        Ok(Formula::Exists(var.to_string(), Box::new(body)))
    }

    /// Variables that occur outside the scope of a binding quantifier.
    pub fn free_variables(&self) -> BTreeSet<String> {
        fn walk(f: &Formula, bound: &mut Vec<String>, out: &mut BTreeSet<String>) {
            match f {
                Formula::Atom(a) => {
                    for t in &a.args {
                        if let Term::Variable(v) = t {
                            if !bound.iter().any(|b| b == v) {
                                out.insert(v.clone());
                            }
                        }
                    }
                }
                Formula::Not(g) => walk(g, bound, out),
                Formula::Implies(p, q)
                | Formula::And(p, q)
                | Formula::Or(p, q)
                | Formula::Iff(p, q) => {
                    walk(p, bound, out);
                    walk(q, bound, out);
                }
                Formula::Forall(v, body) | Formula::Exists(v, body) => {
                    bound.push(v.clone());
                    walk(body, bound, out);
                    bound.pop();
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(self, &mut Vec::new(), &mut out);
        out
    }

    /// Checks the path-uniqueness of quantified variable names.
    pub fn validate(&self) -> Result<(), LogicError> {
        fn walk(f: &Formula, bound: &mut Vec<String>) -> Result<(), LogicError> {
            match f {
                Formula::Atom(_) => Ok(()),
                Formula::Not(g) => walk(g, bound),
                Formula::Implies(p, q)
                | Formula::And(p, q)
                | Formula::Or(p, q)
                | Formula::Iff(p, q) => {
                    walk(p, bound)?;
                    walk(q, bound)
                }
                Formula::Forall(v, body) | Formula::Exists(v, body) => {
                    if bound.iter().any(|b| b == v) {
                        return Err(LogicError::ShadowedVariable(v.clone()));
                    }
                    bound.push(v.clone());
                    walk(body, bound)?;
                    bound.pop();
                    Ok(())
                }
            }
        }
        walk(self, &mut Vec::new())
    }

    /// Collects every atom occurrence, left to right.
    pub fn atoms(&self) -> Vec<&Atom> {
        fn walk<'a>(f: &'a Formula, out: &mut Vec<&'a Atom>) {
            match f {
                Formula::Atom(a) => out.push(a),
                Formula::Not(g) => walk(g, out),
                Formula::Implies(p, q)
                | Formula::And(p, q)
                | Formula::Or(p, q)
                | Formula::Iff(p, q) => {
                    walk(p, out);
                    walk(q, out);
                }
                Formula::Forall(_, body) | Formula::Exists(_, body) => walk(body, out),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Two-valued evaluation of a quantifier-free formula.
    pub fn eval_bool(&self, assign: &impl Fn(&Atom) -> bool) -> Result<bool, LogicError> {
        match self {
            Formula::Atom(a) => Ok(assign(a)),
            Formula::Not(g) => Ok(!g.eval_bool(assign)?),
            Formula::Implies(p, q) => Ok(!p.eval_bool(assign)? || q.eval_bool(assign)?),
            Formula::And(p, q) => Ok(p.eval_bool(assign)? && q.eval_bool(assign)?),
            Formula::Or(p, q) => Ok(p.eval_bool(assign)? || q.eval_bool(assign)?),
            Formula::Iff(p, q) => Ok(p.eval_bool(assign)? == q.eval_bool(assign)?),
            Formula::Forall(..) | Formula::Exists(..) => Err(LogicError::QuantifiedEval),
        }
    }

    /// Renames variables (both binders and occurrences) according to `map`.
    ///
    /// The caller must keep the result capture-free; rules validated through
    /// [`KnowledgeBase::new`] have path-unique binders, which makes a plain
    /// simultaneous rename sound when the targets are fresh.
    pub fn rename_variables(&self, map: &BTreeMap<String, String>) -> Formula {
        let sub = |v: &String| map.get(v).cloned().unwrap_or_else(|| v.clone());
        match self {
            Formula::Atom(a) => {
                let args = a
                    .args
                    .iter()
                    .map(|t| match t {
                        Term::Variable(v) => Term::Variable(sub(v)),
                        Term::Constant(c) => Term::Constant(c.clone()),
                    })
                    .collect();
                Formula::Atom(Atom {
                    predicate: a.predicate.clone(),
                    args,
                })
            }
            Formula::Not(g) => Formula::not(g.rename_variables(map)),
            Formula::Implies(p, q) => {
                Formula::implies(p.rename_variables(map), q.rename_variables(map))
            }
            Formula::And(p, q) => Formula::and(p.rename_variables(map), q.rename_variables(map)),
            Formula::Or(p, q) => Formula::or(p.rename_variables(map), q.rename_variables(map)),
            Formula::Iff(p, q) => Formula::iff(p.rename_variables(map), q.rename_variables(map)),
            Formula::Forall(v, body) => {
                Formula::Forall(sub(v), Box::new(body.rename_variables(map)))
            }
            Formula::Exists(v, body) => {
                Formula::Exists(sub(v), Box::new(body.rename_variables(map)))
            }
        }
    }

    /// Splits a rule into its leading quantifier prefix and the matrix below.
    pub fn quantifier_prefix(&self) -> (Vec<(Quant, &str)>, &Formula) {
        let mut prefix = Vec::new();
        let mut cur = self;
        loop {
            match cur {
                Formula::Forall(v, body) => {
                    prefix.push((Quant::Forall, v.as_str()));
                    cur = body;
                }
                Formula::Exists(v, body) => {
                    prefix.push((Quant::Exists, v.as_str()));
                    cur = body;
                }
                _ => return (prefix, cur),
            }
        }
    }

    /// Wraps `matrix` back under a quantifier prefix.
    pub fn with_prefix(prefix: &[(Quant, String)], matrix: Formula) -> Formula {
        let mut f = matrix;
        for (q, v) in prefix.iter().rev() {
            f = match q {
                Quant::Forall => Formula::Forall(v.clone(), Box::new(f)),
                Quant::Exists => Formula::Exists(v.clone(), Box::new(f)),
            };
        }
        f
    }
}

// Printing uses the parser's precedence so that `parse_rule(format!("{f}"))`
// reproduces the tree: `!` > `&` > `|` > `->` > `<->`, with `->`/`<->`
// right-associative and quantifier bodies extending maximally right.
const PREC_QUANT: u8 = 0;
const PREC_IFF: u8 = 1;
const PREC_IMPLIES: u8 = 2;
const PREC_OR: u8 = 3;
const PREC_AND: u8 = 4;
const PREC_NOT: u8 = 5;

fn fmt_prec(f: &Formula, out: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
    let prec = match f {
        Formula::Atom(_) => u8::MAX,
        Formula::Not(_) => PREC_NOT,
        Formula::And(..) => PREC_AND,
        Formula::Or(..) => PREC_OR,
        Formula::Implies(..) => PREC_IMPLIES,
        Formula::Iff(..) => PREC_IFF,
        Formula::Forall(..) | Formula::Exists(..) => PREC_QUANT,
    };
    let parens = prec < min;
    if parens {
        out.write_str("(")?;
    }
    match f {
        Formula::Atom(a) => write!(out, "{a}")?,
        Formula::Not(g) => {
            out.write_str("!")?;
            fmt_prec(g, out, PREC_NOT)?;
        }
        Formula::And(p, q) => {
            fmt_prec(p, out, PREC_AND)?;
            out.write_str(" & ")?;
            fmt_prec(q, out, PREC_AND + 1)?;
        }
        Formula::Or(p, q) => {
            fmt_prec(p, out, PREC_OR)?;
            out.write_str(" | ")?;
            fmt_prec(q, out, PREC_OR + 1)?;
        }
        Formula::Implies(p, q) => {
            fmt_prec(p, out, PREC_IMPLIES + 1)?;
            out.write_str(" -> ")?;
            fmt_prec(q, out, PREC_IMPLIES)?;
        }
        Formula::Iff(p, q) => {
            fmt_prec(p, out, PREC_IFF + 1)?;
            out.write_str(" <-> ")?;
            fmt_prec(q, out, PREC_IFF)?;
        }
        Formula::Forall(..) | Formula::Exists(..) => {
            // Coalesce runs of the same quantifier into one variable list.
            let (word, mut vars, mut body): (_, Vec<&str>, _) = match f {
                Formula::Forall(v, b) => ("forall ", alloc::vec![v.as_str()], &**b),
                Formula::Exists(v, b) => ("exists ", alloc::vec![v.as_str()], &**b),
                _ => unreachable!(),
            };
            loop {
                match (f, body) {
                    (Formula::Forall(..), Formula::Forall(v, b)) => {
                        vars.push(v.as_str());
                        body = b;
                    }
                    (Formula::Exists(..), Formula::Exists(v, b)) => {
                        vars.push(v.as_str());
                        body = b;
                    }
                    _ => break,
                }
            }
            out.write_str(word)?;
            for (i, v) in vars.iter().enumerate() {
                if i > 0 {
                    out.write_str(",")?;
                }
                out.write_str(v)?;
            }
            out.write_str(": ")?;
            fmt_prec(body, out, PREC_QUANT)?;
        }
    }
    if parens {
        out.write_str(")")?;
    }
    Ok(())
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_prec(self, f, 0)
    }
}

/// An ordered set of closed rules with consistent predicate arities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    rules: Vec<Formula>,
    signatures: BTreeMap<String, usize>,
}

impl KnowledgeBase {
    /// Validates closedness, binder uniqueness and arity consistency.
    pub fn new(rules: Vec<Formula>) -> Result<Self, LogicError> {
        let mut signatures = BTreeMap::new();
        for rule in &rules {
            rule.validate()?;
            if let Some(v) = rule.free_variables().into_iter().next() {
                return Err(LogicError::FreeVariable(v));
            }
            for atom in rule.atoms() {
                let arity = atom.arity();
                match signatures.get(&atom.predicate) {
                    Some(&expected) if expected != arity => {
                        return Err(LogicError::Arity {
                            predicate: atom.predicate.clone(),
                            expected,
                            found: arity,
                        });
                    }
                    Some(_) => {}
                    None => {
                        signatures.insert(atom.predicate.clone(), arity);
                    }
                }
            }
        }
        Ok(KnowledgeBase { rules, signatures })
    }

    pub fn empty() -> Self {
        KnowledgeBase {
            rules: Vec::new(),
            signatures: BTreeMap::new(),
        }
    }

    pub fn rules(&self) -> &[Formula] {
        &self.rules
    }

    /// Predicate name to arity, for every predicate occurring in the rules.
    pub fn signatures(&self) -> &BTreeMap<String, usize> {
        &self.signatures
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl fmt::Display for KnowledgeBase {
    /// One rule per line, re-parseable with [`parse_kb`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rule in &self.rules {
            writeln!(f, "{rule}")?;
        }
        Ok(())
    }
}
