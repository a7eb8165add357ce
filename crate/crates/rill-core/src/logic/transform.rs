//! Structural rewrites on rules and knowledge bases.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Atom, Formula, KnowledgeBase, LogicError, Quant, Term};

/// Rewrites a formula so that only atoms, `!`, `->` and quantifiers remain:
///
/// ```text
/// p & q   =>  !(p -> !q)
/// p | q   =>  !p -> q
/// p <-> q =>  !((p -> q) -> !(q -> p))
/// ```
///
/// The result is classically equivalent to the input.
pub fn normalize_core(f: &Formula) -> Formula {
    match f {
        Formula::Atom(a) => Formula::Atom(a.clone()),
        Formula::Not(g) => Formula::not(normalize_core(g)),
        Formula::Implies(p, q) => Formula::implies(normalize_core(p), normalize_core(q)),
        Formula::And(p, q) => Formula::not(Formula::implies(
            normalize_core(p),
            Formula::not(normalize_core(q)),
        )),
        Formula::Or(p, q) => Formula::implies(Formula::not(normalize_core(p)), normalize_core(q)),
        Formula::Iff(p, q) => {
            let p = normalize_core(p);
            let q = normalize_core(q);
            Formula::not(Formula::implies(
                Formula::implies(p.clone(), q.clone()),
                Formula::not(Formula::implies(q, p)),
            ))
        }
        Formula::Forall(v, body) => {
            Formula::Forall(v.clone(), alloc::boxed::Box::new(normalize_core(body)))
        }
        Formula::Exists(v, body) => {
            Formula::Exists(v.clone(), alloc::boxed::Box::new(normalize_core(body)))
        }
    }
}

/// Replaces each rule's top-level implication with a biconditional, keeping
/// quantifier prefixes intact.
pub fn clark_iff_transform(kb: &KnowledgeBase) -> Result<KnowledgeBase, LogicError> {
    let mut rules = Vec::with_capacity(kb.len());
    for rule in kb.rules() {
        let (prefix, matrix) = rule.quantifier_prefix();
        let Formula::Implies(p, q) = matrix else {
            return Err(LogicError::NotAnImplication);
        };
        let prefix: Vec<(Quant, String)> = prefix
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect();
        rules.push(Formula::with_prefix(
            &prefix,
            Formula::iff((**p).clone(), (**q).clone()),
        ));
    }
    KnowledgeBase::new(rules)
}

/// One rule split into universally quantified variables, implication body
/// and atomic head.
struct RuleParts {
    vars: Vec<String>,
    body: Formula,
    head: Atom,
}

fn split_rule(rule: &Formula) -> Result<RuleParts, LogicError> {
    let (prefix, matrix) = rule.quantifier_prefix();
    let mut vars = Vec::with_capacity(prefix.len());
    for (kind, v) in prefix {
        if kind != Quant::Forall {
            return Err(LogicError::ExistentialPrefix);
        }
        vars.push(v.to_string());
    }
    let Formula::Implies(body, head) = matrix else {
        return Err(LogicError::NotAnImplication);
    };
    let Formula::Atom(head) = &**head else {
        return Err(LogicError::NonAtomicHead);
    };
    Ok(RuleParts {
        vars,
        body: (**body).clone(),
        head: head.clone(),
    })
}

/// Head pattern used to group rules up to variable renaming: constants are
/// kept, variables are replaced by their first-occurrence index within the
/// head's argument list.
fn head_key(head: &Atom) -> (String, Vec<Result<usize, String>>) {
    let mut seen: Vec<&str> = Vec::new();
    let pattern = head
        .args
        .iter()
        .map(|t| match t {
            Term::Variable(v) => {
                let idx = match seen.iter().position(|s| s == v) {
                    Some(i) => i,
                    None => {
                        seen.push(v);
                        seen.len() - 1
                    }
                };
                Ok(idx)
            }
            Term::Constant(c) => Err(c.clone()),
        })
        .collect();
    (head.predicate.clone(), pattern)
}

fn fresh_name(base: &str, taken: &BTreeSet<String>) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    let mut n = 2usize;
    loop {
        let candidate = format!("{base}_{n}");
        if !taken.contains(&candidate) {
            return candidate;
        }
        n += 1;
    }
}

/// Merges rules that share a head atom (up to renaming of head variables,
/// matched positionally) into a single biconditional
/// `head <-> body_1 | body_2 | ... | body_n`.  Heads with a single rule
/// become `head <-> body`.  Rule order follows the first occurrence of each
/// head; body order follows the input.
pub fn clark_grouped_completion(kb: &KnowledgeBase) -> Result<KnowledgeBase, LogicError> {
    let mut groups: Vec<((String, Vec<Result<usize, String>>), Vec<RuleParts>)> = Vec::new();
    for rule in kb.rules() {
        let parts = split_rule(rule)?;
        let key = head_key(&parts.head);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, entries)) => entries.push(parts),
            None => groups.push((key, alloc::vec![parts])),
        }
    }

    let mut rules = Vec::with_capacity(groups.len());
    for (_, entries) in groups {
        let rep = &entries[0];
        let mut taken: BTreeSet<String> = rep.vars.iter().cloned().collect();
        let mut merged_vars = rep.vars.clone();
        let mut bodies = Vec::with_capacity(entries.len());
        bodies.push(rep.body.clone());

        for entry in &entries[1..] {
            // Positional unification of head arguments, then fresh names for
            // body-only variables.
            let mut rename: BTreeMap<String, String> = BTreeMap::new();
            for (rep_arg, arg) in rep.head.args.iter().zip(entry.head.args.iter()) {
                if let (Term::Variable(to), Term::Variable(from)) = (rep_arg, arg) {
                    rename.insert(from.clone(), to.clone());
                }
            }
            for v in &entry.vars {
                if !rename.contains_key(v) {
                    let fresh = fresh_name(v, &taken);
                    taken.insert(fresh.clone());
                    merged_vars.push(fresh.clone());
                    rename.insert(v.clone(), fresh);
                }
            }
            bodies.push(entry.body.rename_variables(&rename));
        }

        let mut body_iter = bodies.into_iter();
        let mut disjunction = body_iter.next().expect("group is non-empty");
        for b in body_iter {
            disjunction = Formula::or(disjunction, b);
        }

        let prefix: Vec<(Quant, String)> = merged_vars
            .into_iter()
            .map(|v| (Quant::Forall, v))
            .collect();
        rules.push(Formula::with_prefix(
            &prefix,
            Formula::iff(Formula::Atom(rep.head.clone()), disjunction),
        ));
    }
    KnowledgeBase::new(rules)
}

/// Keeps `ceil(completeness * |rules|)` rules, chosen uniformly without
/// replacement and returned in their original order.  Deterministic per
/// seed; `completeness = 1` returns the input unchanged.
///
/// # Panics
///
/// Panics unless `0 < completeness <= 1`.
pub fn sample_kb(kb: &KnowledgeBase, completeness: f64, seed: u64) -> KnowledgeBase {
    assert!(
        completeness > 0.0 && completeness <= 1.0,
        "completeness must lie in (0, 1], got {completeness}"
    );
    let n = kb.len();
    let keep = libm::ceil(completeness * n as f64) as usize;
    if keep >= n {
        return kb.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    chosen.sort_unstable();
    let rules = chosen
        .into_iter()
        .map(|i| kb.rules()[i].clone())
        .collect();
    KnowledgeBase::new(rules).expect("subset of a valid knowledge base is valid")
}
