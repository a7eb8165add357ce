//! Parser for the rule DSL.
//!
//! Grammar, loosest binding first (`->` and `<->` associate to the right):
//!
//! ```text
//! rule    := expr
//! expr    := ("forall" | "exists") vars ":" expr | iff
//! iff     := imp ("<->" iff)?
//! imp     := or ("->" imp)?
//! or      := and ("|" and)*
//! and     := unary ("&" unary)*
//! unary   := "!" unary | primary
//! primary := "(" expr ")" | atom
//! atom    := IDENT ("(" IDENT ("," IDENT)* ")")?
//! vars    := IDENT ("," IDENT)*
//! ```
//!
//! Identifiers are `[A-Za-z_][A-Za-z0-9_]*`.  An identifier in argument
//! position denotes the variable bound by the nearest enclosing quantifier
//! of that name, and a constant otherwise.  A quantifier anywhere other
//! than the start of an expression must be parenthesised.
//!
//! Rule files hold one rule per line; blank lines and `#` comments are
//! skipped.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Atom, Formula, KnowledgeBase, LogicError, Term};

/// Parse failure with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("arity error at {line}:{col}: predicate `{predicate}` used with arity {found}, expected {expected}")]
    Arity {
        line: usize,
        col: usize,
        predicate: String,
        expected: usize,
        found: usize,
    },
}

impl ParseError {
    fn syntax(line: usize, col: usize, message: impl Into<String>) -> Self {
        ParseError::Syntax {
            line,
            col,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Forall,
    Exists,
    LParen,
    RParen,
    Comma,
    Colon,
    Bang,
    Amp,
    Pipe,
    Arrow,
    DArrow,
    Eof,
}

impl Tok {
    fn describe(&self) -> &'static str {
        match self {
            Tok::Ident(_) => "identifier",
            Tok::Forall => "`forall`",
            Tok::Exists => "`exists`",
            Tok::LParen => "`(`",
            Tok::RParen => "`)`",
            Tok::Comma => "`,`",
            Tok::Colon => "`:`",
            Tok::Bang => "`!`",
            Tok::Amp => "`&`",
            Tok::Pipe => "`|`",
            Tok::Arrow => "`->`",
            Tok::DArrow => "`<->`",
            Tok::Eof => "end of rule",
        }
    }
}

struct Lexed {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str, first_line: usize) -> Result<Vec<Lexed>, ParseError> {
    let mut out = Vec::new();
    let mut line = first_line;
    let mut col = 1usize;
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        let mut bump = |chars: &mut core::iter::Peekable<core::str::Chars>| {
            chars.next();
            col += 1;
        };
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => bump(&mut chars),
            '#' => {
                // comment to end of line
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump(&mut chars);
                }
            }
            '(' => {
                bump(&mut chars);
                out.push(Lexed { tok: Tok::LParen, line: tline, col: tcol });
            }
            ')' => {
                bump(&mut chars);
                out.push(Lexed { tok: Tok::RParen, line: tline, col: tcol });
            }
            ',' => {
                bump(&mut chars);
                out.push(Lexed { tok: Tok::Comma, line: tline, col: tcol });
            }
            ':' => {
                bump(&mut chars);
                out.push(Lexed { tok: Tok::Colon, line: tline, col: tcol });
            }
            '!' => {
                bump(&mut chars);
                out.push(Lexed { tok: Tok::Bang, line: tline, col: tcol });
            }
            '&' => {
                bump(&mut chars);
                out.push(Lexed { tok: Tok::Amp, line: tline, col: tcol });
            }
            '|' => {
                bump(&mut chars);
                out.push(Lexed { tok: Tok::Pipe, line: tline, col: tcol });
            }
            '-' => {
                bump(&mut chars);
                match chars.peek() {
                    Some('>') => {
                        bump(&mut chars);
                        out.push(Lexed { tok: Tok::Arrow, line: tline, col: tcol });
                    }
                    _ => return Err(ParseError::syntax(tline, tcol, "expected `->`")),
                }
            }
            '<' => {
                bump(&mut chars);
                if chars.peek() == Some(&'-') {
                    bump(&mut chars);
                    if chars.peek() == Some(&'>') {
                        bump(&mut chars);
                        out.push(Lexed { tok: Tok::DArrow, line: tline, col: tcol });
                        continue;
                    }
                }
                return Err(ParseError::syntax(tline, tcol, "expected `<->`"));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut ident = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        ident.push(c);
                        bump(&mut chars);
                    } else {
                        break;
                    }
                }
                let tok = match ident.as_str() {
                    "forall" => Tok::Forall,
                    "exists" => Tok::Exists,
                    _ => Tok::Ident(ident),
                };
                out.push(Lexed { tok, line: tline, col: tcol });
            }
            c => {
                return Err(ParseError::syntax(
                    tline,
                    tcol,
                    format!("unexpected character `{c}`"),
                ));
            }
        }
    }
    out.push(Lexed { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Lexed>,
    pos: usize,
    scope: Vec<String>,
    arities: &'a mut BTreeMap<String, usize>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn here(&self) -> (usize, usize) {
        (self.toks[self.pos].line, self.toks[self.pos].col)
    }

    fn advance(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.advance();
            Ok(())
        } else {
            let (line, col) = self.here();
            Err(ParseError::syntax(
                line,
                col,
                format!("expected {}, found {}", want.describe(), self.peek().describe()),
            ))
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        let (line, col) = self.here();
        match self.advance() {
            Tok::Ident(s) => Ok(s),
            other => Err(ParseError::syntax(
                line,
                col,
                format!("expected identifier, found {}", other.describe()),
            )),
        }
    }

    fn parse_expr(&mut self) -> Result<Formula, ParseError> {
        match self.peek() {
            Tok::Forall | Tok::Exists => self.parse_quantified(),
            _ => self.parse_iff(),
        }
    }

    fn parse_quantified(&mut self) -> Result<Formula, ParseError> {
        let existential = matches!(self.peek(), Tok::Exists);
        self.advance();
        let mut vars = Vec::new();
        loop {
            let (line, col) = self.here();
            let v = self.expect_ident()?;
            if self.scope.contains(&v) || vars.contains(&v) {
                return Err(ParseError::syntax(
                    line,
                    col,
                    format!("variable `{v}` is already bound"),
                ));
            }
            vars.push(v);
            if *self.peek() == Tok::Comma {
                self.advance();
            } else {
                break;
            }
        }
        self.expect(Tok::Colon)?;
        let depth = self.scope.len();
        self.scope.extend(vars.iter().cloned());
        let body = self.parse_expr()?;
        self.scope.truncate(depth);
        let mut f = body;
        for v in vars.into_iter().rev() {
            f = if existential {
                Formula::Exists(v, alloc::boxed::Box::new(f))
            } else {
                Formula::Forall(v, alloc::boxed::Box::new(f))
            };
        }
        Ok(f)
    }

    fn parse_iff(&mut self) -> Result<Formula, ParseError> {
        let lhs = self.parse_imp()?;
        if *self.peek() == Tok::DArrow {
            self.advance();
            let rhs = self.parse_iff()?;
            Ok(Formula::iff(lhs, rhs))
        } else {
            Ok(lhs)
        }
    }

    fn parse_imp(&mut self) -> Result<Formula, ParseError> {
        let lhs = self.parse_or()?;
        if *self.peek() == Tok::Arrow {
            self.advance();
            let rhs = self.parse_imp()?;
            Ok(Formula::implies(lhs, rhs))
        } else {
            Ok(lhs)
        }
    }

    fn parse_or(&mut self) -> Result<Formula, ParseError> {
        let mut f = self.parse_and()?;
        while *self.peek() == Tok::Pipe {
            self.advance();
            f = Formula::or(f, self.parse_and()?);
        }
        Ok(f)
    }

    fn parse_and(&mut self) -> Result<Formula, ParseError> {
        let mut f = self.parse_unary()?;
        while *self.peek() == Tok::Amp {
            self.advance();
            f = Formula::and(f, self.parse_unary()?);
        }
        Ok(f)
    }

    fn parse_unary(&mut self) -> Result<Formula, ParseError> {
        if *self.peek() == Tok::Bang {
            self.advance();
            Ok(Formula::not(self.parse_unary()?))
        } else {
            self.parse_primary()
        }
    }

    fn parse_primary(&mut self) -> Result<Formula, ParseError> {
        let (line, col) = self.here();
        match self.peek() {
            Tok::LParen => {
                self.advance();
                let f = self.parse_expr()?;
                self.expect(Tok::RParen)?;
                Ok(f)
            }
            Tok::Forall | Tok::Exists => Err(ParseError::syntax(
                line,
                col,
                "quantifier must start the expression or be parenthesised",
            )),
            Tok::Ident(_) => self.parse_atom(),
            other => Err(ParseError::syntax(
                line,
                col,
                format!("expected a formula, found {}", other.describe()),
            )),
        }
    }

    fn parse_atom(&mut self) -> Result<Formula, ParseError> {
        let (line, col) = self.here();
        let predicate = self.expect_ident()?;
        let mut args = Vec::new();
        if *self.peek() == Tok::LParen {
            self.advance();
            if *self.peek() != Tok::RParen {
                loop {
                    let name = self.expect_ident()?;
                    if self.scope.contains(&name) {
                        args.push(Term::Variable(name));
                    } else {
                        args.push(Term::Constant(name));
                    }
                    if *self.peek() == Tok::Comma {
                        self.advance();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen)?;
        }
        let arity = args.len();
        match self.arities.get(&predicate) {
            Some(&expected) if expected != arity => {
                return Err(ParseError::Arity {
                    line,
                    col,
                    predicate,
                    expected,
                    found: arity,
                });
            }
            Some(_) => {}
            None => {
                self.arities.insert(predicate.clone(), arity);
            }
        }
        Ok(Formula::Atom(Atom { predicate, args }))
    }
}

fn parse_rule_at(
    text: &str,
    first_line: usize,
    arities: &mut BTreeMap<String, usize>,
) -> Result<Formula, ParseError> {
    let toks = lex(text, first_line)?;
    let mut parser = Parser {
        toks,
        pos: 0,
        scope: Vec::new(),
        arities,
    };
    if *parser.peek() == Tok::Eof {
        let (line, col) = parser.here();
        return Err(ParseError::syntax(line, col, "empty rule"));
    }
    let f = parser.parse_expr()?;
    if *parser.peek() != Tok::Eof {
        let (line, col) = parser.here();
        return Err(ParseError::syntax(
            line,
            col,
            format!("unexpected {} after rule", parser.peek().describe()),
        ));
    }
    Ok(f)
}

/// Parses a single rule.  Unquantified identifiers in argument position are
/// constants, so the result is always closed.
pub fn parse_rule(text: &str) -> Result<Formula, ParseError> {
    let mut arities = BTreeMap::new();
    parse_rule_at(text, 1, &mut arities)
}

/// Parses a rule file: one rule per line, `#` comments, blank lines skipped.
/// Arity consistency is enforced across the whole file.
pub fn parse_kb(text: &str) -> Result<KnowledgeBase, ParseError> {
    let mut arities = BTreeMap::new();
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(j) => &raw[..j],
            None => raw,
        };
        if line.trim().is_empty() {
            continue;
        }
        rules.push(parse_rule_at(line, i + 1, &mut arities)?);
    }
    KnowledgeBase::new(rules).map_err(|e| match e {
        LogicError::Arity {
            predicate,
            expected,
            found,
        } => ParseError::Arity {
            line: 0,
            col: 0,
            predicate,
            expected,
            found,
        },
        other => ParseError::syntax(0, 0, other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::{vec, format};

    #[test]
    fn parses_case_study_rule() {
        let f = parse_rule("forall x: Blue(x) -> Circle(x)").unwrap();
        let x = || Term::Variable("x".to_string());
        let want = Formula::forall(
            "x",
            Formula::implies(
                Formula::Atom(Atom::new("Blue", vec![x()]).unwrap()),
                Formula::Atom(Atom::new("Circle", vec![x()]).unwrap()),
            ),
        )
        .unwrap();
        assert_eq!(f, want);
    }

    #[test]
    fn parses_addition_rule_shape() {
        let f =
            parse_rule("forall x1,x2,x3,x4: D1_5(x1) & D2_2(x2) -> D3_0(x3) & D4_7(x4)").unwrap();
        let (prefix, matrix) = f.quantifier_prefix();
        assert_eq!(prefix.len(), 4);
        assert!(matches!(matrix, Formula::Implies(p, q)
            if matches!(**p, Formula::And(..)) && matches!(**q, Formula::And(..))));
    }

    #[test]
    fn truncated_rule_is_a_syntax_error() {
        let err = parse_rule("forall x: Blue(x) ->").unwrap_err();
        match err {
            ParseError::Syntax { line, col, .. } => {
                assert_eq!(line, 1);
                assert_eq!(col, 21);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn arity_mismatch_is_reported() {
        let err = parse_rule("P(a) & P(a,b)").unwrap_err();
        assert!(matches!(
            err,
            ParseError::Arity { expected: 1, found: 2, .. }
        ));
    }

    #[test]
    fn unbound_argument_is_a_constant() {
        let f = parse_rule("P(c)").unwrap();
        assert_eq!(
            f,
            Formula::Atom(Atom::new("P", vec![Term::constant("c").unwrap()]).unwrap())
        );
        assert!(f.free_variables().is_empty());
    }

    #[test]
    fn precedence_matches_grammar() {
        // `!` > `&` > `|` > `->` (right) > `<->`
        let f = parse_rule("!a & b | c -> d <-> e").unwrap();
        let a = |p: &str| Formula::Atom(Atom::prop(p).unwrap());
        let want = Formula::iff(
            Formula::implies(
                Formula::or(Formula::and(Formula::not(a("a")), a("b")), a("c")),
                a("d"),
            ),
            a("e"),
        );
        assert_eq!(f, want);
    }

    #[test]
    fn kb_file_parses_with_comments() {
        let text = "# colours\nforall x: Blue(x) -> Circle(x)\n\nforall x: Green(x) -> Square(x) # inline\n";
        let kb = parse_kb(text).unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.signatures().get("Blue"), Some(&1));
    }

    #[test]
    fn kb_error_carries_file_line() {
        let text = "forall x: Blue(x) -> Circle(x)\nforall x: Blue(x) ->\n";
        let err = parse_kb(text).unwrap_err();
        assert!(matches!(err, ParseError::Syntax { line: 2, .. }));
    }

    #[test]
    fn display_round_trips_spec_rules() {
        for text in [
            "forall x: Blue(x) -> Circle(x)",
            "forall x1,x2,x3,x4: D1_5(x1) & D2_2(x2) -> D3_0(x3) & D4_7(x4)",
            "p & q <-> !(p -> !q)",
            "(forall x: P(x)) -> q",
            "exists y: P(y) | Q(y,c)",
        ] {
            let f = parse_rule(text).unwrap();
            let printed = format!("{f}");
            assert_eq!(parse_rule(&printed).unwrap(), f, "round-trip of `{text}` via `{printed}`");
        }
    }
}
