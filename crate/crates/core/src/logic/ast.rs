use std::fmt;

use serde::{Deserialize, Serialize};

use super::LogicError;

/// Dense, 0-based variable index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A propositional expression. `And`/`Or` hold flat operand lists of length
/// at least two; the binary fold order is chosen when a graph is built.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Var(VarId),
    Not(Box<Expr>),
    And(Vec<Expr>),
    Or(Vec<Expr>),
}

impl Expr {
    pub fn var(i: u32) -> Expr {
        Expr::Var(VarId(i))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    /// Conjunction; a single operand is returned unwrapped.
    pub fn and(mut items: Vec<Expr>) -> Expr {
        assert!(!items.is_empty(), "empty conjunction");
        if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Expr::And(items)
        }
    }

    /// Disjunction; a single operand is returned unwrapped.
    pub fn or(mut items: Vec<Expr>) -> Expr {
        assert!(!items.is_empty(), "empty disjunction");
        if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Expr::Or(items)
        }
    }

    pub fn literal(v: VarId, positive: bool) -> Expr {
        if positive {
            Expr::Var(v)
        } else {
            Expr::not(Expr::Var(v))
        }
    }

    /// Every variable occurrence, left to right.
    pub fn variables(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        self.walk_vars(&mut out);
        out
    }

    fn walk_vars(&self, out: &mut Vec<VarId>) {
        match self {
            Expr::Var(v) => out.push(*v),
            Expr::Not(e) => e.walk_vars(out),
            Expr::And(xs) | Expr::Or(xs) => xs.iter().for_each(|x| x.walk_vars(out)),
        }
    }

    pub fn max_var(&self) -> Option<VarId> {
        self.variables().into_iter().max()
    }

    /// Fails if any variable index is `>= vocab`.
    pub fn check_vocab(&self, vocab: usize) -> Result<(), LogicError> {
        match self.variables().into_iter().find(|v| v.index() >= vocab) {
            Some(v) => Err(LogicError::VarOutOfRange { var: v.0, vocab }),
            None => Ok(()),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) => 0,
            Expr::Not(e) => 1 + e.depth(),
            Expr::And(xs) | Expr::Or(xs) => 1 + xs.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    /// Leaves plus one per binary/unary module application once n-ary nodes
    /// are folded into binary ones.
    pub fn module_applications(&self) -> usize {
        match self {
            Expr::Var(_) => 0,
            Expr::Not(e) => 1 + e.module_applications(),
            Expr::And(xs) | Expr::Or(xs) => {
                xs.len() - 1 + xs.iter().map(Expr::module_applications).sum::<usize>()
            }
        }
    }

    /// True for a literal: a variable or a negated variable.
    pub fn is_literal(&self) -> bool {
        match self {
            Expr::Var(_) => true,
            Expr::Not(e) => matches!(**e, Expr::Var(_)),
            _ => false,
        }
    }

    /// Or-of-And-of-literals shape, allowing the degenerate single-clause and
    /// single-literal cases.
    pub fn is_dnf(&self) -> bool {
        let clause_ok = |c: &Expr| match c {
            Expr::And(ls) => ls.iter().all(Expr::is_literal),
            other => other.is_literal(),
        };
        match self {
            Expr::Or(cs) => cs.iter().all(clause_ok),
            other => clause_ok(other),
        }
    }

    /// Canonical text form; see the module docs for the grammar.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.render_into(&mut s);
        s
    }

    fn render_into(&self, out: &mut String) {
        use std::fmt::Write;
        match self {
            Expr::Var(v) => {
                let _ = write!(out, "v{}", v.0);
            }
            Expr::Not(e) => {
                out.push('~');
                e.render_operand(out);
            }
            Expr::And(xs) => render_join(xs, " & ", out),
            Expr::Or(xs) => render_join(xs, " | ", out),
        }
    }

    fn render_operand(&self, out: &mut String) {
        match self {
            Expr::And(_) | Expr::Or(_) => {
                out.push('(');
                self.render_into(out);
                out.push(')');
            }
            _ => self.render_into(out),
        }
    }
}

fn render_join(xs: &[Expr], sep: &str, out: &mut String) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push_str(sep);
        }
        x.render_operand(out);
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Truth value per variable, total over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub values: Vec<bool>,
}

impl Assignment {
    pub fn new(values: Vec<bool>) -> Self {
        Assignment { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, v: VarId) -> Option<bool> {
        self.values.get(v.index()).copied()
    }
}

/// Standard boolean semantics.
pub fn eval_truth(expr: &Expr, a: &Assignment) -> Result<bool, LogicError> {
    Ok(match expr {
        Expr::Var(v) => a.get(*v).ok_or(LogicError::MissingAssignment(v.0))?,
        Expr::Not(e) => !eval_truth(e, a)?,
        Expr::And(xs) => {
            let mut acc = true;
            for x in xs {
                acc &= eval_truth(x, a)?;
            }
            acc
        }
        Expr::Or(xs) => {
            let mut acc = false;
            for x in xs {
                acc |= eval_truth(x, a)?;
            }
            acc
        }
    })
}

/// An expression with its truth value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExpr {
    pub expr: Expr,
    pub label: bool,
}
