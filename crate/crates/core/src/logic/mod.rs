//! Propositional expressions: AST, text format, truth oracle and the random
//! DNF generator.

mod ast;
mod generate;
mod parse;

use std::io::{BufRead, Write};

use thiserror::Error;

pub use ast::{eval_truth, Assignment, Expr, LabeledExpr, VarId};
pub use generate::{generate_dataset, shuffle_operands, split_dataset, GenConfig};
pub use parse::{parse, parse_bound};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogicError {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("variable v{var} out of range for vocabulary of {vocab}")]
    VarOutOfRange { var: u32, vocab: usize },
    #[error("no truth value for variable v{0}")]
    MissingAssignment(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Writes `<expression>\t<0|1>\n` per example.
pub fn write_expressions<W: Write>(mut out: W, data: &[LabeledExpr]) -> std::io::Result<()> {
    for d in data {
        writeln!(out, "{}\t{}", d.expr.render(), u8::from(d.label))?;
    }
    Ok(())
}

/// Reads an expression file. Blank lines and lines starting with `#` are skipped.
pub fn read_expressions<R: BufRead>(input: R) -> Result<Vec<LabeledExpr>, ReadError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fmt_err = |msg: String| LogicError::Format { line: lineno, msg };
        let (text, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| fmt_err("expected '<expression>\\t<0|1>'".into()))?;
        let label = match label.trim() {
            "0" => false,
            "1" => true,
            other => return Err(fmt_err(format!("label must be 0 or 1, got {other:?}")).into()),
        };
        let expr = parse(text).map_err(|e| fmt_err(e.to_string()))?;
        out.push(LabeledExpr { expr, label });
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Logic(#[from] LogicError),
}
