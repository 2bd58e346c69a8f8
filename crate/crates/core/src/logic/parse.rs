//! Recursive-descent parser for the expression text format.
//!
//! ```text
//! expr   := term ('|' term)*
//! term   := factor ('&' factor)*
//! factor := '~' factor | '(' expr ')' | 'v' digits
//! ```
//!
//! `¬`, `∧` and `∨` are accepted as aliases of `~`, `&` and `|`. A chain of the
//! same operator flattens into one n-ary node; parentheses always nest.

use super::ast::{Expr, VarId};
use super::LogicError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Not,
    And,
    Or,
    LParen,
    RParen,
    Var(u32),
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    peeked: Option<(Tok, usize)>,
}

impl<'a> Parser<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> LogicError {
        LogicError::Syntax {
            offset,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        let trimmed = rest.trim_start();
        self.pos += rest.len() - trimmed.len();
    }

    fn lex(&mut self) -> Result<(Tok, usize), LogicError> {
        self.skip_ws();
        let start = self.pos;
        let Some(c) = self.src[start..].chars().next() else {
            return Ok((Tok::End, start));
        };
        let tok = match c {
            '~' | '¬' | '!' => Tok::Not,
            '&' | '∧' => Tok::And,
            '|' | '∨' => Tok::Or,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            'v' => {
                let digits: &str = {
                    let rest = &self.src[start + 1..];
                    let n = rest.bytes().take_while(u8::is_ascii_digit).count();
                    &rest[..n]
                };
                if digits.is_empty() {
                    return Err(self.err(start + 1, "expected digits after 'v'"));
                }
                let idx = digits
                    .parse::<u32>()
                    .map_err(|_| self.err(start + 1, "variable index too large"))?;
                self.pos = start + 1 + digits.len();
                return Ok((Tok::Var(idx), start));
            }
            other => return Err(self.err(start, format!("unexpected character {other:?}"))),
        };
        self.pos = start + c.len_utf8();
        Ok((tok, start))
    }

    fn peek(&mut self) -> Result<(Tok, usize), LogicError> {
        if self.peeked.is_none() {
            self.peeked = Some(self.lex()?);
        }
        Ok(self.peeked.unwrap())
    }

    fn next(&mut self) -> Result<(Tok, usize), LogicError> {
        let t = self.peek()?;
        self.peeked = None;
        Ok(t)
    }

    fn expr(&mut self) -> Result<Expr, LogicError> {
        let mut items = vec![self.term()?];
        while self.peek()?.0 == Tok::Or {
            self.next()?;
            items.push(self.term()?);
        }
        Ok(Expr::or(items))
    }

    fn term(&mut self) -> Result<Expr, LogicError> {
        let mut items = vec![self.factor()?];
        while self.peek()?.0 == Tok::And {
            self.next()?;
            items.push(self.factor()?);
        }
        Ok(Expr::and(items))
    }

    fn factor(&mut self) -> Result<Expr, LogicError> {
        let (tok, at) = self.next()?;
        match tok {
            Tok::Not => Ok(Expr::not(self.factor()?)),
            Tok::LParen => {
                let inner = self.expr()?;
                match self.next()? {
                    (Tok::RParen, _) => Ok(inner),
                    (_, at) => Err(self.err(at, "expected ')'")),
                }
            }
            Tok::Var(i) => Ok(Expr::Var(VarId(i))),
            Tok::End => Err(self.err(at, "unexpected end of input")),
            _ => Err(self.err(at, "expected a variable, '~' or '('")),
        }
    }
}

/// Parses one expression. Offsets in errors are byte offsets into `text`.
pub fn parse(text: &str) -> Result<Expr, LogicError> {
    let mut p = Parser {
        src: text,
        pos: 0,
        peeked: None,
    };
    let e = p.expr()?;
    match p.next()? {
        (Tok::End, _) => Ok(e),
        (_, at) => Err(p.err(at, "trailing input")),
    }
}

/// Parses and checks every variable against a vocabulary of size `vocab`.
pub fn parse_bound(text: &str, vocab: usize) -> Result<Expr, LogicError> {
    let e = parse(text)?;
    e.check_vocab(vocab)?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conjunction_chain_flattens() {
        let e = parse("v43 & v21 & ~v53").unwrap();
        assert_eq!(
            e,
            Expr::And(vec![Expr::var(43), Expr::var(21), Expr::not(Expr::var(53))])
        );
    }

    #[test]
    fn precedence_and_parens() {
        let e = parse("(~v80 & v56 & v71) | v45").unwrap();
        assert_eq!(
            e,
            Expr::Or(vec![
                Expr::And(vec![Expr::not(Expr::var(80)), Expr::var(56), Expr::var(71)]),
                Expr::var(45)
            ])
        );
        // & binds tighter than |
        let e = parse("v1 | v2 & v3").unwrap();
        assert_eq!(
            e,
            Expr::Or(vec![Expr::var(1), Expr::And(vec![Expr::var(2), Expr::var(3)])])
        );
    }

    #[test]
    fn dangling_operator_reports_offset() {
        match parse("v1 &") {
            Err(LogicError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unicode_aliases() {
        assert_eq!(parse("¬v1 ∧ v2 ∨ v3").unwrap(), parse("~v1 & v2 | v3").unwrap());
    }

    #[test]
    fn misc_errors() {
        assert!(matches!(parse(""), Err(LogicError::Syntax { offset: 0, .. })));
        assert!(matches!(parse("(v1"), Err(LogicError::Syntax { offset: 3, .. })));
        assert!(matches!(parse("v1 v2"), Err(LogicError::Syntax { offset: 3, .. })));
        assert!(matches!(parse("vx"), Err(LogicError::Syntax { offset: 1, .. })));
        assert!(matches!(parse("v1 # v2"), Err(LogicError::Syntax { offset: 3, .. })));
    }

    #[test]
    fn out_of_range_at_bind_time() {
        assert!(parse("v120").is_ok());
        assert_eq!(
            parse_bound("v1 | v120", 100),
            Err(LogicError::VarOutOfRange {
                var: 120,
                vocab: 100
            })
        );
    }

    #[test]
    fn nested_parens_stay_nested() {
        let e = parse("(v1 & v2) & v3").unwrap();
        assert_eq!(
            e,
            Expr::And(vec![Expr::And(vec![Expr::var(1), Expr::var(2)]), Expr::var(3)])
        );
        assert_eq!(parse(&e.render()).unwrap(), e);
    }
}
