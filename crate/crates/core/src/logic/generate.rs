use serde::{Deserialize, Serialize};

use super::ast::{eval_truth, Assignment, Expr, LabeledExpr, VarId};
use super::LogicError;
use crate::rng::{Rng, Stream};

/// Settings for the random DNF generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Number of variables.
    pub n: usize,
    /// Number of expressions.
    pub m: usize,
    /// Inclusive clause-count range per expression.
    pub clauses: (usize, usize),
    /// Inclusive literal-count range per clause.
    pub literals: (usize, usize),
    pub seed: u64,
}

impl GenConfig {
    pub fn new(n: usize, m: usize, seed: u64) -> Self {
        GenConfig {
            n,
            m,
            clauses: (1, 5),
            literals: (1, 5),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LogicError> {
        let bad = |msg: String| Err(LogicError::Config(msg));
        if self.n == 0 || self.m == 0 {
            return bad(format!("n and m must be >= 1 (n={}, m={})", self.n, self.m));
        }
        for (name, (lo, hi)) in [("clauses", self.clauses), ("literals", self.literals)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if self.literals.1 > self.n {
            return bad(format!(
                "literals-per-clause upper bound {} exceeds variable count {}",
                self.literals.1, self.n
            ));
        }
        Ok(())
    }
}

/// Draws a hidden assignment and `m` DNF expressions labeled by it.
///
/// The assignment is returned for diagnostics only.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Assignment, Vec<LabeledExpr>), LogicError> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed, Stream::DataGen);
    let truth = Assignment::new((0..cfg.n).map(|_| rng.coin()).collect());
    let mut data = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let n_clauses = rng.range_inclusive(cfg.clauses.0, cfg.clauses.1);
        let clauses = (0..n_clauses)
            .map(|_| {
                let k = rng.range_inclusive(cfg.literals.0, cfg.literals.1);
                let vars = rng.sample_distinct(cfg.n, k);
                let lits = vars
                    .into_iter()
                    .map(|v| Expr::literal(VarId(v as u32), rng.coin()))
                    .collect();
                Expr::and(lits)
            })
            .collect();
        let expr = Expr::or(clauses);
        let label = eval_truth(&expr, &truth)?;
        data.push(LabeledExpr { expr, label });
    }
    Ok((truth, data))
}

/// Independently permutes the operands of every `And`/`Or` node.
pub fn shuffle_operands(expr: &Expr, rng: &mut Rng) -> Expr {
    match expr {
        Expr::Var(_) => expr.clone(),
        Expr::Not(e) => Expr::not(shuffle_operands(e, rng)),
        Expr::And(xs) | Expr::Or(xs) => {
            let mut ys: Vec<Expr> = xs.iter().map(|x| shuffle_operands(x, rng)).collect();
            rng.shuffle(&mut ys);
            if matches!(expr, Expr::And(_)) {
                Expr::And(ys)
            } else {
                Expr::Or(ys)
            }
        }
    }
}

/// Seeded shuffle followed by contiguous cuts. Sizes are rounded for the first
/// two parts; the remainder goes to the last.
pub fn split_dataset<T: Clone>(
    data: &[T],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), LogicError> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(LogicError::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed, Stream::Split).shuffle(&mut order);
    let n_train = ((n as f64) * a).round() as usize;
    let n_valid = (((n as f64) * b).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_valid]),
        pick(&order[n_train + n_valid..]),
    ))
}
