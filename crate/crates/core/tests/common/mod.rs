//! Checks shared by the integration tests and the acceptance report. Each
//! returns `Err` with a human-readable reason instead of panicking.

#![allow(dead_code)]

use std::collections::HashSet;

use nlogic_core::autodiff::gradcheck::{numeric_gradient, relative_error};
use nlogic_core::autodiff::{NodeId, Tape};
use nlogic_core::logic::{
    eval_truth, generate_dataset, parse, shuffle_operands, split_dataset, Assignment, Expr, GenConfig, LabeledExpr,
    VarId,
};
use nlogic_core::ndarray::{array, Array2};
use nlogic_core::nln::{Forward, NlnConfig, NlnModel};
use nlogic_core::rec::{
    build_expressions, split_user, synth, to_expr_node, Interaction, ItemVars, RecDataset, SplitTag, FORCED_TRAIN,
};
use nlogic_core::regularizers::{logic_reg, report_for, RegWeights};
use nlogic_core::rng::{Rng, Stream};
use nlogic_core::training::{EpochStats, NlnPointwise, Objective, Session, TrainConfig, TrainRngs, Trainable};

pub type Check = Result<(), String>;

pub const GRAD_TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.uniform() * 2.0 - 1.0)
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn off_zero(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x = 0.1 + 0.9 * rng.uniform();
        if rng.coin() {
            x
        } else {
            -x
        }
    })
}

/// Worst relative error of one primitive over all of its inputs. The output is
/// reduced to a scalar with `sum(y) + ‖y‖²` so upstream gradients vary.
pub fn primitive_error<F>(inputs: &[Array2<f64>], build: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let loss = |xs: &[Array2<f64>], tape: &mut Tape| -> (NodeId, Vec<NodeId>) {
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = build(tape, &ids);
        let s = tape.sum(y);
        let q = tape.l2_norm_sq(y);
        let both = tape.stack(&[s, q]).unwrap();
        (tape.sum(both), ids)
    };
    let mut tape = Tape::new();
    let (root, ids) = loss(inputs, &mut tape);
    tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = tape.grad(*id);
        let mut f = |x: &Array2<f64>| {
            let mut xs = inputs.to_vec();
            xs[k] = x.clone();
            let mut t = Tape::new();
            let (r, _) = loss(&xs, &mut t);
            t.scalar(r)
        };
        let numeric = numeric_gradient(&inputs[k], 1e-6, &mut f);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Finite-difference error of every tape primitive, by name.
pub fn primitive_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(11, Stream::Init);
    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    let w = random(2, 4, &mut rng);
    let bias = random(1, 2, &mut rng);
    let row = random(1, 4, &mut rng);
    let probs = Array2::from_shape_fn((4, 1), |_| 0.05 + 0.9 * rng.uniform());
    let mut out = vec![
        ("add", primitive_error(&[a.clone(), b.clone()], |t, x| t.add(x[0], x[1]).unwrap())),
        ("sub", primitive_error(&[a.clone(), b.clone()], |t, x| t.sub(x[0], x[1]).unwrap())),
        ("add_row", primitive_error(&[a.clone(), row.clone()], |t, x| t.add_row(x[0], x[1]).unwrap())),
        ("scale_shift", primitive_error(&[a.clone()], |t, x| t.scale_shift(x[0], -1.5, 0.25))),
        ("scale", primitive_error(&[a.clone()], |t, x| t.scale(x[0], 3.0))),
        ("affine", primitive_error(&[w.clone(), a.clone(), bias], |t, x| t.affine(x[0], x[1], x[2]).unwrap())),
        ("matmul_t", primitive_error(&[a.clone(), w], |t, x| t.matmul_t(x[0], x[1]).unwrap())),
        ("concat", primitive_error(&[a.clone(), b.clone()], |t, x| t.concat(x[0], x[1]).unwrap())),
        ("slice_cols", primitive_error(&[a.clone()], |t, x| t.slice_cols(x[0], 1, 3).unwrap())),
        (
            "gather",
            primitive_error(&[a.clone(), b.clone()], |t, x| {
                t.gather(&[x[0], x[1]], &[(0, 2), (1, 0), (0, 2), (1, 1)]).unwrap()
            }),
        ),
        ("rows", primitive_error(&[a.clone()], |t, x| t.rows(x[0], &[2, 0, 2]).unwrap())),
        ("stack", primitive_error(&[a.clone(), row], |t, x| t.stack(&[x[0], x[1]]).unwrap())),
        ("relu", primitive_error(&[off_zero(3, 4, &mut rng)], |t, x| t.relu(x[0]))),
        (
            "dropout",
            primitive_error(&[a.clone()], |t, x| t.dropout(x[0], 0.3, true, &mut Rng::new(5, Stream::Dropout))),
        ),
        ("sigmoid", primitive_error(&[a.clone()], |t, x| t.sigmoid(x[0]))),
        ("softplus", primitive_error(&[a.clone()], |t, x| t.softplus(x[0]))),
        ("cosine", primitive_error(&[a.clone(), b.clone()], |t, x| t.cosine(x[0], x[1]).unwrap())),
        (
            "cosine_guarded",
            primitive_error(&[a.clone(), b.clone()], |t, x| t.cosine_guarded(x[0], x[1]).unwrap().0),
        ),
        ("row_dot", primitive_error(&[a.clone(), b], |t, x| t.row_dot(x[0], x[1]).unwrap())),
        ("l2_norm_sq", primitive_error(&[a.clone()], |t, x| t.l2_norm_sq(x[0]))),
        ("sum", primitive_error(&[a.clone()], |t, x| t.sum(x[0]))),
        ("mean", primitive_error(&[a], |t, x| t.mean(x[0]))),
    ];
    let labels = [true, false, false, true];
    out.push(("bce", primitive_error(&[probs], |t, x| t.bce(x[0], &labels).unwrap())));
    out
}

pub fn check_primitive_gradients() -> Check {
    let bad: Vec<String> = primitive_gradient_errors()
        .into_iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n}: {e:.2e}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(format!("gradient mismatch in {}", bad.join(", ")))
    }
}

/// A small model and dataset for full-network checks.
pub fn tiny_problem() -> (NlnModel, NlnPointwise) {
    let cfg = NlnConfig {
        d: 6,
        dropout: 0.0,
        ..NlnConfig::default()
    };
    let model = NlnModel::init(cfg, 6, &mut Rng::new(4, Stream::Init));
    let exprs = [
        ("(v0 & ~v1) | v2", true),
        ("~(v3 & v4) | ~v5", false),
        ("v1 | (v2 & v3 & ~v0)", true),
        ("~v4", false),
    ];
    let train = exprs
        .iter()
        .map(|(e, y)| LabeledExpr {
            expr: parse(e).unwrap(),
            label: *y,
        })
        .collect();
    (model, NlnPointwise::new(train, vec![], vec![]))
}

/// Full NLN loss (task plus every regularizer) against finite differences, per
/// trainable parameter.
pub fn nln_gradient_errors() -> Vec<(String, f64)> {
    let (model, obj) = tiny_problem();
    let weights = RegWeights {
        lambda_l: 0.1,
        lambda_len: 0.01,
        lambda_theta: 0.01,
    };
    let batch: Vec<usize> = (0..obj.train.len()).collect();
    let loss_of = |m: &NlnModel, tape: &mut Tape| {
        let mut rngs = TrainRngs::new(1);
        obj.batch_loss(m, tape, &batch, weights, &mut rngs).unwrap().loss
    };
    let mut tape = Tape::new();
    let root = loss_of(&model, &mut tape);
    tape.backward(root).unwrap();
    let grads = tape.param_grads();
    let mut out = Vec::new();
    for (id, analytic) in grads {
        let p = model.store.get(id);
        if p.frozen {
            continue;
        }
        let mut f = |x: &Array2<f64>| {
            let mut m = model.clone();
            *m.store.value_mut(id) = x.clone();
            let mut t = Tape::new();
            let r = loss_of(&m, &mut t);
            t.scalar(r)
        };
        let numeric = numeric_gradient(&p.value, 1e-6, &mut f);
        out.push((p.name.clone(), relative_error(&analytic, &numeric)));
    }
    out
}

pub fn check_nln_gradient() -> Check {
    let errs = nln_gradient_errors();
    if errs.len() != 10 {
        return Err(format!("expected 10 trainable tensors, got {}", errs.len()));
    }
    let worst = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if worst.1 < GRAD_TOL {
        Ok(())
    } else {
        Err(format!("{} has relative error {:.2e}", worst.0, worst.1))
    }
}

pub fn random_dnf(count: usize, seed: u64) -> Vec<LabeledExpr> {
    let cfg = GenConfig::new(30, count, seed);
    generate_dataset(&cfg).unwrap().1
}

pub fn check_parser_round_trip(count: usize, seed: u64) -> Check {
    for (i, d) in random_dnf(count, seed).iter().enumerate() {
        let text = d.expr.render();
        match parse(&text) {
            Ok(e) if e == d.expr => {}
            Ok(e) => return Err(format!("#{i}: `{text}` parsed back as `{}`", e.render())),
            Err(err) => return Err(format!("#{i}: `{text}`: {err}")),
        }
    }
    Ok(())
}

fn var_tables(vars: u32) -> (Vec<(Expr, u32)>, u32) {
    let n_assign = 1u32 << vars;
    let full = if n_assign == 32 { u32::MAX } else { (1u32 << n_assign) - 1 };
    let table = |v: u32| (0..n_assign).filter(|a| a >> v & 1 == 1).fold(0u32, |m, a| m | 1 << a);
    ((0..vars).map(|v| (Expr::Var(VarId(v)), table(v))).collect(), full)
}

/// Calls `visit` on every expression over `vars` variables up to `depth`, built
/// from binary AND/OR and NOT, with its truth table as a bitmask (bit `a` is
/// the value under assignment number `a`). Stops at the first `Err`.
pub fn for_each_expression<F>(vars: u32, depth: usize, mut visit: F) -> Result<usize, String>
where
    F: FnMut(&Expr, u32) -> Check,
{
    let (mut all, full) = var_tables(vars);
    if depth == 0 {
        for (e, t) in &all {
            visit(e, *t)?;
        }
        return Ok(all.len());
    }
    for _ in 1..depth {
        let prev = all.clone();
        all.extend(prev.iter().map(|(e, t)| (Expr::not(e.clone()), !t & full)));
        for (a, ta) in &prev {
            for (b, tb) in &prev {
                all.push((Expr::And(vec![a.clone(), b.clone()]), ta & tb));
                all.push((Expr::Or(vec![a.clone(), b.clone()]), ta | tb));
            }
        }
    }
    // The deepest level is visited without being stored.
    let mut count = 0;
    for (e, t) in &all {
        visit(e, *t)?;
        visit(&Expr::not(e.clone()), !t & full)?;
        count += 2;
    }
    for (a, ta) in &all {
        for (b, tb) in &all {
            visit(&Expr::And(vec![a.clone(), b.clone()]), ta & tb)?;
            visit(&Expr::Or(vec![a.clone(), b.clone()]), ta | tb)?;
            count += 2;
        }
    }
    Ok(count)
}

/// `eval_truth` against the bitmask oracle for every expression over `vars`
/// variables up to `depth` and every assignment.
pub fn check_truth_tables(vars: u32, depth: usize) -> Result<usize, String> {
    let assignments: Vec<Assignment> = (0..1u32 << vars)
        .map(|a| Assignment::new((0..vars).map(|v| a >> v & 1 == 1).collect()))
        .collect();
    for_each_expression(vars, depth, |e, table| {
        for (k, a) in assignments.iter().enumerate() {
            let got = eval_truth(e, a).map_err(|err| err.to_string())?;
            if got != (table >> k & 1 == 1) {
                return Err(format!("`{}` under assignment {k}", e.render()));
            }
        }
        Ok(())
    })
}

pub fn check_shuffle_invariance(count: usize, seed: u64) -> Check {
    let cfg = GenConfig::new(30, count, seed);
    let (truth, data) = generate_dataset(&cfg).unwrap();
    let mut rng = Rng::new(seed, Stream::Shuffle);
    let mut alt_rng = Rng::new(seed + 1, Stream::DataGen);
    for d in &data {
        let shuffled = shuffle_operands(&d.expr, &mut rng);
        if eval_truth(&shuffled, &truth).unwrap() != d.label {
            return Err(format!("`{}` changed value after shuffling", d.expr.render()));
        }
        let other = Assignment::new((0..30).map(|_| alt_rng.coin()).collect());
        if eval_truth(&shuffled, &other).unwrap() != eval_truth(&d.expr, &other).unwrap() {
            return Err(format!("`{}` changed value under a second assignment", d.expr.render()));
        }
    }
    Ok(())
}

pub fn check_regularizer_range() -> Check {
    for seed in 1..=5 {
        let cfg = NlnConfig {
            d: 16,
            ..NlnConfig::default()
        };
        let model = NlnModel::init(cfg, 30, &mut Rng::new(seed, Stream::Init));
        let exprs: Vec<Expr> = random_dnf(64, seed).into_iter().map(|d| d.expr).collect();
        let rep = report_for(&model, &exprs).map_err(|e| e.to_string())?;
        if !rep.r.iter().all(|&r| r > 0.0 && r < 1.0) {
            return Err(format!("seed {seed}: r = {:?}", rep.r));
        }
    }
    Ok(())
}

/// `1 - σ(10)`, the value of r2 and r5 when the modules are exact.
pub const TRIVIAL_LAW: f64 = 1.0 - 0.999_954_602_131_297_6;

/// r2 with a NOT that is exact negation and r5 with an AND that copies its
/// first operand, both against the closed form.
pub fn trivial_module_values() -> (f64, f64) {
    let report = |m: &NlnModel, w: Array2<f64>| {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, m, None);
        let w = fwd.tape.leaf(w);
        logic_reg(&mut fwd, w).unwrap().1
    };
    let cfg = |d| NlnConfig {
        d,
        ..NlnConfig::default()
    };
    let mut m = NlnModel::init(cfg(2), 1, &mut Rng::new(3, Stream::Init));
    *m.store.value_mut(m.not.h1) = array![[1.0, -1.0], [-1.0, 1.0]];
    *m.store.value_mut(m.not.h2) = array![[-0.5, 0.5], [0.5, -0.5]];
    m.store.value_mut(m.not.b).fill(0.0);
    *m.store.value_mut(m.anchor) = array![[1.0, -1.0]];
    let r2 = report(&m, array![[0.5, -0.5], [-2.0, 2.0], [3.0, -3.0]]).r[1];

    let mut m = NlnModel::init(cfg(3), 1, &mut Rng::new(3, Stream::Init));
    let mut h1 = Array2::zeros((3, 6));
    for i in 0..3 {
        h1[[i, i]] = 1.0;
    }
    *m.store.value_mut(m.and.h1) = h1;
    *m.store.value_mut(m.and.h2) = Array2::eye(3);
    m.store.value_mut(m.and.b).fill(0.0);
    let r5 = report(&m, array![[1.0, 2.0, 0.5], [0.3, 0.1, 3.0]]).r[4];
    (r2, r5)
}

pub fn check_trivial_modules() -> Check {
    let (r2, r5) = trivial_module_values();
    for (name, v) in [("r2", r2), ("r5", r5)] {
        if (v - TRIVIAL_LAW).abs() > 1e-12 || (v - 4.54e-5).abs() > 1e-7 {
            return Err(format!("{name} = {v:e}"));
        }
    }
    Ok(())
}

fn timeline(user: u32, likes: &[bool]) -> Vec<Interaction> {
    likes
        .iter()
        .enumerate()
        .map(|(i, &l)| Interaction {
            user,
            item: i as u32 + 1,
            rating: if l { 5 } else { 2 },
            timestamp: i as i64,
        })
        .collect()
}

/// The worked example, the forced-train rule and split disjointness.
pub fn check_split_protocol() -> Check {
    let exprs = build_expressions(&timeline(0, &[true, false, false, true]), 10);
    let vars = ItemVars::new(0..5);
    let rendered: Vec<String> = exprs.iter().map(|e| to_expr_node(e, &vars).unwrap().render()).collect();
    let expected = ["~v1 | v2", "~(v1 & ~v2) | v3", "~(v1 & ~v2 & ~v3) | v4"];
    if rendered != expected {
        return Err(format!("worked example gave {rendered:?}"));
    }
    let labels: Vec<bool> = exprs.iter().map(|e| e.label).collect();
    if labels != [false, false, true] {
        return Err(format!("worked example labels {labels:?}"));
    }
    if split_user(&exprs).iter().any(|t| *t != SplitTag::Train) {
        return Err("targets inside the first five interactions must train".into());
    }

    let ratings = synth::generate(&synth::SynthConfig::default());
    let ds = RecDataset::build(&ratings, 10);
    for (exprs, tags) in ds.per_user.iter().zip(&ds.tags) {
        let mut seen = HashSet::new();
        for (e, t) in exprs.iter().zip(tags) {
            if !seen.insert(e.position) {
                return Err(format!("user {} target position {} appears twice", e.user, e.position));
            }
            if e.position <= FORCED_TRAIN && *t != SplitTag::Train {
                return Err(format!("user {} position {} left training", e.user, e.position));
            }
        }
        let count = |tag| tags.iter().filter(|t| **t == tag).count();
        if count(SplitTag::Test) > 1 || count(SplitTag::Valid) > 1 {
            return Err(format!("user has {} test and {} valid targets", count(SplitTag::Test), count(SplitTag::Valid)));
        }
        // Valid and test are the last two free targets, in that order.
        let pos = |tag| exprs.iter().zip(tags).find(|(_, t)| **t == tag).map(|(e, _)| e.position);
        if let (Some(v), Some(t)) = (pos(SplitTag::Valid), pos(SplitTag::Test)) {
            if v >= t {
                return Err(format!("valid position {v} not before test position {t}"));
            }
        }
    }
    let total: usize = ds.per_user.iter().map(Vec::len).sum();
    let parts: usize = [SplitTag::Train, SplitTag::Valid, SplitTag::Test]
        .iter()
        .map(|t| ds.split(*t).len())
        .sum();
    if parts != total {
        return Err(format!("splits hold {parts} expressions, dataset has {total}"));
    }
    Ok(())
}

/// Every leave-one-out case on synthetic ratings has 101 distinct candidates.
pub fn check_leave_one_out() -> Result<usize, String> {
    let ratings = synth::generate(&synth::SynthConfig {
        items: 400,
        ..synth::SynthConfig::default()
    });
    let ds = RecDataset::build(&ratings, 10);
    let mut rng = Rng::new(1, Stream::EvalCandidates);
    let mut n = 0;
    for tag in [SplitTag::Valid, SplitTag::Test] {
        for task in ds.rank_tasks(tag, 100, &mut rng).map_err(|e| e.to_string())? {
            let distinct: HashSet<u32> = task.candidates.iter().copied().collect();
            if task.candidates.len() != 101 || distinct.len() != 101 {
                return Err(format!("user {} has {} candidates", task.user, task.candidates.len()));
            }
            if task.candidates[1..].iter().any(|&c| ds.liked.get(&task.user).is_some_and(|l| l.contains(&c))) {
                return Err(format!("user {} has a liked item among the negatives", task.user));
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Five epochs on a small simulated set, returning every epoch's stats and the
/// final parameters.
pub fn five_epoch_run(seed: u64) -> (Vec<EpochStats>, NlnModel) {
    let (_, data) = generate_dataset(&GenConfig::new(40, 300, 9)).unwrap();
    let (tr, va, te) = split_dataset(&data, (0.8, 0.1, 0.1), 1).unwrap();
    let obj = NlnPointwise::new(tr, va, te);
    let cfg = TrainConfig {
        max_epochs: 5,
        patience: 100,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let model_cfg = NlnConfig {
        d: 12,
        ..NlnConfig::default()
    };
    let model = NlnModel::init(model_cfg, 40, &mut Rng::new(seed, Stream::Init));
    let mut s = Session::new(&obj, cfg, model, seed, String::new()).unwrap();
    while !s.finished() {
        s.run_epoch().unwrap();
    }
    let last = s.model().clone();
    (s.stats().to_vec(), last)
}

pub fn check_determinism() -> Check {
    let (sa, ma) = five_epoch_run(3);
    let (sb, mb) = five_epoch_run(3);
    if sa != sb {
        return Err("epoch statistics differ between identical runs".into());
    }
    for ((_, pa), (_, pb)) in ma.store().iter().zip(mb.store().iter()) {
        let same = pa.value.iter().zip(pb.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("parameter {} differs between identical runs", pa.name));
        }
    }
    Ok(())
}
