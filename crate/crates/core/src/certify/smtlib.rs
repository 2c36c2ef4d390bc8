//! SMT-LIB 2 export of cell queries for external delta-complete solvers, and
//! a reparser for the emitted subset.
//!
//! The script uses `QF_NRA` plus the transcendental and piecewise symbols
//! understood by dReal (`sin`, `cos`, `sqrt`, `abs`, `min`, `max`, `^`).
//! Every expression node becomes a nullary `define-fun`, so shared subterms
//! are written once.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::StateBox;
use crate::error::{Error, Result};
use crate::expr::{ExprBuilder, ExprTree, Node, NodeId};

use super::Cell;

/// Positional decimal with 17 significant digits; exact for round trips.
pub fn decimal(v: f64) -> String {
    assert!(v.is_finite(), "non-finite constant");
    if v == 0.0 {
        return "0.0".into();
    }
    let sci = format!("{:.16e}", v.abs());
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let digits: String = mant.chars().filter(|c| *c != '.').collect();
    let n = digits.len() as i32;
    let point = exp + 1;
    let text = if point <= 0 {
        format!("0.{}{}", "0".repeat((-point) as usize), digits)
    } else if point >= n {
        format!("{}{}.0", digits, "0".repeat((point - n) as usize))
    } else {
        let (a, b) = digits.split_at(point as usize);
        format!("{a}.{b}")
    };
    if v < 0.0 {
        format!("(- {text})")
    } else {
        text
    }
}

fn live_nodes(expr: &ExprTree) -> Vec<bool> {
    let mut live = vec![false; expr.nodes.len()];
    live[expr.output as usize] = true;
    for i in (0..=expr.output as usize).rev() {
        if live[i] {
            for o in expr.nodes[i].operands() {
                live[o as usize] = true;
            }
        }
    }
    live
}

/// Emits the query `exists x in cell: |expr(x)| > rho` with solver precision `delta`.
pub fn export_smtlib(expr: &ExprTree, cell: &Cell, delta: f64) -> String {
    assert_eq!(cell.region.dim(), expr.n_vars, "cell and expression dimensions differ");
    let mut s = String::new();
    s.push_str("(set-logic QF_NRA)\n");
    let _ = writeln!(s, "(set-option :precision {})", decimal(delta));
    for i in 0..expr.n_vars {
        let _ = writeln!(s, "(declare-fun x{i} () Real)");
    }
    for i in 0..expr.n_vars {
        let _ = writeln!(s, "(assert (<= {} x{i}))", decimal(cell.region.lo[i]));
        let _ = writeln!(s, "(assert (<= x{i} {}))", decimal(cell.region.hi[i]));
    }
    let live = live_nodes(expr);
    // Definitions are numbered in emission order, so the names depend only
    // on the expression's structure and not on dead or reordered nodes.
    let mut def = vec![u32::MAX; expr.nodes.len()];
    let mut next = 0;
    for (i, node) in expr.nodes.iter().enumerate().take(expr.output as usize + 1) {
        if live[i] && !matches!(node, Node::Const { .. } | Node::Var { .. }) {
            def[i] = next;
            next += 1;
        }
    }
    let name = |id: NodeId| -> String {
        match expr.nodes[id as usize] {
            Node::Const { value } => decimal(value),
            Node::Var { index } => format!("x{index}"),
            _ => format!("n{}", def[id as usize]),
        }
    };
    for (i, node) in expr.nodes.iter().enumerate().take(expr.output as usize + 1) {
        if def[i] == u32::MAX {
            continue;
        }
        let term = match *node {
            Node::Add { a, b } => format!("(+ {} {})", name(a), name(b)),
            Node::Sub { a, b } => format!("(- {} {})", name(a), name(b)),
            Node::Mul { a, b } => format!("(* {} {})", name(a), name(b)),
            Node::Neg { a } => format!("(- {})", name(a)),
            Node::Sin { a } => format!("(sin {})", name(a)),
            Node::Cos { a } => format!("(cos {})", name(a)),
            Node::Sqr { a } => format!("(^ {} 2)", name(a)),
            Node::Sqrt { a } => format!("(sqrt {})", name(a)),
            Node::Abs { a } => format!("(abs {})", name(a)),
            Node::Min { a, b } => format!("(min {} {})", name(a), name(b)),
            Node::Max { a, b } => format!("(max {} {})", name(a), name(b)),
            Node::Const { .. } | Node::Var { .. } => unreachable!(),
        };
        let _ = writeln!(s, "(define-fun n{} () Real {term})", def[i]);
    }
    let _ = writeln!(s, "(assert (> (abs {}) {}))", name(expr.output), decimal(cell.rho));
    s.push_str("(check-sat)\n(exit)\n");
    s
}

/// Writes `cell_<i>.smt2` for every cell into `dir`.
pub fn export_cells(expr: &ExprTree, cells: &[Cell], delta: f64, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let path = dir.join(format!("cell_{i}.smt2"));
        std::fs::write(&path, export_smtlib(expr, cell, delta)).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

/// Parses a sequence of s-expressions; `;` starts a line comment.
pub fn parse_sexps(text: &str) -> Result<Vec<Sexp>> {
    let mut stack: Vec<Vec<Sexp>> = vec![Vec::new()];
    let mut atom = String::new();
    let flush = |atom: &mut String, stack: &mut Vec<Vec<Sexp>>| {
        if !atom.is_empty() {
            stack.last_mut().unwrap().push(Sexp::Atom(std::mem::take(atom)));
        }
    };
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        match c {
            ';' => {
                flush(&mut atom, &mut stack);
                for c in chars.by_ref() {
                    if c == '\n' {
                        break;
                    }
                }
            }
            '(' => {
                flush(&mut atom, &mut stack);
                stack.push(Vec::new());
            }
            ')' => {
                flush(&mut atom, &mut stack);
                if stack.len() < 2 {
                    return Err(Error::Parse("unbalanced `)`".into()));
                }
                let list = stack.pop().unwrap();
                stack.last_mut().unwrap().push(Sexp::List(list));
            }
            c if c.is_whitespace() => flush(&mut atom, &mut stack),
            c => atom.push(c),
        }
    }
    flush(&mut atom, &mut stack);
    if stack.len() != 1 {
        return Err(Error::Parse("unbalanced `(`".into()));
    }
    Ok(stack.pop().unwrap())
}

/// A reparsed cell query.
#[derive(Clone, Debug)]
pub struct SmtQuery {
    pub expr: ExprTree,
    pub region: StateBox,
    pub rho: f64,
    pub delta: f64,
}

struct Reader {
    b: ExprBuilder,
    n_vars: usize,
    defs: HashMap<String, NodeId>,
}

fn atom(s: &Sexp) -> Result<&str> {
    match s {
        Sexp::Atom(a) => Ok(a),
        Sexp::List(_) => Err(Error::Parse("expected an atom".into())),
    }
}

fn number(s: &Sexp) -> Result<f64> {
    match s {
        Sexp::Atom(a) => a
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("not a number: {a}"))),
        Sexp::List(l) if l.len() == 2 && matches!(&l[0], Sexp::Atom(m) if m == "-") => Ok(-number(&l[1])?),
        _ => Err(Error::Parse("expected a numeral".into())),
    }
}

fn var_index(name: &str) -> Option<usize> {
    name.strip_prefix('x')?.parse().ok()
}

impl Reader {
    fn term(&mut self, s: &Sexp) -> Result<NodeId> {
        match s {
            Sexp::Atom(a) => {
                if let Some(&id) = self.defs.get(a.as_str()) {
                    return Ok(id);
                }
                if let Some(i) = var_index(a) {
                    if i < self.n_vars {
                        return Ok(self.b.var(i));
                    }
                }
                let v = number(s).map_err(|_| Error::Parse(format!("unknown symbol `{a}`")))?;
                Ok(self.b.constant(v))
            }
            Sexp::List(l) => {
                let (head, args) = l.split_first().ok_or_else(|| Error::Parse("empty term".into()))?;
                let op = atom(head)?;
                if op == "-" && args.len() == 1 {
                    if let Sexp::Atom(a) = &args[0] {
                        if let Ok(v) = a.parse::<f64>() {
                            return Ok(self.b.constant(-v));
                        }
                    }
                }
                if op == "^" {
                    if args.len() != 2 || number(&args[1])? != 2.0 {
                        return Err(Error::Parse("only `(^ t 2)` is supported".into()));
                    }
                    let a = self.term(&args[0])?;
                    return Ok(self.b.sqr(a));
                }
                let ids = args.iter().map(|a| self.term(a)).collect::<Result<Vec<_>>>()?;
                let unary = |n: usize| -> Result<()> {
                    if n == 1 {
                        Ok(())
                    } else {
                        Err(Error::Parse(format!("`{op}` takes one argument")))
                    }
                };
                let b = &mut self.b;
                let fold = |b: &mut ExprBuilder, f: fn(&mut ExprBuilder, NodeId, NodeId) -> NodeId| -> Result<NodeId> {
                    if ids.len() < 2 {
                        return Err(Error::Parse(format!("`{op}` takes at least two arguments")));
                    }
                    Ok(ids[1..].iter().fold(ids[0], |acc, &x| f(b, acc, x)))
                };
                match op {
                    "+" => fold(b, ExprBuilder::add),
                    "*" => fold(b, ExprBuilder::mul),
                    "-" if ids.len() == 1 => Ok(b.neg(ids[0])),
                    "-" => fold(b, ExprBuilder::sub),
                    "min" => fold(b, ExprBuilder::min),
                    "max" => fold(b, ExprBuilder::max),
                    "sin" => unary(ids.len()).map(|_| b.sin(ids[0])),
                    "cos" => unary(ids.len()).map(|_| b.cos(ids[0])),
                    "sqrt" => unary(ids.len()).map(|_| b.sqrt(ids[0])),
                    "abs" => unary(ids.len()).map(|_| b.abs(ids[0])),
                    _ => Err(Error::Parse(format!("unsupported operator `{op}`"))),
                }
            }
        }
    }
}

/// Rebuilds the query from a script produced by [`export_smtlib`].
pub fn parse_smtlib(text: &str) -> Result<SmtQuery> {
    let cmds = parse_sexps(text)?;
    let mut n_vars = 0;
    let mut delta = None;
    for c in &cmds {
        if let Sexp::List(l) = c {
            if l.first().map(atom).transpose()? == Some("declare-fun") {
                let name = atom(l.get(1).ok_or_else(|| Error::Parse("declare-fun without name".into()))?)?;
                if var_index(name) != Some(n_vars) {
                    return Err(Error::Parse(format!("unexpected variable `{name}`")));
                }
                n_vars += 1;
            }
        }
    }
    let mut r = Reader {
        b: ExprBuilder::new(n_vars),
        n_vars,
        defs: HashMap::new(),
    };
    let mut lo = vec![f64::NAN; n_vars];
    let mut hi = vec![f64::NAN; n_vars];
    let mut goal = None;
    for c in &cmds {
        let l = match c {
            Sexp::List(l) if !l.is_empty() => l,
            _ => return Err(Error::Parse("expected a command".into())),
        };
        match atom(&l[0])? {
            "set-logic" | "declare-fun" | "check-sat" | "exit" => {}
            "set-option" => {
                if l.len() == 3 && atom(&l[1])? == ":precision" {
                    delta = Some(number(&l[2])?);
                }
            }
            "define-fun" => {
                if l.len() != 5 {
                    return Err(Error::Parse("malformed define-fun".into()));
                }
                let name = atom(&l[1])?.to_string();
                let id = r.term(&l[4])?;
                r.defs.insert(name, id);
            }
            "assert" => {
                let body = match l.get(1) {
                    Some(Sexp::List(b)) if b.len() == 3 => b,
                    _ => return Err(Error::Parse("malformed assert".into())),
                };
                match (atom(&body[0])?, &body[1], &body[2]) {
                    ("<=", lhs, Sexp::Atom(v)) if var_index(v).is_some() => {
                        lo[var_index(v).unwrap()] = number(lhs)?;
                    }
                    ("<=", Sexp::Atom(v), rhs) if var_index(v).is_some() => {
                        hi[var_index(v).unwrap()] = number(rhs)?;
                    }
                    (">", Sexp::List(abs), rhs) if abs.len() == 2 && atom(&abs[0])? == "abs" => {
                        let out = r.term(&abs[1])?;
                        goal = Some((out, number(rhs)?));
                    }
                    _ => return Err(Error::Parse("unsupported assertion".into())),
                }
            }
            other => return Err(Error::Parse(format!("unsupported command `{other}`"))),
        }
    }
    let (out, rho) = goal.ok_or_else(|| Error::Parse("missing residual assertion".into()))?;
    let region = StateBox::new(lo, hi).map_err(|_| Error::Parse("missing or invalid variable bounds".into()))?;
    Ok(SmtQuery {
        expr: r.b.finish(out),
        region,
        rho,
        delta: delta.ok_or_else(|| Error::Parse("missing precision option".into()))?,
    })
}
