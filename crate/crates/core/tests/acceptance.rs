//! Acceptance criteria 1-10. One test runs them in sequence (most of them
//! share the trained network or the grid oracle) and prints a PASS/FAIL
//! line per criterion; it fails if any criterion fails.
//!
//! Runs the full desk-scale training: expect about 20 minutes on one core.
//! Run alone with `cargo test -p hjcert --test acceptance`.

use std::io::Write;
use std::time::Instant;

use hjcert::certify::smtlib::{export_smtlib, parse_smtlib};
use hjcert::certify::{
    certify_expr, eval_enclosure, eval_interval, partition_roi, route_query, Certificate, CertifyOptions, Route,
    Status,
};
use hjcert::cegis::{run_cegis, CegisOptions, CegisStatus};
use hjcert::grid::{solve_stationary, SweepOperator};
use hjcert::reach::{bracket_field, validate_bracket, DEFAULT_RIM};
use hjcert::residuals::{
    eps_val_from_operator, eps_val_from_slack, offset_identity_check, residual_route_b_stationary,
};
use hjcert::{ExperimentConfig, ExprBuilder, ExprTree, GridField, Interval, NetParams, Problem, StateBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn report(n: usize, started: Instant, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Written to the process stdout so the line survives test capture.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2}: {tag}  {detail}  ({:.1} s)", started.elapsed().as_secs_f64());
    let _ = out.flush();
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn preset() -> (ExperimentConfig, Problem) {
    let cfg = ExperimentConfig::preset("double-integrator-paper").unwrap();
    let problem = Problem::new(cfg.problem.clone()).unwrap();
    (cfg, problem)
}

fn sample_in(rng: &mut ChaCha8Rng, region: &StateBox) -> Vec<f64> {
    (0..region.dim()).map(|i| rng.random_range(region.lo[i]..=region.hi[i])).collect()
}

struct Trained {
    net: NetParams,
    cert: Certificate,
}

fn criterion_1(cfg: &ExperimentConfig, problem: &Problem) -> (Outcome, Option<Trained>) {
    let s = &cfg.certify;
    let init = NetParams::init(cfg.seed, &cfg.layer_sizes(), cfg.network.w0).unwrap();
    let opts = CegisOptions::new(Route::B, 0.1, 1e-8, 8, 10);
    assert_eq!((s.route, s.rho, s.delta, s.cells_per_axis), (Route::B, 0.1, 1e-8, 8));
    assert_eq!((cfg.training.iterations, cfg.training.batch_size), (20_000, 4096));
    let (net, cert, rep) = match run_cegis(problem, init, &cfg.training, cfg.seed, &opts) {
        Ok(r) => r,
        Err(e) => return (Err(format!("training or certification failed: {e}")), None),
    };
    let rounds = rep.rounds.len();
    let detail = format!(
        "{} after {rounds} round(s): {}/{} cells UNSAT, eps_val {:?}, max proven sup {:?}, {} boxes",
        match rep.status {
            CegisStatus::Certified => "CERTIFIED",
            CegisStatus::Exhausted => "EXHAUSTED",
        },
        cert.count(Status::Unsat),
        cert.cells.len(),
        cert.eps_val,
        cert.max_proven_sup(),
        cert.total_boxes()
    );
    let ok = rep.status == CegisStatus::Certified
        && cert.all_unsat()
        && cert.cells.len() == 64
        && cert.eps_val == Some(0.1)
        && cert.route == Route::B
        && cert.delta == 1e-8;
    let single = if rounds == 1 { " (single training run)" } else { " (CEGIS fallback)" };
    (check(ok, detail + single), Some(Trained { net, cert }))
}

fn criterion_2(net: &NetParams, oracle: &GridField) -> Outcome {
    let diff = oracle.difference(net).map_err(|e| e.to_string())?;
    let m = diff.max_abs_interior(DEFAULT_RIM);
    check(
        oracle.shape == [201, 201] && m <= 0.1,
        format!("max |W_nn - W_num| = {m:.5} on {:?} minus a {DEFAULT_RIM}-node rim", oracle.shape),
    )
}

fn criterion_3() -> Outcome {
    let (cfg, _) = preset();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for t in 0..1000u64 {
        let mut spec = cfg.problem.clone();
        spec.lambda = rng.random_range(0.05..5.0);
        spec.gamma = None;
        let problem = Problem::new(spec).map_err(|e| e.to_string())?;
        let hidden = rng.random_range(2..12);
        let w0 = rng.random_range(0.5..30.0);
        let w = NetParams::init(t, &[2, hidden, 1], w0).unwrap();
        let eps = rng.random_range(-1.0..1.0);
        let samples: Vec<Vec<f64>> = (0..1000).map(|_| sample_in(&mut rng, &problem.spec.roi)).collect();
        worst = worst.max(offset_identity_check(&problem, &w, eps, &samples));
    }
    check(worst <= 1e-12, format!("max |R(W+eps) - R(W) - lambda eps| = {worst:e} over 1000 triples x 1000 points"))
}

fn criterion_4(problem: &Problem) -> Outcome {
    let shape = [201, 201];
    let op = SweepOperator::new(problem, &shape).map_err(|e| e.to_string())?;
    let gamma = op.gamma();
    if (gamma - 0.9512294245).abs() > 1e-10 {
        return Err(format!("gamma = {gamma}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let scale = rng.random_range(0.01..10.0);
        let mut a = GridField::zeros(&shape, &problem.spec.roi).unwrap();
        let mut b = a.clone();
        for v in &mut a.values {
            *v = rng.random_range(-scale..scale);
        }
        for v in &mut b.values {
            *v = rng.random_range(-scale..scale);
        }
        let lhs = op.apply(&a).sup_distance(&op.apply(&b));
        worst = worst.max(lhs - (gamma * a.sup_distance(&b) + 1e-9));
    }
    check(
        worst <= 0.0,
        format!("200 pairs on 201x201, gamma = {gamma:.10}, worst excess {worst:e}"),
    )
}

fn criterion_5(problem: &Problem) -> Outcome {
    let spec = &problem.spec;
    let one = eps_val_from_operator(1.0 - spec.gamma(), spec).unwrap();
    let op = eps_val_from_operator(0.005, spec).unwrap();
    let s1 = eps_val_from_slack(0.1, 0.0, 1.0).unwrap();
    let s2 = eps_val_from_slack(0.1, 0.08, 2.0).unwrap();
    check(
        one == 1.0 && (op - 0.1025218).abs() <= 1e-6 && s1 == 0.1 && s2 == 0.08,
        format!("operator(1-gamma) = {one}, operator(0.005) = {op:.7}, slack = {s1}, {s2}"),
    )
}

fn criterion_6(oracle: &GridField) -> Outcome {
    let w = hjcert::ValueFunction::value(oracle, &[0.0, 0.0]);
    check(
        (w + 0.5).abs() <= 1e-2,
        format!("W_num(0,0) = {w:.6} after {} sweeps (last change {:e})", oracle.iterations, oracle.sup_change),
    )
}

fn criterion_7(net: &NetParams, cert: &Certificate, oracle: &GridField) -> Outcome {
    let eps = cert.eps_val.ok_or("no certified eps_val")?;
    let field = GridField::from_fn(&oracle.shape, &oracle.roi, net).map_err(|e| e.to_string())?;
    let pair = bracket_field(&field, eps).map_err(|e| e.to_string())?;
    let rep = validate_bracket(&pair, oracle, DEFAULT_RIM).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut absorbed = 0;
    for _ in 0..50 {
        let mut g = oracle.clone();
        for v in &mut g.values {
            *v += rng.random_range(-eps..=eps);
        }
        let p = bracket_field(&g, eps).map_err(|e| e.to_string())?;
        absorbed += (validate_bracket(&p, oracle, DEFAULT_RIM).map_err(|e| e.to_string())?.violations() == 0) as usize;
    }
    check(
        rep.violations() == 0 && absorbed == 50,
        format!(
            "eps_val {eps}: inner {} / outer {} / oracle {} nodes, {} violations; {absorbed}/50 perturbed fields absorbed",
            rep.inner_count,
            rep.outer_count,
            rep.oracle_count,
            rep.violations()
        ),
    )
}

/// A random expression over two variables using every primitive.
fn random_expr(rng: &mut ChaCha8Rng, size: usize) -> ExprTree {
    let mut b = ExprBuilder::new(2);
    let mut pool = b.vars();
    for _ in 0..size {
        let a = pool[rng.random_range(0..pool.len())];
        let c = pool[rng.random_range(0..pool.len())];
        let n = match rng.random_range(0..12) {
            0 => b.add(a, c),
            1 => b.sub(a, c),
            2 => b.mul(a, c),
            3 => b.neg(a),
            4 => b.sin(a),
            5 => b.cos(a),
            6 => b.sqr(a),
            7 => {
                let m = b.abs(a);
                b.sqrt(m)
            }
            8 => b.abs(a),
            9 => b.min(a, c),
            10 => b.max(a, c),
            _ => {
                let k = rng.random_range(-3.0..3.0);
                let s = b.scale(k, a);
                let k0 = b.constant(rng.random_range(-1.0..1.0));
                b.add(s, k0)
            }
        };
        pool.push(n);
    }
    b.finish(*pool.last().unwrap())
}

fn criterion_8(problem: &Problem, trained: Option<&Trained>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes = Vec::new();

    // Inclusion fuzz: random expressions, plus the trained residual.
    let mut checks = 0usize;
    let mut violations = 0usize;
    let mut fuzz = |expr: &ExprTree, region: &StateBox, rng: &mut ChaCha8Rng| {
        let x = sample_in(rng, region);
        let v = expr.eval(&x);
        for iv in [eval_interval(expr, region), eval_enclosure(expr, region)] {
            checks += 1;
            if !(v.is_nan() || iv.contains(v)) {
                violations += 1;
            }
        }
    };
    for _ in 0..45_000 {
        let size = rng.random_range(1..16);
        let e = random_expr(&mut rng, size);
        let lo = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let w = rng.random_range(0.0..2.0f64);
        let region = StateBox::from_intervals(&[Interval::new(lo[0], lo[0] + w), Interval::new(lo[1], lo[1] + w)]);
        fuzz(&e, &region, &mut rng);
    }
    let trained = trained.ok_or("no trained network")?;
    let (domain, residual) = route_query(problem, Route::B, &trained.net.export_expr()).map_err(|e| e.to_string())?;
    for _ in 0..5_000 {
        let c = sample_in(&mut rng, &domain);
        let w = 10f64.powf(rng.random_range(-6.0..-0.5));
        let region = StateBox::from_intervals(&[Interval::new(c[0] - w, c[0] + w), Interval::new(c[1] - w, c[1] + w)]);
        fuzz(&residual, &region, &mut rng);
    }
    notes.push(format!("{checks} inclusion checks, {violations} violations"));
    let mut ok = checks >= 100_000 && violations == 0;

    // UNSAT cells of the main certificate survive dense sampling.
    let unsat_sample = |cert: &Certificate, rng: &mut ChaCha8Rng| -> (usize, f64) {
        let mut cells = 0;
        let mut worst = 0.0f64;
        for c in cert.cells.iter().filter(|c| c.status == Status::Unsat) {
            cells += 1;
            for _ in 0..100_000 {
                let x = sample_in(rng, &c.region);
                let r = residual_route_b_stationary(problem, &trained.net, &x).abs();
                worst = worst.max(r - c.rho);
            }
        }
        (cells, worst)
    };
    let (cells, worst) = unsat_sample(&trained.cert, &mut rng);
    notes.push(format!("{cells} UNSAT cells x 1e5 samples, max |R| - rho = {worst:.4}"));
    ok &= worst <= 0.0;

    // Five-step ladder: witnesses are genuine and UNSAT is monotone in rho.
    let ladder = [0.02, 0.04, 0.06, 0.08, 0.1];
    let mut certs = Vec::new();
    for &rho in &ladder {
        let c = certify_expr(problem, &residual, &domain, Route::B, rho, 1e-8, 2, &CertifyOptions::default())
            .map_err(|e| e.to_string())?;
        certs.push(c);
    }
    let mut witnesses = 0;
    let mut bad_witnesses = 0;
    for c in &certs {
        for cell in &c.cells {
            if let Some(w) = &cell.witness {
                witnesses += 1;
                if residual.eval(w).abs() <= cell.rho - c.delta || residual.eval(w).is_nan() {
                    bad_witnesses += 1;
                }
            }
        }
    }
    let mut monotone = true;
    for pair in certs.windows(2) {
        for (a, b) in pair[0].cells.iter().zip(&pair[1].cells) {
            monotone &= a.status != Status::Unsat || b.status == Status::Unsat;
        }
    }
    let mut ladder_unsat_worst = 0.0f64;
    let mut ladder_unsat = 0;
    for c in &certs {
        let (n, w) = unsat_sample(c, &mut rng);
        ladder_unsat += n;
        ladder_unsat_worst = ladder_unsat_worst.max(w);
    }
    let counts: Vec<String> = certs.iter().map(|c| c.count(Status::Unsat).to_string()).collect();
    notes.push(format!(
        "ladder {ladder:?} UNSAT counts [{}] of 4, monotone {monotone}, {witnesses} witnesses ({bad_witnesses} below rho - delta), {ladder_unsat} ladder UNSAT cells sampled (max |R| - rho = {ladder_unsat_worst:.4})",
        counts.join(", ")
    ));
    ok &= witnesses > 0 && bad_witnesses == 0 && monotone && ladder_unsat_worst <= 0.0;
    check(ok, notes.join("; "))
}

fn criterion_9(problem: &Problem, net: Option<&NetParams>) -> Outcome {
    let net = net.ok_or("no trained network")?;
    let (domain, residual) = route_query(problem, Route::B, &net.export_expr()).map_err(|e| e.to_string())?;
    let cells = partition_roi(&domain, 8, 0.1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut identical = 0;
    for cell in &cells {
        let text = export_smtlib(&residual, cell, 1e-8);
        let q = parse_smtlib(&text).map_err(|e| e.to_string())?;
        if q.region != cell.region || q.rho != cell.rho || q.delta != 1e-8 {
            return Err("reparsed bounds differ".into());
        }
        for _ in 0..100 {
            let x = sample_in(&mut rng, &cell.region);
            worst = worst.max((q.expr.eval(&x) - residual.eval(&x)).abs());
        }
        let again = export_smtlib(&q.expr, &hjcert::certify::Cell { region: q.region.clone(), rho: q.rho }, q.delta);
        identical += (again == text && export_smtlib(&residual, cell, 1e-8) == text) as usize;
    }
    check(
        worst <= 1e-12 && identical == cells.len(),
        format!(
            "{} cell files reparsed, max |reparsed - tree| = {worst:e} over 100 points each, {identical} byte-identical re-emissions",
            cells.len()
        ),
    )
}

fn criterion_10(cfg: &ExperimentConfig, net: Option<&NetParams>) -> Outcome {
    let fallback;
    let net = match net {
        Some(n) => n,
        None => {
            fallback = NetParams::init(cfg.seed, &cfg.layer_sizes(), cfg.network.w0).unwrap();
            &fallback
        }
    };
    let roi = &cfg.problem.roi;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for _ in 0..1000 {
        let x = sample_in(&mut rng, roi);
        let g = net.grad_x(&x);
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (net.forward(&xp) - net.forward(&xm)) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-2);
            worst_rel = worst_rel.max((g[i] - fd).abs() / scale);
        }
    }
    let expr = net.export_expr();
    let mut worst_export = 0.0f64;
    for _ in 0..10_000 {
        let x = sample_in(&mut rng, roi);
        worst_export = worst_export.max((expr.eval(&x) - net.forward(&x)).abs());
    }
    check(
        worst_rel <= 1e-5 && worst_export <= 1e-12,
        format!("gradient vs central differences: max rel {worst_rel:e} (1e3 samples); tree vs forward: {worst_export:e} (1e4 samples)"),
    )
}

#[test]
fn acceptance_criteria() {
    let (cfg, problem) = preset();
    let mut results = Vec::new();
    let mut run = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(n, t, &o);
        results.push((n, o.is_ok()));
    };

    // Fast criteria first, so their lines appear before the long training run.
    run(3, &mut criterion_3);
    run(4, &mut || criterion_4(&problem));
    run(5, &mut || criterion_5(&problem));

    let t = Instant::now();
    let oracle = solve_stationary(&problem, &cfg.grid.shape, cfg.grid.tol);
    let oracle_secs = t.elapsed().as_secs_f64();
    run(6, &mut || {
        let o = oracle.as_ref().map_err(|e| e.to_string())?;
        criterion_6(o).map(|d| format!("{d}, solved in {oracle_secs:.1} s"))
    });

    let mut trained = None;
    run(1, &mut || {
        let (o, t) = criterion_1(&cfg, &problem);
        trained = t;
        o
    });
    run(2, &mut || {
        let t = trained.as_ref().ok_or("no trained network")?;
        criterion_2(&t.net, oracle.as_ref().map_err(|e| e.to_string())?)
    });
    run(7, &mut || {
        let t = trained.as_ref().ok_or("no trained network")?;
        criterion_7(&t.net, &t.cert, oracle.as_ref().map_err(|e| e.to_string())?)
    });
    run(8, &mut || criterion_8(&problem, trained.as_ref()));
    run(9, &mut || criterion_9(&problem, trained.as_ref().map(|t| &t.net)));
    run(10, &mut || criterion_10(&cfg, trained.as_ref().map(|t| &t.net)));

    results.sort();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
