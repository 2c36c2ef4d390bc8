//! Counterexample-guided training: train, certify, feed witnesses back.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::certify::{certify_expr, route_query, Certificate, CertifyOptions, Route, Status};
use crate::dynamics::Problem;
use crate::error::{Error, Result};
use crate::net::{NetParams, TrainSchedule, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct CegisOptions {
    pub route: Route,
    pub rho: f64,
    pub delta: f64,
    pub cells_per_axis: usize,
    pub max_rounds: usize,
    /// Schedule for rounds after the first; the first uses the main schedule.
    pub retrain: Option<TrainSchedule>,
    /// Jittered neighbours added per witness.
    pub jitter_count: usize,
    /// Jitter standard deviation as a fraction of the ROI width, per axis.
    pub jitter_frac: f64,
    /// Sampling weight of counterexamples relative to uniform states.
    pub weight: f64,
    pub certify: CertifyOptions,
}

impl CegisOptions {
    pub fn new(route: Route, rho: f64, delta: f64, cells_per_axis: usize, max_rounds: usize) -> Self {
        CegisOptions {
            route,
            rho,
            delta,
            cells_per_axis,
            max_rounds,
            retrain: None,
            jitter_count: 64,
            jitter_frac: 0.05,
            weight: 10.0,
            certify: CertifyOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CegisStatus {
    #[serde(rename = "CERTIFIED")]
    Certified,
    #[serde(rename = "EXHAUSTED")]
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub schedule: TrainSchedule,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub unsat: usize,
    pub delta_sat: usize,
    pub indeterminate: usize,
    pub boxes: u64,
    #[serde(default, with = "crate::real::option", skip_serializing_if = "Option::is_none")]
    pub eps_val: Option<f64>,
    /// Witnesses found this round; each violates `rho - delta` for this round's network.
    pub counterexamples: Vec<Counterexample>,
    /// Witnesses plus jittered neighbours pushed into the replay buffer.
    pub states_added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    #[serde(with = "crate::real::vec")]
    pub x: Vec<f64>,
    #[serde(with = "crate::real")]
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CegisReport {
    pub rounds: Vec<RoundSummary>,
    pub status: CegisStatus,
}

impl CegisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `round,x1,...,xn,residual` rows.
    pub fn write_counterexamples<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        let n = self
            .rounds
            .iter()
            .flat_map(|r| r.counterexamples.first())
            .map(|c| c.x.len())
            .next()
            .unwrap_or(0);
        let header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        if header.is_empty() {
            writeln!(w, "round,residual")?;
        } else {
            writeln!(w, "round,{},residual", header.join(","))?;
        }
        for r in &self.rounds {
            for c in &r.counterexamples {
                write!(w, "{}", r.round)?;
                for v in &c.x {
                    write!(w, ",{}", crate::real::format(*v))?;
                }
                writeln!(w, ",{}", crate::real::format(c.residual))?;
            }
        }
        w.flush()
    }

    pub fn save_counterexamples(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_counterexamples(file).map_err(|e| Error::io(path, e))
    }
}

/// Alternates training and certification until the certificate is all
/// UNSAT or `max_rounds` rounds have run. The optimizer is reset between
/// rounds; parameters and the replay buffer persist.
pub fn run_cegis(
    problem: &Problem,
    init: NetParams,
    schedule: &TrainSchedule,
    seed: u64,
    opts: &CegisOptions,
) -> Result<(NetParams, Certificate, CegisReport)> {
    if opts.max_rounds == 0 {
        return Err(Error::InvalidArgument("max_rounds must be at least 1".into()));
    }
    if !(opts.weight > 0.0) || !(opts.jitter_frac >= 0.0) {
        return Err(Error::InvalidArgument("counterexample weight and jitter must be positive".into()));
    }
    let mut trainer = Trainer::new(problem, init, schedule, seed)?;
    trainer.buffer_mut().set_counterexample_weight(opts.weight);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed);
    jitter_rng.set_stream(2);
    let roi = problem.spec.roi.clone();
    let normals: Vec<Normal<f64>> = (0..roi.dim())
        .map(|i| Normal::new(0.0, opts.jitter_frac * roi.width(i)).expect("finite std"))
        .collect();

    let mut rounds = Vec::new();
    for round in 1..=opts.max_rounds {
        if round > 1 {
            trainer.reset_optimizer();
            if let Some(s) = &opts.retrain {
                trainer.set_schedule(s)?;
            }
        }
        let train_report = trainer.run()?;
        let value = trainer.params().export_expr();
        let (domain, expr) = route_query(problem, opts.route, &value)?;
        let cert = certify_expr(
            problem,
            &expr,
            &domain,
            opts.route,
            opts.rho,
            opts.delta,
            opts.cells_per_axis,
            &opts.certify,
        )?;
        let mut summary = RoundSummary {
            round,
            schedule: trainer.schedule().clone(),
            final_loss: train_report.final_loss(),
            unsat: cert.count(Status::Unsat),
            delta_sat: cert.count(Status::DeltaSat),
            indeterminate: cert.count(Status::Indeterminate),
            boxes: cert.total_boxes(),
            eps_val: cert.eps_val,
            counterexamples: Vec::new(),
            states_added: 0,
        };
        log::info!(
            "round {round}: {} unsat, {} delta-sat, {} indeterminate",
            summary.unsat,
            summary.delta_sat,
            summary.indeterminate
        );
        if cert.all_unsat() && cert.complete {
            rounds.push(summary);
            let report = CegisReport {
                rounds,
                status: CegisStatus::Certified,
            };
            return Ok((trainer.into_params(), cert, report));
        }
        let witnesses: Vec<Vec<f64>> = cert.witnesses().map(<[f64]>::to_vec).collect();
        for w in &witnesses {
            summary.counterexamples.push(Counterexample {
                x: w.clone(),
                residual: expr.eval(w),
            });
            if round == opts.max_rounds {
                continue;
            }
            // Route A witnesses lie in the shrunk region, which is inside the ROI.
            trainer.buffer_mut().push_counterexample(problem, w)?;
            summary.states_added += 1;
            for _ in 0..opts.jitter_count {
                let mut y: Vec<f64> = w
                    .iter()
                    .zip(&normals)
                    .map(|(v, n)| v + n.sample(&mut jitter_rng))
                    .collect();
                roi.clamp(&mut y);
                trainer.buffer_mut().push_counterexample(problem, &y)?;
                summary.states_added += 1;
            }
        }
        rounds.push(summary);
        if round == opts.max_rounds {
            let report = CegisReport {
                rounds,
                status: CegisStatus::Exhausted,
            };
            return Ok((trainer.into_params(), cert, report));
        }
    }
    unreachable!("the loop returns on its last round")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;
    use crate::residuals::stationary_residual_expr;

    fn setup() -> (Problem, TrainSchedule) {
        let cfg = ExperimentConfig::preset("double-integrator-paper").unwrap();
        let mut s = cfg.training.clone();
        s.iterations = 5;
        s.batch_size = 64;
        s.buffer_fill = 2000;
        s.buffer_capacity = 4000;
        s.learning_rate_final = None;
        (Problem::new(cfg.problem).unwrap(), s)
    }

    #[test]
    fn zero_rounds_rejected() {
        let (p, s) = setup();
        let net = NetParams::init(0, &[2, 8, 1], 30.0).unwrap();
        let o = CegisOptions::new(Route::B, 0.1, 1e-8, 2, 0);
        assert!(matches!(run_cegis(&p, net, &s, 0, &o), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn certifiable_start_stops_after_one_round() {
        let (p, s) = setup();
        let net = NetParams::init(1, &[2, 6, 1], 30.0).unwrap();
        let o = CegisOptions::new(Route::B, 1e3, 1e-8, 2, 5);
        let (_, cert, rep) = run_cegis(&p, net, &s, 0, &o).unwrap();
        assert_eq!(rep.status, CegisStatus::Certified);
        assert_eq!(rep.rounds.len(), 1);
        assert!(cert.all_unsat() && cert.eps_val.is_some());
    }

    #[test]
    fn tight_bound_exhausts_with_recorded_counterexamples() {
        let (p, s) = setup();
        let net = NetParams::init(2, &[2, 6, 1], 30.0).unwrap();
        let o = CegisOptions::new(Route::B, 0.01, 1e-8, 2, 2);
        let (params, cert, rep) = run_cegis(&p, net, &s, 3, &o).unwrap();
        assert_eq!(rep.status, CegisStatus::Exhausted);
        assert_eq!(rep.rounds.len(), 2);
        assert!(cert.eps_val.is_none());
        let first = &rep.rounds[0];
        assert!(!first.counterexamples.is_empty());
        assert_eq!(first.states_added, first.counterexamples.len() * 65);
        assert_eq!(rep.rounds[1].states_added, 0);
        // The last round's witnesses violate the bound for the returned network.
        let expr = stationary_residual_expr(&p, &params.export_expr()).unwrap();
        for c in &rep.rounds[1].counterexamples {
            assert_eq!(expr.eval(&c.x), c.residual);
            assert!(c.residual.abs() > 0.01 - 1e-8);
        }
        let mut buf = Vec::new();
        rep.write_counterexamples(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,x1,x2,residual\n"));
        let rows = rep.rounds.iter().map(|r| r.counterexamples.len()).sum::<usize>();
        assert_eq!(text.lines().count(), rows + 1);

        // Deterministic given the seed.
        let net = NetParams::init(2, &[2, 6, 1], 30.0).unwrap();
        let (params2, cert2, rep2) = run_cegis(&p, net, &s, 3, &o).unwrap();
        assert_eq!(params2, params);
        assert_eq!(cert2, cert);
        assert_eq!(rep2, rep);
    }
}
