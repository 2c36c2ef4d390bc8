use hjcert::cegis::{run_cegis, CegisOptions, CegisStatus};
use hjcert::certify::Route;
use hjcert::residuals::stationary_residual_expr;
use hjcert::{ExperimentConfig, NetParams, Problem};

fn zero_output(cfg: &ExperimentConfig) -> NetParams {
    let mut net = NetParams::init(cfg.seed, &cfg.layer_sizes(), cfg.network.w0).unwrap();
    let last = net.n_layers() - 1;
    net.weights_mut(last).fill(0.0);
    net.biases_mut(last).fill(0.0);
    net
}

#[test]
fn zero_output_network_is_refuted_with_genuine_witnesses() {
    let cfg = ExperimentConfig::preset("double-integrator-paper").unwrap();
    let problem = Problem::new(cfg.problem.clone()).unwrap();
    let net = zero_output(&cfg);
    assert!([[0.0, 0.0], [1.0, -2.0]].iter().all(|x| net.forward(x) == 0.0));
    let mut s = cfg.training.clone();
    s.iterations = 0;
    s.buffer_fill = 1000;
    let opts = CegisOptions::new(Route::B, 0.1, 1e-8, 2, 1);
    let (out, cert, rep) = run_cegis(&problem, net, &s, 0, &opts).unwrap();
    assert_eq!(rep.status, CegisStatus::Exhausted);
    // W = 0 gives R = -h, which is 0.5 at the origin: the centre cells are refuted.
    assert!(rep.rounds[0].delta_sat >= 1);
    let r = stationary_residual_expr(&problem, &out.export_expr()).unwrap();
    for c in &rep.rounds[0].counterexamples {
        assert!(r.eval(&c.x).abs() > 0.1 - 1e-8);
        assert!(c.x.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.5);
    }
    assert!(cert.eps_val.is_none());
}

/// Full desk-scale loop from a network whose output is identically zero.
/// Takes one or more complete training runs; run with `--ignored`.
#[test]
#[ignore]
fn zero_output_start_certifies() {
    let cfg = ExperimentConfig::preset("double-integrator-paper").unwrap();
    let problem = Problem::new(cfg.problem.clone()).unwrap();
    let opts = CegisOptions::new(Route::B, 0.1, 1e-8, 8, cfg.cegis.max_rounds);
    let (_, cert, rep) = run_cegis(&problem, zero_output(&cfg), &cfg.training, cfg.seed, &opts).unwrap();
    eprintln!("{}", rep.to_json());
    assert_eq!(rep.status, CegisStatus::Certified);
    assert_eq!(cert.eps_val, Some(0.1));
}
