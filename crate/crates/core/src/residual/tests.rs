use approx::assert_relative_eq;
use ndarray::{array, Array2, ArrayView2};
use proptest::prelude::*;

use super::*;
use crate::analytic::{AnalyticScoreField, GmmSpec};
use crate::config::Config;
use crate::field::ZeroField;
use crate::scorenet::{Activation, NetConfig, ScoreNet};
use crate::sde::SdeSpec;

fn small_net(seed: u64) -> ScoreNet {
    ScoreNet::init(
        NetConfig {
            input_dim: 2,
            hidden_widths: vec![32, 32],
            time_embed_dim: 8,
            activation: Activation::SiLU,
            fourier_scale: 1.0,
        },
        seed,
    )
    .unwrap()
}

fn gmm_field(sde: SdeSpec) -> AnalyticScoreField {
    AnalyticScoreField::new(GmmSpec::default(), sde)
}

fn random_points(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<(Vec<f64>, f64)> {
    let mut r = rng::stream(seed);
    (0..n)
        .map(|_| {
            let x = vec![
                rng::uniform(&mut r, -8.0, 8.0),
                rng::uniform(&mut r, -8.0, 8.0),
            ];
            (x, rng::uniform(&mut r, lo, hi))
        })
        .collect()
}

/// `s(x) = c·x`, whose Jacobian is `c·I`.
struct Linear(f64);

impl ScoreField for Linear {
    fn dim(&self) -> usize {
        2
    }
    fn eval_batch(&self, xs: ArrayView2<f64>, _ts: &[f64]) -> Result<Array2<f64>> {
        Ok(xs.mapv(|v| self.0 * v))
    }
    fn jacobian(&self, _x: &[f64], _t: f64) -> Result<Array2<f64>> {
        Ok(Array2::eye(2) * self.0)
    }
}

/// `s(x) = (−x₂, x₁)`.
struct Rotation;

impl ScoreField for Rotation {
    fn dim(&self) -> usize {
        2
    }
    fn eval_batch(&self, xs: ArrayView2<f64>, _ts: &[f64]) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn(xs.raw_dim(), |(i, j)| {
            if j == 0 {
                -xs[[i, 1]]
            } else {
                xs[[i, 0]]
            }
        }))
    }
    fn jacobian(&self, _x: &[f64], _t: f64) -> Result<Array2<f64>> {
        Ok(array![[0.0, -1.0], [1.0, 0.0]])
    }
}

#[test]
fn bracket_of_zero_field() {
    let z = ZeroField { dim: 2 };
    assert_eq!(
        fpe_bracket(&z, &SdeSpec::ve(), &[1.0, 2.0], 0.4, 0.0).unwrap(),
        0.0
    );
    let vp = SdeSpec::vp();
    let m = fpe_bracket(&z, &vp, &[1.0, 2.0], 0.4, 0.0).unwrap();
    assert_relative_eq!(m, 0.5 * vp.beta(0.4) * 2.0, max_relative = 1e-14);
}

#[test]
fn bracket_of_single_gaussian_under_ve() {
    let sde = SdeSpec::ve();
    let field = AnalyticScoreField::new(GmmSpec::standard_normal(2), sde.clone());
    for (x, t) in random_points(1, 20, 0.05, 0.95) {
        let div = field.jacobian(&x, t).unwrap().diag().sum();
        let m = fpe_bracket(&field, &sde, &x, t, div).unwrap();
        let v = 1.0 + sde.kernel_stats(t).unwrap().var();
        let r2: f64 = x.iter().map(|a| a * a).sum();
        let expected = 0.5 * sde.diffusion_sq(t) * (r2 / (v * v) - 2.0 / v);
        assert_relative_eq!(m, expected, max_relative = 1e-12, epsilon = 1e-12);
    }
}

#[test]
fn stencil_coefficients_are_consistent() {
    for t in [0.0, 0.0002, 0.5, 0.9996, 1.0] {
        let st = TimeStencil::new(t, 1e-3, 5e-4, 1.0);
        // Exact on constants and linear functions.
        assert!((st.c_minus + st.c_zero + st.c_plus).abs() < 1e-9);
        assert_relative_eq!(st.apply(|s| 3.0 * s - 1.0, t), 3.0, max_relative = 1e-9);
        assert!(st.t_minus >= 0.0 && st.t_plus <= 1.0);
    }
}

#[test]
fn stencil_is_second_order_on_sine() {
    let t = 0.4;
    let err = |h: f64| {
        (fd_time_derivative(|s| (3.0 * s).sin(), t, h, h, 1.0) - 3.0 * (3.0 * t).cos()).abs()
    };
    let ratio1 = err(1e-2) / err(5e-3);
    let ratio2 = err(5e-3) / err(2.5e-3);
    assert!((ratio1 / 4.0 - 1.0).abs() < 0.2, "{ratio1}");
    assert!((ratio2 / 4.0 - 1.0).abs() < 0.2, "{ratio2}");
}

#[test]
fn stencil_is_second_order_on_analytic_score() {
    let field = gmm_field(SdeSpec::ve());
    let x = [1.0, -0.5];
    let t = 0.3;
    let exact = field.time_derivative(&x, t).unwrap();
    let err = |h: f64| {
        let fd = fd_time_derivative(|s| field.score(&x, s).unwrap()[0], t, h, h, 1.0);
        (fd - exact[0]).abs()
    };
    let ratio = err(1e-2) / err(5e-3);
    assert!((ratio / 4.0 - 1.0).abs() < 0.2, "{ratio}");
}

#[test]
fn exact_residual_of_zero_field_is_zero() {
    let z = ZeroField { dim: 2 };
    let eps = exact_residual(
        &z,
        &SdeSpec::ve(),
        &[1.0, 2.0],
        0.5,
        &ResidualConfig::default(),
    )
    .unwrap();
    assert_eq!(eps, vec![0.0, 0.0]);
    let eps = exact_residual(
        &z,
        &SdeSpec::vp(),
        &[1.0, 2.0],
        0.5,
        &ResidualConfig::default(),
    )
    .unwrap();
    assert_eq!(eps, vec![0.0, 0.0]);
}

#[test]
fn analytic_score_has_vanishing_residual() {
    let cfg = ResidualConfig {
        h_d: 1e-3,
        ..Default::default()
    };
    let field = gmm_field(SdeSpec::ve());
    for (x, t) in random_points(2, 100, 0.05, 0.95) {
        let eps = exact_residual(&field, &field.sde, &x, t, &cfg).unwrap();
        let norm = (eps[0] * eps[0] + eps[1] * eps[1]).sqrt();
        assert!(norm / 2.0 < 1e-2, "x={x:?} t={t} eps={eps:?}");
    }
    let gauss = AnalyticScoreField::new(GmmSpec::standard_normal(2), SdeSpec::vp());
    for (x, t) in random_points(3, 100, 0.05, 0.95) {
        let eps = exact_residual(&gauss, &gauss.sde, &x, t, &cfg).unwrap();
        let norm = (eps[0] * eps[0] + eps[1] * eps[1]).sqrt();
        assert!(norm / 2.0 < 1e-2, "x={x:?} t={t} eps={eps:?}");
    }
}

#[test]
fn r_fp_of_analytic_field_is_small_for_every_sde() {
    let cfg = ResidualConfig {
        n_points: 128,
        ..Default::default()
    };
    for sde in [SdeSpec::ve(), SdeSpec::vp(), SdeSpec::rve()] {
        let field = gmm_field(sde.clone());
        for t in [0.05, 0.5, 0.95] {
            let r = r_fp(&field, &field.base, &sde, t, &cfg, ResidualMode::Exact, 7).unwrap();
            assert!(r < 1e-2, "{} t={t}: {r}", sde.kind);
        }
    }
}

#[test]
fn r_fp_of_zero_field_is_zero() {
    let z = ZeroField { dim: 2 };
    let cfg = ResidualConfig {
        n_points: 16,
        ..Default::default()
    };
    let gmm = GmmSpec::default();
    for mode in [ResidualMode::Exact, ResidualMode::Estimated] {
        assert_eq!(
            r_fp(&z, &gmm, &SdeSpec::ve(), 0.3, &cfg, mode, 1).unwrap(),
            0.0
        );
    }
}

#[test]
fn estimated_residual_of_zero_network_is_zero() {
    let net = ScoreNet::zeros(NetConfig::default()).unwrap();
    let mut r = rng::stream(0);
    let cfg = ResidualConfig::default();
    match estimated_residual(&net, &SdeSpec::ve(), &[0.5, 1.0], 0.2, &cfg, &mut r).unwrap() {
        ResidualEstimate::Full(e) => assert_eq!(e, vec![0.0, 0.0]),
        other => panic!("{other:?}"),
    }
    let cfg = ResidualConfig {
        projection: true,
        ..cfg
    };
    match estimated_residual(&net, &SdeSpec::ve(), &[0.5, 1.0], 0.2, &cfg, &mut r).unwrap() {
        ResidualEstimate::Projected { value, .. } => assert_eq!(value, 0.0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn isotropic_jacobian_gives_exact_single_probe_divergence() {
    let field = Linear(-0.7);
    let mut r = rng::stream(4);
    let xs = Array2::from_shape_fn((50, 2), |_| rng::normal(&mut r) * 4.0);
    let probes = ProbeDist::Rademacher.draw_batch(&mut r, 50, 2);
    let div = hutchinson_divergence(&field, &xs, &[0.5; 50], &probes, 1e-3).unwrap();
    for d in div {
        assert_relative_eq!(d, -1.4, max_relative = 1e-9);
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn hutchinson_surrogate_is_unbiased() {
    let net = small_net(8);
    let n = 10_000;
    for (k, (x, t)) in random_points(5, 5, 0.05, 0.95).into_iter().enumerate() {
        let exact = net.input_jacobian(&x, t).unwrap().diag().sum();
        for dist in [ProbeDist::Rademacher, ProbeDist::Gaussian] {
            let mut r = rng::stream(100 + k as u64);
            let xs = Array2::from_shape_fn((n, 2), |(_, j)| x[j]);
            let probes = dist.draw_batch(&mut r, n, 2);
            let div = hutchinson_divergence(&net, &xs, &vec![t; n], &probes, 1e-3).unwrap();
            let (mean, se) = mean_and_se(&div);
            assert!(
                (mean - exact).abs() < 3.0 * se + 1e-9,
                "{dist}: {mean} ± {se} vs {exact}"
            );
        }
    }
}

/// Mean of `n` independent estimated residuals at one point.
fn mean_estimate(
    net: &ScoreNet,
    sde: &SdeSpec,
    cfg: &ResidualConfig,
    x: &[f64],
    t: f64,
    n: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    let mut r = rng::stream(seed);
    let xs = Array2::from_shape_fn((n, 2), |(_, j)| x[j]);
    let ts = vec![t; n];
    let (probes, dir) = draw_probes(cfg, &mut r, n, 2);
    let mut ar = FieldArith::new(net);
    let out = estimated_residual_batch(&mut ar, sde, cfg, &xs, &ts, &probes, dir.as_ref()).unwrap();
    let samples = match &dir {
        Some(u) => &out * u,
        None => out,
    };
    (0..2)
        .map(|j| mean_and_se(&samples.column(j).to_vec()))
        .collect()
}

#[test]
fn estimated_residual_is_consistent_with_exact() {
    let net = small_net(9);
    let sde = SdeSpec::ve();
    for projection in [false, true] {
        for dist in [ProbeDist::Rademacher, ProbeDist::Gaussian] {
            let cfg = ResidualConfig {
                projection,
                shared_probe: false,
                probe_dist: dist,
                ..Default::default()
            };
            for (k, (x, t)) in random_points(6, 4, 0.05, 0.6).into_iter().enumerate() {
                let exact = exact_residual(&net, &sde, &x, t, &cfg).unwrap();
                let est = mean_estimate(&net, &sde, &cfg, &x, t, 10_000, k as u64);
                for j in 0..2 {
                    let (m, se) = est[j];
                    assert!(
                        (m - exact[j]).abs() < 3.0 * se + 1e-6 * exact[j].abs(),
                        "projection={projection} {dist}: {m} ± {se} vs {}",
                        exact[j]
                    );
                }
            }
        }
    }
}

#[test]
fn r_dsm_like_reference_values() {
    let sde = SdeSpec::ve();
    let gmm = GmmSpec::default();
    let z = ZeroField { dim: 2 };
    let std1 = sde.kernel_stats(1.0).unwrap().std;
    // Mean of the chi distribution with two degrees of freedom.
    let chi_mean = (std::f64::consts::PI / 2.0).sqrt();
    let r = r_dsm_like(&z, &gmm, &sde, 1.0, 8192, 3).unwrap();
    let expected = chi_mean / std1 / 2.0;
    let se = (2.0 - chi_mean * chi_mean).sqrt() / std1 / 2.0 / (8192f64).sqrt();
    assert!((r - expected).abs() < 3.0 * se, "{r} vs {expected} ± {se}");

    let field = gmm_field(sde.clone());
    let r = r_dsm_like(&field, &gmm, &sde, 1.0, 2048, 3).unwrap();
    assert!(r.is_finite() && r > 0.0 && r < expected);

    assert!(matches!(
        r_dsm_like(&z, &gmm, &sde, 0.0, 16, 3),
        Err(Error::SingularKernel { .. })
    ));
}

#[test]
fn r_dsm_like_vanishes_for_the_transition_score() {
    // A near-point-mass data distribution makes the marginal score the transition score.
    let x0 = vec![1.5, -2.0];
    let gmm = GmmSpec::new(vec![1.0], vec![x0], vec![1e-24]).unwrap();
    for sde in [SdeSpec::ve(), SdeSpec::vp()] {
        let field = AnalyticScoreField::new(gmm.clone(), sde.clone());
        let r = r_dsm_like(&field, &gmm, &sde, 0.5, 256, 1).unwrap();
        assert!(r < 1e-9, "{r}");
    }
}

#[test]
fn sweep_report_and_csv() {
    let field = gmm_field(SdeSpec::ve());
    let cfg = ResidualConfig {
        n_points: 32,
        ..Default::default()
    };
    let rep = residual_sweep(
        &field,
        &field.base,
        &field.sde,
        &[0.2, 0.6],
        &cfg,
        ResidualMode::Exact,
        1,
    )
    .unwrap();
    assert_eq!(rep.r_fp.len(), 2);
    assert!(rep
        .r_fp
        .iter()
        .chain(&rep.r_dsm_like)
        .all(|v| v.is_finite() && *v >= 0.0));
    let csv = rep.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,r_fp,r_dsm_like,n_points,mode"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0].parse::<f64>().unwrap(), 0.2);
    assert_eq!(row[3], "32");
    assert_eq!(row[4], "exact");
    assert!(matches!(
        residual_sweep(
            &field,
            &field.base,
            &field.sde,
            &[],
            &cfg,
            ResidualMode::Exact,
            1
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn sweep_is_reproducible_across_thread_counts() {
    let field = gmm_field(SdeSpec::vp());
    let cfg = ResidualConfig {
        n_points: 200,
        ..Default::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                r_fp(
                    &field,
                    &field.base,
                    &field.sde,
                    0.3,
                    &cfg,
                    ResidualMode::Exact,
                    5,
                )
                .unwrap()
            })
    };
    assert_eq!(run(1).to_bits(), run(3).to_bits());
}

#[test]
fn conservativity_gaps() {
    let field = gmm_field(SdeSpec::ve());
    for (x, t) in random_points(7, 100, 0.0, 1.0) {
        assert!(conservativity_gap(&field, &x, t).unwrap() < 1e-5);
    }
    assert_relative_eq!(
        conservativity_gap(&Rotation, &[0.3, 0.1], 0.5).unwrap(),
        2.0 * 2f64.sqrt(),
        max_relative = 1e-15
    );
}

fn ball_points() -> Vec<Vec<f64>> {
    let mut r = rng::stream(11);
    let mut pts = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![-5.0, -5.0]];
    while pts.len() < 16 {
        let x = vec![
            rng::uniform(&mut r, -8.0, 8.0),
            rng::uniform(&mut r, -8.0, 8.0),
        ];
        if x[0] * x[0] + x[1] * x[1] <= 64.0 {
            pts.push(x);
        }
    }
    pts
}

#[test]
fn bound_holds_for_sine_perturbations() {
    let field = gmm_field(SdeSpec::ve());
    let grid: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let cfg = ResidualConfig::default();
    let pts = ball_points();

    let zero = SinePerturbation {
        amplitude: 0.0,
        dim: 2,
    };
    let rep =
        integrated_residual_bound_check(&field, [0.01; 3], zero, &grid, &pts, &cfg, 50).unwrap();
    assert!(rep.all_hold());

    for delta in [0.01, 0.1] {
        let p = SinePerturbation::with_bound(delta, 2);
        let rep =
            integrated_residual_bound_check(&field, [delta; 3], p, &grid, &pts, &cfg, 50).unwrap();
        assert!(rep.all_hold(), "{}", rep.to_csv());
        assert!(rep.rows.iter().all(|r| r.lhs > 0.0 && r.rhs > 2.0 * delta));
    }
}

#[test]
fn bound_rejects_understated_deltas() {
    let field = gmm_field(SdeSpec::ve());
    let p = SinePerturbation {
        amplitude: 0.01,
        dim: 2,
    };
    let err = integrated_residual_bound_check(
        &field,
        [0.01; 3],
        p,
        &[0.5],
        &ball_points(),
        &ResidualConfig::default(),
        50,
    );
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn config_round_trip() {
    let c = ResidualConfig {
        h_s: 2e-3,
        projection: true,
        shared_probe: false,
        probe_dist: ProbeDist::Gaussian,
        nu_source: NuSource::UnitUniform,
        hutchinson_m: 3,
        ..Default::default()
    };
    let mut cfg = Config::new();
    c.write_config(&mut cfg);
    assert_eq!(ResidualConfig::from_config(&cfg).unwrap(), c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batched_residual_matches_single_points(
        coords in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0, 0.0f64..1.0), 1..6),
    ) {
        let field = gmm_field(SdeSpec::vp());
        let cfg = ResidualConfig::default();
        let xs = Array2::from_shape_fn((coords.len(), 2), |(i, j)| if j == 0 { coords[i].0 } else { coords[i].1 });
        let ts: Vec<f64> = coords.iter().map(|c| c.2).collect();
        let batch = exact_residual_batch(&field, &field.sde, &xs, &ts, &cfg).unwrap();
        for (i, c) in coords.iter().enumerate() {
            let single = exact_residual(&field, &field.sde, &[c.0, c.1], c.2, &cfg).unwrap();
            prop_assert_eq!(single[0].to_bits(), batch[[i, 0]].to_bits());
            prop_assert_eq!(single[1].to_bits(), batch[[i, 1]].to_bits());
        }
    }

    #[test]
    fn stencil_handles_every_time(t in 0.0f64..=1.0, h_s in 1e-4f64..1e-2, h_d in 1e-4f64..1e-2) {
        let st = TimeStencil::new(t, h_s, h_d, 1.0);
        prop_assert!(st.t_minus >= 0.0 && st.t_plus <= 1.0);
        let d = st.apply(|s| s * s, t);
        prop_assert!((d - 2.0 * t).abs() <= h_s.max(h_d) * 1.000001);
    }
}
