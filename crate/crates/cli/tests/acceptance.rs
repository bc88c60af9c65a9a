//! Acceptance checks at GMM scale, one PASS/FAIL line per criterion.
//!
//! Criteria run in order in one process so that trained models are shared
//! and the reported runtimes are not inflated by other tests. Select a
//! subset by number, e.g. `cargo test -p scorefpe-cli --test acceptance -- 1 5 7`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use scorefpe::field::fd_jacobian;
use scorefpe::flow::{self, GridSpec, OdeConfig, Prior};
use scorefpe::residual::{
    self, conservativity_gap, draw_probes, estimated_residual_batch, exact_residual,
    fd_time_derivative, hutchinson_divergence, r_dsm_like, r_fp, sample_nu, NuSource, ProbeDist,
    SinePerturbation,
};
use scorefpe::train::{self, TrainReport};
use scorefpe::{
    rng, AnalyticScoreField, FieldArith, GmmSpec, NetConfig, Objective, ResidualConfig,
    ResidualMode, ScoreField, ScoreNet, SdeKind, SdeSpec, TrainConfig,
};
use scorefpe_cli::commands::ball_points;

const SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Model {
    Dsm,
    FpSmall,
    FpUnit,
    Guided,
}

impl Model {
    fn config(self) -> TrainConfig {
        let base = TrainConfig {
            seed: SEED,
            ..TrainConfig::default()
        };
        match self {
            Model::Dsm => base,
            Model::FpSmall => TrainConfig {
                objective: Objective::FpReg,
                gamma: 0.001,
                ..base
            },
            Model::FpUnit => TrainConfig {
                objective: Objective::FpReg,
                gamma: 1.0,
                ..base
            },
            Model::Guided => TrainConfig {
                objective: Objective::FpeGuided,
                ..base
            },
        }
    }

    fn label(self) -> &'static str {
        match self {
            Model::Dsm => "DSM γ=0",
            Model::FpSmall => "FP_REG γ=0.001",
            Model::FpUnit => "FP_REG γ=1",
            Model::Guided => "FPE_GUIDED",
        }
    }
}

struct Ctx {
    gmm: GmmSpec,
    sde: SdeSpec,
    models: BTreeMap<Model, TrainReport>,
    /// Training seconds spent inside the current criterion.
    trained_now: f64,
}

impl Ctx {
    fn new() -> Self {
        Self {
            gmm: GmmSpec::default(),
            sde: SdeSpec::ve(),
            models: BTreeMap::new(),
            trained_now: 0.0,
        }
    }

    fn model(&mut self, m: Model) -> &TrainReport {
        if !self.models.contains_key(&m) {
            let cfg = m.config();
            let every = (cfg.epochs / 10).max(1);
            let report = train::train_with(&cfg, &self.gmm, &self.sde, None, |e| {
                if (e.epoch + 1) % every == 0 {
                    eprintln!(
                        "    {} epoch {:>5}: loss {:.5}",
                        m.label(),
                        e.epoch + 1,
                        e.total
                    );
                }
            })
            .unwrap_or_else(|f| panic!("{} training failed: {f}", m.label()));
            eprintln!(
                "    {} trained in {:.0} s",
                m.label(),
                report.wall_clock_secs
            );
            self.trained_now += report.wall_clock_secs;
            self.models.insert(m, report);
        }
        &self.models[&m]
    }

    fn net(&mut self, m: Model) -> ScoreNet {
        self.model(m).net.clone()
    }

    fn analytic(&self) -> AnalyticScoreField {
        AnalyticScoreField::new(self.gmm.clone(), self.sde.clone())
    }
}

enum Status {
    Pass,
    Fail,
    /// Soft criterion not met; reported, not gating.
    Warn,
}

struct Outcome {
    status: Status,
    detail: String,
    /// Models whose full training time counts towards this criterion.
    uses: Vec<Model>,
    /// Runtime limit in seconds, if the criterion states one.
    budget: Option<f64>,
}

impl Outcome {
    fn gate(ok: bool, detail: String) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
            uses: Vec::new(),
            budget: None,
        }
    }

    fn budget(mut self, secs: f64) -> Self {
        self.budget = Some(secs);
        self
    }

    fn uses(mut self, m: &[Model]) -> Self {
        self.uses = m.to_vec();
        self
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `n` points uniform on `[-8, 8]²` with `t ~ U[t_lo, t_hi]`.
fn random_points(seed: u64, n: usize, t_lo: f64, t_hi: f64) -> Vec<(Vec<f64>, f64)> {
    let mut r = rng::stream(seed);
    (0..n)
        .map(|_| {
            let x = vec![
                rng::uniform(&mut r, -8.0, 8.0),
                rng::uniform(&mut r, -8.0, 8.0),
            ];
            (x, rng::uniform(&mut r, t_lo, t_hi))
        })
        .collect()
}

fn residual_defaults() -> ResidualConfig {
    ResidualConfig {
        h_s: 1e-3,
        h_d: 5e-4,
        h_x: 1e-3,
        n_points: 512,
        nu_source: NuSource::PerturbedData,
        ..ResidualConfig::default()
    }
}

fn ground_truth_residual(_: &mut Ctx) -> Outcome {
    let cfg = residual_defaults();
    let grid = linspace(0.05, 0.95, 20);
    let mut worst = Vec::new();
    for kind in [SdeKind::VE, SdeKind::VP, SdeKind::RVE] {
        let sde = SdeSpec::new(kind);
        let field = AnalyticScoreField::new(GmmSpec::default(), sde.clone());
        let max = grid
            .iter()
            .map(|&t| {
                r_fp(
                    &field,
                    &field.base,
                    &sde,
                    t,
                    &cfg,
                    ResidualMode::Exact,
                    SEED,
                )
                .unwrap()
            })
            .fold(0.0, f64::max);
        worst.push((kind, max));
    }
    let ok = worst.iter().all(|(_, m)| *m < 1e-2);
    let detail = worst
        .iter()
        .map(|(k, m)| format!("{k} max r_FP {m:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::gate(ok, format!("{detail} (limit 1e-2)")).budget(60.0)
}

fn dsm_residual_gap(ctx: &mut Ctx) -> Outcome {
    let net = ctx.net(Model::Dsm);
    let truth = ctx.analytic();
    let cfg = residual_defaults();
    let (gmm, sde) = (&ctx.gmm, &ctx.sde);
    let small = r_fp(&net, gmm, sde, 0.05, &cfg, ResidualMode::Exact, SEED).unwrap();
    let large = r_fp(&net, gmm, sde, 0.9, &cfg, ResidualMode::Exact, SEED).unwrap();
    let ratio = small / large;

    // The distance to the transition score has an irreducible part that
    // grows like 1/std(t) as t shrinks; the exact score pays it too. The
    // net's excess over the exact score on the same samples is what
    // measures its DSM-like error.
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_raw = 0.0f64;
    for t in linspace(0.1, 0.95, 18) {
        let net_r = r_dsm_like(&net, gmm, sde, t, cfg.n_points, SEED).unwrap();
        let floor = r_dsm_like(&truth, gmm, sde, t, cfg.n_points, SEED).unwrap();
        worst_excess = worst_excess.max(net_r - floor);
        worst_raw = worst_raw.max(net_r);
    }
    let ok = ratio > 5.0 && worst_excess < 1.0;
    Outcome::gate(
        ok,
        format!(
            "r_FP(0.05)/r_FP(0.9) = {small:.3}/{large:.3} = {ratio:.1} (> 5); max r_DSM-like excess over exact score, t ≥ 0.1: {worst_excess:.3} (< 1.0; raw max {worst_raw:.2})"
        ),
    )
    .uses(&[Model::Dsm])
    .budget(20.0 * 60.0)
}

fn density_grid_of(ctx: &Ctx, net: &ScoreNet, grid: &GridSpec) -> flow::DensityGrid {
    flow::density_grid(net, &ctx.sde, grid, &OdeConfig::default()).unwrap()
}

fn regularized_density(ctx: &mut Ctx) -> Outcome {
    let grid = GridSpec::square(-8.0, 8.0, 50);
    let truth = flow::gmm_density_grid(&ctx.gmm, &grid);
    let dsm = ctx.net(Model::Dsm);
    let fp = ctx.net(Model::FpSmall);
    let g0 = density_grid_of(ctx, &dsm, &grid);
    let g1 = density_grid_of(ctx, &fp, &grid);
    let (mae0, mae1) = (g0.mean_abs_error(&truth), g1.mean_abs_error(&truth));
    let (kl0, kl1) = (g0.kl_to(&truth), g1.kl_to(&truth));
    let ok = mae1 < mae0 && kl1 <= 0.8 * kl0;
    Outcome::gate(
        ok,
        format!(
            "mean |Δlog p|: γ=0.001 {mae1:.4} vs γ=0 {mae0:.4} (must be smaller); KL to truth: {kl1:.4} vs {kl0:.4} (ratio {:.3}, ≤ 0.8)",
            kl1 / kl0
        ),
    )
    .uses(&[Model::Dsm, Model::FpSmall])
    .budget(45.0 * 60.0)
}

fn guided_learning(ctx: &mut Ctx) -> Outcome {
    let net = ctx.net(Model::Guided);
    let truth = ctx.analytic();
    let d = ctx.gmm.dim() as f64;
    let mut errors = Vec::new();
    for (k, &t) in [0.25, 0.5, 0.75].iter().enumerate() {
        let mut r = rng::indexed_substream(SEED, "acceptance/guided", k as u64);
        let n = 2000;
        let flat: Vec<f64> = (0..n)
            .flat_map(|_| {
                sample_nu(&ctx.gmm, &ctx.sde, t, NuSource::PerturbedData, &mut r).unwrap()
            })
            .collect();
        let xs = Array2::from_shape_vec((n, 2), flat).unwrap();
        let ts = vec![t; n];
        let s = net.eval_batch(xs.view(), &ts).unwrap();
        let s_true = truth.eval_batch(xs.view(), &ts).unwrap();
        let err = (&s - &s_true)
            .outer_iter()
            .map(|row| row.dot(&row).sqrt())
            .sum::<f64>()
            / n as f64
            / d;
        errors.push((t, err));
    }
    let samples = flow::reverse_sde_sample(&net, &ctx.sde, 1000, 10_000, 1e-3, SEED).unwrap();
    let fractions = flow::component_fractions(&samples.finite(), &ctx.gmm);
    let weight_gap = fractions
        .iter()
        .zip(&ctx.gmm.weights)
        .map(|(f, w)| (f - w).abs())
        .fold(0.0, f64::max);
    let ok = errors.iter().all(|(_, e)| *e < 0.5) && weight_gap <= 0.05 && samples.n_failed() == 0;
    let errs = errors
        .iter()
        .map(|(t, e)| format!("t={t}: {e:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::gate(
        ok,
        format!(
            "score error per dim {errs} (< 0.5); sample weights {:.3}/{:.3} (±0.05 of 0.2/0.8), {} diverged",
            fractions[0],
            fractions[1],
            samples.n_failed()
        ),
    )
    .uses(&[Model::Guided])
    .budget(30.0 * 60.0)
}

fn likelihood_oracle(ctx: &mut Ctx) -> Outcome {
    let field = ctx.analytic();
    let cfg = OdeConfig {
        n_steps: 1000,
        prior: Prior::Mixture(ctx.gmm.perturb(&ctx.sde, ctx.sde.t_max).unwrap()),
        ..OdeConfig::default()
    };
    let pts = random_points(51, 100, 0.0, 1.0);
    let xs = Array2::from_shape_fn((100, 2), |(i, j)| pts[i].0[j]);
    let res = flow::log_likelihood(&field, &ctx.sde, &xs, &cfg).unwrap();
    let mae = res
        .iter()
        .zip(xs.outer_iter())
        .map(|(r, x)| (r.log_density - ctx.gmm.log_density(x.as_slice().unwrap())).abs())
        .sum::<f64>()
        / 100.0;
    Outcome::gate(
        mae < 1e-2,
        format!("mean |log p_ODE − log p| = {mae:.2e} nats (< 1e-2)"),
    )
    .budget(60.0)
}

fn estimator_suite(ctx: &mut Ctx) -> Outcome {
    let n = 10_000;
    let net = ScoreNet::init(NetConfig::default(), 61).unwrap();
    let field = ctx.analytic();
    let sde = ctx.sde.clone();

    // (a) Hutchinson surrogate against the exact trace.
    let mut worst_a = 0.0f64;
    let fields: [&dyn ScoreField; 2] = [&net, &field];
    for (fi, f) in fields.iter().enumerate() {
        for (k, (x, t)) in random_points(62 + fi as u64, 20, 0.05, 0.95)
            .into_iter()
            .enumerate()
        {
            let exact = f.jacobian(&x, t).unwrap().diag().sum();
            for dist in [ProbeDist::Rademacher, ProbeDist::Gaussian] {
                let mut r =
                    rng::indexed_substream(SEED, "acceptance/hutchinson", (fi * 100 + k) as u64);
                let xs = Array2::from_shape_fn((n, 2), |(_, j)| x[j]);
                let probes = dist.draw_batch(&mut r, n, 2);
                let div = hutchinson_divergence(*f, &xs, &vec![t; n], &probes, 1e-3).unwrap();
                let (m, se) = mean_and_se(&div);
                // Rounding allowance for points where the probe variance vanishes.
                let z = (m - exact).abs() / (se + 1e-9 * (1.0 + exact.abs()));
                worst_a = worst_a.max(z);
            }
        }
    }
    let ok_a = worst_a < 3.0;

    // (b) Second-order time stencil on the analytic score.
    let mut ratios = Vec::new();
    for (x, t) in random_points(64, 5, 0.2, 0.8) {
        let exact = field.time_derivative(&x, t).unwrap();
        for (j, &e) in exact.iter().enumerate() {
            let err = |h: f64| {
                (fd_time_derivative(|s| field.score(&x, s).unwrap()[j], t, h, h, 1.0) - e).abs()
            };
            ratios.push(err(1e-2) / err(5e-3));
        }
    }
    let (rmin, rmax) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| {
        (lo.min(r), hi.max(r))
    });
    let ok_b = ratios.iter().all(|r| (r / 4.0 - 1.0).abs() <= 0.2);

    // (c) Projection identity E[⟨ε̂, u⟩u] = ε with an independent direction.
    let mut worst_c = 0.0f64;
    for dist in [ProbeDist::Rademacher, ProbeDist::Gaussian] {
        let cfg = ResidualConfig {
            projection: true,
            shared_probe: false,
            probe_dist: dist,
            ..residual_defaults()
        };
        for (k, (x, t)) in random_points(65, 20, 0.05, 0.95).into_iter().enumerate() {
            let exact = exact_residual(&net, &sde, &x, t, &cfg).unwrap();
            let mut r = rng::indexed_substream(SEED, "acceptance/projection", k as u64);
            let xs = Array2::from_shape_fn((n, 2), |(_, j)| x[j]);
            let (probes, dir) = draw_probes(&cfg, &mut r, n, 2);
            let dir = dir.expect("projection draws a direction");
            let mut ar = FieldArith::new(&net);
            let proj = estimated_residual_batch(
                &mut ar,
                &sde,
                &cfg,
                &xs,
                &vec![t; n],
                &probes,
                Some(&dir),
            )
            .unwrap();
            let samples = &dir * &proj;
            for (j, &e) in exact.iter().enumerate() {
                let (m, se) = mean_and_se(&samples.column(j).to_vec());
                worst_c = worst_c.max((m - e).abs() / se);
            }
        }
    }
    let ok_c = worst_c < 3.0;
    Outcome::gate(
        ok_a && ok_b && ok_c,
        format!(
            "(a) worst Hutchinson deviation {worst_a:.2} SE (< 3); (b) error ratio under h halving in [{rmin:.2}, {rmax:.2}] (4 ± 20%); (c) worst projection deviation {worst_c:.2} SE (< 3)"
        ),
    )
    .budget(120.0)
}

fn bound_check(ctx: &mut Ctx) -> Outcome {
    let field = ctx.analytic();
    let points = ball_points(64, 2, 8.0, SEED);
    let delta = 0.01;
    let report = residual::integrated_residual_bound_check(
        &field,
        [delta; 3],
        SinePerturbation::with_bound(delta, 2),
        &linspace(0.1, 0.9, 9),
        &points,
        &residual_defaults(),
        50,
    )
    .unwrap();
    let tightest = report
        .rows
        .iter()
        .map(|r| r.lhs / r.rhs)
        .fold(0.0, f64::max);
    let held = report.rows.iter().filter(|r| r.holds).count();
    Outcome::gate(
        report.all_hold(),
        format!(
            "bound holds at {held}/{} grid times over 64 points; largest lhs/rhs {tightest:.3}",
            report.rows.len()
        ),
    )
    .budget(120.0)
}

fn mean_asymmetry(net: &ScoreNet, ctx: &Ctx) -> f64 {
    let mut r = rng::substream(SEED, "acceptance/asymmetry");
    let gaps: Vec<f64> = (0..256)
        .map(|_| {
            let t = rng::uniform(&mut r, 0.05, 1.0);
            let x = sample_nu(&ctx.gmm, &ctx.sde, t, NuSource::PerturbedData, &mut r).unwrap();
            conservativity_gap(net, &x, t).unwrap()
        })
        .collect();
    gaps.iter().sum::<f64>() / gaps.len() as f64
}

fn conservativity(ctx: &mut Ctx) -> Outcome {
    let field = ctx.analytic();
    let worst_analytic = random_points(81, 100, 0.05, 1.0)
        .into_iter()
        .map(|(x, t)| {
            let j = fd_jacobian(&field, &x, t, 1e-4).unwrap();
            (&j - &j.t()).mapv(|v| v * v).sum().sqrt()
        })
        .fold(0.0, f64::max);
    let dsm = ctx.net(Model::Dsm);
    let fp = ctx.net(Model::FpUnit);
    let a0 = mean_asymmetry(&dsm, ctx);
    let a1 = mean_asymmetry(&fp, ctx);
    let detail = format!(
        "analytic max ‖J − Jᵀ‖ {worst_analytic:.2e} (< 1e-5); mean net asymmetry γ=1 {a1:.4e} vs γ=0 {a0:.4e}"
    );
    let status = if worst_analytic >= 1e-5 {
        Status::Fail
    } else if a1 <= a0 {
        Status::Pass
    } else {
        Status::Warn
    };
    Outcome {
        status,
        detail,
        uses: vec![Model::Dsm, Model::FpUnit],
        budget: None,
    }
}

fn scorefpe(dir: &Path, args: &[String]) {
    let o = Command::new(env!("CARGO_BIN_EXE_scorefpe"))
        .args(args)
        .arg("--threads")
        .arg("1")
        .arg("--out")
        .arg(dir)
        .env_remove("SCOREFPE_OUT")
        .output()
        .expect("binary runs");
    assert!(
        o.status.success(),
        "scorefpe {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Runs a command, replays it from its resolved config, and compares every artifact byte for byte.
fn replay(root: &Path, name: &str, args: &[&str]) -> Vec<String> {
    let first = root.join(format!("{name}-a"));
    let second = root.join(format!("{name}-b"));
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    scorefpe(&first, &args);
    let resolved = first.join("resolved.cfg").display().to_string();
    scorefpe(&second, &[args[0].clone(), "--config".into(), resolved]);
    let mut mismatched = Vec::new();
    for entry in fs::read_dir(&first).unwrap() {
        let file = entry.unwrap().file_name();
        if file == "manifest.json" {
            continue;
        }
        if fs::read(first.join(&file)).unwrap() != fs::read(second.join(&file)).unwrap() {
            mismatched.push(format!("{name}/{}", file.to_string_lossy()));
        }
    }
    mismatched
}

fn determinism(_: &mut Ctx) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut bad = Vec::new();
    let mut runs = 0;
    let mut check = |name: &str, args: &[&str]| {
        bad.extend(replay(root, name, args));
        runs += 1;
    };
    for kind in ["VE", "VP", "RVE"] {
        let k = format!("sde.kind={kind}");
        check(
            &format!("sweep-{kind}"),
            &["residual-sweep", "--set", "field=analytic", "--set", &k],
        );
    }
    check("bound", &["bound-check"]);
    check(
        "density-analytic",
        &[
            "density",
            "--set",
            "field=analytic",
            "--set",
            "density.prior=data",
            "--set",
            "grid.nx=20",
            "--set",
            "grid.ny=20",
            "--set",
            "ode.n_steps=200",
        ],
    );
    let short = [
        "--set",
        "train.epochs=4",
        "--set",
        "train.dataset_size=2000",
    ];
    for (name, objective, gamma) in [
        ("train-dsm", "DSM", "0"),
        ("train-fp-small", "FP_REG", "0.001"),
        ("train-fp-unit", "FP_REG", "1"),
        ("train-guided", "FPE_GUIDED", "0"),
    ] {
        let o = format!("train.objective={objective}");
        let g = format!("train.gamma={gamma}");
        let mut args = vec!["train", "--set", &o, "--set", &g];
        args.extend(short);
        check(name, &args);
    }
    let ck = format!(
        "checkpoint={}",
        root.join("train-dsm-a").join("checkpoint.json").display()
    );
    check(
        "sweep-net",
        &[
            "residual-sweep",
            "--set",
            &ck,
            "--set",
            "residual.n_points=128",
            "--set",
            "sweep.mode=estimated",
        ],
    );
    check(
        "density-net",
        &[
            "density",
            "--set",
            &ck,
            "--set",
            "grid.nx=12",
            "--set",
            "grid.ny=12",
            "--set",
            "ode.n_steps=50",
        ],
    );
    check(
        "sample-net",
        &[
            "sample",
            "--set",
            &ck,
            "--set",
            "sample.n=2000",
            "--set",
            "sample.n_steps=200",
        ],
    );
    let ok = bad.is_empty();
    Outcome::gate(
        ok,
        if ok {
            format!("{runs} runs replayed from resolved.cfg with --threads 1: all artifacts byte-identical")
        } else {
            format!("artifacts differ on replay: {}", bad.join(", "))
        },
    )
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "ground_truth_residual", ground_truth_residual),
    (2, "dsm_residual_gap", dsm_residual_gap),
    (3, "fp_regularization_improves_density", regularized_density),
    (4, "fpe_guided_learning", guided_learning),
    (5, "likelihood_oracle", likelihood_oracle),
    (6, "estimator_suite", estimator_suite),
    (7, "integrated_residual_bound", bound_check),
    (8, "conservativity", conservativity),
    (9, "determinism", determinism),
];

fn main() {
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if std::env::args().any(|a| a == "--list") {
        for (n, name, _) in CRITERIA {
            println!("criterion_{n}_{name}: test");
        }
        return;
    }
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|(n, name, _)| {
            args.is_empty()
                || args.iter().any(|a| {
                    a.parse::<u32>().ok() == Some(*n)
                        || format!("criterion_{n}_{name}").contains(a.as_str())
                })
        })
        .collect();

    let mut ctx = Ctx::new();
    let mut failed = 0;
    for (n, name, run) in selected {
        eprintln!("criterion {n} ({name}) running");
        ctx.trained_now = 0.0;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| run(&mut ctx)));
        let elapsed = start.elapsed().as_secs_f64();
        let (status, detail, runtime, budget) = match result {
            Ok(o) => {
                let training: f64 = o.uses.iter().map(|m| ctx.models[m].wall_clock_secs).sum();
                let runtime = elapsed - ctx.trained_now + training;
                let over = o.budget.is_some_and(|b| runtime > b);
                let status = match (o.status, over) {
                    (Status::Fail, _) | (_, true) => "FAIL",
                    (Status::Warn, _) => "WARN",
                    (Status::Pass, false) => "PASS",
                };
                (status, o.detail, runtime, o.budget)
            }
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                ("FAIL", msg, elapsed, None)
            }
        };
        if status == "FAIL" {
            failed += 1;
        }
        let budget = budget.map(|b| format!(" of {b:.0} s")).unwrap_or_default();
        println!("[{status}] criterion {n} {name}: {detail} [{runtime:.1} s{budget}]");
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
