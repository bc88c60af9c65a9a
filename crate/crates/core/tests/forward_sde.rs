use scorefpe::{rng, SdeKind, SdeSpec};

/// Mean and unbiased variance.
fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn simulated_paths_match_the_transition_kernel() {
    let paths = 10_000;
    let x0 = 1.5;
    for kind in [SdeKind::VE, SdeKind::VP, SdeKind::RVE] {
        let sde = SdeSpec::new(kind);
        for (i, &t) in [0.25, 0.5, 1.0].iter().enumerate() {
            let mut r = rng::indexed_substream(3, &format!("em/{kind}"), i as u64);
            let ends: Vec<f64> = (0..paths)
                .map(|_| sde.euler_maruyama_until(&[x0], t, 1000, &mut r).unwrap()[0])
                .collect();
            let (mean, var) = moments(&ends);
            let k = sde.kernel_stats(t).unwrap();
            let want_mean = k.mean_coef * x0;
            let want_var = k.std * k.std;
            let se_mean = (want_var / paths as f64).sqrt();
            let se_var = want_var * (2.0 / (paths as f64 - 1.0)).sqrt();
            assert!(
                (mean - want_mean).abs() < 4.0 * se_mean,
                "{kind} t={t}: mean {mean} vs {want_mean} (se {se_mean})"
            );
            assert!(
                (var - want_var).abs() < 4.0 * se_var,
                "{kind} t={t}: var {var} vs {want_var} (se {se_var})"
            );
        }
    }
}
