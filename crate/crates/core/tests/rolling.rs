use precis::backtest::{oos_variance, run_rolling, RollingConfig, StrategyKind, StrategySpec};
use precis::linalg;
use precis::simulate::FactorModel;

fn strategies(kinds: &[StrategyKind]) -> Vec<StrategySpec> {
    kinds
        .iter()
        .map(|&k| {
            let spec = StrategySpec::new(k);
            if k.is_penalized() {
                spec.with_rho(0.5)
            } else {
                spec
            }
        })
        .collect()
}

#[test]
fn perturbing_the_evaluation_month_leaves_its_weights_untouched() {
    let panel = FactorModel::industry_like(8, 21).panel(70, 22);
    let config = RollingConfig {
        window_length: 50,
        strategies: strategies(&StrategyKind::ALL),
        ..RollingConfig::default()
    };
    let base = run_rolling(&panel, &config).unwrap();
    let t = 60;
    let mut shocked = panel.clone();
    for j in 0..shocked.n_assets() {
        shocked.returns[(t, j)] += 25.0 * (j as f64 - 3.5);
    }
    let moved = run_rolling(&shocked, &config).unwrap();
    for (a, b) in base.iter().zip(&moved) {
        let (wa, wb) = (a.fit_for(t).unwrap(), b.fit_for(t).unwrap());
        assert_eq!(wa.weights, wb.weights, "{}", a.label);
        assert_ne!(wa.oos_return, wb.oos_return, "{}", a.label);
        if a.spec.kind != StrategyKind::EqualWeight {
            assert_ne!(a.fit_for(t + 1).unwrap().weights, b.fit_for(t + 1).unwrap().weights, "{}", a.label);
        }
    }
}

#[test]
fn identical_inputs_give_identical_runs() {
    let panel = FactorModel::industry_like(6, 31).panel(60, 32);
    let config = RollingConfig {
        window_length: 40,
        strategies: strategies(&StrategyKind::ALL),
        tuning_grid: vec![0.0, 0.5, 1.0],
        ..RollingConfig::default()
    };
    let a = serde_json::to_string(&run_rolling(&panel, &config).unwrap()).unwrap();
    let b = serde_json::to_string(&run_rolling(&panel, &config).unwrap()).unwrap();
    assert_eq!(a, b);
}

/// For i.i.d. Gaussian returns the expected out-of-sample variance of the
/// sample MVP is `(e' Sigma^-1 e)^-1 (T - 2) / (T - p - 1)`.
#[test]
fn sample_mvp_variance_matches_the_wishart_adjustment() {
    let (p, t_len, horizon, seeds) = (10, 120, 60, 50u64);
    let model = FactorModel::industry_like(p, 41);
    let sigma = model.covariance();
    let psi = linalg::invert_spd(&sigma).unwrap();
    let min_var = 1.0 / psi.as_matrix().sum();
    let expect = min_var * (t_len as f64 - 2.0) / (t_len as f64 - p as f64 - 1.0);

    let config = RollingConfig {
        window_length: t_len,
        strategies: vec![StrategySpec::new(StrategyKind::Sample)],
        ..RollingConfig::default()
    };
    let mean_var = (0..seeds)
        .map(|seed| {
            let panel = model.panel(t_len + horizon, 1000 + seed);
            oos_variance(&run_rolling(&panel, &config).unwrap()[0]).unwrap()
        })
        .sum::<f64>()
        / seeds as f64;
    let rel = (mean_var - expect).abs() / expect;
    assert!(rel < 0.15, "mean OOS variance {mean_var}, expected {expect}");
}
