use chrono::NaiveDate;

use robust_alloc::backtest::*;
use robust_alloc::linalg::Matrix;

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn fixture_cov() -> Matrix<f64> {
    Matrix::from_rows(&[vec![0.0256, 0.0012], vec![0.0012, 0.0225]]).unwrap()
}

#[test]
fn csv_round_trip() {
    let s = generate_gbm(&["SPX", "GLD"], 30, &[0.08, 0.04], &fixture_cov(), date("2010-01-04"), 1).unwrap();
    let mut buf = Vec::new();
    write_prices_csv(&s, &mut buf).unwrap();
    let (back, al) = read_prices_csv(&buf[..], true).unwrap();
    assert_eq!(al.dropped, 0);
    assert_eq!(back.assets, s.assets);
    assert_eq!(back.dates, s.dates);
    // closes are written with shortest round-trip formatting
    assert_eq!(back.closes, s.closes);
}

const RAGGED: &str = "date,asset_id,close
2020-01-02,A,10
2020-01-02,B,20
2020-01-03,A,11
2020-01-06,A,12
2020-01-06,B,21
";

#[test]
fn missing_dates_are_dropped_or_rejected() {
    let (s, al) = read_prices_csv(RAGGED.as_bytes(), false).unwrap();
    assert_eq!(al.dropped, 1);
    assert_eq!(s.dates, vec![date("2020-01-02"), date("2020-01-06")]);
    assert_eq!(s.closes, vec![vec![10.0, 12.0], vec![20.0, 21.0]]);
    match read_prices_csv(RAGGED.as_bytes(), true) {
        Err(BacktestError::Unaligned(m)) => assert!(m.contains("2020-01-03")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    let bad = "date,asset_id,close\n2020-01-02,A,10\n2020-01-03,A,abc\n";
    match read_prices_csv(bad.as_bytes(), false) {
        Err(BacktestError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let neg = "date,asset_id,close\n2020-01-02,A,-1\n";
    assert!(matches!(read_prices_csv(neg.as_bytes(), false), Err(BacktestError::Parse { line: 2, .. })));
    let date_err = "date,asset_id,close\n2020-13-02,A,1\n";
    assert!(matches!(read_prices_csv(date_err.as_bytes(), false), Err(BacktestError::Parse { line: 2, .. })));
    let header = "day,asset,close\n";
    assert!(matches!(read_prices_csv(header.as_bytes(), false), Err(BacktestError::Parse { line: 1, .. })));
    let dup = "date,asset_id,close\n2020-01-02,A,1\n2020-01-02,A,2\n";
    assert!(matches!(read_prices_csv(dup.as_bytes(), false), Err(BacktestError::Parse { line: 3, .. })));
}

fn series_from(returns: &[Vec<f64>]) -> PriceSeries {
    let days = returns[0].len() + 1;
    let mut dates = Vec::new();
    let mut d = date("2000-01-03");
    for _ in 0..days {
        dates.push(d);
        d = d.succ_opt().unwrap();
    }
    let closes = returns
        .iter()
        .map(|r| {
            let mut c = vec![100.0];
            for x in r {
                c.push(c.last().unwrap() * (1.0 + x));
            }
            c
        })
        .collect();
    PriceSeries::new(vec!["A".into(), "B".into()], dates, closes).unwrap()
}

#[test]
fn constant_returns_give_annualized_drift_and_no_covariance() {
    let s = series_from(&[vec![0.001; 400], vec![-0.0005; 400]]);
    let win = EstimationWindow { lookback: 300, ..Default::default() };
    let (mu, cov) = estimate_params(&s, &win, 350).unwrap();
    assert!((mu[0] - 0.252).abs() < 1e-12 && (mu[1] + 0.126).abs() < 1e-12, "{mu:?}");
    assert!(cov.frobenius_norm() < 1e-18);
    let z = series_from(&[vec![0.0; 400], vec![0.0; 400]]);
    let (mu, cov) = estimate_params(&z, &win, 350).unwrap();
    assert_eq!((mu, cov.frobenius_norm()), (vec![0.0, 0.0], 0.0));
    assert!(matches!(estimate_params(&z, &win, 299), Err(BacktestError::InsufficientHistory { .. })));
}

#[test]
fn gbm_log_returns_have_the_stated_moments() {
    let cov = fixture_cov();
    let mu = [0.08, 0.04];
    let n = 10_000;
    let s = generate_gbm(&["A", "B"], n + 1, &mu, &cov, date("2010-01-04"), 42).unwrap();
    let dt = 1.0 / 252.0;
    let lr: Vec<Vec<f64>> = (0..2).map(|a| (1..=n).map(|i| (s.closes[a][i] / s.closes[a][i - 1]).ln()).collect()).collect();
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m0, m1) = (m(&lr[0]), m(&lr[1]));
    for (a, mean) in [(0, m0), (1, m1)] {
        let want = (mu[a] - 0.5 * cov[(a, a)]) * dt;
        let se = (cov[(a, a)] * dt / n as f64).sqrt();
        assert!((mean - want).abs() <= 3.0 * se, "asset {a}: {mean} vs {want}");
        let var = lr[a].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // variance of the sample variance of normals: 2σ⁴/(n−1)
        let se_var = (2.0 / (n - 1) as f64).sqrt() * cov[(a, a)] * dt;
        assert!((var - cov[(a, a)] * dt).abs() <= 3.0 * se_var, "asset {a}: {var}");
    }
    // cross-covariance: Var(xy) = σ₁₁σ₂₂ + σ₁₂² for a bivariate normal
    let cross = lr[0].iter().zip(&lr[1]).map(|(x, y)| (x - m0) * (y - m1)).sum::<f64>() / (n - 1) as f64;
    let se_cross = ((cov[(0, 0)] * cov[(1, 1)] + cov[(0, 1)].powi(2)) / (n - 1) as f64).sqrt() * dt;
    assert!((cross - cov[(0, 1)] * dt).abs() <= 3.0 * se_cross, "{cross}");
    // weekdays only
    use chrono::Datelike;
    assert!(s.dates.iter().all(|d| d.weekday().num_days_from_monday() < 5));
}

#[test]
fn gbm_without_volatility_is_deterministic_and_seeded() {
    let zero = Matrix::zeros(2, 2);
    let s = generate_gbm(&["A", "B"], 253, &[0.05, 0.0], &zero, date("2010-01-04"), 7).unwrap();
    assert!((s.closes[0][252] - 100.0 * 0.05f64.exp()).abs() < 1e-9);
    assert!(s.closes[1].iter().all(|&c| (c - 100.0).abs() < 1e-12));
    let a = generate_gbm(&["A", "B"], 50, &[0.05, 0.0], &fixture_cov(), date("2010-01-04"), 7).unwrap();
    let b = generate_gbm(&["A", "B"], 50, &[0.05, 0.0], &fixture_cov(), date("2010-01-04"), 7).unwrap();
    let c = generate_gbm(&["A", "B"], 50, &[0.05, 0.0], &fixture_cov(), date("2010-01-04"), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn cash_only_earns_the_riskless_rate() {
    let dt = 1.0 / 252.0;
    let x = wealth_step(2.0, &[0.0, 0.0], &[0.03, -0.05], &[0.1, 0.2], 0.015, dt);
    assert!((x - 2.0 * (0.015 * dt).exp()).abs() < 1e-15);
    // returns exactly at the drift: exponent is linear
    let x = wealth_step(1.0, &[0.5, 0.25], &[0.1 * dt, 0.2 * dt], &[0.1, 0.2], 0.0, dt);
    assert!((x.ln() - (0.05 + 0.05) * dt).abs() < 1e-15);
}

#[test]
fn backtest_on_the_fixture_runs() {
    let win = EstimationWindow::default();
    let days = win.lookback + 20 + 252 + 1;
    let s = generate_gbm(&["SPX", "GLD"], days, &[0.08, 0.04], &fixture_cov(), date("2010-01-04"), 3).unwrap();
    let starts: Vec<usize> = (win.lookback..win.lookback + 20).collect();
    // robust weights approach the plain ones as the penalty stiffens
    let gap = |lambda0: f64| {
        let res = run_backtest(&s, &BacktestConfig { lambda0, ..Default::default() }, &starts).unwrap();
        assert_eq!(res.summary.portfolios, 20);
        let g = res.rows.iter().map(|r| (0..2).map(|i| (r.robust.alpha[i] - r.nonrobust.alpha[i]).abs()).sum::<f64>()).fold(0.0, f64::max);
        (g, res)
    };
    let gaps: Vec<f64> = [0.01, 1.0, 1e3, 1e6].iter().map(|&l| gap(l).0).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]) && gaps[3] < 1e-2, "{gaps:?}");
    let (_, res) = gap(10.0);
    let mut out = Vec::new();
    write_backtest_csv(&res, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("start_date,robust_lnXT,nonrobust_lnXT,alpha1_r,alpha2_r,alpha1_n,alpha2_n\n"));
    assert_eq!(text.lines().count(), 21);
    assert!(matches!(run_backtest(&s, &BacktestConfig::default(), &[10]), Err(BacktestError::InsufficientHistory { .. })));
}

fn small_noise() -> NoiseConfig {
    NoiseConfig { draws: 4000, ..NoiseConfig::desk(1) }
}

#[test]
fn plain_weights_win_without_noise() {
    let cfg = small_noise();
    let mut gaps = Vec::new();
    for l in [0.01, 1.0, 70.0, 1e4] {
        let (rob, plain) = strategy_weights(&cfg.params, l).unwrap();
        let (ur, un, se) = noise_point(&cfg, &rob, &plain, 0.0).unwrap();
        assert!(ur <= un, "λ {l}");
        assert!(se < 1e-9);
        gaps.push(un - ur);
    }
    // the gap closes as the penalty stiffens
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[3] < 1e-6, "{gaps:?}");
}

#[test]
fn best_penalty_weight() {
    let cfg = small_noise();
    assert_eq!(best_lambda(&cfg, 0.0).unwrap(), 70.0);
    let single = NoiseConfig { lambdas: vec![1.0], ..small_noise() };
    assert_eq!(best_lambda(&single, 0.08).unwrap(), 1.0);
    let picks: Vec<f64> = [0.0, 0.03, 0.06, 0.1].iter().map(|&e| best_lambda(&cfg, e).unwrap()).collect();
    assert!(picks.windows(2).all(|w| w[1] <= w[0]), "{picks:?}");
}

#[test]
fn crossing_points_order_with_the_penalty() {
    let cfg = small_noise();
    let c: Vec<f64> = cfg.lambdas.iter().map(|&l| crossing_point(&cfg, l).unwrap().unwrap()).collect();
    assert!(c.windows(2).all(|w| w[1] <= w[0]), "{c:?}");
}

#[test]
fn crossing_on_a_grid() {
    let f = |x: f64| Ok(x - 0.3);
    assert!((crossing_on_grid(&[0.0, 0.25, 0.5], f, 1e-9).unwrap().unwrap() - 0.3).abs() < 1e-8);
    assert_eq!(crossing_on_grid(&[0.4, 0.5], f, 1e-9).unwrap(), Some(0.4));
    assert_eq!(crossing_on_grid(&[0.0, 0.1], f, 1e-9).unwrap(), None);
    assert_eq!(crossing_on_grid(&[], f, 1e-9).unwrap(), None);
}

#[test]
fn large_noise_is_reported() {
    let s0 = fixture_cov();
    let hit = (0..200).any(|k| matches!(noisy_covariance(&s0, 10.0, 5, k, 1), Err(BacktestError::NoiseTooLarge { .. })));
    assert!(hit);
    // the same stream gives the same matrix at every call
    let a = noisy_covariance(&s0, 0.01, 5, 3, 100).unwrap();
    let b = noisy_covariance(&s0, 0.01, 5, 3, 100).unwrap();
    assert_eq!(a, b);
}

#[test]
fn noise_table_layout() {
    let cfg = NoiseConfig { draws: 10, epsilons: vec![0.0, 0.01], lambdas: vec![1.0], ..NoiseConfig::desk(2) };
    let rows = noise_experiment(&cfg).unwrap();
    let mut out = Vec::new();
    write_noise_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("lambda0,epsilon,robust_eu,nonrobust_eu,se\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn estimates_recover_gbm_parameters() {
    let cov = fixture_cov();
    let mu = [0.08, 0.04];
    let s = generate_gbm(&["A", "B"], 10_001, &mu, &cov, date("2010-01-04"), 43).unwrap();
    let win = EstimationWindow { lookback: 9000, ..EstimationWindow::default() };
    let (m, c) = estimate_params(&s, &win, 10_000).unwrap();
    let dt = 1.0 / 252.0;
    let w2: f64 = win.weights().iter().map(|w| w * w).sum();
    for a in 0..2 {
        // simple daily returns have mean e^{μΔt} − 1
        let want = ((mu[a] * dt).exp() - 1.0) / dt;
        let se = (cov[(a, a)] * dt * w2).sqrt() / dt;
        assert!((m[a] - want).abs() <= 3.0 * se, "drift {a}: {} vs {want}", m[a]);
    }
    let l = (win.lookback - 1) as f64;
    for (i, j) in [(0, 0), (0, 1), (1, 1)] {
        let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / l).sqrt();
        assert!((c[(i, j)] - cov[(i, j)]).abs() <= 3.0 * se, "cov {i}{j}: {}", c[(i, j)]);
    }
}

#[test]
fn crossing_point_shrinks_slowly_with_the_penalty() {
    let cfg = small_noise();
    let c: Vec<f64> = [70.0, 1e3, 1e6].iter().map(|&l| crossing_point(&cfg, l).unwrap().unwrap()).collect();
    assert!(c.windows(2).all(|w| w[1] <= w[0]), "{c:?}");
    assert!(c[2] > 0.0);
}
