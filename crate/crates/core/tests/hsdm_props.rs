use hsdm::diagnostics::ks_uniform;
use hsdm::model::{HsdmModel, HsdmOptions, DEFAULT_LAMBDA};
use hsdm::normal;
use hsdm::pipeline::smooth;
use hsdm::simulator::{bimodal_scenario, simulate, LawSpec};
use hsdm::smoothing::SmoothedDay;
use hsdm::trend::TrendUpdate;
use hsdm::model::LogDurationLaw;
use std::sync::OnceLock;

fn pair(seed: u64, n: usize) -> (SmoothedDay, SmoothedDay) {
    let spec = bimodal_scenario(seed, 2, n);
    let sims = simulate(&spec).unwrap();
    (smooth(&sims[0].day, seed, 0).unwrap(), smooth(&sims[1].day, seed, 0).unwrap())
}

/// A pair of days whose session is about as long as its events span.
fn short_session_pair(seed: u64, n: usize) -> (SmoothedDay, SmoothedDay) {
    let mut spec = bimodal_scenario(seed, 2, n);
    spec.day_end_ms = spec.day_start_ms + 1_500 * n as i64;
    let sims = simulate(&spec).unwrap();
    (smooth(&sims[0].day, seed, 0).unwrap(), smooth(&sims[1].day, seed, 0).unwrap())
}

fn fitted() -> &'static (HsdmModel, SmoothedDay) {
    static FIT: OnceLock<(HsdmModel, SmoothedDay)> = OnceLock::new();
    FIT.get_or_init(|| {
        let (train, test) = pair(61, 3_000);
        (HsdmModel::fit(&train, &HsdmOptions::default()).unwrap(), test)
    })
}

#[test]
fn data_from_the_fitted_model_gives_uniform_residuals() {
    let (model, _) = fitted();
    let passed = (0..20u64)
        .filter(|&seed| {
            let day = model.sample_day(3_000, 34_200_000, 57_600_000, seed).unwrap();
            let run = model.predict_day(&day, TrendUpdate::Frozen, DEFAULT_LAMBDA).unwrap();
            ks_uniform(&run.residuals()).unwrap().1 > 0.01
        })
        .count();
    assert!(passed >= 19, "{passed}/20");
}

#[test]
fn full_run_has_no_non_finite_values() {
    let (model, test) = fitted();
    for update in [TrendUpdate::Lse, TrendUpdate::Pm, TrendUpdate::Frozen] {
        let run = model.predict_day(test, update, DEFAULT_LAMBDA).unwrap();
        assert_eq!(run.records.len(), test.len());
        for r in &run.records {
            assert!(r.residual >= 1e-10 && r.residual <= 1.0 - 1e-10);
            assert!(r.log_density.is_finite());
            assert!(r.mu.unwrap().is_finite() && r.sigma.unwrap() > 0.0);
            assert!(r.tau_mean.unwrap().is_finite() && r.tau_sd.unwrap() > 0.0);
        }
    }
}

#[test]
fn submodels_rank_by_their_stages() {
    let full = HsdmOptions::default();
    let no_trend = HsdmOptions { use_trend: false, ..full.clone() };
    let bare = HsdmOptions { use_trend: false, use_arfima: false, ..full.clone() };
    let (mut upper, mut lower) = (0, 0);
    for seed in 0..50u64 {
        let (train, test) = short_session_pair(800 + seed, 1_500);
        let ll = |o: &HsdmOptions| {
            HsdmModel::fit(&train, o).unwrap().predict_day(&test, TrendUpdate::Lse, DEFAULT_LAMBDA).unwrap().total_loglik()
        };
        let (a, b, c) = (ll(&full), ll(&no_trend), ll(&bare));
        upper += usize::from(a >= b);
        lower += usize::from(b >= c);
    }
    assert!(upper >= 40 && lower >= 40, "full >= no-trend in {upper}/50, no-trend >= bare in {lower}/50");
}

#[test]
fn adaptive_trend_beats_frozen_trend_after_a_shift() {
    let mut spec = bimodal_scenario(71, 2, 3_000);
    spec.trend.day_shift = [0.0, 0.0, 0.6, 0.0, 0.0, 0.0];
    let sims = simulate(&spec).unwrap();
    let train = smooth(&sims[0].day, 71, 0).unwrap();
    let test = smooth(&sims[1].day, 71, 0).unwrap();
    let m = HsdmModel::fit(&train, &HsdmOptions::default()).unwrap();
    let frozen = m.predict_day(&test, TrendUpdate::Frozen, DEFAULT_LAMBDA).unwrap().total_loglik();
    let lse = m.predict_day(&test, TrendUpdate::Lse, DEFAULT_LAMBDA).unwrap().total_loglik();
    let pm = m.predict_day(&test, TrendUpdate::Pm, DEFAULT_LAMBDA).unwrap().total_loglik();
    assert!(lse > frozen && pm > frozen, "frozen {frozen}, lse {lse}, pm {pm}");
}

#[test]
fn fit_recovers_the_simulated_structure() {
    // The conditioning on T_{i-1} absorbs latent dependence unless T_{i-1}
    // carries no information about the next latent value: a bimodal law that
    // does not move with T_{i-1}, over a latent series with zero lag-1
    // autocorrelation and unit variance.
    let mut spec = bimodal_scenario(91, 1, 20_000);
    spec.arfima.ma = vec![-0.1198];
    spec.arfima.sigma2 = 0.9624;
    if let LawSpec::Mixture { w1, slope, .. } = &mut spec.law {
        *w1 = 0.0;
        *slope = [0.0, 0.0];
    }
    // Room for every event inside the session, so both time scales agree.
    spec.day_end_ms = spec.day_start_ms + 40_000_000;
    let sim = &simulate(&spec).unwrap()[0];
    let train = smooth(&sim.day, 91, 0).unwrap();
    let m = HsdmModel::fit(&train, &HsdmOptions::default()).unwrap();

    let d = m.arfima.as_ref().unwrap().d;
    assert!((d - spec.arfima.d).abs() <= 0.03, "d = {d}");

    let truth = &sim.truth;
    let midday = m.trend.mean_s(0.5);
    assert!((midday - truth.trend.mean_s(0.5)).abs() <= 0.1, "midday mean {midday} vs {}", truth.trend.mean_s(0.5));

    // True law of T given T_prev: the mixture pushed through the day's mix of
    // trend levels, with the latent variance taken from the simulated trace.
    let var_p = truth.p.iter().map(|p| p * p).sum::<f64>() / truth.p.len() as f64;
    let levels: Vec<(f64, f64)> = truth
        .time_prev_ms
        .iter()
        .step_by(50)
        .map(|&t| {
            let s = truth.trend.s(t);
            (truth.trend.mean_s(s), truth.trend.sd_s(s) * var_p.sqrt())
        })
        .collect();
    let LawSpec::Mixture { center, .. } = spec.law else { unreachable!() };
    for t_prev in [center - 1.0, center, center + 1.0] {
        let law = spec.law_given(t_prev);
        let true_density = |t: f64| {
            let z = law.normal_score(t);
            let jac = (law.ln_density(t) - normal::ln_pdf(z)).exp();
            levels.iter().map(|(m, s)| normal::pdf((z - m) / s) / s).sum::<f64>() / levels.len() as f64 * jac
        };
        let (lo, hi, n) = (-2.0, 14.0, 4_000);
        let h = (hi - lo) / n as f64;
        let l1: f64 = (0..n)
            .map(|i| {
                let t = lo + (i as f64 + 0.5) * h;
                (m.cond_density.density(t, t_prev) - true_density(t)).abs() * h
            })
            .sum();
        assert!(l1 < 0.1, "L1 error {l1} at t_prev {t_prev}");
    }
}
