//! End-to-end workflows through the public API.

use callback_elr::baseline::{self, TwoSampleData};
use callback_elr::data::{Basis, CallbackDataset, CallbackUnit, Group, ModelSpec, ResponseParams};
use callback_elr::elr::{bic_select, elr_test, ElrOptions};
use callback_elr::em::{fit_full, EmOptions};
use callback_elr::io::{self, Format, Report, TestReport};
use callback_elr::sim::{
    bootstrap_response_comparison, categorize_callbacks, BootstrapOptions, Family, GeneratorConfig, Method,
};
use callback_elr::Execution;

/// Survey-shaped data: lognormal outcomes, two callback categories and
/// roughly half of each group never responding.
fn survey_like(n0: usize, n1: usize, seed: u64) -> CallbackDataset {
    let mut g = GeneratorConfig::reference_design(
        Family::LogNormal { mu: 0.0, sigma: 1.0 },
        Family::LogNormal { mu: 0.1, sigma: 1.0 },
        n0,
        seed,
    );
    g.n1 = n1;
    g.phi0 = ResponseParams::new(vec![-1.0, -0.9], vec![-0.3]);
    g.phi1 = ResponseParams::new(vec![-0.8, -0.6], vec![-0.3]);
    g.simulate().unwrap()
}

fn nonresponse_rate(ds: &CallbackDataset) -> f64 {
    ds.units.iter().filter(|u| u.y.is_none()).count() as f64 / ds.units.len() as f64
}

fn run_workflow(ds: &CallbackDataset, bootstrap_b: usize) {
    let opts = ElrOptions::default();
    let sel = bic_select(ds, 2, &Basis::ALL, &Basis::ALL, &opts).unwrap();
    assert_eq!(sel.cells.len(), 9);
    assert!(sel.cells.iter().all(|c| c.bic.is_some()));
    let best = sel.cells.iter().filter_map(|c| c.bic).fold(f64::INFINITY, f64::min);
    let chosen = sel
        .cells
        .iter()
        .find(|c| c.r_basis == sel.selected.r_basis && c.q_basis == sel.selected.q_basis)
        .unwrap();
    assert_eq!(chosen.bic, Some(best));

    let spec = sel.selected;
    let elr = elr_test(ds, &spec, &opts).unwrap();
    assert!(elr.r_n >= 0.0 && (0.0..=1.0).contains(&elr.p_value));
    assert_eq!(elr.df, spec.q_basis.dim());

    let data = TwoSampleData::from_dataset(ds).unwrap();
    let mut tests = vec![elr.test_result()];
    tests.push(baseline::t_test(&data).unwrap());
    tests.push(baseline::wilcoxon_test(&data).unwrap());
    tests.push(baseline::ks_test(&data).unwrap());
    tests.push(baseline::cai_elr_test(&data, spec.q_basis).unwrap());
    let report = TestReport { spec, level: 0.05, tests };
    let table = io::render(&report, Format::Table).unwrap();
    for name in ["ELR", "t-test", "Wilcoxon", "KS", "Cai's ELR"] {
        assert!(table.contains(name), "{name} missing from\n{table}");
    }
    assert_eq!(report.rows().len(), 5);

    let boot = bootstrap_response_comparison(
        ds,
        &elr.full_fit,
        &BootstrapOptions {
            b: bootstrap_b,
            seed: 11,
            ..BootstrapOptions::default()
        },
    )
    .unwrap();
    // alpha_1, alpha_2 and one slope for r = log y or y; two slopes for (y, log y).
    assert_eq!(boot.rows.len(), 2 + spec.r_basis.dim());
    assert!(boot.rows.iter().all(|r| r.se.is_finite() && r.se > 0.0));
    assert!(boot.low_precision);
}

#[test]
fn survey_shaped_workflow() {
    let ds = survey_like(1000, 1300, 5);
    let rate = nonresponse_rate(&ds);
    assert!((0.40..0.55).contains(&rate), "nonresponse {rate}");
    run_workflow(&ds, 4);
}

#[test]
#[ignore = "full survey scale, several minutes in release"]
fn survey_scale_workflow() {
    let ds = survey_like(10_000, 13_000, 6);
    let rate = nonresponse_rate(&ds);
    assert!((0.40..0.55).contains(&rate), "nonresponse {rate}");
    run_workflow(&ds, 10);
}

#[test]
fn categorized_attempts_feed_the_fitter() {
    let raw = [Some(1), Some(2), Some(4), None, Some(6), Some(3), None, Some(1), Some(5), Some(2)];
    let d = categorize_callbacks(&raw, 3, 6).unwrap();
    assert_eq!(d, vec![1, 1, 2, 3, 2, 1, 3, 1, 2, 1]);
    let ys = [0.7, 1.9, 0.4, 0.0, 2.8, 1.1, 0.0, 0.3, 1.6, 2.2];
    let mut units = Vec::new();
    for rep in 0..6 {
        for (i, (&di, &y)) in d.iter().zip(&ys).enumerate() {
            let group = if (i + rep) % 2 == 0 { Group::Zero } else { Group::One };
            let y = y * (1.0 + 0.05 * rep as f64);
            units.push(if di == 3 {
                CallbackUnit::nonrespondent(group, 2)
            } else {
                CallbackUnit::respondent(group, di, y)
            });
        }
    }
    let ds = CallbackDataset::new(units, 2);
    let fit = fit_full(&ds, &ModelSpec::new(Basis::Log, Basis::Identity, 2), &EmOptions::default()).unwrap();
    assert!(fit.log_el.is_finite());
    assert!(fit.diagnostics.residuals.max_abs() < 1e-6);
}

#[test]
fn csv_round_trip_preserves_the_test() {
    let ds = GeneratorConfig::reference_design(Family::Exp { rate: 1.0 }, Family::Exp { rate: 0.8 }, 150, 9)
        .simulate()
        .unwrap();
    let mut buf = Vec::new();
    io::write_callback_csv_to(&ds, &mut buf).unwrap();
    let back = io::parse_callback_csv(buf.as_slice(), None).unwrap();
    assert_eq!(back, ds);
    let spec = ModelSpec::new(Basis::Log, Basis::Identity, 2);
    let a = Method::Elr.run(&ds, &spec, &EmOptions::default()).unwrap();
    let b = Method::Elr.run(&back, &spec, &EmOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn execution_modes_agree() {
    let g = GeneratorConfig::reference_design(Family::Exp { rate: 1.0 }, Family::Exp { rate: 1.0 }, 120, 4);
    let spec = ModelSpec::new(Basis::Log, Basis::Identity, 2);
    let em = EmOptions::default();
    let par = callback_elr::sim::run_replications(&g, &spec, &Method::ALL, 6, 0, &em, Execution::Parallel);
    let seq = callback_elr::sim::run_replications(&g, &spec, &Method::ALL, 6, 0, &em, Execution::Sequential);
    assert_eq!(par, seq);
}
