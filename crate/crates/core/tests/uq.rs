use std::fs;
use std::path::Path;

use convect_uq::grid::make_grid;
use convect_uq::sampling::{Marginal, SampleMatrix};
use convect_uq::solver::SolverConfig;
use convect_uq::uq::*;

fn quick_solver() -> SolverConfig {
    SolverConfig {
        steady_tol: 1e-3,
        ..SolverConfig::new(1e4, 7.5)
    }
}

fn ra_pr_rows(rows: &[[f64; 2]]) -> SampleMatrix {
    let marginals = vec![
        Marginal::Normal { mean: 1e4, std: 200.0 },
        Marginal::Normal { mean: 7.5, std: 0.15 },
    ];
    SampleMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect(), marginals, 0).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn single_sample_matches_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let samples = ra_pr_rows(&[[1e4, 7.5]]);
    let m = run_ensemble(&EnsembleKind::RaPr, &samples, &quick_solver(), g, tmp.path(), 1).unwrap();
    assert_eq!(m.counts(), (1, 0, 0));
    let stored = load_outputs(tmp.path(), 0).unwrap();
    let direct = solve_sample(&EnsembleKind::RaPr, &[1e4, 7.5], &quick_solver(), g).unwrap();
    assert_eq!(stored, direct);
}

#[test]
fn resume_recomputes_only_missing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let samples = ra_pr_rows(&[[9e3, 7.0], [1e4, 7.5], [1.1e4, 8.0]]);
    let kind = EnsembleKind::RaPr;
    run_ensemble(&kind, &samples, &quick_solver(), g, tmp.path(), 1).unwrap();
    let before = snapshot(tmp.path());
    let stamp = |id: usize| {
        fs::metadata(tmp.path().join(sample_file(id, "u_mid.csv")))
            .unwrap()
            .modified()
            .unwrap()
    };
    let (t0, t2) = (stamp(0), stamp(2));
    std::thread::sleep(std::time::Duration::from_millis(20));
    fs::remove_file(tmp.path().join(sample_file(1, "theta_mid.csv"))).unwrap();
    let m = run_ensemble(&kind, &samples, &quick_solver(), g, tmp.path(), 1).unwrap();
    assert_eq!(m.counts(), (3, 0, 0));
    assert_eq!(stamp(0), t0);
    assert_eq!(stamp(2), t2);
    assert!(stamp(1) > t0);
    assert_eq!(snapshot(tmp.path()), before);
}

#[test]
fn worker_count_does_not_change_artifacts() {
    let g = make_grid(6).unwrap();
    let samples = ra_pr_rows(&[[9e3, 7.0], [1e4, 7.5], [1.1e4, 8.0], [1.2e4, 7.2]]);
    let one = tempfile::tempdir().unwrap();
    let two = tempfile::tempdir().unwrap();
    run_ensemble(&EnsembleKind::RaPr, &samples, &quick_solver(), g, one.path(), 1).unwrap();
    run_ensemble(&EnsembleKind::RaPr, &samples, &quick_solver(), g, two.path(), 3).unwrap();
    assert_eq!(snapshot(one.path()), snapshot(two.path()));
}

#[test]
fn changed_specification_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    run_ensemble(&EnsembleKind::RaPr, &ra_pr_rows(&[[1e4, 7.5]]), &quick_solver(), g, tmp.path(), 1).unwrap();
    let err = run_ensemble(&EnsembleKind::RaPr, &ra_pr_rows(&[[2e4, 7.5]]), &quick_solver(), g, tmp.path(), 1);
    assert!(matches!(err, Err(UqError::SpecMismatch { .. })));
}

#[test]
fn failing_samples_are_recorded_and_limit_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let cfg = SolverConfig {
        max_cg_iterations: 1,
        ..quick_solver()
    };
    let err = run_ensemble(&EnsembleKind::RaPr, &ra_pr_rows(&[[1e4, 7.5], [1.1e4, 7.5]]), &cfg, g, tmp.path(), 1);
    assert!(matches!(err, Err(UqError::TooManyFailures { failed: 2, total: 2 })));
    let m = EnsembleManifest::read(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.failed_ids(), vec![0, 1]);
}

#[test]
fn manifest_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let m = EnsembleManifest {
        kind: "ra_pr".into(),
        seed: 7,
        spec_hash: 0xdead_beef,
        rows: vec![
            ManifestRow {
                id: 0,
                inputs: vec![1e4, 0.1 + 0.2],
                status: SampleStatus::Done,
            },
            ManifestRow {
                id: 1,
                inputs: vec![-3.5, 7.25],
                status: SampleStatus::Failed,
            },
        ],
    };
    let path = tmp.path().join(MANIFEST_FILE);
    m.write(&path).unwrap();
    assert_eq!(EnsembleManifest::read(&path).unwrap(), m);
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("sample_id,xi_1,xi_2,status,nu_hot"));
}

fn tiny_case_a(rel_sigma: f64) -> CaseASpec {
    CaseASpec {
        mean_ra: 1e4,
        rel_sigma,
        levels: vec![2, 3],
        n_test: 4,
        mc_samples: 64,
        surface_resolution: 5,
        ..CaseASpec::default()
    }
}

#[test]
fn case_a_pipeline_on_a_coarse_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let res = case_a_pipeline(&tiny_case_a(0.02), &quick_solver(), g, tmp.path(), 1).unwrap();
    assert_eq!(res.fit.reports.len(), 2);
    assert_eq!(res.fit.reports[1].samples, 9);
    for (name, s) in &res.sobol {
        let s = s.as_ref().unwrap_or_else(|| panic!("{name} has no variance"));
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)), "{name}: {s:?}");
    }
    for q in Quantity::ALL {
        let stats = tmp.path().join("stats");
        assert!(stats.join(format!("{}_summary.json", q.name())).exists());
        assert!(stats.join(format!("{}_ratio.csv", q.name())).exists());
    }
    assert!(tmp.path().join("collocation_error.csv").exists());
    assert!(tmp.path().join("response_surface_mean_nu.csv").exists());
    for sf in &res.propagation.stats {
        assert!(sf.std.data().iter().all(|&v| v >= 0.0));
        let diff: Vec<f64> = sf
            .mean
            .data()
            .iter()
            .zip(sf.deterministic.data())
            .map(|(m, d)| m - d)
            .collect();
        assert_eq!(sf.difference.data(), &diff[..]);
    }
}

#[test]
fn case_a_without_spread_has_no_variance() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let res = case_a_pipeline(&tiny_case_a(0.0), &quick_solver(), g, tmp.path(), 1).unwrap();
    let (_, vars) = &res.propagation.moments;
    assert!(vars.iter().all(|&v| v == 0.0), "{vars:?}");
    assert!(res.sobol.iter().all(|(_, s)| s.is_none()));
}

fn tiny_case_b(sigma: f64) -> CaseBSpec {
    let mut spec = CaseBSpec {
        strips: 2,
        sigma_temp: sigma,
        rayleigh: 1e4,
        n_train: 6,
        n_val: 2,
        n_test: 2,
        mc_samples: 32,
        ..CaseBSpec::default()
    };
    spec.train.epochs = 30;
    spec.train.batch_size = 0;
    spec
}

#[test]
fn case_b_pipeline_on_a_coarse_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let res = case_b_pipeline(&tiny_case_b(0.01 / 3.0), &quick_solver(), g, tmp.path(), 1).unwrap();
    assert_eq!(res.training.networks.len(), 4);
    assert!(res.training.errors.iter().all(|e| e.test_percent.is_finite()));
    assert!(res.training.excluded.is_empty());
    assert!(tmp.path().join("dnn_error.csv").exists());
    assert!(tmp.path().join("loss_nu_hot.csv").exists());
    assert!(res.propagation.strip_ratio.is_finite());
    assert_eq!(res.propagation.stats.len(), 4);
}

#[test]
fn case_b_without_spread_reproduces_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let res = case_b_pipeline(&tiny_case_b(0.0), &quick_solver(), g, tmp.path(), 1).unwrap();
    for sf in &res.propagation.stats {
        assert_eq!(sf.max_std(), 0.0);
        let scale = sf.deterministic.max_abs();
        assert!(sf.max_abs_difference() < 0.05 * scale, "{:?}", sf.quantity);
    }
}

#[test]
fn pipeline_steps_require_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(case_a_fit(&tiny_case_a(0.02), tmp.path()), Err(UqError::Missing(_))));
    assert!(matches!(case_b_train(&tiny_case_b(0.01), tmp.path()), Err(UqError::Missing(_))));
    let g = make_grid(6).unwrap();
    assert!(matches!(
        case_b_propagate(&tiny_case_b(0.01), tmp.path(), &g),
        Err(UqError::Missing(_))
    ));
}

#[test]
fn surrogate_error_on_solver_test_points_tracks_the_fit_residual() {
    let tmp = tempfile::tempdir().unwrap();
    let g = make_grid(6).unwrap();
    let spec = CaseASpec {
        n_test: 10,
        levels: vec![4, 5],
        ..tiny_case_a(0.02)
    };
    let solver = SolverConfig {
        steady_tol: 1e-9,
        ..quick_solver()
    };
    case_a_ensembles(&spec, &solver, g, tmp.path(), 1).unwrap();
    let fit = case_a_fit(&spec, tmp.path()).unwrap();
    for r in &fit.reports {
        assert!(
            r.test_error[0] < 10.0 * r.fit_residual[0],
            "level {}: test {:e}, fit {:e}",
            r.level,
            r.test_error[0],
            r.fit_residual[0]
        );
    }
}
