use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;

use convect_uq::config::RunConfig;
use convect_uq::pce::{fit_collocation, PceBasis};
use convect_uq::sampling::tensor_grid;
use convect_uq::uq::{MANIFEST_FILE, PCE_SCALARS_FILE};

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convect-uq"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.ini");
    fs::write(&path, cfg.to_ini()).unwrap();
    path
}

fn base(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.join("out");
    cfg.grid_n = 6;
    cfg.solver.rayleigh = 1e4;
    cfg.solver.steady_tol = 1e-4;
    cfg
}

fn conduction(dir: &Path) -> RunConfig {
    let mut cfg = base(dir);
    cfg.solver.buoyancy = false;
    cfg
}

#[test]
fn simulate_conduction_reports_unit_nusselt() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = conduction(tmp.path());
    let o = run(&["simulate"], &write_config(tmp.path(), &cfg));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mean Nu = 1.000"), "{}", stdout(&o));
    let dir = cfg.output_dir.join("simulate");
    for f in ["theta.csv", "u.csv", "v.csv", "w.csv", "pressure.csv", "nu_hot.csv", "diagnostics.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn unconverged_run_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(tmp.path());
    cfg.solver.max_steps = 1;
    cfg.solver.steady_tol = 1e-12;
    let o = run(&["simulate"], &write_config(tmp.path(), &cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("converged = false"));
}

#[test]
fn missing_section_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let text = conduction(tmp.path()).to_ini();
    let start = text.find("[solver]").unwrap();
    let end = start + text[start..].find("\n[").unwrap() + 1;
    let path = tmp.path().join("broken.ini");
    fs::write(&path, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let o = run(&["simulate"], &path);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("solver"));
}

#[test]
fn unknown_key_and_missing_file_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let text = conduction(tmp.path()).to_ini().replace("[grid]\n", "[grid]\nsize = 4\n");
    let path = tmp.path().join("typo.ini");
    fs::write(&path, text).unwrap();
    let o = run(&["simulate"], &path);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("size"));
    assert_eq!(run(&["simulate"], &tmp.path().join("absent.ini")).status.code(), Some(1));
}

#[test]
fn verify_needs_three_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = conduction(tmp.path());
    cfg.verify_sizes = vec![6];
    let o = run(&["verify"], &write_config(tmp.path(), &cfg));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_on_conduction_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = conduction(tmp.path());
    cfg.verify_sizes = vec![4, 6, 8];
    let o = run(&["verify"], &write_config(tmp.path(), &cfg));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("exact"), "{}", stdout(&o));
    let dir = cfg.output_dir.join("verify");
    assert!(dir.join("grid_study.csv").exists());
    assert!(dir.join("centerline_n8.csv").exists());
}

#[test]
fn fitting_before_the_ensemble_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &conduction(tmp.path()));
    assert_eq!(run(&["fit-pce"], &path).status.code(), Some(3));
    assert_eq!(run(&["sobol"], &path).status.code(), Some(3));
    assert_eq!(run(&["propagate"], &path).status.code(), Some(3));
}

#[test]
fn sobol_reports_the_fixture_indices() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = conduction(tmp.path());
    let s = tensor_grid(4, 2, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    let y = DMatrix::from_iterator(s.nrows(), 1, s.rows().map(|r| r[0] + r[0] * r[1]));
    let model = fit_collocation(&s, &y, PceBasis::new(2, 3).unwrap()).unwrap();
    let dir = cfg.output_dir.join("case_a");
    fs::create_dir_all(&dir).unwrap();
    model.write(fs::File::create(dir.join(PCE_SCALARS_FILE)).unwrap()).unwrap();
    let o = run(&["sobol"], &write_config(tmp.path(), &cfg));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("S1_T=1.00 S2_T=0.50"), "{}", stdout(&o));
    assert!(dir.join("sobol.csv").exists());
}

#[test]
fn help_lists_configuration_keys() {
    let o = Command::new(env!("CARGO_BIN_EXE_convect-uq"))
        .args(["propagate", "--help"])
        .output()
        .unwrap();
    let text = stdout(&o);
    for key in ["[solver] steady_tol", "[case_a] mc_samples", "[dnn] amsgrad", "[boundary] hot_strips"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn zero_workers_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &conduction(tmp.path()));
    let o = Command::new(env!("CARGO_BIN_EXE_convect-uq"))
        .args(["simulate", "--workers", "0", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

fn tiny_case_a(dir: &Path) -> RunConfig {
    let mut cfg = base(dir);
    cfg.case_a.mean_ra = 1e4;
    cfg.case_a.levels = vec![2, 3];
    cfg.case_a.n_test = 3;
    cfg.case_a.mc_samples = 2;
    cfg.case_a.surface_resolution = 3;
    cfg.case_a_steady_tol = 1e-3;
    cfg
}

#[test]
fn case_a_chain_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_case_a(tmp.path());
    let path = write_config(tmp.path(), &cfg);
    for cmd in ["ensemble", "fit-pce", "propagate", "sobol"] {
        let o = run(&[cmd], &path);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let dir = cfg.output_dir.join("case_a");
    assert!(dir.join("level_3").join(MANIFEST_FILE).exists());
    assert!(dir.join("stats").join("nu_hot_summary.json").exists());
    // A second ensemble call finds every sample done.
    let o = run(&["ensemble"], &path);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn seed_override_changes_random_inputs_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_case_a(tmp.path());
    let path = write_config(tmp.path(), &cfg);
    let ensemble = |out: &str, seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_convect-uq"))
            .args(["ensemble", "--out-dir", out, "--seed-override", seed, "--config"])
            .arg(&path)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        let test = Path::new(out).join("case_a").join("test");
        let level = Path::new(out).join("case_a").join("level_2");
        (samples_of(&test), samples_of(&level))
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let (test_a, level_a) = ensemble(a.to_str().unwrap(), "5");
    let (test_b, level_b) = ensemble(b.to_str().unwrap(), "6");
    assert_ne!(test_a, test_b);
    assert_eq!(level_a, level_b);
}

fn samples_of(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    text.lines()
        .skip(2)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect()
}
