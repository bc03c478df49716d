use nalgebra::DMatrix;
use proptest::prelude::*;

use convect_uq::config::RunConfig;
use convect_uq::dnn::{
    flatten_grads, flatten_params, loss, relative_average_percent_error, unflatten_params, AdamState, Dataset,
    MlpNetwork, Scaling, TrainConfig,
};
use convect_uq::grid::{make_grid, midplane_slice, Axis, ScalarField};
use convect_uq::pce::{basis_matrix, fit_collocation, PceBasis};
use convect_uq::sampling::{
    gauss_hermite, hermite_he, latin_hypercube, normal_cdf, normal_inverse_cdf, tensor_grid, tensor_weights,
    Marginal, SampleMatrix,
};
use convect_uq::solver::BoundarySpec;
use convect_uq::uq::{make_strip_boundary, shift_of_mean, RunningStats};

fn axis() -> impl Strategy<Value = Axis> {
    prop_oneof![Just(Axis::X), Just(Axis::Y), Just(Axis::Z)]
}

fn random_field(n: usize, seed: u64) -> ScalarField {
    let g = make_grid(n).unwrap();
    ScalarField::from_index_fn(g, |i, j, k| {
        let h = (i as u64 * 73_856_093) ^ (j as u64 * 19_349_663) ^ (k as u64 * 83_492_791) ^ seed;
        (h % 10_007) as f64 / 10_007.0 - 0.5
    })
}

proptest! {
    #[test]
    fn slices_reassemble_the_field(n in 4usize..10, seed in any::<u64>(), axis in axis()) {
        let f = random_field(n, seed);
        let mut rebuilt = f.grid().zeros();
        for layer in 0..n {
            rebuilt.set_layer(axis, layer, &f.layer(axis, layer));
        }
        prop_assert_eq!(rebuilt, f);
    }

    #[test]
    fn midplane_is_stable_near_cell_centres(n in 4usize..12, cell in 0usize..12, offset in -0.249f64..0.249, axis in axis()) {
        let cell = cell % n;
        let f = random_field(n, 3);
        let h = 1.0 / n as f64;
        let centre = (cell as f64 + 0.5) * h;
        let exact = midplane_slice(&f, axis, centre).unwrap();
        prop_assert_eq!(midplane_slice(&f, axis, centre + offset * h).unwrap(), exact);
    }

    #[test]
    fn lhs_hits_every_stratum_once(n in 1usize..200, dims in 1usize..5, seed in any::<u64>()) {
        let s = latin_hypercube(n, dims, seed).unwrap();
        for c in 0..dims {
            let mut hits = vec![0; n];
            for u in s.column(c) {
                prop_assert!(u > 0.0 && u < 1.0);
                hits[((u * n as f64).floor() as usize).min(n - 1)] += 1;
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }
        prop_assert_eq!(latin_hypercube(n, dims, seed).unwrap(), s);
    }

    #[test]
    fn inverse_cdf_is_monotone_and_inverts(p in 1e-12f64..1.0, q in 1e-12f64..1.0) {
        prop_assume!(p < 1.0 && q < 1.0);
        let (zp, zq) = (normal_inverse_cdf(p).unwrap(), normal_inverse_cdf(q).unwrap());
        if p < q {
            prop_assert!(zp <= zq);
        }
        prop_assert!((normal_cdf(zp) - p).abs() <= 1e-12 * p.max(1e-3));
    }

    #[test]
    fn tensor_grid_size_and_weights(level in 1usize..8, dims in 1usize..4) {
        let g = tensor_grid(level, dims, &vec![0.0; dims], &vec![1.0; dims]).unwrap();
        prop_assert_eq!(g.nrows(), level.pow(dims as u32));
        let w = tensor_weights(level, dims).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pce_reproduces_polynomials_of_its_order(dims in 1usize..4, order in 0usize..4, seed in any::<u64>()) {
        let basis = PceBasis::new(dims, order).unwrap();
        let coeffs: Vec<f64> = (0..basis.len())
            .map(|i| ((seed.wrapping_mul(2_654_435_761).wrapping_add(i as u64 * 97)) % 2001) as f64 / 1000.0 - 1.0)
            .collect();
        let lhs = latin_hypercube(2 * basis.len(), dims, seed).unwrap();
        let marginals = vec![Marginal::Normal { mean: 2.0, std: 0.5 }; dims];
        let samples = lhs.transform(&marginals).unwrap();
        let a = basis_matrix(&basis, &samples).unwrap();
        let y = &a * DMatrix::from_column_slice(basis.len(), 1, &coeffs);
        let model = fit_collocation(&samples, &y, basis).unwrap();
        let probe = latin_hypercube(5, dims, seed ^ 1).unwrap().transform(&marginals).unwrap();
        let pa = basis_matrix(&model.basis, &probe).unwrap();
        let want = &pa * DMatrix::from_column_slice(model.basis.len(), 1, &coeffs);
        for (r, row) in probe.rows().enumerate() {
            let got = model.predict(row).unwrap()[0];
            prop_assert!((got - want[(r, 0)]).abs() <= 1e-9 * want.abs().max().max(1.0));
        }
        if order > 0 && coeffs.iter().skip(1).any(|c| c.abs() > 1e-3) {
            let mut sum = 0.0;
            for j in 0..dims {
                let s = model.total_sobol(j).unwrap()[0];
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
                sum += s;
            }
            prop_assert!(sum >= 1.0 - 1e-10);
        }
    }

    #[test]
    fn additive_models_have_unit_sobol_sum(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
        prop_assume!(a.abs() > 1e-3 || b.abs() > 1e-3 || c.abs() > 1e-3);
        let s = tensor_grid(4, 3, &[0.0; 3], &[1.0; 3]).unwrap();
        let y = DMatrix::from_iterator(s.nrows(), 1, s.rows().map(|r| a * r[0] + b * r[1] * r[1] + c * r[2].powi(3)));
        let m = fit_collocation(&s, &y, PceBasis::new(3, 3).unwrap()).unwrap();
        let sum: f64 = (0..3).map(|j| m.total_sobol(j).unwrap()[0]).sum();
        prop_assert!((sum - 1.0).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backprop_matches_central_differences(
        depth in 2usize..6,
        widths in prop::collection::vec(1usize..9, 5),
        seed in any::<u64>(),
        batch in 1usize..5,
    ) {
        let sizes: Vec<usize> = widths[..depth].to_vec();
        let net = MlpNetwork::new(&sizes, seed).unwrap();
        let x = DMatrix::from_fn(sizes[0], batch, |i, s| ((i * 7 + s * 3) as f64 * 0.37 + seed as f64 * 1e-19).sin());
        let z = DMatrix::from_fn(sizes[depth - 1], batch, |i, s| ((i + 2 * s) as f64 * 0.61).cos());
        let pass = net.forward_batch(&x).unwrap();
        // Skip configurations that sit within a finite-difference step of a kink.
        let hidden = &pass.pre[..pass.pre.len() - 1];
        prop_assume!(hidden.iter().all(|p| p.iter().all(|v| v.abs() > 1e-3)));
        let analytic = flatten_grads(&net.backprop(&x, &z).unwrap());
        let data = Dataset::new(x.transpose(), z.transpose()).unwrap();
        let base = flatten_params(&net);
        let eps = 1e-6;
        let mut probe = net.clone();
        let mut worst = 0.0_f64;
        for (p, g) in analytic.iter().enumerate() {
            let mut shifted = base.clone();
            shifted[p] += eps;
            unflatten_params(&mut probe, &shifted);
            let up = loss(&probe, &data, 0.0).unwrap();
            shifted[p] -= 2.0 * eps;
            unflatten_params(&mut probe, &shifted);
            let down = loss(&probe, &data, 0.0).unwrap();
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - g).abs() / g.abs().max(fd.abs()).max(1e-2));
        }
        prop_assert!(worst < 1e-6, "{}", worst);
    }

    #[test]
    fn batch_gradient_ignores_sample_order(seed in any::<u64>(), batch in 2usize..9, rot in 1usize..8) {
        let net = MlpNetwork::new(&[3, 6, 5, 2], seed).unwrap();
        let x = DMatrix::from_fn(3, batch, |i, s| ((i * 5 + s * 11) as f64 * 0.29).sin());
        let z = DMatrix::from_fn(2, batch, |i, s| ((i + s) as f64 * 0.43).cos());
        let perm: Vec<usize> = (0..batch).map(|s| (s + rot) % batch).collect();
        let xp = DMatrix::from_fn(3, batch, |i, s| x[(i, perm[s])]);
        let zp = DMatrix::from_fn(2, batch, |i, s| z[(i, perm[s])]);
        let a = flatten_grads(&net.backprop(&x, &z).unwrap());
        let b = flatten_grads(&net.backprop(&xp, &zp).unwrap());
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn regularisation_never_lowers_the_loss(seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let net = MlpNetwork::new(&[2, 4, 1], seed).unwrap();
        let x = DMatrix::from_fn(5, 2, |r, c| (r as f64 - 2.0) * 0.3 + c as f64);
        let y = DMatrix::from_fn(5, 1, |r, _| r as f64 * 0.1);
        let data = Dataset::new(x, y).unwrap();
        let plain = loss(&net, &data, 0.0).unwrap();
        prop_assert!(plain >= 0.0);
        prop_assert!(loss(&net, &data, lambda).unwrap() >= plain);
    }

    #[test]
    fn standardisation_round_trips(rows in 2usize..20, cols in 1usize..5, seed in any::<u64>()) {
        let data = DMatrix::from_fn(rows, cols, |r, c| {
            ((seed % 1000) as f64 + (r * 31 + c * 17) as f64).sin() * 10f64.powi(c as i32)
        });
        let s = Scaling::fit(&data);
        let back = s.destandardize(&s.standardize(&data));
        for (a, b) in back.iter().zip(data.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn adam_moments_stay_ordered(grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..30)) {
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(4);
        let mut params = vec![0.0; 4];
        let c2 = |t: u64| 1.0 - cfg.beta2.powi(t as i32);
        for g in &grads {
            st.step(&mut params, g, &cfg);
            for i in 0..4 {
                prop_assert!(st.v[i] >= 0.0);
                prop_assert!(st.v_max[i] >= st.v[i] / c2(st.t) * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn error_metric_is_scale_free(c in 1e-3f64..1e3, seed in any::<u64>()) {
        let truth = DMatrix::from_fn(4, 3, |r, k| 1.0 + ((seed as usize + r * 3 + k) % 7) as f64);
        let pred = truth.map(|v| v * 1.1 - 0.2);
        let base = relative_average_percent_error(&truth, &pred).unwrap();
        let scaled = relative_average_percent_error(&(&truth * c), &(&pred * c)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn streaming_variance_matches_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 2..300), offset in -1e6f64..1e6) {
        let mut rs = RunningStats::new(1);
        for x in &xs {
            rs.push(&[x + offset]);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((rs.mean()[0] - (mean + offset)).abs() <= 1e-10 * (mean + offset).abs().max(1.0));
        prop_assert!((rs.std()[0].powi(2) - var).abs() <= 1e-10 * var.max(1.0));
    }

    #[test]
    fn shift_of_mean_is_the_relative_offset(det in prop::collection::vec(0.5f64..5.0, 1..20), delta in -0.1f64..0.1) {
        let mean: Vec<f64> = det.iter().map(|d| d + delta).collect();
        let (diff, rel) = shift_of_mean(&mean, &det).unwrap();
        for ((d, m), x) in diff.iter().zip(&mean).zip(&det) {
            prop_assert_eq!(*d, m - x);
        }
        let max_det = det.iter().fold(0.0_f64, |a, b| a.max(*b));
        let max_diff = diff.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        prop_assert!((rel - 100.0 * max_diff / max_det).abs() <= 1e-9 * rel.abs().max(1.0));
    }

    #[test]
    fn strips_follow_the_floor_rule(k in 1usize..33, n in 4usize..40) {
        let temps: Vec<f64> = (0..k).map(|s| 1.0 + s as f64 * 0.001).collect();
        let bc = make_strip_boundary(&temps).unwrap();
        let g = make_grid(n).unwrap();
        for j in 0..n {
            let y = g.center(j);
            let s = ((y * k as f64).floor() as usize).min(k - 1);
            prop_assert_eq!(bc.hot_wall_theta(y), temps[s]);
        }
    }

    #[test]
    fn config_round_trips(
        n in 4usize..64,
        ra in 1.0f64..1e7,
        tol in 1e-12f64..1e-2,
        workers in 1usize..8,
        strips in prop::collection::vec(0.9f64..1.2, 0..5),
        seed in any::<u64>(),
        mc in 2usize..100_000,
        enabled in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.grid_n = n;
        cfg.solver.rayleigh = ra;
        cfg.solver.steady_tol = tol;
        cfg.workers = workers;
        if !strips.is_empty() {
            cfg.boundary = make_strip_boundary(&strips).unwrap();
        } else {
            cfg.boundary = BoundarySpec::default();
        }
        cfg.override_seeds(seed);
        cfg.case_a.mc_samples = mc;
        cfg.case_b_enabled = enabled;
        let text = cfg.to_ini();
        let parsed = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.to_ini(), text);
    }
}

#[test]
fn gauss_hermite_nodes_are_roots() {
    for level in 1..=20 {
        let rule = gauss_hermite(level).unwrap();
        assert!((rule.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in rule.nodes.iter().zip(rule.nodes.iter().rev()) {
            assert!((a + b).abs() < 1e-13, "level {level}");
        }
        for (a, b) in rule.weights.iter().zip(rule.weights.iter().rev()) {
            assert_eq!(a, b);
        }
        for &x in &rule.nodes {
            // The three-term recurrence cancels terms as large as this sum,
            // so it bounds what any floating-point root can achieve.
            let (mut a, mut b) = (1.0, x.abs());
            for k in 1..level {
                (a, b) = (b, x.abs() * b + k as f64 * a);
            }
            let scale = b.max(1.0);
            let he = hermite_he(level, x);
            assert!(he.abs() < 1e-10 * scale, "level {level}: He({x}) = {he}, scale {scale}");
        }
        // Exact for polynomial degree 2l - 1: E[z^(2m)] = (2m-1)!!.
        for m in 0..level {
            let want: f64 = (1..=m).map(|i| (2 * i - 1) as f64).product();
            let got = rule.expect(|z| z.powi(2 * m as i32));
            assert!((got - want).abs() <= 1e-10 * want, "level {level}, moment {}", 2 * m);
        }
    }
}

#[test]
fn transformed_lhs_recovers_case_b_marginal() {
    let (mu, sigma) = (1.05, 0.01 / 3.0);
    let s = latin_hypercube(10_000, 1, 9)
        .unwrap()
        .transform(&[Marginal::Normal { mean: mu, std: sigma }])
        .unwrap();
    let col = s.column(0);
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - mu).abs() < 0.01 * mu);
    assert!((std - sigma).abs() < 0.01 * sigma);
}

#[test]
fn pce_moments_match_sampling() {
    let s = tensor_grid(5, 2, &[1e5, 7.5], &[2e3, 0.15]).unwrap();
    let f = |r: &[f64]| (r[0] / 1e5).powf(0.3) * (r[1] / 7.5).sqrt() + 0.01 * (r[0] / 1e5 - 1.0) * r[1];
    let y = DMatrix::from_iterator(s.nrows(), 1, s.rows().map(f));
    let m = fit_collocation(&s, &y, PceBasis::new(2, 4).unwrap()).unwrap();
    let (mean, var) = m.moments();
    let draws = latin_hypercube(100_000, 2, 4).unwrap().transform(&s.marginals).unwrap();
    let vals: Vec<f64> = draws.rows().map(|r| m.predict(r).unwrap()[0]).collect();
    let n = vals.len() as f64;
    let mc_mean = vals.iter().sum::<f64>() / n;
    let mc_var = vals.iter().map(|v| (v - mc_mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (var[0] / n).sqrt();
    assert!((mc_mean - mean[0]).abs() < 3.0 * se_mean, "{mc_mean} vs {}", mean[0]);
    // Standard error of the sample variance of a near-Gaussian output.
    let se_var = var[0] * (2.0 / (n - 1.0)).sqrt();
    assert!((mc_var - var[0]).abs() < 3.0 * se_var, "{mc_var} vs {}", var[0]);
}

#[test]
fn pce_basis_is_orthonormal_under_quadrature() {
    for dims in 1..=3 {
        for order in 0..=4 {
            let basis = PceBasis::new(dims, order).unwrap();
            let s = tensor_grid(order + 1, dims, &vec![0.0; dims], &vec![1.0; dims]).unwrap();
            let w = tensor_weights(order + 1, dims).unwrap();
            let a = basis_matrix(&basis, &s).unwrap();
            let gram = a.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(w)) * &a;
            let eye = DMatrix::<f64>::identity(basis.len(), basis.len());
            assert!((gram - eye).abs().max() < 1e-10, "d={dims} p={order}");
        }
    }
}

#[test]
fn sample_matrix_seed_reproduces() {
    let a = latin_hypercube(17, 3, 42).unwrap();
    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let b = SampleMatrix::read_csv(&buf[..]).unwrap();
    assert_eq!(b.seed, 42);
    assert_eq!(latin_hypercube(b.nrows(), b.ncols(), b.seed).unwrap(), b);
}
