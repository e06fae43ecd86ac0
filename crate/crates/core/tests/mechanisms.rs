use fusekit::ldp::{
    compose_budget, gaussian_sigma, laplace_density, laplace_perturb, mean_std, multibit_encode,
    multibit_plus_probability, multibit_rectify, rpu, sfu, sfu_value, Accountant, Mechanism, NoiseSpec,
};
use fusekit::{Matrix, PrivacyBudget};

#[test]
fn multibit_scalar_frequencies_match_closed_form() {
    let eps = 3f64.ln();
    let n = 200_000;
    for (w, seed) in [(0.0, 1), (1.0, 2), (0.25, 3)] {
        let enc = multibit_encode(&Matrix::filled(n, 1, w), eps, 1, 0.0, 1.0, &NoiseSpec::new(seed), 1).unwrap();
        let plus = enc.symbols.iter().filter(|&&s| s == 1).count() as f64 / n as f64;
        let expected = multibit_plus_probability(w, eps, 1, 0.0, 1.0);
        assert!((plus - expected).abs() < 0.01, "w={w}: {plus} vs {expected}");
    }
    assert!((multibit_plus_probability(1.0, eps, 1, 0.0, 1.0) - 0.75).abs() < 1e-12);
    assert!((multibit_plus_probability(0.0, eps, 1, 0.0, 1.0) - 0.25).abs() < 1e-12);
}

#[test]
fn rectifier_is_unbiased() {
    let w = [0.1, -0.4, 0.7, 0.0];
    let n = 100_000;
    let features = Matrix::from_fn(n, 4, |_, j| w[j]);
    let enc = multibit_encode(&features, 1.0, 2, -1.0, 1.0, &NoiseSpec::new(5), 1).unwrap();
    let est = multibit_rectify(&enc);
    for (j, &target) in w.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| est[(i, j)]).collect();
        let (mean, sd) = mean_std(&col);
        let se = sd / (n as f64).sqrt();
        assert!((mean - target).abs() <= 3.0 * se, "column {j}: {mean} vs {target} (se {se})");
    }
}

#[test]
fn laplace_moments() {
    let out = laplace_perturb(&Matrix::zeros(1000, 1000), 1.0, 1.0, &NoiseSpec::new(8), 1).unwrap();
    let (mean, sd) = mean_std(out.as_slice());
    assert!(mean.abs() < 0.01);
    assert!((sd * sd - 2.0).abs() < 0.1);
}

#[test]
fn laplace_density_ratio_bounded() {
    for eps in [0.01, 0.1, 1.0, 3.0] {
        let sens = 0.7;
        let scale = sens / eps;
        for k in -200..=200 {
            let x = k as f64 * 0.05;
            let r = laplace_density(x, 0.0, scale) / laplace_density(x, sens, scale);
            assert!(r.ln() <= eps + 1e-12 && r.ln() >= -eps - 1e-12);
        }
    }
}

#[test]
fn gaussian_calibration_and_rpu_variance() {
    assert!((gaussian_sigma(1.0, 1e-5, 1.0).unwrap() - 4.8448).abs() < 1e-3);
    let out = rpu(&Matrix::zeros(1000, 1000), 2.0, &NoiseSpec::new(4), 0);
    let (_, sd) = mean_std(out.as_slice());
    assert!((sd * sd - 4.0).abs() < 0.04);
}

#[test]
fn sfu_is_monotone_and_clamped() {
    let xs: Vec<f64> = (-100..=100).map(|k| k as f64 * 0.05).collect();
    let m = Matrix::from_vec(1, xs.len(), xs.clone()).unwrap();
    let out = sfu(&m, 0.3, 1.1).unwrap();
    let vals = out.as_slice();
    assert!(vals.windows(2).all(|p| p[0] <= p[1]));
    for (&x, &v) in xs.iter().zip(vals) {
        if x <= 0.3 {
            assert_eq!(v, 0.0);
        }
        assert!((0.0..1.0).contains(&v));
    }
    assert!((sfu_value(1.0, 0.0, 1.0) - 0.682_689_492_137_086).abs() < 1e-12);
}

#[test]
fn accountant_composes_and_refuses_reuse() {
    let b = PrivacyBudget::new(0.01, 0.1, 0.1);
    assert_eq!(compose_budget(&b), 0.01 + 0.1 + 0.1);
    let mut acc = Accountant::new();
    acc.charge(Mechanism::Laplace, b.eps_a).unwrap();
    acc.charge(Mechanism::MultiBit, b.eps_w).unwrap();
    acc.charge(Mechanism::Rpu, b.eps_f).unwrap();
    assert_eq!(acc.spent(), compose_budget(&b));
    assert!(matches!(acc.charge(Mechanism::Laplace, b.eps_a), Err(fusekit::Error::BudgetExhausted(_))));
}
