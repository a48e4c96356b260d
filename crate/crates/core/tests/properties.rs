//! Invariants of the imputation probabilities, the donor selection and the
//! imputers, checked on random and hand-built instances.

mod common;

use std::collections::HashSet;

use bknni::data::{Dataset, ImputedDataset};
use bknni::donor::{expected_aux_total, select_donors};
use bknni::imputers::{impute_bknn, ImputerConfig, Method, PreparedImputer};
use bknni::neighbors::knn_sets;
use bknni::psi::{compute_psi_bknn, psi_knn, PsiMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    prop::collection::vec((0u32..60, 0u32..60, prop::bool::weighted(0.35), 1u32..4), 10..26).prop_filter_map(
        "need respondents and nonrespondents",
        |units| {
            let n_m = units.iter().filter(|u| u.2).count();
            if n_m == 0 || units.len() - n_m < 5 {
                return None;
            }
            Dataset::with_constant(
                (1..=units.len()).map(|i| format!("u{i}")).collect(),
                units.iter().map(|u| u.3 as f64).collect(),
                vec!["a".into(), "b".into()],
                units.iter().map(|u| vec![u.0 as f64, (u.1 as f64).sqrt()]).collect(),
                units
                    .iter()
                    .map(|u| (!u.2).then_some((u.0 * 3 + u.1) as f64))
                    .collect(),
            )
            .ok()
        },
    )
}

fn assert_column_stochastic(psi: &PsiMatrix) {
    for (m, s) in psi.column_sums().iter().enumerate() {
        assert!((s - 1.0).abs() < 1e-9, "column {m} sums to {s}");
    }
    assert!(psi.columns.iter().flatten().all(|e| e.1 >= 0.0));
}

/// Balanced probabilities when they exist, kNN probabilities otherwise.
fn some_psi(ds: &Dataset, k: usize) -> Option<(PsiMatrix, PsiMatrix)> {
    let psi0 = psi_knn(&knn_sets(ds, k).ok()?, ds);
    let psi = compute_psi_bknn(&psi0, ds, TOL, 500).unwrap_or_else(|_| psi0.clone());
    Some((psi0, psi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probabilities_are_column_stochastic(ds in dataset_strategy(), k in 1usize..6) {
        let k = k.min(ds.n_r());
        let Some((psi0, psi)) = some_psi(&ds, k) else { return Ok(()) };
        assert_column_stochastic(&psi0);
        assert_column_stochastic(&psi);
        let support0 = psi0.support();
        prop_assert!(psi.support().is_subset(&support0));
        if let Ok(b) = compute_psi_bknn(&psi0, &ds, TOL, 500) {
            prop_assert!(b.max_balance_residual() <= TOL);
        }
    }

    #[test]
    fn one_donor_within_support(ds in dataset_strategy(), k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(ds.n_r());
        let Some((_, psi)) = some_psi(&ds, k) else { return Ok(()) };
        let support = psi.support();
        let a = select_donors(&psi, &ds, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a.donor_of.len(), ds.n_m());
        for (&j, &i) in a.recipients.iter().zip(&a.donor_of) {
            prop_assert!(support.contains(&(i, j)));
        }
        let expected = expected_aux_total(&psi, &ds);
        for q in 0..ds.q() {
            let realized: f64 = a.recipients.iter().zip(&a.donor_of).map(|(&j, &i)| ds.weight(j) * ds.x(i)[q]).sum();
            prop_assert!((a.balance_gap[q] - (realized - expected[q]).abs()).abs() <= 1e-9 * (1.0 + expected[q].abs()));
        }
    }

    #[test]
    fn implied_weight_identity(ds in dataset_strategy(), k in 2usize..6) {
        let k = k.min(ds.n_r());
        let Some((_, psi)) = some_psi(&ds, k) else { return Ok(()) };
        let w = psi.implied_weights(&ds);
        let theta = psi.implied_response_propensities(&ds);
        for ((&i, w), t) in ds.respondents().iter().zip(w).zip(theta) {
            prop_assert!((w - ds.weight(i) / t).abs() <= 1e-12 * w.max(1.0));
        }
    }

    #[test]
    fn edit_rules_are_respected(ds in dataset_strategy(), k in 2usize..6, seed in any::<u64>()) {
        let k = k.min(ds.n_r());
        prop_assume!(k >= 2);
        let knn = knn_sets(&ds, k).unwrap();
        // forbid the nearest neighbor of every other recipient
        let forbidden: HashSet<(usize, usize)> = ds
            .nonrespondents()
            .iter()
            .zip(&knn.neighbors)
            .step_by(2)
            .map(|(&j, nb)| (nb[0], j))
            .collect();
        let mut cfg = ImputerConfig::new(Method::Bknni, k);
        cfg.forbidden = forbidden.clone();
        let out = impute_bknn(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assume!(out.is_ok());
        let out = out.unwrap();
        prop_assert!(out.psi.support().is_disjoint(&forbidden));
        for (&j, &i) in out.assignment.recipients.iter().zip(&out.assignment.donor_of) {
            prop_assert!(!forbidden.contains(&(i, j)));
        }
    }

    #[test]
    fn imputed_values_are_observed(ds in dataset_strategy(), seed in any::<u64>()) {
        let observed: HashSet<u64> = ds.respondents().iter().map(|&i| ds.y_obs(i).to_bits()).collect();
        for method in Method::ALL {
            let imp = match PreparedImputer::prepare(&ds, &ImputerConfig::new(method, 3.min(ds.n_r()))) {
                Ok(imp) => imp,
                Err(_) => continue,
            };
            let out = imp.impute(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(out.y_star.iter().all(|v| observed.contains(&v.to_bits())), "{}", method);
        }
    }
}

fn one_dim(x: &[f64], missing: &[usize], y: impl Fn(f64) -> f64) -> Dataset {
    Dataset::census(
        x.iter().map(|&v| vec![v]).collect(),
        (0..x.len()).map(|i| (!missing.contains(&i)).then(|| y(x[i]))).collect(),
    )
    .unwrap()
}

fn empirical_marginals(psi: &PsiMatrix, ds: &Dataset, runs: usize, seed: u64) -> (Vec<(usize, usize, f64, f64)>, HashSet<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = std::collections::HashMap::new();
    let mut seen = HashSet::new();
    for _ in 0..runs {
        let a = select_donors(psi, ds, &mut rng);
        for (&j, &i) in a.recipients.iter().zip(&a.donor_of) {
            *counts.entry((i, j)).or_insert(0usize) += 1;
        }
        seen.insert(a.donor_of);
    }
    let cells = psi
        .columns
        .iter()
        .zip(&psi.recipients)
        .flat_map(|(col, &j)| col.iter().map(move |&(i, p)| (i, j, p)))
        .map(|(i, j, p)| (i, j, p, *counts.get(&(i, j)).unwrap_or(&0) as f64 / runs as f64))
        .collect();
    (cells, seen)
}

fn within_four_sigma(p: f64, mean: f64, runs: usize) -> bool {
    (mean - p).abs() <= 4.0 * (p * (1.0 - p) / runs as f64).sqrt()
}

#[test]
fn brute_force_oracle_on_small_instances() {
    const R: usize = 20_000;
    let instances = [
        one_dim(&[1.0, 2.0, 2.5, 4.0, 5.0], &[2], |x| 3.0 * x),
        one_dim(&[1.0, 2.0, 3.0, 3.5, 4.5, 6.0], &[2, 3], |x| x * x),
        one_dim(&[0.0, 1.0, 2.0, 2.2, 3.0, 3.9, 4.0, 5.0], &[3, 5, 2], |x| x + 1.0),
    ];
    for (n, ds) in instances.iter().enumerate() {
        let k = 3.min(ds.n_r());
        let psi0 = psi_knn(&knn_sets(ds, k).unwrap(), ds);
        let psi = compute_psi_bknn(&psi0, ds, 1e-9, 1000).unwrap();
        assert!(psi.n_columns() <= 3 && psi.columns.iter().all(|c| c.len() <= 3));

        // every donor assignment the support allows
        let mut all: Vec<Vec<usize>> = vec![Vec::new()];
        for col in &psi.columns {
            all = all
                .into_iter()
                .flat_map(|prefix| {
                    col.iter().filter(|e| e.1 > 0.0).map(move |e| {
                        let mut v = prefix.clone();
                        v.push(e.0);
                        v
                    })
                })
                .collect();
        }
        let all: HashSet<Vec<usize>> = all.into_iter().collect();

        let (cells, seen) = empirical_marginals(&psi, ds, R, 100 + n as u64);
        assert!(seen.is_subset(&all), "instance {n}: assignment outside the enumeration");
        for (i, j, p, mean) in cells {
            assert!(within_four_sigma(p, mean, R), "instance {n} cell ({i},{j}): psi {p}, mean {mean}");
        }
    }
}

#[test]
fn exact_balance_instance_has_zero_gap() {
    // two recipients at x = 2 between donors at 1 and 3: the mixed completions
    // balance exactly, and ψ = 1/2 everywhere
    const R: usize = 20_000;
    let ds = one_dim(&[1.0, 2.0, 2.0, 3.0], &[1, 2], |x| x);
    let psi0 = psi_knn(&knn_sets(&ds, 2).unwrap(), &ds);
    let psi = compute_psi_bknn(&psi0, &ds, 1e-12, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let a = select_donors(&psi, &ds, &mut rng);
        assert!(a.balance_gap.iter().all(|&g| g < 1e-9), "{:?}", a.balance_gap);
    }
    let (cells, _) = empirical_marginals(&psi, &ds, R, 10);
    for (i, j, p, mean) in cells {
        assert!((p - 0.5).abs() < 1e-12);
        assert!(within_four_sigma(p, mean, R), "cell ({i},{j}): mean {mean}");
    }
}

#[test]
fn quarter_instance_outcomes() {
    const R: usize = 20_000;
    let ds = one_dim(&[1.0, 3.0, 2.5], &[2], |x| 2.0 * x);
    let psi0 = psi_knn(&knn_sets(&ds, 2).unwrap(), &ds);
    let psi = compute_psi_bknn(&psi0, &ds, 1e-12, 500).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sum = 0.0;
    for _ in 0..R {
        let a = select_donors(&psi, &ds, &mut rng);
        let x = ds.x(a.donor_of[0])[1];
        assert!(x == 1.0 || x == 3.0);
        let y = ImputedDataset::from_donors(&ds, a.donor_of).y_star[0];
        assert!(y == 2.0 || y == 6.0);
        sum += x;
    }
    // outcome 3 with probability 3/4, else 1
    let sd = 2.0 * (0.75f64 * 0.25).sqrt();
    assert!((sum / R as f64 - 2.5).abs() <= 4.0 * sd / (R as f64).sqrt());
}

#[test]
fn constant_only_selection_matches_multinomial() {
    const R: usize = 20_000;
    let ds = Dataset::new(
        (1..=6).map(|i| i.to_string()).collect(),
        vec![1.0; 6],
        vec!["const".into()],
        vec![vec![1.0]; 6],
        vec![Some(1.0), None, Some(2.0), Some(3.0), None, Some(4.0)],
    )
    .unwrap();
    let psi = psi_knn(&knn_sets(&ds, 3).unwrap(), &ds);
    let (cells, _) = empirical_marginals(&psi, &ds, R, 12);
    for (i, j, p, mean) in cells {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        assert!(within_four_sigma(p, mean, R), "cell ({i},{j}): mean {mean}");
    }
}

#[test]
fn homogeneous_neighborhoods_reproduce_the_total() {
    // three far-apart clusters, y constant within each
    let mut x = Vec::new();
    let mut missing = Vec::new();
    for c in 0..3 {
        for (o, off) in [-2.0, -1.0, 0.0, 1.0, 2.0, 0.5, -0.5].iter().enumerate() {
            if o >= 5 {
                missing.push(x.len());
            }
            x.push(100.0 * c as f64 + off);
        }
    }
    let y = |v: f64| 10.0 * (1.0 + (v / 100.0).round());
    let ds = one_dim(&x, &missing, y);
    let truth: f64 = x.iter().map(|&v| y(v)).sum();
    for method in [Method::Bknni, Method::Knni, Method::Nni] {
        let imp = PreparedImputer::prepare(&ds, &ImputerConfig::new(method, 3)).unwrap();
        assert!(!imp.is_fallback());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(imp.impute(&mut rng).estimate_total().unwrap(), truth, "{method}");
        }
    }
}

#[test]
fn linear_cancellation_on_synthetic_population() {
    // the synthetic stand-in, not MU284
    let pop = common::synthetic_case1(3);
    let beta = [2.0, 1.5, -0.5, 4.0];
    let lin: Vec<f64> = (0..pop.n()).map(|i| pop.x(i).iter().zip(&beta).map(|(x, b)| x * b).sum()).collect();
    let ds = common::mar_response(&pop, 1, 0.7, 5).with_y(&lin).unwrap();
    let truth: f64 = lin.iter().sum();
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let imp = PreparedImputer::prepare(&ds, &ImputerConfig::new(Method::Bknni, 20)).unwrap();
    assert!(!imp.is_fallback());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let d = imp.draw(&mut rng);
        let gap = d.balance_gap.clone().unwrap().into_iter().fold(0.0, f64::max);
        let est = ImputedDataset::from_donors(&ds, d.donors).estimate_total().unwrap();
        assert!((est - truth).abs() <= l1 * gap + 1e-9 * truth);
    }
}
