//! Shared fixtures for the integration tests.
//!
//! The synthetic population below only mimics the shape of MU284 (284
//! municipalities, skewed sizes, one strong and one weak auxiliary). It is not
//! MU284 and is never used to check values reported for MU284.

#![allow(dead_code)]

use bknni::data::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SYNTHETIC_N: usize = 284;

/// Rows `(label, p85, p75, cs82, rmt85)` of the synthetic population.
pub fn synthetic_rows(seed: u64) -> Vec<(usize, f64, f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = Normal::new(2.8_f64, 0.9).unwrap();
    let drift = Normal::new(-0.02_f64, 0.06).unwrap();
    let noise = Normal::new(0.0_f64, 1.0).unwrap();
    (1..=SYNTHETIC_N)
        .map(|label| {
            let p85 = size.sample(&mut rng).exp().round().max(3.0);
            let p75 = (p85 * drift.sample(&mut rng).exp()).round().max(3.0);
            let cs82 = (2.0 + 1.5 * p85.ln() + 2.5 * noise.sample(&mut rng)).round().max(0.0);
            let rmt85 = (6.5 * p85 + 1.2 * p85.powf(0.8) * noise.sample(&mut rng) + rng.random_range(0.0..5.0))
                .round()
                .max(1.0);
            (label, p85, p75, cs82, rmt85)
        })
        .collect()
}

/// Synthetic population in the MU284 column layout.
pub fn synthetic_csv(seed: u64) -> String {
    let mut s = String::from("LABEL,RMT85,P85,P75,CS82\n");
    for (l, p85, p75, cs82, rmt85) in synthetic_rows(seed) {
        s.push_str(&format!("{l},{rmt85},{p85},{p75},{cs82}\n"));
    }
    s
}

/// Census dataset with aux `(const, P85, P75, CS82)` and complete `y`.
pub fn synthetic_case1(seed: u64) -> Dataset {
    let rows = synthetic_rows(seed);
    Dataset::with_constant(
        rows.iter().map(|r| r.0.to_string()).collect(),
        vec![1.0; rows.len()],
        vec!["P85".into(), "P75".into(), "CS82".into()],
        rows.iter().map(|r| vec![r.1, r.2, r.3]).collect(),
        rows.iter().map(|r| Some(r.4)).collect(),
    )
    .unwrap()
}

/// Response set drawn from the study's logistic MAR model on `P85`.
pub fn mar_response(pop: &Dataset, driver: usize, rate: f64, seed: u64) -> Dataset {
    let x = pop.aux_column(driver);
    let beta = bknni::sim::calibrate_beta(&x, rate).unwrap();
    let theta = bknni::sim::response_probabilities(&x, beta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, _) = bknni::sim::gen_response(&theta, pop.q(), &mut rng).unwrap();
    pop.mask_nonresponse(&r).unwrap()
}

/// Census dataset with aux `(const, CS82)` and complete `y`.
pub fn synthetic_case2(seed: u64) -> Dataset {
    let rows = synthetic_rows(seed);
    Dataset::with_constant(
        rows.iter().map(|r| r.0.to_string()).collect(),
        vec![1.0; rows.len()],
        vec!["CS82".into()],
        rows.iter().map(|r| vec![r.3]).collect(),
        rows.iter().map(|r| Some(r.4)).collect(),
    )
    .unwrap()
}
