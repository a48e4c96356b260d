//! Monte Carlo replication harness: MAR response generation on a census
//! population, repeated imputation with each method, and RB / RRMSE / RRIV
//! aggregation together with the comparison of the approximate imputation
//! variance against its Monte Carlo counterpart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, ImputedDataset};
use crate::error::{DataError, Error, Result};
use crate::imputers::{ImputerConfig, Method, PreparedImputer};
use crate::mu284::{load_mu284, Mu284Case};
use crate::psi;
use crate::variance::var_app;

const BETA_MAX: f64 = 1e6;
const BETA_TOL: f64 = 1e-10;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Parameter {
    Total,
    P10,
    P90,
    Variance,
}

impl Parameter {
    pub const ALL: [Parameter; 4] = [Parameter::Total, Parameter::P10, Parameter::P90, Parameter::Variance];

    pub fn name(self) -> &'static str {
        match self {
            Parameter::Total => "total",
            Parameter::P10 => "p10",
            Parameter::P90 => "p90",
            Parameter::Variance => "variance",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Parameter::Total => "Total",
            Parameter::P10 => "10th percentile",
            Parameter::P90 => "90th percentile",
            Parameter::Variance => "Variance",
        }
    }

    fn estimate(self, imp: &ImputedDataset<'_>) -> std::result::Result<f64, DataError> {
        match self {
            Parameter::Total => imp.estimate_total(),
            Parameter::P10 => imp.estimate_percentile(0.1),
            Parameter::P90 => imp.estimate_percentile(0.9),
            Parameter::Variance => imp.estimate_variance(),
        }
    }
}

/// `θ_i = 1 / (1 + exp(1 − β x_i))`.
pub fn response_probabilities(x_col: &[f64], beta: f64) -> Vec<f64> {
    x_col.iter().map(|&x| 1.0 / (1.0 + (1.0 - beta * x).exp())).collect()
}

/// Bisection for `β ∈ (0, 10⁶)` with mean response probability `target_rate`.
pub fn calibrate_beta(x_col: &[f64], target_rate: f64) -> Result<f64> {
    if x_col.is_empty() || !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Config(format!("cannot calibrate a response rate of {target_rate}")));
    }
    let g = |b: f64| response_probabilities(x_col, b).iter().sum::<f64>() / x_col.len() as f64 - target_rate;
    let (mut lo, mut hi) = (0.0, BETA_MAX);
    let (g_lo, g_hi) = (g(lo), g(hi));
    if !(g_lo < 0.0 && g_hi > 0.0) {
        return Err(Error::Config(format!(
            "response rate {target_rate} unreachable with beta in (0, {BETA_MAX:e}); mean rate spans [{:.4}, {:.4}]",
            g_lo + target_rate,
            g_hi + target_rate
        )));
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm.abs() <= BETA_TOL {
            return Ok(mid);
        }
        if gm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Err(Error::Config(format!(
        "beta bisection stalled at {lo:e} without reaching |g| <= {BETA_TOL:e}"
    )))
}

/// Independent Bernoulli(θ_i) response indicators, redrawn until
/// `n_r ≥ q + 1` and `n_m ≥ 1`. Returns the indicators and the redraw count.
pub fn gen_response<R: Rng + ?Sized>(theta: &[f64], q: usize, rng: &mut R) -> Result<(Vec<bool>, usize)> {
    for redraws in 0..MAX_REDRAWS {
        let r: Vec<bool> = theta.iter().map(|&t| rng.random::<f64>() < t).collect();
        let n_r = r.iter().filter(|&&b| b).count();
        if n_r > q && n_r < r.len() {
            if redraws > 0 {
                info!("response set accepted after {redraws} redraws");
            }
            return Ok((r, redraws));
        }
    }
    Err(Error::Config(format!(
        "no admissible response set after {MAX_REDRAWS} draws"
    )))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed for replicate `(r, i)` of the stream `tag`; tag 0 is the
/// response-set stream.
pub fn derive_seed(master: u64, r: u64, i: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(splitmix64(master) ^ r) ^ i) ^ tag)
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyConfig {
    /// Label carried into the reports.
    pub case: u8,
    /// Auxiliary variable driving the response model.
    pub response_driver: String,
    pub m_r: usize,
    pub m_i: usize,
    pub rate: f64,
    pub k: usize,
    pub tol: f64,
    pub max_outer: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Keep every `θ̂^{r,i}` in the report.
    pub keep_raw: bool,
}

impl StudyConfig {
    pub fn mu284(case: Mu284Case) -> Self {
        StudyConfig {
            case: case.number(),
            response_driver: case.response_driver().into(),
            m_r: 100,
            m_i: 100,
            rate: 0.7,
            k: 20,
            tol: psi::DEFAULT_TOL,
            max_outer: psi::DEFAULT_MAX_OUTER,
            seed: 42,
            methods: Method::ALL.to_vec(),
            keep_raw: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m_r == 0 || self.m_i == 0 {
            return Err(Error::Config("M_R and M_I must be at least 1".into()));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("response rate {} outside (0, 1)", self.rate)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub method: Method,
    pub parameter: Parameter,
    pub truth: f64,
    /// `θ̂*`, the mean over all replicates.
    pub mean: f64,
    pub rb: f64,
    pub rrmse: f64,
    pub rriv: f64,
    pub mse: f64,
    pub iv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComparison {
    pub case: u8,
    pub mean_var_app: f64,
    pub mc_iv: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub config: StudyConfig,
    pub beta: f64,
    pub n: usize,
    pub truth: BTreeMap<Parameter, f64>,
    /// Ordered by parameter, then method.
    pub metrics: Vec<Metrics>,
    pub variance: Option<VarianceComparison>,
    /// Response sets on which bkNNI used `ψ^knn`.
    pub fallback_count: usize,
    pub redraws: usize,
    pub mean_respondents: f64,
    /// `θ̂^{r,i}` in `(r, i)` order, when requested.
    #[serde(skip)]
    pub raw: Option<BTreeMap<(Method, Parameter), Vec<f64>>>,
}

impl SimReport {
    pub fn get(&self, method: Method, parameter: Parameter) -> Option<&Metrics> {
        self.metrics
            .iter()
            .find(|m| m.method == method && m.parameter == parameter)
    }

    pub fn fallback_rate(&self) -> f64 {
        self.fallback_count as f64 / self.config.m_r as f64
    }

    /// `method,parameter,RB,RRMSE,RRIV`.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::result::Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "parameter", "RB", "RRMSE", "RRIV"])?;
        for m in &self.metrics {
            w.write_record([
                m.method.name().to_string(),
                m.parameter.name().to_string(),
                m.rb.to_string(),
                m.rrmse.to_string(),
                m.rriv.to_string(),
            ])?;
        }
        flush(w)
    }

    /// `case,mean_var_app,mc_iv,ratio`.
    pub fn write_variance_csv<W: Write>(&self, writer: W) -> std::result::Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["case", "mean_var_app", "mc_iv", "ratio"])?;
        if let Some(v) = &self.variance {
            w.write_record([
                v.case.to_string(),
                v.mean_var_app.to_string(),
                v.mc_iv.to_string(),
                v.ratio.to_string(),
            ])?;
        }
        flush(w)
    }

    pub fn to_markdown(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "# Case {} (M_R = {}, M_I = {}, k = {}, seed = {})\n", c.case, c.m_r, c.m_i, c.k, c.seed);
        let _ = writeln!(
            s,
            "Response model driven by `{}`, beta = {:.6e}, target rate {:.2}, mean respondents {:.1} of {}.\n",
            c.response_driver, self.beta, c.rate, self.mean_respondents, self.n
        );
        let _ = writeln!(s, "| Parameter | Method | RB | RRMSE | RRIV |");
        let _ = writeln!(s, "|---|---|---:|---:|---:|");
        let mut last = None;
        for m in &self.metrics {
            let label = if last == Some(m.parameter) { "" } else { m.parameter.label() };
            last = Some(m.parameter);
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.3} | {:.3} |",
                label,
                m.method.name(),
                m.rb,
                m.rrmse,
                m.rriv
            );
        }
        if let Some(v) = &self.variance {
            let _ = writeln!(s, "\n| | Case {} |", v.case);
            let _ = writeln!(s, "|---|---:|");
            let _ = writeln!(s, "| Average approximate imputation variance | {:.2} |", v.mean_var_app);
            let _ = writeln!(s, "| Monte Carlo imputation variance | {:.2} |", v.mc_iv);
            let _ = writeln!(s, "| Ratio | {:.2} |", v.ratio);
        }
        let _ = writeln!(s, "\nNotes:\n");
        let _ = writeln!(
            s,
            "- bkNNI used kNN imputation probabilities on {} of {} response sets ({:.1}%).",
            self.fallback_count,
            c.m_r,
            100.0 * self.fallback_rate()
        );
        let _ = writeln!(s, "- Degenerate response sets redrawn: {}.", self.redraws);
        let _ = writeln!(
            s,
            "- Percentiles are weighted lower empirical quantiles; the variance uses the divisor sum of weights (N)."
        );
        s
    }
}

fn flush<W: Write>(mut w: csv::Writer<W>) -> std::result::Result<(), DataError> {
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })
}

/// Estimates of one response set: per method, `estimates[p][i]`.
struct Replicate {
    per_method: Vec<[Vec<f64>; 4]>,
    var_app: Option<f64>,
    fallback: bool,
    redraws: usize,
    n_r: usize,
}

fn run_replicate(cfg: &StudyConfig, population: &Dataset, theta: &[f64], r: usize) -> Result<Replicate> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, r as u64, 0, 0));
    let (response, redraws) = gen_response(theta, population.q(), &mut rng)?;
    let ds = population.mask_nonresponse(&response)?;
    let wrap = |method: Method, i: usize| {
        move |e: Error| Error::Replicate {
            method: method.name().into(),
            replicate: r,
            imputation: i,
            source: Box::new(e),
        }
    };

    let mut out = Replicate {
        per_method: Vec::with_capacity(cfg.methods.len()),
        var_app: None,
        fallback: false,
        redraws,
        n_r: ds.n_r(),
    };
    for &method in &cfg.methods {
        let icfg = ImputerConfig {
            tol: cfg.tol,
            max_outer: cfg.max_outer,
            ..ImputerConfig::new(method, cfg.k)
        };
        let prepared = PreparedImputer::prepare(&ds, &icfg).map_err(wrap(method, 0))?;
        if method == Method::Bknni {
            out.fallback = prepared.is_fallback();
            let psi = prepared.psi().expect("bkNNI keeps its probabilities");
            out.var_app = Some(var_app(psi, &ds).map_err(|e| wrap(method, 0)(e.into()))?.var_app);
        }
        let mut est: [Vec<f64>; 4] = Default::default();
        for i in 0..cfg.m_i {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, r as u64, i as u64 + 1, method.tag()));
            let imp = prepared.impute(&mut rng);
            for (p, e) in Parameter::ALL.iter().zip(est.iter_mut()) {
                e.push(p.estimate(&imp).map_err(|e| wrap(method, i)(e.into()))?);
            }
        }
        out.per_method.push(est);
    }
    Ok(out)
}

/// Runs the study on a complete census population.
pub fn run_study(cfg: &StudyConfig, population: &Dataset) -> Result<SimReport> {
    cfg.validate()?;
    let complete = population.as_complete()?;
    let driver = population
        .aux_names()
        .iter()
        .position(|n| n == &cfg.response_driver)
        .ok_or_else(|| DataError::MissingColumn(cfg.response_driver.clone()))?;
    let beta = calibrate_beta(&population.aux_column(driver), cfg.rate)?;
    let theta = response_probabilities(&population.aux_column(driver), beta);
    let truth: BTreeMap<Parameter, f64> = Parameter::ALL
        .iter()
        .map(|&p| Ok((p, p.estimate(&complete)?)))
        .collect::<std::result::Result<_, DataError>>()?;

    let reps: Vec<Replicate> = (0..cfg.m_r)
        .into_par_iter()
        .map(|r| run_replicate(cfg, population, &theta, r))
        .collect::<Result<_>>()?;

    let (m_r, m_i) = (cfg.m_r as f64, cfg.m_i as f64);
    let mut metrics = Vec::new();
    let mut raw = cfg.keep_raw.then(BTreeMap::new);
    for (pi, &parameter) in Parameter::ALL.iter().enumerate() {
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let theta0 = truth[&parameter];
            let (mut sum, mut sq, mut iv) = (0.0, 0.0, 0.0);
            for rep in &reps {
                let e = &rep.per_method[mi][pi];
                let mean_r = e.iter().sum::<f64>() / m_i;
                sum += e.iter().sum::<f64>();
                sq += e.iter().map(|v| (v - theta0).powi(2)).sum::<f64>();
                iv += e.iter().map(|v| (v - mean_r).powi(2)).sum::<f64>() / (m_i - 1.0);
            }
            let mean = sum / (m_r * m_i);
            let mse = sq / (m_r * m_i);
            let iv = if cfg.m_i > 1 { iv / m_r } else { f64::NAN };
            metrics.push(Metrics {
                method,
                parameter,
                truth: theta0,
                mean,
                rb: (mean - theta0) / theta0,
                rrmse: mse.sqrt() / theta0,
                rriv: iv.sqrt() / theta0,
                mse,
                iv,
            });
            if let Some(raw) = raw.as_mut() {
                let all: Vec<f64> = reps.iter().flat_map(|rep| rep.per_method[mi][pi].iter().copied()).collect();
                raw.insert((method, parameter), all);
            }
        }
    }

    let fallback_count = reps.iter().filter(|r| r.fallback).count();
    let variance = cfg.methods.contains(&Method::Bknni).then(|| {
        let mean_var_app = reps.iter().filter_map(|r| r.var_app).sum::<f64>() / m_r;
        let mc_iv = metrics
            .iter()
            .find(|m| m.method == Method::Bknni && m.parameter == Parameter::Total)
            .map(|m| m.iv)
            .unwrap_or(f64::NAN);
        VarianceComparison {
            case: cfg.case,
            mean_var_app,
            mc_iv,
            ratio: mean_var_app / mc_iv,
        }
    });
    if fallback_count > 0 {
        warn!(
            "bkNNI fell back to kNN imputation probabilities on {fallback_count} of {} response sets",
            cfg.m_r
        );
    }
    Ok(SimReport {
        config: cfg.clone(),
        beta,
        n: population.n(),
        truth,
        metrics,
        variance,
        fallback_count,
        redraws: reps.iter().map(|r| r.redraws).sum(),
        mean_respondents: reps.iter().map(|r| r.n_r as f64).sum::<f64>() / m_r,
        raw,
    })
}

/// Study on the embedded MU284 population.
pub fn run_mu284_study(cfg: &StudyConfig) -> Result<SimReport> {
    let case = Mu284Case::from_number(cfg.case).ok_or_else(|| Error::Config(format!("unknown case {}", cfg.case)))?;
    run_study(cfg, &load_mu284(case)?)
}
