//! Command-line front end: `impute`, `simulate` and `mu284`.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{load_csv, write_imputed_csv, CsvSchema, Dataset};
use crate::error::{DataError, Error, Result};
use crate::imputers::{impute_bknn, ImputerConfig, Method, PreparedImputer};
use crate::mu284::{self, Mu284Case};
use crate::psi;
use crate::sim::{run_study, StudyConfig};
use crate::variance::var_app;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bknni", version, about = "Balanced k-nearest-neighbor hot-deck imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Impute the missing values of a CSV file.
    Impute(ImputeArgs),
    /// Run the Monte Carlo study on MU284.
    Simulate(SimulateArgs),
    /// Print the embedded MU284 data.
    Mu284(Mu284Args),
}

#[derive(Debug, Args)]
struct ImputeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated auxiliary columns; a constant is added when absent.
    #[arg(long, value_delimiter = ',', required = true)]
    aux_cols: Vec<String>,
    #[arg(long)]
    y_col: String,
    /// Design weights; all 1 when omitted.
    #[arg(long)]
    weight_col: Option<String>,
    /// Unit identifiers; 1-based row numbers when omitted.
    #[arg(long)]
    id_col: Option<String>,
    #[arg(long, default_value = "bknni")]
    method: String,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Increase k from --k until balanced probabilities exist.
    #[arg(long)]
    k_auto: bool,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, default_value_t = psi::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of forbidden pairs with columns donor_id,recipient_id.
    #[arg(long)]
    edit_rules: Option<PathBuf>,
    /// Fail instead of using kNN probabilities when balancing is infeasible.
    #[arg(long)]
    no_fallback: bool,
    #[arg(long)]
    output: PathBuf,
    /// JSON diagnostics sidecar.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Imputation probabilities as donor_id,recipient_id,probability.
    #[arg(long)]
    psi_output: Option<PathBuf>,
    /// Donor assignment as recipient_id,donor_id.
    #[arg(long)]
    donors_output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    case: u8,
    #[arg(long, default_value_t = 100)]
    mr: usize,
    #[arg(long, default_value_t = 100)]
    mi: usize,
    #[arg(long, default_value_t = 0.7)]
    rate: f64,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = psi::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated subset of methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// MU284 CSV to use instead of the embedded copy.
    #[arg(long)]
    population: Option<PathBuf>,
    /// Report file; the variance comparison goes next to it for `csv`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct Mu284Args {
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Impute(a) => impute(a),
        Command::Simulate(a) => simulate(a),
        Command::Mu284(a) => dump_mu284(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Input and configuration problems are usage errors; everything raised by
/// the numerical routines is a numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Data(_) | Error::Config(_) => EXIT_USAGE,
        Error::Psi(_) | Error::Rake(_) | Error::NotEnoughDonors { .. } => EXIT_NUMERICAL,
        Error::Replicate { source, .. } => exit_code(source),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    }
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    method: String,
    k: Option<usize>,
    fallback: bool,
    balance_residual: Option<Vec<f64>>,
    balance_gap: Option<Vec<f64>>,
    var_app: Option<f64>,
    seed: u64,
    n: usize,
    n_respondents: usize,
    n_imputed: usize,
}

fn read_edit_rules(path: &Path, ds: &Dataset) -> Result<HashSet<(usize, usize)>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(DataError::from)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.into()))
    };
    let (d, r) = (col("donor_id")?, col("recipient_id")?);
    let unit = |id: &str| ds.index_of(id).ok_or_else(|| DataError::UnknownUnit(id.into()));
    let mut out = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(DataError::from)?;
        out.insert((unit(&rec[d])?, unit(&rec[r])?));
    }
    Ok(out)
}

fn impute(a: ImputeArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let schema = CsvSchema {
        id_col: a.id_col.clone(),
        weight_col: a.weight_col.clone(),
        aux_cols: a.aux_cols.clone(),
        y_col: a.y_col.clone(),
    };
    let ds = load_csv(&a.input, &schema)?;
    let mut diag = Diagnostics {
        method: method.name().into(),
        k: None,
        fallback: false,
        balance_residual: None,
        balance_gap: None,
        var_app: None,
        seed: a.seed,
        n: ds.n(),
        n_respondents: ds.n_r(),
        n_imputed: ds.n_m(),
    };

    if ds.n_m() == 0 {
        warn!("no missing values in `{}`; output is a copy of the input", a.y_col);
        std::fs::copy(&a.input, &a.output).map_err(io_err(&a.output))?;
    } else {
        let cfg = ImputerConfig {
            k_auto: a.k_auto,
            k_max: a.k_max,
            tol: a.tol,
            fallback_to_knni: !a.no_fallback,
            forbidden: match &a.edit_rules {
                Some(p) => read_edit_rules(p, &ds)?,
                None => HashSet::new(),
            },
            seed: a.seed,
            ..ImputerConfig::new(method, a.k)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        if method == Method::Bknni {
            let res = impute_bknn(&ds, &cfg, &mut rng)?;
            write_imputed_csv(&res.imputed, create(&a.output)?, &a.y_col)?;
            if let Some(p) = &a.psi_output {
                res.psi.write_csv(&ds, create(p)?)?;
            }
            if let Some(p) = &a.donors_output {
                res.assignment.write_csv(&ds, create(p)?)?;
            }
            diag.k = Some(res.k);
            diag.fallback = res.fallback;
            diag.balance_residual = Some(res.psi.balance_residual.clone());
            diag.balance_gap = Some(res.assignment.balance_gap.clone());
            diag.var_app = var_app(&res.psi, &ds).ok().map(|v| v.var_app);
            if res.fallback {
                warn!("balanced probabilities infeasible; kNN probabilities used");
            }
        } else {
            if a.psi_output.is_some() {
                warn!("--psi-output only applies to bkNNI");
            }
            let prepared = PreparedImputer::prepare(&ds, &cfg)?;
            let draw = prepared.draw(&mut rng);
            if let Some(p) = &a.donors_output {
                let mut w = csv::Writer::from_writer(create(p)?);
                w.write_record(["recipient_id", "donor_id"]).map_err(DataError::from)?;
                for (&j, &i) in ds.nonrespondents().iter().zip(&draw.donors) {
                    w.write_record([ds.unit_id(j), ds.unit_id(i)]).map_err(DataError::from)?;
                }
                w.flush().map_err(io_err(p))?;
            }
            let imputed = crate::data::ImputedDataset::from_donors(&ds, draw.donors);
            write_imputed_csv(&imputed, create(&a.output)?, &a.y_col)?;
            diag.k = prepared.k_used();
        }
        info!("imputed {} of {} units with {}", ds.n_m(), ds.n(), method);
    }

    if let Some(p) = &a.diagnostics {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &diag).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(io_err(p))?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let case = Mu284Case::from_number(a.case).expect("validated by clap");
    let population = match &a.population {
        Some(p) => mu284::load_mu284_file(p, case)?,
        None => mu284::load_mu284(case)?,
    };
    let mut cfg = StudyConfig::mu284(case);
    cfg.m_r = a.mr;
    cfg.m_i = a.mi;
    cfg.rate = a.rate;
    cfg.k = a.k;
    cfg.tol = a.tol;
    cfg.seed = a.seed;
    if let Some(ms) = &a.methods {
        cfg.methods = ms.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    }
    let report = run_study(&cfg, &population)?;
    match a.format {
        Format::Csv => {
            report.write_csv(create(&a.output)?)?;
            report.write_variance_csv(create(&variance_path(&a.output))?)?;
        }
        Format::Md => {
            let mut w = create(&a.output)?;
            w.write_all(report.to_markdown().as_bytes())
                .and_then(|_| w.flush())
                .map_err(io_err(&a.output))?;
        }
    }
    Ok(())
}

/// `report.csv` → `report.variance.csv`.
pub fn variance_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.variance.csv"))
}

fn dump_mu284(a: Mu284Args) -> Result<()> {
    if !mu284::is_available() {
        return Err(DataError::Mu284Unavailable.into());
    }
    match &a.output {
        Some(p) => std::fs::write(p, mu284::MU284_CSV).map_err(io_err(p))?,
        None => print!("{}", mu284::MU284_CSV),
    }
    Ok(())
}
