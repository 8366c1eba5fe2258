//! Command-line front end: simulate studies, fit the hierarchical model,
//! summarize chains and run the conventional voxel-wise analysis.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dce_bhm::baseline::{fit_study, patient_medians, wilcoxon_one_sided, write_fits_csv, write_paired_csv};
use dce_bhm::posterior::{fixed_effect_draws, kde, prob_positive, Rate, SummaryReport};
use dce_bhm::sampler::{initial_state, initial_state_from_fits, load_chain, run_chain, save_chain, McmcConfig};
use dce_bhm::studyio::{load_paired_csv, load_study, save_study, simulate_study, SimulationSpec};
use dce_bhm::{Error, Result};

#[derive(Parser)]
#[command(name = "dcebhm", version, about = "Bayesian hierarchical analysis of longitudinal DCE-MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic study and its ground truth.
    Simulate(SimulateArgs),
    /// Run the MCMC sampler on a study.
    Fit(FitArgs),
    /// Posterior summaries and density curves from a chain.
    Summarize(SummarizeArgs),
    /// Treatment-effect test from a chain or a paired CSV.
    Test(TestArgs),
    /// Voxel-wise least-squares fits and region medians.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation settings as JSON; missing fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the study, `truth.json` and `spec.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitMode {
    /// Least-squares fits per voxel.
    Nls,
    /// Fixed fallback values.
    Default,
}

#[derive(Args)]
struct FitArgs {
    /// Study manifest (`study.json`).
    study: PathBuf,
    /// Chain CSV to write; the sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Sampler settings as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "burn-in")]
    burn_in: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long, value_enum, default_value_t = InitMode::Nls)]
    init: InitMode,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SummarizeArgs {
    chain: PathBuf,
    /// Output directory for `summary.json` and density CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    /// Chain CSV: reports the posterior probability of a positive effect.
    #[arg(required_unless_present = "wilcoxon", conflicts_with = "wilcoxon")]
    chain: Option<PathBuf>,
    /// Paired `pre,post` CSV: one-sided signed-rank test.
    #[arg(long)]
    wilcoxon: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    study: PathBuf,
    /// Output directory for `fits.csv` and `medians.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Schema { location: path.display().to_string(), message: e.to_string() })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec: SimulationSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SimulationSpec::default(),
    };
    let (data, truth) = simulate_study(&spec, args.seed)?;
    create_dir(&args.out)?;
    let manifest = save_study(&data, &args.out)?;
    truth.save(&args.out.join("truth.json"))?;
    let spec_path = args.out.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(&spec)? + "\n")
        .map_err(|e| Error::Io { path: spec_path, source: e })?;
    println!("{}", manifest.display());
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let mut config: McmcConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => McmcConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.burn_in {
        config.burn_in = v;
    }
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.thin {
        config.thin = v;
    }
    config.validate()?;
    let data = load_study(&args.study)?;
    let init = match args.init {
        InitMode::Nls => initial_state_from_fits(&data, &fit_study(&data))?,
        InitMode::Default => initial_state(&data),
    };
    if !args.quiet {
        eprintln!(
            "sampling {} patients, {} voxels: {} burn-in + {} iterations, thin {}",
            data.layout().n_patients(),
            data.layout().total_voxels(),
            config.burn_in,
            config.iterations,
            config.thin
        );
    }
    let chain = run_chain(&config, &data, init)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_chain(&chain, &args.out)?;
    if !args.quiet {
        let a = &chain.acceptance;
        eprintln!(
            "{} draws written; acceptance psi {:.3}, vp {:.3}",
            chain.len(),
            a.psi.unwrap_or(f64::NAN),
            a.vp.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<()> {
    let chain = load_chain(&args.chain)?;
    create_dir(&args.out)?;
    let report = SummaryReport::from_chain(&chain)?;
    report.save(&args.out.join("summary.json"))?;
    for rate in [Rate::Ktrans, Rate::Kep] {
        let name = match rate {
            Rate::Ktrans => "ktrans",
            Rate::Kep => "kep",
        };
        let alpha = fixed_effect_draws(&chain, rate, false)?;
        let beta = fixed_effect_draws(&chain, rate, true)?;
        let base: Vec<f64> = alpha.iter().map(|a| a.exp()).collect();
        let post: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| (a + b).exp()).collect();
        for (label, values) in [("baseline", base), ("post", post)] {
            // a constant draw set has no density
            if let Ok(curve) = kde(&values, None) {
                curve.write_csv(&args.out.join(format!("density_{name}_{label}.csv")))?;
            }
        }
    }
    let show = |key: &str| {
        let s = &report.summaries[key];
        let (lo, hi) = s.interval95().unwrap_or((f64::NAN, f64::NAN));
        serde_json::json!({ "median": s.median, "ci95": [lo, hi] })
    };
    print_json(&serde_json::json!({
        "n_draws": report.n_draws,
        "ktrans_baseline": show("ktrans/baseline"),
        "ktrans_post": show("ktrans/post"),
        "ktrans_percent_change": show("ktrans/percent_change"),
        "prob_positive": report.prob_positive,
    }));
    Ok(())
}

fn test(args: TestArgs) -> Result<()> {
    if let Some(path) = args.wilcoxon {
        let paired = load_paired_csv(&path)?;
        let r = wilcoxon_one_sided(&paired.pre, &paired.post)?;
        print_json(&serde_json::json!({
            "test": "wilcoxon_signed_rank",
            "alternative": "post < pre",
            "w_plus": r.w_plus,
            "n_effective": r.n_effective,
            "exact": r.exact,
            "p_value": r.p_value,
        }));
    } else if let Some(path) = args.chain {
        let chain = load_chain(&path)?;
        let beta = fixed_effect_draws(&chain, Rate::Ktrans, true)?;
        print_json(&serde_json::json!({
            "test": "posterior_probability",
            "hypothesis": "beta_ktrans > 0",
            "n_draws": beta.len(),
            "prob_positive": prob_positive(&beta)?,
        }));
    }
    Ok(())
}

fn baseline(args: BaselineArgs) -> Result<()> {
    let data = load_study(&args.study)?;
    let fits = fit_study(&data);
    create_dir(&args.out)?;
    write_fits_csv(data.layout(), &fits, &args.out.join("fits.csv"))?;
    let medians = patient_medians(data.layout(), &fits)?;
    write_paired_csv(&medians, &args.out.join("medians.csv"))?;
    let total = fits.iter().map(Vec::len).sum::<usize>();
    let converged = fits.iter().flatten().filter(|f| f.converged).count();
    let mut summary = serde_json::json!({ "voxels": total, "converged": converged });
    if let Ok(r) = wilcoxon_one_sided(&medians.pre, &medians.post) {
        summary["wilcoxon_p_value"] = r.p_value.into();
        summary["w_plus"] = r.w_plus.into();
    }
    print_json(&summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Summarize(a) => summarize(a),
        Command::Test(a) => test(a),
        Command::Baseline(a) => baseline(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
