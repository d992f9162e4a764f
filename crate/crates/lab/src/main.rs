use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use csid_lab::config::{self, ExperimentConfig};
use csid_lab::experiment;
use csid_lab::rundir::RunReport;
use csid_lab::table;
use csid_lab::Result;

/// Exit code for a run that trained into divergence. Config problems exit
/// with 2 (via LabError::exit_code), everything else with 1.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "csid",
    version,
    about = "Desk-scale lab for content-style identifiability from unaligned domains"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Where the experiment config comes from: a named preset or a JSON file,
/// exactly one of the two.
#[derive(Args)]
struct Source {
    /// Named preset (see `--preset help` for the list).
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file; overlays are resolved against built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Source {
    fn load(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        config::load(self.preset.as_deref(), self.config.as_deref(), seed)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Resolve a world spec, write world.json and optional labeled samples.
    GenWorld {
        #[command(flatten)]
        source: Source,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Rows of labeled samples per domain to write into samples.csv.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        /// Overrides the world seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Empirically check that domains vary enough for the theory to bite.
    VerifyWorld {
        #[command(flatten)]
        source: Source,
        /// Also write the report (JSON) into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Probe stream seed (default: the config's eval seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Emit JSON on stdout instead of text lines.
        #[arg(long)]
        json: bool,
    },
    /// Train a model and evaluate it; writes a full run directory.
    Train {
        #[command(flatten)]
        source: Source,
        /// Run directory to create (must not already hold a run).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-evaluate an existing run's model.
    Eval {
        /// Run directory holding config.json and model.bin.
        #[arg(long)]
        run: PathBuf,
        /// Where to write report/codes/plots (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Invert fresh samples from one domain through a trained generator.
    Invert {
        #[arg(long)]
        run: PathBuf,
        /// Domain to sample from.
        #[arg(long)]
        domain: usize,
        /// Number of samples.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Where to write inversions.csv (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the inversion restart seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Translate samples from one domain into another, preserving content.
    Translate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Take styles from inverted target-domain references instead of
        /// sampling fresh ones.
        #[arg(long)]
        guided: bool,
        /// Where to write translations.csv (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the inversion restart seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate runs into table.csv plus per-run plots.
    Report {
        /// Run directories, one row each.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for table.csv and plots/.
        #[arg(long)]
        out: PathBuf,
        /// Accepted for flag uniformity; reporting is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn print_report(r: &RunReport) {
    println!("method: {}", r.method);
    if let Some(p) = &r.preset {
        println!("preset: {p}");
    }
    println!("content R2 (min of directions): {:.4}", r.ident.content_score());
    println!("style R2 (min of directions):   {:.4}", r.ident.style_score());
    println!(
        "leakage c<-s: {:.4}   s<-c: {:.4}",
        r.ident.leakage_c_from_s, r.ident.leakage_s_from_c
    );
    println!("effective style dim: {}", r.ident.effective_style_dim);
    println!("content DM (max pairwise MMD2): {:.6}", r.content_dm);
    if let Some(inv) = &r.ident.invariance {
        println!("invariance ratio (style/content sensitivity): {:.4}", inv.ratio);
    }
    if let Some(mmd) = &r.mmd_to_data {
        let cells: Vec<String> = mmd.iter().map(|v| format!("{v:.6}")).collect();
        println!("MMD2 to data per domain: [{}]", cells.join(", "));
    }
    if let Some(d) = r.diversity {
        println!("style diversity (mean pairwise distance): {d:.4}");
    }
    let indep: Vec<String> = r
        .ident
        .independence
        .iter()
        .map(|d| format!("domain {}: hsic {:.3e} (thresh {:.3e})", d.domain, d.hsic, d.quantile))
        .collect();
    if !indep.is_empty() {
        println!("code independence: {}", indep.join("; "));
    }
}

#[derive(Serialize)]
struct VerifyOutput {
    warnings: Vec<String>,
    report: csid_core::world::VariabilityReport,
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::GenWorld { source, out, samples, seed } => {
            let cfg = source.load(None)?;
            let warnings = experiment::generate_world(&cfg, &out, samples, seed)?;
            print_warnings(&warnings);
            println!("world written to {}", out.display());
            Ok(0)
        }
        Cmd::VerifyWorld { source, out, seed, json } => {
            let cfg = source.load(None)?;
            let (warnings, report) = experiment::verify_world(&cfg, seed)?;
            if json {
                let payload = VerifyOutput { warnings, report };
                println!("{}", serde_json::to_string_pretty(&payload).expect("serializable"));
                if let Some(dir) = out {
                    std::fs::create_dir_all(&dir).map_err(csid_lab::error::io_at(&dir))?;
                    let path = dir.join("verify.json");
                    let mut text =
                        serde_json::to_string_pretty(&payload).expect("serializable");
                    text.push('\n');
                    std::fs::write(&path, text).map_err(csid_lab::error::io_at(&path))?;
                }
            } else {
                print_warnings(&warnings);
                let mut lines = String::new();
                for (k, set) in report.sets.iter().enumerate() {
                    let probs: Vec<String> =
                        set.probs.iter().map(|p| format!("{p:.4}")).collect();
                    lines.push_str(&format!(
                        "set {k}: probs [{}] gap {:.4} se {:.4}{}\n",
                        probs.join(", "),
                        set.max_gap,
                        set.se,
                        if set.flagged { " flagged" } else { "" }
                    ));
                }
                lines.push_str(&format!(
                    "flagged {:.0}% of {} sets ({} skipped, {} MC draws each)\n",
                    100.0 * report.flagged_fraction,
                    report.sets.len(),
                    report.skipped,
                    report.n_mc
                ));
                print!("{lines}");
                if let Some(dir) = out {
                    std::fs::create_dir_all(&dir).map_err(csid_lab::error::io_at(&dir))?;
                    let path = dir.join("verify.txt");
                    std::fs::write(&path, lines).map_err(csid_lab::error::io_at(&path))?;
                }
            }
            Ok(0)
        }
        Cmd::Train { source, out, seed } => {
            let cfg = source.load(seed)?;
            let summary = experiment::run_experiment(&cfg, &out)?;
            if summary.diverged {
                eprintln!(
                    "training diverged; partial artifacts in {}",
                    summary.dir.display()
                );
                return Ok(EXIT_DIVERGED);
            }
            println!("run: {}", summary.dir.display());
            if let Some(r) = &summary.report {
                print_report(r);
            }
            println!("wall time: {:.1}s", summary.wall_time_s);
            Ok(0)
        }
        Cmd::Eval { run, out, seed } => {
            let report = experiment::evaluate_run(&run, out.as_deref(), seed)?;
            print_report(&report);
            Ok(0)
        }
        Cmd::Invert { run, domain, count, out, seed } => {
            let dir = out.unwrap_or_else(|| run.clone());
            let path = experiment::invert_samples(&run, domain, count, seed, &dir)?;
            println!("{}", path.display());
            Ok(0)
        }
        Cmd::Translate { run, from, to, count, guided, out, seed } => {
            let dir = out.unwrap_or_else(|| run.clone());
            let path =
                experiment::translate_samples(&run, from, to, count, guided, seed, &dir)?;
            println!("{}", path.display());
            Ok(0)
        }
        Cmd::Report { runs, out, seed: _ } => {
            let text = table::write_comparison(&runs, &out)?;
            print!("{text}");
            println!("table written to {}", out.join(table::TABLE_FILE).display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
