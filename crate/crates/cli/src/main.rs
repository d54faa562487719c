use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use perfab_core::ingest::{self, EventFormat, ParseSummary};
use perfab_core::report::{self, AnalysisOptions, AnalysisReport};
use perfab_core::sim::{self, SimConfigFile, SweepConfig};
use perfab_core::srm::{self, DEFAULT_ALERT_THRESHOLD};
use perfab_core::{Assignment, PerfEvent, UserId};

/// Exit status when a self-selection SRM alert fired.
const EXIT_ALERT: u8 = 2;

#[derive(Parser)]
#[command(name = "perfab", version, about = "Performance metrics for A/B experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Event- and user-level effects, self-selection SRM check, and
    /// corrections when the check fires. Prints the JSON report to stdout and
    /// a summary table to stderr. Exits 2 on an SRM alert.
    Analyze(AnalyzeArgs),
    /// Self-selection SRM check only. Exits 2 on an alert.
    Srm(SrmArgs),
    /// Run a simulation setup and write its sweep table.
    Simulate(SimulateArgs),
    /// Re-render a saved JSON report as a table or CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Performance events (CSV or JSON lines).
    #[arg(long)]
    events: PathBuf,
    /// User assignments (CSV: user_id,bucket).
    #[arg(long)]
    assignments: PathBuf,
    /// Event file format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Metric to analyze.
    #[arg(long)]
    metric: String,
    /// Experiment start (epoch ms). Earlier events feed the engagement
    /// split instead of the metric.
    #[arg(long)]
    experiment_start: Option<i64>,
    /// Length of the pre-period window before the start, in ms.
    #[arg(long, default_value_t = ingest::DEFAULT_PRE_WINDOW_MS)]
    pre_window_ms: i64,
    /// Alert when the SRM p-value is below this.
    #[arg(long, visible_alias = "threshold", default_value_t = DEFAULT_ALERT_THRESHOLD)]
    alert_threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Device map (CSV: user_id,device_model). Users without an entry are
    /// classed as "Other".
    #[arg(long)]
    devices: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    quantile: f64,
    /// Significance level for the reported decisions.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = report::DEFAULT_SEED)]
    seed: u64,
    /// Bootstrap replicates for the event-level test.
    #[arg(long, default_value_t = 1000)]
    boot: usize,
    /// Run both corrections even without an SRM alert.
    #[arg(long)]
    force_correct: bool,
    /// Device models with fewer users are pooled into "Other".
    #[arg(long, default_value_t = ingest::DEFAULT_DEVICE_USER_THRESHOLD)]
    device_threshold: usize,
    /// Imputation cells with fewer observed users borrow donors.
    #[arg(long, default_value_t = 5)]
    min_donors: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write one CSV row per (level, method) here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Do not print the table to stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SrmArgs {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Setup {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
    #[value(name = "C", alias = "c")]
    C,
    Divergence,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, required_unless_present = "print_config")]
    setup: Option<Setup>,
    /// TOML file overriding the default scenario parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Three million users per iteration instead of 100k.
    #[arg(long)]
    full: bool,
    /// Print the default config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Saved JSON report.
    json: PathBuf,
    /// Write CSV rows to stdout instead of the table.
    #[arg(long)]
    csv: bool,
}

fn infer_format(path: &Path, explicit: Option<FormatArg>) -> EventFormat {
    match explicit {
        Some(FormatArg::Csv) => EventFormat::Csv,
        Some(FormatArg::Jsonl) => EventFormat::Jsonl,
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson" | "json") => EventFormat::Jsonl,
            _ => EventFormat::Csv,
        },
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn load_inputs(input: &InputArgs) -> Result<(Vec<PerfEvent>, ParseSummary, Vec<Assignment>)> {
    let format = infer_format(&input.events, input.format);
    let (events, summary) = ingest::load_events(open(&input.events)?, format)
        .with_context(|| format!("reading {}", input.events.display()))?;
    let assignments = ingest::load_assignments(open(&input.assignments)?)
        .with_context(|| format!("reading {}", input.assignments.display()))?;
    Ok((events, summary, assignments))
}

fn warn_rejected(path: &Path, summary: &ParseSummary) {
    if summary.rejected_count() > 0 {
        eprintln!(
            "warning: {}: rejected {} of {} rows (first at line {}: {})",
            path.display(),
            summary.rejected_count(),
            summary.rows_read,
            summary.rejected[0].line,
            summary.rejected[0].reason
        );
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let (events, summary, assignments) = load_inputs(&args.input)?;
    warn_rejected(&args.input.events, &summary);
    let devices: HashMap<UserId, String> = match &args.devices {
        Some(p) => ingest::load_device_map(open(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => HashMap::new(),
    };
    let opts = AnalysisOptions {
        quantile: args.quantile,
        alert_threshold: args.input.alert_threshold,
        alpha: args.alpha,
        seed: args.seed,
        n_boot: args.boot,
        force_correct: args.force_correct,
        device_user_threshold: args.device_threshold,
        min_donors: args.min_donors,
        experiment_start: args.input.experiment_start,
        pre_window_ms: args.input.pre_window_ms,
        ..AnalysisOptions::new(&args.input.metric)
    };
    let report = report::analyze(&events, &assignments, &devices, &opts)?;
    let json = report.to_json()?;
    println!("{json}");
    if let Some(p) = &args.json {
        write_file(p, json.as_bytes())?;
    }
    if let Some(p) = &args.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_file(p, &buf)?;
    }
    if !args.quiet {
        eprint!("{}", report.to_table());
    }
    Ok(if report.self_selection_srm.alert {
        ExitCode::from(EXIT_ALERT)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_srm(args: SrmArgs) -> Result<ExitCode> {
    let (events, summary, assignments) = load_inputs(&args.input)?;
    warn_rejected(&args.input.events, &summary);
    let input = &args.input;
    let (_, during) = ingest::split_by_window(&events, &input.metric, input.experiment_start, input.pre_window_ms);
    let (covs, _) = ingest::derive_covariates(&[], &assignments, &HashMap::new(), usize::MAX)?;
    let values = perfab_core::metrics::user_level_values(&during, &covs, 0.5)?;
    let report = srm::self_selection_srm(&values, &covs, input.alert_threshold)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.alert {
        ExitCode::from(EXIT_ALERT)
    } else {
        ExitCode::SUCCESS
    })
}

fn sweep_summary(name: &str, results: &[sim::ScenarioResult]) -> String {
    let mut s = format!("setup {name}\n");
    for r in results {
        s.push_str(&format!(
            "delta_miss target {:.4} realized {:.4}, true ATE {:.4}:",
            r.target_delta_miss.unwrap_or(f64::NAN),
            r.realized_delta_miss,
            r.true_ate
        ));
        for m in &r.methods {
            let rate = match (m.fcr, m.fpr, m.fnr) {
                (Some(fcr), _, Some(fnr)) => format!("fcr {fcr:.2} fnr {fnr:.2}"),
                (_, Some(fpr), _) => format!("fpr {fpr:.2}"),
                _ => String::new(),
            };
            s.push_str(&format!("  {} {:.4} ({rate})", m.method, m.mean_estimate));
        }
        s.push('\n');
    }
    s
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let cfg = match &args.config {
        Some(p) => SimConfigFile::load(p)?,
        None => SimConfigFile::default(),
    };
    if args.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(ExitCode::SUCCESS);
    }
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let Some(setup) = args.setup else {
        anyhow::bail!("--setup is required");
    };
    let (name, sweep): (&str, SweepConfig) = match setup {
        Setup::A => ("a", cfg.setup_a),
        Setup::B => ("b", cfg.setup_b),
        Setup::C => ("c", cfg.setup_c),
        Setup::Divergence => {
            let report = sim::divergence_scenario(&cfg.divergence)?;
            let path = args.out.join("divergence.csv");
            let mut w =
                BufWriter::new(File::create(&path).with_context(|| format!("cannot write {}", path.display()))?);
            writeln!(w, "repeat,event_estimate,event_p_value,user_estimate,user_p_value")?;
            for (i, r) in report.repeats.iter().enumerate() {
                writeln!(
                    w,
                    "{i},{},{},{},{}",
                    r.event_level.estimate, r.event_level.p_value, r.user_level.estimate, r.user_level.p_value
                )?;
            }
            w.flush()?;
            let line = report.summary_line();
            write_file(&args.out.join("divergence_summary.txt"), format!("{line}\n").as_bytes())?;
            println!("{line}");
            return Ok(ExitCode::SUCCESS);
        }
    };
    let sweep = if args.full { sweep.full() } else { sweep };
    let results = sim::run_sweep(&sweep)?;
    let path = args.out.join(format!("setup_{name}.csv"));
    let mut buf = Vec::new();
    sim::write_sweep_csv(&results, &mut buf)?;
    write_file(&path, &buf)?;
    let summary = sweep_summary(&name.to_uppercase(), &results);
    write_file(&args.out.join(format!("setup_{name}_summary.txt")), summary.as_bytes())?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.json).with_context(|| format!("cannot read {}", args.json.display()))?;
    let report = AnalysisReport::from_json(&text).with_context(|| format!("parsing {}", args.json.display()))?;
    if args.csv {
        report.write_csv(io::stdout().lock())?;
    } else {
        print!("{}", report.to_table());
    }
    Ok(ExitCode::SUCCESS)
}

fn run() -> Result<ExitCode> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return Ok(ExitCode::from(code));
        }
    };
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Srm(a) => cmd_srm(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_valid() {
        Cli::command().debug_assert();
    }

    #[test]
    fn format_inference() {
        assert!(matches!(infer_format(Path::new("x.jsonl"), None), EventFormat::Jsonl));
        assert!(matches!(infer_format(Path::new("x.csv"), None), EventFormat::Csv));
        assert!(matches!(
            infer_format(Path::new("x.jsonl"), Some(FormatArg::Csv)),
            EventFormat::Csv
        ));
    }

    #[test]
    fn unknown_setup_fails() {
        assert!(Cli::try_parse_from(["perfab", "simulate", "--setup", "Z"]).is_err());
        assert!(Cli::try_parse_from(["perfab", "simulate", "--setup", "b"]).is_ok());
    }
}
