use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use npqr::cli::{self, CliError, RunConfig};
use npqr::dataio::load_csv;
use npqr::inference::{Process, SeMode};
use npqr::rearrange::RearrangeDims;

#[derive(Debug, Parser)]
#[command(name = "npqr", version, about = "Series quantile regression with uniform inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the quantile process and report point estimates only.
    Fit(Overrides),
    /// Fit, then compute standard errors, bands and p-values.
    Infer(Overrides),
    /// Write the estimate surface over evaluation points and quantile indices.
    Surface(Overrides),
    /// Run the Monte-Carlo coverage harness from the [simulate] section.
    Simulate(Overrides),
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated quantile indices.
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long)]
    nderivs: Option<usize>,
    #[arg(long)]
    average: bool,
    #[arg(long)]
    process: Option<Process>,
    #[arg(long = "B")]
    draws: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, conflicts_with = "pointwise")]
    uniform: bool,
    #[arg(long)]
    pointwise: bool,
    #[arg(long)]
    se: Option<SeMode>,
    #[arg(long)]
    rearrange: Option<RearrangeDims>,
    #[arg(long)]
    seed: Option<u64>,
    /// Main output: result JSON, surface CSV or coverage report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for draws and refits.
    #[arg(long)]
    threads: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = &self.taus {
            cfg.taus.values = Some(t.clone());
        }
        if let Some(d) = self.nderivs {
            cfg.functional.nderivs = d;
        }
        if self.average {
            cfg.functional.average = true;
        }
        let inf = &mut cfg.inference;
        if let Some(p) = self.process {
            inf.process = p;
        }
        if let Some(b) = self.draws {
            inf.draws = b;
        }
        if let Some(a) = self.alpha {
            inf.alpha = a;
        }
        if self.uniform {
            inf.uniform = true;
        }
        if self.pointwise {
            inf.uniform = false;
        }
        if let Some(s) = self.se {
            inf.se = s;
        }
        if let Some(s) = self.seed {
            inf.seed = s;
        }
        if let Some(d) = self.rearrange {
            cfg.rearrange.enabled = true;
            cfg.rearrange.dims = d;
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: Option<&Path>, text: &str, fallback: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => {
            let mut f = create(p)?;
            f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| CliError::io(p, e))
        }
        None => fallback.write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn load_data(cfg: &RunConfig) -> Result<npqr::Dataset, CliError> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::Config("[data] path is required".into()))?;
    Ok(load_csv(path, &cfg.model)?)
}

fn run(command: Command) -> Result<(), CliError> {
    let (ov, kind) = match command {
        Command::Fit(o) => (o, "fit"),
        Command::Infer(o) => (o, "infer"),
        Command::Surface(o) => (o, "surface"),
        Command::Simulate(o) => (o, "simulate"),
    };
    let mut cfg = RunConfig::load(&ov.config)?;
    ov.apply(&mut cfg);
    if matches!(kind, "fit" | "surface") {
        cfg.inference.process = Process::None;
    }
    cfg.validate()?;
    let out = ov.out.clone();
    let body = move || -> Result<(), CliError> {
        let stdout = std::io::stdout();
        let mut stdout = stdout.lock();
        if kind == "simulate" {
            let report = cli::simulate(&cfg)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            return write_text(out.as_deref().or(cfg.output.json.as_deref()), &json, &mut stdout);
        }
        let model = cli::prepare(&cfg, load_data(&cfg)?)?;
        if let Some(p) = &cfg.output.load {
            let f = create(p)?;
            model.load.write_csv(model.design.column_names(), f)?;
        }
        let result = cli::estimate(&model, &cfg, &cfg.inference.to_config())?;
        if kind == "surface" {
            let path = out.as_deref().or(cfg.output.surface.as_deref());
            return match path {
                Some(p) => cli::write_surface(&result, model.load.averaged, create(p)?),
                None => cli::write_surface(&result, model.load.averaged, &mut stdout),
            };
        }
        let json = serde_json::to_string_pretty(&result)? + "\n";
        let table = cli::render_table(&result, &model.grid, &cfg, model.load.averaged);
        match out.as_deref().or(cfg.output.json.as_deref()) {
            Some(p) => {
                write_text(Some(p), &json, &mut stdout)?;
                write_text(cfg.output.table.as_deref(), &table, &mut stdout)
            }
            // With no JSON path the JSON owns stdout and the table moves to stderr.
            None => {
                write_text(None, &json, &mut stdout)?;
                write_text(cfg.output.table.as_deref(), &table, &mut std::io::stderr())
            }
        }
    };
    match ov.threads {
        Some(t) => npqr::par::with_threads(t, body),
        None => body(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
