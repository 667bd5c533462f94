use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pcglm::design::DesignKind;
use pcglm::glm::FitOptions;
use pcglm::io::{
    cmd_fit, cmd_poset2tree, cmd_report, cmd_select, cmd_simulate, exit_code, CovariateColumn, TableSpec,
};
use pcglm::link::{CdfKind, RatioKind};
use pcglm::selection::{BicSample, Criterion, ModelFamily, SelectionOptions, DEFAULT_ALPHA};
use pcglm::tree::PcglmSpec;
use pcglm::Error;

#[derive(Parser)]
#[command(name = "pcglm", version, about = "Partitioned conditional GLMs for categorical responses")]
struct Cli {
    /// Worker threads for per-vertex fitting (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model spec to a data table.
    Fit {
        /// Model spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Report format.
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the spec with fitted parameters here.
        #[arg(long)]
        fitted_spec: Option<PathBuf>,
    },
    /// Select a partition tree and node models from data.
    Select {
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
        criterion: CriterionArg,
        #[arg(long = "bic-n", value_enum, default_value_t = BicArg::Node)]
        bic_n: BicArg,
        /// Ratio of the node family.
        #[arg(long, default_value = "cumulative")]
        ratio: String,
        /// CDF of the node family.
        #[arg(long, default_value = "logistic")]
        cdf: String,
        /// Degrees of freedom when --cdf student.
        #[arg(long)]
        df: Option<u32>,
        /// Design of the node family.
        #[arg(long, value_enum, default_value_t = DesignArg::Proportional)]
        design: DesignArg,
        /// Skip the final CDF refinement.
        #[arg(long)]
        no_refine: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the selected spec here.
        #[arg(long)]
        spec_out: Option<PathBuf>,
        /// Write the selection trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Draw a data table from a spec with parameters.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(short, long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Name of the response column.
        #[arg(long, default_value = "y")]
        response: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build a spec skeleton from a Hasse diagram or factor description.
    Poset2tree {
        input: PathBuf,
        /// Ratio used at vertices whose children are ordered.
        #[arg(long, default_value = "cumulative")]
        ordered_ratio: String,
        /// Covariates placed in every node.
        #[arg(long, value_delimiter = ',')]
        variables: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Describe a model spec.
    Report {
        spec: PathBuf,
    },
}

#[derive(Args)]
struct TableArgs {
    /// Data table (CSV with header).
    #[arg(long)]
    data: PathBuf,
    /// Field delimiter (single character, `tab` for tabs).
    #[arg(long, default_value = ",")]
    delimiter: String,
    /// Response column.
    #[arg(long, default_value = "y")]
    response: String,
    /// Response levels in category order, comma separated.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<String>,
    /// Covariate `name[:numeric|:categorical:l1,l2|:ordinal:l1,l2]`; repeatable.
    #[arg(long = "covariate")]
    covariates: Vec<String>,
    /// Column of case weights.
    #[arg(long)]
    weight: Option<String>,
    #[arg(long)]
    aggregate_duplicates: bool,
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Bic,
    Loglik,
}

#[derive(Clone, Copy, ValueEnum)]
enum BicArg {
    Node,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Complete,
    Proportional,
}

impl TableArgs {
    fn to_spec(&self) -> Result<TableSpec, Error> {
        let delimiter = match self.delimiter.as_str() {
            "tab" | "\\t" => b'\t',
            d if d.len() == 1 => d.as_bytes()[0],
            d => return Err(Error::Parse(format!("delimiter '{d}' must be a single character"))),
        };
        let mut t = TableSpec::new(&self.data, &self.response, self.levels.clone());
        t.delimiter = delimiter;
        t.covariates = self
            .covariates
            .iter()
            .map(|c| CovariateColumn::parse(c))
            .collect::<Result<_, _>>()?;
        t.weight = self.weight.clone();
        t.aggregate_duplicates = self.aggregate_duplicates;
        t.standardize = self.standardize;
        Ok(t)
    }
}

impl FitArgs {
    fn options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            ..FitOptions::default()
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    emit(Some(path), text)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Spec(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Fit {
            spec,
            table,
            fit,
            format,
            output,
            fitted_spec,
        } => {
            let out = cmd_fit(&spec, &table.to_spec()?, &fit.options())?;
            if let Some(p) = fitted_spec {
                write_file(&p, &out.fitted_spec.to_json()?)?;
            }
            let text = match format {
                Format::Text => out.report.to_text(),
                Format::Json => out.report.to_json() + "\n",
            };
            emit(output.as_deref(), &text)
        }
        Command::Select {
            table,
            fit,
            alpha,
            criterion,
            bic_n,
            ratio,
            cdf,
            df,
            design,
            no_refine,
            format,
            output,
            spec_out,
            trace,
        } => {
            let table = table.to_spec()?;
            if table.response_levels.is_empty() {
                return Err(Error::Parse("select needs --levels".into()));
            }
            let family = ModelFamily {
                ratio: RatioKind::parse(&ratio)?,
                cdf: CdfKind::parse(&cdf, df)?,
                design: match design {
                    DesignArg::Complete => DesignKind::Complete,
                    DesignArg::Proportional => DesignKind::Proportional,
                },
            };
            let options = SelectionOptions {
                alpha,
                criterion: match criterion {
                    CriterionArg::Bic => Criterion::Bic,
                    CriterionArg::Loglik => Criterion::LogLik,
                },
                bic_sample: match bic_n {
                    BicArg::Node => BicSample::Node,
                    BicArg::Global => BicSample::Global,
                },
                fit: fit.options(),
                refine: !no_refine,
                ..SelectionOptions::default()
            };
            let out = cmd_select(&table, &family, &options)?;
            if let Some(p) = trace {
                write_file(&p, &out.trace_jsonl)?;
            }
            if let Some(p) = spec_out {
                write_file(&p, &out.spec.to_json()?)?;
            }
            let text = match format {
                Format::Text => out.report.to_text(),
                Format::Json => out.report.to_json() + "\n",
            };
            emit(output.as_deref(), &text)
        }
        Command::Simulate {
            spec,
            n,
            seed,
            response,
            output,
        } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io(format!("{}: {e}", spec.display())))?;
            let spec = PcglmSpec::from_json(&text)?;
            emit(output.as_deref(), &cmd_simulate(&spec, n, seed, &response)?)
        }
        Command::Poset2tree {
            input,
            ordered_ratio,
            variables,
            output,
        } => {
            let text =
                std::fs::read_to_string(&input).map_err(|e| Error::Io(format!("{}: {e}", input.display())))?;
            let spec = cmd_poset2tree(&text, RatioKind::parse(&ordered_ratio)?, &variables)?;
            emit(output.as_deref(), &(spec.to_json()? + "\n"))
        }
        Command::Report { spec } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io(format!("{}: {e}", spec.display())))?;
            emit(None, &cmd_report(&PcglmSpec::from_json(&text)?))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
