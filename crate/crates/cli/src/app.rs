use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "mpot", version, about = "Density-equalizing transport maps on regular grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the potential of a density and write its field.
    Solve {
        /// Flat key=value run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in density, overriding the configured source.
        #[arg(long, value_parser = ["uniform", "gaussian", "bimodal", "concave", "ring"])]
        builtin: Option<String>,
        /// Output lattice size per side (a crop of the finest level).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warp a uniform lattice back through a field to estimate its density.
    Reconstruct {
        field: PathBuf,
        /// Valid region inside a padded field: top,left,height,width.
        #[arg(long)]
        valid: Option<String>,
        /// Output lattice size per side (default: the valid region's shape).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Bhattacharyya coefficient of two grids and its complement.
    Eval { p: PathBuf, q: PathBuf },
    /// Write contour, arrow and preview files.
    Plot {
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Second grid, contoured at the levels of the first.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw points from the density a field encodes.
    Sample {
        field: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        valid: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one command; text meant for standard output is returned.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Solve {
            config,
            builtin,
            size,
            seed,
            out,
        } => {
            let cfg = commands::resolve_config(config.as_deref(), builtin.as_deref(), size, seed)?;
            let outcome = commands::cmd_solve(&cfg, &out)?;
            Ok(commands::solve_summary(&outcome))
        }
        Command::Reconstruct { field, valid, size, out } => {
            let valid = valid.as_deref().map(commands::parse_region).transpose()?;
            let rec = commands::cmd_reconstruct(&field, valid, size, &out)?;
            let mut s = format!("mass ratio {:.6}\n", rec.mass_ratio);
            if !rec.folded.is_empty() {
                s += &format!("dropped {} folded cells\n", rec.folded.len());
            }
            Ok(s)
        }
        Command::Eval { p, q } => {
            let (beta, error) = commands::cmd_eval(&p, &q)?;
            Ok(commands::eval_text(beta, error))
        }
        Command::Plot {
            grid,
            compare,
            field,
            out,
        } => {
            let written = commands::cmd_plot(grid.as_deref(), compare.as_deref(), field.as_deref(), &out)?;
            Ok(written.iter().map(|p| format!("wrote {}\n", p.display())).collect())
        }
        Command::Sample {
            field,
            n,
            seed,
            valid,
            out,
        } => {
            let valid = valid.as_deref().map(commands::parse_region).transpose()?;
            let pts = commands::cmd_sample(&field, n, seed, valid, &out)?;
            Ok(format!("wrote {} points\n", pts.len()))
        }
    }
}
