//! Command-line interface for the LTDL multi-spectral image denoiser.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ltdl_core::config::PartialConfig;
use ltdl_core::lowrank::singular_values;
use ltdl_core::metrics::MetricReport;
use ltdl_core::solver;
use ltdl_core::synth::{self, SynthSpec};
use ltdl_core::{io, LtdlError};

#[derive(Parser)]
#[command(
    name = "ltdl",
    about = "Multi-spectral image denoising via low-rank tensor dictionary learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricFormat {
    Csv,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Denoise a cube with the full grouping + dictionary-learning pipeline.
    Denoise {
        /// Input cube (LTDL container or flat binary with .hdr sidecar).
        #[arg(long)]
        input: PathBuf,
        /// Noise standard deviation; estimated from the input when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        /// Flat key=value config file; command-line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output cube (clamped to [0, 1] on export).
        #[arg(long)]
        output: PathBuf,
        /// Per-iteration diagnostics as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for the learned dictionaries and spatial-atom tiles.
        #[arg(long)]
        export_dicts: Option<PathBuf>,
        /// Random seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Add i.i.d. Gaussian noise to a cube (never clamped).
    Addnoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Quality indices of a test cube against a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: MetricFormat,
    },
    /// Dictionary-recovery experiment on synthetic groups; prints the
    /// success-ratio-versus-iteration table.
    Synth {
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dimensions, value range and per-mode singular-value spectra of a cube.
    Inspect {
        #[arg(long)]
        input: PathBuf,
        /// Optionally export one band as a 16-bit PGM.
        #[arg(long)]
        export_band: Option<usize>,
        #[arg(long, requires = "export_band")]
        band_output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("ltdl: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), LtdlError> {
    match cli.command {
        Command::Denoise { input, sigma, config, output, report, export_dicts, seed } => {
            let msi = io::load_msi(&input)?;

            let file_layer = match config {
                Some(path) => PartialConfig::parse(&std::fs::read_to_string(&path)?)?,
                None => PartialConfig::default(),
            };
            let flag_layer = PartialConfig {
                noise_sigma: sigma,
                seed,
                ..PartialConfig::default()
            };
            let merged = flag_layer.merged_over(&file_layer);

            let fallback_sigma = match merged.noise_sigma {
                Some(_) => 0.0,
                None => {
                    let est = solver::estimate_noise_sigma(&msi)?;
                    println!("estimated noise sigma: {est:.6}");
                    est
                }
            };
            let cfg = merged.resolve(fallback_sigma)?;
            println!("seed: {}", cfg.seed);
            println!("noise sigma: {:.6}", cfg.noise_sigma);

            let (denoised, dict, solver_report) = solver::denoise(&msi, &cfg)?;
            for line in solver_report.log_lines() {
                println!("{line}");
            }
            println!(
                "{} in {:.2}s",
                if solver_report.converged { "converged" } else { "stopped at max iterations" },
                solver_report.total_seconds
            );

            io::save_msi(&output, &denoised.clamped_to_unit())?;
            println!("wrote {}", output.display());
            if let Some(path) = report {
                std::fs::write(&path, solver_report.to_csv())?;
                println!("wrote {}", path.display());
            }
            if let Some(dir) = export_dicts {
                io::export_dictionaries(&dir, &dict, cfg.d_l, cfg.d_w)?;
                println!("wrote dictionaries under {}", dir.display());
            }
            Ok(())
        }
        Command::Addnoise { input, sigma, seed, output } => {
            let msi = io::load_msi(&input)?;
            let noisy = synth::add_gaussian_noise(&msi, sigma, seed)?;
            io::save_msi(&output, &noisy)?;
            println!("seed: {seed}");
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Metrics { reference, test, format } => {
            let r = io::load_msi(&reference)?;
            let t = io::load_msi(&test)?;
            let report = MetricReport::compute(&r, &t)?;
            match format {
                MetricFormat::Csv => {
                    println!("{}", MetricReport::csv_header());
                    println!("{}", report.to_csv_row());
                }
                MetricFormat::Table => println!("{}", report.to_table()),
            }
            Ok(())
        }
        Command::Synth { sigma, trials, iters, seed } => {
            let spec = SynthSpec { noise_sigma: sigma, seed, ..SynthSpec::default() };
            println!("seed: {seed}");
            let outcome = synth::run_synth_experiment(&spec, trials, iters)?;
            print!("{}", outcome.to_table());
            println!("final success ratio: {:.4}", outcome.final_ratio());
            Ok(())
        }
        Command::Inspect { input, export_band, band_output } => {
            let msi = io::load_msi(&input)?;
            let (l, w, h) = msi.dims();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in msi.cube.as_slice() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            println!("dims: {l} x {w} x {h}");
            println!("value range: [{lo:.6}, {hi:.6}]");
            println!("mode,index,sigma");
            for mode in 1..=3 {
                let sv = singular_values(&msi.cube.unfold(mode)?);
                for (i, s) in sv.iter().enumerate() {
                    println!("{mode},{i},{s:.9e}");
                }
            }
            if let (Some(band), Some(path)) = (export_band, band_output) {
                io::export_band_pgm(&msi, band, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}
