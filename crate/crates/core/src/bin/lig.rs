use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lig::{
    fit_log, fit_single, io, psnr, reconstruct, benchmark_model, Error, FitConfig, LogConfig,
    Result,
};

#[derive(Parser, Debug)]
#[command(name = "lig", version, about = "Fit, render and evaluate 2D Gaussian image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a PNG image
    Fit {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Total number of Gaussians across both levels
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 0.125)]
        ratio: f64,
        #[arg(long, default_value_t = 4)]
        down: usize,
        #[arg(long, default_value_t = 30_000)]
        iters: usize,
        #[arg(long, default_value_t = 0.018)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fit one level on the full image
        #[arg(long)]
        single_level: bool,
        /// Reduce gradients in a fixed order so results are bit-reproducible
        #[arg(long)]
        deterministic: bool,
    },
    /// Reconstruct a model to PNG
    Render {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// PSNR of a model's reconstruction against a reference PNG
    Eval { model: PathBuf, reference: PathBuf },
    /// Reconstruction throughput in frames per second
    Bench {
        model: PathBuf,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
    },
    /// Print header fields and point counts
    Info { model: PathBuf },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("LIG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("LIG_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fit {
            input,
            output,
            points,
            ratio,
            down,
            iters,
            lr,
            seed,
            single_level,
            deterministic,
        } => {
            let image = io::load_image(&input)?;
            let fit = FitConfig {
                iters,
                lr,
                seed,
                deterministic,
                ..FitConfig::default()
            };
            let start = Instant::now();
            let (report, n0, n1) = if single_level {
                fit.validate()?;
                (fit_single(&image, points, &fit)?, 0, points)
            } else {
                let cfg = LogConfig {
                    total_points: points,
                    ratio,
                    down_factor: down,
                    fit,
                };
                let (n0, n1) = lig::allocate_points(points, ratio)?;
                (fit_log(&image, &cfg)?, n0, n1)
            };
            let wall = start.elapsed().as_secs_f64();
            io::save_model(&report.model, &output)?;
            let quality = psnr(&reconstruct(&report.model), &image)?;
            println!("n0={n0}");
            println!("n1={n1}");
            if let [s0, s1] = report.stage_losses[..] {
                println!("stage0_final_loss={s0}");
                println!("stage1_final_loss={s1}");
            } else {
                println!("stage0_final_loss={}", report.stage_losses[0]);
            }
            println!("psnr_db={quality}");
            println!("wall_time_s={wall}");
        }
        Command::Render { model, output } => {
            let model = io::load_model(&model)?;
            io::save_image(&reconstruct(&model), &output)?;
        }
        Command::Eval { model, reference } => {
            let model = io::load_model(&model)?;
            let reference = io::load_image(&reference)?;
            println!("psnr_db={}", psnr(&reconstruct(&model), &reference)?);
        }
        Command::Bench { model, repeats } => {
            let model = io::load_model(&model)?;
            println!("fps={}", benchmark_model(&model, repeats)?);
        }
        Command::Info { model } => {
            let model = io::load_model(&model)?;
            let (n0, n1) = model.point_counts();
            println!("version={}", io::VERSION);
            println!("full_w={}", model.full_w);
            println!("full_h={}", model.full_h);
            println!("channels={}", model.channels);
            println!("level_count={}", model.levels().count());
            for (i, level) in model.levels().enumerate() {
                println!("level{i}_w={}", level.width);
                println!("level{i}_h={}", level.height);
            }
            println!("n0={n0}");
            println!("n1={n1}");
            println!("res_min={}", model.res_min);
            println!("res_max={}", model.res_max);
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error=usage message=\"{}\"", one_line(first));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error={} message=\"{}\"", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
