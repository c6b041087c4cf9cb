use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use earl_core::harness::{self, post_boundary_loss, RunConfig, RunResult, Summary, Variant};
use earl_core::stream;

#[derive(Parser)]
#[command(name = "earl", version, about = "Online continual learning with a fixed ETF classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stream and write its CSV and SVG.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several seeds and report mean ± std.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated; defaults to the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run EARL, -RC and -RC & PDT on every config seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as IDX files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, out } => cmd_run(&load(&config)?, seed, &out),
        Command::Sweep { config, seeds, out } => {
            let config = load(&config)?;
            let seeds = seeds.unwrap_or_else(|| config.seeds.clone());
            cmd_sweep(&config, &seeds, out.as_deref())
        }
        Command::Ablate { config, out } => cmd_ablate(&load(&config)?, out.as_deref()),
        Command::Synth { config, seed, out } => cmd_synth(&load(&config)?, seed, &out),
    }
}

fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn print_result(label: &str, r: &RunResult) {
    println!(
        "{label:<12} seed {:<4} A_auc {:.4}  A_last {:.4}  AOA {:.4}  forgetting {:.4}  ({:.1}s)",
        r.seed,
        r.a_auc,
        r.a_last,
        r.aoa,
        r.forgetting,
        r.wall_clock.as_secs_f64()
    );
}

fn write_outputs(dir: &Path, stem: &str, results: &[RunResult], labels: &[String]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (r, label) in results.iter().zip(labels) {
        let name = format!("{stem}_{}.csv", label.replace([' ', '&'], "").replace('-', "no_"));
        harness::emit_csv(r, &dir.join(name))?;
    }
    harness::emit_svg(results, labels, &dir.join(format!("{stem}.svg")))?;
    Ok(())
}

fn cmd_run(config: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let r = harness::run(config, seed)?;
    print_result("run", &r);
    write_outputs(out, "run", std::slice::from_ref(&r), &[format!("seed{seed}")])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(config: &RunConfig, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let mut results = Vec::new();
    for &seed in seeds {
        let r = harness::run(config, seed)?;
        print_result("sweep", &r);
        results.push(r);
    }
    let col = |f: fn(&RunResult) -> f64| Summary::of(&results.iter().map(f).collect::<Vec<_>>());
    let fmt = |s: Summary| format!("{:.4} ± {:.4}", s.mean, s.std);
    println!("A_auc      {}", fmt(col(|r| r.a_auc)));
    println!("A_last     {}", fmt(col(|r| r.a_last)));
    println!("AOA        {}", fmt(col(|r| r.aoa)));
    println!("forgetting {}", fmt(col(|r| r.forgetting)));
    if let Some(dir) = out {
        let labels: Vec<String> = seeds.iter().map(|s| format!("seed{s}")).collect();
        write_outputs(dir, "sweep", &results, &labels)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_ablate(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let rows = harness::ablate(config)?;
    println!(
        "{:<10} {:>18} {:>18} {:>18} {:>18}",
        "method", "A_auc", "A_last", "AOA", "post-task loss"
    );
    for row in &rows {
        let fmt = |s: Summary| format!("{:.4} ± {:.4}", s.mean, s.std);
        let post: Vec<f64> = row
            .results
            .iter()
            .filter_map(|r| post_boundary_loss(r, 200))
            .collect();
        let post = if post.is_empty() {
            "-".to_string()
        } else {
            fmt(Summary::of(&post))
        };
        println!(
            "{:<10} {:>18} {:>18} {:>18} {:>18}",
            row.variant.label(),
            fmt(row.summary(|r| r.a_auc)),
            fmt(row.summary(|r| r.a_last)),
            fmt(row.summary(|r| r.aoa)),
            post
        );
    }
    if let Some(dir) = out {
        // first seed of each variant, one chart
        let firsts: Vec<RunResult> = rows.iter().filter_map(|r| r.results.first().cloned()).collect();
        let labels: Vec<String> = Variant::ALL.iter().map(|v| v.label().to_string()).collect();
        write_outputs(dir, "ablate", &firsts, &labels)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_synth(config: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let ds = config.dataset(seed)?;
    fs::create_dir_all(out)?;
    for (name, split) in [("train", &ds.train), ("test", &ds.test)] {
        let images: Vec<_> = split.iter().map(|&i| ds.images[i].clone()).collect();
        let labels: Vec<usize> = split.iter().map(|&i| ds.labels[i]).collect();
        stream::write_idx_images(&out.join(format!("{name}-images.idx3-ubyte")), &images)?;
        stream::write_idx_labels(&out.join(format!("{name}-labels.idx1-ubyte")), &labels)?;
    }
    println!(
        "wrote {} train / {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}
