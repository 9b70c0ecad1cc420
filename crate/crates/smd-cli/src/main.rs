use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use smd_core::harness::{
    run_dump, run_eval, run_membench, run_sweep, run_train, run_variance_lab, ExperimentConfig,
    RunMode,
};

#[derive(Parser)]
#[command(name = "smd", about = "KV-cache-compressed RL training lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file; sections [model] [task] [rollout] [learner] [train]
    /// [eval] [dump] [sweep] [varlab]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; the task seed follows it unless task.seed is set
    #[arg(long)]
    seed: Option<u64>,
    /// smd, naive, ir, ir-reject, or dense
    #[arg(long, value_parser = RunMode::parse)]
    mode: Option<RunMode>,
    /// Output directory for metrics, checkpoints, and reports
    #[arg(long)]
    out: Option<PathBuf>,
    /// section.key=value override; repeatable, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(ExperimentConfig::from_sources(
            self.config.as_deref(),
            &self.set,
            self.seed,
            self.mode,
            self.out.clone(),
        )?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes metrics.tsv and checkpoint.bin
    Train(Common),
    /// Train once per sweep value and summarize final rewards
    Sweep(Common),
    /// Compare slice-compaction and mask-bitmap cache memory spikes
    Membench(Common),
    /// Product-of-weights variance grid plus the policy ratio probe
    #[command(name = "variance-lab")]
    VarianceLab(Common),
    /// Greedy-decode held-out instances against the task reward
    Eval(Common),
    /// Sample trajectories from the checkpoint and dump them as JSON lines
    #[command(name = "dump-traj")]
    DumpTraj(Common),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(common) => {
            let config = common.config()?;
            let out = run_train(&config)?;
            if let Some(last) = out.records.last() {
                println!(
                    "step {}: reward {:.4} (std {:.4}), ratio mean {:.6}, peak mem {:.4}x",
                    last.step, last.reward_mean, last.reward_std, last.ratio_mean, last.peak_mem_ratio
                );
            }
            println!("final reward (last tenth): {:.4}", out.final_reward);
            println!("metrics: {}", out.metrics.display());
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Sweep(common) => {
            let config = common.config()?;
            let rows = run_sweep(&config)?;
            println!("{}\tfinal_reward", config.sweep_axis.name());
            for row in &rows {
                println!("{}\t{:.4}", row.value, row.final_reward);
            }
            println!("summary: {}", config.out.join("sweep.tsv").display());
        }
        Command::Membench(common) => {
            let config = common.config()?;
            let rows = run_membench(&config)?;
            println!("retention\tentries\tslice_peak\tmask_peak");
            for r in &rows {
                println!(
                    "{:.2}\t{}\t{:.4}x\t{:.6}x",
                    r.retention, r.entries, r.slice_peak, r.mask_peak
                );
            }
            println!("table: {}", config.out.join("membench.tsv").display());
        }
        Command::VarianceLab(common) => {
            let config = common.config()?;
            let report = run_variance_lab(&config)?;
            println!("horizon\tempirical_var\tclosed_form");
            for r in &report.sim {
                println!("{}\t{:.6e}\t{:.6e}", r.horizon, r.empirical, r.closed_form);
            }
            println!(
                "ln(1+var) slope {:.6} (closed form {:.6}), r^2 {:.6}",
                report.fit.slope,
                (1.0 + config.varlab.sigma_sq).ln(),
                report.fit.r_squared
            );
            println!("mode\tlength\tratio_mean\tratio_var");
            for (mode, points) in [("ir", &report.ir), ("smd", &report.smd)] {
                for p in points {
                    println!("{mode}\t{}\t{:.6}\t{:.6e}", p.length, p.mean, p.variance);
                }
            }
            println!(
                "tables: {}, {}",
                config.out.join("variance_sim.tsv").display(),
                config.out.join("variance_policy.tsv").display()
            );
        }
        Command::Eval(common) => {
            let config = common.config()?;
            let report = run_eval(&config)?;
            println!(
                "mean reward {:.4} over {} held-out instances",
                report.mean_reward, report.instances
            );
        }
        Command::DumpTraj(common) => {
            let config = common.config()?;
            let path = run_dump(&config)?;
            println!("wrote {} trajectories to {}", config.dump_count, path.display());
        }
    }
    Ok(())
}
