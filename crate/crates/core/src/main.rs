use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use committee_distill::pipeline::ablation::{ablation_preset, PRESETS};
use committee_distill::pipeline::{load_config, save_config, PipelineConfig, RunManifest, Workspace};
use committee_distill::{Error, ErrorClass};

const EXIT_CONFIG: u8 = 2;
const EXIT_DEPENDENCY: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "committee-distill", version, about = "Committee-voting dataset distillation")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "committee-distill.toml")]
    config: PathBuf,
    /// Overrides the synthesis, voting and student seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent jobs (members, seeds).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Pre-train every committee member.
    Squeeze,
    /// Score each member alone and write the prior table.
    Prior,
    /// Synthesize the distilled set.
    Recover,
    /// Cache the label teacher's soft labels for the distilled set.
    Label,
    /// Train students on the distilled set, one per seed.
    Eval {
        /// Comma-separated seeds; overrides `seeds` in the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Diversity, BN discrepancy and learning curves.
    Report,
    /// Write a matched set of configs for a named ablation.
    Ablate {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: String,
        /// Also run recover, eval and report for every variant.
        #[arg(long)]
        run: bool,
    },
}

fn print_manifest(m: &RunManifest) {
    println!("{} ({}): {} outputs", m.run_id, m.stage.name(), m.outputs.len());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg: PipelineConfig = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let ws = Workspace::new(&cli.out, cli.jobs);
    match cli.verb {
        Verb::Squeeze => print_manifest(&ws.squeeze(&cfg)?),
        Verb::Prior => {
            let m = ws.prior(&cfg)?;
            print_manifest(&m);
            for row in ws.read_ledger()?.iter().filter(|r| r.run_id == m.run_id) {
                println!("  {}: {:.2}", row.metric_name.as_deref().unwrap_or("?"), row.metric.unwrap_or(f64::NAN));
            }
        }
        Verb::Recover => print_manifest(&ws.recover(&cfg)?),
        Verb::Label => print_manifest(&ws.label(&cfg)?),
        Verb::Eval { seeds } => {
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let (m, results) = ws.eval(&cfg)?;
            print_manifest(&m);
            for r in results {
                println!("  seed {}: test top-1 {:.2}", r.seed, r.final_test_top1);
            }
        }
        Verb::Report => {
            let (m, rep) = ws.report(&cfg)?;
            print_manifest(&m);
            println!("  intra-class cosine {:.4}", rep.diversity.overall_mean);
            for (d, r) in rep.bn_distilled.per_layer.iter().zip(&rep.bn_real.per_layer) {
                println!(
                    "  {}: mean gap {:.4} (real {:.4}), var gap {:.4} (real {:.4})",
                    d.layer_id, d.mean_gap, r.mean_gap, d.var_gap, r.var_gap
                );
            }
        }
        Verb::Ablate { preset, run } => {
            let set = ablation_preset(&preset, &cfg)?;
            let dir = cli.out.join("ablations").join(&set.name);
            for (label, v) in &set.variants {
                let path = dir.join(format!("{label}.toml"));
                save_config(&path, v).with_context(|| format!("writing {}", path.display()))?;
                println!("{}", path.display());
            }
            if run {
                for (label, v) in &set.variants {
                    ws.recover(v)?;
                    let (_, results) = ws.eval(v)?;
                    let (_, rep) = ws.report(v)?;
                    let mean = results.iter().map(|r| r.final_test_top1).sum::<f64>() / results.len() as f64;
                    println!("{label}: test top-1 {mean:.2}, intra-class cosine {:.4}", rep.diversity.overall_mean);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let class = e.downcast_ref::<Error>().map_or(ErrorClass::Runtime, Error::class);
            ExitCode::from(match class {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Dependency => EXIT_DEPENDENCY,
                ErrorClass::Runtime => EXIT_RUNTIME,
            })
        }
    }
}
