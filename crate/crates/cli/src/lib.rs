//! The `s3pet` command line: data generation, both training stages,
//! inference, evaluation, ablation and the gradient check.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use s3pet_core::datagen::{read_volume, write_dataset, write_volume, DatasetLayout, SplitManifest};
use s3pet_core::metrics::{metrics_csv, MetricReport};
use s3pet_core::model::Dose;
use s3pet_core::trainer::{
    ablation_csv, finetune_stage2, gradient_check, infer, load_checkpoint, lpet_baseline,
    pretrain_stage1, run_ablation, save_checkpoint, stage2_log_csv, AblationData, EvalCase,
    GradCheckConfig, PairedSlices, Stage, Variant,
};
use s3pet_core::volume::ImageSlice;

pub use config::{keys_help, parse_config, Config, KEYS};

pub const STAGE1_LPET: &str = "stage1_lpet.ckpt";
pub const STAGE1_SPET: &str = "stage1_spet.ckpt";
pub const STAGE2: &str = "stage2.ckpt";

#[derive(Debug, Parser)]
#[command(name = "s3pet", version, about = "Two-stage semi-supervised PET reconstruction", after_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration file; absent keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input path (dataset directory).
    #[arg(long = "in", global = true)]
    pub input: Option<PathBuf>,
    /// Output path (dataset or run directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesize phantoms and LPET twins into --out, with a split manifest.
    GenData,
    /// Stage-I pretraining of both dose autoencoders on --in; checkpoints and logs to --out.
    Pretrain,
    /// Stage-II fine-tuning on --in, starting from the Stage-I checkpoints in --out.
    Finetune,
    /// Reconstruct every evaluation LPET volume of --in with --out/stage2.ckpt into --out/rpet/.
    Infer,
    /// Metrics of --out/rpet/ against the SPET references of --in, plus an LPET baseline row.
    Eval,
    /// Train and evaluate the four ablation variants over several seeds.
    Ablate,
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenData,
        Command::Pretrain,
        Command::Finetune,
        Command::Infer,
        Command::Eval,
        Command::Ablate,
        Command::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Full `--help` text: every command and every config key.
///
/// ```
/// let help = s3pet_cli::help_text();
/// for c in s3pet_cli::Command::ALL {
///     assert!(help.contains(c.name()));
/// }
/// for (key, _, _) in s3pet_cli::KEYS {
///     assert!(help.contains(key));
/// }
/// ```
pub fn help_text() -> String {
    use clap::CommandFactory;
    Cli::command().render_long_help().to_string()
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("{cmd} needs --{flag}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn slices_of(layout: &DatasetLayout, ids: &[String], dose: Dose) -> Result<Vec<ImageSlice>> {
    let mut out = Vec::new();
    for id in ids {
        let path = match dose {
            Dose::Low => layout.lpet(id),
            Dose::Standard => layout.spet(id),
        };
        out.extend(
            read_volume(&path)
                .with_context(|| format!("reading {}", path.display()))?
                .slices(),
        );
    }
    Ok(out)
}

fn paired(layout: &DatasetLayout, ids: &[String]) -> Result<PairedSlices> {
    Ok(PairedSlices {
        lpet: slices_of(layout, ids, Dose::Low)?,
        spet: slices_of(layout, ids, Dose::Standard)?,
    })
}

fn eval_cases(layout: &DatasetLayout, ids: &[String]) -> Result<Vec<EvalCase>> {
    ids.iter()
        .map(|id| {
            Ok(EvalCase {
                id: id.clone(),
                lpet: read_volume(&layout.lpet(id))?,
                spet: read_volume(&layout.spet(id))?,
            })
        })
        .collect()
}

fn manifest(layout: &DatasetLayout) -> Result<SplitManifest> {
    let path = layout.manifest();
    SplitManifest::read(&path).with_context(|| format!("reading manifest {}", path.display()))
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => Config::default(),
    };
    let name = cli.command.name();
    match cli.command {
        Command::GenData => {
            let out = need(&cli.out, "out", name)?;
            let m = write_dataset(out, &cfg.data, cli.seed)?;
            println!(
                "wrote {} unpaired, {} paired training and {} evaluation volumes to {}",
                m.unpaired_spet.len(),
                m.paired_train.len(),
                m.paired_eval.len(),
                out.display()
            );
        }
        Command::Pretrain => {
            let data = DatasetLayout::new(need(&cli.input, "in", name)?);
            let out = need(&cli.out, "out", name)?;
            fs::create_dir_all(out)?;
            let m = manifest(&data)?;
            let c1 = cfg.train_config(Stage::One, cli.seed, Variant::Full);
            for (dose, ids, file) in [
                (Dose::Low, &m.lpet_pretrain, STAGE1_LPET),
                (Dose::Standard, &m.unpaired_spet, STAGE1_SPET),
            ] {
                let run = pretrain_stage1(&slices_of(&data, ids, dose)?, dose, &c1)?;
                save_checkpoint(&out.join(file), &run.checkpoint)?;
                write_text(
                    &out.join(format!("stage1_{}_log.csv", dose.as_str().to_lowercase())),
                    &run.log_csv(),
                )?;
                println!(
                    "stage I {dose}: {} steps, loss {:.5} -> {:.5}",
                    run.step_losses.len(),
                    run.step_losses[0],
                    run.step_losses.last().copied().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Finetune => {
            let data = DatasetLayout::new(need(&cli.input, "in", name)?);
            let out = need(&cli.out, "out", name)?;
            let m = manifest(&data)?;
            let l = load_checkpoint(&out.join(STAGE1_LPET))?;
            let s = load_checkpoint(&out.join(STAGE1_SPET))?;
            let c2 = cfg.train_config(Stage::Two, cli.seed, Variant::Full);
            let run = finetune_stage2(&paired(&data, &m.paired_train)?, &l, &s, &c2)?;
            save_checkpoint(&out.join(STAGE2), &run.checkpoint)?;
            write_text(&out.join("stage2_log.csv"), &stage2_log_csv(&run.log))?;
            if let Some(r) = run.log.last() {
                println!(
                    "stage II: {} steps, final total loss {:.5}",
                    run.log.len(),
                    r.total
                );
            }
        }
        Command::Infer => {
            let data = DatasetLayout::new(need(&cli.input, "in", name)?);
            let out = need(&cli.out, "out", name)?;
            let ckpt = load_checkpoint(&out.join(STAGE2))?;
            let run = DatasetLayout::new(out);
            fs::create_dir_all(out.join("rpet"))?;
            for id in &manifest(&data)?.paired_eval {
                let rpet = infer(&read_volume(&data.lpet(id))?, &ckpt)?;
                write_volume(&run.rpet(id), &rpet)?;
            }
            println!("wrote reconstructions to {}", out.join("rpet").display());
        }
        Command::Eval => {
            let data = DatasetLayout::new(need(&cli.input, "in", name)?);
            let out = need(&cli.out, "out", name)?;
            let run = DatasetLayout::new(out);
            let cases = eval_cases(&data, &manifest(&data)?.paired_eval)?;
            let mut rows = Vec::new();
            for c in &cases {
                let path = run.rpet(&c.id);
                let pred =
                    read_volume(&path).with_context(|| format!("reading {}", path.display()))?;
                rows.push(MetricReport::evaluate(
                    &c.id,
                    &pred,
                    &c.spet,
                    cfg.eval.max_val,
                )?);
            }
            rows.push(lpet_baseline(&cases, cfg.eval.max_val)?);
            let csv = metrics_csv(&rows);
            write_text(&out.join("metrics.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Ablate => {
            let data = DatasetLayout::new(need(&cli.input, "in", name)?);
            let out = need(&cli.out, "out", name)?;
            fs::create_dir_all(out)?;
            let m = manifest(&data)?;
            let inputs = AblationData {
                pretrain_lpet: slices_of(&data, &m.lpet_pretrain, Dose::Low)?,
                pretrain_spet: slices_of(&data, &m.unpaired_spet, Dose::Standard)?,
                train: paired(&data, &m.paired_train)?,
                eval: eval_cases(&data, &m.paired_eval)?,
            };
            let mut rows = Vec::new();
            let mut detail = String::from("seed,variant,psnr,ssim,nmse\n");
            for k in 0..cfg.eval.ablation_seeds {
                let seed = cli.seed + k;
                let c1 = cfg.train_config(Stage::One, seed, Variant::Full);
                let c2 = cfg.train_config(Stage::Two, seed, Variant::Full);
                for r in run_ablation(&inputs, &c1, &c2, cfg.eval.max_val)? {
                    detail.push_str(&format!(
                        "{},{},{},{},{}\n",
                        r.seed, r.variant, r.metrics.psnr, r.metrics.ssim, r.metrics.nmse
                    ));
                    rows.push(r);
                }
            }
            let csv = ablation_csv(&rows)?;
            write_text(&out.join("ablation.csv"), &csv)?;
            write_text(&out.join("ablation_runs.csv"), &detail)?;
            print!("{csv}");
        }
        Command::Gradcheck => {
            let gc = GradCheckConfig {
                seed: cli.seed,
                ..GradCheckConfig::default()
            };
            let report = gradient_check(&gc)?;
            print!("{report}");
        }
    }
    Ok(())
}
