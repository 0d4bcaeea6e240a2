mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pour_monitor::eval::{self, MetricsReport, Scheme, SplitSpec};
use pour_monitor::gradcheck;
use pour_monitor::model::EncoderKind;
use pour_monitor::numcore::with_injected_fault;
use pour_monitor::persist;
use pour_monitor::simulator::synth_dataset;
use pour_monitor::train::{self, TrainedModel, Variant};

use config::KeyValues;

#[derive(Parser)]
#[command(name = "pourmon", version, about = "Pouring success/failure monitor: simulate, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        /// key=value simulator settings (frames, d_img, imu_samples, frame_period, users, trials, noise_scale, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one checkpoint per held-out fold.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// vanilla | iosc | tf | noadv | full
        #[arg(long)]
        variant: Option<Variant>,
        /// hier | flat2
        #[arg(long)]
        encoder: Option<EncoderKind>,
        /// cross-trial | cross-container | cross-user
        #[arg(long)]
        scheme: Scheme,
        /// Train only the fold holding out this identity (trial, user, or container letter).
        #[arg(long)]
        holdout: Option<String>,
        /// key=value training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "lr")]
        learning_rate: Option<f64>,
        /// Output directory for checkpoints and epoch logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on their held-out folds and print the report table.
    Eval {
        /// Checkpoint files or directories containing `*.ckpt`.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scheme: Scheme,
        /// Directory for report.txt and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-step monitor output for one sequence file.
    Monitor {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A POUR1 sequence file.
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the backward rule of one primitive (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen { config, seed, out } => {
            let kv = config.as_deref().map(KeyValues::load).transpose()?.unwrap_or_else(KeyValues::empty);
            let mut cfg = config::sim_config(&kv)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = synth_dataset(&cfg)?;
            persist::save_dataset(&ds, &out)?;
            println!("{} sequences written", ds.len());
        }
        Command::Train { data, variant, encoder, scheme, holdout, config, epochs, seed, learning_rate, out } => {
            let kv = config.as_deref().map(KeyValues::load).transpose()?.unwrap_or_else(KeyValues::empty);
            let mut cfg = config::train_config(&kv)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(e) = encoder {
                cfg.model.encoder = e;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            let ds = persist::load_dataset(&data)?;
            let first = ds.sequences.first().context("dataset is empty")?;
            cfg.model.d_img = first.frames[0].feature.len();
            cfg.model.imu_samples = first.frames[0].imu.samples.len();
            cfg.validate()?;
            let folds = match holdout {
                Some(id) => vec![eval::fold_for(&ds, format!("{scheme}:{id}").parse::<SplitSpec>()?)?],
                None => eval::make_folds(&ds, scheme)?,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for fold in &folds {
                let stem = checkpoint_stem(cfg.variant, cfg.model.encoder, fold.spec);
                eprintln!("training {stem}: {} train / {} test sequences", fold.train.len(), fold.test.len());
                let trained = train::train_run_with(&cfg, &ds, fold, |log| eprintln!("{stem}\t{}", log.line()))?;
                let mut log = String::from("epoch\tL_reg\tL_adv\tL_Gen\tL_Dis\tL_cls\tL_mon\n");
                for l in &trained.log {
                    log.push_str(&l.line());
                    log.push('\n');
                }
                persist::write_atomic(&out.join(format!("{stem}.log")), log.as_bytes())?;
                persist::save_checkpoint(&trained, &out.join(format!("{stem}.ckpt")))?;
                println!("{}", out.join(format!("{stem}.ckpt")).display());
            }
        }
        Command::Eval { checkpoints, data, scheme, out } => {
            let ds = persist::load_dataset(&data)?;
            let mut groups: BTreeMap<String, Vec<eval::FoldMetrics>> = BTreeMap::new();
            for path in expand_checkpoints(&checkpoints)? {
                let trained = persist::load_checkpoint(&path)?;
                let spec = trained.fold.with_context(|| format!("{}: checkpoint records no held-out split", path.display()))?;
                if spec.scheme != scheme {
                    bail!("{}: trained for {}, not {scheme}", path.display(), spec.scheme);
                }
                let fold = eval::fold_for(&ds, spec)?;
                let metrics = eval::evaluate_fold(&trained, &ds, &fold).with_context(|| path.display().to_string())?;
                groups.entry(label(&trained)).or_default().push(metrics);
            }
            let reports: Vec<MetricsReport> = groups.into_iter().map(|(label, folds)| MetricsReport { label, folds }).collect();
            let table = eval::render_table(scheme, &reports);
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                persist::write_atomic(&dir.join("report.txt"), table.as_bytes())?;
                persist::write_atomic(&dir.join("report.csv"), eval::render_csv(&reports).as_bytes())?;
            }
        }
        Command::Monitor { checkpoint, sequence } => {
            let trained = persist::load_checkpoint(&checkpoint)?;
            let bytes = std::fs::read(&sequence).with_context(|| format!("reading {}", sequence.display()))?;
            let frames = persist::decode_frames(&sequence, &bytes)?;
            let pred = trained.model.predict(&frames, trained.config.variant.uses_score())?;
            println!("t\ty\td");
            for (i, s) in pred.steps.iter().enumerate() {
                println!("{}\t{:.6}\t{:.6}", i + 1, s.success, s.score);
            }
            let ys: Vec<f64> = pred.steps.iter().map(|s| s.success).collect();
            let verdict = if eval::sequence_verdict(&ys).is_success() { "success" } else { "failure" };
            println!("verdict\t{verdict}");
        }
        Command::Gradcheck { seed, inject_fault } => {
            let rows = match inject_fault {
                Some(name) => {
                    let p = gradcheck::parse_primitive(&name)?;
                    with_injected_fault(p, || gradcheck::run(seed))?
                }
                None => gradcheck::run(seed)?,
            };
            print!("{}", gradcheck::render(&rows));
            if rows.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_stem(variant: Variant, encoder: EncoderKind, spec: SplitSpec) -> String {
    format!("{}-{}-{}-{}", variant, encoder.name(), spec.scheme, spec.to_string().rsplit(':').next().unwrap_or(""))
}

fn label(t: &TrainedModel) -> String {
    format!("{}/{}", t.config.variant, t.config.model.encoder.name())
}

fn expand_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "ckpt"))
                .collect();
            found.sort();
            if found.is_empty() {
                bail!("{}: no .ckpt files", p.display());
            }
            out.extend(found);
        } else {
            out.push(p.to_path_buf());
        }
    }
    Ok(out)
}
