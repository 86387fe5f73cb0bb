//! The `anyad` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{write_atomic, Archive};
use crate::config::Config;
use crate::dataio::{blob_read, ingest, synth_generate, Dataset, SliceProtocol};
use crate::encoder::ModalityMask;
use crate::error::{Error, Result};
use crate::eval::{evaluate, parse_combos, EvalOptions, EvalReport};
use crate::metrics::ProSweep;
use crate::model::Model;
use crate::scalar::{DType, Scalar};
use crate::score::write_heatmap_png;
use crate::train::{archive_dtype, model_archive, model_from_archive, refs_from_archive, Trainer};

/// Tolerance of the f32 step-1 loss against its f64 replay.
pub const VERIFY_LOSS_TOL: f64 = 1e-4;
/// Largest metric change tolerated between f32 and f64 scoring.
pub const VERIFY_METRIC_TOL: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "anyad", version, about = "Any-modality anomaly detection")]
pub struct Cli {
    /// Worker threads; every code path is single-threaded and deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic three-modality dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        normal: usize,
        #[arg(long, default_value_t = 100)]
        abnormal: usize,
    },
    /// Slice, label and split a directory of NIfTI subjects.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        axis: usize,
        #[arg(long, default_value_t = 80)]
        first: usize,
        #[arg(long, default_value_t = 120)]
        last: usize,
        #[arg(long, default_value_t = 5)]
        stride: usize,
    },
    /// Precompute full-modality reference statistics.
    Stats(RunArgs),
    /// Train the student.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from a checkpoint, or start from a `stats` archive.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        /// Replay the first step in f64 and fail if the losses disagree.
        #[arg(long)]
        verify_f64: bool,
    },
    /// Score the test split under each modality combination.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        combos: String,
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SweepArg::Exact)]
        sweep: SweepArg,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Rescore in f64 and fail if any metric moves.
        #[arg(long)]
        verify_f64: bool,
    },
    /// Anomaly map of one sample blob.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// An `ADSL` sample blob.
        #[arg(long)]
        data: PathBuf,
        /// Heatmap PNG path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "7")]
        combos: String,
    },
    /// Run a self-check suite.
    Verify {
        #[arg(long, default_value = "gradcheck")]
        suite: String,
    },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SweepArg {
    Exact,
    Binned,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Synth {
            out,
            seed,
            normal,
            abnormal,
        } => {
            let m = synth_generate(normal, abnormal, seed, &out)?;
            eprintln!(
                "wrote {} train, {}+{} test samples to {}",
                m.counts.train,
                m.counts.test_normal,
                m.counts.test_abnormal,
                out.display()
            );
        }
        Command::Ingest {
            data,
            out,
            seed,
            config,
            axis,
            first,
            last,
            stride,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            if stride == 0 || first > last {
                return Err(Error::Usage("slice range needs first <= last and stride >= 1".into()));
            }
            let protocol = SliceProtocol {
                axis,
                first,
                last,
                stride,
                size: Some(cfg.encoder.image_size),
            };
            let m = ingest(&data, &out, &protocol, seed)?;
            eprintln!(
                "wrote {} train, {}+{} test slices to {}",
                m.counts.train,
                m.counts.test_normal,
                m.counts.test_abnormal,
                out.display()
            );
        }
        Command::Stats(args) => {
            let cfg = load_config(args.config.as_deref(), args.seed)?;
            let ds = Dataset::load(&args.data)?;
            let trainer = Trainer::new(Model::<f32>::new(cfg)?, ds.train_images()?)?;
            let mut a = Archive {
                config: trainer.model.cfg.to_toml(),
                ..Default::default()
            };
            for (k, e) in model_archive(&trainer.model).entries {
                if k.starts_with("ref.") {
                    a.insert(k, e);
                }
            }
            a.save(&args.out)?;
        }
        Command::Train {
            run,
            ckpt,
            steps,
            precision,
            verify_f64,
        } => match precision {
            Precision::F32 => train::<f32>(run, ckpt, steps, verify_f64)?,
            Precision::F64 => train::<f64>(run, ckpt, steps, verify_f64)?,
        },
        Command::Eval {
            ckpt,
            data,
            out,
            combos,
            heatmaps,
            sweep,
            batch,
            verify_f64,
        } => {
            let combos = parse_combos(&combos)?;
            let a = Archive::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let opts = EvalOptions {
                batch,
                sweep: match sweep {
                    SweepArg::Exact => ProSweep::Exact,
                    SweepArg::Binned => ProSweep::Binned,
                },
                heatmaps,
            };
            let report = match archive_dtype(&a)? {
                DType::F32 => evaluate(&model_from_archive::<f32>(&a)?, &ds.test, &combos, &opts)?,
                _ => evaluate(&model_from_archive::<f64>(&a)?, &ds.test, &combos, &opts)?,
            };
            if verify_f64 {
                let wide = match archive_dtype(&a)? {
                    DType::F32 => model_from_archive::<f32>(&a)?.cast::<f64>(),
                    _ => model_from_archive::<f64>(&a)?,
                };
                let opts = EvalOptions { heatmaps: None, ..opts };
                check_reports(&report, &evaluate(&wide, &ds.test, &combos, &opts)?)?;
            }
            write_atomic(&out, report.to_json().as_bytes())?;
            print!("{}", report.table());
        }
        Command::Infer {
            ckpt,
            data,
            out,
            combos,
        } => {
            let combo = match parse_combos(&combos)?[..] {
                [c] => c,
                _ => return Err(Error::Usage("infer takes a single combo".into())),
            };
            let a = Archive::load(&ckpt)?;
            let model = match archive_dtype(&a)? {
                DType::F32 => model_from_archive::<f32>(&a)?.cast::<f64>(),
                _ => model_from_archive::<f64>(&a)?,
            };
            model.refs.require(&model.cfg.align.attachment)?;
            let (x, _) = blob_read(&data)?;
            let mut dims = vec![1];
            dims.extend_from_slice(x.dims());
            let x = crate::Tensor::new(dims, x.data().iter().map(|&v| v as f64).collect())?;
            let map = model.score(&x, &ModalityMask::from_combo(combo)?)?.remove(0);
            let (lo, hi) = map
                .values
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            write_heatmap_png(&out, &map.values, lo, hi)?;
            println!(
                "{}",
                serde_json::json!({ "combo": combo, "image_score": map.image_score, "map_min": lo, "map_max": hi })
            );
        }
        Command::Verify { suite } => {
            print!("{}", crate::verify::run_suite(&suite)?);
        }
    }
    Ok(())
}

fn train<T: Scalar>(run: RunArgs, ckpt: Option<PathBuf>, steps: Option<u64>, verify_f64: bool) -> Result<()> {
    let ds = Dataset::load(&run.data)?;
    let images = ds.train_images::<T>()?;
    let prior = ckpt.as_deref().map(Archive::load).transpose()?;
    let mut trainer = match prior {
        Some(a) if a.entries.contains_key("adam.step") => {
            if run.config.is_some() || run.seed.is_some() {
                return Err(Error::Usage(
                    "a resumed run takes its config and seed from the checkpoint".into(),
                ));
            }
            Trainer::from_archive(&a, images)?
        }
        Some(a) => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            if Config::from_toml(&a.config)? != cfg {
                return Err(Error::Config(
                    "stats archive was computed under a different config".into(),
                ));
            }
            let mut model = Model::<T>::new(cfg)?;
            model.refs = refs_from_archive(&a)?;
            Trainer::new(model, images)?
        }
        None => Trainer::new(Model::<T>::new(load_config(run.config.as_deref(), run.seed)?)?, images)?,
    };
    if let Some(n) = steps {
        trainer.model.cfg.train.steps = n;
    }
    if verify_f64 {
        let (native, wide) = trainer.replay_next_loss_f64()?;
        let diff = (native - wide).abs();
        eprintln!("verify-f64: step loss {native:.8} vs {wide:.8} (diff {diff:.2e})");
        if diff > VERIFY_LOSS_TOL * wide.abs().max(1.0) {
            return Err(Error::Verification(format!("f64 replay differs by {diff:.3e}")));
        }
    }
    let every = trainer.model.cfg.train.checkpoint_every;
    let out = run.out.clone();
    trainer.run(|t, r| {
        if r.step % 100 == 0 || r.step == 1 {
            eprintln!("{}", serde_json::to_string(r).expect("report serialises"));
        }
        if every > 0 && r.step % every == 0 {
            t.save(&step_path(&out, r.step))?;
        }
        Ok(())
    })?;
    trainer.save(&out)
}

/// `run.ckpt` → `run.step000100.ckpt`
pub fn step_path(out: &Path, step: u64) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    let ext = out
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.step{step:06}{ext}"))
}

fn check_reports(a: &EvalReport, b: &EvalReport) -> Result<()> {
    for (x, y) in a.combos.iter().zip(&b.combos) {
        for (k, v) in &x.metrics {
            let d = (v - y.metrics[k]).abs();
            if d > VERIFY_METRIC_TOL {
                return Err(Error::Verification(format!(
                    "combo {} {k}: f32 {v:.6} vs f64 {:.6}",
                    x.combo, y.metrics[k]
                )));
            }
        }
    }
    eprintln!("verify-f64: all metrics within {VERIFY_METRIC_TOL}");
    Ok(())
}
