use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dsmr_core::config::RunConfig;
use dsmr_core::data::{read_raster, write_raster};
use dsmr_core::engine::{evaluate, infer_tiled_report, train_with, Flow, Progress};
use dsmr_core::gradcheck::{self, GradcheckOptions};
use dsmr_core::model::{param_count, Model};
use dsmr_core::pipeline::{prepare, Dataset};
use dsmr_core::synth::{load_pairs, write_dataset};
use dsmr_core::tensor::OpKind;
use dsmr_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(
    name = "dsmr",
    version,
    about = "Refine digital surface models with a residual encoder-decoder"
)]
struct Cli {
    /// Worker threads for patch evaluation and tiled inference (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (overrides the file).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            c.apply_override(kv)?;
        }
        if let Some(s) = self.seed {
            c.set("seed", &s.to_string())?;
        }
        c.validate()?;
        eprint!("# resolved configuration\n{}", c.to_text());
        Ok(c)
    }

    fn tiling(&self, tile: Option<usize>, overlap: Option<usize>) -> Result<(usize, usize), Error> {
        let mut c = self.resolve()?;
        if let Some(t) = tile {
            c.set("infer.tile", &t.to_string())?;
        }
        if let Some(o) = overlap {
            c.set("infer.overlap", &o.to_string())?;
        }
        c.validate()?;
        Ok((c.tile, c.overlap))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic (clean, degraded) raster pairs and a manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split, fill, cut, augment-ready and normalise a manifest of pairs.
    Prepare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding a manifest.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a prepared dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test patches of a prepared dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report stem; writes <stem>.txt and <stem>.kv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run tiled inference on this raster and report the seam metric.
        #[arg(long)]
        seam_raster: Option<PathBuf>,
        /// Tile size (overrides infer.tile).
        #[arg(long)]
        tile: Option<usize>,
        /// Tile overlap (overrides infer.overlap).
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Refine a raster of any size by overlapping tiles.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale one operation's backward pass, e.g. conv2d:1.5.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Core(Error),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { cfg, count, out } => {
            let c = cfg.resolve()?;
            let t = Instant::now();
            let entries = write_dataset(&out, &c.scene, count, c.scene.seed)?;
            eprintln!(
                "wrote {} pairs to {} in {:.1}s",
                entries.len(),
                out.display(),
                t.elapsed().as_secs_f64()
            );
        }
        Command::Prepare { cfg, input, out } => {
            let c = cfg.resolve()?;
            let pairs: Vec<_> = load_pairs(&input)?
                .into_iter()
                .map(|(clean, degraded)| (degraded, clean))
                .collect();
            let ds = prepare(&pairs, &c.data, c.data_seed())?;
            ds.write(&out)?;
            write_text(&out.join("config.txt"), &c.to_text())?;
            eprintln!(
                "train {} / val {} / test {} patches, global std {:.4} m, {} dropped",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                ds.stats.global_std,
                ds.dropped
            );
        }
        Command::Train { cfg, data, out } => {
            let c = cfg.resolve()?;
            let ds = Dataset::read(&data)?;
            let extractor = c.load_extractor()?;
            let model = Model::<f32>::build(&c.model)?;
            eprintln!("model has {} parameters", param_count(&c.model));
            create_dir(&out)?;
            write_text(&out.join("config.txt"), &c.to_text())?;
            let best_path = out.join("best.ckpt");
            let stats = ds.stats;
            let val = (!ds.val.is_empty()).then_some(&ds.val);
            let t = Instant::now();
            let outcome = train_with(model, &ds.train, val, &c.train, extractor.as_ref(), |p| {
                match p {
                    Progress::Validated {
                        step,
                        val_l1,
                        improved,
                        model,
                    } => {
                        eprintln!(
                            "step {step:>7}  val L1 {val_l1:.5}{}  {:.0}s",
                            if improved { " *" } else { "" },
                            t.elapsed().as_secs_f64()
                        );
                        if improved {
                            model.save(Some(&stats), &best_path)?;
                        }
                    }
                    Progress::Step(row) if row.step % 50 == 0 => {
                        eprintln!("step {:>7}  loss {:.5}", row.step, row.loss.total);
                    }
                    Progress::Step(_) => {}
                }
                Ok(Flow::Continue)
            })?;
            outcome.model.save(Some(&stats), &out.join("final.ckpt"))?;
            if outcome.best_val_l1.is_none() {
                outcome.best.save(Some(&stats), &best_path)?;
            }
            write_text(&out.join("history.tsv"), &outcome.history_tsv())?;
            eprintln!("best checkpoint from step {}", outcome.best_step);
        }
        Command::Eval {
            cfg,
            ckpt,
            data,
            out,
            seam_raster,
            tile,
            overlap,
        } => {
            let (tile, overlap) = cfg.tiling(tile, overlap)?;
            let (model, stats) = Model::load(&ckpt)?;
            let ds = Dataset::read(&data)?;
            let stats = stats.unwrap_or(ds.stats);
            let mut report = evaluate(&model, &ds.test, &stats)?;
            if let Some(p) = seam_raster {
                let r = read_raster(&p)?;
                report.seam = Some(infer_tiled_report(&model, &r, &stats, tile, overlap)?.seam);
            }
            print!("{}", report.summary());
            if let Some(stem) = out {
                report.write(&stem)?;
            }
        }
        Command::Infer {
            cfg,
            ckpt,
            input,
            out,
            tile,
            overlap,
        } => {
            let (tile, overlap) = cfg.tiling(tile, overlap)?;
            let (model, stats) = Model::load(&ckpt)?;
            let stats = stats.ok_or_else(|| Error::Format {
                path: ckpt.clone(),
                reason: "checkpoint carries no normalisation statistics".into(),
            })?;
            let raster = read_raster(&input)?;
            let report = infer_tiled_report(&model, &raster, &stats, tile, overlap)?;
            write_raster(&report.raster, &out)?;
            eprintln!(
                "{}x{} raster, {} tiles, max seam {:.4} m",
                raster.height(),
                raster.width(),
                report.layout.tiles().len(),
                report.seam
            );
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = match inject_fault {
                None => None,
                Some(spec) => {
                    let bad = || Error::Config(format!("fault {spec:?} is not <op>:<factor>"));
                    let (op, f) = spec.split_once(':').ok_or_else(bad)?;
                    let kind = OpKind::from_name(op).ok_or_else(bad)?;
                    Some((kind, f.parse::<f64>().map_err(|_| bad())?))
                }
            };
            let t = Instant::now();
            let report = gradcheck::run(&GradcheckOptions {
                seed,
                fault,
                ..GradcheckOptions::default()
            })?;
            print!("{}", report.table());
            println!("{:.1}s", t.elapsed().as_secs_f64());
            if !report.passed() {
                return Err(Failure::Gradcheck);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gradcheck) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::from(EXIT_GRADCHECK)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
