//! `mrt` command line: encode, decode, train and analyze.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, DEFAULT_CLIP_FRACTION};
use crate::codec;
use crate::image::{read_ppm, write_ppm_to};
use crate::model::{save_checkpoint, MrtModel};
use crate::tensor::Tensor;
use crate::training::{run_stage1, run_stage2, PerceptualProxy, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mrt", version, about = "Extreme-rate learned image codec")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a PPM image into an .mrt bitstream.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Rate point recorded in the header (0..=3 for lambda 20, 10, 5, 2.5).
        #[arg(long, default_value_t = 0)]
        lambda_index: u8,
    },
    /// Reconstruct a PPM image from an .mrt bitstream.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run one training stage from a key=value config file.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
    },
    /// Analysis reports written as CSV.
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Debug, Subcommand)]
enum Analyze {
    /// Input-gradient map of one window's latent tokens.
    Erf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        window: usize,
        /// Share of pixels clipped to the K-th largest gradient.
        #[arg(long, default_value_t = DEFAULT_CLIP_FRACTION)]
        clip_fraction: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Token and channel redundancy of the quantized latents.
    Redundancy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Rate-distortion table over a corpus for several checkpoints.
    Rd {
        #[arg(long)]
        corpus: PathBuf,
        /// `LAMBDA=PATH`, repeated once per checkpoint.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Entropy of the sign-code usage over a corpus.
    CodebookEntropy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Failures that should report exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(format!("cannot read {}: {e}", path.display())).into()
}

fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| unreadable(path, e))
}

fn read_image(path: &Path) -> anyhow::Result<Tensor> {
    if let Err(e) = File::open(path) {
        return Err(unreadable(path, e));
    }
    read_ppm(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<(MrtModel, crate::params::ParamStore)> {
    if let Err(e) = File::open(path) {
        return Err(unreadable(path, e));
    }
    MrtModel::from_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// `.ppm` files of a directory in name order, or a single file.
fn read_corpus(path: &Path) -> anyhow::Result<Vec<(String, Tensor)>> {
    let meta = std::fs::metadata(path).map_err(|e| unreadable(path, e))?;
    let mut files = if meta.is_dir() {
        std::fs::read_dir(path)
            .map_err(|e| unreadable(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect::<Vec<_>>()
    } else {
        vec![path.to_path_buf()]
    };
    files.sort();
    if files.is_empty() {
        bail!(UsageError(format!("no .ppm files in {}", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_image(f)?))
        })
        .collect()
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed command never leaves a partial output behind.
fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        body(&mut w)?;
        w.flush()?;
        drop(w);
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn emit(out: &OutArg, body: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>) -> anyhow::Result<()> {
    match &out.output {
        Some(path) => write_atomically(path, |w| body(w)),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn train(stage: u8, config: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| unreadable(config, e))?;
    let mut cfg = TrainConfig::from_kv(&text).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let images = cfg.load_images()?;
    let (model, store) = match &cfg.init {
        Some(path) => load_model(path)?,
        None if stage == 2 => bail!(UsageError("stage 2 needs init=<stage-1 checkpoint> in the config".into())),
        None => MrtModel::new(&cfg.model, cfg.seed)?,
    };
    let mut trainer = Trainer::new(model, store, cfg.weights(), cfg.lr, cfg.seed)?;
    let mut log_rows: Vec<String> = Vec::with_capacity(cfg.steps);
    let every = (cfg.steps / 20).max(1);
    if stage == 1 {
        log_rows.push("step,total,cross_entropy,lfq,rate,latent".into());
        run_stage1(&mut trainer, &images, cfg.batch, cfg.steps, |i, t| {
            log_rows.push(format!("{i},{},{},{},{},{}", t.total, t.cross_entropy, t.lfq, t.rate, t.latent));
            if i % every == 0 || i + 1 == cfg.steps {
                eprintln!("stage1 step {i}: loss {:.4} (ce {:.4}, lfq {:.4}, rate {:.4}, latent {:.5})", t.total, t.cross_entropy, t.lfq, t.rate, t.latent);
            }
        })?;
    } else {
        log_rows.push("step,total,l1,perceptual,adversarial,bpp,discriminator".into());
        run_stage2(&mut trainer, &images, cfg.batch, cfg.steps, |i, t| {
            log_rows.push(format!("{i},{},{},{},{},{},{}", t.total, t.l1, t.perceptual, t.adversarial, t.bpp, t.discriminator));
            if i % every == 0 || i + 1 == cfg.steps {
                eprintln!("stage2 step {i}: loss {:.4} (l1 {:.4}, perceptual {:.4}, adv {:.4}, bpp {:.5})", t.total, t.l1, t.perceptual, t.adversarial, t.bpp);
            }
        })?;
    }
    if let Some(log) = &cfg.log {
        write_atomically(log, |w| {
            for row in &log_rows {
                writeln!(w, "{row}")?;
            }
            Ok(())
        })?;
    }
    let (model, store) = trainer.into_parts();
    if let Some(out) = &cfg.output {
        let mut tmp = out.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        let saved = save_checkpoint(&tmp, &model.cfg, &store).map_err(anyhow::Error::from).and_then(|_| {
            std::fs::rename(&tmp, out).with_context(|| format!("writing {}", out.display()))
        });
        if saved.is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
        saved?;
        eprintln!("saved {}", out.display());
    }
    Ok(())
}

fn parse_checkpoint_arg(s: &str) -> anyhow::Result<(f64, PathBuf)> {
    let (l, p) = s.split_once('=').ok_or_else(|| UsageError(format!("--checkpoint expects LAMBDA=PATH, got {s:?}")))?;
    let lambda: f64 = l.trim().parse().map_err(|_| UsageError(format!("bad lambda {l:?}")))?;
    Ok((lambda, PathBuf::from(p)))
}

fn analyze(cmd: Analyze, seed: u64) -> anyhow::Result<()> {
    match cmd {
        Analyze::Erf { model, image, window, clip_fraction, out } => {
            let (model, store) = load_model(&model)?;
            let img = read_image(&image)?;
            let map = analysis::compute_erf(&model, &store, &img, window, clip_fraction)?;
            eprintln!("outside-window fraction {:.6}, clip level {:.6e}", map.outside_fraction(), map.threshold);
            emit(&out, |w| Ok(map.write_csv(w)?))
        }
        Analyze::Redundancy { model, corpus, out } => {
            let (model, store) = load_model(&model)?;
            let mut rows = Vec::new();
            for (name, img) in read_corpus(&corpus)? {
                let feats = analysis::latent_features(&model, &store, &img)?;
                rows.push((name, analysis::redundancy_metrics(&feats)?));
            }
            emit(&out, |w| Ok(analysis::write_redundancy_csv(&rows, w)?))
        }
        Analyze::Rd { corpus, checkpoints, out } => {
            let corpus = read_corpus(&corpus)?;
            let mut models = Vec::new();
            for spec in &checkpoints {
                let (lambda, path) = parse_checkpoint_arg(spec)?;
                let (m, s) = load_model(&path)?;
                models.push((lambda, m, s));
            }
            let rows = analysis::rd_harness(&corpus, &models, &PerceptualProxy::new(seed))?;
            emit(&out, |w| Ok(analysis::write_rd_csv(&rows, w)?))
        }
        Analyze::CodebookEntropy { model, corpus, out } => {
            let (model, store) = load_model(&model)?;
            let images: Vec<Tensor> = read_corpus(&corpus)?.into_iter().map(|(_, t)| t).collect();
            let bits = analysis::corpus_codebook_entropy(&model, &store, &images)?;
            emit(&out, |w| {
                writeln!(w, "codebook_bits,entropy_bits")?;
                writeln!(w, "{},{}", model.cfg.c_z, analysis::format_sig6(bits))?;
                Ok(())
            })
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Encode { input, output, model, lambda_index } => {
            if lambda_index > 3 {
                bail!(UsageError(format!("--lambda-index {lambda_index} outside 0..=3")));
            }
            let (model, store) = load_model(&model)?;
            let image = read_image(&input)?;
            let enc = codec::encode(&model, &store, &image, lambda_index)?;
            write_atomically(&output, |w| Ok(w.write_all(&enc.bytes)?))?;
            println!("bpp {:.6} bytes {}", enc.stream.bpp(), enc.bytes.len());
            Ok(())
        }
        Command::Decode { input, output, model } => {
            let (model, store) = load_model(&model)?;
            let bytes = read_input(&input)?;
            let dec = codec::decode(&model, &store, &bytes).with_context(|| format!("decoding {}", input.display()))?;
            write_atomically(&output, |w| Ok(write_ppm_to(&dec.image, w)?))
        }
        Command::Train { stage, config } => train(stage, &config, cli.seed),
        Command::Analyze(cmd) => analyze(cmd, seed),
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage errors and unreadable inputs, 1 for other failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("run `mrt --help` for usage");
                2
            } else {
                1
            }
        }
    }
}
