//! `stdet` command line. [`dispatch`] is the whole program minus process exit.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{ApMethod, EvalOptions};
use crate::geometry::{
    affine_five_step, affine_from_delta, mask_from_delta, rotated_iou, AffineTransform2D, BoxDelta,
    HorizontalBox, OrientedBox,
};
use crate::scenes::{Dataset, ProposalConfig, SceneConfig};
use crate::train::{self, EvalSet, GridSpec, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Largest closed-form vs composed affine difference accepted by `affine-check`.
pub const AFFINE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(
    name = "stdet",
    version,
    about = "Decoupled oriented-box head: data, training, evaluation and geometry checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (JSON).
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        /// Use each object's exact hull as its proposal.
        #[arg(long)]
        exact_proposals: bool,
    },
    /// Train a head from a key=value run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv and model.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Use 11-point interpolated AP instead of all-point.
        #[arg(long)]
        eleven_point: bool,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Output directory for ablation.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the activation mask of a delta as a PGM image.
    MaskDump {
        /// cx,cy,w,h
        #[arg(long, allow_hyphen_values = true)]
        proposal: String,
        /// dx,dy,dw,dh,dalpha
        #[arg(long, allow_hyphen_values = true)]
        delta: String,
        #[arg(long, default_value_t = 7)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rotated IoU of two boxes given as cx,cy,w,h[,alpha].
    Iou {
        #[arg(long, allow_hyphen_values = true)]
        a: String,
        #[arg(long, allow_hyphen_values = true)]
        b: String,
    },
    /// Compare the closed-form delta affine map against its five-step composition.
    AffineCheck {
        /// cx,cy,w,h; random when omitted
        #[arg(long, allow_hyphen_values = true)]
        proposal: Option<String>,
        /// dx,dy,dw,dh,dalpha; random when omitted
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<String>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_numbers(s: &str, what: &str, allowed: &[usize]) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("{what} `{s}` is not a comma-separated number list")))?;
    if !allowed.contains(&v.len()) {
        return Err(Error::Config(format!(
            "{what} `{s}` needs {allowed:?} values, got {}",
            v.len()
        )));
    }
    Ok(v)
}

pub fn parse_oriented(s: &str) -> Result<OrientedBox> {
    let v = parse_numbers(s, "box", &[4, 5])?;
    OrientedBox::new(v[0], v[1], v[2], v[3], v.get(4).copied().unwrap_or(0.0))
}

pub fn parse_horizontal(s: &str) -> Result<HorizontalBox> {
    let v = parse_numbers(s, "proposal", &[4])?;
    HorizontalBox::new(v[0], v[1], v[2], v[3])
}

pub fn parse_delta(s: &str) -> Result<BoxDelta> {
    let v = parse_numbers(s, "delta", &[5])?;
    let d = BoxDelta::from_array([v[0], v[1], v[2], v[3], v[4]]);
    if !d.is_finite() {
        return Err(Error::NonFinite(format!("delta `{s}`")));
    }
    Ok(d)
}

fn random_pair(rng: &mut ChaCha8Rng) -> (BoxDelta, HorizontalBox) {
    let p = HorizontalBox {
        x: rng.gen_range(-100.0..100.0),
        y: rng.gen_range(-100.0..100.0),
        w: rng.gen_range(1.0..200.0),
        h: rng.gen_range(1.0..200.0),
    };
    let d = BoxDelta {
        dx: rng.gen_range(-1.0..1.0),
        dy: rng.gen_range(-1.0..1.0),
        dw: rng.gen_range(-2.0..2.0),
        dh: rng.gen_range(-2.0..2.0),
        dalpha: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    };
    (d, p)
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenData {
            seed,
            out: path,
            scenes,
            exact_proposals,
        } => {
            let proposals = if exact_proposals {
                ProposalConfig::exact()
            } else {
                ProposalConfig::default()
            };
            let ds = Dataset::generate(seed, scenes, SceneConfig::default(), proposals)?;
            ds.save(&path)?;
            let n: usize = ds.scenes.iter().map(|r| r.proposals.len()).sum();
            writeln!(out, "scenes {} proposals {n}", ds.scenes.len())?;
        }
        Command::Train { config, out: dir } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train::train(&cfg, &dir)?;
            out.write_all(train::metrics_csv(&outcome.log).as_bytes())?;
        }
        Command::Eval {
            ckpt,
            data,
            iou,
            eleven_point,
        } => {
            let ckpt = Checkpoint::read(std::io::BufReader::new(std::fs::File::open(&ckpt)?))?;
            let (head, store) = train::model_from_checkpoint(&ckpt)?;
            let set = EvalSet::from_dataset(&Dataset::load(&data)?)?;
            let opts = EvalOptions {
                iou_threshold: iou,
                method: if eleven_point {
                    ApMethod::ElevenPoint
                } else {
                    ApMethod::AllPoint
                },
                ..EvalOptions::default()
            };
            let report = train::evaluate_model(&head, &store, &set, &opts)?;
            out.write_all(train::format_report(&report).as_bytes())?;
        }
        Command::Ablate { grid, out: dir } => {
            let spec = GridSpec::load(&grid)?;
            let table = train::ablate(&spec, &dir)?;
            out.write_all(table.to_csv().as_bytes())?;
        }
        Command::MaskDump {
            proposal,
            delta,
            grid,
            out: path,
        } => {
            if grid == 0 {
                return Err(Error::Config("grid must be positive".into()));
            }
            let p = parse_horizontal(&proposal)?;
            let d = parse_delta(&delta)?;
            let mask = mask_from_delta(&d, &p, grid, grid)?;
            let mut buf = Vec::new();
            mask.write_pgm(&mut buf)?;
            std::fs::write(&path, buf)?;
            writeln!(
                out,
                "active {}/{}",
                mask.values.iter().filter(|&&v| v > 0.0).count(),
                mask.len()
            )?;
        }
        Command::Iou { a, b } => {
            let (a, b) = (parse_oriented(&a)?, parse_oriented(&b)?);
            writeln!(out, "{:.9}", rotated_iou(&a, &b))?;
        }
        Command::AffineCheck {
            proposal,
            delta,
            n,
            seed,
        } => {
            let fixed_p = proposal.as_deref().map(parse_horizontal).transpose()?;
            let fixed_d = delta.as_deref().map(parse_delta).transpose()?;
            let pairs = if fixed_p.is_some() && fixed_d.is_some() {
                1
            } else {
                n
            };
            if pairs == 0 {
                return Err(Error::Config("--n must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = (
                -1.0f64,
                AffineTransform2D::IDENTITY,
                AffineTransform2D::IDENTITY,
            );
            for _ in 0..pairs {
                let (rd, rp) = random_pair(&mut rng);
                let (d, p) = (fixed_d.unwrap_or(rd), fixed_p.unwrap_or(rp));
                let (closed, composed) = (affine_from_delta(&d, &p), affine_five_step(&d, &p));
                let diff = closed.max_abs_diff(&composed);
                if diff > worst.0 {
                    worst = (diff, closed, composed);
                }
            }
            let (worst, closed, composed) = worst;
            for (name, tf) in [("closed_form", closed), ("five_step", composed)] {
                writeln!(out, "{name} m={:?} t={:?}", tf.m, tf.t)?;
            }
            writeln!(out, "pairs {pairs} max_abs_diff {worst:.3e}")?;
            if !(worst < AFFINE_TOLERANCE) {
                return Err(Error::Config(format!(
                    "difference {worst:e} exceeds {AFFINE_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `argv` (including the program name) and runs the command.
/// Results go to `out`, diagnostics to `err`.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}
