use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

use p3d::checkpoint::load_tensors;
use p3d::gradcheck::{grad_check, standard_probes, DEFAULT_STEP, TOLERANCE};
use p3d::network::{count_parameters, load_checkpoint, model_size_bytes, save_checkpoint, summarize};
use p3d::pipeline::bench::{bench, bench_policies, comparison_table};
use p3d::pipeline::features::{write_features, DEFAULT_CLIPS};
use p3d::pipeline::selftest::run_selftest;
use p3d::pipeline::{
    extract_features, make_motion_dataset, train, ClipSource, Crop, LabeledClips, Preprocess, SampleMode, TrainConfig,
};
use p3d::{build_network, ArchSpec, BlockPolicy, Error, InitRule, NetworkGraph, TemporalInit, Widths};

#[derive(Parser)]
#[command(name = "p3d", version, about = "Pseudo-3D residual networks for video clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Width {
    Standard,
    Reduced,
}

impl Width {
    fn widths(self) -> Widths {
        match self {
            Width::Standard => Widths::STANDARD,
            Width::Reduced => Widths::REDUCED,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Temporal {
    Identity,
    Zeros,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Build a freshly initialized network and save it as a checkpoint.
    Build {
        #[arg(long, value_parser = ["50", "152"])]
        depth: String,
        /// a, b, c, mixed, or 2d for the frame-wise baseline.
        #[arg(long, value_parser = parse_policy)]
        blocks: BlockPolicy,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "standard")]
        width: Width,
        #[arg(long, default_value_t = 0.5)]
        dropout: f64,
        /// Nominal input geometry recorded in the checkpoint.
        #[arg(long, value_parser = parse_thw, default_value = "16,160,160")]
        input: [usize; 3],
    },
    /// Print the layer table of a checkpoint.
    Summary {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_thw)]
        input: [usize; 3],
    },
    /// Central-difference gradient checks in 64-bit.
    #[command(group(ArgGroup::new("which").required(true).args(["op", "all"])))]
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fill a P3D checkpoint from a 2D checkpoint.
    Inflate {
        #[arg(long)]
        from2d: PathBuf,
        /// P3D checkpoint whose architecture receives the weights.
        #[arg(long)]
        into: PathBuf,
        #[arg(long, value_enum)]
        temporal: Temporal,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the result; defaults to overwriting --into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a directory with one subdirectory of clips per class.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 3000)]
        lr_step: usize,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Start from this checkpoint instead of a fresh network.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_parser = ["50", "152"], default_value = "50")]
        depth: String,
        #[arg(long, value_parser = parse_policy, default_value = "a")]
        blocks: BlockPolicy,
        #[arg(long, value_enum, default_value = "reduced")]
        width: Width,
        #[arg(long, default_value_t = 0.5)]
        dropout: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        /// Freeze every batch-norm layer except the first.
        #[arg(long)]
        freeze_bn: bool,
        /// Stop once a training batch reaches this accuracy.
        #[arg(long)]
        stop_at_acc: Option<f64>,
        /// Also write every log line to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print every N-th iteration to stdout.
        #[arg(long, default_value_t = 1)]
        log_every: usize,
    },
    /// Average pool5 features over clips of a video.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PPM frames or a .clp file.
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CLIPS)]
        clips: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resize frames before the centre crop.
        #[arg(long, value_parser = parse_hw)]
        resize: Option<[usize; 2]>,
    },
    /// Time single-clip inference.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_thw)]
        input: [usize; 3],
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Also time all-A, all-B and all-C variants of the architecture.
        #[arg(long)]
        compare: bool,
    },
    /// Run the oracle-equivalence and inflation-equivalence suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic direction-of-motion dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        /// C,T,H,W
        #[arg(long, value_parser = parse_cthw, default_value = "3,16,32,32")]
        geometry: [usize; 4],
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_list<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [usize; N] = v.try_into().map_err(|_| format!("expected {N} comma-separated integers"))?;
    if arr.contains(&0) {
        return Err("extents must be positive".into());
    }
    Ok(arr)
}

fn parse_thw(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_hw(s: &str) -> Result<[usize; 2], String> {
    parse_list(s)
}

fn parse_cthw(s: &str) -> Result<[usize; 4], String> {
    parse_list(s)
}

fn parse_policy(s: &str) -> Result<BlockPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure carrying its own exit status, for outcomes that are not errors
/// of the library (failed checks).
#[derive(Debug)]
struct Failed(u8, String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Failed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Failed(code, _)) = err.downcast_ref::<Failed>() {
        return *code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        Some(Error::Invalid(_) | Error::Spec(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn depth_of(s: &str) -> usize {
    s.parse().expect("validated by clap")
}

fn load_net(path: &PathBuf) -> Result<NetworkGraph<f32>> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build {
            depth,
            blocks,
            classes,
            out,
            seed,
            width,
            dropout,
            input,
        } => {
            let arch = ArchSpec::new(depth_of(&depth), blocks, classes)?
                .with_widths(width.widths())
                .with_dropout(dropout)
                .with_geometry(input);
            arch.validate()?;
            let net: NetworkGraph<f32> = build_network(arch, InitRule::seeded(seed))?;
            save_checkpoint(&net, &out)?;
            let table = count_parameters(&net);
            println!(
                "wrote {}: {} blocks, {} parameters, {:.2} MiB",
                out.display(),
                net.blocks.len(),
                table.total(),
                model_size_bytes(&net, false) as f64 / (1u64 << 20) as f64
            );
        }
        Command::Summary { ckpt, input } => {
            let net = load_net(&ckpt)?;
            print!("{}", summarize(&net, input)?);
        }
        Command::Gradcheck { op, all, seed } => {
            let mut probes = standard_probes(seed)?;
            if !all {
                let name = op.expect("clap requires --op or --all");
                probes.retain(|p| p.name == name);
                if probes.is_empty() {
                    let names: Vec<String> = standard_probes(seed)?.into_iter().map(|p| p.name).collect();
                    return Err(Failed(1, format!("unknown op `{name}`; available: {}", names.join(", "))).into());
                }
            }
            let mut failures = 0;
            for mut p in probes {
                let r = grad_check(p.probe.as_mut(), seed, DEFAULT_STEP)?;
                let ok = r.max_rel_err < TOLERANCE;
                failures += usize::from(!ok);
                println!(
                    "{} {:<24} max rel err {:.3e} ({} checks, worst `{}`)",
                    if ok { "PASS" } else { "FAIL" },
                    p.name,
                    r.max_rel_err,
                    r.checks,
                    r.worst
                );
            }
            if failures > 0 {
                return Err(Failed(3, format!("{failures} gradient check(s) above {TOLERANCE:e}")).into());
            }
        }
        Command::Inflate {
            from2d,
            into,
            temporal,
            seed,
            out,
        } => {
            let mut net = load_net(&into)?;
            let twod = load_tensors(&from2d).with_context(|| format!("loading {}", from2d.display()))?;
            let init = match temporal {
                Temporal::Identity => TemporalInit::Identity,
                Temporal::Zeros => TemporalInit::Zeros,
                Temporal::Random => TemporalInit::Random { seed },
            };
            let report = net.inflate_from_2d(&twod, init)?;
            let out = out.unwrap_or(into);
            save_checkpoint(&net, &out)?;
            println!(
                "wrote {}: {} tensors copied, {} temporal layers initialized, classifier {}",
                out.display(),
                report.copied,
                report.temporal_layers,
                if report.head_reinitialized { "reinitialized" } else { "copied" }
            );
        }
        Command::Train {
            data,
            lr,
            lr_step,
            momentum,
            batch,
            iters,
            seed,
            ckpt,
            from,
            depth,
            blocks,
            width,
            dropout,
            weight_decay,
            freeze_bn,
            stop_at_acc,
            log,
            log_every,
        } => {
            let dataset = LabeledClips::load_dir(&data)?;
            let [_, t, h, w] = dataset.clip_shape();
            let mut net = match &from {
                Some(p) => load_net(p)?,
                None => {
                    let arch = ArchSpec::new(depth_of(&depth), blocks, dataset.num_classes)?
                        .with_widths(width.widths())
                        .with_geometry([t, h, w]);
                    build_network(arch, InitRule::seeded(seed))?
                }
            };
            let cfg = TrainConfig {
                lr,
                lr_step,
                momentum,
                weight_decay,
                batch,
                iters,
                dropout_rate: dropout,
                seed,
                freeze_bn,
                stop_at_accuracy: stop_at_acc,
            };
            let mut sink = match &log {
                Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
                None => None,
            };
            let mut io_err = None;
            let result = train(&mut net, &dataset, &cfg, |r| {
                if r.iter % log_every.max(1) == 0 || r.iter + 1 == iters {
                    println!("{r}");
                }
                if let Some(s) = sink.as_mut() {
                    if let Err(e) = writeln!(s, "{r}") {
                        io_err.get_or_insert(e);
                    }
                }
            });
            if let Some(s) = sink.as_mut() {
                s.flush()?;
            }
            if let Some(e) = io_err {
                bail!("writing log: {e}");
            }
            let log = result?;
            save_checkpoint(&net, &ckpt)?;
            if let Some(last) = log.records.last() {
                println!("wrote {} after {} iterations (last acc {:.4})", ckpt.display(), log.records.len(), last.accuracy);
            }
        }
        Command::Extract {
            ckpt,
            video,
            clips,
            out,
            seed,
            resize,
        } => {
            let net = load_net(&ckpt)?;
            let src = ClipSource::load(&video)?;
            let [_, gh, gw] = net.arch.input_geometry;
            let (fh, fw) = match resize {
                Some([h, w]) => (h, w),
                None => src.frame_size(),
            };
            let prep = Preprocess {
                resize: resize.map(|[h, w]| (h, w)),
                crop: if (fh, fw) == (gh, gw) {
                    Crop::None
                } else {
                    Crop::Center { height: gh, width: gw }
                },
                ..Default::default()
            };
            let feature = extract_features(&net, &src, clips, SampleMode::Random { seed }, &prep)?;
            write_features(&out, &feature)?;
            println!("wrote {}: {}-d feature averaged over {clips} clip(s)", out.display(), feature.len());
        }
        Command::Bench {
            ckpt,
            input,
            iters,
            threads,
            compare,
        } => {
            let net = load_net(&ckpt)?;
            println!("{}", bench(&net, input, iters, threads)?);
            if compare {
                print!("{}", comparison_table(&bench_policies(&net, input, iters, threads)?));
            }
        }
        Command::Selftest { seed } => {
            let results = run_selftest(seed)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failed(3, format!("{failed} suite(s) failed")).into());
            }
        }
        Command::Synth {
            out,
            per_class,
            geometry,
            seed,
        } => {
            let data = make_motion_dataset(per_class, geometry, seed)?;
            data.save_dir(&out)?;
            println!("wrote {} clips to {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
