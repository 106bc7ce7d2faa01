//! `farfield`: command-line front-end for the enhancement pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use farfield_core::gradcheck::{summarize, ProbeConfig};
use farfield_core::matrix_io::TextMatrix;
use farfield_core::pipeline::{process_utterance, PipelineConfig, References, RunReport, Stage};
use farfield_core::simulation::{load_scene, simulate_to_dir, write_json, SceneConfig, SCENE_FILE};
use farfield_core::stft::{istft, stft, StftConfig, StftTensor};
use farfield_core::{read_wav, write_wav, AudioBuffer, FeatureMatrix, ReferenceMode, WavFormat};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "farfield", version, about = "Multichannel far-field speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dereverberate, beamform and extract features from WAV files or
    /// simulated scene directories.
    Enhance(EnhanceArgs),
    /// Render seeded synthetic scenes.
    Simulate(SimulateArgs),
    /// Finite-difference smoothness sweep over the mask inputs.
    Gradcheck(GradcheckArgs),
    /// Dump a log-magnitude spectrogram as a text matrix.
    Spectrogram(SpectrogramArgs),
}

#[derive(clap::Args)]
struct EnhanceArgs {
    /// Multichannel WAV files or scene directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    /// Comma-separated stage list, e.g. `wpe,mvdr`.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Fixed reference channel.
    #[arg(long, conflicts_with = "soft_reference")]
    reference: Option<usize>,
    #[arg(long)]
    soft_reference: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    skip_wpe_probability: Option<f64>,
    /// Also write spectrogram dumps of the input and each stage output.
    #[arg(long)]
    taps: bool,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(short, long)]
    out: PathBuf,
    /// First seed; scenes use consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_directions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-probe records as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SpectrogramArgs {
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value_t = 512)]
    fft_size: usize,
    #[arg(long, default_value_t = 128)]
    hop: usize,
}

/// Errors the user can fix by changing arguments or configuration.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn validated<T>(r: farfield_core::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| usage(e.to_string()))
}

fn parse_stage(s: &str) -> anyhow::Result<Stage> {
    match s.trim() {
        "wpe" => Ok(Stage::Wpe),
        "mvdr" => Ok(Stage::Mvdr),
        "features" => Ok(Stage::Features),
        other => Err(usage(format!("unknown stage {other:?}"))),
    }
}

fn log_magnitude(x: &StftTensor<f64>, channel: usize) -> TextMatrix {
    let values = (0..x.bins())
        .flat_map(|b| (0..x.frames()).map(move |t| (x.get(t, b, channel).norm() + 1e-10).ln()))
        .collect();
    TextMatrix::new(x.bins(), x.frames(), values)
        .expect("shape")
        .with_comment("natural log magnitude; rows are frequency bins, columns are frames")
}

fn features_matrix(f: &FeatureMatrix<f64>) -> TextMatrix {
    TextMatrix::new(f.frames(), f.dims(), f.values().to_vec())
        .expect("shape")
        .with_comment("rows are frames, columns are mel bands")
}

fn enhance(args: EnhanceArgs) -> anyhow::Result<()> {
    let mut cfg: PipelineConfig = load_config(args.config.as_deref())?;
    if let Some(stages) = &args.stages {
        cfg.stages = stages.iter().map(|s| parse_stage(s)).collect::<anyhow::Result<_>>()?;
    }
    if let Some(channel) = args.reference {
        cfg.mvdr.reference = ReferenceMode::Fixed { channel };
    }
    if args.soft_reference {
        cfg.mvdr.reference = ReferenceMode::Soft;
    }
    if let Some(n) = args.iterations {
        cfg.wpe.iterations = n;
    }
    if let Some(p) = args.skip_wpe_probability {
        cfg.skip_wpe_probability = p;
    }
    validated(cfg.validate())?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut report = RunReport::new(&cfg);
    let mut rate_channels: Option<(u32, usize)> = None;
    for (index, input) in args.inputs.iter().enumerate() {
        let (name, audio, refs) = if input.join(SCENE_FILE).is_file() {
            let scene = load_scene::<f64>(input)?;
            let refs = References {
                sources: scene.oracle_sources(&cfg.stft)?,
                dry: scene.dry.clone(),
                max_lag: scene.rirs.first().map_or(0, Vec::len),
            };
            (stem(input), scene.observed, Some(refs))
        } else {
            (stem(input), read_wav::<f64>(input).with_context(|| format!("reading {}", input.display()))?, None)
        };
        let shape = (audio.sample_rate(), audio.num_channels());
        match rate_channels {
            None => rate_channels = Some(shape),
            Some(first) if first != shape => bail!(
                "{} has {} Hz / {} channels, expected {} Hz / {} channels",
                input.display(),
                shape.0,
                shape.1,
                first.0,
                first.1
            ),
            _ => {}
        }
        let (out, record) = process_utterance(&name, &audio, refs.as_ref(), &cfg, index)
            .with_context(|| format!("processing {}", input.display()))?;
        let dir = args.out.join(&name);
        std::fs::create_dir_all(&dir)?;
        if let Some(d) = &out.dereverberated {
            write_wav(dir.join("dereverberated.wav"), &istft(d)?, WavFormat::Float32)?;
        }
        let reference = cfg.reference_channel();
        if out.enhanced.is_some() || out.dereverberated.is_some() {
            write_wav(dir.join("enhanced.wav"), &istft(&out.final_single_channel(reference))?, WavFormat::Float32)?;
        }
        if let Some(f) = &out.features {
            features_matrix(f).write(dir.join("features.txt"))?;
        }
        if args.taps {
            log_magnitude(&out.observed, reference).write(dir.join("tap_input.txt"))?;
            if let Some(d) = &out.dereverberated {
                log_magnitude(d, reference).write(dir.join("tap_wpe.txt"))?;
            }
            if let Some(x) = &out.enhanced {
                log_magnitude(x, 0).write(dir.join("tap_mvdr.txt"))?;
            }
        }
        eprintln!("{name}: {} channels, {} frames", record.channels, record.frames);
        report.utterances.push(record);
    }
    write_json(&args.out.join("report.json"), &report)?;
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut cfg: SceneConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    validated(cfg.validate())?;
    let manifest = simulate_to_dir(&cfg, args.count, &args.out)?;
    eprintln!("wrote {} scenes to {}", manifest.count, args.out.display());
    Ok(())
}

/// Returns whether every non-smooth probe carried a branch flag.
fn gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let mut cfg: ProbeConfig = load_config(args.config.as_deref())?;
    if let Some(n) = args.n_directions {
        cfg.n_directions = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let probe = validated(cfg.build())?;
    let reports = farfield_core::gradcheck::smoothness_sweep_at(
        &probe,
        cfg.n_directions,
        cfg.mask_kind == farfield_core::MaskKind::Sad,
        cfg.point(),
    )?;
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
    }
    let summary = summarize(&reports);
    if let Some(path) = &args.report {
        write_json(path, &serde_json::json!({ "summary": summary, "probes": reports }))?;
    }
    eprintln!(
        "{} probes: {} smooth, {} exact, {} flagged, {} unexplained",
        summary.probes, summary.smooth, summary.exact, summary.flagged, summary.unexplained
    );
    if summary.flagged > 0 {
        eprintln!("warning: {} probes hit a known non-smooth branch", summary.flagged);
    }
    Ok(summary.unexplained == 0)
}

fn spectrogram(args: SpectrogramArgs) -> anyhow::Result<()> {
    let cfg = validated(StftConfig::new(args.fft_size, args.hop, farfield_core::Window::SqrtHann, true))?;
    let audio: AudioBuffer<f64> = read_wav(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    if args.channel >= audio.num_channels() {
        return Err(usage(format!("channel {} out of range for {} channels", args.channel, audio.num_channels())));
    }
    let x = stft(&audio, &cfg)?;
    log_magnitude(&x, args.channel).write(&args.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Enhance(a) => enhance(a).map(|_| true),
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Spectrogram(a) => spectrogram(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 };
            ExitCode::from(code)
        }
    }
}

