use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use bandcodec::analysis::energy_profile;
use bandcodec::audio_io::{read_wav, resample_linear, write_wav};
use bandcodec::bandsplit::{merge_bands, split_bands};
use bandcodec::codec::{bitrate, format_bitrate, train};
use bandcodec::metrics::{distance_report, MEL_WINDOWS, STFT_SCALES};
use bandcodec::{
    AudioBuffer, BandCodecModel, BandConfig, BandSet, CodecConfig, StftConfig, TokenStream, UtilizationReport,
    WavEncoding,
};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

const THREADS_ENV: &str = "BANDCODEC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "bandcodec", version, about = "Band-split audio codec toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a WAV file into band-limited WAV files
    Split {
        input: PathBuf,
        #[arg(long, default_value = "bands3")]
        preset: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Sum band WAV files back into one signal
    Merge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        pcm16: bool,
    },
    /// Train a per-band codec on every WAV file in a directory
    Train(TrainArgs),
    /// Encode a WAV file to a token file
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Decode a token file to a WAV file
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        pcm16: bool,
    },
    /// Spectral distances and max-abs difference between two WAV files
    Metrics { reference: PathBuf, test: PathBuf },
    /// Codebook utilization of one or more token files
    Analyze {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Mean power spectrum of a WAV file or directory, written as CSV
    EnergyProfile {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Bitrate of a band layout
    Bitrate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        bits: String,
    },
}

#[derive(Args, Debug)]
struct StftArgs {
    #[arg(long, default_value_t = 1024)]
    fft_size: usize,
    #[arg(long, default_value_t = 256)]
    hop: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "bands3")]
    preset: String,
    /// Bits per band as a comma list; a single value applies to every band
    #[arg(long)]
    bits: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    frame_len: Option<usize>,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    learn_rate: Option<f64>,
    #[arg(long)]
    commit_weight: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    /// Plain VQ instead of SimVQ
    #[arg(long)]
    plain_vq: bool,
    /// Train only the SimVQ transform, not the codebook rows
    #[arg(long)]
    freeze_codebook: bool,
    #[command(flatten)]
    stft: StftArgs,
    /// Print losses every N epochs
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<bandcodec::Error> for Failure {
    fn from(e: bandcodec::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(p: &Path) -> CmdResult {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such file", p.display())))
    }
}

fn require_dir(p: &Path) -> CmdResult {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such directory", p.display())))
    }
}

fn parse_bits(text: &str, bands: usize) -> Result<Vec<u8>, Failure> {
    let bits = text
        .split(',')
        .map(|s| s.trim().parse::<u8>().map_err(|_| usage(format!("invalid bit width '{s}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    match bits.len() {
        1 => Ok(vec![bits[0]; bands]),
        n if n == bands => Ok(bits),
        n => Err(usage(format!("{n} bit widths given for {bands} bands"))),
    }
}

fn preset(name: &str) -> Result<BandConfig, Failure> {
    BandConfig::preset(name).map_err(|e| usage(e.to_string()))
}

fn wav_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(OsStr::to_str).is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(anyhow!("no .wav files in {}", dir.display()));
    }
    Ok(files)
}

fn load(path: &Path) -> anyhow::Result<AudioBuffer<f64>> {
    read_wav(path).with_context(|| format!("reading {}", path.display()))
}

fn load_at(path: &Path, rate: u32) -> anyhow::Result<AudioBuffer<f64>> {
    let x = load(path)?;
    Ok(resample_linear(&x, rate)?)
}

fn encoding(pcm16: bool) -> WavEncoding {
    if pcm16 {
        WavEncoding::Pcm16
    } else {
        WavEncoding::Float32
    }
}

fn split(input: &Path, preset_name: &str, out_dir: &Path, stft: &StftArgs) -> CmdResult {
    require_file(input)?;
    let bands = preset(preset_name)?;
    let cfg = StftConfig::<f64>::hann(stft.fft_size, stft.hop, true).map_err(|e| usage(e.to_string()))?;
    let x = load(input)?;
    let set = split_bands(&x, &bands, &cfg)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stem = input.file_stem().and_then(OsStr::to_str).unwrap_or("audio");
    for (b, band) in set.bands().iter().enumerate() {
        let path = out_dir.join(format!("{stem}.band{}.wav", b + 1));
        write_wav(band, &path, WavEncoding::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn merge(inputs: &[PathBuf], output: &Path, pcm16: bool) -> CmdResult {
    for p in inputs {
        require_file(p)?;
    }
    let bands = inputs.iter().map(|p| load(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let y = merge_bands(&BandSet::new(bands)?)?;
    write_wav(&y, output, encoding(pcm16))?;
    Ok(())
}

fn codec_config(a: &TrainArgs) -> Result<CodecConfig, Failure> {
    let bands = preset(&a.preset)?;
    let bits = parse_bits(&a.bits, bands.num_bands())?;
    let mut cfg = CodecConfig::new(bands, bits);
    cfg.epochs = a.epochs;
    cfg.seed = a.seed;
    cfg.split_fft_size = a.stft.fft_size;
    cfg.split_hop = a.stft.hop;
    cfg.simvq = !a.plain_vq;
    cfg.freeze_codebook = a.freeze_codebook;
    if let Some(v) = a.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = a.frame_len {
        cfg.frame_len = v;
    }
    if let Some(v) = a.sample_rate {
        cfg.sample_rate = v;
    }
    if let Some(v) = a.learn_rate {
        cfg.learn_rate = v;
    }
    if let Some(v) = a.commit_weight {
        cfg.commit_weight = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.kmeans_iters {
        cfg.kmeans_iters = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn run_train(a: &TrainArgs) -> CmdResult {
    require_dir(&a.data)?;
    let cfg = codec_config(a)?;
    let files = wav_files(&a.data)?;
    let data = files.iter().map(|p| load_at(p, cfg.sample_rate)).collect::<anyhow::Result<Vec<_>>>()?;
    let (model, log) = train(&data, &cfg)?;
    let every = a.log_every.max(1);
    for (i, e) in log.epochs.iter().enumerate() {
        let epoch = i + 1;
        if epoch % every == 0 || epoch == 1 || epoch == log.len() {
            println!(
                "epoch {epoch}/{}: total {:.6e} recon {:.6e} commit {:.6e} codes {}",
                log.len(),
                e.total_loss,
                e.recon_loss,
                e.commit_loss,
                e.codes_used
            );
        }
    }
    model.save(&a.output)?;
    println!("trained on {} files; {}", files.len(), format_bitrate(bitrate(&cfg)?));
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<BandCodecModel<f64>> {
    BandCodecModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn encode(input: &Path, model: &Path, output: &Path) -> CmdResult {
    require_file(input)?;
    require_file(model)?;
    let model = load_model(model)?;
    let x = load_at(input, model.config().sample_rate)?;
    let tokens = model.encode(&x)?;
    tokens.save(output)?;
    println!("{} frames x {} bands", tokens.frame_count(), tokens.band_count());
    Ok(())
}

fn decode(input: &Path, model: &Path, output: &Path, pcm16: bool) -> CmdResult {
    require_file(input)?;
    require_file(model)?;
    let model = load_model(model)?;
    let tokens = TokenStream::load(input).with_context(|| format!("loading tokens {}", input.display()))?;
    let y = model.decode(&tokens)?;
    write_wav(&y, output, encoding(pcm16))?;
    Ok(())
}

fn metrics(reference: &Path, test: &Path) -> CmdResult {
    require_file(reference)?;
    require_file(test)?;
    let x = load(reference)?;
    let y = load(test)?;
    let r = distance_report(&x, &y)?;
    println!("mel_distance: {:.9}", r.mel_distance);
    println!("stft_distance: {:.9}", r.stft_distance);
    for (w, d) in MEL_WINDOWS.iter().zip(&r.mel_per_scale) {
        println!("mel_window_{w}: {d:.9}");
    }
    for ((n, h), d) in STFT_SCALES.iter().zip(&r.stft_per_scale) {
        println!("stft_{n}_{h}: {d:.9}");
    }
    println!("max_abs_diff: {:.9e}", x.max_abs_diff(&y).unwrap_or(f64::NAN));
    Ok(())
}

fn analyze(inputs: &[PathBuf]) -> CmdResult {
    for p in inputs {
        require_file(p)?;
    }
    let streams = inputs
        .iter()
        .map(|p| TokenStream::load(p).with_context(|| format!("loading tokens {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    print!("{}", UtilizationReport::from_token_streams(&streams)?.to_text());
    Ok(())
}

fn profile(input: &Path, output: &Path) -> CmdResult {
    let files = if input.is_dir() {
        wav_files(input)?
    } else {
        require_file(input)?;
        vec![input.to_path_buf()]
    };
    let audio = files
        .iter()
        .map(|p| load_at(p, bandcodec::analysis::PROFILE_SAMPLE_RATE))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let p = energy_profile(&audio)?;
    p.save_csv(output)?;
    println!("{} files, {} frames, peak {:.1} Hz", files.len(), p.total_frames, p.bin_frequency(p.peak_bin()));
    Ok(())
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Split { input, preset, out_dir, stft } => split(&input, &preset, &out_dir, &stft),
        Command::Merge { inputs, output, pcm16 } => merge(&inputs, &output, pcm16),
        Command::Train(a) => run_train(&a),
        Command::Encode { input, model, output } => encode(&input, &model, &output),
        Command::Decode { input, model, output, pcm16 } => decode(&input, &model, &output, pcm16),
        Command::Metrics { reference, test } => metrics(&reference, &test),
        Command::Analyze { inputs } => analyze(&inputs),
        Command::EnergyProfile { input, output } => profile(&input, &output),
        Command::Bitrate { preset: name, bits } => {
            let bands = preset(&name)?;
            let bits = parse_bits(&bits, bands.num_bands())?;
            let cfg = CodecConfig::new(bands, bits);
            let bps = bitrate(&cfg).map_err(|e| usage(e.to_string()))?;
            println!("{}", format_bitrate(bps));
            Ok(())
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value.trim().parse().map_err(|_| usage(format!("{THREADS_ENV}={value} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
