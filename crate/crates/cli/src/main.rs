//! `xmvae`: one entry point for tokenizing, data preparation, training,
//! sampling, rendering, evaluation and pianoroll plots.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};

use xmvae_core::codec::{nominal_timeline, performance_timeline};
use xmvae_core::corpus::{load_alignment_corpus, read_score_file};
use xmvae_core::dataset::{load_dataset, load_score_corpus, save_dataset, segment, split_by_piece, Split};
use xmvae_core::dump::{read_token_file, write_token_file};
use xmvae_core::metrics::evaluate_corpus;
use xmvae_core::notes::{AlignedNote, PerformedNote, ScoreNote};
use xmvae_core::{encode_aligned, encode_score, midi, pianoroll, EcpSequence, Family, QuantizationSpec};
use xmvae_model::checkpoint::load_xmvae;
use xmvae_model::inference::{
    generate_primed, render_performance, tokens_to_midi, Manifest, ManifestEntry, Prime, RenderOptions,
};
use xmvae_model::prior::{extract_codes, fit_prior, load_prior, save_prior, PriorShape};
use xmvae_model::train::{pretrain_composer, run_training, RunOptions, RunSummary};
use xmvae_model::ExperimentConfig;

/// Relative input paths that do not exist are looked up under this root.
const DATA_ROOT_VAR: &str = "XMVAE_DATA_ROOT";

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON); missing sections take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the data, training and sampling seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode aligned score/performance JSON into ECP token files.
    Tokenize { input: PathBuf },
    /// Decode an ECP token file into a performance MIDI file.
    Detokenize { input: PathBuf },
    /// Segment an alignment corpus, split it by piece and cache it.
    PrepareData { input: PathBuf },
    /// Train the score branch alone on a directory of scores.
    PretrainComposer { input: PathBuf },
    /// Joint training on a prepared dataset.
    Train {
        data: PathBuf,
        /// Initialize from a checkpoint with a fresh optimizer.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue a run from its last checkpoint.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Fit the latent prior on the codes of a trained model.
    TrainPrior {
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Sample pieces from the prior and the model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        top_k: Option<usize>,
        /// Compound tokens per piece.
        #[arg(long)]
        length: Option<usize>,
        /// ECP file whose opening is kept and continued.
        #[arg(long)]
        prime: Option<PathBuf>,
    },
    /// Perform a score (ECP, MIDI or score JSON) with a trained model.
    Render {
        score: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// Use the mean performance latent instead of a sample.
        #[arg(long)]
        zero_latent: bool,
    },
    /// Compute the seven corpus metrics over a directory of MIDI files.
    Evaluate {
        dir: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Draw a pianoroll PNG from a MIDI or ECP file.
    Plot { input: PathBuf },
}

#[derive(Parser)]
#[command(name = "xmvae", version, about = "Expressive piano performance modelling pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os(DATA_ROOT_VAR) {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let p = resolve(p);
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.prior_train.seed = seed;
    }
    Ok(cfg)
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn with_extension(input: &Path, ext: &str) -> PathBuf {
    PathBuf::from(input.file_name().unwrap_or_default()).with_extension(ext)
}

fn dispatch(command: Command, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = QuantizationSpec::new(&cfg.quantization)?;
    match command {
        Command::Tokenize { input } => tokenize(&resolve(&input), common, &cfg, &spec),
        Command::Detokenize { input } => {
            let input = resolve(&input);
            let seq = read_token_file(&input)?;
            let out = common.out.clone().unwrap_or_else(|| with_extension(&input, "mid"));
            let notes = tokens_to_midi(&seq, &spec, &out)?;
            log::info!("{} notes written to {}", notes.len(), out.display());
            Ok(())
        }
        Command::PrepareData { input } => {
            let corpus = load_alignment_corpus(&resolve(&input), cfg.data.min_alignment_rate)?;
            let ds = segment(&corpus, cfg.data.window, cfg.data.stride, &spec)?;
            let ds = split_by_piece(ds, cfg.data.test_fraction, cfg.data.seed)?;
            let out = out_or(common, "data");
            save_dataset(&ds, &out)?;
            log::info!(
                "{} segments from {} pieces ({} test pieces) cached in {}",
                ds.segments.len(),
                ds.piece_ids.len(),
                ds.pieces_in(Split::Test).len(),
                out.display()
            );
            Ok(())
        }
        Command::PretrainComposer { input } => {
            let ds = load_score_corpus(&resolve(&input), cfg.data.window, cfg.data.stride, &spec)?;
            let summary = pretrain_composer(&ds, &cfg, &RunOptions::new(out_or(common, "pretrain")))?;
            report_run(&summary);
            Ok(())
        }
        Command::Train { data, init, resume } => {
            let ds = load_dataset(&resolve(&data), &spec)?;
            let mut opts = RunOptions::new(out_or(common, "run"));
            opts.init = init.map(|p| resolve(&p));
            opts.resume = resume.map(|p| resolve(&p));
            let summary = run_training(&ds, &cfg, &opts)?;
            report_run(&summary);
            Ok(())
        }
        Command::TrainPrior { data, model } => {
            let ds = load_dataset(&resolve(&data), &spec)?;
            let model_path = resolve(&model);
            let loaded = load_xmvae(&model_path, Some(&ds.fingerprint), &Device::Cpu)?;
            let model = loaded.value;
            let codes = extract_codes(&model, &ds, &ds.indices(Split::Train), Some(&ds.fingerprint))?;
            let shape = PriorShape {
                config: cfg.prior.clone(),
                codes: model.config.codebook_size,
                max_len: model.config.max_len,
            };
            let fit = fit_prior(&codes, shape, &cfg.prior_train, DType::F32, &Device::Cpu)?;
            let out = out_or(common, "prior.safetensors");
            let parent = xmvae_model::checkpoint::file_hash(&model_path)?;
            save_prior(&out, &fit.prior, &ds.fingerprint, Some(parent), fit.losses.len())?;
            if let Some(last) = fit.losses.last() {
                log::info!("prior fitted on {} sequences, final loss {last:.4}", codes.len());
            }
            Ok(())
        }
        Command::Generate {
            model,
            prior,
            n,
            top_k,
            length,
            prime,
        } => {
            let model_path = resolve(&model);
            let prior_path = resolve(&prior);
            let fp = spec.fingerprint();
            let model = load_xmvae(&model_path, Some(&fp), &Device::Cpu)?.value;
            let (prior, _) = load_prior(&prior_path, Some(&fp), &Device::Cpu)?;
            let mut gen = cfg.generation.clone();
            if let Some(k) = top_k {
                gen.top_k = k;
            }
            if let Some(l) = length {
                gen.length = l;
            }
            let prime = match prime {
                Some(p) => Prime::from_sequence(&model, &read_token_file(&resolve(&p))?)?,
                None => Prime::default(),
            };
            let seed = common.seed.unwrap_or(0);
            let pieces = generate_primed(&model, &prior, &gen, n, seed, &spec, &prime)?;
            let out = out_or(common, "samples");
            fs::create_dir_all(&out)?;
            let mut entries = Vec::with_capacity(pieces.len());
            for piece in &pieces {
                let stem = format!("sample_{:04}", piece.index);
                write_token_file(&piece.sequence, &out.join(format!("{stem}.ecp")))?;
                let file = if piece.is_valid() {
                    tokens_to_midi(&piece.sequence, &spec, &out.join(format!("{stem}.mid")))?;
                    Some(format!("{stem}.mid"))
                } else {
                    log::warn!("piece {} invalid after {} attempts", piece.index, piece.attempts);
                    None
                };
                entries.push(ManifestEntry::new(piece, file));
            }
            let manifest = Manifest {
                model: model_path.display().to_string(),
                prior: prior_path.display().to_string(),
                seed,
                top_k: gen.top_k,
                length: gen.length,
                pieces: entries,
            };
            fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
            let valid = pieces.iter().filter(|p| p.is_valid()).count();
            log::info!("{valid}/{n} valid pieces written to {}", out.display());
            Ok(())
        }
        Command::Render {
            score,
            model,
            top_k,
            zero_latent,
        } => {
            let score_path = resolve(&score);
            let seq = read_score_sequence(&score_path, &spec)?;
            let model = load_xmvae(&resolve(&model), Some(&spec.fingerprint()), &Device::Cpu)?.value;
            let opts = RenderOptions {
                top_k: top_k.unwrap_or(cfg.generation.top_k),
                zero_latent,
                seed: common.seed.unwrap_or(0),
                ..RenderOptions::default()
            };
            let rendering = render_performance(&model, &seq, &opts, &spec)?;
            let out = common.out.clone().unwrap_or_else(|| with_extension(&score_path, "mid"));
            let notes: Vec<PerformedNote> = rendering.notes.iter().map(|n| n.performed).collect();
            midi::write_performance(&notes, &out)?;
            write_token_file(&rendering.sequence, &out.with_extension("ecp"))?;
            log::info!("{} notes rendered to {}", notes.len(), out.display());
            Ok(())
        }
        Command::Evaluate { dir, limit } => {
            let report = evaluate_corpus(&resolve(&dir), limit)?;
            let out = out_or(common, "report.csv");
            if out.extension().is_some_and(|e| e == "json") {
                report.write_json(&out)?;
            } else {
                report.write_csv(&out)?;
            }
            println!("{}", serde_json::to_string_pretty(&report.to_json())?);
            Ok(())
        }
        Command::Plot { input } => {
            let input = resolve(&input);
            let out = common.out.clone().unwrap_or_else(|| with_extension(&input, "png"));
            plot(&input, &out, &spec)
        }
    }
}

fn report_run(summary: &RunSummary) {
    if let Some(last) = summary.history.last() {
        log::info!(
            "epoch {}: train loss {:.4}, checkpoint {}",
            last.epoch,
            last.train.total,
            summary.last.display()
        );
    }
}

/// Moves a piece so its first onset falls inside beat 0.
fn shift_to_origin(notes: &[AlignedNote]) -> Vec<AlignedNote> {
    let by = notes.first().map_or(0.0, |n| n.score.onset.floor());
    notes
        .iter()
        .map(|n| AlignedNote {
            score: ScoreNote {
                onset: n.score.onset - by,
                ..n.score.clone()
            },
            performed: n.performed,
        })
        .collect()
}

fn tokenize(input: &Path, common: &Common, cfg: &ExperimentConfig, spec: &QuantizationSpec) -> Result<()> {
    let corpus = load_alignment_corpus(input, cfg.data.min_alignment_rate)?;
    let single = corpus.pieces.len() == 1;
    let out = match (&common.out, single) {
        (Some(o), _) => o.clone(),
        (None, true) => with_extension(input, "ecp"),
        (None, false) => PathBuf::from("tokens"),
    };
    if !single {
        fs::create_dir_all(&out)?;
    }
    for piece in &corpus.pieces {
        let seq = encode_aligned(&shift_to_origin(&piece.notes), spec)?;
        let path = if single {
            out.clone()
        } else {
            out.join(format!("{}.ecp", piece.piece_id))
        };
        write_token_file(&seq, &path)?;
        log::info!("{}: {} tokens, {} notes -> {}", piece.piece_id, seq.len(), seq.note_count(), path.display());
    }
    Ok(())
}

fn read_score_sequence(path: &Path, spec: &QuantizationSpec) -> Result<EcpSequence> {
    if path.extension().is_some_and(|e| e == "ecp") {
        return Ok(read_token_file(path)?);
    }
    let piece = read_score_file(path)?;
    if piece.notes.is_empty() {
        bail!("{} has no notes", path.display());
    }
    let by = piece.notes[0].onset.floor();
    let notes: Vec<ScoreNote> = piece
        .notes
        .iter()
        .map(|n| ScoreNote {
            onset: n.onset - by,
            ..n.clone()
        })
        .collect();
    Ok(encode_score(&notes, spec))
}

fn plot(input: &Path, out: &Path, spec: &QuantizationSpec) -> Result<()> {
    let (notes, beats) = if input.extension().is_some_and(|e| e == "ecp") {
        let seq = read_token_file(input)?;
        let performed = seq
            .tokens
            .iter()
            .filter(|t| t.is(Family::Note))
            .all(|t| t.perf.iter().all(|&p| p != xmvae_core::token::IGNORE));
        let timeline = if performed {
            performance_timeline(&seq, spec)?
        } else {
            log::info!("{}: no performance tokens, drawing the nominal timing", input.display());
            nominal_timeline(&seq, spec)?
        };
        (timeline.notes, timeline.beat_times)
    } else {
        (midi::read_performance(input)?, Vec::new())
    };
    if notes.is_empty() {
        log::warn!("{}: empty piece, writing a blank plot", input.display());
    }
    let (img, summary) = pianoroll::render(&notes, &beats, pianoroll::Style::default());
    pianoroll::save_png(&img, out)?;
    log::info!(
        "{}x{} plot with {} notes and {} beat lines -> {}",
        summary.width,
        summary.height,
        summary.rectangles,
        summary.grid_lines,
        out.display()
    );
    Ok(())
}
