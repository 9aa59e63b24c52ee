use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use resvox::analysis::{self, EmbeddingSet, Source};
use resvox::adapter::ProbeTrace;
use resvox::config::{ConfigFile, ModelConfig};
use resvox::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusParams};
use resvox::gradsuite;
use resvox::io::{self, NamedArray};
use resvox::model::Model;
use resvox::numerics::Tensor;
use resvox::training::{distill_tables, train_phase, PhaseConfig};
use resvox::Error;

#[derive(Parser, Debug)]
#[command(name = "resvox", version, about = "Residual style-embedding acoustic model on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic corpus commands
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Run one training phase
    Train(TrainArgs),
    /// Distill speaker and emotion tables from a phase-1 checkpoint
    Distill(DistillArgs),
    /// Synthesize a mel spectrogram from labels
    Synth(SynthArgs),
    /// Mix residuals of two traces and decode
    Mix(MixArgs),
    /// Write a probe trace for every utterance of a corpus
    Probe(ProbeArgs),
    /// Project trace stage differences to 2-D
    Project(ProjectArgs),
    /// Silhouette score of a labeled embedding set
    EvalClusters(EvalArgs),
    /// Finite-difference check of every primitive and a training forward
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand, Debug)]
enum CorpusCommand {
    /// Generate a corpus directory
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory (replaced atomically)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    #[arg(long, default_value_t = 3)]
    emotions: usize,
    /// Utterances per (speaker, emotion) pair
    #[arg(long, default_value_t = 40)]
    per_pair: usize,
    #[arg(long, default_value_t = 16)]
    phonemes: usize,
    #[arg(long, default_value_t = 16)]
    mel_dim: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    max_duration: usize,
    #[arg(long, default_value_t = 6)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    phase: u8,
    /// Seeds the sample stream and, for a fresh phase-1 model, initialization
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    corpus: PathBuf,
    /// Config file with [model] and [train] sections; the model section is
    /// used only when phase 1 starts without --ckpt-in
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to continue from (required for phases 2 and 3)
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Override the configured step count of this phase
    #[arg(long)]
    steps: Option<usize>,
    /// Per-pair utterances held out from training (0 trains on everything)
    #[arg(long, default_value_t = 4)]
    holdout: usize,
    /// Tab-separated per-step loss log
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[arg(long, default_value_t = 4)]
    holdout: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    speaker: usize,
    #[arg(long)]
    emotion: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pitch_shift: f64,
    #[arg(long, default_value_t = 1.0)]
    energy_factor: f64,
    /// Space-separated phoneme ids, e.g. "3 1 4 1 5"
    #[arg(long, value_parser = parse_phonemes)]
    phonemes: PhonemeList,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Worker threads; results are identical for every value
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Args, Debug)]
struct MixArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    trace_a: PathBuf,
    #[arg(long)]
    trace_b: PathBuf,
    /// Source of R1..R5, e.g. "abbbb"
    #[arg(long, value_parser = parse_selector)]
    selector: Selector,
    /// Trace supplying durations [default: the emotion residual's source]
    #[arg(long, value_parser = parse_source)]
    duration_source: Option<Source>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results are identical for every value
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory receiving <utterance id>.bin traces (replaced atomically)
    #[arg(long)]
    out_dir: PathBuf,
    /// Probe only the utterances held out with this per-pair count
    #[arg(long)]
    heldout: Option<usize>,
    /// Worker threads; results are identical for every value
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    trace_glob: String,
    /// Stage expression such as F-A, F-B, C or R2
    #[arg(long, default_value = "F-A")]
    stage_diff: String,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results are identical for every value
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Projection CSV (scores the 2-D coordinates)
    #[arg(long, conflicts_with = "trace_glob", required_unless_present = "trace_glob")]
    csv: Option<PathBuf>,
    /// Traces to score on full-width utterance means instead of a CSV
    #[arg(long, requires = "stage_diff")]
    trace_glob: Option<String>,
    #[arg(long)]
    stage_diff: Option<String>,
    #[arg(long, default_value = "speaker")]
    label: String,
    /// Also write metric,value CSV
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results are identical for every value
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Training phase of the whole-model check
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
    phase: u8,
    /// Random inputs per primitive
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Debug)]
struct PhonemeList(Vec<usize>);

#[derive(Clone, Copy, Debug)]
struct Selector([Source; 5]);

fn parse_phonemes(s: &str) -> Result<PhonemeList, String> {
    let ids = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| format!("bad phoneme id {t:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if ids.is_empty() {
        return Err("empty phoneme list".into());
    }
    Ok(PhonemeList(ids))
}

fn parse_selector(s: &str) -> Result<Selector, String> {
    analysis::parse_selector(s).map(Selector).map_err(|e| e.to_string())
}

fn parse_source(s: &str) -> Result<Source, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Problems the user fixes by changing the command line.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("error: {msg}");
            eprintln!("run `resvox <command> --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Corpus {
            command: CorpusCommand::Gen(a),
        } => corpus_gen(a),
        Command::Train(a) => train(a),
        Command::Distill(a) => distill(a),
        Command::Synth(a) => synth(a),
        Command::Mix(a) => mix(a),
        Command::Probe(a) => probe(a),
        Command::Project(a) => project(a),
        Command::EvalClusters(a) => eval_clusters(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn corpus_gen(a: GenArgs) -> Outcome {
    let params = CorpusParams {
        seed: a.seed,
        speakers: a.speakers,
        emotions: a.emotions,
        per_pair: a.per_pair,
        phonemes: a.phonemes,
        mel_dim: a.mel_dim,
        noise_amp: a.noise,
        max_duration: a.max_duration,
        min_len: a.min_len,
        max_len: a.max_len,
        ..CorpusParams::default()
    };
    params.validate().map_err(|e| Usage(e.to_string()))?;
    let corpus = generate_corpus(&params)?;
    save_corpus(&corpus, &a.out)?;
    println!("wrote {} utterances to {}", corpus.len(), a.out.display());
    Ok(())
}

fn split(corpus: &Corpus, holdout: usize) -> Result<Corpus, Failure> {
    if holdout == 0 {
        return Ok(corpus.clone());
    }
    if holdout >= corpus.params.per_pair {
        return Err(Usage(format!(
            "--holdout {holdout} leaves no training utterances (corpus has {} per pair)",
            corpus.params.per_pair
        ))
        .into());
    }
    let (train, _) = corpus.split(holdout);
    Ok(corpus.subset(&train))
}

fn train(a: TrainArgs) -> Outcome {
    if a.phase > 1 && a.ckpt_in.is_none() {
        let need = if a.phase == 2 {
            "a phase-1 checkpoint with distilled tables (train --phase 1, then distill)"
        } else {
            "a phase-2 checkpoint (train --phase 2)"
        };
        return Err(Usage(format!("train --phase {} requires --ckpt-in pointing to {need}", a.phase)).into());
    }
    let cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            ConfigFile::parse(&text, &p.display().to_string())?
        }
        None => ConfigFile::default(),
    };
    let mut train_cfg = cfg.train.clone();
    if let Some(n) = a.steps {
        train_cfg.steps[a.phase as usize - 1] = n;
    }
    let mut model = match &a.ckpt_in {
        Some(p) => Model::load(p)?,
        None => Model::new(ModelConfig {
            seed: a.seed,
            ..cfg.model.clone()
        })?,
    };
    let corpus = load_corpus(&a.corpus)?;
    let data = split(&corpus, a.holdout)?;
    let phase = PhaseConfig::new(a.phase, a.seed, &train_cfg)?;
    let summary = match &a.log {
        Some(path) => {
            let mut buf = Vec::new();
            let s = train_phase(&mut model, &data.utterances, &phase, Some(&mut buf));
            io::write_atomic(path, &buf)?;
            s?
        }
        None => train_phase(&mut model, &data.utterances, &phase, None)?,
    };
    model.save(&a.ckpt_out)?;
    if let (Some(first), Some(last)) = (summary.first(), summary.last()) {
        println!(
            "phase {} done: {} steps, L_Mel {:.4} -> {:.4}, L_total {:.4} -> {:.4}",
            a.phase,
            summary.losses.len(),
            first.mel,
            last.mel,
            first.total,
            last.total
        );
    }
    println!("checkpoint written to {}", a.ckpt_out.display());
    Ok(())
}

fn distill(a: DistillArgs) -> Outcome {
    let mut model = Model::load(&a.ckpt_in)?;
    let corpus = load_corpus(&a.corpus)?;
    let data = split(&corpus, a.holdout)?;
    let tables = distill_tables(&mut model, &data.utterances)?;
    model.save(&a.ckpt_out)?;
    println!(
        "distilled {} speaker and {} emotion rows into {}",
        tables.speaker.shape()[0],
        tables.emotion.shape()[0],
        a.ckpt_out.display()
    );
    Ok(())
}

fn mel_blob(mel: &Tensor, f: Option<&Tensor>) -> Vec<u8> {
    let mut arrays = vec![NamedArray::real("mel", mel.clone())];
    if let Some(f) = f {
        arrays.push(NamedArray::real("final_stage", f.clone()));
    }
    io::encode_blob(&arrays)
}

fn synth(a: SynthArgs) -> Outcome {
    let model = Model::load(&a.ckpt)?;
    let (mel, trace) = model.synthesize(&a.phonemes.0, a.speaker, a.emotion, a.pitch_shift, a.energy_factor)?;
    io::write_atomic(&a.out, &mel_blob(&mel, None))?;
    if let Some(t) = &a.trace {
        io::write_atomic(t, &trace.to_blob())?;
    }
    println!("{} frames, durations {:?}", mel.shape()[0], trace.durations);
    Ok(())
}

fn read_trace(path: &Path) -> Result<ProbeTrace, Error> {
    ProbeTrace::from_blob(&io::read_file(path)?, &path.display().to_string())
}

fn mix(a: MixArgs) -> Outcome {
    let model = Model::load(&a.ckpt)?;
    let ta = read_trace(&a.trace_a)?;
    let tb = read_trace(&a.trace_b)?;
    let (mel, f) = analysis::mix_styles(&model, &ta, &tb, &a.selector.0, a.duration_source)?;
    io::write_atomic(&a.out, &mel_blob(&mel, Some(&f)))?;
    println!("{} frames", mel.shape()[0]);
    Ok(())
}

/// Runs `f` over `items` on up to `threads` scoped threads. Results keep
/// the input order and each item is computed independently, so the output
/// does not depend on the thread count.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R, Error> + Sync,
) -> Result<Vec<R>, Error> {
    let threads = threads.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>, Error>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

fn probe(a: ProbeArgs) -> Outcome {
    let model = Model::load(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    let utts = match a.heldout {
        Some(h) => {
            let (_, held) = corpus.split(h);
            corpus.subset(&held).utterances
        }
        None => corpus.utterances,
    };
    let blobs = parallel_map(&utts, a.threads as usize, |u| {
        let (_, trace) = model.synthesize(&u.phonemes, u.speaker, u.emotion, 0.0, 1.0)?;
        Ok((u.id.clone(), trace.to_blob()))
    })?;
    io::write_dir_atomic(&a.out_dir, |tmp| {
        for (id, bytes) in &blobs {
            let p = tmp.join(format!("{id}.bin"));
            fs::write(&p, bytes).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        }
        Ok(())
    })?;
    println!("wrote {} traces to {}", blobs.len(), a.out_dir.display());
    Ok(())
}

fn load_traces(pattern: &str, threads: u64) -> Result<Vec<(String, ProbeTrace)>, Failure> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Usage(format!("bad --trace-glob {pattern:?}: {e}")))?
        .filter_map(|p| p.ok())
        .collect();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no traces match {pattern:?}")).into());
    }
    Ok(parallel_map(&paths, threads as usize, |p| {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok((id, read_trace(p)?))
    })?)
}

fn embedding_set(pattern: &str, expr: &str, threads: u64) -> Result<EmbeddingSet, Failure> {
    let traces = load_traces(pattern, threads)?;
    Ok(EmbeddingSet::from_traces(traces.iter().map(|(id, t)| (id.as_str(), t)), expr)?)
}

fn project(a: ProjectArgs) -> Outcome {
    let set = embedding_set(&a.trace_glob, &a.stage_diff, a.threads)?;
    let coords = analysis::project_2d(&set)?;
    let csv = analysis::projection_csv(&set, &coords)?;
    io::write_atomic(&a.out, csv.as_bytes())?;
    println!("projected {} rows of {} to {}", set.len(), a.stage_diff, a.out.display());
    Ok(())
}

fn eval_clusters(a: EvalArgs) -> Outcome {
    let set = match (&a.csv, &a.trace_glob, &a.stage_diff) {
        (Some(csv), _, _) => {
            let text = fs::read_to_string(csv).map_err(|e| Error::Io {
                path: csv.clone(),
                source: e,
            })?;
            analysis::parse_projection_csv(&text, &csv.display().to_string())?
        }
        (None, Some(g), Some(expr)) => embedding_set(g, expr, a.threads)?,
        _ => return Err(Usage("give --csv or --trace-glob with --stage-diff".into()).into()),
    };
    if !set.labels.contains_key(&a.label) {
        return Err(Usage(format!("unknown --label {:?}; use speaker or emotion", a.label)).into());
    }
    let s = analysis::cluster_quality(&set, &a.label)?;
    println!("silhouette_{} = {s:.6}", a.label);
    if let Some(out) = &a.out {
        let name = format!("silhouette_{}", a.label);
        io::write_atomic(out, analysis::metrics_csv(&[(&name, s)]).as_bytes())?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut worst = 0.0f64;
    for r in gradsuite::primitive_suite(a.seeds)? {
        println!("{:<20} {:.3e}", r.name, r.report.max_relative_error);
        worst = worst.max(r.report.max_relative_error);
    }
    let model = gradsuite::phase_forward_check(a.phase)?;
    println!(
        "{:<20} {:.3e} ({} coordinates)",
        format!("phase {} forward", a.phase),
        model.max_relative_error,
        model.coordinates
    );
    worst = worst.max(model.max_relative_error);
    println!("max relative error {worst:.3e}");
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Error::invalid(format!("max relative error {worst:.3e} exceeds {:.0e}", a.tolerance)).into())
    }
}
