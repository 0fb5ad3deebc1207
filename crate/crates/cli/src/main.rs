use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use doubleecho::classifier::{
    cross_validate, evaluate_model, fit_model, pair_samples, xcorr_similarities, baseline_verdict,
    ConfusionReport, CvReport, ForestModel, Hyperparameters, PairSample, BASELINE_THRESHOLD,
};
use doubleecho::features::{feature_label, FeatureVector};
use doubleecho::pipeline::Analyzer;
use doubleecho::protocol::{demo_environment, relay, run_session, DemoKind, Prover, SessionKey, Verifier};
use doubleecho::rir::{DeconvolutionMethod, DEFAULT_EPSILON};
use doubleecho::signal::{generate_sweep, read_wav, write_wav, SweepSpec};
use doubleecho::simulator::{generate_dataset, Dataset, DatasetConfig, Label};
use doubleecho::Error;

/// Acoustic copresence verification from room impulse responses.
#[derive(Parser)]
#[command(name = "doubleecho", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the excitation sweep as a 16-bit WAV file.
    GenSweep {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Extract the 224 features of a recording.
    Analyze {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        excitation: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Matched)]
        method: Method,
        /// Regularization of the inverse filter.
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic dataset directory.
    Simulate {
        /// Dataset config JSON; the default 20-room corpus when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a forest on every pair of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hp: ForestArgs,
    },
    /// Confusion counts as CSV: a saved model, k-fold CV, or the
    /// cross-correlation baseline.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// Score this model on every pair instead of cross-validating.
        #[arg(long, conflicts_with = "baseline")]
        model: Option<PathBuf>,
        /// Score the cross-correlation baseline instead.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = BASELINE_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        hp: ForestArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one protocol session in the simulated testbed and print the
    /// transcript.
    Demo {
        #[arg(value_enum)]
        scenario: Scenario,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Shared key as 64 hex digits; derived from the seed when omitted.
        #[arg(long)]
        key: Option<String>,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep length in seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 0.0)]
    f_start: f64,
    #[arg(long, default_value_t = 22050.0)]
    f_end: f64,
    #[arg(long, default_value_t = 1.0)]
    lead: f64,
    #[arg(long, default_value_t = 2.0)]
    tail: f64,
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 44100)]
    sample_rate: u32,
}

impl SweepArgs {
    fn spec(&self) -> SweepSpec {
        SweepSpec {
            f_start: self.f_start,
            f_end: self.f_end,
            sweep_duration: self.duration,
            lead_silence: self.lead,
            tail_silence: self.tail,
            amplitude: self.amplitude,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Args)]
struct ForestArgs {
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
    #[arg(long, default_value_t = 2)]
    min_leaf: usize,
    #[arg(long, default_value_t = 8)]
    mtry: usize,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
}

impl ForestArgs {
    fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            tree_count: self.trees,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            mtry: self.mtry,
            top_k: self.top_k,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Matched,
    Inverse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Benign,
    Relay,
    Manipulate,
}

enum Failure {
    Usage(String),
    Pipeline(String),
    Abort(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Degenerate(_)
            | Error::Truncation { .. }
            | Error::Range(_)
            | Error::Measurement(_)
            | Error::Class(_) => Failure::Pipeline(e.to_string()),
            e if e.is_protocol_abort() => Failure::Abort(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Abort(m)) => {
            eprintln!("aborted: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenSweep { out, sweep } => {
            let spec = sweep.spec();
            let signal = generate_sweep(&spec)?;
            write_wav(&signal, &out).map_err(|e| with_path(e, &out))?;
            println!(
                "{}",
                json!({ "path": out, "duration": signal.duration(), "samples": signal.len(), "sample_rate": spec.sample_rate })
            );
            Ok(())
        }
        Command::Analyze { recording, excitation, method, epsilon, out } => {
            let rec = read_wav(&recording).map_err(|e| with_path(e, &recording))?;
            let exc = read_wav(&excitation).map_err(|e| with_path(e, &excitation))?;
            let method = match method {
                Method::Matched => DeconvolutionMethod::MatchedFilter,
                Method::Inverse => DeconvolutionMethod::RegularizedInverse,
            };
            let analyzer = Analyzer::from_excitation(&exc)?.with_method(method, epsilon);
            let analysis = analyzer.analyze(&rec)?;
            let labels: Vec<String> =
                (0..analysis.features.values().len()).map(|i| feature_label(analyzer.plan(), i)).collect();
            let doc = json!({
                "meta": analysis.meta(),
                "feature_names": labels,
                "features": analysis.features.values(),
            });
            emit(&serde_json::to_string_pretty(&doc).map_err(Error::from)?, out.as_deref())
        }
        Command::Simulate { config, seed, out } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = read_text(path)?;
                    serde_json::from_str::<DatasetConfig>(&text)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
                }
                None => DatasetConfig::default_corpus(seed),
            };
            cfg.seed = seed;
            let ds = generate_dataset(&cfg)?;
            ds.save(&out).map_err(|e| with_path(e, &out))?;
            println!(
                "{}",
                json!({ "out": out, "recordings": ds.recordings.len(), "benign_pairs": ds.benign_count(), "attack_pairs": ds.attack_count() })
            );
            Ok(())
        }
        Command::Train { dataset, seed, out, hp } => {
            let (_, samples) = load_samples(&dataset)?;
            let model = fit_model(&samples, &hp.hyperparameters(), seed)?;
            fs::write(&out, model.to_json()?).map_err(|e| with_path(e.into(), &out))?;
            println!(
                "{}",
                json!({ "out": out, "pairs": samples.len(), "trees": model.trees.len(), "selected_features": model.selected_features })
            );
            Ok(())
        }
        Command::Evaluate { dataset, model, baseline, threshold, folds, seed, hp, out } => {
            let name = dataset_name(&dataset);
            let csv = if baseline {
                let ds = Dataset::load(&dataset).map_err(|e| with_path(e, &dataset))?;
                let signals: Vec<_> = ds.recordings.iter().map(|r| r.signal.clone()).collect();
                let idx: Vec<(usize, usize)> = ds.pairs.iter().map(|p| (p.a, p.b)).collect();
                let sims = xcorr_similarities(&signals, &idx)?;
                let mut report = ConfusionReport::default();
                for (p, s) in ds.pairs.iter().zip(sims) {
                    report.record(p.label, baseline_verdict(s, threshold));
                }
                single_row(report, &name)
            } else if let Some(path) = model {
                let model = ForestModel::from_json(&read_text(&path)?).map_err(|e| with_path(e, &path))?;
                let (_, samples) = load_samples(&dataset)?;
                single_row(evaluate_model(&model, &samples)?, &name)
            } else {
                let seed = seed.ok_or_else(|| Failure::Usage("cross-validation needs --seed (or pass --model)".into()))?;
                let (_, samples) = load_samples(&dataset)?;
                cross_validate(&samples, folds, &hp.hyperparameters(), seed)?.to_csv(&name)
            };
            emit(&csv, out.as_deref())
        }
        Command::Demo { scenario, model, seed, key } => {
            let model = ForestModel::from_json(&read_text(&model)?).map_err(|e| with_path(e, &model))?;
            let key = match key {
                Some(k) => SessionKey::from_hex(&k)?,
                None => SessionKey::from_seed(seed),
            };
            let kind = match scenario {
                Scenario::Benign => DemoKind::Benign,
                Scenario::Relay => DemoKind::Relay,
                Scenario::Manipulate => DemoKind::Manipulate,
            };
            let sweep = SweepSpec::default();
            let env = demo_environment(kind, seed, &sweep)?;
            let mut verifier = Verifier::new(key.clone(), sweep);
            let mut prover = Prover::new(key);
            let outcome = run_session(&mut verifier, &mut prover, &env, &model, seed, &mut |_, m| relay(m));
            print!("{}", outcome.transcript.to_hex_lines());
            match outcome.result {
                Ok(verdict) => {
                    let word = match verdict {
                        Label::Copresent => "copresent",
                        Label::NonCopresent => "non-copresent",
                    };
                    println!("verdict {word}");
                    Ok(())
                }
                Err(e) => {
                    println!("abort {e}");
                    Err(Failure::Abort(e.to_string()))
                }
            }
        }
    }
}

fn load_samples(dir: &Path) -> CliResult<(Dataset, Vec<PairSample>)> {
    let ds = Dataset::load(dir).map_err(|e| with_path(e, dir))?;
    let analyzer = Analyzer::new(&ds.config.sweep)?;
    let signals: Vec<_> = ds.recordings.iter().map(|r| &r.signal).collect();
    let features: Vec<FeatureVector> = analyzer.features_of(&signals)?;
    let samples = pair_samples(&features, &ds.pairs)?;
    Ok((ds, samples))
}

fn single_row(report: ConfusionReport, name: &str) -> String {
    CvReport { aggregate: report, folds: Vec::new() }.to_csv(name)
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned())
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| with_path(e.into(), path)),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

/// Names the offending path in I/O and format errors.
fn with_path(e: Error, path: &Path) -> Failure {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Json(_) | Error::Config(_) => {
            Failure::Usage(format!("{}: {e}", path.display()))
        }
        other => other.into(),
    }
}
