//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 stage
//! failure.

mod pipeline;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pipeline::{bench_time, linear_fit, pipeline_run, LabelSection, RunConfig};
use protolearn::augment::augment_corpus;
use protolearn::baselines::{classify_mlp, convert, evaluate_mlp, train_mlp, Scheme};
use protolearn::dataset::{
    generate_corpus, label_corpus, read_records, write_records, LabelRecord, Record,
};
use protolearn::gen::GenConfig;
use protolearn::model::{
    classify, evaluate, load_checkpoint, save_checkpoint, train, Model, ModelConfig,
};
use protolearn::oracle::Verdict;
use protolearn::protocol::Protocol;
use protolearn::proverif::emit_proverif;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "protolearn", version, about = "Protocol security classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Tree,
    Mlp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Conversion {
    Tlm,
    Counts,
}

impl Conversion {
    fn scheme(self) -> Scheme {
        match self {
            Conversion::Tlm => Scheme::Tlm,
            Conversion::Counts => Scheme::Counts,
        }
    }
}

#[derive(Parser)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "tree")]
    arch: Arch,
    /// Fixed-vector conversion for the MLP baseline.
    #[arg(long, value_enum, default_value = "tlm")]
    conversion: Conversion,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 128)]
    embed: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = false)]
    positional_tags: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random protocol corpus.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        m_max: u32,
        #[arg(long, default_value_t = 3)]
        c_max: u32,
        #[arg(long, default_value_t = 0.5)]
        establishment_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label a corpus with the symbolic oracle.
    Label {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        session_bound: u32,
        #[arg(long, default_value_t = 5000)]
        budget_ms: u64,
        #[arg(long, default_value_t = 150_000)]
        max_states: usize,
        /// Also run an installed external `proverif` binary on each
        /// protocol and report verdict disagreements.
        #[arg(long, default_value_t = false)]
        cross_check: bool,
    },
    /// Derive insecure variants from the secure protocols of a labeled corpus.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        per_item: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the tree classifier or a fixed-vector MLP baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a labeled corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Write per-protocol (size, seconds) rows here.
        #[arg(long)]
        timing_csv: Option<PathBuf>,
    },
    /// Classify protocols and print a verdict per record.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Emit a verifier script per protocol.
    EmitProverif {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Measure inference time against protocol size.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole generate/label/augment/train/eval/bench pipeline.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_protocols(path: &PathBuf) -> Result<Vec<(Record, Protocol)>> {
    let records = read_records(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let p = r
            .to_protocol()
            .with_context(|| format!("record {} of {}", i + 1, path.display()))?;
        out.push((r, p));
    }
    Ok(out)
}

fn read_labeled(path: &PathBuf) -> Result<Vec<(Protocol, Verdict)>> {
    let mut out = Vec::new();
    for (r, p) in read_protocols(path)? {
        if let Some(LabelRecord {
            verdict: v @ (Verdict::Secure | Verdict::Insecure),
            ..
        }) = r.label
        {
            out.push((p, v));
        }
    }
    if out.is_empty() {
        bail!("{} contains no decisively labeled records", path.display());
    }
    Ok(out)
}

/// A checkpoint is a baseline MLP iff its first parameter is the MLP input
/// layer; the conversion scheme is recovered from that layer's width.
fn detect_mlp_scheme(model: &Model) -> Option<Scheme> {
    let (name, t) = model.params.entries.first()?;
    if name != "mlp_W1" {
        return None;
    }
    [Scheme::Tlm, Scheme::Counts]
        .into_iter()
        .find(|s| t.shape == vec![model.cfg.hidden, s.width()])
}

fn cross_check_external(protocols: &[(Record, Protocol)], verdicts: &[Option<Verdict>]) {
    if std::process::Command::new("proverif")
        .arg("-help")
        .output()
        .is_err()
    {
        eprintln!("cross-check: external proverif binary not found, skipping");
        return;
    }
    let dir = std::env::temp_dir().join(format!("protolearn-xcheck-{}", std::process::id()));
    if std::fs::create_dir_all(&dir).is_err() {
        eprintln!("cross-check: cannot create scratch dir, skipping");
        return;
    }
    let mut compared = 0usize;
    let mut disagreements = 0usize;
    for (i, ((_, p), verdict)) in protocols.iter().zip(verdicts).enumerate() {
        let Some(internal) = verdict else { continue };
        let Ok(script) = emit_proverif(p) else { continue };
        let path = dir.join(format!("{i}.pv"));
        if std::fs::write(&path, script).is_err() {
            continue;
        }
        let Ok(output) = std::process::Command::new("proverif").arg(&path).output() else {
            continue;
        };
        let text = String::from_utf8_lossy(&output.stdout);
        let external = if text.contains("is true") {
            Verdict::Secure
        } else if text.contains("is false") {
            Verdict::Insecure
        } else {
            continue;
        };
        compared += 1;
        if external != *internal {
            disagreements += 1;
            eprintln!(
                "cross-check: record {i}: internal {internal:?}, external {external:?}"
            );
        }
    }
    eprintln!("cross-check: {compared} compared, {disagreements} disagreements");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            count,
            m_max,
            c_max,
            establishment_prob,
            seed,
            out,
        } => {
            let cfg = GenConfig {
                m_max,
                c_max,
                establishment_prob,
                include_accepts: true,
                seed,
            };
            let protocols = generate_corpus(&cfg, count);
            let records: Vec<Record> = protocols
                .iter()
                .map(|p| Record::from_protocol(p, None))
                .collect();
            write_records(&out, &records)?;
            eprintln!("wrote {} protocols to {}", records.len(), out.display());
        }
        Command::Label {
            input,
            out,
            session_bound,
            budget_ms,
            max_states,
            cross_check,
        } => {
            let items = read_protocols(&input)?;
            let protocols: Vec<Protocol> = items.iter().map(|(_, p)| p.clone()).collect();
            let cfg = LabelSection {
                session_bound,
                budget_ms,
                max_states,
            }
            .to_config();
            let labels = label_corpus(&protocols, &cfg);
            let verdicts: Vec<Option<Verdict>> = labels
                .iter()
                .map(|l| l.as_ref().ok().map(|s| s.verdict))
                .collect();
            let records: Vec<Record> = protocols
                .iter()
                .zip(&labels)
                .map(|(p, l)| Record::from_protocol(p, l.as_ref().ok()))
                .collect();
            write_records(&out, &records)?;
            let decisive = verdicts.iter().flatten().count();
            eprintln!(
                "labeled {} records ({} decisive) into {}",
                records.len(),
                decisive,
                out.display()
            );
            if cross_check {
                cross_check_external(&items, &verdicts);
            }
        }
        Command::Augment {
            input,
            out,
            per_item,
            seed,
        } => {
            let secure: Vec<Protocol> = read_labeled(&input)?
                .into_iter()
                .filter(|(_, v)| *v == Verdict::Secure)
                .map(|(p, _)| p)
                .collect();
            if secure.is_empty() {
                bail!("{} contains no secure records to augment", input.display());
            }
            let variants = augment_corpus(&secure, per_item, &Default::default(), seed);
            let records: Vec<Record> = variants
                .iter()
                .map(|(p, v)| {
                    let mut r = Record::from_protocol(p, None);
                    r.label = Some(LabelRecord {
                        verdict: *v,
                        provenance: "augmentation".into(),
                    });
                    r
                })
                .collect();
            write_records(&out, &records)?;
            eprintln!(
                "augmented {} secure protocols into {} insecure variants",
                secure.len(),
                records.len()
            );
        }
        Command::Train(args) => {
            let data = read_labeled(&args.input)?;
            let cfg = ModelConfig {
                hidden: args.hidden,
                embed: args.embed,
                batch: args.batch,
                steps: args.steps,
                lr: args.lr,
                seed: args.seed,
                positional_tags: args.positional_tags,
                ..Default::default()
            };
            let result = match args.arch {
                Arch::Tree => train(&data, cfg)?,
                Arch::Mlp => train_mlp(&data, args.conversion.scheme(), cfg)?,
            };
            save_checkpoint(&result.model, &args.out)?;
            eprintln!(
                "trained {} steps, final loss {:.4}, checkpoint {}",
                result.model.steps_trained,
                result.loss_curve.last().copied().unwrap_or(f64::NAN),
                args.out.display()
            );
        }
        Command::Eval {
            model,
            input,
            timing_csv,
        } => {
            let model = load_checkpoint(&model)?;
            let data = read_labeled(&input)?;
            let metrics = match detect_mlp_scheme(&model) {
                Some(scheme) => evaluate_mlp(&model, scheme, &data),
                None => evaluate(&model, &data),
            };
            println!("accuracy {:.4} on {} protocols", metrics.accuracy, data.len());
            println!(
                "confusion: secure->secure {} secure->insecure {} insecure->secure {} insecure->insecure {}",
                metrics.confusion[0][0],
                metrics.confusion[0][1],
                metrics.confusion[1][0],
                metrics.confusion[1][1]
            );
            if let Some(path) = timing_csv {
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                writeln!(f, "protocol_size,wall_time_secs")?;
                for (s, t) in &metrics.timings {
                    writeln!(f, "{s},{t:.9}")?;
                }
                let fit = linear_fit(&metrics.timings);
                eprintln!(
                    "timing: slope {:.3e} s/node, correlation {:.3}",
                    fit.slope_secs_per_node, fit.correlation
                );
            }
        }
        Command::Verify { model, input } => {
            let model = load_checkpoint(&model)?;
            let scheme = detect_mlp_scheme(&model);
            for (i, (_, p)) in read_protocols(&input)?.iter().enumerate() {
                let probs = match scheme {
                    Some(s) => classify_mlp(&model, &convert(p, s).values),
                    None => classify(&model, p),
                };
                let verdict = if probs[1] > probs[0] { "insecure" } else { "secure" };
                println!("{i}\t{verdict}\tp_insecure={:.4}", probs[1]);
            }
        }
        Command::EmitProverif { input, out_dir } => {
            std::fs::create_dir_all(&out_dir)?;
            let mut written = 0usize;
            for (i, (_, p)) in read_protocols(&input)?.iter().enumerate() {
                match emit_proverif(p) {
                    Ok(script) => {
                        std::fs::write(out_dir.join(format!("{i}.pv")), script)?;
                        written += 1;
                    }
                    Err(e) => eprintln!("record {i}: {e}"),
                }
            }
            eprintln!("wrote {written} scripts to {}", out_dir.display());
        }
        Command::Bench { model, input, out } => {
            let model = load_checkpoint(&model)?;
            let protocols: Vec<Protocol> = read_protocols(&input)?
                .into_iter()
                .map(|(_, p)| p)
                .collect();
            let fit = bench_time(&model, &protocols, &out)?;
            println!(
                "slope {:.3e} s/node, intercept {:.3e} s, correlation {:.3}",
                fit.slope_secs_per_node, fit.intercept_secs, fit.correlation
            );
        }
        Command::Pipeline { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg: RunConfig = toml::from_str(&text)
                .with_context(|| format!("parsing {}", config.display()))?;
            let report = pipeline_run(&cfg)?;
            eprintln!("report written to {}", report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not usage errors
            let _ = e.print();
            return if e.exit_code() == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
