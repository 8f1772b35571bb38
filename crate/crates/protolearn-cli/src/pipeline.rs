//! End-to-end pipeline: generate, label, augment, train, evaluate, bench,
//! report. Every stage persists its output as line-delimited records so it
//! can be re-run in isolation, and the report lists a SHA-256 hash per
//! intermediate file.

use anyhow::{Context, Result};
use protolearn::augment::augment_corpus;
use protolearn::baselines::{evaluate_mlp, train_mlp, Scheme};
use protolearn::corpus::encode_practical_corpus;
use protolearn::dataset::{generate_corpus, label_corpus, write_records, Record};
use protolearn::gen::GenConfig;
use protolearn::model::{
    classify, evaluate, save_checkpoint, train, Metrics, Model, ModelConfig,
};
use protolearn::oracle::{OracleConfig, Verdict};
use protolearn::protocol::Protocol;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

fn default_count() -> usize {
    50_000
}
fn default_test_count() -> usize {
    384
}
fn default_per_item() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateSection {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default, flatten)]
    pub gen: GenConfigSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfigSection {
    pub m_max: u32,
    pub c_max: u32,
    pub establishment_prob: f64,
    pub seed: u64,
}

impl Default for GenConfigSection {
    fn default() -> Self {
        let d = GenConfig::default();
        GenConfigSection {
            m_max: d.m_max,
            c_max: d.c_max,
            establishment_prob: d.establishment_prob,
            seed: d.seed,
        }
    }
}

impl GenConfigSection {
    pub fn to_config(&self) -> GenConfig {
        GenConfig {
            m_max: self.m_max,
            c_max: self.c_max,
            establishment_prob: self.establishment_prob,
            include_accepts: true,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelSection {
    pub session_bound: u32,
    pub budget_ms: u64,
    pub max_states: usize,
}

impl Default for LabelSection {
    fn default() -> Self {
        let d = OracleConfig::default();
        LabelSection {
            session_bound: d.session_bound,
            budget_ms: 5000,
            max_states: d.max_states,
        }
    }
}

impl LabelSection {
    pub fn to_config(&self) -> OracleConfig {
        OracleConfig {
            session_bound: self.session_bound,
            time_budget: Duration::from_millis(self.budget_ms),
            max_states: self.max_states,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    #[serde(default = "default_per_item")]
    pub per_item: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            per_item: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub model: ModelConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    #[serde(default = "default_test_count")]
    pub test_count: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            test_count: default_test_count(),
        }
    }
}

/// Everything a run needs; a run is reproducible from this plus nothing else.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub label: LabelSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            count: default_count(),
            gen: GenConfigSection::default(),
        }
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct EvalRow {
    model: &'static str,
    dataset: &'static str,
    accuracy: f64,
    confusion: [[usize; 2]; 2],
}

#[derive(Serialize)]
struct Report {
    config: RunConfig,
    generated: usize,
    labeled_secure: usize,
    labeled_insecure: usize,
    labeled_unknown: usize,
    augmented: usize,
    train_set_size: usize,
    test_set_size: usize,
    accuracy: Vec<EvalRow>,
    timing_fit: TimingFit,
    intermediates: Vec<(String, String)>,
}

#[derive(Serialize)]
pub struct TimingFit {
    pub slope_secs_per_node: f64,
    pub intercept_secs: f64,
    pub correlation: f64,
}

/// Least-squares fit of wall time against protocol size.
pub fn linear_fit(rows: &[(usize, f64)]) -> TimingFit {
    let n = rows.len().max(1) as f64;
    let mx = rows.iter().map(|(s, _)| *s as f64).sum::<f64>() / n;
    let my = rows.iter().map(|(_, t)| *t).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (s, t) in rows {
        let dx = *s as f64 - mx;
        let dy = *t - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let corr = if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx.sqrt() * syy.sqrt())
    } else {
        0.0
    };
    TimingFit {
        slope_secs_per_node: slope,
        intercept_secs: my - slope * mx,
        correlation: corr,
    }
}

/// Per-protocol inference timing with a warm-up pass, as (size, seconds)
/// CSV rows. An empty dataset still yields the header.
pub fn bench_time(model: &Model, protocols: &[Protocol], out: &Path) -> Result<TimingFit> {
    for p in protocols.iter().take(10) {
        let _ = classify(model, p);
    }
    let mut rows = Vec::with_capacity(protocols.len());
    for p in protocols {
        let start = Instant::now();
        let _ = classify(model, p);
        rows.push((p.size(), start.elapsed().as_secs_f64()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "protocol_size,wall_time_secs")?;
    for (s, t) in &rows {
        writeln!(f, "{s},{t:.9}")?;
    }
    Ok(linear_fit(&rows))
}

fn labeled_records(protocols: &[Protocol], cfg: &OracleConfig) -> Vec<(Record, Option<Verdict>)> {
    let labels = label_corpus(protocols, cfg);
    protocols
        .iter()
        .zip(labels)
        .map(|(p, l)| match l {
            Ok(l) => (
                Record::from_protocol(p, Some(&l)),
                Some(l.verdict),
            ),
            Err(_) => (Record::from_protocol(p, None), None),
        })
        .collect()
}

pub fn pipeline_run(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let dir = &cfg.out_dir;
    let mut intermediates: Vec<(String, String)> = Vec::new();
    let mut hash_of = |path: &Path| -> Result<()> {
        intermediates.push((
            path.file_name().unwrap().to_string_lossy().into_owned(),
            file_sha256(path)?,
        ));
        Ok(())
    };

    // Stage 1: generate.
    eprintln!("[pipeline] generate: {} protocols", cfg.generate.count);
    let protocols = generate_corpus(&cfg.generate.gen.to_config(), cfg.generate.count);
    let corpus_path = dir.join("corpus.jsonl");
    let raw: Vec<Record> = protocols
        .iter()
        .map(|p| Record::from_protocol(p, None))
        .collect();
    write_records(&corpus_path, &raw).context("stage generate: writing corpus")?;
    hash_of(&corpus_path)?;

    // Stage 2: label.
    eprintln!("[pipeline] label: session_bound={}", cfg.label.session_bound);
    let oracle_cfg = cfg.label.to_config();
    let labeled = labeled_records(&protocols, &oracle_cfg);
    let labeled_path = dir.join("labeled.jsonl");
    write_records(
        &labeled_path,
        &labeled.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>(),
    )
    .context("stage label: writing labels")?;
    hash_of(&labeled_path)?;

    let mut secure = 0usize;
    let mut insecure = 0usize;
    let mut unknown = 0usize;
    for (_, v) in &labeled {
        match v {
            Some(Verdict::Secure) => secure += 1,
            Some(Verdict::Insecure) => insecure += 1,
            _ => unknown += 1,
        }
    }

    // Held-out random test set: the last `test_count` decisively labeled
    // protocols; everything earlier is training material.
    let decisive: Vec<(Protocol, Verdict)> = protocols
        .iter()
        .zip(&labeled)
        .filter_map(|(p, (_, v))| match v {
            Some(v @ (Verdict::Secure | Verdict::Insecure)) => Some((p.clone(), *v)),
            _ => None,
        })
        .collect();
    let test_count = cfg.eval.test_count.min(decisive.len() / 2);
    let (train_pool, test_set) = decisive.split_at(decisive.len() - test_count);

    // Stage 3: augment the secure training protocols.
    let secure_train: Vec<Protocol> = train_pool
        .iter()
        .filter(|(_, v)| *v == Verdict::Secure)
        .map(|(p, _)| p.clone())
        .collect();
    eprintln!(
        "[pipeline] augment: {} secure protocols x{}",
        secure_train.len(),
        cfg.augment.per_item
    );
    let augmented = augment_corpus(
        &secure_train,
        cfg.augment.per_item,
        &oracle_cfg,
        cfg.augment.seed,
    );
    let augmented_path = dir.join("augmented.jsonl");
    let aug_records: Vec<Record> = augmented
        .iter()
        .map(|(p, _)| {
            let mut r = Record::from_protocol(p, None);
            r.label = Some(protolearn::dataset::LabelRecord {
                verdict: Verdict::Insecure,
                provenance: "augmentation".into(),
            });
            r
        })
        .collect();
    write_records(&augmented_path, &aug_records).context("stage augment: writing variants")?;
    hash_of(&augmented_path)?;

    let mut train_set: Vec<(Protocol, Verdict)> = train_pool.to_vec();
    train_set.extend(augmented.iter().cloned());

    // Stage 4: train the tree model and the fixed-vector baseline.
    eprintln!(
        "[pipeline] train: {} examples, {} steps",
        train_set.len(),
        cfg.train.model.steps
    );
    let tree = train(&train_set, cfg.train.model.clone()).context("stage train: tree model")?;
    let model_path = dir.join("model.ckpt");
    save_checkpoint(&tree.model, &model_path).context("stage train: checkpoint")?;
    hash_of(&model_path)?;
    let mlp = train_mlp(&train_set, Scheme::Tlm, cfg.train.model.clone())
        .context("stage train: baseline mlp")?;
    let mlp_path = dir.join("baseline-tlm.ckpt");
    save_checkpoint(&mlp.model, &mlp_path).context("stage train: baseline checkpoint")?;
    hash_of(&mlp_path)?;

    // Stage 5: evaluate on the random held-out set and the practical corpus.
    eprintln!("[pipeline] eval: {} held-out protocols", test_set.len());
    let practical: Vec<(Protocol, Verdict)> = encode_practical_corpus()
        .into_iter()
        .map(|r| (r.protocol, r.ground_truth))
        .collect();
    let rows = vec![
        row("tree", "random", evaluate(&tree.model, test_set)),
        row("tree", "practical", evaluate(&tree.model, &practical)),
        row(
            "tlm-mlp",
            "random",
            evaluate_mlp(&mlp.model, Scheme::Tlm, test_set),
        ),
        row(
            "tlm-mlp",
            "practical",
            evaluate_mlp(&mlp.model, Scheme::Tlm, &practical),
        ),
    ];

    // Stage 6: timing scatter.
    let timing_path = dir.join("timing.csv");
    let bench_protocols: Vec<Protocol> = test_set.iter().map(|(p, _)| p.clone()).collect();
    let fit = bench_time(&tree.model, &bench_protocols, &timing_path)
        .context("stage bench: timing")?;
    hash_of(&timing_path)?;

    // Stage 7: report.
    let report = Report {
        config: cfg.clone(),
        generated: protocols.len(),
        labeled_secure: secure,
        labeled_insecure: insecure,
        labeled_unknown: unknown,
        augmented: augmented.len(),
        train_set_size: train_set.len(),
        test_set_size: test_set.len(),
        accuracy: rows,
        timing_fit: fit,
        intermediates,
    };
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .context("stage report")?;
    write_markdown_report(&report, &dir.join("report.md"))?;
    Ok(report_path)
}

fn row(model: &'static str, dataset: &'static str, m: Metrics) -> EvalRow {
    EvalRow {
        model,
        dataset,
        accuracy: m.accuracy,
        confusion: m.confusion,
    }
}

fn write_markdown_report(r: &Report, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# Pipeline report\n")?;
    writeln!(
        f,
        "Generated {} protocols; labels: {} secure, {} insecure, {} unknown.",
        r.generated, r.labeled_secure, r.labeled_insecure, r.labeled_unknown
    )?;
    writeln!(
        f,
        "Training set: {} examples ({} augmented). Held-out random test set: {}.\n",
        r.train_set_size, r.augmented, r.test_set_size
    )?;
    writeln!(f, "| model | dataset | accuracy |")?;
    writeln!(f, "|---|---|---|")?;
    for row in &r.accuracy {
        writeln!(
            f,
            "| {} | {} | {:.3} |",
            row.model, row.dataset, row.accuracy
        )?;
    }
    writeln!(
        f,
        "\nInference time vs size: slope {:.3e} s/node, correlation {:.3} (timing.csv).\n",
        r.timing_fit.slope_secs_per_node, r.timing_fit.correlation
    )?;
    writeln!(f, "## Intermediate hashes\n")?;
    for (name, hash) in &r.intermediates {
        writeln!(f, "- `{name}`: `{hash}`")?;
    }
    Ok(())
}
