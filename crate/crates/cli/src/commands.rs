//! The five commands, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use streamtag::arm::{collect_examples, select_postprocess, train_arm, ArmModel, ArmTrainReport, GridPoint, PostProcess};
use streamtag::data::{gen_local, gen_lookahead, parse_conll, split_dataset, write_conll, LookaheadParams, TaggedSentence};
use streamtag::encoder::{EpochLog, FitSummary};
use streamtag::nn::serialize::write_atomic;
use streamtag::policy::{oracle_schedule, CostModel};
use streamtag::{
    aggregate_report, run_stream, EncodedSentence, HybridConfig, HybridEncoder, Report, RestartPolicy, StreamingTranscript,
    Vocabulary,
};

use crate::config::RunConfig;
use crate::policy_spec::PolicySpec;

pub const TRAIN_FILE: &str = "train.conll";
pub const DEV_FILE: &str = "dev.conll";
pub const TEST_FILE: &str = "test.conll";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ARM_FILE: &str = "arm.json";
pub const ARM_REPORT_FILE: &str = "arm_report.json";
pub const TRANSCRIPT_FILE: &str = "transcripts.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FLOPS_FILE: &str = "flops.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Reads a CoNLL file with token and tag columns, plus a 0/1 flag column when `indicators` is set.
pub fn read_split(path: &Path, indicators: bool) -> Result<Vec<TaggedSentence>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_conll(&text, path, 0, 1, indicators.then_some(2))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lookahead,
    Local,
}

#[derive(Clone, Debug, PartialEq, clap::Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Number of sentences before splitting 80/10/10.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Marker probability (lookahead only).
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    /// Marker lookahead window (lookahead only).
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub sentences: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub n: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub train: SplitInfo,
    pub dev: SplitInfo,
    pub test: SplitInfo,
}

pub fn gen_data(args: &GenDataArgs) -> Result<Manifest> {
    let data = match args.task {
        Task::Lookahead => gen_lookahead(&LookaheadParams {
            n: args.n,
            min_len: args.min_len,
            max_len: args.max_len,
            p: args.p,
            window: args.window,
            seed: args.seed,
        })?,
        Task::Local => gen_local(args.n, args.min_len, args.max_len, args.seed)?,
    };
    let (train, dev, test) = split_dataset(data);
    create_dir(&args.out)?;
    let write = |name: &str, split: &[TaggedSentence]| -> Result<SplitInfo> {
        write_conll(&args.out.join(name), split).with_context(|| format!("writing {name}"))?;
        Ok(SplitInfo {
            file: name.to_string(),
            sentences: split.len(),
            tokens: split.iter().map(TaggedSentence::len).sum(),
        })
    };
    let lookahead = args.task == Task::Lookahead;
    let manifest = Manifest {
        task: args.task,
        n: args.n,
        seed: args.seed,
        min_len: args.min_len,
        max_len: args.max_len,
        p: lookahead.then_some(args.p),
        window: lookahead.then_some(args.window),
        train: write(TRAIN_FILE, &train)?,
        dev: write(DEV_FILE, &dev)?,
        test: write(TEST_FILE, &test)?,
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().with_context(|| format!("no {what} data configured (set `{what}` in the config or pass --data)"))
}

fn encode(vocab: &Vocabulary, split: &[TaggedSentence], path: &Path) -> Result<Vec<EncodedSentence>> {
    vocab.encode_all(split).with_context(|| format!("encoding {}", path.display()))
}

/// Trains an encoder on `cfg.train`, keeping the epoch with the best dev F1.
/// Writes the checkpoint, the per-epoch log and the resolved config into `cfg.out_dir`.
pub fn train_encoder(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<FitSummary> {
    let train_path = required(&cfg.train, "train")?;
    let train = read_split(train_path, cfg.use_indicators)?;
    let dev = match &cfg.dev {
        Some(p) => read_split(p, cfg.use_indicators)?,
        None => Vec::new(),
    };
    let vocab = Vocabulary::build(&train);
    let mut resolved = cfg.clone();
    resolved.vocab_size = vocab.num_tokens();
    resolved.num_labels = vocab.num_labels();
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(CONFIG_FILE), &resolved)?;

    let train_enc = encode(&vocab, &train, train_path)?;
    let dev_enc = match &cfg.dev {
        Some(p) => encode(&vocab, &dev, p)?,
        None => Vec::new(),
    };
    let mut encoder = HybridEncoder::new(resolved.model())?;
    let mut logs = Vec::new();
    let fit = encoder.fit(&train_enc, &dev_enc, vocab.labels(), &resolved.train_options(), |log| {
        on_epoch(log);
        logs.push(*log);
    });
    write_jsonl(&cfg.out_dir.join(TRAIN_LOG_FILE), &logs)?;
    let summary = fit.with_context(|| format!("training aborted after {} completed epochs", logs.len()))?;
    encoder.save(&cfg.out_dir.join(ENCODER_FILE), &vocab)?;
    write_json(&cfg.out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub encoder: PathBuf,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub training: ArmTrainReport,
    /// Every postprocessing setting tried on dev (empty when selection is off).
    pub grid: Vec<GridPoint>,
    pub selected: PostProcess,
    pub encoder_checksum: u64,
}

/// Trains a restart module on a frozen encoder and selects its postprocessing on dev.
pub fn train_arm_cmd(cfg: &RunConfig, encoder_path: &Path) -> Result<ArmReport> {
    let (encoder, vocab) = HybridEncoder::load(encoder_path).with_context(|| format!("loading {}", encoder_path.display()))?;
    let checksum = encoder.checksum();
    let ind = encoder.config().use_indicators;
    let train_path = required(&cfg.train, "train")?;
    let dev_path = required(&cfg.dev, "dev")?;
    let train = encode(&vocab, &read_split(train_path, ind)?, train_path)?;
    let dev = encode(&vocab, &read_split(dev_path, ind)?, dev_path)?;
    create_dir(&cfg.out_dir)?;
    write_json(
        &cfg.out_dir.join(CONFIG_FILE),
        &ArmRun {
            encoder: encoder_path.to_path_buf(),
            config: cfg.clone(),
        },
    )?;

    let (_, train_ex) = collect_examples(&encoder, &train, cfg.m)?;
    let (dev_tr, dev_ex) = collect_examples(&encoder, &dev, cfg.m)?;
    let (mut arm, training) = train_arm(&encoder, &train_ex, &dev_ex, cfg.arm(), &cfg.arm_train_options())?;
    arm.post.tau = cfg.tau;
    let (grid, selected) = if cfg.select_postprocess {
        let features: Vec<Vec<Vec<f32>>> = dev_ex.iter().map(|e| e.features.clone()).collect();
        let (grid, best) = select_postprocess(&arm, encoder.config(), &dev_tr, &features)?;
        let post = grid[best].post;
        (grid, post)
    } else {
        (Vec::new(), cfg.post())
    };
    selected.validate()?;
    arm.post = selected;
    ensure!(encoder.checksum() == checksum, "encoder parameters changed during restart-module training");
    arm.save(&cfg.out_dir.join(ARM_FILE))?;
    let report = ArmReport {
        training,
        grid,
        selected,
        encoder_checksum: checksum,
    };
    write_json(&cfg.out_dir.join(ARM_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    /// every | fixed:K | arm:PATH | oracle
    #[arg(long)]
    pub policy: PolicySpec,
    /// CoNLL file to stream.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Upper bound on worker threads (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub encoder: PathBuf,
    pub policy: String,
    pub data: PathBuf,
    pub jobs: usize,
}

fn stream_one(encoder: &HybridEncoder, spec: &PolicySpec, arm: Option<&ArmModel>, s: &EncodedSentence, id: usize) -> Result<StreamingTranscript> {
    let policy = match spec {
        PolicySpec::Every => RestartPolicy::EveryStep,
        PolicySpec::Fixed(k) => RestartPolicy::FixedK(*k),
        PolicySpec::Arm(_) => RestartPolicy::Arm(arm.expect("loaded for arm policies")),
        PolicySpec::Oracle => {
            let every = run_stream(encoder, &RestartPolicy::EveryStep, s, id)?;
            RestartPolicy::Oracle(oracle_schedule(&s.labels, &every.uni_preds(), &every.bi_preds()?)?)
        }
    };
    Ok(run_stream(encoder, &policy, s, id)?)
}

/// Streams every sentence of `args.data` under the policy; writes transcripts and the aggregate report.
pub fn eval_stream(args: &EvalArgs) -> Result<Report> {
    let (encoder, vocab) = HybridEncoder::load(&args.encoder).with_context(|| format!("loading {}", args.encoder.display()))?;
    let arm = match &args.policy {
        PolicySpec::Arm(p) => {
            let arm = ArmModel::load(p).with_context(|| format!("loading {}", p.display()))?;
            arm.check_encoder(encoder.config())?;
            Some(arm)
        }
        _ => None,
    };
    let data = encode(&vocab, &read_split(&args.data, encoder.config().use_indicators)?, &args.data)?;
    if data.is_empty() {
        bail!("{} holds no sentences", args.data.display());
    }
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    ensure!(jobs >= 1, "--jobs must be at least 1");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let transcripts = pool.install(|| {
        data.par_iter()
            .enumerate()
            .map(|(i, s)| stream_one(&encoder, &args.policy, arm.as_ref(), s, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let report = aggregate_report(&transcripts, vocab.labels())?;
    create_dir(&args.out)?;
    write_json(
        &args.out.join(CONFIG_FILE),
        &EvalRun {
            encoder: args.encoder.clone(),
            policy: args.policy.to_string(),
            data: args.data.clone(),
            jobs,
        },
    )?;
    let records: Vec<_> = transcripts.iter().map(|t| t.to_record(&vocab)).collect();
    write_jsonl(&args.out.join(TRANSCRIPT_FILE), &records)?;
    write_json(&args.out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub uni_layers: usize,
    pub bi_layers: usize,
    /// Per-example FLOPs, one entry per length.
    pub flops: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopTable {
    pub lengths: Vec<usize>,
    pub rows: Vec<FlopRow>,
}

impl FlopTable {
    /// FLOPs of the row with `bi_layers = b` at `length`.
    pub fn get(&self, b: usize, length: usize) -> Option<u64> {
        let col = self.lengths.iter().position(|&l| l == length)?;
        self.rows.iter().find(|r| r.bi_layers == b).map(|r| r.flops[col])
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:>3} {:>3}", "u", "b");
        for l in &self.lengths {
            s.push_str(&format!(" {:>14}", format!("n={l}")));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:>3} {:>3}", r.uni_layers, r.bi_layers));
            for f in &r.flops {
                s.push_str(&format!(" {f:>14}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Analytic every-step streaming FLOPs per example for each split of the
/// configured depth into `l - b` causal and `b` bidirectional layers.
pub fn bench_flops(cfg: &RunConfig, lengths: &[usize]) -> Result<FlopTable> {
    ensure!(!lengths.is_empty(), "no lengths given");
    ensure!(lengths.iter().all(|&n| n >= 1), "lengths must be at least 1");
    ensure!(cfg.heads >= 1 && cfg.d_model % cfg.heads == 0, "d_model must be divisible by heads");
    let depth = cfg.uni_layers + cfg.bi_layers;
    let rows = (0..=depth)
        .map(|b| {
            let model = HybridConfig {
                uni_layers: depth - b,
                bi_layers: b,
                ..cfg.model()
            };
            let costs = CostModel::plain(&model);
            FlopRow {
                uni_layers: depth - b,
                bi_layers: b,
                flops: lengths.iter().map(|&n| costs.every_step_total(n)).collect(),
            }
        })
        .collect();
    Ok(FlopTable {
        lengths: lengths.to_vec(),
        rows,
    })
}

/// Runs [`bench_flops`] and writes the table and config into `out` when given.
pub fn bench_flops_cmd(cfg: &RunConfig, lengths: &[usize], out: Option<&Path>) -> Result<FlopTable> {
    let table = bench_flops(cfg, lengths)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join(CONFIG_FILE), cfg)?;
        write_json(&dir.join(FLOPS_FILE), &table)?;
    }
    Ok(table)
}
