//! Command-line entry point for the anchored-generation toolkit.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use rna_bang::checkpoint::Checkpoint;
use rna_bang::maskgen;
use rna_bang::model::{Model, ModelConfig};
use rna_bang::sampling::{
    generate_autoregressive, generate_bang, generate_iang, generate_iterative, random_sequence,
    GenConfig, IterDecoding, ModelScorer,
};
use rna_bang::seqcore::{insert_anchors, read_fasta, write_fasta, NucKind, SeqKind, SeqRecord};
use rna_bang::seqmetrics::{canonical_order, diversity, novelty, Pwm};
use rna_bang::structio::{chain_to_frames, frames_tsv, parse_pdb_backbone};
use rna_bang::synthbench::{run_cells, BenchConfig, Method};
use rna_bang::training::{
    synth_sample, train_with, DataSource, LengthLaw, Objective, OptKind, TaskKind, TaskSpec,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "rna-bang",
    about = "Anchored bidirectional nucleotide sequence generation: data, training, sampling, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic task sequences as FASTA (anchor index in headers).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Generate sequences from a checkpoint (or the random baseline).
    Generate(GenerateArgs),
    /// Benchmarks and metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print an attention mask as an ASCII grid.
    DumpMask(DumpMaskArgs),
    /// Extract per-residue backbone frames from a PDB file as TSV.
    Frames(FramesArgs),
    /// Print checkpoint metadata and parameter count.
    Info(InfoArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Train/evaluate methods on synthetic tasks; emits a TSV.
    Synth(EvalSynthArgs),
    /// Diversity/novelty/PWM metrics over a FASTA file; emits a TSV.
    Metrics(EvalMetricsArgs),
}

#[derive(Args)]
struct TaskArgs {
    /// single-bind | double-bind | dual-bind-mix | dual-bind-mix-random
    #[arg(long, default_value = "single-bind")]
    task: String,
    /// Fixed length ("50") or uniform range ("40-50").
    #[arg(long, default_value = "50")]
    seq_len: String,
    #[arg(long, default_value = rna_bang::training::DEFAULT_MOTIF_1)]
    motif1: String,
    #[arg(long, default_value = rna_bang::training::DEFAULT_MOTIF_2)]
    motif2: String,
    /// Motif separation for dual-bind-mix ("3" or "random").
    #[arg(long)]
    separation: Option<String>,
}

impl TaskArgs {
    fn build(&self) -> Result<TaskSpec> {
        let task = TaskKind::from_str(&self.task).map_err(|e| anyhow!(e))?;
        let seq_len = parse_len_law(&self.seq_len)?;
        let mut spec = TaskSpec::new(task, seq_len);
        spec.motifs = vec![self.motif1.clone(), self.motif2.clone()];
        if let Some(sep) = &self.separation {
            spec.separation = if sep == "random" {
                None
            } else {
                Some(sep.parse().context("bad --separation")?)
            };
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_len_law(s: &str) -> Result<LengthLaw> {
    if let Some((a, b)) = s.split_once('-') {
        Ok(LengthLaw::Uniform(a.parse()?, b.parse()?))
    } else {
        Ok(LengthLaw::Fixed(s.parse()?))
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.or_else(|| {
        std::env::var("BANG_SEED").ok().and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output FASTA path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Train on FASTA records instead of the synthetic stream.
    #[arg(long)]
    fasta: Option<PathBuf>,
    /// bang | autoregressive | iterative_mask | iang
    #[arg(long, default_value = "bang")]
    objective: String,
    /// toy | full
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Key=value config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    decay_gamma: Option<f64>,
    #[arg(long)]
    decay_period: Option<u64>,
    /// adam | amsgrad
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    anchor_loss_weight: Option<f64>,
    #[arg(long)]
    anchor_loss_window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Loss log TSV path (defaults to <out>.loss.tsv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// bang | ar | iter-logit | iter-entropy | iang | random
    #[arg(long, default_value = "bang")]
    method: String,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    top_k: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long)]
    fixed_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Protein PDB file for conditioned generation.
    #[arg(long)]
    protein_pdb: Option<PathBuf>,
    #[arg(long, default_value = "A")]
    protein_chain: char,
    /// Output FASTA path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSynthArgs {
    /// Comma-separated task list.
    #[arg(long, default_value = "single-bind,double-bind")]
    tasks: String,
    /// Comma-separated method list.
    #[arg(long, default_value = "bang,ar,iter-logit,iter-entropy,iang,random")]
    methods: String,
    /// Comma-separated training seeds (one full sweep per seed).
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value = "50")]
    seq_len: String,
    #[arg(long, default_value_t = 80_000)]
    steps: u64,
    #[arg(long, default_value_t = 1000)]
    n_seqs: usize,
    #[arg(long, default_value_t = 4)]
    top_k: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output TSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalMetricsArgs {
    /// Input FASTA of generated sequences.
    #[arg(long)]
    fasta: PathBuf,
    /// Reference FASTA for the novelty metric.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// PWM text file for motif scanning.
    #[arg(long)]
    pwm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpMaskArgs {
    /// Left-side content tokens.
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Right-side content tokens.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Append terminal eos tokens to the layout.
    #[arg(long, default_value_t = false)]
    eos: bool,
}

#[derive(Args)]
struct FramesArgs {
    #[arg(long)]
    pdb: PathBuf,
    #[arg(long, default_value = "A")]
    chain: char,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {path:?}"))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let spec = args.task.build()?;
            let mut rng = ChaCha12Rng::seed_from_u64(resolve_seed(args.seed));
            let mut records = Vec::with_capacity(args.n);
            for i in 0..args.n {
                let (seq, anchor) = synth_sample(&spec, &mut rng)?;
                records.push(SeqRecord::new(
                    format!("synth_{i:05} anchor_after={anchor}"),
                    seq,
                    SeqKind::Rna,
                ));
            }
            emit(args.out.as_ref(), &write_fasta(&records))
        }
        Command::Train(args) => {
            let model_cfg = match args.preset.as_str() {
                "toy" => ModelConfig::toy(),
                "full" => ModelConfig::full(),
                other => bail!("unknown preset '{other}' (expected toy|full)"),
            };
            let mut cfg = TrainConfig::toy_benchmark(
                Objective::from_str(&args.objective).map_err(|e| anyhow!(e))?,
                resolve_seed(args.seed),
            );
            if let Some(path) = &args.config {
                apply_config_file(&mut cfg, path)?;
            }
            if let Some(v) = args.steps {
                cfg.steps = v;
            }
            if let Some(v) = args.batch {
                cfg.batch = v;
            }
            if let Some(v) = args.lr {
                cfg.lr0 = v;
            }
            if let Some(v) = args.warmup {
                cfg.warmup_steps = v;
            }
            if let Some(v) = args.decay_gamma {
                cfg.decay_gamma = v;
            }
            if let Some(v) = args.decay_period {
                cfg.decay_period = v;
            }
            if let Some(v) = &args.optimizer {
                cfg.optimizer = OptKind::from_str(v).map_err(|e| anyhow!(e))?;
            }
            if let Some(v) = args.mask_rate {
                cfg.mask_rate = v;
            }
            if let Some(v) = args.anchor_loss_weight {
                cfg.anchor_loss_weight = v;
            }
            if let Some(v) = args.anchor_loss_window {
                cfg.anchor_loss_window = v;
            }
            if let Some(v) = args.seed {
                cfg.seed = v;
            }
            if let Some(v) = args.log_every {
                cfg.log_every = v;
            }

            let source = match &args.fasta {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {path:?}"))?;
                    DataSource::Records(read_fasta(&text)?)
                }
                None => DataSource::Synthetic(args.task.build()?),
            };
            let log_path = args
                .log
                .clone()
                .unwrap_or_else(|| args.out.with_extension("loss.tsv"));
            let mut log_file = std::fs::File::create(&log_path)
                .with_context(|| format!("creating {log_path:?}"))?;
            writeln!(log_file, "step\tlr\tloss")?;
            let run = train_with(&model_cfg, &cfg, &source, |p| {
                let _ = writeln!(log_file, "{}\t{:.8e}\t{:.6}", p.step, p.lr, p.loss);
                let _ = log_file.flush();
                eprintln!("step {:>8}  lr {:.3e}  loss {:.4}", p.step, p.lr, p.loss);
            })?;
            run.checkpoint.save(&args.out)?;
            eprintln!("wrote checkpoint to {:?} and loss log to {log_path:?}", args.out);
            Ok(())
        }
        Command::Generate(args) => {
            let method = Method::from_str(&args.method).map_err(|e| anyhow!(e))?;
            let seed = resolve_seed(args.seed);
            let cfg = GenConfig {
                top_k: args.top_k,
                max_len: args.max_len,
                fixed_len: args.fixed_len.or(Some(args.max_len)),
            };
            let mut seqs = Vec::with_capacity(args.n);
            if method == Method::Random {
                for i in 0..args.n {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(i as u64));
                    seqs.push(random_sequence(&mut rng, 40, 50));
                }
            } else {
                let ck_path = args
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| anyhow!("--checkpoint required for method {method}"))?;
                let ck = Checkpoint::load(ck_path)?;
                if Some(ck.objective) != method.objective() {
                    bail!(
                        "checkpoint was trained with objective '{}', incompatible with method '{method}'",
                        ck.objective
                    );
                }
                let model: Model<f32> = ck.model()?;
                let protein = match &args.protein_pdb {
                    Some(path) => {
                        let text = std::fs::read_to_string(path)
                            .with_context(|| format!("reading {path:?}"))?;
                        let chain = parse_pdb_backbone(&text, args.protein_chain)?;
                        let (frames, tokens) = chain_to_frames(&chain)?;
                        Some((tokens, frames))
                    }
                    None => None,
                };
                let scorer = match &protein {
                    Some((tokens, frames)) => {
                        let frames32: Vec<rna_bang::Frame<f32>> =
                            frames.iter().map(|f| f.cast()).collect();
                        ModelScorer::with_protein(&model, tokens, &frames32)?
                    }
                    None => ModelScorer::new(&model)?,
                };
                for i in 0..args.n {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(i as u64));
                    let s = match method {
                        Method::Bang => generate_bang(&scorer, &cfg, &mut rng)?,
                        Method::Autoregressive => generate_autoregressive(&scorer, &cfg, &mut rng)?,
                        Method::IterLogit => {
                            generate_iterative(&scorer, &cfg, &mut rng, IterDecoding::MaxLogit)?
                        }
                        Method::IterEntropy => {
                            generate_iterative(&scorer, &cfg, &mut rng, IterDecoding::Entropy)?
                        }
                        Method::Iang => {
                            generate_iang(&scorer, &cfg, &mut rng, IterDecoding::MaxLogit)?
                        }
                        Method::Random => unreachable!(),
                    };
                    seqs.push(s);
                }
            }
            let records: Vec<SeqRecord> = seqs
                .into_iter()
                .enumerate()
                .map(|(i, s)| SeqRecord::new(format!("{method}_{i:05}"), s, SeqKind::Rna))
                .collect();
            emit(args.out.as_ref(), &write_fasta(&records))
        }
        Command::Eval(EvalCommand::Synth(args)) => {
            let tasks: Vec<TaskKind> = args
                .tasks
                .split(',')
                .map(|t| TaskKind::from_str(t.trim()).map_err(|e| anyhow!(e)))
                .collect::<Result<_>>()?;
            let methods: Vec<Method> = args
                .methods
                .split(',')
                .map(|m| Method::from_str(m.trim()).map_err(|e| anyhow!(e)))
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = args
                .seeds
                .split(',')
                .map(|s| s.trim().parse().context("bad --seeds"))
                .collect::<Result<_>>()?;
            let seq_len = parse_len_law(&args.seq_len)?;
            let mut all_rows = Vec::new();
            for seed in seeds {
                let mut bench = BenchConfig::toy(seed);
                bench.train.steps = args.steps;
                bench.n_seqs = args.n_seqs;
                bench.top_k = args.top_k;
                let cells: Vec<(TaskSpec, Method)> = tasks
                    .iter()
                    .flat_map(|&t| {
                        methods.iter().map(move |&m| (TaskSpec::new(t, seq_len), m))
                    })
                    .collect();
                let rows = run_cells(&cells, &bench, args.cache_dir.as_deref(), args.jobs)?;
                all_rows.extend(rows);
            }
            emit(args.out.as_ref(), &rna_bang::synthbench::rows_to_tsv(&all_rows))
        }
        Command::Eval(EvalCommand::Metrics(args)) => {
            let text = std::fs::read_to_string(&args.fasta)
                .with_context(|| format!("reading {:?}", args.fasta))?;
            let seqs: Vec<String> = read_fasta(&text)?
                .into_iter()
                .map(|r| r.residues)
                .collect();
            if seqs.is_empty() {
                bail!("no sequences in {:?}", args.fasta);
            }
            let ordered = canonical_order(&seqs);
            let div = diversity(&ordered, args.threshold);
            let mut out = String::from("metric\tvalue\tnote\n");
            out.push_str(&format!("n\t{}\t\n", seqs.len()));
            out.push_str(&format!(
                "diversity\t{div:.4}\tgreedy clusters at identity {} / n\n",
                args.threshold
            ));
            if let Some(ref_path) = &args.reference {
                let rtext = std::fs::read_to_string(ref_path)
                    .with_context(|| format!("reading {ref_path:?}"))?;
                let refs: Vec<String> =
                    read_fasta(&rtext)?.into_iter().map(|r| r.residues).collect();
                let nov = novelty(&seqs, &refs, args.threshold);
                out.push_str(&format!(
                    "novelty\t{nov:.4}\tidentity-threshold approximation of similarity search\n"
                ));
            }
            if let Some(pwm_path) = &args.pwm {
                let ptext = std::fs::read_to_string(pwm_path)
                    .with_context(|| format!("reading {pwm_path:?}"))?;
                let pwm = Pwm::from_text(&ptext)?;
                let mut mean_sig = 0.0;
                for s in &seqs {
                    mean_sig += pwm.scan(s)?.sigmoid_score;
                }
                out.push_str(&format!(
                    "pwm_mean_sigmoid\t{:.4}\tbest-window sigmoid score averaged over sequences\n",
                    mean_sig / seqs.len() as f64
                ));
            }
            emit(args.out.as_ref(), &out)
        }
        Command::DumpMask(args) => {
            let tokens: Vec<u32> = (0..args.m + args.n).map(|i| (i % 4) as u32).collect();
            let after = if args.m == 0 { None } else { Some(args.m - 1) };
            let mut seq = insert_anchors(&tokens, after, NucKind::Rna)?;
            if args.eos {
                seq = seq.with_terminal_eos();
            }
            let mask = maskgen::bang_mask(&seq);
            print!(
                "{}",
                mask.ascii(Some((seq.anchor_slot, seq.anchor_slot + 1)))
            );
            Ok(())
        }
        Command::Frames(args) => {
            let text = std::fs::read_to_string(&args.pdb)
                .with_context(|| format!("reading {:?}", args.pdb))?;
            let chain = parse_pdb_backbone(&text, args.chain)?;
            if chain.skipped_records > 0 {
                eprintln!(
                    "warning: skipped {} altloc/insertion records",
                    chain.skipped_records
                );
            }
            emit(args.out.as_ref(), &frames_tsv(&chain)?)
        }
        Command::Info(args) => {
            let ck = Checkpoint::load(&args.checkpoint)?;
            let count = ck.config.param_count();
            println!("checkpoint: {:?}", args.checkpoint);
            println!("objective: {}", ck.objective);
            println!("trained steps: {}", ck.step);
            println!("seed: {}", ck.seed);
            println!("params: {count} (~{:.1}k)", count as f64 / 1000.0);
            print!("{}", ck.config.to_kv());
            Ok(())
        }
    }
}

fn apply_config_file(cfg: &mut TrainConfig, path: &PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{path:?}:{}: expected key=value", lineno + 1))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "steps" => cfg.steps = v.parse()?,
            "batch" => cfg.batch = v.parse()?,
            "lr0" => cfg.lr0 = v.parse()?,
            "warmup_steps" => cfg.warmup_steps = v.parse()?,
            "decay_gamma" => cfg.decay_gamma = v.parse()?,
            "decay_period" => cfg.decay_period = v.parse()?,
            "optimizer" => cfg.optimizer = OptKind::from_str(v).map_err(|e| anyhow!(e))?,
            "objective" => cfg.objective = Objective::from_str(v).map_err(|e| anyhow!(e))?,
            "mask_rate" => cfg.mask_rate = v.parse()?,
            "anchor_loss_weight" => cfg.anchor_loss_weight = v.parse()?,
            "anchor_loss_window" => cfg.anchor_loss_window = v.parse()?,
            "seed" => cfg.seed = v.parse()?,
            "log_every" => cfg.log_every = v.parse()?,
            other => bail!("{path:?}:{}: unknown key '{other}'", lineno + 1),
        }
    }
    Ok(())
}
