//! End-to-end synthetic benchmark: train each method on each task,
//! generate sequences, and compute motif statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::sampling::{
    generate_autoregressive, generate_bang, generate_iang, generate_iterative, random_sequence,
    GenConfig, IterDecoding, ModelScorer,
};
use crate::training::{
    train_with, DataSource, LossPoint, Objective, TaskSpec, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("method {0} cannot run with objective {1}")]
    MethodMismatch(String, String),
}

/// Generation strategy under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Bang,
    Autoregressive,
    IterLogit,
    IterEntropy,
    Iang,
    Random,
}

impl Method {
    pub fn objective(&self) -> Option<Objective> {
        match self {
            Method::Bang => Some(Objective::Bang),
            Method::Autoregressive => Some(Objective::Autoregressive),
            Method::IterLogit | Method::IterEntropy => Some(Objective::IterativeMask),
            Method::Iang => Some(Objective::Iang),
            Method::Random => None,
        }
    }

    pub fn all() -> [Method; 6] {
        [
            Method::Bang,
            Method::Autoregressive,
            Method::IterLogit,
            Method::IterEntropy,
            Method::Iang,
            Method::Random,
        ]
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Bang => "bang",
            Method::Autoregressive => "ar",
            Method::IterLogit => "iter-logit",
            Method::IterEntropy => "iter-entropy",
            Method::Iang => "iang",
            Method::Random => "random",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bang" => Ok(Method::Bang),
            "ar" | "autoregressive" => Ok(Method::Autoregressive),
            "iter-logit" | "iterative-logit" => Ok(Method::IterLogit),
            "iter-entropy" | "iterative-entropy" => Ok(Method::IterEntropy),
            "iang" => Ok(Method::Iang),
            "random" => Ok(Method::Random),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Motif containment statistics over a generated set. `first`, `second`,
/// and `both` are mutually exclusive per sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotifStats {
    pub n: usize,
    pub first: f64,
    pub second: f64,
    pub both: f64,
    pub none: f64,
    /// Fraction containing any correct motif (both counts as correct).
    pub any_correct: f64,
    /// Fraction containing exactly one motif.
    pub any_exclusive: f64,
    pub mean_len: f64,
}

pub fn motif_stats(seqs: &[String], motifs: &[String]) -> MotifStats {
    assert!(!motifs.is_empty(), "at least one motif required");
    let n = seqs.len();
    let mut first = 0usize;
    let mut second = 0usize;
    let mut both = 0usize;
    let mut total_len = 0usize;
    for s in seqs {
        total_len += s.len();
        let has1 = s.contains(motifs[0].as_str());
        let has2 = motifs.len() > 1 && s.contains(motifs[1].as_str());
        match (has1, has2) {
            (true, true) => both += 1,
            (true, false) => first += 1,
            (false, true) => second += 1,
            (false, false) => {}
        }
    }
    let frac = |x: usize| x as f64 / n as f64;
    MotifStats {
        n,
        first: frac(first),
        second: frac(second),
        both: frac(both),
        none: frac(n - first - second - both),
        any_correct: frac(first + second + both),
        any_exclusive: frac(first + second),
        mean_len: total_len as f64 / n as f64,
    }
}

/// One benchmark cell: everything needed to train and evaluate a method on
/// a task.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_seqs: usize,
    pub top_k: usize,
    /// Generation length cap; defaults to the task's maximum length.
    pub max_len: Option<usize>,
    pub gen_seed: u64,
}

impl BenchConfig {
    pub fn toy(objective_seed: u64) -> Self {
        BenchConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::toy_benchmark(Objective::Bang, objective_seed),
            n_seqs: 1000,
            top_k: 4,
            max_len: None,
            gen_seed: objective_seed.wrapping_add(0xBEEF),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: Method,
    pub task: TaskSpec,
    pub stats: MotifStats,
    pub steps: u64,
    pub seed: u64,
    pub cached: bool,
}

/// Stable FNV-1a over everything the trained weights depend on: task,
/// objective, model config, and train config. Generation-only settings do
/// not invalidate a cached checkpoint, and methods sharing an objective
/// (both iterative decodings) share one.
pub fn cell_hash(task: &TaskSpec, objective: Objective, bench: &BenchConfig) -> u64 {
    let mut train = bench.train.clone();
    train.objective = objective;
    let desc = format!(
        "{}|{}|{}|{}",
        task.to_kv(),
        objective,
        bench.model.to_kv(),
        train.to_kv(),
    );
    let mut h: u64 = 0xcbf29ce484222325;
    for b in desc.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn cache_path(dir: &Path, task: &TaskSpec, objective: Objective, bench: &BenchConfig) -> PathBuf {
    dir.join(format!(
        "{}-{}-{:016x}.ckpt",
        objective,
        task.task,
        cell_hash(task, objective, bench)
    ))
}

/// Train (or load from cache) the checkpoint for a cell. `Random` needs no
/// checkpoint and returns `None`.
pub fn train_or_load(
    task: &TaskSpec,
    method: Method,
    bench: &BenchConfig,
    cache_dir: Option<&Path>,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<(Option<Checkpoint>, bool), BenchError> {
    let Some(objective) = method.objective() else {
        return Ok((None, false));
    };
    let mut train_cfg = bench.train.clone();
    train_cfg.objective = objective;
    let path = cache_dir.map(|d| cache_path(d, task, objective, bench));
    if let Some(p) = &path {
        if p.exists() {
            return Ok((Some(Checkpoint::load(p)?), true));
        }
    }
    let run = train_with(
        &bench.model,
        &train_cfg,
        &DataSource::Synthetic(task.clone()),
        &mut on_log,
    )?;
    if let Some(p) = &path {
        std::fs::create_dir_all(p.parent().unwrap())?;
        let tmp = p.with_extension("ckpt.tmp");
        run.checkpoint.save(&tmp)?;
        std::fs::rename(&tmp, p)?;
        let mut log_text = String::from("step\tlr\tloss\n");
        for pt in &run.loss_log {
            log_text.push_str(&format!("{}\t{:.8e}\t{:.6}\n", pt.step, pt.lr, pt.loss));
        }
        std::fs::write(p.with_extension("loss.tsv"), log_text)?;
    }
    Ok((Some(run.checkpoint), false))
}

/// Generate `n` sequences with the cell's method, each from its own seeded
/// stream (parallel across sequences, deterministic per seed).
pub fn generate_set(
    method: Method,
    checkpoint: Option<&Checkpoint>,
    task: &TaskSpec,
    bench: &BenchConfig,
) -> Result<Vec<String>, BenchError> {
    let max_len = bench.max_len.unwrap_or(task.seq_len.max());
    let cfg = GenConfig {
        top_k: bench.top_k,
        max_len,
        fixed_len: Some(max_len),
    };
    if method == Method::Random {
        return Ok((0..bench.n_seqs)
            .map(|i| {
                let mut rng = ChaCha12Rng::seed_from_u64(bench.gen_seed.wrapping_add(i as u64));
                random_sequence(&mut rng, 40, 50)
            })
            .collect());
    }
    let ck = checkpoint.expect("non-random methods need a checkpoint");
    if Some(ck.objective) != method.objective() {
        return Err(BenchError::MethodMismatch(
            method.to_string(),
            ck.objective.to_string(),
        ));
    }
    let model: Model<f32> = ck.model()?;
    let out: Result<Vec<String>, ModelError> = (0..bench.n_seqs)
        .into_par_iter()
        .map(|i| {
            let scorer = ModelScorer::new(&model)?;
            let mut rng = ChaCha12Rng::seed_from_u64(bench.gen_seed.wrapping_add(i as u64));
            match method {
                Method::Bang => generate_bang(&scorer, &cfg, &mut rng),
                Method::Autoregressive => generate_autoregressive(&scorer, &cfg, &mut rng),
                Method::IterLogit => {
                    generate_iterative(&scorer, &cfg, &mut rng, IterDecoding::MaxLogit)
                }
                Method::IterEntropy => {
                    generate_iterative(&scorer, &cfg, &mut rng, IterDecoding::Entropy)
                }
                Method::Iang => generate_iang(&scorer, &cfg, &mut rng, IterDecoding::MaxLogit),
                Method::Random => unreachable!(),
            }
        })
        .collect();
    Ok(out?)
}

/// Full cell: train or load, generate, and score.
pub fn run_benchmark(
    task: &TaskSpec,
    method: Method,
    bench: &BenchConfig,
    cache_dir: Option<&Path>,
) -> Result<BenchRow, BenchError> {
    task.validate()?;
    let (checkpoint, cached) = train_or_load(task, method, bench, cache_dir, |_| {})?;
    let seqs = generate_set(method, checkpoint.as_ref(), task, bench)?;
    let motifs: Vec<String> = match task.task {
        crate::training::TaskKind::SingleBind => vec![task.motifs[0].clone()],
        _ => task.motifs.clone(),
    };
    Ok(BenchRow {
        method,
        task: task.clone(),
        stats: motif_stats(&seqs, &motifs),
        steps: bench.train.steps,
        seed: bench.train.seed,
        cached,
    })
}

/// Run many cells, optionally on a bounded thread pool.
pub fn run_cells(
    cells: &[(TaskSpec, Method)],
    bench: &BenchConfig,
    cache_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<BenchRow>, BenchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<BenchRow, BenchError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(task, method)| run_benchmark(task, *method, bench, cache_dir))
            .collect()
    });
    results.into_iter().collect()
}

pub fn rows_to_tsv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "method\ttask\tseq_len\tn\tfirst\tsecond\tboth\tnone\tany_correct\tany_exclusive\tmean_len\tsteps\tseed\tcached\n",
    );
    for r in rows {
        let len = match r.task.seq_len {
            crate::training::LengthLaw::Fixed(l) => format!("{l}"),
            crate::training::LengthLaw::Uniform(a, b) => format!("{a}-{b}"),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{}\t{}\t{}\n",
            r.method,
            r.task.task,
            len,
            r.stats.n,
            r.stats.first,
            r.stats.second,
            r.stats.both,
            r.stats.none,
            r.stats.any_correct,
            r.stats.any_exclusive,
            r.stats.mean_len,
            r.steps,
            r.seed,
            r.cached,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{LengthLaw, TaskKind};

    #[test]
    fn motif_stats_first_only() {
        let seqs = vec!["AAUGACUCAA".to_string()];
        let s = motif_stats(&seqs, &["UGACUC".into(), "CAAUUG".into()]);
        assert_eq!((s.first, s.second, s.both), (1.0, 0.0, 0.0));
        assert_eq!(s.any_correct, 1.0);
    }

    #[test]
    fn motif_stats_both() {
        let seqs = vec!["UGACUCAAACAAUUG".to_string()];
        let s = motif_stats(&seqs, &["UGACUC".into(), "CAAUUG".into()]);
        assert_eq!((s.first, s.second, s.both), (0.0, 0.0, 1.0));
        assert_eq!(s.any_correct, 1.0);
        assert_eq!(s.any_exclusive, 0.0);
    }

    #[test]
    fn motif_stats_partition() {
        let seqs = vec![
            "UGACUCAAAA".to_string(),
            "AAAACAAUUG".to_string(),
            "UGACUCCAAUUG".to_string(),
            "AAAAAAAAAA".to_string(),
        ];
        let s = motif_stats(&seqs, &["UGACUC".into(), "CAAUUG".into()]);
        assert!((s.first + s.second + s.both + s.none - 1.0).abs() < 1e-12);
        assert_eq!(s.none, 0.25);
    }

    #[test]
    fn random_baseline_rate() {
        let task = TaskSpec::new(TaskKind::SingleBind, LengthLaw::Fixed(50));
        let mut bench = BenchConfig::toy(7);
        bench.n_seqs = 10_000;
        let seqs = generate_set(Method::Random, None, &task, &bench).unwrap();
        let s = motif_stats(&seqs, &[task.motifs[0].clone()]);
        assert!(
            (0.005..=0.02).contains(&s.any_correct),
            "random motif rate {}",
            s.any_correct
        );
        assert!((s.mean_len - 45.0).abs() < 0.5);
    }

    #[test]
    fn cell_hash_distinguishes_training_configs_only() {
        let task = TaskSpec::new(TaskKind::SingleBind, LengthLaw::Fixed(50));
        let bench = BenchConfig::toy(7);
        let mut bench2 = bench.clone();
        bench2.train.seed = 8;
        assert_ne!(
            cell_hash(&task, Objective::Bang, &bench),
            cell_hash(&task, Objective::Bang, &bench2)
        );
        assert_ne!(
            cell_hash(&task, Objective::Bang, &bench),
            cell_hash(&task, Objective::Autoregressive, &bench)
        );
        // generation-only settings do not touch the checkpoint identity
        let mut bench3 = bench.clone();
        bench3.n_seqs = 99;
        bench3.top_k = 2;
        assert_eq!(
            cell_hash(&task, Objective::Bang, &bench),
            cell_hash(&task, Objective::Bang, &bench3)
        );
    }
}
