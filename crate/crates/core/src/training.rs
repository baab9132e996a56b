//! Objectives, optimizer, schedule, synthetic data streams, and the train
//! loop for the anchored objective and all baselines.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;
use std::rc::Rc;
use std::str::FromStr;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::maskgen::{causal_mask, full_mask, position_indices, target_map, AttentionMask, TargetMap};
use crate::model::{Model, ModelConfig, ModelError, NucInput};
use crate::seqcore::{
    insert_anchors, tokenize, NucKind, SeqError, SeqKind, SeqRecord, Vocab, TOK_ANC, TOK_EOS,
    TOK_MASK, TOK_SOS,
};
use crate::tensor::{Scalar, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("motif does not fit: {0}")]
    MotifDoesNotFit(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("loss diverged (non-finite) at step {0}")]
    DivergedLoss(u64),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Seq(#[from] SeqError),
}

/// Training objective, which also determines the generation strategy a
/// checkpoint supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Bang,
    Autoregressive,
    IterativeMask,
    Iang,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Objective::Bang => "bang",
            Objective::Autoregressive => "autoregressive",
            Objective::IterativeMask => "iterative_mask",
            Objective::Iang => "iang",
        };
        f.write_str(s)
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bang" => Ok(Objective::Bang),
            "autoregressive" | "ar" => Ok(Objective::Autoregressive),
            "iterative_mask" | "iterative" => Ok(Objective::IterativeMask),
            "iang" => Ok(Objective::Iang),
            other => Err(format!("unknown objective '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    Amsgrad,
}

impl std::fmt::Display for OptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptKind::Adam => "adam",
            OptKind::Amsgrad => "amsgrad",
        })
    }
}

impl FromStr for OptKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptKind::Adam),
            "amsgrad" => Ok(OptKind::Amsgrad),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr0: f64,
    pub warmup_steps: u64,
    pub decay_gamma: f64,
    pub decay_period: u64,
    pub optimizer: OptKind,
    pub objective: Objective,
    /// Fraction of content tokens masked per sample (iterative objectives).
    pub mask_rate: f64,
    /// Weight applied to losses whose target is within
    /// `anchor_loss_window` residues of the anchors (standalone pretraining
    /// uses 0.01; the synthetic benchmark uses 1.0).
    pub anchor_loss_weight: f64,
    pub anchor_loss_window: usize,
    pub seed: u64,
    pub log_every: u64,
}

impl TrainConfig {
    /// The synthetic-benchmark setup: Adam at a constant 1e-4, batch 8,
    /// 80k steps.
    pub fn toy_benchmark(objective: Objective, seed: u64) -> Self {
        TrainConfig {
            steps: 80_000,
            batch: 8,
            lr0: 1e-4,
            warmup_steps: 0,
            decay_gamma: 1.0,
            decay_period: 1000,
            optimizer: OptKind::Adam,
            objective,
            mask_rate: 0.5,
            anchor_loss_weight: 1.0,
            anchor_loss_window: 4,
            seed,
            log_every: 2000,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 || self.steps == 0 {
            return Err(TrainError::BadConfig("steps and batch must be positive".into()));
        }
        if matches!(self.objective, Objective::IterativeMask | Objective::Iang)
            && !(0.0 < self.mask_rate && self.mask_rate < 1.0)
        {
            return Err(TrainError::BadConfig("mask_rate must be in (0, 1)".into()));
        }
        if !(0.0 < self.anchor_loss_weight && self.anchor_loss_weight <= 1.0) {
            return Err(TrainError::BadConfig("anchor_loss_weight must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "steps={}\nbatch={}\nlr0={}\nwarmup_steps={}\ndecay_gamma={}\ndecay_period={}\noptimizer={}\nobjective={}\nmask_rate={}\nanchor_loss_weight={}\nanchor_loss_window={}\nseed={}\nlog_every={}\n",
            self.steps, self.batch, self.lr0, self.warmup_steps, self.decay_gamma,
            self.decay_period, self.optimizer, self.objective, self.mask_rate,
            self.anchor_loss_weight, self.anchor_loss_window, self.seed, self.log_every
        )
    }
}

/// Sequence length law for synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthLaw {
    Fixed(usize),
    Uniform(usize, usize),
}

impl LengthLaw {
    pub fn max(&self) -> usize {
        match self {
            LengthLaw::Fixed(l) => *l,
            LengthLaw::Uniform(_, b) => *b,
        }
    }

    pub fn min(&self) -> usize {
        match self {
            LengthLaw::Fixed(l) => *l,
            LengthLaw::Uniform(a, _) => *a,
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        match self {
            LengthLaw::Fixed(l) => *l,
            LengthLaw::Uniform(a, b) => rng.random_range(*a..=*b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    SingleBind,
    DoubleBind,
    DualBindMix,
    DualBindMixRandom,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::SingleBind => "single-bind",
            TaskKind::DoubleBind => "double-bind",
            TaskKind::DualBindMix => "dual-bind-mix",
            TaskKind::DualBindMixRandom => "dual-bind-mix-random",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single-bind" | "singlebind" => Ok(TaskKind::SingleBind),
            "double-bind" | "doublebind" => Ok(TaskKind::DoubleBind),
            "dual-bind-mix" | "dualbindmix" => Ok(TaskKind::DualBindMix),
            "dual-bind-mix-random" | "dualbindmixrandom" => Ok(TaskKind::DualBindMixRandom),
            other => Err(format!("unknown task '{other}'")),
        }
    }
}

/// Synthetic benchmark definition.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub motifs: Vec<String>,
    pub seq_len: LengthLaw,
    pub task: TaskKind,
    /// Token gap between the two motifs (Mix variants); `None` draws it
    /// uniformly per sample.
    pub separation: Option<usize>,
}

pub const DEFAULT_MOTIF_1: &str = "UGACUC";
pub const DEFAULT_MOTIF_2: &str = "CAAUUG";

impl TaskSpec {
    pub fn new(task: TaskKind, seq_len: LengthLaw) -> Self {
        TaskSpec {
            motifs: vec![DEFAULT_MOTIF_1.to_string(), DEFAULT_MOTIF_2.to_string()],
            seq_len,
            task,
            separation: match task {
                TaskKind::DualBindMix => Some(3),
                _ => None,
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.motifs.is_empty() || self.motifs.iter().any(|m| m.is_empty()) {
            return Err(TrainError::BadConfig("motifs must be nonempty".into()));
        }
        for m in &self.motifs {
            if m.chars().any(|c| !"ACGU".contains(c)) {
                return Err(TrainError::BadConfig(format!("motif '{m}' is not RNA")));
            }
        }
        let need = match self.task {
            TaskKind::SingleBind | TaskKind::DoubleBind => {
                self.motifs.iter().map(|m| m.len()).max().unwrap()
            }
            TaskKind::DualBindMix | TaskKind::DualBindMixRandom => {
                if self.motifs.len() < 2 {
                    return Err(TrainError::BadConfig("mix tasks need two motifs".into()));
                }
                self.motifs[0].len() + self.motifs[1].len() + self.separation.unwrap_or(0)
            }
        };
        if need > self.seq_len.min() {
            return Err(TrainError::MotifDoesNotFit(format!(
                "need {need} positions, shortest sequence is {}",
                self.seq_len.min()
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let len = match self.seq_len {
            LengthLaw::Fixed(l) => format!("{l}"),
            LengthLaw::Uniform(a, b) => format!("{a}-{b}"),
        };
        format!(
            "task={}\nmotifs={}\nseq_len={}\nseparation={}\n",
            self.task,
            self.motifs.join(","),
            len,
            self.separation.map_or("random".to_string(), |s| s.to_string()),
        )
    }
}

/// Anchor offset inside a motif: the residue after which the anchors go.
/// The center of the motif; an even length splits symmetrically.
pub fn motif_anchor_offset(motif_len: usize) -> usize {
    (motif_len - 1) / 2
}

/// Draw one synthetic sequence. Returns the residue string and the index of
/// the selected nucleotide (the anchors are inserted right after it).
pub fn synth_sample(spec: &TaskSpec, rng: &mut impl Rng) -> Result<(String, usize), TrainError> {
    const BASES: [char; 4] = ['A', 'C', 'G', 'U'];
    let l = spec.seq_len.draw(rng);
    let mut seq: Vec<char> = (0..l).map(|_| BASES[rng.random_range(0..4)]).collect();
    let place = |seq: &mut Vec<char>, motif: &str, start: usize| {
        for (i, ch) in motif.chars().enumerate() {
            seq[start + i] = ch;
        }
    };
    let (anchor_motif_start, anchor_motif_len) = match spec.task {
        TaskKind::SingleBind | TaskKind::DoubleBind => {
            let motif = if spec.task == TaskKind::SingleBind || rng.random_range(0..2) == 0 {
                &spec.motifs[0]
            } else {
                &spec.motifs[1]
            };
            if motif.len() > l {
                return Err(TrainError::MotifDoesNotFit(format!(
                    "motif length {} exceeds sequence length {l}",
                    motif.len()
                )));
            }
            let start = rng.random_range(0..=l - motif.len());
            place(&mut seq, motif, start);
            (start, motif.len())
        }
        TaskKind::DualBindMix | TaskKind::DualBindMixRandom => {
            let (m1, m2) = (&spec.motifs[0], &spec.motifs[1]);
            let base = m1.len() + m2.len();
            if base > l {
                return Err(TrainError::MotifDoesNotFit(format!(
                    "motifs need {base} positions, sequence has {l}"
                )));
            }
            let sep = match spec.separation {
                Some(k) => k,
                None => rng.random_range(0..=l - base),
            };
            if base + sep > l {
                return Err(TrainError::MotifDoesNotFit(format!(
                    "motifs plus separation need {} positions, sequence has {l}",
                    base + sep
                )));
            }
            let start = rng.random_range(0..=l - base - sep);
            place(&mut seq, m1, start);
            let start2 = start + m1.len() + sep;
            place(&mut seq, m2, start2);
            if rng.random_range(0..2) == 0 {
                (start, m1.len())
            } else {
                (start2, m2.len())
            }
        }
    };
    let anchor_after = anchor_motif_start + motif_anchor_offset(anchor_motif_len);
    Ok((seq.into_iter().collect(), anchor_after))
}

/// Learning rate at `step` (1-based): linear warmup, then exponential decay
/// by `decay_gamma` every `decay_period` steps.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        cfg.lr0 * step as f64 / cfg.warmup_steps as f64
    } else {
        let past = step.saturating_sub(cfg.warmup_steps);
        cfg.lr0 * cfg.decay_gamma.powi((past / cfg.decay_period.max(1)) as i32)
    }
}

/// Resolve a predictor->position map into per-position target class ids.
pub fn resolve_targets(tokens: &[u32], tm: &TargetMap) -> Vec<Option<usize>> {
    tm.targets
        .iter()
        .map(|t| t.map(|pos| tokens[pos] as usize))
        .collect()
}

/// Weighted-mean cross-entropy between logits and resolved targets.
pub fn loss<F: Scalar>(
    logits: &Array2<F>,
    class_targets: &[Option<usize>],
    weights: &[F],
) -> Result<F, TrainError> {
    if logits.nrows() != class_targets.len() || logits.nrows() != weights.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "logits rows {} vs targets {} vs weights {}",
            logits.nrows(),
            class_targets.len(),
            weights.len()
        )));
    }
    for t in class_targets.iter().flatten() {
        if *t >= logits.ncols() {
            return Err(TrainError::ShapeMismatch(format!(
                "target class {t} out of vocabulary {}",
                logits.ncols()
            )));
        }
    }
    Ok(crate::tensor::weighted_cross_entropy(logits, class_targets, weights))
}

/// Adam / AMSGrad with default betas (0.9, 0.999) and eps 1e-8.
pub struct Optimizer<F: Scalar> {
    kind: OptKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    vmax: Vec<Array2<F>>,
    t: u64,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptKind, shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Array2<F>> = shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros.clone(),
            vmax: if kind == OptKind::Amsgrad { zeros } else { Vec::new() },
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// AMSGrad's running max of the raw second moment (empty for Adam).
    pub fn max_second_moment(&self, i: usize) -> Option<&Array2<F>> {
        self.vmax.get(i)
    }
}

impl<F: Scalar> Optimizer<F> {
    /// Element-wise update used by both variants.
    fn apply_update(
        kind: OptKind,
        p: &mut F,
        g: F,
        m: &mut F,
        v: &mut F,
        vmax: Option<&mut F>,
        b1: F,
        b2: F,
        bc1: F,
        bc2: F,
        lr: F,
        eps: F,
    ) {
        let one = F::one();
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let vh = match (kind, vmax) {
            (OptKind::Amsgrad, Some(vm)) => {
                if *v > *vm {
                    *vm = *v;
                }
                *vm / bc2
            }
            _ => *v / bc2,
        };
        let mh = *m / bc1;
        *p = *p - lr * mh / (vh.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<LossPoint>,
}

/// Training data source: a synthetic stream (fresh i.i.d. batch per step)
/// or a fixed set of records with random anchors.
pub enum DataSource {
    Synthetic(TaskSpec),
    Records(Vec<SeqRecord>),
}

/// One assembled training example.
struct Example {
    input: NucInput,
    class_targets: Vec<Option<usize>>,
    weights: Vec<f32>,
}

/// Caches for per-(length, anchor) mask/position/target structures.
struct LayoutCache {
    bang: HashMap<(usize, usize), (Rc<AttentionMask>, Rc<Vec<i64>>, Rc<TargetMap>)>,
    causal: HashMap<usize, (Rc<AttentionMask>, Rc<Vec<i64>>)>,
    full: HashMap<usize, (Rc<AttentionMask>, Rc<Vec<i64>>)>,
}

impl LayoutCache {
    fn new() -> Self {
        LayoutCache {
            bang: HashMap::new(),
            causal: HashMap::new(),
            full: HashMap::new(),
        }
    }

    fn bang_entry(
        &mut self,
        seq: &crate::seqcore::AnchoredSeq,
    ) -> (Rc<AttentionMask>, Rc<Vec<i64>>, Rc<TargetMap>) {
        let key = (seq.len(), seq.anchor_slot);
        self.bang
            .entry(key)
            .or_insert_with(|| {
                let mask = Rc::new(crate::maskgen::bang_mask(seq));
                let pos = position_indices(seq);
                (mask, Rc::new(pos.rope_idx), Rc::new(target_map(seq)))
            })
            .clone()
    }

    fn causal_entry(&mut self, l: usize) -> (Rc<AttentionMask>, Rc<Vec<i64>>) {
        self.causal
            .entry(l)
            .or_insert_with(|| {
                (Rc::new(causal_mask(l)), Rc::new((0..l as i64).collect()))
            })
            .clone()
    }

    fn full_entry(&mut self, l: usize) -> (Rc<AttentionMask>, Rc<Vec<i64>>) {
        self.full
            .entry(l)
            .or_insert_with(|| {
                (Rc::new(full_mask(l, &[])), Rc::new((0..l as i64).collect()))
            })
            .clone()
    }
}

/// Loss weight per predictor position: targets within `window` residues of
/// the anchor pair are down-weighted to `anchor_weight`.
fn bang_weights(
    seq: &crate::seqcore::AnchoredSeq,
    tm: &TargetMap,
    anchor_weight: f64,
    window: usize,
) -> Vec<f32> {
    let a = seq.anchor_slot;
    tm.targets
        .iter()
        .map(|t| match t {
            None => 1.0f32,
            Some(pos) => {
                let tok = seq.tokens[*pos];
                if tok >= 4 {
                    return 1.0; // eos targets keep full weight
                }
                let near = if *pos > a + 1 {
                    *pos - (a + 2) < window
                } else if *pos < a {
                    a - *pos <= window
                } else {
                    false
                };
                if near {
                    anchor_weight as f32
                } else {
                    1.0
                }
            }
        })
        .collect()
}

fn build_bang_example(
    tokens: &[u32],
    anchor_after: usize,
    kind: NucKind,
    cache: &mut LayoutCache,
    anchor_weight: f64,
    window: usize,
) -> Result<Example, TrainError> {
    let seq = insert_anchors(tokens, Some(anchor_after), kind)?.with_terminal_eos();
    let (mask, rope, tm) = cache.bang_entry(&seq);
    let class_targets = resolve_targets(&seq.tokens, &tm);
    let weights = if anchor_weight < 1.0 {
        bang_weights(&seq, &tm, anchor_weight, window)
    } else {
        vec![1.0; seq.len()]
    };
    Ok(Example {
        input: NucInput {
            tokens: seq.tokens,
            kind,
            mask,
            rope_idx: rope,
            cross_idx: None,
        },
        class_targets,
        weights,
    })
}

fn build_ar_example(tokens: &[u32], kind: NucKind, cache: &mut LayoutCache) -> Example {
    let mut seq = Vec::with_capacity(tokens.len() + 2);
    seq.push(TOK_SOS);
    seq.extend_from_slice(tokens);
    seq.push(TOK_EOS);
    let l = seq.len();
    let (mask, rope) = cache.causal_entry(l);
    let class_targets: Vec<Option<usize>> = (0..l)
        .map(|p| (p + 1 < l).then(|| seq[p + 1] as usize))
        .collect();
    Example {
        input: NucInput { tokens: seq, kind, mask, rope_idx: rope, cross_idx: None },
        class_targets,
        weights: vec![1.0; l],
    }
}

/// Masked-demasking example; `anc_after` plants a never-masked anchor token
/// after the given content index (the IAnG objective).
fn build_iterative_example(
    tokens: &[u32],
    kind: NucKind,
    mask_rate: f64,
    anc_after: Option<usize>,
    cache: &mut LayoutCache,
    rng: &mut impl Rng,
) -> Example {
    let mut inner: Vec<u32> = tokens.to_vec();
    if let Some(after) = anc_after {
        inner.insert(after + 1, TOK_ANC);
    }
    let mut seq = Vec::with_capacity(inner.len() + 2);
    seq.push(TOK_SOS);
    seq.extend_from_slice(&inner);
    seq.push(TOK_EOS);
    let l = seq.len();
    let mut class_targets: Vec<Option<usize>> = vec![None; l];
    let mut masked_any = false;
    for p in 1..l - 1 {
        if seq[p] == TOK_ANC {
            continue;
        }
        if rng.random::<f64>() < mask_rate {
            class_targets[p] = Some(seq[p] as usize);
            seq[p] = TOK_MASK;
            masked_any = true;
        }
    }
    if !masked_any {
        // degenerate draw: mask one random content position
        let candidates: Vec<usize> = (1..l - 1).filter(|&p| seq[p] != TOK_ANC).collect();
        let p = candidates[rng.random_range(0..candidates.len())];
        class_targets[p] = Some(seq[p] as usize);
        seq[p] = TOK_MASK;
    }
    let (mask, rope) = cache.full_entry(l);
    Example {
        input: NucInput { tokens: seq, kind, mask, rope_idx: rope, cross_idx: None },
        class_targets,
        weights: vec![1.0; l],
    }
}

fn required_vocab(objective: Objective) -> u32 {
    match objective {
        Objective::Bang => TOK_EOS.max(crate::seqcore::TOK_ANCR),
        Objective::Autoregressive => TOK_SOS,
        Objective::IterativeMask => TOK_MASK,
        Objective::Iang => TOK_ANC,
    }
}

/// Train a model from scratch. Deterministic per seed; emits periodic loss
/// points through `on_log`.
pub fn train_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    source: &DataSource,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.nuc_vocab <= required_vocab(cfg.objective) as usize {
        return Err(TrainError::BadConfig(format!(
            "objective {} needs vocab > {}",
            cfg.objective,
            required_vocab(cfg.objective)
        )));
    }
    if model_cfg.use_cross {
        return Err(TrainError::BadConfig(
            "protein-conditioned training is not wired to a data source here; train the nucleotide module".into(),
        ));
    }
    let records: Option<Vec<(Vec<u32>, NucKind)>> = match source {
        DataSource::Synthetic(task) => {
            task.validate()?;
            None
        }
        DataSource::Records(recs) => {
            if recs.is_empty() {
                return Err(TrainError::BadConfig("no records".into()));
            }
            let vocab = Vocab::nucleotide();
            let mut toks = Vec::with_capacity(recs.len());
            for r in recs {
                let kind = match r.kind {
                    SeqKind::Rna => NucKind::Rna,
                    SeqKind::Dna => NucKind::Dna,
                    SeqKind::Protein => {
                        return Err(TrainError::BadConfig(format!(
                            "record '{}' is protein, expected nucleotide",
                            r.id
                        )))
                    }
                };
                let ids = tokenize(r, &vocab)?;
                if ids.is_empty() {
                    return Err(TrainError::BadConfig(format!("record '{}' is empty", r.id)));
                }
                toks.push((ids, kind));
            }
            Some(toks)
        }
    };

    let mut model: Model<f32> = Model::new(model_cfg.clone(), cfg.seed)?;
    let shapes: Vec<(usize, usize)> = model.params.iter().map(|(_, v)| v.dim()).collect();
    let mut opt: Optimizer<f32> = Optimizer::new(cfg.optimizer, &shapes);
    let mut data_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut cache = LayoutCache::new();
    let vocab = Vocab::nucleotide();
    let mut loss_log = Vec::new();

    for step in 1..=cfg.steps {
        let mut examples = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (tokens, anchor_after, kind) = match (&records, source) {
                (None, DataSource::Synthetic(task)) => {
                    let (s, anchor) = synth_sample(task, &mut data_rng)?;
                    let rec = SeqRecord::new("synth", s, SeqKind::Rna);
                    (tokenize(&rec, &vocab)?, anchor, NucKind::Rna)
                }
                (Some(toks), _) => {
                    let (ids, kind) = &toks[data_rng.random_range(0..toks.len())];
                    let anchor = data_rng.random_range(0..ids.len());
                    (ids.clone(), anchor, *kind)
                }
                _ => unreachable!(),
            };
            let ex = match cfg.objective {
                Objective::Bang => build_bang_example(
                    &tokens,
                    anchor_after,
                    kind,
                    &mut cache,
                    cfg.anchor_loss_weight,
                    cfg.anchor_loss_window,
                )?,
                Objective::Autoregressive => build_ar_example(&tokens, kind, &mut cache),
                Objective::IterativeMask => build_iterative_example(
                    &tokens,
                    kind,
                    cfg.mask_rate,
                    None,
                    &mut cache,
                    &mut data_rng,
                ),
                Objective::Iang => build_iterative_example(
                    &tokens,
                    kind,
                    cfg.mask_rate,
                    Some(anchor_after),
                    &mut cache,
                    &mut data_rng,
                ),
            };
            examples.push(ex);
        }

        let mut tape: Tape<f32> = Tape::new();
        let bound = model.bind(&mut tape);
        let inputs: Vec<NucInput> = examples.iter().map(|e| e.input.clone()).collect();
        let out = model.forward_nuc_batch(&mut tape, &bound, &inputs, None)?;
        let mut targets: Vec<Option<usize>> = Vec::new();
        let mut weights: Vec<f32> = Vec::new();
        for e in &examples {
            targets.extend_from_slice(&e.class_targets);
            weights.extend_from_slice(&e.weights);
        }
        let ce = tape.cross_entropy(out.all, Rc::new(targets), Rc::new(weights));
        let loss_val = tape.value(ce)[(0, 0)] as f64;
        if !loss_val.is_finite() {
            return Err(TrainError::DivergedLoss(step));
        }
        let grads = tape.backward(ce);
        let grad_arrays: Vec<Array2<f32>> = bound
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(shapes[i]))
            })
            .collect();
        let lr = lr_at(step, cfg);
        opt.step_params(&mut model.params, &grad_arrays, lr)?;

        if step % cfg.log_every == 0 || step == cfg.steps || step == 1 {
            let point = LossPoint { step, lr, loss: loss_val };
            on_log(&point);
            loss_log.push(point);
        }
    }

    let checkpoint = Checkpoint::new(
        model_cfg.clone(),
        cfg.objective,
        cfg.steps,
        cfg.seed,
        model.params,
    );
    Ok(TrainRun { checkpoint, loss_log })
}

/// Train on a synthetic task.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    task: &TaskSpec,
) -> Result<TrainRun, TrainError> {
    train_with(model_cfg, cfg, &DataSource::Synthetic(task.clone()), |_| {})
}

impl<F: Scalar> Optimizer<F> {
    /// Update every parameter in schema order.
    pub fn step_params(
        &mut self,
        params: &mut crate::model::Params<F>,
        grads: &[Array2<F>],
        lr: f64,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lrf = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        for i in 0..params.len() {
            if grads[i].iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient(self.t));
            }
            let p = params.value_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if self.kind == OptKind::Amsgrad {
                let vmax = &mut self.vmax[i];
                for (((pe, ge), (me, ve)), vme) in p
                    .iter_mut()
                    .zip(grads[i].iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .zip(vmax.iter_mut())
                {
                    Self::apply_update(
                        OptKind::Amsgrad,
                        pe,
                        *ge,
                        me,
                        ve,
                        Some(vme),
                        b1,
                        b2,
                        bc1,
                        bc2,
                        lrf,
                        eps,
                    );
                }
            } else {
                for ((pe, ge), (me, ve)) in p
                    .iter_mut()
                    .zip(grads[i].iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    Self::apply_update(
                        OptKind::Adam,
                        pe,
                        *ge,
                        me,
                        ve,
                        None,
                        b1,
                        b2,
                        bc1,
                        bc2,
                        lrf,
                        eps,
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::{SeqKind, SeqRecord};

    #[test]
    fn synth_singlebind_always_contains_motif() {
        let spec = TaskSpec::new(TaskKind::SingleBind, LengthLaw::Fixed(50));
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (s, anchor) = synth_sample(&spec, &mut rng).unwrap();
            assert_eq!(s.len(), 50);
            assert!(s.contains("UGACUC"), "missing motif in {s}");
            // the anchor sits on the motif center: stripping 2 left and 3
            // right of it must reproduce the motif
            let m = &s[anchor - 2..anchor + 4];
            assert_eq!(m, "UGACUC");
        }
    }

    #[test]
    fn synth_doublebind_balance() {
        let spec = TaskSpec::new(TaskKind::DoubleBind, LengthLaw::Fixed(50));
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 10_000;
        let mut first = 0usize;
        for _ in 0..n {
            let (s, _) = synth_sample(&spec, &mut rng).unwrap();
            let has1 = s.contains(DEFAULT_MOTIF_1);
            let has2 = s.contains(DEFAULT_MOTIF_2);
            assert!(has1 || has2);
            if has1 && !has2 {
                first += 1;
            }
        }
        let frac = first as f64 / n as f64;
        // planting is 50/50; random context occasionally adds the other
        // motif, which only removes counts from `first`
        assert!((frac - 0.5).abs() < 0.025, "first-motif fraction {frac}");
    }

    #[test]
    fn synth_motif_fills_whole_sequence_when_forced() {
        let mut spec = TaskSpec::new(TaskKind::SingleBind, LengthLaw::Fixed(6));
        spec.motifs = vec!["UGACUC".to_string()];
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (s, anchor) = synth_sample(&spec, &mut rng).unwrap();
        assert_eq!(s, "UGACUC");
        assert_eq!(anchor, 2);
    }

    #[test]
    fn synth_dualbindmix_layout() {
        let spec = TaskSpec::new(TaskKind::DualBindMix, LengthLaw::Fixed(50));
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (s, _) = synth_sample(&spec, &mut rng).unwrap();
            // some occurrence of motif 1 must be followed by motif 2 after
            // exactly 3 tokens (random context can add spurious copies)
            let planted = (0..=s.len() - 15).any(|p| {
                s[p..p + 6] == *DEFAULT_MOTIF_1 && s[p + 9..p + 15] == *DEFAULT_MOTIF_2
            });
            assert!(planted, "planted pair with separation 3 missing in {s}");
        }
    }

    #[test]
    fn synth_motif_too_large_is_error() {
        let mut spec = TaskSpec::new(TaskKind::SingleBind, LengthLaw::Fixed(4));
        spec.motifs = vec!["UGACUC".to_string()];
        assert!(matches!(spec.validate(), Err(TrainError::MotifDoesNotFit(_))));
    }

    #[test]
    fn lr_schedule_values() {
        let mut cfg = TrainConfig::toy_benchmark(Objective::Bang, 0);
        cfg.lr0 = 1e-4;
        cfg.warmup_steps = 1000;
        cfg.decay_gamma = 0.99;
        cfg.decay_period = 1000;
        assert!((lr_at(500, &cfg) - 5e-5).abs() < 1e-12);
        assert!((lr_at(1000, &cfg) - 1e-4).abs() < 1e-12);
        assert!((lr_at(3000, &cfg) - 1e-4 * 0.99f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        let mut params = crate::model::Params::<f64>::init(&ModelConfig::toy(), 0);
        // overwrite a single known tensor and step only it through a tiny
        // optimizer instance
        let shapes = [(1usize, 1usize)];
        let mut opt: Optimizer<f64> = Optimizer::new(OptKind::Adam, &shapes);
        let mut p = Array2::from_elem((1, 1), 0.5f64);
        let g = Array2::from_elem((1, 1), 1.0f64);
        // drive apply_update directly
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let b1 = 0.9;
        let b2 = 0.999;
        let bc1 = 1.0 - 0.9f64;
        let bc2 = 1.0 - 0.999f64;
        let lr = 1e-3;
        let eps = 1e-8;
        let mut pe = p[(0, 0)];
        Optimizer::<f64>::apply_update(
            OptKind::Adam, &mut pe, g[(0, 0)], &mut m, &mut v, None,
            b1, b2, bc1, bc2, lr, eps,
        );
        // bias-corrected first step: update ≈ -lr * 1 / (sqrt(1) + eps)
        let expect = 0.5 - lr * 1.0 / (1.0f64.sqrt() + eps);
        assert!((pe - expect).abs() < 1e-15, "got {pe}, want {expect}");
        let _ = (&mut opt, &mut p, &mut params);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let cfg = ModelConfig::toy();
        let mut params = crate::model::Params::<f32>::init(&cfg, 5);
        let before: Vec<Array2<f32>> = params.iter().map(|(_, v)| v.clone()).collect();
        let shapes: Vec<(usize, usize)> = params.iter().map(|(_, v)| v.dim()).collect();
        let mut opt: Optimizer<f32> = Optimizer::new(OptKind::Amsgrad, &shapes);
        let zeros: Vec<Array2<f32>> = shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        opt.step_params(&mut params, &zeros, 1e-3).unwrap();
        for ((_, after), before) in params.iter().zip(&before) {
            assert_eq!(after, before);
        }
    }

    #[test]
    fn amsgrad_max_moment_never_decreases() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let (mut p, mut m, mut v, mut vmax) = (0.5f64, 0.0, 0.0, 0.0);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut prev = 0.0f64;
        for step in 1..=200u32 {
            // alternating large and tiny gradients so the raw moment decays
            let scale = if step % 2 == 0 { 1.0 } else { 0.01 };
            let g = (rng.random::<f64>() - 0.5) * scale;
            Optimizer::<f64>::apply_update(
                OptKind::Amsgrad,
                &mut p,
                g,
                &mut m,
                &mut v,
                Some(&mut vmax),
                b1,
                b2,
                1.0 - b1.powi(step as i32),
                1.0 - b2.powi(step as i32),
                1e-3,
                eps,
            );
            assert!(vmax >= prev, "max second moment decreased");
            assert!(vmax >= v - 1e-18, "max must dominate the raw moment");
            prev = vmax;
        }
    }

    #[test]
    fn non_finite_gradient_is_error() {
        let cfg = ModelConfig::toy();
        let mut params = crate::model::Params::<f32>::init(&cfg, 5);
        let shapes: Vec<(usize, usize)> = params.iter().map(|(_, v)| v.dim()).collect();
        let mut opt: Optimizer<f32> = Optimizer::new(OptKind::Adam, &shapes);
        let mut grads: Vec<Array2<f32>> =
            shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        grads[0][(0, 0)] = f32::NAN;
        assert!(matches!(
            opt.step_params(&mut params, &grads, 1e-3),
            Err(TrainError::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn loss_uniform_logits_closed_form() {
        let logits = Array2::<f64>::zeros((1, 8));
        let l = loss(&logits, &[Some(2)], &[1.0]).unwrap();
        assert!((l - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_shape_mismatch() {
        let logits = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            loss(&logits, &[Some(0)], &[1.0, 1.0]),
            Err(TrainError::ShapeMismatch(_))
        ));
        assert!(matches!(
            loss(&logits, &[Some(9), None], &[1.0, 1.0]),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn padding_does_not_change_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let logits = Array2::<f64>::from_shape_fn((3, 6), |_| rng.random::<f64>());
        let padded = {
            let mut p = Array2::<f64>::zeros((5, 6));
            for r in 0..3 {
                for c in 0..6 {
                    p[(r, c)] = logits[(r, c)];
                }
            }
            p
        };
        let a = loss(&logits, &[Some(1), Some(2), Some(3)], &[1.0; 3]).unwrap();
        let b = loss(
            &padded,
            &[Some(1), Some(2), Some(3), None, None],
            &[1.0; 5],
        )
        .unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    fn tiny_cfg() -> (ModelConfig, TrainConfig, TaskSpec) {
        let model = ModelConfig::toy();
        let mut train = TrainConfig::toy_benchmark(Objective::Bang, 123);
        train.steps = 200;
        train.log_every = 50;
        let task = TaskSpec::new(TaskKind::SingleBind, LengthLaw::Fixed(20));
        (model, train, task)
    }

    #[test]
    fn smoke_run_reduces_loss_below_uniform() {
        let (model, train_cfg, task) = tiny_cfg();
        let run = train(&model, &train_cfg, &task).unwrap();
        let baseline = (model.nuc_vocab as f64).ln();
        let last = run.loss_log.last().unwrap().loss;
        assert!(
            last < baseline,
            "loss {last} not below uniform baseline {baseline}"
        );
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let (model, mut train_cfg, task) = tiny_cfg();
        train_cfg.steps = 30;
        let a = train(&model, &train_cfg, &task).unwrap();
        let b = train(&model, &train_cfg, &task).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn records_pretraining_path_runs() {
        let recs = vec![
            SeqRecord::new("r1", "ACGUACGUACGUACGUACGU", SeqKind::Rna),
            SeqRecord::new("r2", "GGGGCCCCAAAAUUUUACGU", SeqKind::Rna),
            SeqRecord::new("d1", "ACGTACGTACGTACGTACGT", SeqKind::Dna),
        ];
        let model = ModelConfig::toy();
        let mut cfg = TrainConfig::toy_benchmark(Objective::Bang, 5);
        cfg.steps = 20;
        cfg.anchor_loss_weight = 0.01;
        let run = train_with(&model, &cfg, &DataSource::Records(recs), |_| {}).unwrap();
        assert!(run.loss_log.last().unwrap().loss.is_finite());
        assert_eq!(run.checkpoint.step, 20);
    }
}
