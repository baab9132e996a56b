//! The neural architecture: embedders, RoPE self-attention, anchored
//! sinusoidal cross-attention, geometric attention, feed-forward blocks,
//! and the forward passes producing logits.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;
use std::rc::Rc;
use thiserror::Error;

use crate::frame::Frame;
use crate::maskgen::{bang_mask, full_mask, position_indices, AttentionMask};
use crate::seqcore::{AnchoredSeq, NucKind};
use crate::tensor::{Scalar, Tape, TensorId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid token id {0}")]
    InvalidTokenId(u32),
    #[error("model requires protein conditioning but none was provided")]
    MissingConditioning,
    #[error("protein conditioning input is empty")]
    EmptyConditioning,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint parameter set does not match the config schema: {0}")]
    SchemaMismatch(String),
    #[error("bad config: {0}")]
    BadConfig(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Latent dimension of the residual stream.
    pub c_s: usize,
    /// Per-head dimension (set independently of `c_s`).
    pub c_h: usize,
    pub heads: usize,
    /// Feed-forward hidden dim is `ff_scale * c_s`.
    pub ff_scale: usize,
    pub n_protein_blocks: usize,
    pub n_nucleotide_blocks: usize,
    pub nuc_vocab: usize,
    pub prot_vocab: usize,
    pub use_cross: bool,
    pub use_geometric: bool,
    pub n_query_points: usize,
    pub n_value_points: usize,
}

impl ModelConfig {
    /// Small unconditioned configuration used for the synthetic benchmark
    /// (two blocks, two heads, feed-forward hidden width 64, ~17k params).
    pub fn toy() -> Self {
        ModelConfig {
            c_s: 32,
            c_h: 16,
            heads: 2,
            ff_scale: 2,
            n_protein_blocks: 0,
            n_nucleotide_blocks: 2,
            nuc_vocab: 11,
            prot_vocab: 21,
            use_cross: false,
            use_geometric: false,
            n_query_points: 4,
            n_value_points: 8,
        }
    }

    /// Full conditioned configuration (~14.5M params).
    pub fn full() -> Self {
        ModelConfig {
            c_s: 128,
            c_h: 64,
            heads: 12,
            ff_scale: 2,
            n_protein_blocks: 10,
            n_nucleotide_blocks: 10,
            nuc_vocab: 11,
            prot_vocab: 21,
            use_cross: true,
            use_geometric: true,
            n_query_points: 4,
            n_value_points: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.c_s == 0 || self.heads == 0 || self.c_h == 0 {
            return Err(ModelError::BadConfig("c_s, c_h, heads must be positive".into()));
        }
        if self.c_h % 2 != 0 {
            return Err(ModelError::BadConfig("c_h must be even for rotary pairs".into()));
        }
        if self.use_cross && self.n_protein_blocks == 0 {
            return Err(ModelError::BadConfig(
                "cross-attention requires protein blocks".into(),
            ));
        }
        Ok(())
    }

    /// Named tensor shapes, in canonical order. Single source of truth for
    /// initialization, parameter counting, and checkpoint validation.
    pub fn schema(&self) -> Vec<(String, (usize, usize))> {
        let mut s: Vec<(String, (usize, usize))> = Vec::new();
        let hc = self.heads * self.c_h;
        let ff = self.ff_scale * self.c_s;
        let attn = |s: &mut Vec<(String, (usize, usize))>, prefix: &str, kv_in: usize| {
            s.push((format!("{prefix}.norm"), (1, self.c_s)));
            s.push((format!("{prefix}.wq"), (self.c_s, hc)));
            s.push((format!("{prefix}.bq"), (1, hc)));
            s.push((format!("{prefix}.wk"), (kv_in, hc)));
            s.push((format!("{prefix}.bk"), (1, hc)));
            s.push((format!("{prefix}.wv"), (kv_in, hc)));
            s.push((format!("{prefix}.bv"), (1, hc)));
            s.push((format!("{prefix}.wo"), (hc, self.c_s)));
            s.push((format!("{prefix}.bo"), (1, self.c_s)));
        };
        let ffb = |s: &mut Vec<(String, (usize, usize))>, prefix: &str| {
            s.push((format!("{prefix}.norm"), (1, self.c_s)));
            s.push((format!("{prefix}.w1"), (self.c_s, ff)));
            s.push((format!("{prefix}.b1"), (1, ff)));
            s.push((format!("{prefix}.w2"), (ff, self.c_s)));
            s.push((format!("{prefix}.b2"), (1, self.c_s)));
        };

        s.push(("nuc.embed.tok".into(), (self.nuc_vocab, self.c_s)));
        s.push(("nuc.embed.kind".into(), (2, self.c_s)));
        for i in 0..self.n_nucleotide_blocks {
            attn(&mut s, &format!("nuc.block{i}.attn"), self.c_s);
            if self.use_cross {
                attn(&mut s, &format!("nuc.block{i}.cross"), self.c_s);
            }
            ffb(&mut s, &format!("nuc.block{i}.ff"));
        }
        s.push(("nuc.final.norm".into(), (1, self.c_s)));
        s.push(("nuc.out.w".into(), (self.c_s, self.nuc_vocab)));
        s.push(("nuc.out.b".into(), (1, self.nuc_vocab)));

        if self.use_cross {
            s.push(("prot.embed.tok".into(), (self.prot_vocab, self.c_s)));
            for i in 0..self.n_protein_blocks {
                attn(&mut s, &format!("prot.block{i}.attn"), self.c_s);
                if self.use_geometric {
                    let p = format!("prot.block{i}.geo");
                    s.push((format!("{p}.norm"), (1, self.c_s)));
                    s.push((format!("{p}.wq"), (self.c_s, self.heads * self.n_query_points * 3)));
                    s.push((format!("{p}.wk"), (self.c_s, self.heads * self.n_query_points * 3)));
                    s.push((format!("{p}.wv"), (self.c_s, self.heads * self.n_value_points * 3)));
                    s.push((format!("{p}.gamma"), (1, self.heads)));
                    s.push((format!("{p}.wo"), (self.heads * 4 * self.n_value_points, self.c_s)));
                    s.push((format!("{p}.bo"), (1, self.c_s)));
                }
                ffb(&mut s, &format!("prot.block{i}.ff"));
            }
            s.push(("prot.final.norm".into(), (1, self.c_s)));
        }
        s
    }

    /// Exact count of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.schema().iter().map(|(_, (r, c))| r * c).sum()
    }

    pub fn to_kv(&self) -> String {
        format!(
            "c_s={}\nc_h={}\nheads={}\nff_scale={}\nn_protein_blocks={}\nn_nucleotide_blocks={}\nnuc_vocab={}\nprot_vocab={}\nuse_cross={}\nuse_geometric={}\nn_query_points={}\nn_value_points={}\n",
            self.c_s, self.c_h, self.heads, self.ff_scale, self.n_protein_blocks,
            self.n_nucleotide_blocks, self.nuc_vocab, self.prot_vocab, self.use_cross,
            self.use_geometric, self.n_query_points, self.n_value_points
        )
    }

    pub fn from_kv(map: &HashMap<String, String>) -> Result<Self, ModelError> {
        let get = |k: &str| -> Result<&String, ModelError> {
            map.get(k)
                .ok_or_else(|| ModelError::BadConfig(format!("missing config key {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::BadConfig(format!("bad value for {k}")))
        };
        let flag = |k: &str| -> Result<bool, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::BadConfig(format!("bad value for {k}")))
        };
        Ok(ModelConfig {
            c_s: num("c_s")?,
            c_h: num("c_h")?,
            heads: num("heads")?,
            ff_scale: num("ff_scale")?,
            n_protein_blocks: num("n_protein_blocks")?,
            n_nucleotide_blocks: num("n_nucleotide_blocks")?,
            nuc_vocab: num("nuc_vocab")?,
            prot_vocab: num("prot_vocab")?,
            use_cross: flag("use_cross")?,
            use_geometric: flag("use_geometric")?,
            n_query_points: num("n_query_points")?,
            n_value_points: num("n_value_points")?,
        })
    }
}

/// Named parameter tensors in schema order.
#[derive(Debug, Clone)]
pub struct Params<F: Scalar> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Params<F> {
    /// Initialize from the schema: weights and embeddings from a centered
    /// uniform law scaled by 1/sqrt(fan_in), biases zero, norm gains one,
    /// geometric gamma at softplus⁻¹(1).
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, (r, c)) in config.schema() {
            let arr = if name.ends_with(".norm") {
                Array2::ones((r, c))
            } else if name.ends_with(".gamma") {
                Array2::from_elem((r, c), F::from_f64((std::f64::consts::E - 1.0).ln()))
            } else if is_bias_name(&name) {
                Array2::zeros((r, c))
            } else {
                let fan_in = if name.contains(".embed.") { c } else { r };
                let bound = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_fn((r, c), |_| {
                    F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound)
                })
            };
            names.push(name);
            values.push(arr);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Params { names, values, index }
    }

    /// Build from named tensors, validating against the schema exactly.
    pub fn from_named(
        config: &ModelConfig,
        mut tensors: HashMap<String, Array2<F>>,
    ) -> Result<Self, ModelError> {
        let schema = config.schema();
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape) in &schema {
            let arr = tensors
                .remove(name)
                .ok_or_else(|| ModelError::SchemaMismatch(format!("missing tensor {name}")))?;
            if arr.dim() != *shape {
                return Err(ModelError::SchemaMismatch(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    arr.dim(),
                    shape
                )));
            }
            names.push(name.clone());
            values.push(arr);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::SchemaMismatch(format!("unexpected tensor {extra}")));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Params { names, values, index })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn value(&self, i: usize) -> &Array2<F> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<F> {
        &mut self.values[i]
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64(x.as_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

fn is_bias_name(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or("");
    matches!(last, "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "b")
}

/// Parameter leaves registered on a tape, in schema order.
pub struct BoundParams {
    pub ids: Vec<TensorId>,
}

/// Sinusoidal positional embedding for signed integer indices;
/// `PE[i, 2t] = sin(idx_i · ω_t)`, `PE[i, 2t+1] = cos(idx_i · ω_t)`.
pub fn sinusoidal_embedding<F: Scalar>(idx: &[i64], dim: usize) -> Array2<F> {
    let mut pe = Array2::zeros((idx.len(), dim));
    for (i, &m) in idx.iter().enumerate() {
        for t in 0..dim / 2 {
            let omega = 10000f64.powf(-(2.0 * t as f64) / dim as f64);
            let ang = m as f64 * omega;
            pe[(i, 2 * t)] = F::from_f64(ang.sin());
            pe[(i, 2 * t + 1)] = F::from_f64(ang.cos());
        }
    }
    pe
}

/// One nucleotide-side sample in a forward batch.
#[derive(Clone)]
pub struct NucInput {
    pub tokens: Vec<u32>,
    pub kind: NucKind,
    pub mask: Rc<AttentionMask>,
    pub rope_idx: Rc<Vec<i64>>,
    /// Signed anchor-relative indices; required when the model uses
    /// cross-attention.
    pub cross_idx: Option<Vec<i64>>,
}

/// Batched forward output: logits for all samples stacked row-wise, plus
/// each sample's row range.
pub struct BatchLogits {
    pub all: TensorId,
    pub ranges: Vec<(usize, usize)>,
}

impl BatchLogits {
    /// Slice out one sample's logits.
    pub fn sample<F: Scalar>(&self, tape: &mut Tape<F>, i: usize) -> TensorId {
        let (r0, r1) = self.ranges[i];
        let cols = tape.value(self.all).ncols();
        if self.ranges.len() == 1 {
            self.all
        } else {
            tape.slice(self.all, r0, r1, 0, cols)
        }
    }
}

pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Params<F>) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Model { config, params })
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        let ids = self
            .params
            .values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect();
        BoundParams { ids }
    }

    fn p(&self, bound: &BoundParams, name: &str) -> TensorId {
        bound.ids[self.params.idx(name)]
    }

    /// Token + type embedding for nucleotide input.
    pub fn embed_nucleotide(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tokens: &[u32],
        kind: NucKind,
    ) -> Result<TensorId, ModelError> {
        for &t in tokens {
            if t as usize >= self.config.nuc_vocab {
                return Err(ModelError::InvalidTokenId(t));
            }
        }
        let tok = self.p(bound, "nuc.embed.tok");
        let knd = self.p(bound, "nuc.embed.kind");
        let e = tape.embed(tok, tokens.iter().map(|&t| t as usize).collect());
        let k = tape.embed(knd, vec![kind.index(); tokens.len()]);
        Ok(tape.add(e, k))
    }

    /// Full nucleotide-module forward over a batch of samples whose rows are
    /// concatenated for the linear layers; attention runs per sample under
    /// each sample's own mask. Returns per-sample logits `[L_s × V]`.
    pub fn forward_nuc_batch(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        inputs: &[NucInput],
        prot_repr: Option<&[TensorId]>,
    ) -> Result<BatchLogits, ModelError> {
        if self.config.use_cross {
            let reprs = prot_repr.ok_or(ModelError::MissingConditioning)?;
            if reprs.len() != inputs.len() {
                return Err(ModelError::ShapeMismatch(
                    "one protein representation per sample required".into(),
                ));
            }
        }
        let mut ranges = Vec::with_capacity(inputs.len());
        let mut all_tokens: Vec<u32> = Vec::new();
        let mut all_kinds: Vec<usize> = Vec::new();
        let mut rope_cat: Vec<i64> = Vec::new();
        let mut offset = 0usize;
        for inp in inputs {
            let l = inp.tokens.len();
            if inp.mask.len() != l || inp.rope_idx.len() != l {
                return Err(ModelError::ShapeMismatch(
                    "mask/rope length must match tokens".into(),
                ));
            }
            for &t in &inp.tokens {
                if t as usize >= self.config.nuc_vocab {
                    return Err(ModelError::InvalidTokenId(t));
                }
            }
            if self.config.use_cross && inp.cross_idx.as_ref().map_or(true, |c| c.len() != l) {
                return Err(ModelError::ShapeMismatch(
                    "cross indices must match tokens".into(),
                ));
            }
            ranges.push((offset, offset + l));
            all_tokens.extend_from_slice(&inp.tokens);
            all_kinds.extend(std::iter::repeat(inp.kind.index()).take(l));
            rope_cat.extend_from_slice(&inp.rope_idx);
            offset += l;
        }
        let rope_cat = Rc::new(rope_cat);
        let masks: Vec<Rc<AttentionMask>> = inputs.iter().map(|i| i.mask.clone()).collect();

        let tok = self.p(bound, "nuc.embed.tok");
        let knd = self.p(bound, "nuc.embed.kind");
        let e = tape.embed(tok, all_tokens.iter().map(|&t| t as usize).collect());
        let k = tape.embed(knd, all_kinds);
        let mut x = tape.add(e, k);

        for i in 0..self.config.n_nucleotide_blocks {
            let attn = self.self_attention(
                tape,
                bound,
                &format!("nuc.block{i}.attn"),
                x,
                &ranges,
                &masks,
                rope_cat.clone(),
            );
            x = tape.add(x, attn);
            if self.config.use_cross {
                let cross = self.cross_attention(
                    tape,
                    bound,
                    &format!("nuc.block{i}.cross"),
                    x,
                    &ranges,
                    inputs,
                    prot_repr.unwrap(),
                )?;
                x = tape.add(x, cross);
            }
            let ff = self.feed_forward(tape, bound, &format!("nuc.block{i}.ff"), x);
            x = tape.add(x, ff);
        }

        let gain = self.p(bound, "nuc.final.norm");
        let xn = tape.rms_norm(x, gain);
        let w = self.p(bound, "nuc.out.w");
        let b = self.p(bound, "nuc.out.b");
        let proj = tape.matmul(xn, w);
        let logits = tape.add_bias(proj, b);
        Ok(BatchLogits { all: logits, ranges })
    }

    /// Protein-module forward (self-attention, optional geometric attention,
    /// feed-forward per block), returning the normalized representation.
    pub fn protein_repr(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        tokens: &[u32],
        frames: &[Frame<F>],
    ) -> Result<TensorId, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyConditioning);
        }
        if self.config.use_geometric && frames.len() != tokens.len() {
            return Err(ModelError::ShapeMismatch(
                "one frame per protein residue required".into(),
            ));
        }
        for &t in tokens {
            if t as usize >= self.config.prot_vocab {
                return Err(ModelError::InvalidTokenId(t));
            }
        }
        let r = tokens.len();
        let tok = self.p(bound, "prot.embed.tok");
        let mut x = tape.embed(tok, tokens.iter().map(|&t| t as usize).collect());
        let mask = Rc::new(full_mask(r, &[]));
        let rope: Rc<Vec<i64>> = Rc::new((0..r as i64).collect());
        let ranges = [(0usize, r)];
        let masks = [mask];
        let frames: Rc<Vec<Frame<F>>> = Rc::new(frames.to_vec());
        for i in 0..self.config.n_protein_blocks {
            let attn = self.self_attention(
                tape,
                bound,
                &format!("prot.block{i}.attn"),
                x,
                &ranges,
                &masks,
                rope.clone(),
            );
            x = tape.add(x, attn);
            if self.config.use_geometric {
                let geo = self.geometric_attention(
                    tape,
                    bound,
                    &format!("prot.block{i}.geo"),
                    x,
                    frames.clone(),
                );
                x = tape.add(x, geo);
            }
            let ff = self.feed_forward(tape, bound, &format!("prot.block{i}.ff"), x);
            x = tape.add(x, ff);
        }
        let gain = self.p(bound, "prot.final.norm");
        Ok(tape.rms_norm(x, gain))
    }

    /// Logits for an anchored sequence; mask and position indices are
    /// derived from the sequence itself.
    pub fn forward_anchored(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        seq: &AnchoredSeq,
        protein: Option<(&[u32], &[Frame<F>])>,
    ) -> Result<TensorId, ModelError> {
        let pos = position_indices(seq);
        let input = NucInput {
            tokens: seq.tokens.clone(),
            kind: seq.kind_flag,
            mask: Rc::new(bang_mask(seq)),
            rope_idx: Rc::new(pos.rope_idx),
            cross_idx: self.config.use_cross.then_some(pos.cross_idx),
        };
        let prot_ids = match (self.config.use_cross, protein) {
            (false, _) => None,
            (true, None) => return Err(ModelError::MissingConditioning),
            (true, Some((toks, frames))) => {
                Some(vec![self.protein_repr(tape, bound, toks, frames)?])
            }
        };
        let out = self.forward_nuc_batch(tape, bound, &[input], prot_ids.as_deref())?;
        Ok(out.all)
    }

    fn self_attention(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        prefix: &str,
        x: TensorId,
        ranges: &[(usize, usize)],
        masks: &[Rc<AttentionMask>],
        rope_idx: Rc<Vec<i64>>,
    ) -> TensorId {
        let ch = self.config.c_h;
        let scale = F::from_f64(1.0 / (ch as f64).sqrt());
        let gain = self.p(bound, &format!("{prefix}.norm"));
        let xn = tape.rms_norm(x, gain);
        let proj = |tape: &mut Tape<F>, w: &str, b: &str| {
            let w = self.p(bound, w);
            let b = self.p(bound, b);
            let m = tape.matmul(xn, w);
            tape.add_bias(m, b)
        };
        let q = proj(tape, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = proj(tape, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = proj(tape, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        // Queries and keys are RMS-normalized per head before rotation.
        let qn = tape.unit_rms(q, ch);
        let kn = tape.unit_rms(k, ch);
        let qr = tape.rope(qn, rope_idx.clone(), ch);
        let kr = tape.rope(kn, rope_idx, ch);

        let mut sample_outs = Vec::with_capacity(ranges.len());
        for (s, &(r0, r1)) in ranges.iter().enumerate() {
            let mut head_outs = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let c0 = h * ch;
                let qs = tape.slice(qr, r0, r1, c0, c0 + ch);
                let ks = tape.slice(kr, r0, r1, c0, c0 + ch);
                let vs = tape.slice(v, r0, r1, c0, c0 + ch);
                let ll = tape.matmul_nt(qs, ks);
                let ls = tape.scale(ll, scale);
                let a = tape.masked_softmax(ls, Some(masks[s].clone()));
                head_outs.push(tape.matmul(a, vs));
            }
            sample_outs.push(concat_cols_or_single(tape, head_outs));
        }
        let cat = concat_rows_or_single(tape, sample_outs);
        let wo = self.p(bound, &format!("{prefix}.wo"));
        let bo = self.p(bound, &format!("{prefix}.bo"));
        let o = tape.matmul(cat, wo);
        tape.add_bias(o, bo)
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attention(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        prefix: &str,
        x: TensorId,
        ranges: &[(usize, usize)],
        inputs: &[NucInput],
        prot_repr: &[TensorId],
    ) -> Result<TensorId, ModelError> {
        let ch = self.config.c_h;
        let scale = F::from_f64(1.0 / (ch as f64).sqrt());
        let gain = self.p(bound, &format!("{prefix}.norm"));
        let xn = tape.rms_norm(x, gain);
        // Sinusoidal anchored positions are added to the nucleotide latent
        // on the query side only; protein keys carry no positional term.
        let mut pe_cat: Vec<i64> = Vec::new();
        for inp in inputs {
            pe_cat.extend_from_slice(inp.cross_idx.as_ref().unwrap());
        }
        let pe = tape.leaf(sinusoidal_embedding(&pe_cat, self.config.c_s));
        let qin = tape.add(xn, pe);
        let wq = self.p(bound, &format!("{prefix}.wq"));
        let bq = self.p(bound, &format!("{prefix}.bq"));
        let qm = tape.matmul(qin, wq);
        let qb = tape.add_bias(qm, bq);
        let q = tape.unit_rms(qb, ch);

        let wk = self.p(bound, &format!("{prefix}.wk"));
        let bk = self.p(bound, &format!("{prefix}.bk"));
        let wv = self.p(bound, &format!("{prefix}.wv"));
        let bv = self.p(bound, &format!("{prefix}.bv"));

        let mut sample_outs = Vec::with_capacity(ranges.len());
        for (s, &(r0, r1)) in ranges.iter().enumerate() {
            let prot = prot_repr[s];
            if tape.value(prot).nrows() == 0 {
                return Err(ModelError::EmptyConditioning);
            }
            let km = tape.matmul(prot, wk);
            let kb = tape.add_bias(km, bk);
            let k = tape.unit_rms(kb, ch);
            let vm = tape.matmul(prot, wv);
            let vfull = tape.add_bias(vm, bv);
            let mut head_outs = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let c0 = h * ch;
                let qs = tape.slice(q, r0, r1, c0, c0 + ch);
                let ks = tape.slice(k, 0, tape.value(k).nrows(), c0, c0 + ch);
                let vs = tape.slice(vfull, 0, tape.value(vfull).nrows(), c0, c0 + ch);
                let ll = tape.matmul_nt(qs, ks);
                let ls = tape.scale(ll, scale);
                let a = tape.masked_softmax(ls, None);
                head_outs.push(tape.matmul(a, vs));
            }
            sample_outs.push(concat_cols_or_single(tape, head_outs));
        }
        let cat = concat_rows_or_single(tape, sample_outs);
        let wo = self.p(bound, &format!("{prefix}.wo"));
        let bo = self.p(bound, &format!("{prefix}.bo"));
        let o = tape.matmul(cat, wo);
        Ok(tape.add_bias(o, bo))
    }

    /// Geometric attention: softmax over squared distances between
    /// frame-transformed query/key points; values are mixed in the global
    /// frame and mapped back into each residue's local frame.
    fn geometric_attention(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        prefix: &str,
        x: TensorId,
        frames: Rc<Vec<Frame<F>>>,
    ) -> TensorId {
        let nq = self.config.n_query_points;
        let nv = self.config.n_value_points;
        let w = (2.0 / (9.0 * nq as f64)).sqrt();
        let gain = self.p(bound, &format!("{prefix}.norm"));
        let xn = tape.rms_norm(x, gain);
        let wqp = self.p(bound, &format!("{prefix}.wq"));
        let wkp = self.p(bound, &format!("{prefix}.wk"));
        let wvp = self.p(bound, &format!("{prefix}.wv"));
        let qp = tape.matmul(xn, wqp);
        let kp = tape.matmul(xn, wkp);
        let vp = tape.matmul(xn, wvp);
        let qg = tape.frame_apply(qp, frames.clone());
        let kg = tape.frame_apply(kp, frames.clone());
        let vg = tape.frame_apply(vp, frames.clone());
        let gamma = self.p(bound, &format!("{prefix}.gamma"));
        let gsp = tape.softplus(gamma);
        let r = frames.len();
        let mut head_outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q0 = h * nq * 3;
            let v0 = h * nv * 3;
            let qh = tape.slice(qg, 0, r, q0, q0 + nq * 3);
            let kh = tape.slice(kg, 0, r, q0, q0 + nq * 3);
            let vh = tape.slice(vg, 0, r, v0, v0 + nv * 3);
            let d = tape.pair_sq_dist(qh, kh);
            let gh = tape.slice(gsp, 0, 1, h, h + 1);
            let dg = tape.scale_by_scalar(d, gh);
            let logits = tape.scale(dg, F::from_f64(-w / 2.0));
            let a = tape.masked_softmax(logits, None);
            let mix = tape.matmul(a, vh);
            let local = tape.frame_apply_inv(mix, frames.clone());
            let norms = tape.row_group_norm(local, 3);
            head_outs.push(tape.concat_cols(vec![local, norms]));
        }
        let feats = concat_cols_or_single(tape, head_outs);
        let wo = self.p(bound, &format!("{prefix}.wo"));
        let bo = self.p(bound, &format!("{prefix}.bo"));
        let o = tape.matmul(feats, wo);
        tape.add_bias(o, bo)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        prefix: &str,
        x: TensorId,
    ) -> TensorId {
        let gain = self.p(bound, &format!("{prefix}.norm"));
        let xn = tape.rms_norm(x, gain);
        let w1 = self.p(bound, &format!("{prefix}.w1"));
        let b1 = self.p(bound, &format!("{prefix}.b1"));
        let w2 = self.p(bound, &format!("{prefix}.w2"));
        let b2 = self.p(bound, &format!("{prefix}.b2"));
        let h = tape.matmul(xn, w1);
        let hb = tape.add_bias(h, b1);
        let hg = tape.gelu(hb);
        let o = tape.matmul(hg, w2);
        tape.add_bias(o, b2)
    }
}

fn concat_cols_or_single<F: Scalar>(tape: &mut Tape<F>, parts: Vec<TensorId>) -> TensorId {
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(parts)
    }
}

fn concat_rows_or_single<F: Scalar>(tape: &mut Tape<F>, parts: Vec<TensorId>) -> TensorId {
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(parts)
    }
}
