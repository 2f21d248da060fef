//! The pyramid encoder-decoder.
//!
//! Encoder: point embeddings (+pos) -> level-1 transformer -> patch pooling
//! -> (+pos) level-2 transformer -> patch pooling -> (+pos) level-3
//! transformer. The level-3 [CLS] row is the trajectory representation.
//!
//! Decoder: a transformer over the top level, then for each finer level a
//! cross-attention whose queries are the encoder's states at that level,
//! a self-attention, and a transformer over the result plus the encoder
//! shortcut. No positional encoding is used in the decoder.

mod config;
pub mod layers;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, Pooling};
use layers::{add_positional, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerStack};

use crate::batch::{Batch, CONTEXT_DIM};
use crate::blur::PatchLengths;
use crate::error::Result;
use crate::numeric::{Graph, ParamId, ParamStore, ReduceMode, Tensor, Var};

/// Scores every patch slot: Linear -> LayerNorm -> ReLU -> Linear(d -> 1).
///
/// The final projection has no bias; a constant shift of all scores in a
/// patch cancels in the softmax.
#[derive(Debug, Clone)]
pub struct PoolScorer {
    pub fc1: Linear,
    pub ln: LayerNorm,
    pub fc2: Linear,
}

impl PoolScorer {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d, true, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            fc2: Linear::new(store, &format!("{name}.fc2"), d, 1, false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = self.ln.forward(g, h);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// One decoder step restoring a finer level.
#[derive(Debug, Clone)]
pub struct UpResolution {
    pub level: usize,
    pub cross: MultiHeadAttention,
    pub self_attn: MultiHeadAttention,
    pub stack: Option<TransformerStack>,
}

/// Padded patch tensor `[B * n_next, M, d]` and its slot validity.
pub struct PatchTensor {
    pub patches: Var,
    pub keep: Vec<bool>,
    pub max_patch: usize,
}

/// Encoder states of one level: `[B, n + 1, d]` with [CLS] at position 0.
#[derive(Clone)]
pub struct LevelState {
    pub level: usize,
    pub hidden: Var,
    pub mask: Vec<bool>,
    pub max_len: usize,
}

pub struct EncoderOutput {
    /// Per sequence level, finest first.
    pub levels: Vec<LevelState>,
    /// `[B, d]` trajectory representations.
    pub cls: Var,
}

pub struct ReconstructionOutput {
    /// `[B * n1, 6]`, rows beyond a trajectory's length are padding.
    pub spatial: Var,
    pub temporal: Var,
    pub loss: Var,
}

#[derive(Debug, Clone)]
pub struct BlueModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub spatial: Linear,
    pub time_linear: ParamId,
    pub time_periodic: ParamId,
    pub cls_token: ParamId,
    pub pad_embedding: ParamId,
    /// Encoder stacks indexed by level - 1.
    pub encoder: [Option<TransformerStack>; 3],
    /// Pooling scorers indexed by target level - 2.
    pub scorers: [Option<PoolScorer>; 2],
    pub decoder_top: Option<TransformerStack>,
    /// Decoder steps from the top level down to level 1.
    pub up: Vec<UpResolution>,
    pub head_spatial: Mlp,
    pub head_temporal: Mlp,
}

fn patch_slot_index(
    lengths: &[PatchLengths],
    prev_max: usize,
    next_max: usize,
    max_patch: usize,
) -> (Vec<Option<usize>>, Vec<bool>) {
    let batch = lengths.len();
    let mut idx = Vec::with_capacity(batch * next_max * max_patch);
    for (b, lens) in lengths.iter().enumerate() {
        let base = b * (prev_max + 1) + 1;
        let offsets = lens.offsets();
        for p in 0..next_max {
            for j in 0..max_patch {
                let slot = match lens.0.get(p) {
                    Some(&l) if j < l => Some(base + offsets[p] + j),
                    _ => None,
                };
                idx.push(slot);
            }
        }
    }
    let keep = idx.iter().map(Option::is_some).collect();
    (idx, keep)
}

impl BlueModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d;
        let (heads, ffn) = (config.heads, config.ffn_mult);
        let rng = &mut rng;

        let spatial = Linear::new(&mut p, "embed.spatial", CONTEXT_DIM, d, true, rng);
        let bound = 1.0 / (CONTEXT_DIM as f64).sqrt();
        let time_linear = p.add("embed.time_linear", Tensor::uniform([CONTEXT_DIM, d / 2], bound, rng));
        let time_periodic = p.add("embed.time_periodic", Tensor::uniform([CONTEXT_DIM, d / 2], bound, rng));
        let cls_token = p.add("embed.cls", Tensor::randn([1, d], 0.02, rng));
        let pad_embedding = p.add("embed.pad", Tensor::randn([1, d], 0.02, rng));

        let mut encoder: [Option<TransformerStack>; 3] = Default::default();
        for level in config.sequence_levels() {
            if level == 1 && !config.level1_transformer() {
                continue;
            }
            encoder[level - 1] = Some(TransformerStack::new(
                &mut p,
                &format!("encoder.level{level}"),
                config.layers[level - 1],
                d,
                heads,
                ffn,
                rng,
            ));
        }
        let mut scorers: [Option<PoolScorer>; 2] = Default::default();
        if config.pooling == Pooling::Attention {
            for level in config.pooled_levels() {
                scorers[level - 2] = Some(PoolScorer::new(&mut p, &format!("pool.level{level}"), d, rng));
            }
        }

        let seq = config.sequence_levels();
        let mut decoder_top = None;
        let mut up = Vec::new();
        if seq.len() > 1 {
            let top = *seq.last().unwrap();
            decoder_top = Some(TransformerStack::new(
                &mut p,
                &format!("decoder.level{top}"),
                config.layers[top - 1],
                d,
                heads,
                ffn,
                rng,
            ));
            for &level in seq[..seq.len() - 1].iter().rev() {
                let name = format!("decoder.up{level}");
                let stack = (level > 1 || config.level1_transformer()).then(|| {
                    TransformerStack::new(&mut p, &format!("{name}.stack"), config.layers[level - 1], d, heads, ffn, rng)
                });
                up.push(UpResolution {
                    level,
                    cross: MultiHeadAttention::new(&mut p, &format!("{name}.cross"), d, heads, rng),
                    self_attn: MultiHeadAttention::new(&mut p, &format!("{name}.self"), d, heads, rng),
                    stack,
                });
            }
        }
        let head_spatial = Mlp::new(&mut p, "head.spatial", d, d, CONTEXT_DIM, rng);
        let head_temporal = Mlp::new(&mut p, "head.temporal", d, d, CONTEXT_DIM, rng);

        Ok(Self {
            config,
            params: p,
            spatial,
            time_linear,
            time_periodic,
            cls_token,
            pad_embedding,
            encoder,
            scorers,
            decoder_top,
            up,
            head_spatial,
            head_temporal,
        })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    fn dropout(&self, g: &Graph) -> f64 {
        if g.is_train() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// `e = W_s s + b_s + (W_1 t || sin(W_2 t))` for every context row.
    /// `spatial` and `temporal` are `[R, 6]`; the result is `[R, d]`.
    pub fn embed_points(&self, g: &mut Graph, spatial: Var, temporal: Var) -> Var {
        let es = self.spatial.forward(g, spatial);
        let (w1, w2) = (g.param(self.time_linear), g.param(self.time_periodic));
        let lin = g.matmul(temporal, w1);
        let per = g.matmul(temporal, w2);
        let per = g.sin(per);
        let et = g.concat_last(lin, per);
        g.add(es, et)
    }

    /// Level-1 input `[B, n1 + 1, d]`: [CLS], point embeddings, pad rows.
    fn level1_input(&self, g: &mut Graph, batch: &Batch) -> Var {
        let (bsz, n) = (batch.size(), batch.max_len[0]);
        let s = g.constant(Tensor::new([bsz * n, CONTEXT_DIM], batch.spatial.clone()));
        let t = g.constant(Tensor::new([bsz * n, CONTEXT_DIM], batch.temporal.clone()));
        let e = self.embed_points(g, s, t);
        let cls = g.param(self.cls_token);
        let pad = g.param(self.pad_embedding);
        let src = g.concat_rows(cls, e);
        let mut idx = Vec::with_capacity(bsz * (n + 1));
        for (b, &len) in batch.level_lens[0].iter().enumerate() {
            idx.push(Some(0));
            idx.extend((0..n).map(|i| (i < len).then_some(1 + b * n + i)));
        }
        g.gather_rows(src, Some(pad), Rc::new(idx), [bsz, n + 1, self.config.d])
    }

    /// Group the non-[CLS] rows of `hidden [B, n + 1, d]` into padded
    /// patches of `max_patch` slots.
    pub fn patchify(
        &self,
        g: &mut Graph,
        hidden: Var,
        lengths: &[PatchLengths],
        next_max: usize,
        max_patch: usize,
    ) -> PatchTensor {
        let shape = g.shape(hidden).to_vec();
        let (bsz, n1, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(bsz, lengths.len(), "patchify: {} length lists for batch {bsz}", lengths.len());
        for (b, l) in lengths.iter().enumerate() {
            assert!(
                l.total() < n1 && l.len() <= next_max && l.max() <= max_patch,
                "patchify: trajectory {b} lengths {:?} do not fit rows {} / patches {next_max} / M {max_patch}",
                l.0,
                n1 - 1
            );
        }
        let (idx, keep) = patch_slot_index(lengths, n1 - 1, next_max, max_patch);
        let flat = g.reshape(hidden, [bsz * n1, d]);
        let pad = g.param(self.pad_embedding);
        let patches = g.gather_rows(flat, Some(pad), Rc::new(idx), [bsz * next_max, max_patch, d]);
        PatchTensor {
            patches,
            keep,
            max_patch,
        }
    }

    /// Pool each patch to one row, `[B * n_next, d]`, and return the
    /// attention weights `[B * n_next, M]` when attention pooling is used.
    pub fn pool(&self, g: &mut Graph, patches: &PatchTensor, target_level: usize) -> (Var, Option<Var>) {
        let shape = g.shape(patches.patches).to_vec();
        let (rows, m, d) = (shape[0], shape[1], shape[2]);
        match self.config.pooling {
            Pooling::Attention => {
                let scorer = self.scorers[target_level - 2]
                    .as_ref()
                    .expect("attention pooling has a scorer per pooled level");
                let flat = g.reshape(patches.patches, [rows * m, d]);
                let scores = scorer.forward(g, flat);
                let scores = g.reshape(scores, [rows, m]);
                let weights = g.masked_softmax(scores, &patches.keep);
                let w3 = g.reshape(weights, [rows, 1, m]);
                let pooled = g.bmm(w3, patches.patches, false);
                (g.reshape(pooled, [rows, d]), Some(weights))
            }
            Pooling::Mean => {
                let mut w = vec![0.0; rows * m];
                for (r, chunk) in patches.keep.chunks(m).enumerate() {
                    let count = chunk.iter().filter(|&&k| k).count();
                    for (j, &k) in chunk.iter().enumerate() {
                        if k {
                            w[r * m + j] = 1.0 / count as f64;
                        }
                    }
                }
                let w3 = g.constant(Tensor::new([rows, 1, m], w));
                let pooled = g.bmm(w3, patches.patches, false);
                (g.reshape(pooled, [rows, d]), None)
            }
            Pooling::Min => (g.masked_reduce(patches.patches, &patches.keep, ReduceMode::Min), None),
            Pooling::Max => (g.masked_reduce(patches.patches, &patches.keep, ReduceMode::Max), None),
        }
    }

    /// Patchify + pool + re-prepend [CLS]: the next level's input
    /// `[B, n_next + 1, d]`.
    pub fn patchify_pool(
        &self,
        g: &mut Graph,
        hidden: Var,
        lengths: &[PatchLengths],
        next_max: usize,
        max_patch: usize,
        target_level: usize,
    ) -> Var {
        let shape = g.shape(hidden).to_vec();
        let (bsz, n1, d) = (shape[0], shape[1], shape[2]);
        let patches = self.patchify(g, hidden, lengths, next_max, max_patch);
        let (pooled, _) = self.pool(g, &patches, target_level);
        let flat = g.reshape(hidden, [bsz * n1, d]);
        let src = g.concat_rows(flat, pooled);
        let mut idx = Vec::with_capacity(bsz * (next_max + 1));
        for (b, l) in lengths.iter().enumerate() {
            idx.push(Some(b * n1));
            idx.extend((0..next_max).map(|i| (i < l.len()).then_some(bsz * n1 + b * next_max + i)));
        }
        let pad = g.param(self.pad_embedding);
        g.gather_rows(src, Some(pad), Rc::new(idx), [bsz, next_max + 1, d])
    }

    pub fn encode(&self, g: &mut Graph, batch: &Batch) -> EncoderOutput {
        let dropout = self.dropout(g);
        let bsz = batch.size();
        let d = self.config.d;

        let mut states = Vec::new();
        let mut input = self.level1_input(g, batch);
        let mut level = 1;
        let mut max_len = batch.max_len[0];
        loop {
            let mask = batch.level_mask(level);
            let hidden = match &self.encoder[level - 1] {
                Some(stack) => {
                    let x = add_positional(g, input);
                    stack.forward(g, x, &mask, dropout)
                }
                None => input,
            };
            states.push(LevelState {
                level,
                hidden,
                mask,
                max_len,
            });
            let next = self.config.pooled_levels().into_iter().find(|&l| l > level);
            let Some(next) = next else { break };
            let lengths = batch.patch_lengths(level, next);
            let next_max = batch.max_len[next - 1];
            let max_patch = crate::blur::dynamic_max_patch_len(lengths.iter());
            input = self.patchify_pool(g, hidden, &lengths, next_max, max_patch, next);
            level = next;
            max_len = next_max;
        }

        let top = states.last().expect("at least one level");
        let idx: Vec<Option<usize>> = (0..bsz).map(|b| Some(b * (top.max_len + 1))).collect();
        let flat = g.reshape(top.hidden, [bsz * (top.max_len + 1), d]);
        let cls = g.gather_rows(flat, None, Rc::new(idx), [bsz, d]);
        EncoderOutput { levels: states, cls }
    }

    /// Restored level-1 sequence `[B, n1 + 1, d]` and every restored level,
    /// finest first.
    pub fn decode(&self, g: &mut Graph, enc: &EncoderOutput) -> Vec<LevelState> {
        let dropout = self.dropout(g);
        let top = enc.levels.last().expect("encoder states");
        let Some(top_stack) = &self.decoder_top else {
            return vec![top.clone()];
        };
        let mut restored = vec![LevelState {
            hidden: top_stack.forward(g, top.hidden, &top.mask, dropout),
            ..top.clone()
        }];
        for step in &self.up {
            let teacher = enc
                .levels
                .iter()
                .find(|s| s.level == step.level)
                .expect("encoder state for every decoder level");
            let upper = restored.last().unwrap();
            let e_hat = step
                .cross
                .forward(g, teacher.hidden, upper.hidden, &teacher.mask, &upper.mask, dropout);
            let e_bar = step
                .self_attn
                .forward(g, e_hat, e_hat, &teacher.mask, &teacher.mask, dropout);
            let x = g.add(e_bar, teacher.hidden);
            let hidden = match &step.stack {
                Some(stack) => stack.forward(g, x, &teacher.mask, dropout),
                None => x,
            };
            restored.push(LevelState {
                hidden,
                ..teacher.clone()
            });
        }
        restored.reverse();
        restored
    }

    /// Reconstruction heads on the non-[CLS] rows of `restored [B, n1+1, d]`
    /// and the batch loss: per-trajectory sum of squared errors over valid
    /// points and all 12 targets, averaged over trajectories.
    pub fn reconstruct(&self, g: &mut Graph, restored: &LevelState, batch: &Batch) -> ReconstructionOutput {
        let (bsz, n, d) = (batch.size(), batch.max_len[0], self.config.d);
        let flat = g.reshape(restored.hidden, [bsz * (n + 1), d]);
        let idx: Vec<Option<usize>> = (0..bsz)
            .flat_map(|b| (1..=n).map(move |i| Some(b * (n + 1) + i)))
            .collect();
        let rows = g.gather_rows(flat, None, Rc::new(idx), [bsz * n, d]);
        let spatial = self.head_spatial.forward(g, rows);
        let temporal = self.head_temporal.forward(g, rows);

        let s_target = g.constant(Tensor::new([bsz * n, CONTEXT_DIM], batch.spatial.clone()));
        let t_target = g.constant(Tensor::new([bsz * n, CONTEXT_DIM], batch.temporal.clone()));
        let es = g.squared_error(spatial, s_target);
        let et = g.squared_error(temporal, t_target);
        let err = g.add(es, et);
        let weights = g.constant(Tensor::new([bsz * n, CONTEXT_DIM], self.loss_weights(batch)));
        let weighted = g.mul(err, weights);
        let loss = g.sum(weighted);
        ReconstructionOutput {
            spatial,
            temporal,
            loss,
        }
    }

    fn loss_weights(&self, batch: &Batch) -> Vec<f64> {
        let (bsz, n) = (batch.size(), batch.max_len[0]);
        let mut w = vec![0.0; bsz * n * CONTEXT_DIM];
        for (b, &len) in batch.level_lens[0].iter().enumerate() {
            let mut v = 1.0 / bsz as f64;
            if self.config.per_point_mean {
                v /= len as f64;
            }
            w[b * n * CONTEXT_DIM..(b * n + len) * CONTEXT_DIM].fill(v);
        }
        w
    }

    /// Full pretraining forward pass; returns the scalar loss.
    pub fn loss(&self, g: &mut Graph, batch: &Batch) -> Var {
        let enc = self.encode(g, batch);
        let restored = self.decode(g, &enc);
        self.reconstruct(g, &restored[0], batch).loss
    }

    /// Trajectory representations `[B, d]` in evaluation mode.
    pub fn embed(&self, batch: &Batch) -> Vec<Vec<f64>> {
        let mut g = self.graph();
        let enc = self.encode(&mut g, batch);
        g.value(enc.cls).data().chunks(self.config.d).map(<[f64]>::to_vec).collect()
    }

    /// Per-trajectory reconstruction losses (unweighted sums over valid
    /// points), evaluated without dropout.
    pub fn per_trajectory_loss(&self, batch: &Batch) -> Vec<f64> {
        let mut g = self.graph();
        let enc = self.encode(&mut g, batch);
        let restored = self.decode(&mut g, &enc);
        let out = self.reconstruct(&mut g, &restored[0], batch);
        let n = batch.max_len[0];
        let (ys, yt) = (g.value(out.spatial).data(), g.value(out.temporal).data());
        (0..batch.size())
            .map(|b| {
                let mut total = 0.0;
                for i in 0..batch.level_lens[0][b] {
                    let o = (b * n + i) * CONTEXT_DIM;
                    for c in 0..CONTEXT_DIM {
                        total += (ys[o + c] - batch.spatial[o + c]).powi(2);
                        total += (yt[o + c] - batch.temporal[o + c]).powi(2);
                    }
                }
                total
            })
            .collect()
    }
}
