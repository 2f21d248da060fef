//! Parameterized building blocks: linear maps, layer norm, multi-head
//! attention and pre-norm transformer stacks.

use rand::Rng;

use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::uniform([fan_in, fan_out], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Linear -> ReLU -> Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention.
///
/// Keys carry no bias: a key bias shifts every score of a query row by
/// the same amount and cancels in the softmax.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            heads,
        }
    }

    /// `query [B, nq, d]` attends over `kv [B, nk, d]`. Returns the output
    /// and the attention weights `[B * heads, nq, nk]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        query: Var,
        kv: Var,
        q_mask: &[bool],
        k_mask: &[bool],
        dropout: f64,
    ) -> (Var, Tensor) {
        let (o, core) = self.attend(g, query, kv, q_mask, k_mask, dropout);
        (o, g.attention_weights(core).expect("attention node"))
    }

    fn attend(&self, g: &mut Graph, query: Var, kv: Var, q_mask: &[bool], k_mask: &[bool], dropout: f64) -> (Var, Var) {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let qh = g.split_heads(q, self.heads);
        let kh = g.split_heads(k, self.heads);
        let vh = g.split_heads(v, self.heads);
        let core = g.attention(qh, kh, vh, q_mask, k_mask, self.heads, dropout);
        let o = g.merge_heads(core, self.heads);
        (self.out.forward(g, o), core)
    }

    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var, q_mask: &[bool], k_mask: &[bool], dropout: f64) -> Var {
        self.attend(g, query, kv, q_mask, k_mask, dropout).0
    }
}

/// Pre-norm encoder block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_mult: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, d * ffn_mult, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool], dropout: f64) -> Var {
        let a = self.ln1.forward(g, x);
        let a = self.attn.forward(g, a, a, mask, mask, dropout);
        let x = g.add(x, a);
        let f = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, f);
        let f = g.dropout(f, dropout);
        g.add(x, f)
    }
}

/// A stack of encoder blocks with a closing layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
}

impl TransformerStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: (0..layers)
                .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), d, heads, ffn_mult, rng))
                .collect(),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    /// `x [B, n, d]` with validity `mask [B * n]`.
    pub fn forward(&self, g: &mut Graph, mut x: Var, mask: &[bool], dropout: f64) -> Var {
        for block in &self.blocks {
            x = block.forward(g, x, mask, dropout);
        }
        self.ln_out.forward(g, x)
    }
}

/// Sinusoidal position table `[n, d]`: even channels `sin`, odd `cos`.
pub fn positional_table(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Add the sinusoidal encoding to `x [B, n, d]`; position 0 is the [CLS] slot.
pub fn add_positional(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let table = positional_table(n, d);
    let mut tiled = Vec::with_capacity(b * n * d);
    for _ in 0..b {
        tiled.extend_from_slice(&table);
    }
    let pe = g.constant(Tensor::new(shape, tiled));
    g.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_origin() {
        let pe = positional_table(3, 6);
        assert_eq!(&pe[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_is_stateless() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros([2, 3, 4]));
        let a = add_positional(&mut g, x);
        let b = add_positional(&mut g, x);
        assert_eq!(g.value(a), g.value(b));
    }

    fn stack_fixture() -> (ParamStore, TransformerStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let st = TransformerStack::new(&mut s, "t", 2, 8, 2, 2, &mut rng);
        (s, st)
    }

    #[test]
    fn stack_preserves_shape_and_isolates_masked_rows() {
        let (s, st) = stack_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn([1, 4, 8], 1.0, &mut rng);
        let mask = [true, true, true, false];
        let mut x1 = x0.clone();
        for v in &mut x1.data_mut()[24..] {
            *v += 5.0;
        }
        let run = |x: Tensor| {
            let mut g = Graph::new(&s);
            let xv = g.constant(x);
            let y = st.forward(&mut g, xv, &mask, 0.0);
            assert_eq!(g.shape(y), &[1, 4, 8]);
            g.value(y).data()[..24].to_vec()
        };
        assert_eq!(run(x0), run(x1));
    }

    /// With one valid token beside [CLS], the masked 4-slot computation
    /// equals a dense 2-slot computation.
    #[test]
    fn single_valid_token_matches_dense_pair() {
        let (s, st) = stack_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([1, 4, 8], 1.0, &mut rng);
        let mut g = Graph::new(&s);
        let xv = g.constant(x.clone());
        let y = st.forward(&mut g, xv, &[true, true, false, false], 0.0);
        let masked = g.value(y).data()[..16].to_vec();

        let mut g2 = Graph::new(&s);
        let pair = g2.constant(Tensor::new([1, 2, 8], x.data()[..16].to_vec()));
        let y2 = st.forward(&mut g2, pair, &[true, true], 0.0);
        let dense = g2.value(y2).data().to_vec();
        for (a, b) in masked.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_and_skip_masked_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut s, "a", 8, 2, &mut rng);
        let mut g = Graph::new(&s);
        let q = g.constant(Tensor::randn([2, 3, 8], 1.0, &mut rng));
        let kv = g.constant(Tensor::randn([2, 5, 8], 1.0, &mut rng));
        let qm = [true, true, true, true, true, false];
        let km = [true, true, false, true, false, true, true, true, true, false];
        let (_, w) = mha.forward_with_weights(&mut g, q, kv, &qm, &km, 0.0);
        let wt = &w;
        for r in 0..wt.rows() {
            let row = wt.row(r);
            let b = r / (2 * 3);
            let qi = r % 3;
            if !qm[b * 3 + qi] {
                assert!(row.iter().all(|&v| v == 0.0));
                continue;
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                if !km[b * 5 + j] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}
