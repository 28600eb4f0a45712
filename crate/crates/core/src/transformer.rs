//! Pre-norm transformer blocks, stacks, encoder and decoder.
//!
//! A block maps a query stream against a key/value stream:
//!
//! ```text
//! x   = query + W_o · MultiHead(LN₁(query), LN₁(kv), LN₁(kv))
//! out = x + FFN(LN₂(x))
//! ```
//!
//! A stack applies `n_layers` blocks to the query stream, re-reading the
//! same memory in every layer (cross-attention) or attending to its own
//! current stream (self-attention), and ends with a final layer norm.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Reserved; dropout is not applied.
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 256,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    /// Small configuration used for synthetic-corpus runs.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 128,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position table `[len × d]`.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data.push(T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("len and d are positive")
}

/// Positional rows `start..start+len` as a graph constant.
pub fn positions<'a, T: Scalar>(g: &mut Graph<'a, T>, start: usize, len: usize, d: usize) -> Var {
    let full = positional_encoding::<T>(start + len, d);
    let rows = full.data()[start * d..].to_vec();
    g.constant(Tensor::new(vec![len, d], rows).expect("non-empty"))
}

fn xavier<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::uniform(vec![rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.register(format!("{name}.w"), xavier(d_in, d_out, rng))?,
            b: store.register(format!("{name}.b"), Tensor::zeros(vec![d_out]))?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(vec![d], T::one()))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![d]))?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, T::from_f64(LN_EPS))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Projected keys and values for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct KeyValue {
    pub k: Var,
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ffn: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Result of one block: the new query stream and its attention node.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub out: Var,
    pub attn: Var,
}

impl Block {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln_attn: LayerNorm::register(store, &format!("{name}.ln_attn"), d)?,
            q: Linear::register(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::register(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::register(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::register(store, &format!("{name}.o"), d, d, rng)?,
            ln_ffn: LayerNorm::register(store, &format!("{name}.ln_ffn"), d)?,
            ff_in: Linear::register(store, &format!("{name}.ff_in"), d, cfg.d_ff, rng)?,
            ff_out: Linear::register(store, &format!("{name}.ff_out"), cfg.d_ff, d, rng)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.ln_attn.ids());
        for l in [&self.q, &self.k, &self.v, &self.o, &self.ff_in, &self.ff_out] {
            v.extend(l.ids());
        }
        v.extend(self.ln_ffn.ids());
        v
    }

    /// Normalizes `kv_in` and projects it to keys and values.
    pub fn project_kv<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        kv_in: Var,
    ) -> Result<KeyValue> {
        let n = self.ln_attn.forward(g, store, kv_in)?;
        self.project_normed(g, store, n)
    }

    fn project_normed<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        normed: Var,
    ) -> Result<KeyValue> {
        Ok(KeyValue {
            k: self.k.forward(g, store, normed)?,
            v: self.v.forward(g, store, normed)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attend<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        query: Var,
        normed_query: Var,
        kv: KeyValue,
        mask: &AttnMask,
        heads: usize,
    ) -> Result<BlockOutput> {
        let q = self.q.forward(g, store, normed_query)?;
        let attn = g.attention(q, kv.k, kv.v, heads, mask)?;
        let proj = self.o.forward(g, store, attn)?;
        let x = g.add(query, proj)?;
        let n2 = self.ln_ffn.forward(g, store, x)?;
        let hidden = self.ff_in.forward(g, store, n2)?;
        let hidden = g.relu(hidden);
        let f = self.ff_out.forward(g, store, hidden)?;
        Ok(BlockOutput {
            out: g.add(x, f)?,
            attn,
        })
    }

    /// Full block. `memory == None` means self-attention over `query`.
    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        query: Var,
        memory: Option<Var>,
        mask: &AttnMask,
        heads: usize,
    ) -> Result<BlockOutput> {
        let nq = self.ln_attn.forward(g, store, query)?;
        let kv = match memory {
            None => self.project_normed(g, store, nq)?,
            Some(m) => self.project_kv(g, store, m)?,
        };
        self.attend(g, store, query, nq, kv, mask, heads)
    }

    /// Block against precomputed keys/values.
    pub fn forward_kv<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        query: Var,
        kv: KeyValue,
        mask: &AttnMask,
        heads: usize,
    ) -> Result<BlockOutput> {
        let nq = self.ln_attn.forward(g, store, query)?;
        self.attend(g, store, query, nq, kv, mask, heads)
    }

    /// One new self-attention row appended to a cached prefix.
    pub fn step<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        row: Var,
        cache: &mut Option<KeyValue>,
        heads: usize,
    ) -> Result<BlockOutput> {
        let nq = self.ln_attn.forward(g, store, row)?;
        let fresh = self.project_normed(g, store, nq)?;
        let kv = match cache {
            None => fresh,
            Some(prev) => KeyValue {
                k: g.concat_rows(&[prev.k, fresh.k])?,
                v: g.concat_rows(&[prev.v, fresh.v])?,
            },
        };
        *cache = Some(kv);
        self.attend(g, store, row, nq, kv, &AttnMask::None, heads)
    }
}

/// `n_layers` blocks plus a final layer norm.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct StackOutput {
    pub out: Var,
    /// Attention node per layer.
    pub attn: Vec<Var>,
}

/// Per-layer key/value cache for incremental self-attention.
#[derive(Debug, Clone, Default)]
pub struct SelfCache {
    layers: Vec<Option<KeyValue>>,
}

impl SelfCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![None; n_layers],
        }
    }
}

impl Stack {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..cfg.n_layers)
            .map(|l| Block::register(store, &format!("{name}.l{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_ln: LayerNorm::register(store, &format!("{name}.ln_out"), cfg.d_model)?,
            heads: cfg.n_heads,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<_> = self.blocks.iter().flat_map(Block::ids).collect();
        v.extend(self.final_ln.ids());
        v
    }

    /// Self-attention stack, e.g. `F(E, E, E)`.
    pub fn forward_self<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        mask: &AttnMask,
    ) -> Result<StackOutput> {
        let mut cur = x;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let o = b.forward(g, store, cur, None, mask, self.heads)?;
            cur = o.out;
            attn.push(o.attn);
        }
        Ok(StackOutput {
            out: self.final_ln.forward(g, store, cur)?,
            attn,
        })
    }

    /// Keys/values of a fixed memory for every layer.
    pub fn memory_kv<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        memory: Var,
    ) -> Result<Vec<KeyValue>> {
        self.blocks.iter().map(|b| b.project_kv(g, store, memory)).collect()
    }

    /// Cross-attention stack, e.g. `F(h, Hᵉ, Hᵉ)`.
    pub fn forward_cross<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        memory_kv: &[KeyValue],
        mask: &AttnMask,
    ) -> Result<StackOutput> {
        let mut cur = x;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for (b, kv) in self.blocks.iter().zip(memory_kv) {
            let o = b.forward_kv(g, store, cur, *kv, mask, self.heads)?;
            cur = o.out;
            attn.push(o.attn);
        }
        Ok(StackOutput {
            out: self.final_ln.forward(g, store, cur)?,
            attn,
        })
    }

    /// Causal self-attention for one new position given the cached prefix.
    pub fn step_self<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        row: Var,
        cache: &mut SelfCache,
    ) -> Result<StackOutput> {
        let mut cur = row;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for (b, slot) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            let o = b.step(g, store, cur, slot, self.heads)?;
            cur = o.out;
            attn.push(o.attn);
        }
        Ok(StackOutput {
            out: self.final_ln.forward(g, store, cur)?,
            attn,
        })
    }
}

/// `Hᵉ` plus the key mask it was computed under.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub mask: Vec<bool>,
    /// Tokens dropped from the oldest side to fit `max_seq_len`.
    pub truncated: usize,
    pub attn: Vec<Var>,
}

impl EncoderOutput {
    pub fn key_mask(&self) -> AttnMask {
        AttnMask::Keys(self.mask.clone())
    }
}

/// Token embedding lookup plus sinusoidal positions.
pub fn embed<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    table: ParamId,
    tokens: &[u32],
    start_pos: usize,
) -> Result<Var> {
    let t = g.param(store, table);
    let e = g.gather(t, tokens)?;
    let d = g.shape(e)[1];
    let p = positions(g, start_pos, tokens.len(), d);
    g.add(e, p)
}

/// Encodes `tokens` with masked positions excluded as keys everywhere.
pub fn encode<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    table: ParamId,
    stack: &Stack,
    tokens: &[u32],
    mask: &[bool],
    cfg: &TransformerConfig,
) -> Result<EncoderOutput> {
    if tokens.len() != mask.len() {
        return Err(Error::dim("encode", &[tokens.len()], &[mask.len()]));
    }
    if tokens.is_empty() {
        return Err(Error::contract("encode on an empty sequence"));
    }
    let truncated = tokens.len().saturating_sub(cfg.max_seq_len);
    let (tokens, mask) = (&tokens[truncated..], &mask[truncated..]);
    if !mask.iter().any(|&m| m) {
        return Err(Error::contract("encoder mask hides every position"));
    }
    let x = embed(g, store, table, tokens, 0)?;
    let out = stack.forward_self(g, store, x, &AttnMask::Keys(mask.to_vec()))?;
    Ok(EncoderOutput {
        hidden: out.out,
        mask: mask.to_vec(),
        truncated,
        attn: out.attn,
    })
}

/// Self-attention stack over the prefix followed by a cross-attention
/// stack over an encoder memory.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub self_stack: Stack,
    pub cross_stack: Stack,
}

#[derive(Debug, Clone)]
pub struct DecoderStates {
    /// `h` rows: causal self-attention states.
    pub h: Var,
    /// `c` rows: cross-attention states.
    pub c: Var,
    pub self_attn: Vec<Var>,
    pub cross_attn: Vec<Var>,
}

/// Incremental decoding state: cached prefix keys/values plus the
/// encoder memory projected once per layer.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    pub self_cache: SelfCache,
    pub memory_kv: Vec<KeyValue>,
    pub memory_mask: AttnMask,
    pub pos: usize,
}

impl Decoder {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_stack: Stack::register(store, &format!("{name}.self"), cfg, rng)?,
            cross_stack: Stack::register(store, &format!("{name}.cross"), cfg, rng)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.self_stack.ids();
        v.extend(self.cross_stack.ids());
        v
    }

    /// Teacher-forced pass over a whole prefix of input embeddings.
    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        inputs: Var,
        enc: &EncoderOutput,
    ) -> Result<DecoderStates> {
        if g.shape(inputs)[0] == 0 {
            return Err(Error::contract("decoder needs a non-empty prefix"));
        }
        let h = self.self_stack.forward_self(g, store, inputs, &AttnMask::Causal)?;
        let kv = self.cross_stack.memory_kv(g, store, enc.hidden)?;
        let c = self.cross_stack.forward_cross(g, store, h.out, &kv, &enc.key_mask())?;
        Ok(DecoderStates {
            h: h.out,
            c: c.out,
            self_attn: h.attn,
            cross_attn: c.attn,
        })
    }

    pub fn start<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        enc: &EncoderOutput,
    ) -> Result<DecoderCache> {
        Ok(DecoderCache {
            self_cache: SelfCache::new(self.self_stack.blocks.len()),
            memory_kv: self.cross_stack.memory_kv(g, store, enc.hidden)?,
            memory_mask: enc.key_mask(),
            pos: 0,
        })
    }

    /// Incremental step for one input embedding row at `cache.pos`.
    pub fn step<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        row: Var,
        cache: &mut DecoderCache,
    ) -> Result<DecoderStates> {
        let h = self.self_stack.step_self(g, store, row, &mut cache.self_cache)?;
        let c = self
            .cross_stack
            .forward_cross(g, store, h.out, &cache.memory_kv, &cache.memory_mask)?;
        cache.pos += 1;
        Ok(DecoderStates {
            h: h.out,
            c: c.out,
            self_attn: h.attn,
            cross_attn: c.attn,
        })
    }
}

/// `features [t × k·d] · W [k·d × V] + b`; softmax is left to consumers.
pub fn output_projection<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    features: Var,
    proj: &Linear,
) -> Result<Var> {
    proj.forward(g, store, features)
}

/// One attention matrix `[rows × cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Attention weights per layer, per head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<AttentionMatrix>>,
}

impl AttentionTrace {
    pub fn from_graph<T: Scalar>(g: &Graph<'_, T>, attn_nodes: &[Var]) -> Self {
        let layers = attn_nodes
            .iter()
            .filter_map(|&v| {
                let (heads, w) = g.attention_weights(v)?;
                let rows = g.shape(v)[0];
                let cols = w.len() / (heads * rows);
                Some(
                    w.chunks(rows * cols)
                        .map(|hw| AttentionMatrix {
                            rows,
                            cols,
                            data: hw.iter().map(|x| x.as_f64()).collect(),
                        })
                        .collect(),
                )
            })
            .collect();
        Self { layers }
    }

    /// Final-layer weights averaged over heads.
    pub fn final_layer_mean(&self) -> Option<AttentionMatrix> {
        let heads = self.layers.last()?;
        let first = heads.first()?;
        let mut data = vec![0.0; first.data.len()];
        for h in heads {
            data.iter_mut().zip(&h.data).for_each(|(d, &w)| *d += w);
        }
        let n = heads.len() as f64;
        data.iter_mut().for_each(|d| *d /= n);
        Some(AttentionMatrix {
            rows: first.rows,
            cols: first.cols,
            data,
        })
    }
}
