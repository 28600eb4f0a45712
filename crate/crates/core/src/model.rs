//! The co-generation network: one shared encoder read under two masks, an
//! act decoder conditioned on the belief vector, and a response decoder
//! that attends to the act decoder's hidden states.
//!
//! ```text
//! enc_act, enc_resp = Enc([T; D]) under the act / response masks
//! act:      u_t = e_t + pos_t + W_b v_b
//!           h = Self(u), c = Cross(h, enc_act)      logits = W_a [h; c]
//! response: h = Self(e), c = Cross(h, enc_resp), o = F(h, Hᵃ, Hᵃ)
//!                                                   logits = W_r [h; c; o]
//! ```
//!
//! `Hᵃ` is the act decoder's cross-attention output `c` over the act
//! input prefix `<sos> a_1 … a_n`.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acts::{PAD, SOS};
use crate::corpus::Row;
use crate::error::{Error, Result};
use crate::tensor::{
    checkpoint::Checkpoint, Adam, AttnMask, Graph, ParamId, ParamStore, Scalar, Tensor, Var,
};
use crate::transformer::{
    embed, encode, AttentionTrace, Decoder, DecoderCache, EncoderOutput, KeyValue, Linear, SelfCache, Stack,
    TransformerConfig,
};

/// How the response decoder reads the act hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActAttention {
    /// Attention over every row of `Hᵃ`.
    Dynamic,
    /// Attention over the single row `mean(Hᵃ)`.
    Mean,
}

impl ActAttention {
    pub fn as_str(self) -> &'static str {
        match self {
            ActAttention::Dynamic => "dynamic",
            ActAttention::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(ActAttention::Dynamic),
            "mean" => Ok(ActAttention::Mean),
            other => Err(Error::Config(format!("unknown act attention {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub vocab_size: usize,
    pub act_vocab_size: usize,
    pub belief_dim: usize,
    pub act_attention: ActAttention,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.vocab_size <= 4 || self.act_vocab_size <= 4 || self.belief_dim == 0 {
            return Err(Error::Config("vocabulary and belief sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        let t = &self.transformer;
        [
            ("model.n_layers", t.n_layers.to_string()),
            ("model.n_heads", t.n_heads.to_string()),
            ("model.d_model", t.d_model.to_string()),
            ("model.d_ff", t.d_ff.to_string()),
            ("model.max_seq_len", t.max_seq_len.to_string()),
            ("model.vocab_size", self.vocab_size.to_string()),
            ("model.act_vocab_size", self.act_vocab_size.to_string()),
            ("model.belief_dim", self.belief_dim.to_string()),
            ("model.act_attention", self.act_attention.as_str().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            ckpt.meta_value(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key {k}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for meta key {k}")))
        };
        let cfg = Self {
            transformer: TransformerConfig {
                n_layers: get("model.n_layers")?,
                n_heads: get("model.n_heads")?,
                d_model: get("model.d_model")?,
                d_ff: get("model.d_ff")?,
                max_seq_len: get("model.max_seq_len")?,
                dropout: 0.0,
            },
            vocab_size: get("model.vocab_size")?,
            act_vocab_size: get("model.act_vocab_size")?,
            belief_dim: get("model.belief_dim")?,
            act_attention: ActAttention::parse(ckpt.meta_value("model.act_attention").unwrap_or("dynamic"))
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

/// Parameter layout of the network. Values live in a separate
/// [`ParamStore`] so the same layout serves 32- and 64-bit stores.
#[derive(Debug, Clone)]
pub struct Cogen {
    pub config: ModelConfig,
    /// Shared by the encoder input and the response decoder input.
    pub word_emb: ParamId,
    pub encoder: Stack,
    pub act_emb: ParamId,
    /// `W_b`, no bias: a zero belief adds nothing.
    pub belief_proj: ParamId,
    pub act_decoder: Decoder,
    pub act_out: Linear,
    pub resp_decoder: Decoder,
    pub act_attn: Stack,
    pub resp_out: Linear,
    /// `s = log σ²` per task.
    pub s_act: ParamId,
    pub s_resp: ParamId,
}

/// Both masked views of one encoder pass over `[T; D]`.
#[derive(Debug, Clone)]
pub struct DualEncoding {
    pub act: EncoderOutput,
    pub resp: EncoderOutput,
}

#[derive(Debug, Clone)]
pub struct ActOutput {
    pub logits: Var,
    /// `Hᵃ`, one row per act input token.
    pub hidden: Var,
    pub cross_attn: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ResponseOutput {
    pub logits: Var,
    pub act_attn: Vec<Var>,
}

/// Which parameters a training step may update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    Uncertainty,
    Weighted(f64),
    /// Act branch and shared encoder only; the response loss is skipped.
    ActOnly,
    /// Response branch only, reading a frozen encoder and act branch.
    ResponseOnly,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(LossMode::Uncertainty),
            "act_only" => Ok(LossMode::ActOnly),
            "response_only" => Ok(LossMode::ResponseOnly),
            _ => {
                let alpha = s
                    .strip_prefix("weighted:")
                    .and_then(|a| a.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown loss mode {s:?}")))?;
                check_alpha(alpha)?;
                Ok(LossMode::Weighted(alpha))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            LossMode::Uncertainty => "uncertainty".into(),
            LossMode::Weighted(a) => format!("weighted:{a}"),
            LossMode::ActOnly => "act_only".into(),
            LossMode::ResponseOnly => "response_only".into(),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("weight alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `αL_a + (1 − α)L_r`.
pub fn weighted_sum_loss(l_a: f64, l_r: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_a + (1.0 - alpha) * l_r)
}

/// `½e^{−s₁}L_a + ½e^{−s₂}L_r + s₁ + s₂`, i.e. `L_a/2σ₁² + L_r/2σ₂² + log σ₁²σ₂²`.
pub fn uncertainty_loss_value(l_a: f64, l_r: f64, s1: f64, s2: f64) -> f64 {
    0.5 * (-s1).exp() * l_a + 0.5 * (-s2).exp() * l_r + s1 + s2
}

/// Graph form of [`uncertainty_loss_value`]; every argument is a `[1]` node.
pub fn uncertainty_loss<T: Scalar>(g: &mut Graph<'_, T>, l_a: Var, l_r: Var, s1: Var, s2: Var) -> Result<Var> {
    let term = |g: &mut Graph<'_, T>, l: Var, s: Var| -> Result<Var> {
        let neg = g.scale(s, T::from_f64(-1.0));
        let w = g.exp(neg);
        let wl = g.mul(w, l)?;
        Ok(g.scale(wl, T::from_f64(0.5)))
    };
    let a = term(g, l_a, s1)?;
    let r = term(g, l_r, s2)?;
    let sum = g.add(a, r)?;
    let sum = g.add(sum, s1)?;
    g.add(sum, s2)
}

/// Scalar diagnostics of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub act_loss: f64,
    pub response_loss: f64,
    pub total: f64,
    pub act_tokens: usize,
    pub response_tokens: usize,
}

/// Loss nodes for a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub act: Var,
    pub response: Option<Var>,
    pub total: Var,
    pub act_tokens: usize,
    pub response_tokens: usize,
}

impl Cogen {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = &config.transformer;
        let d = t.d_model;
        let word_emb = store.register("word_emb", Tensor::randn(vec![config.vocab_size, d], 1.0, &mut rng))?;
        let encoder = Stack::register(store, "encoder", t, &mut rng)?;
        let act_emb = store.register("act_emb", Tensor::randn(vec![config.act_vocab_size, d], 1.0, &mut rng))?;
        let bound = (6.0 / (config.belief_dim + d) as f64).sqrt();
        let belief_proj = store.register("act.belief_proj", Tensor::uniform(vec![config.belief_dim, d], bound, &mut rng))?;
        let act_decoder = Decoder::register(store, "act", t, &mut rng)?;
        let act_out = Linear::register(store, "act.out", 2 * d, config.act_vocab_size, &mut rng)?;
        let resp_decoder = Decoder::register(store, "resp", t, &mut rng)?;
        let act_attn = Stack::register(store, "resp.act_attn", t, &mut rng)?;
        let resp_out = Linear::register(store, "resp.out", 3 * d, config.vocab_size, &mut rng)?;
        let s_act = store.register("s_act", Tensor::zeros(vec![1]))?;
        let s_resp = store.register("s_resp", Tensor::zeros(vec![1]))?;
        Ok(Self {
            config,
            word_emb,
            encoder,
            act_emb,
            belief_proj,
            act_decoder,
            act_out,
            resp_decoder,
            act_attn,
            resp_out,
            s_act,
            s_resp,
        })
    }

    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::register(&mut store, config, seed)?;
        Ok((model, store))
    }

    /// Rebuilds the layout from checkpoint metadata and loads its values.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamStore<f32>)> {
        let cfg = ModelConfig::from_meta(ckpt)?;
        let (model, mut store) = Self::init::<f32>(cfg, 0)?;
        ckpt.restore_params(&mut store)?;
        Ok((model, store))
    }

    pub fn shared_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.word_emb];
        v.extend(self.encoder.ids());
        v
    }

    pub fn act_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.act_emb, self.belief_proj];
        v.extend(self.act_decoder.ids());
        v.extend(self.act_out.ids());
        v
    }

    /// Parameters used only by the response branch.
    pub fn response_ids(&self) -> Vec<ParamId> {
        let mut v = self.resp_decoder.ids();
        v.extend(self.act_attn.ids());
        v.extend(self.resp_out.ids());
        v
    }

    pub fn uncertainty_ids(&self) -> [ParamId; 2] {
        [self.s_act, self.s_resp]
    }

    /// Parameters held fixed under `mode`.
    pub fn frozen(&self, mode: LossMode) -> HashSet<ParamId> {
        let mut f = HashSet::new();
        match mode {
            LossMode::Uncertainty => {}
            LossMode::Weighted(_) => f.extend(self.uncertainty_ids()),
            LossMode::ActOnly => {
                f.extend(self.response_ids());
                f.extend(self.uncertainty_ids());
            }
            LossMode::ResponseOnly => {
                f.extend(self.shared_ids());
                f.extend(self.act_ids());
                f.extend(self.uncertainty_ids());
            }
        }
        f
    }

    pub fn encode_shared<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        source: &[u32],
        act_mask: &[bool],
    ) -> Result<DualEncoding> {
        if !act_mask.iter().any(|&m| m) {
            return Err(Error::contract("empty current utterance"));
        }
        self.check_ids(source, self.config.vocab_size, "source")?;
        let t = &self.config.transformer;
        let act = encode(g, store, self.word_emb, &self.encoder, source, act_mask, t)?;
        let resp = encode(g, store, self.word_emb, &self.encoder, source, &vec![true; source.len()], t)?;
        Ok(DualEncoding { act, resp })
    }

    fn check_ids(&self, ids: &[u32], bound: usize, level: &'static str) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= bound) {
            Some(bad) => Err(Error::Vocabulary {
                item: bad.to_string(),
                level,
            }),
            None => Ok(()),
        }
    }

    fn check_prefix(&self, prefix: &[u32], bound: usize, level: &'static str) -> Result<()> {
        if prefix.first() != Some(&SOS) {
            return Err(Error::contract(format!("{level} prefix must start with <sos>")));
        }
        self.check_ids(prefix, bound, level)
    }

    /// `v_b · W_b` as a `[1 × d]` row.
    pub fn belief_row<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        belief: &[f32],
    ) -> Result<Var> {
        if belief.len() != self.config.belief_dim {
            return Err(Error::dim("belief", &[belief.len()], &[self.config.belief_dim]));
        }
        let v = g.constant(Tensor::new(
            vec![1, belief.len()],
            belief.iter().map(|&x| T::from_f64(x as f64)).collect(),
        )?);
        let w = g.param(store, self.belief_proj);
        g.matmul(v, w)
    }

    fn act_inputs<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        belief: Var,
        tokens: &[u32],
        start: usize,
    ) -> Result<Var> {
        let e = embed(g, store, self.act_emb, tokens, start)?;
        let b = g.broadcast_rows(belief, tokens.len());
        g.add(e, b)
    }

    /// Teacher-forced act decoder over `prefix` (starting with `<sos>`).
    pub fn act_forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        dual: &DualEncoding,
        belief: &[f32],
        prefix: &[u32],
    ) -> Result<ActOutput> {
        self.check_prefix(prefix, self.config.act_vocab_size, "act")?;
        let b = self.belief_row(g, store, belief)?;
        let u = self.act_inputs(g, store, b, prefix, 0)?;
        let states = self.act_decoder.forward(g, store, u, &dual.act)?;
        let features = g.concat_cols(&[states.h, states.c])?;
        Ok(ActOutput {
            logits: self.act_out.forward(g, store, features)?,
            hidden: states.c,
            cross_attn: states.cross_attn,
        })
    }

    /// Keys/values of the act-attention memory for every layer.
    pub fn act_memory<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        act_hidden: Var,
    ) -> Result<Vec<KeyValue>> {
        if g.shape(act_hidden)[0] == 0 {
            return Err(Error::contract("response generation needs act hidden states"));
        }
        let memory = match self.config.act_attention {
            ActAttention::Dynamic => act_hidden,
            ActAttention::Mean => g.mean_rows(act_hidden),
        };
        self.act_attn.memory_kv(g, store, memory)
    }

    /// Teacher-forced response decoder over `prefix` given `Hᵃ`.
    pub fn response_forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        dual: &DualEncoding,
        act_hidden: Var,
        prefix: &[u32],
    ) -> Result<ResponseOutput> {
        self.check_prefix(prefix, self.config.vocab_size, "response")?;
        let act_kv = self.act_memory(g, store, act_hidden)?;
        let e = embed(g, store, self.word_emb, prefix, 0)?;
        let states = self.resp_decoder.forward(g, store, e, &dual.resp)?;
        let o = self.act_attn.forward_cross(g, store, states.h, &act_kv, &AttnMask::None)?;
        let features = g.concat_cols(&[states.h, states.c, o.out])?;
        Ok(ResponseOutput {
            logits: self.resp_out.forward(g, store, features)?,
            act_attn: o.attn,
        })
    }

    /// Summed token cross entropy of `logits` against `targets`.
    pub fn sequence_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[u32]) -> Result<Var> {
        g.cross_entropy(logits, targets, PAD)
    }

    /// Forward both branches over `rows` and combine per `mode`. Losses are
    /// per-token means over the batch, one per task.
    pub fn batch_loss<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        rows: &[Row<'_>],
        mode: LossMode,
    ) -> Result<BatchLoss> {
        if let LossMode::Weighted(a) = mode {
            check_alpha(a)?;
        }
        let want_response = mode != LossMode::ActOnly;
        let mut act_terms = Vec::new();
        let mut resp_terms = Vec::new();
        let (mut act_tokens, mut response_tokens) = (0, 0);
        for row in rows {
            if row.acts.len() < 2 || row.response.len() < 2 {
                return Err(Error::contract("act and response rows need <sos> and <eos>"));
            }
            let dual = self.encode_shared(g, store, row.source, row.act_mask)?;
            let a_in = &row.acts[..row.acts.len() - 1];
            let a_out = &row.acts[1..];
            let act = self.act_forward(g, store, &dual, row.belief, a_in)?;
            act_terms.push(Self::sequence_loss(g, act.logits, a_out)?);
            act_tokens += a_out.iter().filter(|&&t| t != PAD).count();
            if want_response {
                let r_in = &row.response[..row.response.len() - 1];
                let r_out = &row.response[1..];
                let resp = self.response_forward(g, store, &dual, act.hidden, r_in)?;
                resp_terms.push(Self::sequence_loss(g, resp.logits, r_out)?);
                response_tokens += r_out.iter().filter(|&&t| t != PAD).count();
            }
        }
        if act_tokens == 0 {
            return Err(Error::contract("batch has no target tokens"));
        }
        let sum_all = |g: &mut Graph<'a, T>, terms: &[Var]| -> Result<Var> {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        };
        let act_sum = sum_all(g, &act_terms)?;
        let act = g.scale(act_sum, T::from_f64(1.0 / act_tokens as f64));
        let response = if want_response {
            if response_tokens == 0 {
                return Err(Error::contract("batch has no response target tokens"));
            }
            let s = sum_all(g, &resp_terms)?;
            Some(g.scale(s, T::from_f64(1.0 / response_tokens as f64)))
        } else {
            None
        };
        let total = match (mode, response) {
            (LossMode::ActOnly, _) | (_, None) => act,
            (LossMode::ResponseOnly, Some(r)) => r,
            (LossMode::Weighted(alpha), Some(r)) => {
                let a = g.scale(act, T::from_f64(alpha));
                let b = g.scale(r, T::from_f64(1.0 - alpha));
                g.add(a, b)?
            }
            (LossMode::Uncertainty, Some(r)) => {
                let s1 = g.param(store, self.s_act);
                let s2 = g.param(store, self.s_resp);
                uncertainty_loss(g, act, r, s1, s2)?
            }
        };
        Ok(BatchLoss {
            act,
            response,
            total,
            act_tokens,
            response_tokens,
        })
    }

    /// One forward, one backward and one Adam update.
    pub fn train_step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        adam: &mut Adam<T>,
        rows: &[Row<'_>],
        mode: LossMode,
    ) -> Result<StepStats> {
        if rows.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let (stats, grads) = {
            let mut g = Graph::with_frozen(self.frozen(mode));
            let loss = self.batch_loss(&mut g, store, rows, mode)?;
            let stats = StepStats {
                act_loss: g.scalar_value(loss.act).as_f64(),
                response_loss: loss.response.map(|r| g.scalar_value(r).as_f64()).unwrap_or(f64::NAN),
                total: g.scalar_value(loss.total).as_f64(),
                act_tokens: loss.act_tokens,
                response_tokens: loss.response_tokens,
            };
            if !stats.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {}", stats.total)));
            }
            (stats, g.backward(loss.total)?)
        };
        store.accumulate(&grads)?;
        adam.step(store)?;
        store.zero_grads();
        Ok(stats)
    }

    /// `σ² = exp(s)` for the act and response tasks.
    pub fn sigmas<T: Scalar>(&self, store: &ParamStore<T>) -> (f64, f64) {
        (
            store.get(self.s_act).data()[0].as_f64().exp(),
            store.get(self.s_resp).data()[0].as_f64().exp(),
        )
    }

    /// Fresh incremental state for the act decoder.
    pub fn act_start<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        dual: &DualEncoding,
        belief: &[f32],
    ) -> Result<ActCache> {
        Ok(ActCache {
            dec: self.act_decoder.start(g, store, &dual.act)?,
            belief: self.belief_row(g, store, belief)?,
        })
    }

    /// Feeds `token` and returns next-token logits `[1 × A]`.
    pub fn act_step<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        cache: &mut ActCache,
        token: u32,
    ) -> Result<Var> {
        self.check_ids(&[token], self.config.act_vocab_size, "act")?;
        let u = self.act_inputs(g, store, cache.belief, &[token], cache.dec.pos)?;
        let s = self.act_decoder.step(g, store, u, &mut cache.dec)?;
        let f = g.concat_cols(&[s.h, s.c])?;
        self.act_out.forward(g, store, f)
    }

    pub fn response_start<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        dual: &DualEncoding,
        act_hidden: Var,
    ) -> Result<ResponseCache> {
        Ok(ResponseCache {
            dec: self.resp_decoder.start(g, store, &dual.resp)?,
            act_kv: self.act_memory(g, store, act_hidden)?,
        })
    }

    /// Feeds `token` and returns next-token logits `[1 × V]`.
    pub fn response_step<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        cache: &mut ResponseCache,
        token: u32,
    ) -> Result<Var> {
        self.check_ids(&[token], self.config.vocab_size, "response")?;
        let e = embed(g, store, self.word_emb, &[token], cache.dec.pos)?;
        let s = self.resp_decoder.step(g, store, e, &mut cache.dec)?;
        let o = self.act_attn.forward_cross(g, store, s.h, &cache.act_kv, &AttnMask::None)?;
        let f = g.concat_cols(&[s.h, s.c, o.out])?;
        self.resp_out.forward(g, store, f)
    }

    /// Act-attention weights of a teacher-forced response pass.
    pub fn response_trace<T: Scalar>(&self, g: &Graph<'_, T>, out: &ResponseOutput) -> AttentionTrace {
        AttentionTrace::from_graph(g, &out.act_attn)
    }
}

/// Incremental act decoding state.
#[derive(Debug, Clone)]
pub struct ActCache {
    pub dec: DecoderCache,
    pub belief: Var,
}

/// Incremental response decoding state.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    pub dec: DecoderCache,
    pub act_kv: Vec<KeyValue>,
}

impl ResponseCache {
    pub fn self_cache(&self) -> &SelfCache {
        &self.dec.self_cache
    }
}
