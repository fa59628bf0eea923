//! Character-level encoder-decoder transformer with element hooks.
//!
//! A deliberately tiny stand-in for a pretrained seq2seq backbone: learned
//! token + absolute position embeddings, pre-layer-norm encoder and decoder
//! stacks, multi-head attention, GELU feed-forwards, and a linear output
//! head. Tunable elements hook in at fixed points — prompts are prepended to
//! the embedded encoder input (`[meta | prompt | input]`), and adapters wrap
//! each feed-forward sublayer's output (meta-adapter, bias adapter,
//! meta-adapter) before the residual add.
//!
//! Every forward pass builds a fresh graph on a [`Tape`]: parameters are
//! *leased* onto the tape as leaves (gradient-requiring only if their element
//! kind is in the caller's trainable set), and after backward the leaf
//! gradients are accumulated back into the [`ParamStore`]. Frozen parameters
//! never receive gradients, and attention masking guarantees padding
//! invariance: token ids at masked positions cannot change the loss.

use std::collections::HashMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elements::{
    self, adapter_bias_apply, bottleneck_apply, build_prompt_input, ElementKind, ElementSet,
};
use crate::error::{ensure_contract, ensure_input, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::vocab;

/// Backbone geometry. The defaults are the desk-scale configuration used
/// throughout the test suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(
            self.vocab_size > 0
                && self.d_model > 0
                && self.n_enc_layers > 0
                && self.n_dec_layers > 0
                && self.n_heads > 0
                && self.d_ff > 0
                && self.max_seq_len >= 2,
            "model config has a non-positive dimension: {self:?}"
        );
        ensure_contract!(
            self.d_model % self.n_heads == 0,
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        Ok(())
    }

    /// Adapter insertion points: one per transformer layer.
    pub fn adapter_points(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }
}

/// Padded id matrix `[batch, seq]` with a validity mask.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    ids: Vec<usize>,
    mask: Vec<bool>,
    batch: usize,
    seq: usize,
}

impl TokenBatch {
    /// Right-pads rows with `PAD` to the longest row.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<TokenBatch> {
        ensure_contract!(!rows.is_empty(), "token batch needs at least one row");
        let seq = rows.iter().map(|r| r.len()).max().unwrap().max(1);
        let batch = rows.len();
        let mut ids = vec![vocab::PAD; batch * seq];
        let mut mask = vec![false; batch * seq];
        for (b, row) in rows.iter().enumerate() {
            ensure_contract!(!row.is_empty(), "token batch row {b} is empty");
            for (t, &id) in row.iter().enumerate() {
                ids[b * seq + t] = id;
                mask[b * seq + t] = true;
            }
        }
        Ok(TokenBatch { ids, mask, batch, seq })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Mutable token access for tests probing padding invariance.
    pub fn set_id(&mut self, b: usize, t: usize, id: usize) {
        self.ids[b * self.seq + t] = id;
    }

    pub fn is_real(&self, b: usize, t: usize) -> bool {
        self.mask[b * self.seq + t]
    }
}

/// Which elements are currently attached (parameters live in the store;
/// this records the wiring).
#[derive(Debug, Clone, Copy, Default)]
pub struct Attached {
    pub prompt_len: Option<usize>,
    pub meta_prompt_len: Option<usize>,
    pub adapters: bool,
    pub meta_adapters: bool,
    pub bottleneck: usize,
}

impl Attached {
    pub fn prepended_len(&self) -> usize {
        self.prompt_len.unwrap_or(0) + self.meta_prompt_len.unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    cfg: ModelConfig,
    store: ParamStore,
    attached: Attached,
}

impl Seq2SeqModel {
    /// Fresh backbone with seeded random initialization. Embeddings use
    /// N(0, 0.02); projection matrices use Xavier scaling; biases, layer-norm
    /// shifts and the adapter shift vectors start at zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (v, d, f, s) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);

        let embed = |store: &mut ParamStore, name: &str, rows: usize, rng: &mut ChaCha8Rng| {
            store.add(
                name,
                ElementKind::Plm,
                Tensor::new(
                    vec![rows, d],
                    elements::gauss_vec(rng, rows * d, elements::EMBED_INIT_STD),
                    false,
                )
                .unwrap(),
            )
        };
        embed(&mut store, "embed.token.weight", v, &mut rng)?;
        embed(&mut store, "embed.enc_pos.weight", s, &mut rng)?;
        embed(&mut store, "embed.dec_pos.weight", s, &mut rng)?;

        let linear = |store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            let std = (2.0 / (din + dout) as f64).sqrt();
            store.add(
                format!("{prefix}.weight"),
                ElementKind::Plm,
                Tensor::new(vec![din, dout], elements::gauss_vec(rng, din * dout, std), false)?,
            )?;
            store.add(
                format!("{prefix}.bias"),
                ElementKind::Plm,
                Tensor::zeros(vec![dout], false),
            )
        };
        let layer_norm = |store: &mut ParamStore, prefix: &str| -> Result<()> {
            store.add(
                format!("{prefix}.gamma"),
                ElementKind::Plm,
                Tensor::new(vec![d], vec![1.0; d], false)?,
            )?;
            store.add(format!("{prefix}.beta"), ElementKind::Plm, Tensor::zeros(vec![d], false))
        };
        let attention = |store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| -> Result<()> {
            for part in ["q", "k", "v", "o"] {
                linear(store, &format!("{prefix}.{part}"), d, d, rng)?;
            }
            Ok(())
        };
        let feed_forward = |store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| -> Result<()> {
            linear(store, &format!("{prefix}.fc1"), d, f, rng)?;
            linear(store, &format!("{prefix}.fc2"), f, d, rng)
        };

        for i in 0..cfg.n_enc_layers {
            let p = format!("encoder.layer{i}");
            layer_norm(&mut store, &format!("{p}.ln1"))?;
            attention(&mut store, &format!("{p}.attn"), &mut rng)?;
            layer_norm(&mut store, &format!("{p}.ln2"))?;
            feed_forward(&mut store, &format!("{p}.ff"), &mut rng)?;
        }
        layer_norm(&mut store, "encoder.ln_final")?;

        for i in 0..cfg.n_dec_layers {
            let p = format!("decoder.layer{i}");
            layer_norm(&mut store, &format!("{p}.ln1"))?;
            attention(&mut store, &format!("{p}.self_attn"), &mut rng)?;
            layer_norm(&mut store, &format!("{p}.ln2"))?;
            attention(&mut store, &format!("{p}.cross_attn"), &mut rng)?;
            layer_norm(&mut store, &format!("{p}.ln3"))?;
            feed_forward(&mut store, &format!("{p}.ff"), &mut rng)?;
        }
        layer_norm(&mut store, "decoder.ln_final")?;
        linear(&mut store, "output.proj", d, v, &mut rng)?;

        Ok(Seq2SeqModel { cfg, store, attached: Attached::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn attached(&self) -> &Attached {
        &self.attached
    }

    /// Rebuilds a model around an existing store (checkpoint loading).
    pub fn from_parts(cfg: ModelConfig, store: ParamStore, attached: Attached) -> Result<Self> {
        cfg.validate()?;
        Ok(Seq2SeqModel { cfg, store, attached })
    }

    // ---- element attachment ----

    pub fn attach_prompt(&mut self, len: usize, seed: u64) -> Result<()> {
        ensure_contract!(self.attached.prompt_len.is_none(), "prompt already attached");
        ensure_contract!(
            len < self.cfg.max_seq_len,
            "prompt length {len} leaves no room in max_seq_len {}",
            self.cfg.max_seq_len
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        elements::attach_prompt(&mut self.store, len, self.cfg.d_model, &mut rng)?;
        self.attached.prompt_len = Some(len);
        Ok(())
    }

    pub fn attach_meta_prompt(&mut self, len: usize, seed: u64) -> Result<()> {
        ensure_contract!(self.attached.meta_prompt_len.is_none(), "meta-prompt already attached");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        elements::attach_meta_prompt(&mut self.store, len, self.cfg.d_model, &mut rng)?;
        self.attached.meta_prompt_len = Some(len);
        Ok(())
    }

    pub fn attach_adapter_bias(&mut self, seed: u64) -> Result<()> {
        ensure_contract!(!self.attached.adapters, "adapters already attached");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        elements::attach_adapter_bias(
            &mut self.store,
            self.cfg.adapter_points(),
            self.cfg.d_model,
            &mut rng,
        )?;
        self.attached.adapters = true;
        Ok(())
    }

    /// Wraps every attached adapter with a pre and a post bottleneck
    /// meta-adapter.
    pub fn insert_meta_adapters(&mut self, bottleneck: usize, seed: u64) -> Result<()> {
        ensure_contract!(!self.attached.meta_adapters, "meta-adapters already attached");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        elements::attach_meta_adapters(
            &mut self.store,
            self.cfg.adapter_points(),
            self.cfg.d_model,
            bottleneck,
            &mut rng,
        )?;
        self.attached.meta_adapters = true;
        self.attached.bottleneck = bottleneck;
        Ok(())
    }

    /// Closed-form count of every scalar the store should hold given the
    /// current attachments.
    pub fn expected_value_count(&self) -> usize {
        let c = &self.cfg;
        let (v, d, f, s) = (c.vocab_size, c.d_model, c.d_ff, c.max_seq_len);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ff = d * f + f + f * d + d;
        let enc_layer = ln + attn + ln + ff;
        let dec_layer = ln + attn + ln + attn + ln + ff;
        let mut n = v * d // token embedding
            + 2 * s * d // positions
            + c.n_enc_layers * enc_layer + ln
            + c.n_dec_layers * dec_layer + ln
            + d * v + v; // output head
        if let Some(l) = self.attached.prompt_len {
            n += l * d;
        }
        if let Some(l) = self.attached.meta_prompt_len {
            n += l * d;
        }
        if self.attached.adapters {
            n += c.adapter_points() * 2 * d;
        }
        if self.attached.meta_adapters {
            let r = self.attached.bottleneck;
            n += c.adapter_points() * 2 * (d * r + r + r * d + d);
        }
        n
    }

    // ---- encoding helpers ----

    /// Input rows: characters plus a trailing EOS.
    pub fn encode_inputs(inputs: &[&str]) -> Result<TokenBatch> {
        let rows: Vec<Vec<usize>> = inputs
            .iter()
            .map(|s| {
                let mut ids = vocab::encode(s);
                ids.push(vocab::EOS);
                ids
            })
            .collect();
        TokenBatch::from_rows(&rows)
    }

    /// Target rows: raw character ids (BOS/EOS handled by teacher forcing).
    pub fn encode_targets(outputs: &[&str]) -> Vec<Vec<usize>> {
        outputs.iter().map(|s| vocab::encode(s)).collect()
    }

    /// Decoder input (`[BOS] + row`), flattened labels (`row + [EOS]`) and
    /// the label mask for a teacher-forced step.
    pub fn prepare_targets(
        rows: &[Vec<usize>],
        max_seq_len: usize,
    ) -> Result<(TokenBatch, Vec<usize>, Vec<bool>)> {
        ensure_contract!(!rows.is_empty(), "teacher forcing needs at least one target row");
        let t = rows.iter().map(|r| r.len()).max().unwrap() + 1;
        ensure_input!(
            t <= max_seq_len,
            "sequence overflow: target length {} exceeds max_seq_len {}",
            t,
            max_seq_len
        );
        let batch = rows.len();
        let mut dec_rows = Vec::with_capacity(batch);
        let mut labels = vec![vocab::PAD; batch * t];
        let mut mask = vec![false; batch * t];
        for (b, row) in rows.iter().enumerate() {
            let mut dec = Vec::with_capacity(t);
            dec.push(vocab::BOS);
            dec.extend_from_slice(row);
            dec_rows.push(dec); // from_rows pads to t and masks the padding
            for (i, &id) in row.iter().enumerate() {
                labels[b * t + i] = id;
                mask[b * t + i] = true;
            }
            labels[b * t + row.len()] = vocab::EOS;
            mask[b * t + row.len()] = true;
        }
        Ok((TokenBatch::from_rows(&dec_rows)?, labels, mask))
    }

    // ---- forward ----

    /// Teacher-forced logits `[batch, target_seq, vocab]` without gradient
    /// tracking.
    pub fn forward(&self, input: &TokenBatch, dec_in: &TokenBatch) -> Result<(Vec<f64>, Vec<usize>)> {
        let mut g = GraphBuilder::new(self, ElementSet::empty());
        let logits = g.build(input, dec_in)?;
        Ok((g.tape.data(logits).to_vec(), g.tape.shape(logits).to_vec()))
    }

    /// Mean masked cross-entropy of `pairs` without gradient tracking.
    pub fn eval_loss(&self, pairs: &[(String, String)]) -> Result<f64> {
        ensure_contract!(!pairs.is_empty(), "empty batch");
        let inputs: Vec<&str> = pairs.iter().map(|(i, _)| i.as_str()).collect();
        let outputs: Vec<&str> = pairs.iter().map(|(_, o)| o.as_str()).collect();
        let input = Self::encode_inputs(&inputs)?;
        let rows = Self::encode_targets(&outputs);
        let (dec_in, labels, lmask) = Self::prepare_targets(&rows, self.cfg.max_seq_len)?;
        let mut g = GraphBuilder::new(self, ElementSet::empty());
        let logits = g.build(&input, &dec_in)?;
        let (b, t, v) = (dec_in.batch(), dec_in.seq(), self.cfg.vocab_size);
        let flat = g.tape.reshape(logits, vec![b * t, v])?;
        let loss = g.tape.cross_entropy(flat, &labels, &lmask)?;
        Ok(g.tape.data(loss)[0])
    }

    /// One training forward/backward: builds the graph with `trainable`
    /// elements gradient-enabled, runs backward from the batch loss, and
    /// accumulates gradients into the store (existing gradients are *not*
    /// cleared — callers own `zero_grads`). Returns the loss.
    pub fn loss_backward(&mut self, pairs: &[(String, String)], trainable: &ElementSet) -> Result<f64> {
        ensure_contract!(!pairs.is_empty(), "empty batch");
        let inputs: Vec<&str> = pairs.iter().map(|(i, _)| i.as_str()).collect();
        let outputs: Vec<&str> = pairs.iter().map(|(_, o)| o.as_str()).collect();
        let input = Self::encode_inputs(&inputs)?;
        let rows = Self::encode_targets(&outputs);
        let (dec_in, labels, lmask) = Self::prepare_targets(&rows, self.cfg.max_seq_len)?;

        let mut g = GraphBuilder::new(self, *trainable);
        let logits = g.build(&input, &dec_in)?;
        let (b, t, v) = (dec_in.batch(), dec_in.seq(), self.cfg.vocab_size);
        let flat = g.tape.reshape(logits, vec![b * t, v])?;
        let loss = g.tape.cross_entropy(flat, &labels, &lmask)?;
        g.tape.backward(loss)?;
        let loss_value = g.tape.data(loss)[0];

        let grads: Vec<(String, Vec<f64>)> = g
            .leases
            .iter()
            .filter(|(_, _, req)| *req)
            .map(|(name, id, _)| (name.clone(), g.tape.grad(*id)))
            .collect();
        for (name, grad) in grads {
            self.store
                .get_mut(&name)
                .expect("leased parameter vanished")
                .value
                .accumulate_grad(&grad)?;
        }
        Ok(loss_value)
    }

    pub fn zero_grads(&mut self) {
        self.store.clear_grads();
    }

    // ---- decoding ----

    /// Greedy decode: argmax token by token (ties break toward the lowest
    /// id), stopping per sequence at EOS or after `max_len` tokens. The
    /// encoder runs once; decoder steps extend the same graph.
    pub fn greedy_decode(&self, input: &TokenBatch, max_len: usize) -> Result<Vec<Vec<usize>>> {
        ensure_input!(
            max_len + 1 <= self.cfg.max_seq_len,
            "sequence overflow: decode length {} exceeds max_seq_len {}",
            max_len + 1,
            self.cfg.max_seq_len
        );
        let b = input.batch();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        if max_len == 0 {
            return Ok(out);
        }
        let mut g = GraphBuilder::new(self, ElementSet::empty());
        let (enc, enc_mask) = g.build_encoder(input)?;
        let mut done = vec![false; b];
        for step in 0..max_len {
            let dec_rows: Vec<Vec<usize>> = out
                .iter()
                .map(|row| {
                    let mut r = Vec::with_capacity(step + 1);
                    r.push(vocab::BOS);
                    r.extend_from_slice(&row[..row.len().min(step)]);
                    r // from_rows pads finished rows out to the step length
                })
                .collect();
            let dec_in = TokenBatch::from_rows(&dec_rows)?;
            let logits = g.build_decoder(enc, &enc_mask, &dec_in)?;
            let data = g.tape.data(logits);
            let v = self.cfg.vocab_size;
            let t = dec_in.seq();
            for bi in 0..b {
                if done[bi] {
                    continue;
                }
                let row = &data[(bi * t + t - 1) * v..(bi * t + t) * v];
                let next = argmax(row);
                if next == vocab::EOS {
                    done[bi] = true;
                } else {
                    out[bi].push(next);
                    if out[bi].len() >= max_len {
                        done[bi] = true;
                    }
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Greedy decode from raw strings to decoded strings.
    pub fn decode_strings(&self, inputs: &[&str], max_len: usize) -> Result<Vec<String>> {
        let batch = Self::encode_inputs(inputs)?;
        let ids = self.greedy_decode(&batch, max_len)?;
        Ok(ids.iter().map(|row| vocab::decode(row)).collect())
    }
}

/// Index of the largest value; ties keep the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Per-pass graph construction state: the tape plus which parameters have
/// been leased onto it.
struct GraphBuilder<'m> {
    model: &'m Seq2SeqModel,
    trainable: ElementSet,
    tape: Tape,
    leases: Vec<(String, TensorId, bool)>,
    by_name: HashMap<String, TensorId>,
}

impl<'m> GraphBuilder<'m> {
    fn new(model: &'m Seq2SeqModel, trainable: ElementSet) -> Self {
        GraphBuilder {
            model,
            trainable,
            tape: Tape::new(),
            leases: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Puts a parameter on the tape (once — repeat leases share the node so
    /// gradients from all uses accumulate together).
    fn lease(&mut self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.by_name.get(name) {
            return Ok(id);
        }
        let param = self
            .model
            .store
            .get(name)
            .ok_or_else(|| crate::error::Error::contract(format!("missing parameter {name:?}")))?;
        let req = self.trainable.contains(param.kind);
        let tensor = Tensor::new(
            param.value.shape().to_vec(),
            param.value.data().to_vec(),
            req,
        )?;
        let id = self.tape.leaf(tensor);
        self.leases.push((name.to_string(), id, req));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x [b,s,din] @ weight + bias -> [b,s,dout]`.
    fn linear(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let shape = self.tape.shape(x).to_vec();
        let (b, s, din) = (shape[0], shape[1], shape[2]);
        let w = self.lease(&format!("{prefix}.weight"))?;
        let bias = self.lease(&format!("{prefix}.bias"))?;
        let dout = self.tape.shape(w)[1];
        let flat = self.tape.reshape(x, vec![b * s, din])?;
        let y = self.tape.matmul(flat, w)?;
        let y = self.tape.add(y, bias)?;
        self.tape.reshape(y, vec![b, s, dout])
    }

    fn layer_norm(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let gamma = self.lease(&format!("{prefix}.gamma"))?;
        let beta = self.lease(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, gamma, beta, 1e-5)
    }

    /// Multi-head scaled dot-product attention with a `[b, q, k]` key mask.
    fn attention(
        &mut self,
        x_q: TensorId,
        x_kv: TensorId,
        prefix: &str,
        mask: &[bool],
    ) -> Result<TensorId> {
        let h = self.model.cfg.n_heads;
        let d_head = self.model.cfg.d_model / h;
        let q = self.linear(x_q, &format!("{prefix}.q"))?;
        let k = self.linear(x_kv, &format!("{prefix}.k"))?;
        let v = self.linear(x_kv, &format!("{prefix}.v"))?;
        let q = self.tape.split_heads(q, h)?;
        let k = self.tape.split_heads(k, h)?;
        let v = self.tape.split_heads(v, h)?;
        let scores = self.tape.bmm(q, k, true)?;
        let scores = self.tape.scale(scores, 1.0 / (d_head as f64).sqrt())?;
        let probs = self.tape.masked_softmax_last(scores, mask, h)?;
        let ctx = self.tape.bmm(probs, v, false)?;
        let merged = self.tape.merge_heads(ctx, h)?;
        self.linear(merged, &format!("{prefix}.o"))
    }

    fn feed_forward(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let y = self.linear(x, &format!("{prefix}.fc1"))?;
        let y = self.tape.gelu(y)?;
        self.linear(y, &format!("{prefix}.fc2"))
    }

    /// Adapter chain at one insertion point: meta-pre, bias adapter,
    /// meta-post — whichever are attached.
    fn apply_adapters(&mut self, x: TensorId, point: usize) -> Result<TensorId> {
        let mut h = x;
        let a = self.model.attached;
        if a.meta_adapters {
            h = self.bottleneck(h, &format!("meta_adapter.layer{point}.pre"))?;
        }
        if a.adapters {
            let v = self.lease(&format!("adapter.layer{point}.v"))?;
            let w = self.lease(&format!("adapter.layer{point}.alpha.weight"))?;
            h = adapter_bias_apply(&mut self.tape, h, v, w)?;
        }
        if a.meta_adapters {
            h = self.bottleneck(h, &format!("meta_adapter.layer{point}.post"))?;
        }
        Ok(h)
    }

    fn bottleneck(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let dw = self.lease(&format!("{prefix}.down.weight"))?;
        let db = self.lease(&format!("{prefix}.down.bias"))?;
        let uw = self.lease(&format!("{prefix}.up.weight"))?;
        let ub = self.lease(&format!("{prefix}.up.bias"))?;
        bottleneck_apply(&mut self.tape, x, dw, db, uw, ub)
    }

    /// Embeds and encodes the input, returning the encoder output and the
    /// extended (prompt-aware) key validity mask `[b, s]`.
    fn build_encoder(&mut self, input: &TokenBatch) -> Result<(TensorId, Vec<bool>)> {
        let cfg = &self.model.cfg;
        let (b, s0) = (input.batch(), input.seq());
        let added = self.model.attached.prepended_len();
        ensure_input!(
            s0 + added <= cfg.max_seq_len,
            "sequence overflow: input length {} plus {} prompt positions exceeds max_seq_len {}",
            s0,
            added,
            cfg.max_seq_len
        );

        let table = self.lease("embed.token.weight")?;
        let tok = self.tape.embedding(table, input.ids())?;
        let tok = self.tape.reshape(tok, vec![b, s0, cfg.d_model])?;

        let prompt = match self.model.attached.prompt_len {
            Some(_) => Some(self.lease("prompt.embed")?),
            None => None,
        };
        let meta = match self.model.attached.meta_prompt_len {
            Some(_) => Some(self.lease("meta_prompt.embed")?),
            None => None,
        };
        let (mut x, added_actual) = build_prompt_input(&mut self.tape, tok, meta, prompt)?;
        debug_assert_eq!(added, added_actual);
        let s = s0 + added;

        let pos_table = self.lease("embed.enc_pos.weight")?;
        let pos = self.tape.slice_rows(pos_table, 0, s)?;
        x = self.tape.add(x, pos)?;

        // prompt positions are always-valid keys
        let mut key_mask = vec![true; b * s];
        for bi in 0..b {
            for t in 0..s0 {
                key_mask[bi * s + added + t] = input.is_real(bi, t);
            }
        }
        let attn_mask = expand_key_mask(&key_mask, b, s, s);

        for i in 0..cfg.n_enc_layers {
            let p = format!("encoder.layer{i}");
            let h = self.layer_norm(x, &format!("{p}.ln1"))?;
            let h = self.attention(h, h, &format!("{p}.attn"), &attn_mask)?;
            x = self.tape.add(x, h)?;
            let h = self.layer_norm(x, &format!("{p}.ln2"))?;
            let h = self.feed_forward(h, &format!("{p}.ff"))?;
            let h = self.apply_adapters(h, i)?;
            x = self.tape.add(x, h)?;
        }
        let x = self.layer_norm(x, "encoder.ln_final")?;
        Ok((x, key_mask))
    }

    /// Runs the decoder against a finished encoder state, returning logits
    /// `[b, t, vocab]`.
    fn build_decoder(
        &mut self,
        enc: TensorId,
        enc_key_mask: &[bool],
        dec_in: &TokenBatch,
    ) -> Result<TensorId> {
        let cfg = &self.model.cfg;
        let (b, t) = (dec_in.batch(), dec_in.seq());
        ensure_input!(
            t <= cfg.max_seq_len,
            "sequence overflow: decoder length {} exceeds max_seq_len {}",
            t,
            cfg.max_seq_len
        );
        let s = self.tape.shape(enc)[1];

        let table = self.lease("embed.token.weight")?;
        let tok = self.tape.embedding(table, dec_in.ids())?;
        let mut x = self.tape.reshape(tok, vec![b, t, cfg.d_model])?;
        let pos_table = self.lease("embed.dec_pos.weight")?;
        let pos = self.tape.slice_rows(pos_table, 0, t)?;
        x = self.tape.add(x, pos)?;

        // causal + key-validity self-attention mask
        let mut self_mask = vec![false; b * t * t];
        for bi in 0..b {
            for q in 0..t {
                for k in 0..=q {
                    self_mask[(bi * t + q) * t + k] = dec_in.is_real(bi, k);
                }
            }
        }
        let cross_mask = expand_key_mask(enc_key_mask, b, t, s);

        for i in 0..cfg.n_dec_layers {
            let p = format!("decoder.layer{i}");
            let h = self.layer_norm(x, &format!("{p}.ln1"))?;
            let h = self.attention(h, h, &format!("{p}.self_attn"), &self_mask)?;
            x = self.tape.add(x, h)?;
            let h = self.layer_norm(x, &format!("{p}.ln2"))?;
            let h = self.attention(h, enc, &format!("{p}.cross_attn"), &cross_mask)?;
            x = self.tape.add(x, h)?;
            let h = self.layer_norm(x, &format!("{p}.ln3"))?;
            let h = self.feed_forward(h, &format!("{p}.ff"))?;
            let h = self.apply_adapters(h, cfg.n_enc_layers + i)?;
            x = self.tape.add(x, h)?;
        }
        let x = self.layer_norm(x, "decoder.ln_final")?;
        self.linear(x, "output.proj")
    }

    fn build(&mut self, input: &TokenBatch, dec_in: &TokenBatch) -> Result<TensorId> {
        let (enc, key_mask) = self.build_encoder(input)?;
        self.build_decoder(enc, &key_mask, dec_in)
    }
}

/// Tiles a `[b, s]` key-validity mask into the `[b, q, k]` layout attention
/// expects (every query row shares the same allowed keys).
fn expand_key_mask(key_mask: &[bool], b: usize, q: usize, k: usize) -> Vec<bool> {
    let mut out = vec![false; b * q * k];
    for bi in 0..b {
        let row = &key_mask[bi * k..(bi + 1) * k];
        for qi in 0..q {
            out[(bi * q + qi) * k..(bi * q + qi + 1) * k].copy_from_slice(row);
        }
    }
    out
}
