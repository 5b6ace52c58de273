//! Toy decoder-only transformer with frozen base weights and LoRA on the
//! q, k, v projections.
//!
//! Every non-adapter weight (embedding, attention output, MLP, head) is held
//! frozen and, when a [`QuantConfig`] is given, block-quantized. Attention is
//! causal multi-head with grouped k/v heads; normalization is unit-gain RMS
//! norm; the MLP is `down · silu(up · h)`. There are no positional
//! embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::lora::{self, AdaptedLinear, Binding, FrozenWeight, LoraAdapter, Mode};
use crate::numerics::{autograd::log_sum_exp, bf16, Graph, NodeId, Rng, Tensor, RNG_ALGORITHM};
use crate::quant::{self, CodebookId, QuantConfig, QuantizedTensor};

pub const RMS_EPS: f64 = 1e-6;
/// Name of the adapter the model builder attaches to every projection.
pub const DEFAULT_ADAPTER: &str = "default";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on frozen elements a desk-scale build may allocate.
pub const MAX_BASE_ELEMENTS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_kv: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub d_ff: usize,
    pub preset_id: Option<String>,
}

impl ArchConfig {
    pub fn llama3_8b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            d_kv: 1024,
            n_heads: 32,
            vocab_size: 128_256,
            max_seq: 131_072,
            d_ff: 14_336,
            preset_id: Some("llama3-8b".into()),
        }
    }

    pub fn llama3_70b() -> Self {
        Self {
            n_layers: 80,
            d_model: 8192,
            d_kv: 1024,
            n_heads: 64,
            vocab_size: 128_256,
            max_seq: 131_072,
            d_ff: 28_672,
            preset_id: Some("llama3-70b".into()),
        }
    }

    /// Byte-level toy model used for end-to-end runs.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            d_kv: 16,
            n_heads: 4,
            vocab_size: 256,
            max_seq: 64,
            d_ff: 64,
            preset_id: Some("toy".into()),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "llama3-8b" => Ok(Self::llama3_8b()),
            "llama3-70b" => Ok(Self::llama3_70b()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown arch preset `{other}` (expected llama3-8b, llama3-70b or toy)"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.d_kv / self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.d_model,
            self.d_kv,
            self.n_heads,
            self.vocab_size,
            self.max_seq,
            self.d_ff,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(
                "architecture dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_kv > self.d_model
            || !self.d_kv.is_multiple_of(self.head_dim())
            || !self.n_heads.is_multiple_of(self.n_kv_heads())
        {
            return Err(Error::Config(format!(
                "d_kv {} must be a multiple of head_dim {} dividing d_model {}",
                self.d_kv,
                self.head_dim(),
                self.d_model
            )));
        }
        Ok(())
    }

    /// `(n_in, n_out)` of every LoRA-adapted projection: q, k, v per layer.
    pub fn lora_dims(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .flat_map(|_| {
                [
                    (self.d_model, self.d_model),
                    (self.d_model, self.d_kv),
                    (self.d_model, self.d_kv),
                ]
            })
            .collect()
    }

    fn base_elements(&self) -> usize {
        let per_layer = self.d_model * (self.d_model + 2 * self.d_kv)
            + self.d_model * self.d_model
            + 2 * self.d_model * self.d_ff;
        self.n_layers * per_layer + 2 * self.vocab_size * self.d_model
    }
}

/// LoRA hyperparameters for a build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub q: AdaptedLinear,
    pub k: AdaptedLinear,
    pub v: AdaptedLinear,
    pub o: FrozenWeight,
    pub up: FrozenWeight,
    pub down: FrozenWeight,
}

impl Block {
    fn projections(&self) -> [(&'static str, &AdaptedLinear); 3] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v)]
    }

    fn projections_mut(&mut self) -> [(&'static str, &mut AdaptedLinear); 3] {
        [("q", &mut self.q), ("k", &mut self.k), ("v", &mut self.v)]
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub arch: ArchConfig,
    pub quant: Option<QuantConfig>,
    pub lora: LoraConfig,
    pub seed: u64,
    pub embedding: FrozenWeight,
    pub layers: Vec<Block>,
    pub head: FrozenWeight,
}

/// One causal-LM training example: inputs and per-position next-token
/// targets (`None` where the loss is masked).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    /// Builds a next-token example from a prompt and its answer; only answer
    /// tokens contribute to the loss.
    pub fn from_prompt_answer(prompt: &[usize], answer: &[usize]) -> Self {
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(answer);
        let n = seq.len().saturating_sub(1);
        let tokens = seq[..n].to_vec();
        let targets = (0..n)
            .map(|i| (i + 1 >= prompt.len()).then_some(seq[i + 1]))
            .collect();
        Self { tokens, targets }
    }
}

/// Byte-level tokenization.
pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn decode_tokens(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn frozen(t: Tensor, quant: Option<QuantConfig>) -> Result<FrozenWeight> {
    match quant {
        Some(cfg) => FrozenWeight::quantized(quant::quantize(&t, cfg)?),
        None => FrozenWeight::dense(t.round_bf16()),
    }
}

/// Samples base weights from `seed`, freezes them (quantized when `quant` is
/// given, otherwise BF16 dense) and attaches a fresh adapter to q, k and v.
pub fn build_model(
    arch: &ArchConfig,
    quant: Option<QuantConfig>,
    lora_cfg: LoraConfig,
    seed: u64,
) -> Result<ToyModel> {
    arch.validate()?;
    if arch.base_elements() > MAX_BASE_ELEMENTS {
        return Err(Error::Config(format!(
            "architecture needs {} frozen elements, desk-scale limit is {MAX_BASE_ELEMENTS}",
            arch.base_elements()
        )));
    }
    let mut rng = Rng::new(seed);
    let d = arch.d_model;
    let lin = |rng: &mut Rng, n_out: usize, n_in: usize| {
        rng.normal_tensor(&[n_out, n_in], 1.0 / (n_in as f64).sqrt())
    };

    let embedding = frozen(rng.normal_tensor(&[arch.vocab_size, d], 1.0), quant)?;
    let mut layers = Vec::with_capacity(arch.n_layers);
    for _ in 0..arch.n_layers {
        let q = frozen(lin(&mut rng, d, d), quant)?;
        let k = frozen(lin(&mut rng, arch.d_kv, d), quant)?;
        let v = frozen(lin(&mut rng, arch.d_kv, d), quant)?;
        let o = frozen(lin(&mut rng, d, d), quant)?;
        let up = frozen(lin(&mut rng, arch.d_ff, d), quant)?;
        let down = frozen(lin(&mut rng, d, arch.d_ff), quant)?;
        layers.push(Block {
            q: AdaptedLinear::new(q),
            k: AdaptedLinear::new(k),
            v: AdaptedLinear::new(v),
            o,
            up,
            down,
        });
    }
    let head = frozen(lin(&mut rng, arch.vocab_size, d), quant)?;

    let mut adapter_rng = Rng::derived(seed, 1);
    for block in &mut layers {
        for (_, proj) in block.projections_mut() {
            let a = lora::init_adapter(
                DEFAULT_ADAPTER,
                proj.base.n_in(),
                proj.base.n_out(),
                lora_cfg.rank,
                lora_cfg.alpha,
                lora_cfg.dropout,
                &mut adapter_rng,
            )?;
            proj.attach(a)?;
        }
    }

    Ok(ToyModel {
        arch: arch.clone(),
        quant,
        lora: lora_cfg,
        seed,
        embedding,
        layers,
        head,
    })
}

fn param_name(layer: usize, proj: &str, adapter: &str, factor: &str) -> String {
    format!("layers.{layer}.{proj}.{adapter}.{factor}")
}

impl ToyModel {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.arch.max_seq {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.arch.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.arch.vocab_size) {
            return Err(Error::Vocabulary {
                token: t,
                vocab: self.arch.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embeddings, `seq × d_model`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let table = self.embedding.materialize()?;
        let mut data = Vec::with_capacity(tokens.len() * self.arch.d_model);
        for &t in tokens {
            data.extend_from_slice(table.row(t));
        }
        Tensor::new(vec![tokens.len(), self.arch.d_model], data)
    }

    /// Records one transformer block on `x` (`seq × d_model`).
    pub fn block_graph(
        &self,
        g: &mut Graph,
        layer: usize,
        x: NodeId,
        binding: Binding,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let block = &self.layers[layer];
        let hd = self.arch.head_dim();
        let group = self.arch.n_heads / self.arch.n_kv_heads();

        let h = g.rms_norm(x, RMS_EPS)?;
        let q = block
            .q
            .forward_graph(g, h, &format!("layers.{layer}.q"), binding, mode, rng)?;
        let k = block
            .k
            .forward_graph(g, h, &format!("layers.{layer}.k"), binding, mode, rng)?;
        let v = block
            .v
            .forward_graph(g, h, &format!("layers.{layer}.v"), binding, mode, rng)?;

        let mut heads = Vec::with_capacity(self.arch.n_heads);
        for i in 0..self.arch.n_heads {
            let j = i / group;
            let qh = g.slice_cols(q, i * hd, (i + 1) * hd)?;
            let kh = g.slice_cols(k, j * hd, (j + 1) * hd)?;
            let vh = g.slice_cols(v, j * hd, (j + 1) * hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
            let probs = g.causal_softmax(scores)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let attn = g.concat_cols(&heads)?;
        let o_t = g.constant(block.o.transposed()?.clone());
        let attn = g.matmul(attn, o_t)?;
        let x = g.add(x, attn)?;

        let h = g.rms_norm(x, RMS_EPS)?;
        let up_t = g.constant(block.up.transposed()?.clone());
        let down_t = g.constant(block.down.transposed()?.clone());
        let u = g.matmul(h, up_t)?;
        let u = g.silu(u);
        let m = g.matmul(u, down_t)?;
        g.add(x, m)
    }

    /// Final norm and vocabulary projection.
    pub fn head_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.rms_norm(x, RMS_EPS)?;
        let w_t = g.constant(self.head.transposed()?.clone());
        g.matmul(h, w_t)
    }

    /// Records the full forward pass and returns the logits node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        binding: Binding,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let mut x = g.constant(self.embed(tokens)?);
        for layer in 0..self.layers.len() {
            x = self.block_graph(g, layer, x, binding, mode, rng)?;
        }
        self.head_graph(g, x)
    }

    /// Eval-mode logits, `seq × vocab`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_graph(
            &mut g,
            tokens,
            Binding::Constant,
            Mode::Eval,
            &mut Rng::new(0),
        )?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode logits for each sequence of a batch.
    pub fn forward_batch(&self, batch: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        batch.iter().map(|s| self.forward(s)).collect()
    }

    /// Loss of one example and its gradient with respect to every adapter
    /// factor. Dropout draws from `rng`.
    pub fn loss_and_grads(
        &self,
        example: &Example,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let logits = self.forward_graph(&mut g, &example.tokens, Binding::Trainable, mode, rng)?;
        let loss = g.cross_entropy(logits, &example.targets)?;
        let names = self.param_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let grads = g.backward(loss, &refs)?;
        Ok((g.value(loss).data()[0], grads))
    }

    /// Eval-mode loss of one example.
    pub fn example_loss(&self, example: &Example) -> Result<f64> {
        let logits = self.forward(&example.tokens)?;
        loss(&logits, &example.targets)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_keys().collect()
    }

    /// All trainable tensors keyed `layers.{i}.{q|k|v}.{adapter}.{A|B}`.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, block) in self.layers.iter().enumerate() {
            for (p, proj) in block.projections() {
                for a in &proj.adapters {
                    out.insert(param_name(i, p, &a.name, "A"), a.a.clone());
                    out.insert(param_name(i, p, &a.name, "B"), a.b.clone());
                }
            }
        }
        out
    }

    /// Overwrites adapter factors from a map produced by [`ToyModel::params`].
    pub fn set_params(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, block) in self.layers.iter_mut().enumerate() {
            for (p, proj) in block.projections_mut() {
                for a in &mut proj.adapters {
                    for (factor, slot) in [("A", &mut a.a), ("B", &mut a.b)] {
                        let name = param_name(i, p, &a.name, factor);
                        let t = params
                            .get(&name)
                            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                        if t.shape() != slot.shape() {
                            return Err(Error::dim("set_params", slot.shape(), t.shape()));
                        }
                        *slot = t.clone();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params().values().map(Tensor::numel).sum()
    }

    /// Adapters in a fixed order, named `layers.{i}.{proj}.{adapter}`.
    pub fn adapters(&self) -> Vec<LoraAdapter> {
        let mut out = Vec::new();
        for (i, block) in self.layers.iter().enumerate() {
            for (p, proj) in block.projections() {
                for a in &proj.adapters {
                    let mut a = a.clone();
                    a.name = format!("layers.{i}.{p}.{}", a.name);
                    out.push(a);
                }
            }
        }
        out
    }

    /// Replaces adapters with ones loaded from an adapter file produced by
    /// [`ToyModel::adapters`].
    pub fn load_adapters(&mut self, adapters: &[LoraAdapter]) -> Result<()> {
        let mut by_name: BTreeMap<&str, &LoraAdapter> =
            adapters.iter().map(|a| (a.name.as_str(), a)).collect();
        for (i, block) in self.layers.iter_mut().enumerate() {
            for (p, proj) in block.projections_mut() {
                for slot in &mut proj.adapters {
                    let key = format!("layers.{i}.{p}.{}", slot.name);
                    let a = by_name.remove(key.as_str()).ok_or_else(|| {
                        Error::Config(format!("adapter file has no entry `{key}`"))
                    })?;
                    if a.a.shape() != slot.a.shape() || a.b.shape() != slot.b.shape() {
                        return Err(Error::dim("load_adapters", slot.a.shape(), a.a.shape()));
                    }
                    slot.a = a.a.clone();
                    slot.b = a.b.clone();
                    slot.alpha = a.alpha;
                    slot.dropout_p = a.dropout_p;
                }
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!(
                "adapter file entry `{extra}` matches no projection"
            )));
        }
        Ok(())
    }

    /// Sets every adapter's `B` to zero, recovering the base model.
    pub fn zero_adapters(&mut self) {
        for block in &mut self.layers {
            for (_, proj) in block.projections_mut() {
                for a in &mut proj.adapters {
                    a.b = Tensor::zeros(a.b.shape());
                }
            }
        }
    }

    fn frozen_weights(&self) -> Vec<(String, &FrozenWeight)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.q"), &b.q.base));
            out.push((format!("layers.{i}.k"), &b.k.base));
            out.push((format!("layers.{i}.v"), &b.v.base));
            out.push((format!("layers.{i}.o"), &b.o));
            out.push((format!("layers.{i}.up"), &b.up));
            out.push((format!("layers.{i}.down"), &b.down));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// SHA-256 over every frozen payload, hex encoded.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, w) in self.frozen_weights() {
            h.update(name.as_bytes());
            h.update(w.payload_bytes());
        }
        hex(&h.finalize())
    }

    /// SHA-256 over every trainable tensor, hex encoded.
    pub fn params_hash(&self) -> String {
        params_hash(&self.params())
    }

    /// Bytes the frozen weights occupy at rest.
    pub fn base_bytes(&self) -> usize {
        self.frozen_weights()
            .iter()
            .map(|(_, w)| w.stored_bytes())
            .sum()
    }

    /// Greedy decoding: appends up to `max_new` argmax tokens, stopping
    /// early after `stop`.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let start = seq.len().saturating_sub(self.arch.max_seq);
            let logits = self.forward(&seq[start..])?;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            out.push(next);
            if Some(next) == stop {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn params_hash(params: &BTreeMap<String, Tensor>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        h.update(t.to_le_bytes());
    }
    hex(&h.finalize())
}

/// Mean token cross-entropy of `logits` (`seq × vocab`) against `targets`;
/// masked positions are skipped.
pub fn loss(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::dim("loss", logits.shape(), &[targets.len()]));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= logits.cols() {
                return Err(Error::Vocabulary {
                    token: t,
                    vocab: logits.cols(),
                });
            }
            let row = logits.row(i);
            total += log_sum_exp(row) - row[t];
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

fn write_frozen(w: &mut ByteWriter, name: &str, fw: &FrozenWeight) {
    w.str(name);
    w.u32(fw.n_out() as u32);
    w.u32(fw.n_in() as u32);
    match fw.as_quantized() {
        Some(q) => {
            w.u8(q.config().bits);
            w.u8(match q.config().codebook {
                CodebookId::IntAbsmax => 0,
                CodebookId::Nf4 => 1,
            });
            w.u32(q.config().block_size as u32);
            w.u64(q.packed_codes().len() as u64);
            w.bytes(q.packed_codes());
            w.u64(q.scales().len() as u64);
            for &s in q.scales() {
                w.f32(s);
            }
        }
        None => {
            w.u8(16);
            w.u8(0);
            w.u32(0);
            let t = fw.as_dense().expect("dense storage");
            w.u64(2 * t.numel() as u64);
            for &v in t.data() {
                w.u16(bf16::to_bits(v));
            }
        }
    }
}

fn read_frozen(r: &mut ByteReader<'_>, expected: &str) -> Result<FrozenWeight> {
    let at = r.offset();
    let name = r.str("tensor name")?;
    if name != expected {
        return Err(Error::format(
            at,
            format!("expected tensor `{expected}`, found `{name}`"),
        ));
    }
    let n_out = r.u32("rows")? as usize;
    let n_in = r.u32("cols")? as usize;
    let at = r.offset();
    let bits = r.u8("bits")?;
    let book = r.u8("codebook")?;
    let block = r.u32("block size")? as usize;
    if bits == 16 {
        let n = r.u64("payload length")? as usize;
        if n != 2 * n_out * n_in {
            return Err(Error::format(
                at,
                format!("dense payload of {n} bytes for {n_out}x{n_in}"),
            ));
        }
        let mut data = Vec::with_capacity(n_out * n_in);
        for _ in 0..n_out * n_in {
            data.push(bf16::from_bits(r.u16("dense payload")?));
        }
        return FrozenWeight::dense(Tensor::new(vec![n_out, n_in], data)?.round_bf16());
    }
    let codebook = match book {
        0 => CodebookId::IntAbsmax,
        1 => CodebookId::Nf4,
        other => {
            return Err(Error::format(
                at + 1,
                format!("unknown codebook id {other}"),
            ))
        }
    };
    let cfg =
        QuantConfig::new(bits, block, codebook).map_err(|e| Error::format(at, e.to_string()))?;
    let n_codes = r.u64("code length")? as usize;
    let codes = r.take(n_codes, "codes")?.to_vec();
    let n_scales = r.u64("scale count")? as usize;
    let mut scales = Vec::with_capacity(n_scales.min(1 << 24));
    for _ in 0..n_scales {
        scales.push(r.f32("scales")?);
    }
    let q = QuantizedTensor::from_parts(vec![n_out, n_in], codes, scales, cfg).map_err(
        |e| match e {
            Error::Format { offset, message } => Error::format(at + offset, message),
            other => other,
        },
    )?;
    FrozenWeight::quantized(q)
}

/// Serializes the model: header, quantized base payloads, then the adapter
/// file bytes.
pub fn encode_checkpoint(model: &ToyModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let a = &model.arch;
    for v in [
        a.n_layers,
        a.d_model,
        a.d_kv,
        a.n_heads,
        a.vocab_size,
        a.max_seq,
        a.d_ff,
    ] {
        w.u32(v as u32);
    }
    w.str(a.preset_id.as_deref().unwrap_or(""));
    w.u32(model.lora.rank as u32);
    w.f32(model.lora.alpha as f32);
    w.f32(model.lora.dropout as f32);
    w.u64(model.seed);
    w.str(RNG_ALGORITHM);
    for (name, fw) in model.frozen_weights() {
        write_frozen(&mut w, &name, fw);
    }
    let adapters = lora::encode_adapters(&model.adapters());
    w.u64(adapters.len() as u64);
    w.bytes(&adapters);
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32("architecture")? as usize;
    }
    let preset = r.str("preset")?;
    let arch = ArchConfig {
        n_layers: dims[0],
        d_model: dims[1],
        d_kv: dims[2],
        n_heads: dims[3],
        vocab_size: dims[4],
        max_seq: dims[5],
        d_ff: dims[6],
        preset_id: (!preset.is_empty()).then_some(preset),
    };
    arch.validate()
        .map_err(|e| Error::format(8, e.to_string()))?;
    let lora_cfg = LoraConfig {
        rank: r.u32("rank")? as usize,
        alpha: r.f32_decimal("alpha")?,
        dropout: r.f32_decimal("dropout")?,
    };
    let seed = r.u64("seed")?;
    let _rng_algorithm = r.str("rng algorithm")?;

    let embedding = read_frozen(&mut r, "embedding")?;
    let mut layers = Vec::with_capacity(arch.n_layers);
    for i in 0..arch.n_layers {
        let q = read_frozen(&mut r, &format!("layers.{i}.q"))?;
        let k = read_frozen(&mut r, &format!("layers.{i}.k"))?;
        let v = read_frozen(&mut r, &format!("layers.{i}.v"))?;
        let o = read_frozen(&mut r, &format!("layers.{i}.o"))?;
        let up = read_frozen(&mut r, &format!("layers.{i}.up"))?;
        let down = read_frozen(&mut r, &format!("layers.{i}.down"))?;
        layers.push(Block {
            q: AdaptedLinear::new(q),
            k: AdaptedLinear::new(k),
            v: AdaptedLinear::new(v),
            o,
            up,
            down,
        });
    }
    let head = read_frozen(&mut r, "head")?;
    let quant = embedding.as_quantized().map(|q| q.config());

    let n = r.u64("adapter section length")? as usize;
    let at = r.offset();
    let adapters = lora::decode_adapters(r.take(n, "adapter section")?).map_err(|e| match e {
        Error::Format { offset, message } => Error::format(at + offset, message),
        other => other,
    })?;
    r.finish()?;

    for a in &adapters {
        let mut parts = a.name.splitn(4, '.');
        let (Some("layers"), Some(i), Some(p), Some(local)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::format(
                at,
                format!("adapter name `{}` is not layers.<i>.<proj>.<name>", a.name),
            ));
        };
        let i: usize = i
            .parse()
            .ok()
            .filter(|&i| i < layers.len())
            .ok_or_else(|| {
                Error::format(at, format!("adapter `{}` names a missing layer", a.name))
            })?;
        let proj = match p {
            "q" => &mut layers[i].q,
            "k" => &mut layers[i].k,
            "v" => &mut layers[i].v,
            _ => {
                return Err(Error::format(
                    at,
                    format!("adapter `{}` targets unknown projection", a.name),
                ))
            }
        };
        let mut a = a.clone();
        a.name = local.to_string();
        proj.attach(a)?;
    }

    Ok(ToyModel {
        arch,
        quant,
        lora: lora_cfg,
        seed,
        embedding,
        layers,
        head,
    })
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
