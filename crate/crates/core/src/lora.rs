//! Low-rank adapters over frozen (optionally quantized) weights.
//!
//! The adapted projection is never merged: the forward pass computes
//! `y = W0·x + (alpha / r)·B·A·drop(x)` for every attached adapter, which is
//! what lets several named adapters share one frozen base.

use std::path::Path;
use std::sync::OnceLock;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{bf16, Graph, NodeId, Rng, Tensor};
use crate::quant::{self, QuantizedTensor};

/// Standard deviation of the Gaussian used for `A` at initialization.
pub const A_INIT_STD: f64 = 0.02;

pub const ADAPTER_MAGIC: &[u8; 4] = b"FLRA";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable `(A, B)` pair. `A` is `r × n_in`, `B` is `n_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl LoraAdapter {
    /// Wraps explicit factors, validating their shapes against each other.
    pub fn from_factors(
        name: impl Into<String>,
        a: Tensor,
        b: Tensor,
        alpha: f64,
        dropout_p: f64,
    ) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.cols() {
            return Err(Error::dim("lora factors", a.shape(), b.shape()));
        }
        let (r, n_in, n_out) = (a.rows(), a.cols(), b.rows());
        check_rank(r, n_in, n_out)?;
        check_hyper(alpha, dropout_p)?;
        Ok(Self {
            name: name.into(),
            a,
            b,
            alpha,
            dropout_p,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn n_in(&self) -> usize {
        self.a.cols()
    }

    pub fn n_out(&self) -> usize {
        self.b.rows()
    }

    /// `alpha / r`, the factor applied to `B·A`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.n_in() + self.n_out())
    }

    /// `(alpha / r) · B · A`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling()))
    }

    /// Rounds both factors to BF16, the precision they are stored at.
    pub fn round_bf16(&mut self) {
        self.a = self.a.round_bf16();
        self.b = self.b.round_bf16();
    }
}

fn check_rank(r: usize, n_in: usize, n_out: usize) -> Result<()> {
    if r == 0 || n_in == 0 || n_out == 0 || r > n_in.min(n_out) {
        return Err(Error::Rank {
            rank: r,
            n_in,
            n_out,
        });
    }
    Ok(())
}

fn check_hyper(alpha: f64, dropout_p: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!(
            "dropout must be in [0, 1), got {dropout_p}"
        )));
    }
    Ok(())
}

/// New adapter with `A ~ N(0, 0.02²)` drawn from `rng` and `B = 0`, so the
/// adapted layer starts out identical to its base.
pub fn init_adapter(
    name: impl Into<String>,
    n_in: usize,
    n_out: usize,
    r: usize,
    alpha: f64,
    dropout_p: f64,
    rng: &mut Rng,
) -> Result<LoraAdapter> {
    check_rank(r, n_in, n_out)?;
    check_hyper(alpha, dropout_p)?;
    Ok(LoraAdapter {
        name: name.into(),
        a: rng.normal_tensor(&[r, n_in], A_INIT_STD),
        b: Tensor::zeros(&[n_out, r]),
        alpha,
        dropout_p,
    })
}

/// Frozen `n_out × n_in` base weight, dense or quantized. The dequantized
/// (and transposed) form is materialized on first use and cached.
#[derive(Debug, Clone)]
pub struct FrozenWeight {
    storage: Storage,
    dense: OnceLock<Tensor>,
    dense_t: OnceLock<Tensor>,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(Tensor),
    Quantized(QuantizedTensor),
}

impl FrozenWeight {
    pub fn dense(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::dim("frozen weight", w.shape(), &[0, 0]));
        }
        Ok(Self {
            storage: Storage::Dense(w),
            dense: OnceLock::new(),
            dense_t: OnceLock::new(),
        })
    }

    pub fn quantized(q: QuantizedTensor) -> Result<Self> {
        if q.shape().len() != 2 {
            return Err(Error::dim("frozen weight", q.shape(), &[0, 0]));
        }
        Ok(Self {
            storage: Storage::Quantized(q),
            dense: OnceLock::new(),
            dense_t: OnceLock::new(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        match &self.storage {
            Storage::Dense(t) => t.shape(),
            Storage::Quantized(q) => q.shape(),
        }
    }

    pub fn n_out(&self) -> usize {
        self.shape()[0]
    }

    pub fn n_in(&self) -> usize {
        self.shape()[1]
    }

    pub fn as_quantized(&self) -> Option<&QuantizedTensor> {
        match &self.storage {
            Storage::Quantized(q) => Some(q),
            Storage::Dense(_) => None,
        }
    }

    pub fn as_dense(&self) -> Option<&Tensor> {
        match &self.storage {
            Storage::Dense(t) => Some(t),
            Storage::Quantized(_) => None,
        }
    }

    /// The weight as a dense matrix, dequantized on first use and cached.
    pub fn materialize(&self) -> Result<&Tensor> {
        match &self.storage {
            Storage::Dense(t) => Ok(t),
            Storage::Quantized(q) => {
                if let Some(t) = self.dense.get() {
                    return Ok(t);
                }
                let t = quant::dequantize(q)?;
                Ok(self.dense.get_or_init(|| t))
            }
        }
    }

    /// `W0ᵀ`, cached after the first call.
    pub fn transposed(&self) -> Result<&Tensor> {
        if let Some(t) = self.dense_t.get() {
            return Ok(t);
        }
        let t = self.materialize()?.transpose()?;
        Ok(self.dense_t.get_or_init(|| t))
    }

    /// Bytes the weight occupies at rest.
    pub fn stored_bytes(&self) -> usize {
        match &self.storage {
            Storage::Dense(t) => 2 * t.numel(),
            Storage::Quantized(q) => q.packed_bytes(),
        }
    }

    /// Byte image used for hashing the frozen payload.
    pub fn payload_bytes(&self) -> Vec<u8> {
        match &self.storage {
            Storage::Dense(t) => t.to_le_bytes(),
            Storage::Quantized(q) => {
                let mut out = q.packed_codes().to_vec();
                for s in q.scales() {
                    out.extend_from_slice(&s.to_le_bytes());
                }
                out
            }
        }
    }
}

/// A frozen projection with zero or more LoRA adapters attached.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    pub base: FrozenWeight,
    pub adapters: Vec<LoraAdapter>,
}

/// Where adapter factors enter a graph: as trainable parameters named
/// `{prefix}.{adapter}.A|B`, or as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Constant,
}

impl AdaptedLinear {
    pub fn new(base: FrozenWeight) -> Self {
        Self {
            base,
            adapters: Vec::new(),
        }
    }

    /// Attaches an adapter after checking it fits the base.
    pub fn attach(&mut self, adapter: LoraAdapter) -> Result<()> {
        if adapter.n_in() != self.base.n_in() || adapter.n_out() != self.base.n_out() {
            return Err(Error::dim(
                "attach adapter",
                self.base.shape(),
                &[adapter.n_out(), adapter.n_in()],
            ));
        }
        if self.adapters.iter().any(|a| a.name == adapter.name) {
            return Err(Error::Config(format!(
                "adapter `{}` already attached",
                adapter.name
            )));
        }
        self.adapters.push(adapter);
        Ok(())
    }

    /// Records the adapted projection of the `m × n_in` rows in `x`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        prefix: &str,
        binding: Binding,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let xv = g.value(x);
        if xv.shape().len() != 2 || xv.cols() != self.base.n_in() {
            return Err(Error::dim("lora_forward", xv.shape(), self.base.shape()));
        }
        let rows = xv.rows();
        let w_t = g.constant(self.base.transposed()?.clone());
        let mut y = g.matmul(x, w_t)?;
        for adapter in &self.adapters {
            let (a, b) = match binding {
                Binding::Trainable => (
                    g.param(format!("{prefix}.{}.A", adapter.name), adapter.a.clone()),
                    g.param(format!("{prefix}.{}.B", adapter.name), adapter.b.clone()),
                ),
                Binding::Constant => (g.constant(adapter.a.clone()), g.constant(adapter.b.clone())),
            };
            let input = if mode == Mode::Train && adapter.dropout_p > 0.0 {
                let mask = dropout_mask(&[rows, self.base.n_in()], adapter.dropout_p, rng);
                let m = g.constant(mask);
                g.mul(x, m)?
            } else {
                x
            };
            let a_t = g.transpose(a)?;
            let b_t = g.transpose(b)?;
            let down = g.matmul(input, a_t)?;
            let up = g.matmul(down, b_t)?;
            let scaled = g.scale(up, adapter.scaling());
            y = g.add(y, scaled)?;
        }
        Ok(y)
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else
/// `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rng.uniform() < p { 0.0 } else { keep };
    }
    t
}

/// Applies the adapted layer to `x` (a vector or a matrix of row vectors).
/// The base path never drops; dropout only touches the adapter input.
pub fn lora_forward(
    layer: &AdaptedLinear,
    x: &Tensor,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    let xm = x.as_matrix()?;
    let mut g = Graph::new();
    let xn = g.constant(xm);
    let y = layer.forward_graph(&mut g, xn, "", Binding::Constant, mode, rng)?;
    let out = g.value(y).clone();
    if x.shape().len() == 1 {
        let n = out.numel();
        out.reshape(&[n])
    } else {
        Ok(out)
    }
}

/// `W0 + (alpha / r) · B · A`. Only used to cross-check the unmerged path.
pub fn merge(w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    w0.add(&adapter.delta()?)
}

/// `Σ r · (n_in + n_out)` over the given projections.
pub fn adapter_param_count(dims: &[(usize, usize)], r: usize) -> u64 {
    dims.iter().map(|&(i, o)| (r * (i + o)) as u64).sum()
}

/// BF16 payload size of adapters over `dims`: two bytes per parameter.
pub fn adapter_payload_bytes(dims: &[(usize, usize)], r: usize) -> u64 {
    2 * adapter_param_count(dims, r)
}

/// Encodes adapters in the `FLRA` format.
///
/// Layout (little-endian): magic `FLRA`, `u32` version, `u32` entry count,
/// then per entry `u32 n_in, u32 n_out, u32 r, f32 alpha, f32 dropout,
/// u32 name_len, name`; then per entry `A` followed by `B`, row-major, as BF16
/// words.
pub fn encode_adapters(adapters: &[LoraAdapter]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(ADAPTER_MAGIC);
    w.u32(ADAPTER_VERSION);
    w.u32(adapters.len() as u32);
    for a in adapters {
        w.u32(a.n_in() as u32);
        w.u32(a.n_out() as u32);
        w.u32(a.rank() as u32);
        w.f32(a.alpha as f32);
        w.f32(a.dropout_p as f32);
        w.str(&a.name);
    }
    for a in adapters {
        for t in [&a.a, &a.b] {
            for &v in t.data() {
                w.u16(bf16::to_bits(v));
            }
        }
    }
    w.into_inner()
}

/// Header length of an encoded adapter file, i.e. everything before the
/// BF16 payload.
pub fn header_len(adapters: &[LoraAdapter]) -> usize {
    12 + adapters.iter().map(|a| 24 + a.name.len()).sum::<usize>()
}

pub fn decode_adapters(bytes: &[u8]) -> Result<Vec<LoraAdapter>> {
    let mut r = ByteReader::new(bytes);
    r.magic(ADAPTER_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != ADAPTER_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported adapter version {version}"),
        ));
    }
    let n = r.u32("entry count")? as usize;
    let mut headers = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let at = r.offset();
        let n_in = r.u32("n_in")? as usize;
        let n_out = r.u32("n_out")? as usize;
        let rank = r.u32("rank")? as usize;
        let alpha = r.f32_decimal("alpha")?;
        let dropout = r.f32_decimal("dropout")?;
        let name = r.str("name")?;
        if rank == 0 || rank > n_in.min(n_out) {
            return Err(Error::format(
                at,
                format!("entry `{name}` has invalid rank {rank}"),
            ));
        }
        headers.push((n_in, n_out, rank, alpha, dropout, name, at));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (n_in, n_out, rank, alpha, dropout, name, at) in headers {
        let mut read = |rows: usize, cols: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(bf16::from_bits(r.u16("adapter payload")?));
            }
            Ok(Tensor::new(vec![rows, cols], data)?.round_bf16())
        };
        let a = read(rank, n_in)?;
        let b = read(n_out, rank)?;
        let adapter = LoraAdapter::from_factors(name, a, b, alpha, dropout)
            .map_err(|e| Error::format(at, e.to_string()))?;
        out.push(adapter);
    }
    r.finish()?;
    Ok(out)
}

pub fn save_adapters(adapters: &[LoraAdapter], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_adapters(adapters)).map_err(|e| Error::io(path, e))
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<Vec<LoraAdapter>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapters(&bytes)
}

pub fn save_adapter(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    save_adapters(std::slice::from_ref(adapter), path)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    let mut all = load_adapters(path)?;
    if all.len() != 1 {
        return Err(Error::format(
            8,
            format!("expected one adapter, file holds {}", all.len()),
        ));
    }
    Ok(all.remove(0))
}
