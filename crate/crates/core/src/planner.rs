//! Closed-form parameter and storage accounting for adapter configurations.
//!
//! Only weight storage is modeled. Activation and optimizer memory depend on
//! the workload and are not estimated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora;
use crate::model::ArchConfig;

pub const LLAMA3_8B_PARAMS: u64 = 8_030_000_000;
pub const LLAMA3_70B_PARAMS: u64 = 70_560_000_000;

pub const BYTES_PER_GB: f64 = 1e9;
pub const BYTES_PER_MIB: f64 = 1024.0 * 1024.0;

/// Trainable LoRA elements with adapters on q (`d→d`), k and v (`d→d_kv`)
/// of every layer.
pub fn count_lora_params(arch: &ArchConfig, r: usize) -> u64 {
    let (l, r, d, kv) = (
        arch.n_layers as u64,
        r as u64,
        arch.d_model as u64,
        arch.d_kv as u64,
    );
    l * r * (2 * d + 2 * (d + kv))
}

/// Bytes of a saved adapter's BF16 payload.
pub fn adapter_bytes(arch: &ArchConfig, r: usize) -> u64 {
    lora::adapter_payload_bytes(&arch.lora_dims(), r)
}

pub fn model_bytes(base_params: u64, bits: u8) -> u64 {
    base_params * bits as u64 / 8
}

/// Frozen parameter total for an architecture: the published totals for the
/// Llama 3 presets, an exact count otherwise.
pub fn base_params(arch: &ArchConfig) -> u64 {
    match arch.preset_id.as_deref() {
        Some("llama3-8b") => LLAMA3_8B_PARAMS,
        Some("llama3-70b") => LLAMA3_70B_PARAMS,
        _ => {
            let (d, kv, ff, v) = (
                arch.d_model as u64,
                arch.d_kv as u64,
                arch.d_ff as u64,
                arch.vocab_size as u64,
            );
            arch.n_layers as u64 * (d * (d + 2 * kv) + d * d + 2 * d * ff) + 2 * v * d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub arch: String,
    pub rank: usize,
    pub bits: u8,
    pub base_params: u64,
    pub trainable_params: u64,
    pub adapter_bytes: u64,
    pub adapter_mib: f64,
    pub model_bytes_16: u64,
    pub model_bytes_8: u64,
    pub model_bytes_4: u64,
    /// Quantized base plus adapter, as a percentage of the 16-bit base.
    pub ratio_8: f64,
    pub ratio_4: f64,
    /// Base plus adapter at the requested bit width, decimal GB.
    pub total_gb: f64,
}

fn validate_bits(bits: u8) -> Result<()> {
    if matches!(bits, 4 | 8 | 16) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bits must be 4, 8 or 16, got {bits}"
        )))
    }
}

pub fn plan(arch: &ArchConfig, r: usize, bits: u8) -> Result<PlanReport> {
    arch.validate()?;
    validate_bits(bits)?;
    if r == 0 || r > arch.d_kv.min(arch.d_model) {
        return Err(Error::Rank {
            rank: r,
            n_in: arch.d_model,
            n_out: arch.d_kv,
        });
    }
    let base = base_params(arch);
    let trainable = count_lora_params(arch, r);
    let adapter = adapter_bytes(arch, r);
    let m16 = model_bytes(base, 16);
    let ratio = |b: u8| 100.0 * (model_bytes(base, b) + adapter) as f64 / m16 as f64;
    Ok(PlanReport {
        arch: arch.preset_id.clone().unwrap_or_else(|| "custom".into()),
        rank: r,
        bits,
        base_params: base,
        trainable_params: trainable,
        adapter_bytes: adapter,
        adapter_mib: adapter as f64 / BYTES_PER_MIB,
        model_bytes_16: m16,
        model_bytes_8: model_bytes(base, 8),
        model_bytes_4: model_bytes(base, 4),
        ratio_8: ratio(8),
        ratio_4: ratio(4),
        total_gb: (model_bytes(base, bits) + adapter) as f64 / BYTES_PER_GB,
    })
}

pub fn plan_preset(preset: &str, r: usize, bits: u8) -> Result<PlanReport> {
    plan(&ArchConfig::preset(preset)?, r, bits)
}

impl PlanReport {
    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let gb = |b: u64| b as f64 / BYTES_PER_GB;
        let rows = [
            ("arch", self.arch.clone()),
            ("rank", self.rank.to_string()),
            ("bits", self.bits.to_string()),
            (
                "base params",
                format!("{:.2} B", self.base_params as f64 / 1e9),
            ),
            (
                "trainable params",
                format!(
                    "{} ({:.2} M)",
                    self.trainable_params,
                    self.trainable_params as f64 / 1e6
                ),
            ),
            (
                "adapter size",
                format!("{} B ({:.2} MiB)", self.adapter_bytes, self.adapter_mib),
            ),
            (
                "model size 16-bit",
                format!("{:.2} GB", gb(self.model_bytes_16)),
            ),
            (
                "model size 8-bit",
                format!("{:.2} GB ({:.1}%)", gb(self.model_bytes_8), self.ratio_8),
            ),
            (
                "model size 4-bit",
                format!("{:.2} GB ({:.1}%)", gb(self.model_bytes_4), self.ratio_4),
            ),
            ("weights + adapter", format!("{:.2} GB", self.total_gb)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<18} {v}\n"));
        }
        out.push_str("(weight storage only; activations and optimizer state not modeled)\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_rank_one_by_hand() {
        let a = ArchConfig::toy();
        // 2 layers · 1 · (2·32 + 2·(32+16))
        assert_eq!(count_lora_params(&a, 1), 2 * (64 + 96));
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(
            plan_preset("llama2-7b", 8, 8),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            plan_preset("llama3-8b", 8, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn text_mentions_scope() {
        let t = plan_preset("llama3-8b", 8, 8).unwrap().to_text();
        assert!(t.contains("4718592"));
        assert!(t.contains("weight storage only"));
    }
}
