//! Energy, operation, parameter, storage and area accounting.
//!
//! Conventions:
//!
//! * one multiply-accumulate counts as 2 operations, a Hadamard (elementwise)
//!   product as 1;
//! * backbone MACs run in RRAM, every compensation operation in SRAM;
//! * only weight layers are counted (residual adds, ReLU and pooling are free);
//! * storage counts the shared projections once plus every stored set, at
//!   `bits_comp` bits per element; 1 KB = 1000 bytes, 1 Mb = 10⁶ bits;
//! * weight movement is one set's vectors plus the shared projections, the
//!   traffic of a first set switch.

use serde::{Deserialize, Serialize};

use crate::compensation::{count_compensation_params, LayerDims, Variant};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareProfile {
    pub tops_per_w_rram: f64,
    pub tops_per_w_sram: f64,
    /// Mb/mm².
    pub density_rram: f64,
    /// Mb/mm².
    pub density_sram: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self {
            tops_per_w_rram: 209.0,
            tops_per_w_sram: 89.0,
            density_rram: 2.53,
            density_sram: 0.31,
        }
    }
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tops_per_w_rram, self.tops_per_w_sram, self.density_rram, self.density_sram];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("hardware profile values must be positive and finite".into()))
        }
    }
}

/// Joules, with TOPS/W read as 10¹² operations per joule.
pub fn energy_estimate(ops_rram: f64, ops_sram: f64, profile: &HardwareProfile) -> f64 {
    ops_rram / (profile.tops_per_w_rram * 1e12) + ops_sram / (profile.tops_per_w_sram * 1e12)
}

/// mm² from bit counts and memory densities.
pub fn area_estimate(bits_rram: f64, bits_sram: f64, profile: &HardwareProfile) -> f64 {
    bits_rram / 1e6 / profile.density_rram + bits_sram / 1e6 / profile.density_sram
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct OpsCount {
    pub rram: u64,
    pub sram: u64,
}

/// Operations of one compensated layer evaluated at `positions` output sites.
pub fn compensation_layer_ops(variant: Variant, d: LayerDims, rank: usize, positions: usize) -> u64 {
    let (r, ci, co, k, p) = (rank as u64, d.c_in as u64, d.c_out as u64, d.kernel as u64, positions as u64);
    match variant {
        Variant::None => 0,
        Variant::Lora => 2 * p * k * k * r * (ci + co),
        Variant::Vera => 2 * p * k * k * r * (ci + co) + p * (r * k + co * k),
        Variant::VeraPlus => 2 * p * r * (ci + co) + p * (r + co),
    }
}

/// Inference operations for one input sample.
pub fn count_model_ops(spec: &ModelSpec, variant: Variant, rank: usize) -> Result<OpsCount> {
    let shapes = spec.shapes()?;
    let mut ops = OpsCount::default();
    for (i, layer) in spec.layers.iter().enumerate() {
        let positions = match layer {
            LayerSpec::Conv2d { .. } => shapes[i + 1].spatial(),
            LayerSpec::Linear { .. } => 1,
            _ => continue,
        };
        let (o, k) = layer.weight_dims().unwrap();
        ops.rram += 2 * (o * k * positions) as u64;
        if layer.is_compensated() {
            ops.sram += compensation_layer_ops(variant, layer.dims().unwrap(), rank, positions);
        }
    }
    Ok(ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub params_shared: u64,
    pub params_per_set: u64,
    pub params_comp: u64,
    pub storage_bytes: f64,
    pub movement_bytes: f64,
}

pub fn check_bits_comp(bits: u32) -> Result<()> {
    if matches!(bits, 4 | 8 | 16 | 32) {
        Ok(())
    } else {
        Err(Error::Config(format!("bits_comp must be 4, 8, 16 or 32, got {bits}")))
    }
}

pub fn storage_report(variant: Variant, layers: &[LayerDims], rank: usize, num_sets: usize, bits_comp: u32) -> Result<StorageReport> {
    check_bits_comp(bits_comp)?;
    let c = count_compensation_params(variant, layers, rank, num_sets);
    let bytes = bits_comp as f64 / 8.0;
    let movement = if num_sets == 0 { 0 } else { c.per_set + c.shared };
    Ok(StorageReport {
        params_shared: c.shared,
        params_per_set: c.per_set,
        params_comp: c.total,
        storage_bytes: c.total as f64 * bytes,
        movement_bytes: movement as f64 * bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub rank: usize,
    pub num_sets: usize,
    pub ops_rram: u64,
    pub ops_sram: u64,
    pub energy_j: f64,
    pub params_backbone: u64,
    pub params_comp: u64,
    pub storage_comp_bytes: f64,
    pub weight_movement_bytes: f64,
    pub params_overhead_pct: f64,
    pub ops_overhead_pct: f64,
    pub energy_overhead_pct: f64,
    /// Approximate: backbone bits in RRAM plus compensation storage in SRAM.
    pub area_mm2: f64,
}

/// Inputs that fix every number of a [`CostReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSettings {
    pub bits_comp: u32,
    /// Bits per backbone weight, for the area estimate.
    pub bits_backbone: u32,
}

impl Default for CostSettings {
    fn default() -> Self {
        Self {
            bits_comp: 4,
            bits_backbone: 4,
        }
    }
}

pub fn cost_report(
    spec: &ModelSpec,
    variant: Variant,
    rank: usize,
    num_sets: usize,
    settings: &CostSettings,
    profile: &HardwareProfile,
) -> Result<CostReport> {
    profile.validate()?;
    if rank == 0 && variant != Variant::None {
        return Err(Error::Config("compensation rank must be >= 1".into()));
    }
    let ops = count_model_ops(spec, variant, rank)?;
    let storage = storage_report(variant, &spec.compensated_dims(), rank, num_sets, settings.bits_comp)?;
    let params_backbone = spec.weight_count() as u64;
    let energy_base = energy_estimate(ops.rram as f64, 0.0, profile);
    let energy_j = energy_estimate(ops.rram as f64, ops.sram as f64, profile);
    let pct = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 0.0 };
    Ok(CostReport {
        variant,
        rank,
        num_sets,
        ops_rram: ops.rram,
        ops_sram: ops.sram,
        energy_j,
        params_backbone,
        params_comp: storage.params_comp,
        storage_comp_bytes: storage.storage_bytes,
        weight_movement_bytes: storage.movement_bytes,
        params_overhead_pct: pct(storage.params_comp as f64, params_backbone as f64),
        ops_overhead_pct: pct(ops.sram as f64, ops.rram as f64),
        energy_overhead_pct: pct(energy_j - energy_base, energy_base),
        area_mm2: area_estimate(
            params_backbone as f64 * settings.bits_backbone as f64,
            storage.storage_bytes * 8.0,
            profile,
        ),
    })
}

pub const COST_HEADER: &str =
    "variant,r,num_sets,ops_rram,ops_sram,energy_j,params_pct,ops_pct,storage_kb,movement_kb,area_mm2";

impl CostReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{:.1},{:.1},{:.4},{:.4},{:.6}",
            self.variant,
            self.rank,
            self.num_sets,
            self.ops_rram,
            self.ops_sram,
            self.energy_j,
            self.params_overhead_pct,
            self.ops_overhead_pct,
            self.storage_comp_bytes / 1000.0,
            self.weight_movement_bytes / 1000.0,
            self.area_mm2
        )
    }
}
