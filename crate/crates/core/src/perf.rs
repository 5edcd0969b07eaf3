//! Metrics, the reference convolution, and the split-kernel comparator.
//!
//! The oracle here is written directly from the convolution definition and
//! shares no code with the engine in [`crate::zflow`].

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::kseg::PartialPlane;
use crate::netmodel::{macs_of, requantize, AcceleratorConfig, LayerSpec, TensorI8, Weights};
use crate::sched::ExecutionSchedule;
use crate::zflow;

/// Direct convolution to int32 accumulators.
pub fn oracle_conv_acc(
    layer: &LayerSpec,
    input: &TensorI8,
    weights: &Weights,
) -> Result<PartialPlane> {
    layer.validate()?;
    if (input.channels, input.height, input.width) != (layer.nif, layer.niy, layer.nix)
        || input.data.len() != layer.nif * layer.niy * layer.nix
    {
        return Err(SimError::Shape("oracle input does not match layer".into()));
    }
    if !weights.matches(layer) {
        return Err(SimError::Shape("oracle weights do not match layer".into()));
    }
    let groups = layer.groups();
    let cin = layer.nif / groups;
    let cout = layer.nof / groups;
    let mut out = PartialPlane::zeros(layer.nof, layer.noy, layer.nox);
    for f in 0..layer.nof {
        let first_c = (f / cout) * cin;
        for oy in 0..layer.noy {
            for ox in 0..layer.nox {
                let mut acc: i32 = 0;
                for c in 0..cin {
                    for ky in 0..layer.nky {
                        let y = (oy * layer.stride + ky) as i64 - layer.pad as i64;
                        if y < 0 || y >= layer.niy as i64 {
                            continue;
                        }
                        for kx in 0..layer.nkx {
                            let x = (ox * layer.stride + kx) as i64 - layer.pad as i64;
                            if x < 0 || x >= layer.nix as i64 {
                                continue;
                            }
                            let p = input.data
                                [((first_c + c) * layer.niy + y as usize) * layer.nix + x as usize];
                            let w = weights.data[((f * cin + c) * layer.nky + ky) * layer.nkx + kx];
                            acc = acc.wrapping_add(p as i32 * w as i32);
                        }
                    }
                }
                let idx = out.index(f, oy, ox);
                out.data[idx] = acc;
            }
        }
    }
    Ok(out)
}

/// Direct convolution followed by the shared requantization rule.
pub fn oracle_conv(layer: &LayerSpec, input: &TensorI8, weights: &Weights) -> Result<TensorI8> {
    let acc = oracle_conv_acc(layer, input, weights)?;
    let data = acc
        .data
        .iter()
        .map(|&a| requantize(a, layer.requant_shift, layer.activation))
        .collect();
    TensorI8::from_vec(layer.nof, layer.noy, layer.nox, data)
}

/// Throughput per DSP per MHz, times 1000.
pub fn dsp_efficiency(gops: f64, dsp: u32, freq_mhz: f64) -> f64 {
    gops / dsp as f64 / freq_mhz * 1e3
}

/// Giga-operations per second, counting a MAC as two operations.
pub fn gops(macs: u64, wall_time_s: f64) -> f64 {
    if wall_time_s <= 0.0 {
        return 0.0;
    }
    2.0 * macs as f64 / wall_time_s / 1e9
}

pub fn wall_time_s(cycles: u64, cfg: &AcceleratorConfig) -> f64 {
    cycles as f64 / (cfg.freq_mhz * 1e6)
}

/// Register bits the engine needs for data arrangement, whatever the kernel size.
pub fn zflow_arrangement_bits(cfg: &AcceleratorConfig) -> u64 {
    zflow::register_slots(cfg) as u64 * 8
}

pub const DEFAULT_SUB_SIZES: [usize; 3] = [3, 5, 7];

/// Cost of running a layer by splitting its kernel into fixed-size sub-kernels
/// fed from line buffers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitModel {
    pub sub_size: usize,
    pub traversed_positions: usize,
    pub padded_fraction: f64,
    pub line_buffer_bits: u64,
    pub cycles: u64,
    pub gops: f64,
}

/// Pick the sub-size with the least zero padding (first wins on ties) and cost it
/// with the same tiling and fill overhead as the Z-flow engine.
pub fn baseline_split_model(
    layer: &LayerSpec,
    cfg: &AcceleratorConfig,
    sub_sizes: &[usize],
) -> SplitModel {
    let padded = |s: usize| {
        let tx = layer.nkx.div_ceil(s) * s;
        let ty = layer.nky.div_ceil(s) * s;
        (
            tx * ty,
            1.0 - (layer.nkx * layer.nky) as f64 / (tx * ty) as f64,
        )
    };
    let mut best: Option<(usize, usize, f64)> = None;
    for &s in sub_sizes.iter().filter(|&&s| s > 0) {
        let (traversed, frac) = padded(s);
        if best.is_none_or(|(_, _, f)| frac < f) {
            best = Some((s, traversed, frac));
        }
    }
    let (sub_size, traversed_positions, padded_fraction) =
        best.unwrap_or((layer.nkx.max(layer.nky), layer.nkx * layer.nky, 0.0));
    let tiles = (layer.nox.div_ceil(cfg.pox) * layer.noy.div_ceil(cfg.poy)) as u64
        * zflow::lane_group_count(layer, cfg);
    let cycles = tiles
        * ((layer.reduction_channels() * traversed_positions) as u64 + zflow::prologue_cycles(cfg));
    SplitModel {
        sub_size,
        traversed_positions,
        padded_fraction,
        line_buffer_bits: (layer.nkx.saturating_sub(layer.stride) * layer.nix * 8) as u64,
        cycles,
        gops: modeled_gops(macs_of(layer), cycles, cfg),
    }
}

/// GOPS of `macs` completed in `cycles` at the configured clock.
pub fn modeled_gops(macs: u64, cycles: u64, cfg: &AcceleratorConfig) -> f64 {
    gops(macs, wall_time_s(cycles, cfg))
}

/// Modeled throughput of the Z-flow engine (with segmentation) on one layer.
pub fn zflow_gops_model(layer: &LayerSpec, cfg: &AcceleratorConfig) -> f64 {
    modeled_gops(
        macs_of(layer),
        zflow::cycle_model(layer, cfg, None).total(),
        cfg,
    )
}

/// Useful MACs over the MAC slots of every compute cycle that issued MACs.
pub fn pe_utilization(schedule: &ExecutionSchedule, cfg: &AcceleratorConfig) -> f64 {
    let (useful, slots) = schedule.phases.iter().fold((0u64, 0u64), |(u, s), p| {
        (u + p.useful_macs, s + p.mac_cycles)
    });
    utilization(useful, slots, cfg)
}

pub fn utilization(useful_macs: u64, mac_cycles: u64, cfg: &AcceleratorConfig) -> f64 {
    if mac_cycles == 0 {
        return 0.0;
    }
    useful_macs as f64 / (mac_cycles as f64 * cfg.mac_units() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramBytes {
    pub input: u64,
    pub weights: u64,
    pub output: u64,
}

impl DramBytes {
    pub fn total(&self) -> u64 {
        self.input + self.weights + self.output
    }

    pub fn add(&mut self, other: &DramBytes) {
        self.input += other.input;
        self.weights += other.weights;
        self.output += other.output;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemPerf {
    pub item: String,
    pub strategy: String,
    pub cycles: u64,
    pub wall_time_us: f64,
    pub gops: f64,
    pub utilization: f64,
    pub dram_bytes: DramBytes,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfReport {
    pub strategy: String,
    pub total_cycles: u64,
    pub wall_time_s: f64,
    pub macs: u64,
    pub gops: f64,
    pub pe_utilization: f64,
    pub dsp_efficiency: f64,
    pub dram_bytes: DramBytes,
    pub arrangement_bits: u64,
    pub items: Vec<ItemPerf>,
}

impl PerfReport {
    pub fn from_schedule(schedule: &ExecutionSchedule, cfg: &AcceleratorConfig) -> Self {
        let mut items = Vec::with_capacity(schedule.units.len());
        let mut dram = DramBytes::default();
        let mut macs = 0;
        for unit in &schedule.units {
            let cycles = unit.end - unit.start;
            let wall = wall_time_s(cycles, cfg);
            dram.add(&unit.dram_bytes);
            macs += unit.useful_macs;
            items.push(ItemPerf {
                item: unit.label.clone(),
                strategy: unit.strategy.clone(),
                cycles,
                wall_time_us: wall * 1e6,
                gops: gops(unit.useful_macs, wall),
                utilization: utilization(unit.useful_macs, unit.mac_cycles, cfg),
                dram_bytes: unit.dram_bytes,
                note: unit.note.clone(),
            });
        }
        let wall = wall_time_s(schedule.total_cycles, cfg);
        let g = gops(macs, wall);
        Self {
            strategy: schedule.strategy.clone(),
            total_cycles: schedule.total_cycles,
            wall_time_s: wall,
            macs,
            gops: g,
            pe_utilization: pe_utilization(schedule, cfg),
            dsp_efficiency: dsp_efficiency(g, cfg.dsp_count, cfg.freq_mhz),
            dram_bytes: dram,
            arrangement_bits: zflow_arrangement_bits(cfg),
            items,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_hand_examples() {
        let layer = LayerSpec::conv(1, 1, 2, 2, 2, 1, 0).unwrap();
        let input = TensorI8::from_vec(1, 2, 2, vec![1, 2, 3, 4]).unwrap();
        let w = Weights::from_vec(&layer, vec![1; 4]).unwrap();
        assert_eq!(oracle_conv(&layer, &input, &w).unwrap().data, vec![10]);

        let id = LayerSpec::conv(1, 1, 3, 3, 1, 1, 0).unwrap();
        let x = TensorI8::from_vec(1, 3, 3, (0..9).map(|v| v as i8 - 4).collect()).unwrap();
        let w = Weights::from_vec(&id, vec![1]).unwrap();
        assert_eq!(oracle_conv(&id, &x, &w).unwrap(), x);

        let zero = TensorI8::zeros(1, 3, 3);
        assert!(oracle_conv(&id, &zero, &w)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0));
        assert!(oracle_conv(&id, &TensorI8::zeros(2, 3, 3), &w).is_err());
    }

    #[test]
    fn dsp_efficiency_rows() {
        let r = |x: f64| (x * 100.0).round() / 100.0;
        assert_eq!(r(dsp_efficiency(190.4, 522, 200.0)), 1.82);
        assert_eq!(r(dsp_efficiency(286.2, 522, 200.0)), 2.74);
        assert_eq!(r(dsp_efficiency(590.0, 1260, 200.0)), 2.34);
    }

    #[test]
    fn split_model_examples() {
        let cfg = AcceleratorConfig::default();
        let big = LayerSpec::conv(1, 16, 56, 56, 31, 1, 15).unwrap();
        let m = baseline_split_model(&big, &cfg, &[7]);
        assert_eq!(m.traversed_positions, 35 * 35);
        assert!((m.padded_fraction - (1.0 - 961.0 / 1225.0)).abs() < 1e-12);
        assert_eq!(m.line_buffer_bits, 13_440);
        let seven = LayerSpec::conv(1, 16, 56, 56, 7, 1, 3).unwrap();
        assert_eq!(
            baseline_split_model(&seven, &cfg, &[7]).padded_fraction,
            0.0
        );
        let three = LayerSpec::conv(1, 16, 56, 56, 3, 1, 1).unwrap();
        assert_eq!(
            baseline_split_model(&three, &cfg, &DEFAULT_SUB_SIZES).line_buffer_bits,
            896
        );
    }

    #[test]
    fn arrangement_bits() {
        let cfg = AcceleratorConfig::default();
        assert_eq!(zflow_arrangement_bits(&cfg), 576);
        let small = AcceleratorConfig {
            pox: 4,
            poy: 4,
            ..cfg
        };
        assert_eq!(zflow_arrangement_bits(&small), 160);
    }

    #[test]
    fn gops_definition() {
        assert!((gops(1_000_000_000, 2.0) - 1.0).abs() < 1e-12);
        assert_eq!(gops(5, 0.0), 0.0);
    }
}
