//! On-chip buffers, DRAM transfer costs, row tiling and DRAM traffic.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::netmodel::{AcceleratorConfig, BlockKind, LayerSpec, NetItem};
use crate::perf::DramBytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BufferId {
    InputA,
    InputB,
    OutputA,
    OutputB,
    Weight,
}

impl BufferId {
    pub const ALL: [BufferId; 5] = [
        BufferId::InputA,
        BufferId::InputB,
        BufferId::OutputA,
        BufferId::OutputB,
        BufferId::Weight,
    ];

    /// Input buffer used by tile `t` under ping-pong buffering.
    pub fn input_for(tile: usize) -> Self {
        if tile.is_multiple_of(2) {
            BufferId::InputA
        } else {
            BufferId::InputB
        }
    }

    pub fn output_for(tile: usize) -> Self {
        if tile.is_multiple_of(2) {
            BufferId::OutputA
        } else {
            BufferId::OutputB
        }
    }

    pub fn capacity(self, cfg: &AcceleratorConfig) -> u64 {
        match self {
            BufferId::InputA | BufferId::InputB => cfg.input_buf_bytes,
            BufferId::OutputA | BufferId::OutputB => cfg.output_buf_bytes,
            BufferId::Weight => cfg.weight_buf_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferRole {
    Input,
    Intermediate,
    Output,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resident {
    pub layer: usize,
    pub tile: usize,
    pub role: BufferRole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferState {
    pub id: BufferId,
    pub capacity_bytes: u64,
    pub occupied_bytes: u64,
    pub resident: Option<Resident>,
}

impl BufferState {
    pub fn new(id: BufferId, cfg: &AcceleratorConfig) -> Self {
        Self {
            id,
            capacity_bytes: id.capacity(cfg),
            occupied_bytes: 0,
            resident: None,
        }
    }

    /// Place `bytes` of `resident` in the buffer, replacing what was there.
    pub fn fill(&mut self, bytes: u64, resident: Resident) -> Result<()> {
        if bytes > self.capacity_bytes {
            return Err(SimError::Capacity {
                layer: format!("layer {}", resident.layer),
                reason: format!(
                    "{bytes} bytes do not fit {:?} ({} bytes)",
                    self.id, self.capacity_bytes
                ),
            });
        }
        self.occupied_bytes = bytes;
        self.resident = Some(resident);
        Ok(())
    }

    pub fn release(&mut self) {
        self.occupied_bytes = 0;
        self.resident = None;
    }
}

/// The five on-chip buffers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferPool {
    buffers: Vec<BufferState>,
}

impl BufferPool {
    pub fn new(cfg: &AcceleratorConfig) -> Self {
        Self {
            buffers: BufferId::ALL
                .iter()
                .map(|&id| BufferState::new(id, cfg))
                .collect(),
        }
    }

    pub fn get(&self, id: BufferId) -> &BufferState {
        &self.buffers[id as usize]
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut BufferState {
        &mut self.buffers[id as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransferKind {
    LoadInput,
    LoadWeights,
    StoreOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferOp {
    pub kind: TransferKind,
    pub bytes: u64,
    pub tile: usize,
    pub latency_cycles: u64,
}

impl TransferOp {
    pub fn new(kind: TransferKind, bytes: u64, tile: usize, cfg: &AcceleratorConfig) -> Self {
        Self {
            kind,
            bytes,
            tile,
            latency_cycles: transfer_latency(bytes, cfg),
        }
    }
}

/// Fixed latency plus bandwidth time; an empty transfer is free.
pub fn transfer_latency(bytes: u64, cfg: &AcceleratorConfig) -> u64 {
    if bytes == 0 {
        return 0;
    }
    cfg.dram_fixed_latency_cycles + (bytes as f64 / cfg.dram_bytes_per_cycle).ceil() as u64
}

/// Row tiling of a layer. Tiles always span the full width and all input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePlan {
    pub tiy: usize,
    pub toy: usize,
    pub tile_count: usize,
    pub halo_rows: usize,
}

impl TilePlan {
    /// Output rows produced by tile `t`.
    pub fn output_rows(&self, layer: &LayerSpec, t: usize) -> Range<usize> {
        let start = t * self.toy;
        start..(start + self.toy).min(layer.noy)
    }

    /// Input rows tile `t` reads, halo included.
    pub fn input_rows(&self, layer: &LayerSpec, t: usize) -> Range<usize> {
        input_rows_for(layer, self.output_rows(layer, t))
    }

    pub fn input_bytes(&self, layer: &LayerSpec, t: usize) -> u64 {
        (self.input_rows(layer, t).len() * layer.nix * layer.nif) as u64
    }

    pub fn output_bytes(&self, layer: &LayerSpec, t: usize) -> u64 {
        (self.output_rows(layer, t).len() * layer.nox * layer.nof) as u64
    }
}

/// Input rows needed to produce output rows `out`, clipped to the input.
pub fn input_rows_for(layer: &LayerSpec, out: Range<usize>) -> Range<usize> {
    if out.is_empty() {
        return 0..0;
    }
    let lo = (out.start * layer.stride) as i64 - layer.pad as i64;
    let hi = ((out.end - 1) * layer.stride) as i64 - layer.pad as i64 + layer.nky as i64;
    let clip = |v: i64| v.clamp(0, layer.niy as i64) as usize;
    clip(lo)..clip(hi)
}

pub fn choose_tiling(layer: &LayerSpec, cfg: &AcceleratorConfig) -> Result<TilePlan> {
    let capacity = |reason: String| SimError::Capacity {
        layer: layer.describe(),
        reason,
    };
    let in_row = (layer.nix * layer.nif) as u64;
    if in_row > cfg.input_buf_bytes {
        return Err(capacity(format!(
            "one input row ({in_row} bytes) exceeds the input buffer ({} bytes)",
            cfg.input_buf_bytes
        )));
    }
    let out_row = (layer.nox * layer.nof) as u64;
    if out_row > cfg.output_buf_bytes {
        return Err(capacity(format!(
            "one output row ({out_row} bytes) exceeds the output buffer ({} bytes)",
            cfg.output_buf_bytes
        )));
    }
    let tiy = ((cfg.input_buf_bytes / in_row) as usize).min(layer.niy);
    let mut toy = if tiy == layer.niy {
        layer.noy
    } else if tiy < layer.nky {
        return Err(capacity(format!(
            "{tiy} buffered input rows cannot hold a {}-row kernel",
            layer.nky
        )));
    } else {
        (tiy - layer.nky) / layer.stride + 1
    };
    toy = toy
        .min((cfg.output_buf_bytes / out_row) as usize)
        .min(layer.noy);
    if toy >= cfg.poy && toy < layer.noy {
        toy -= toy % cfg.poy;
    }
    let tile_count = layer.noy.div_ceil(toy);
    Ok(TilePlan {
        tiy,
        toy,
        tile_count,
        halo_rows: layer.nky.saturating_sub(layer.stride),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrafficStrategy {
    LayerByLayer,
    VF,
    HF,
}

/// Most layers a vertical fusion window holds.
pub const VF_WINDOW: usize = 3;

/// DRAM bytes moved by an item under a strategy, from tensor sizes alone.
pub fn dram_traffic(item: &NetItem, strategy: TrafficStrategy) -> Result<DramBytes> {
    let layer_bytes = |l: &LayerSpec| DramBytes {
        input: l.input_bytes(),
        weights: l.weight_bytes(),
        output: l.output_bytes(),
    };
    match (item, strategy) {
        (_, TrafficStrategy::LayerByLayer) => {
            let mut total = DramBytes::default();
            for l in item.layers() {
                total.add(&layer_bytes(l));
            }
            Ok(total)
        }
        (NetItem::Block(b), TrafficStrategy::VF) if b.kind == BlockKind::BypassBranch => {
            let mut total = DramBytes::default();
            for window in b.layers.chunks(VF_WINDOW) {
                total.input += window[0].input_bytes();
                total.output += window[window.len() - 1].output_bytes();
                total.weights += window.iter().map(LayerSpec::weight_bytes).sum::<u64>();
            }
            Ok(total)
        }
        (NetItem::Block(b), TrafficStrategy::HF) if b.kind == BlockKind::MultiBranch => {
            Ok(DramBytes {
                input: b.layers[0].input_bytes(),
                weights: b.layers.iter().map(LayerSpec::weight_bytes).sum(),
                output: b.layers.iter().map(LayerSpec::output_bytes).sum(),
            })
        }
        (_, s) => Err(SimError::Strategy(format!(
            "{s:?} does not apply to this item"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_mbconv, build_pyconv_block};

    fn cfg_with_input(bytes: u64) -> AcceleratorConfig {
        AcceleratorConfig {
            input_buf_bytes: bytes,
            ..AcceleratorConfig::default()
        }
    }

    #[test]
    fn latency_examples() {
        let cfg = AcceleratorConfig::default();
        assert_eq!(transfer_latency(1024, &cfg), 164);
        assert_eq!(transfer_latency(0, &cfg), 0);
        assert_eq!(transfer_latency(1, &cfg), 101);
        let mut last = 0;
        for b in 0..2000 {
            let l = transfer_latency(b, &cfg);
            assert!(l >= last);
            last = l;
        }
        assert_eq!(
            TransferOp::new(TransferKind::LoadInput, 16, 0, &cfg).latency_cycles,
            101
        );
    }

    #[test]
    fn tiling_examples() {
        let layer = LayerSpec::conv(64, 64, 56, 56, 3, 1, 1).unwrap();
        let plan = choose_tiling(&layer, &cfg_with_input(65536)).unwrap();
        assert_eq!(plan.tiy, 18);
        assert_eq!(plan.toy, 16);
        assert_eq!(plan.tile_count, 4);
        assert_eq!(plan.halo_rows, 2);
        assert!(plan.toy * layer.stride <= plan.tiy);
        for t in 0..plan.tile_count {
            assert!(plan.input_bytes(&layer, t) <= 65536);
        }

        let untiled = choose_tiling(&layer, &AcceleratorConfig::default()).unwrap();
        assert_eq!((untiled.tiy, untiled.tile_count), (56, 1));

        let huge = LayerSpec::conv(512, 16, 4, 224, 1, 1, 0).unwrap();
        assert!(matches!(
            choose_tiling(&huge, &cfg_with_input(65536)),
            Err(SimError::Capacity { .. })
        ));
    }

    #[test]
    fn tile_rows_cover_output() {
        let layer = LayerSpec::conv(64, 32, 56, 56, 5, 2, 2).unwrap();
        let plan = choose_tiling(&layer, &cfg_with_input(20_000)).unwrap();
        let mut next = 0;
        for t in 0..plan.tile_count {
            let r = plan.output_rows(&layer, t);
            assert_eq!(r.start, next);
            next = r.end;
            assert!(plan.input_rows(&layer, t).len() <= plan.tiy);
        }
        assert_eq!(next, layer.noy);
    }

    #[test]
    fn buffer_state() {
        let cfg = AcceleratorConfig::default();
        let mut pool = BufferPool::new(&cfg);
        assert_eq!(
            pool.get(BufferId::InputA).capacity_bytes,
            pool.get(BufferId::InputB).capacity_bytes
        );
        let r = Resident {
            layer: 0,
            tile: 0,
            role: BufferRole::Input,
        };
        pool.get_mut(BufferId::Weight).fill(1000, r).unwrap();
        assert!(pool
            .get_mut(BufferId::Weight)
            .fill(cfg.weight_buf_bytes + 1, r)
            .is_err());
        pool.get_mut(BufferId::Weight).release();
        assert_eq!(pool.get(BufferId::Weight).occupied_bytes, 0);
    }

    #[test]
    fn traffic_examples() {
        let mb = NetItem::Block(build_mbconv(24, 6, 3, 1, 24, 28, 28).unwrap());
        let lbl = dram_traffic(&mb, TrafficStrategy::LayerByLayer).unwrap();
        assert_eq!(lbl.input + lbl.output, 489_216);
        let vf = dram_traffic(&mb, TrafficStrategy::VF).unwrap();
        assert_eq!(vf.input + vf.output, 37_632);
        assert_eq!(vf.weights, lbl.weights);
        assert!(vf.total() < lbl.total());
        assert!(matches!(
            dram_traffic(&mb, TrafficStrategy::HF),
            Err(SimError::Strategy(_))
        ));

        let single = NetItem::Layer(LayerSpec::conv(4, 4, 8, 8, 3, 1, 1).unwrap());
        assert!(matches!(
            dram_traffic(&single, TrafficStrategy::VF),
            Err(SimError::Strategy(_))
        ));

        let py = NetItem::Block(
            build_pyconv_block(64, 56, 56, &[9, 7, 5, 3], &[16; 4], &[16, 16, 32, 64]).unwrap(),
        );
        assert_eq!(
            dram_traffic(&py, TrafficStrategy::HF).unwrap().input,
            200_704
        );
        assert_eq!(
            dram_traffic(&py, TrafficStrategy::LayerByLayer)
                .unwrap()
                .input,
            802_816
        );
    }
}
