//! Timed schedules for layer-by-layer, vertically fused (VF) and horizontally
//! fused (HF) execution.
//!
//! Every schedule is produced by one small discrete-event engine: a serial DMA
//! engine and a serial compute engine run tasks whose dependencies encode the
//! ping-pong buffer hand-offs. Compute tasks run in program order; the DMA
//! engine picks, among ready transfers, the earliest one and breaks ties by
//! class (store of the previous tile, then weights, then load of the next tile)
//! and then by tile.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::memsys::{self, input_rows_for, transfer_latency, BufferId, TilePlan, VF_WINDOW};
use crate::netmodel::{
    AcceleratorConfig, BlockKind, BlockSpec, LayerKind, LayerSpec, NetItem, NetworkSpec,
};
use crate::perf::{DramBytes, PerfReport};
use crate::zflow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PhaseKind {
    Compute {
        layer: usize,
        tile: usize,
    },
    /// Store of a tile's outputs to DRAM.
    TransPrev {
        tile: usize,
    },
    /// Load of a tile's inputs from DRAM.
    TransNext {
        tile: usize,
    },
    LoadWeights {
        layer: usize,
    },
    /// Zero-cost permutation of packed branch outputs to their addresses.
    Rearrange {
        layer: usize,
        tile: usize,
    },
}

impl PhaseKind {
    pub fn is_transfer(&self) -> bool {
        matches!(
            self,
            PhaseKind::TransPrev { .. }
                | PhaseKind::TransNext { .. }
                | PhaseKind::LoadWeights { .. }
        )
    }

    fn dma_class(&self) -> u8 {
        match self {
            PhaseKind::TransPrev { .. } => 0,
            PhaseKind::LoadWeights { .. } => 1,
            _ => 2,
        }
    }

    fn tile(&self) -> usize {
        match *self {
            PhaseKind::Compute { tile, .. }
            | PhaseKind::TransPrev { tile }
            | PhaseKind::TransNext { tile }
            | PhaseKind::Rearrange { tile, .. } => tile,
            PhaseKind::LoadWeights { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    #[serde(flatten)]
    pub kind: PhaseKind,
    /// Index into [`ExecutionSchedule::units`].
    pub unit: usize,
    pub start: u64,
    pub end: u64,
    pub buffers: Vec<BufferId>,
    pub bytes: u64,
    pub useful_macs: u64,
    /// Cycles in which this phase issued MACs (fill cycles excluded).
    pub mac_cycles: u64,
}

impl Phase {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

/// One reported row: a layer, a branch, or a fused block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub label: String,
    pub item: usize,
    pub block_kind: String,
    pub strategy: String,
    pub start: u64,
    pub end: u64,
    pub dram_bytes: DramBytes,
    pub transfer_cycles: u64,
    pub useful_macs: u64,
    pub mac_cycles: u64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionSchedule {
    pub strategy: String,
    pub total_cycles: u64,
    pub units: Vec<UnitSummary>,
    pub phases: Vec<Phase>,
}

impl ExecutionSchedule {
    fn empty(strategy: &str) -> Self {
        Self {
            strategy: strategy.into(),
            total_cycles: 0,
            units: Vec::new(),
            phases: Vec::new(),
        }
    }

    /// Append `other` so that it starts when this schedule ends.
    pub fn append(&mut self, other: ExecutionSchedule) {
        let offset = self.total_cycles;
        let base = self.units.len();
        for mut u in other.units {
            u.start += offset;
            u.end += offset;
            self.units.push(u);
        }
        for mut p in other.phases {
            p.start += offset;
            p.end += offset;
            p.unit += base;
            self.phases.push(p);
        }
        self.total_cycles = offset + other.total_cycles;
    }

    pub fn dram_bytes(&self) -> DramBytes {
        let mut d = DramBytes::default();
        for u in &self.units {
            d.add(&u.dram_bytes);
        }
        d
    }

    /// Cycles the DMA engine is busy.
    pub fn transfer_cycles(&self) -> u64 {
        self.phases
            .iter()
            .filter(|p| p.kind.is_transfer())
            .map(Phase::duration)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Engine {
    Dma,
    Compute,
}

#[derive(Debug, Clone)]
struct Task {
    kind: PhaseKind,
    engine: Engine,
    duration: u64,
    deps: Vec<usize>,
    buffers: Vec<BufferId>,
    bytes: u64,
    useful_macs: u64,
    mac_cycles: u64,
}

#[derive(Debug, Default)]
struct Graph {
    tasks: Vec<Task>,
}

impl Graph {
    fn transfer(
        &mut self,
        kind: PhaseKind,
        bytes: u64,
        cfg: &AcceleratorConfig,
        deps: Vec<usize>,
        buffers: Vec<BufferId>,
    ) -> usize {
        self.push(Task {
            kind,
            engine: Engine::Dma,
            duration: transfer_latency(bytes, cfg),
            deps,
            buffers,
            bytes,
            useful_macs: 0,
            mac_cycles: 0,
        })
    }

    fn compute(
        &mut self,
        kind: PhaseKind,
        work: Work,
        deps: Vec<usize>,
        buffers: Vec<BufferId>,
    ) -> usize {
        self.push(Task {
            kind,
            engine: Engine::Compute,
            duration: work.cycles,
            deps,
            buffers,
            bytes: 0,
            useful_macs: work.useful_macs,
            mac_cycles: work.mac_cycles,
        })
    }

    fn push(&mut self, task: Task) -> usize {
        self.tasks.push(task);
        self.tasks.len() - 1
    }

    /// Place every task in time. Fails if the dependencies can never be met.
    fn run(&self) -> Result<Vec<Phase>> {
        let n = self.tasks.len();
        let mut end: Vec<Option<u64>> = vec![None; n];
        let mut start = vec![0u64; n];
        let compute_order: Vec<usize> = (0..n)
            .filter(|&i| self.tasks[i].engine == Engine::Compute)
            .collect();
        let mut next_compute = 0;
        let (mut dma_free, mut compute_free) = (0u64, 0u64);
        let mut done = 0;
        let ready_at = |i: usize, end: &[Option<u64>]| -> Option<u64> {
            self.tasks[i]
                .deps
                .iter()
                .try_fold(0u64, |acc, &d| end[d].map(|e| acc.max(e)))
        };
        while done < n {
            // (start, class, tile, index)
            let mut best: Option<(u64, u8, usize, usize)> = None;
            if let Some(&i) = compute_order.get(next_compute) {
                if let Some(r) = ready_at(i, &end) {
                    best = Some((r.max(compute_free), 0, 0, i));
                }
            }
            for (i, t) in self.tasks.iter().enumerate() {
                if t.engine != Engine::Dma || end[i].is_some() {
                    continue;
                }
                if let Some(r) = ready_at(i, &end) {
                    let key = (r.max(dma_free), t.kind.dma_class(), t.kind.tile(), i);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let Some((s, _, _, i)) = best else {
                return Err(SimError::Plan(format!(
                    "schedule deadlock with {} of {n} tasks placed",
                    done
                )));
            };
            let e = s + self.tasks[i].duration;
            start[i] = s;
            end[i] = Some(e);
            match self.tasks[i].engine {
                Engine::Dma => dma_free = e,
                Engine::Compute => {
                    compute_free = e;
                    next_compute += 1;
                }
            }
            done += 1;
        }
        Ok(self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| Phase {
                kind: t.kind,
                unit: 0,
                start: start[i],
                end: end[i].unwrap_or(start[i]),
                buffers: t.buffers.clone(),
                bytes: t.bytes,
                useful_macs: t.useful_macs,
                mac_cycles: t.mac_cycles,
            })
            .collect())
    }
}

/// Compute cost of one slice of work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Work {
    pub cycles: u64,
    pub useful_macs: u64,
    pub mac_cycles: u64,
}

/// Work of `rows` output rows of a layer on the Z-flow engine.
fn layer_rows_work(layer: &LayerSpec, cfg: &AcceleratorConfig, rows: usize) -> Work {
    if rows == 0 {
        return Work::default();
    }
    let model = zflow::cycle_model(layer, cfg, Some(rows));
    Work {
        cycles: model.total(),
        useful_macs: (layer.nkx
            * layer.nky
            * layer.reduction_channels()
            * layer.nox
            * layer.nof
            * rows) as u64,
        mac_cycles: model.mac_cycles,
    }
}

/// Per-tile inputs of a dual-buffered single-layer pipeline.
#[derive(Debug, Clone, Default)]
pub struct TileWork {
    pub load_bytes: u64,
    /// Compute split into chunks; chunk `k` may first reload the weight buffer.
    pub chunks: Vec<(Option<u64>, Work)>,
    pub store_bytes: u64,
}

/// Dual-buffered pipeline of one layer (or one packed HF block).
///
/// Tile `t` uses input/output buffer `t % 2`; the load of tile `t` waits for
/// compute of tile `t - 2` to release its input buffer and compute of tile `t`
/// waits for the store of tile `t - 2` to release its output buffer.
fn pipeline(
    layer: usize,
    upfront_weights: &[(usize, u64)],
    tiles: &[TileWork],
    rearrange: bool,
    cfg: &AcceleratorConfig,
) -> Result<Vec<Phase>> {
    let mut g = Graph::default();
    let weights: Vec<usize> = upfront_weights
        .iter()
        .map(|&(l, bytes)| {
            g.transfer(
                PhaseKind::LoadWeights { layer: l },
                bytes,
                cfg,
                vec![],
                vec![BufferId::Weight],
            )
        })
        .collect();
    let mut last_compute: Vec<usize> = Vec::with_capacity(tiles.len());
    let mut stores: Vec<usize> = Vec::with_capacity(tiles.len());
    let mut prev_compute: Option<usize> = None;
    for (t, tile) in tiles.iter().enumerate() {
        let (inb, outb) = (BufferId::input_for(t), BufferId::output_for(t));
        let mut load_deps = Vec::new();
        if t >= 2 {
            load_deps.push(last_compute[t - 2]);
        }
        let load = g.transfer(
            PhaseKind::TransNext { tile: t },
            tile.load_bytes,
            cfg,
            load_deps,
            vec![inb],
        );
        for (k, (reload, work)) in tile.chunks.iter().enumerate() {
            let mut deps = vec![load];
            deps.extend(prev_compute);
            if k == 0 && t >= 2 {
                deps.push(stores[t - 2]);
            }
            match reload {
                Some(bytes) => {
                    let w = g.transfer(
                        PhaseKind::LoadWeights { layer },
                        *bytes,
                        cfg,
                        prev_compute.into_iter().collect(),
                        vec![BufferId::Weight],
                    );
                    deps.push(w);
                }
                None => deps.extend(&weights),
            }
            let c = g.compute(
                PhaseKind::Compute { layer, tile: t },
                *work,
                deps,
                vec![inb, outb, BufferId::Weight],
            );
            prev_compute = Some(c);
        }
        let c = prev_compute.ok_or_else(|| SimError::Plan(format!("tile {t} has no compute")))?;
        last_compute.push(c);
        let store_dep = if rearrange {
            let r = g.compute(
                PhaseKind::Rearrange { layer, tile: t },
                Work::default(),
                vec![c],
                vec![],
            );
            prev_compute = Some(r);
            r
        } else {
            c
        };
        stores.push(g.transfer(
            PhaseKind::TransPrev { tile: t },
            tile.store_bytes,
            cfg,
            vec![store_dep],
            vec![outb],
        ));
    }
    g.run()
}

/// Split `total` into parts proportional to `weights` using cumulative ceilings,
/// so that the parts sum to `total` exactly.
fn split_cumulative(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut acc = 0u64;
    let mut prev = 0u64;
    weights
        .iter()
        .map(|&w| {
            acc += w;
            let cum = (total as u128 * acc as u128).div_ceil(sum as u128) as u64;
            let part = cum - prev;
            prev = cum;
            part
        })
        .collect()
}

fn unit_from(
    label: String,
    item: usize,
    block_kind: &str,
    strategy: &str,
    phases: &[Phase],
    note: String,
) -> UnitSummary {
    let mut dram = DramBytes::default();
    for p in phases {
        match p.kind {
            PhaseKind::TransNext { .. } => dram.input += p.bytes,
            PhaseKind::LoadWeights { .. } => dram.weights += p.bytes,
            PhaseKind::TransPrev { .. } => dram.output += p.bytes,
            _ => {}
        }
    }
    UnitSummary {
        label,
        item,
        block_kind: block_kind.into(),
        strategy: strategy.into(),
        start: 0,
        end: phases.iter().map(|p| p.end).max().unwrap_or(0),
        dram_bytes: dram,
        transfer_cycles: phases
            .iter()
            .filter(|p| p.kind.is_transfer())
            .map(Phase::duration)
            .sum(),
        useful_macs: phases.iter().map(|p| p.useful_macs).sum(),
        mac_cycles: phases.iter().map(|p| p.mac_cycles).sum(),
        note,
    }
}

fn single_unit(strategy: &str, unit: UnitSummary, phases: Vec<Phase>) -> ExecutionSchedule {
    ExecutionSchedule {
        strategy: strategy.into(),
        total_cycles: unit.end,
        units: vec![unit],
        phases,
    }
}

/// Layer-by-layer schedule of one layer with dual-buffered row tiles.
pub fn schedule_layer(
    layer: &LayerSpec,
    cfg: &AcceleratorConfig,
    tiling: &TilePlan,
) -> Result<ExecutionSchedule> {
    schedule_layer_as(layer, cfg, tiling, 0, "0".into(), 0, "layer")
}

fn schedule_layer_as(
    layer: &LayerSpec,
    cfg: &AcceleratorConfig,
    tiling: &TilePlan,
    layer_id: usize,
    label: String,
    item: usize,
    block_kind: &str,
) -> Result<ExecutionSchedule> {
    layer.validate()?;
    let wbytes = layer.weight_bytes();
    let chunks = wbytes.div_ceil(cfg.weight_buf_bytes).max(1) as usize;
    let chunk_bytes = split_cumulative(wbytes, &vec![1; chunks]);
    let mut tiles = Vec::with_capacity(tiling.tile_count);
    for t in 0..tiling.tile_count {
        let rows = tiling.output_rows(layer, t).len();
        let work = layer_rows_work(layer, cfg, rows);
        let parts = |v: u64| split_cumulative(v, &vec![1; chunks]);
        let (cy, um, mc) = (
            parts(work.cycles),
            parts(work.useful_macs),
            parts(work.mac_cycles),
        );
        tiles.push(TileWork {
            load_bytes: tiling.input_bytes(layer, t),
            chunks: (0..chunks)
                .map(|k| {
                    let reload = (chunks > 1).then_some(chunk_bytes[k]);
                    (
                        reload,
                        Work {
                            cycles: cy[k],
                            useful_macs: um[k],
                            mac_cycles: mc[k],
                        },
                    )
                })
                .collect(),
            store_bytes: tiling.output_bytes(layer, t),
        });
    }
    let upfront: Vec<(usize, u64)> = if chunks == 1 {
        vec![(layer_id, wbytes)]
    } else {
        vec![]
    };
    let phases = pipeline(layer_id, &upfront, &tiles, false, cfg)?;
    let note = if chunks > 1 {
        format!("weights reloaded in {chunks} chunks per tile")
    } else {
        String::new()
    };
    let unit = unit_from(label, item, block_kind, "LayerByLayer", &phases, note);
    Ok(single_unit("baseline", unit, phases))
}

/// Row ranges of one VF tile, per fused layer.
#[derive(Debug, Clone)]
struct VfTile {
    /// Output rows held per layer (halo included).
    out_rows: Vec<Range<usize>>,
    /// Output rows newly computed per layer.
    new_rows: Vec<usize>,
    input_rows: Range<usize>,
    new_input_rows: usize,
}

fn vf_tiles(layers: &[LayerSpec], rows_per_tile: usize) -> Vec<VfTile> {
    let last = &layers[layers.len() - 1];
    let count = last.noy.div_ceil(rows_per_tile);
    let mut prev_end = vec![0usize; layers.len()];
    let mut prev_input_end = 0;
    let mut tiles = Vec::with_capacity(count);
    for t in 0..count {
        let final_tile = t + 1 == count;
        let mut out_rows = vec![0..0; layers.len()];
        let mut r = t * rows_per_tile..((t + 1) * rows_per_tile).min(last.noy);
        for (l, layer) in layers.iter().enumerate().rev() {
            if final_tile {
                r.end = layer.noy;
            }
            out_rows[l] = r.clone();
            r = input_rows_for(layer, r);
        }
        let mut input_rows = r;
        if final_tile {
            input_rows.end = layers[0].niy;
        }
        let new_rows = out_rows
            .iter()
            .zip(prev_end.iter_mut())
            .map(|(r, p)| {
                let n = r.end.saturating_sub(*p);
                *p = (*p).max(r.end);
                n
            })
            .collect();
        let new_input_rows = input_rows.end.saturating_sub(prev_input_end);
        prev_input_end = prev_input_end.max(input_rows.end);
        tiles.push(VfTile {
            out_rows,
            new_rows,
            input_rows,
            new_input_rows,
        });
    }
    tiles
}

/// Buffer occupancy of the largest VF tile, or the reason it does not fit.
fn vf_fits(
    layers: &[LayerSpec],
    shortcut_bytes_per_row: u64,
    tiles: &[VfTile],
    cfg: &AcceleratorConfig,
) -> std::result::Result<(), String> {
    let row_bytes = |l: &LayerSpec| (l.nox * l.nof) as u64;
    let n = layers.len();
    for (t, tile) in tiles.iter().enumerate() {
        let input = (tile.input_rows.len() * layers[0].nix * layers[0].nif) as u64;
        let shortcut = shortcut_bytes_per_row * tile.out_rows[n - 1].len() as u64;
        let mut need: Vec<(BufferId, u64)> = vec![(BufferId::InputA, input)];
        let held = |l: usize| tile.out_rows[l].len() as u64 * row_bytes(&layers[l]);
        match n {
            1 => need.push((BufferId::OutputB, held(0))),
            2 => {
                need.push((BufferId::InputB, held(0) + shortcut));
                need.push((BufferId::OutputB, held(1)));
            }
            _ => {
                need.push((BufferId::InputB, held(0) + shortcut));
                need.push((BufferId::OutputA, held(1) + shortcut));
                need.push((BufferId::OutputB, held(2)));
            }
        }
        for (id, bytes) in need {
            if bytes > id.capacity(cfg) {
                return Err(format!(
                    "tile {t} needs {bytes} bytes in {id:?} (capacity {})",
                    id.capacity(cfg)
                ));
            }
        }
    }
    Ok(())
}

/// Buffers each fused layer's compute touches, for a window of `n` layers.
fn vf_compute_buffers(n: usize, l: usize) -> Vec<BufferId> {
    use BufferId::*;
    match (n, l) {
        (1, _) => vec![InputA, InputB, OutputA, OutputB, Weight],
        (2, 0) => vec![InputA, InputB, Weight],
        (2, _) => vec![InputB, OutputA, OutputB, Weight],
        (_, 0) => vec![InputA, InputB, Weight],
        (_, 1) => vec![InputB, OutputA, Weight],
        _ => vec![OutputA, OutputB, Weight],
    }
}

/// Vertically fused schedule of a bypass-branch block.
///
/// `rows_per_tile` fixes the output rows per tile of the last fused layer;
/// by default the largest count that fits the buffers is used.
pub fn schedule_vf(
    block: &BlockSpec,
    cfg: &AcceleratorConfig,
    rows_per_tile: Option<usize>,
) -> Result<ExecutionSchedule> {
    schedule_vf_as(block, cfg, rows_per_tile, 0, 0)
}

fn schedule_vf_as(
    block: &BlockSpec,
    cfg: &AcceleratorConfig,
    rows_per_tile: Option<usize>,
    layer_base: usize,
    item: usize,
) -> Result<ExecutionSchedule> {
    if block.kind != BlockKind::BypassBranch {
        return Err(SimError::Strategy(
            "VF applies to BypassBranch blocks only".into(),
        ));
    }
    block.validate()?;
    let windows: Vec<&[LayerSpec]> = block.layers.chunks(VF_WINDOW).collect();
    let mut out = ExecutionSchedule::empty("fused");
    let mut phases_all = Vec::new();
    let mut offset = 0u64;
    for (w, window) in windows.iter().enumerate() {
        let base = layer_base + w * VF_WINDOW;
        let wsum: u64 = window.iter().map(LayerSpec::weight_bytes).sum();
        if wsum > cfg.weight_buf_bytes {
            return Err(SimError::FusionCapacity(format!(
                "fused weights {wsum} bytes exceed the weight buffer ({} bytes)",
                cfg.weight_buf_bytes
            )));
        }
        let shortcut_row = if block.shortcut && windows.len() == 1 {
            let (c, _, x) = block.input_dims();
            (c * x) as u64
        } else {
            0
        };
        let last = &window[window.len() - 1];
        let tiles = match rows_per_tile {
            Some(r) if r > 0 => {
                let tiles = vf_tiles(window, r.min(last.noy));
                vf_fits(window, shortcut_row, &tiles, cfg).map_err(SimError::FusionCapacity)?;
                tiles
            }
            _ => {
                let mut found = None;
                let mut reason = String::new();
                for r in (1..=last.noy).rev() {
                    let tiles = vf_tiles(window, r);
                    match vf_fits(window, shortcut_row, &tiles, cfg) {
                        Ok(()) => {
                            found = Some(tiles);
                            break;
                        }
                        Err(e) => reason = e,
                    }
                }
                found.ok_or(SimError::FusionCapacity(reason))?
            }
        };

        let n = window.len();
        let mut g = Graph::default();
        let weights: Vec<usize> = window
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                g.transfer(
                    PhaseKind::LoadWeights { layer: base + l },
                    layer.weight_bytes(),
                    cfg,
                    vec![],
                    vec![BufferId::Weight],
                )
            })
            .collect();
        let mut first_compute: Vec<usize> = Vec::new();
        let mut stores: Vec<usize> = Vec::new();
        let mut prev_compute: Option<usize> = None;
        for (t, tile) in tiles.iter().enumerate() {
            let load_bytes = (tile.new_input_rows * window[0].nix * window[0].nif) as u64;
            let load_deps = if t >= 1 {
                vec![first_compute[t - 1]]
            } else {
                vec![]
            };
            let load = g.transfer(
                PhaseKind::TransNext { tile: t },
                load_bytes,
                cfg,
                load_deps,
                vec![BufferId::InputA],
            );
            for (l, layer) in window.iter().enumerate() {
                let mut deps: Vec<usize> = prev_compute.into_iter().collect();
                if l == 0 {
                    deps.push(load);
                    deps.extend(&weights);
                }
                if l + 1 == n && t >= 1 {
                    deps.push(stores[t - 1]);
                }
                let work = layer_rows_work(layer, cfg, tile.new_rows[l]);
                let c = g.compute(
                    PhaseKind::Compute {
                        layer: base + l,
                        tile: t,
                    },
                    work,
                    deps,
                    vf_compute_buffers(n, l),
                );
                if l == 0 {
                    first_compute.push(c);
                }
                prev_compute = Some(c);
            }
            let store_bytes = (tile.out_rows[n - 1].len() * last.nox * last.nof) as u64;
            stores.push(g.transfer(
                PhaseKind::TransPrev { tile: t },
                store_bytes,
                cfg,
                prev_compute.into_iter().collect(),
                vec![BufferId::OutputB],
            ));
        }
        for mut p in g.run()? {
            p.start += offset;
            p.end += offset;
            phases_all.push(p);
        }
        offset = phases_all.iter().map(|p| p.end).max().unwrap_or(offset);
    }
    let note = if windows.len() > 1 {
        format!(
            "chain of {} layers fused in windows of {VF_WINDOW}",
            block.layers.len()
        )
    } else {
        String::new()
    };
    let unit = unit_from(
        item.to_string(),
        item,
        "BypassBranch",
        "VF",
        &phases_all,
        note,
    );
    out.total_cycles = unit.end;
    out.units.push(unit);
    out.phases = phases_all;
    Ok(out)
}

/// Packed cycle count of a multi-branch block: all branches share one padded kernel.
pub fn hf_cycles(block: &BlockSpec, cfg: &AcceleratorConfig) -> Result<u64> {
    let (g, nifg) = hf_shape(block)?;
    let first = &block.layers[0];
    let nkx = block.layers.iter().map(|l| l.nkx).max().unwrap_or(1);
    let nky = block.layers.iter().map(|l| l.nky).max().unwrap_or(1);
    let nofg: usize = block.layers.iter().map(LayerSpec::nof_group).sum();
    let work = (g * nkx * nky * nifg) as u128 * (first.nox * first.noy * nofg) as u128;
    Ok(work.div_ceil((cfg.pox * cfg.poy * cfg.pof) as u128) as u64)
}

fn hf_shape(block: &BlockSpec) -> Result<(usize, usize)> {
    if block.kind != BlockKind::MultiBranch {
        return Err(SimError::Strategy(
            "HF applies to MultiBranch blocks only".into(),
        ));
    }
    block.validate()?;
    let first = &block.layers[0];
    for (i, l) in block.layers.iter().enumerate() {
        if l.kind != LayerKind::GroupConv {
            return Err(SimError::HfShape(format!("branch {i} is not a GroupCONV")));
        }
        if l.group_num != first.group_num || l.nif_group() != first.nif_group() {
            return Err(SimError::HfShape(format!(
                "branch {i} has Group_num {} / Nif_group {}, branch 0 has {} / {}",
                l.group_num,
                l.nif_group(),
                first.group_num,
                first.nif_group()
            )));
        }
        if l.stride != first.stride {
            return Err(SimError::HfShape(format!(
                "branch {i} stride differs from branch 0"
            )));
        }
    }
    Ok((first.group_num, first.nif_group()))
}

/// Horizontally fused schedule: branches packed across the output-channel lanes.
pub fn schedule_hf(block: &BlockSpec, cfg: &AcceleratorConfig) -> Result<ExecutionSchedule> {
    schedule_hf_as(block, cfg, 0, 0)
}

fn schedule_hf_as(
    block: &BlockSpec,
    cfg: &AcceleratorConfig,
    layer_base: usize,
    item: usize,
) -> Result<ExecutionSchedule> {
    let total = hf_cycles(block, cfg)?;
    let first = &block.layers[0];
    let wsum: u64 = block.layers.iter().map(LayerSpec::weight_bytes).sum();
    if wsum > cfg.weight_buf_bytes {
        return Err(SimError::FusionCapacity(format!(
            "branch weights {wsum} bytes exceed the weight buffer ({} bytes)",
            cfg.weight_buf_bytes
        )));
    }
    let nof_total: usize = block.layers.iter().map(|l| l.nof).sum();
    let out_row = (first.nox * nof_total) as u64;
    let in_row = (first.nix * first.nif) as u64;
    // Rows per tile limited by both buffers; every branch's receptive rows must fit.
    let fits = |r: usize| -> bool {
        if r as u64 * out_row > cfg.output_buf_bytes {
            return false;
        }
        (0..first.noy.div_ceil(r)).all(|t| {
            let out = t * r..((t + 1) * r).min(first.noy);
            let ranges = block.layers.iter().map(|l| input_rows_for(l, out.clone()));
            let lo = ranges.clone().map(|r| r.start).min().unwrap_or(0);
            let hi = ranges.map(|r| r.end).max().unwrap_or(0);
            hi.saturating_sub(lo) as u64 * in_row <= cfg.input_buf_bytes
        })
    };
    let rows = (1..=first.noy).rev().find(|&r| fits(r)).ok_or_else(|| {
        SimError::FusionCapacity("one packed output row does not fit the buffers".into())
    })?;
    let count = first.noy.div_ceil(rows);
    let row_weights: Vec<u64> = (0..count)
        .map(|t| (((t + 1) * rows).min(first.noy) - t * rows) as u64)
        .collect();
    let cycles = split_cumulative(total, &row_weights);
    let macs_per_row: u64 = block
        .layers
        .iter()
        .map(|l| (l.nkx * l.nky * l.reduction_channels() * l.nox * l.nof) as u64)
        .sum();
    let mut tiles = Vec::with_capacity(count);
    let mut prev_in_end = 0;
    for t in 0..count {
        let out = t * rows..((t + 1) * rows).min(first.noy);
        let mut in_end = block
            .layers
            .iter()
            .map(|l| input_rows_for(l, out.clone()).end)
            .max()
            .unwrap_or(0);
        if t + 1 == count {
            in_end = first.niy;
        }
        let new_in = in_end.saturating_sub(prev_in_end);
        prev_in_end = prev_in_end.max(in_end);
        tiles.push(TileWork {
            load_bytes: new_in as u64 * in_row,
            chunks: vec![(
                None,
                Work {
                    cycles: cycles[t],
                    useful_macs: macs_per_row * out.len() as u64,
                    mac_cycles: cycles[t],
                },
            )],
            store_bytes: out.len() as u64 * out_row,
        });
    }
    let upfront: Vec<(usize, u64)> = block
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (layer_base + i, l.weight_bytes()))
        .collect();
    let phases = pipeline(layer_base, &upfront, &tiles, true, cfg)?;
    let unit = unit_from(
        item.to_string(),
        item,
        "MultiBranch",
        "HF",
        &phases,
        String::new(),
    );
    Ok(single_unit("fused", unit, phases))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyPolicy {
    AllBaseline,
    FuseWherePossible,
}

impl StrategyPolicy {
    pub fn name(self) -> &'static str {
        match self {
            StrategyPolicy::AllBaseline => "baseline",
            StrategyPolicy::FuseWherePossible => "fused",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SchedOptions {
    /// Output rows per VF tile; `None` picks the largest that fits.
    pub vf_rows_per_tile: Option<usize>,
}

fn baseline_item(
    item: &NetItem,
    index: usize,
    layer_base: usize,
    cfg: &AcceleratorConfig,
    note: &str,
) -> Result<ExecutionSchedule> {
    let mut out = ExecutionSchedule::empty("baseline");
    let kind = match item {
        NetItem::Layer(_) => "layer",
        NetItem::Block(b) => match b.kind {
            BlockKind::BypassBranch => "BypassBranch",
            BlockKind::MultiBranch => "MultiBranch",
        },
    };
    for (j, layer) in item.layers().iter().enumerate() {
        let label = match item {
            NetItem::Layer(_) => index.to_string(),
            NetItem::Block(_) => format!("{index}.b{j}"),
        };
        let tiling = memsys::choose_tiling(layer, cfg)?;
        let mut s = schedule_layer_as(layer, cfg, &tiling, layer_base + j, label, index, kind)?;
        if !note.is_empty() {
            s.units[0].note = note.to_string();
        }
        out.append(s);
    }
    Ok(out)
}

/// Schedule one network item under a policy; fusion errors fall back to baseline.
pub fn schedule_item(
    item: &NetItem,
    index: usize,
    layer_base: usize,
    cfg: &AcceleratorConfig,
    policy: StrategyPolicy,
    opts: SchedOptions,
) -> Result<ExecutionSchedule> {
    let fused = match (policy, item) {
        (StrategyPolicy::FuseWherePossible, NetItem::Block(b)) => Some(match b.kind {
            BlockKind::BypassBranch => {
                schedule_vf_as(b, cfg, opts.vf_rows_per_tile, layer_base, index)
            }
            BlockKind::MultiBranch => schedule_hf_as(b, cfg, layer_base, index),
        }),
        _ => None,
    };
    match fused {
        Some(Ok(s)) => Ok(s),
        Some(Err(e @ (SimError::FusionCapacity(_) | SimError::HfShape(_)))) => {
            let mut s = baseline_item(item, index, layer_base, cfg, &e.to_string())?;
            s.strategy = policy.name().into();
            Ok(s)
        }
        Some(Err(e)) => Err(e),
        None => {
            let mut s = baseline_item(item, index, layer_base, cfg, "")?;
            s.strategy = policy.name().into();
            Ok(s)
        }
    }
}

/// Schedule every item in order, each starting when the previous one ends.
pub fn schedule_network(
    net: &NetworkSpec,
    cfg: &AcceleratorConfig,
    policy: StrategyPolicy,
) -> Result<(ExecutionSchedule, PerfReport)> {
    schedule_network_with(net, cfg, policy, SchedOptions::default())
}

pub fn schedule_network_with(
    net: &NetworkSpec,
    cfg: &AcceleratorConfig,
    policy: StrategyPolicy,
    opts: SchedOptions,
) -> Result<(ExecutionSchedule, PerfReport)> {
    cfg.validate()?;
    net.validate()?;
    let mut bases = Vec::with_capacity(net.items.len());
    let mut next = 0;
    for item in &net.items {
        bases.push(next);
        next += item.layers().len();
    }
    let parts = crate::par::map_indexed(crate::par::ExecPolicy::default(), net.items.len(), |i| {
        schedule_item(&net.items[i], i, bases[i], cfg, policy, opts).map_err(|e| e.at_item(i))
    });
    let mut schedule = ExecutionSchedule::empty(policy.name());
    for part in parts {
        schedule.append(part?);
    }
    let report = PerfReport::from_schedule(&schedule, cfg);
    Ok((schedule, report))
}

/// Pairs of phases that share a buffer and overlap in time.
pub fn check_conflicts(schedule: &ExecutionSchedule) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..schedule.phases.len())
        .filter(|&i| schedule.phases[i].duration() > 0 && !schedule.phases[i].buffers.is_empty())
        .collect();
    order.sort_by_key(|&i| (schedule.phases[i].start, i));
    let mut conflicts = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let a = &schedule.phases[i];
        for &j in &order[k + 1..] {
            let b = &schedule.phases[j];
            if b.start >= a.end {
                break;
            }
            if a.buffers.iter().any(|x| b.buffers.contains(x)) {
                conflicts.push((i.min(j), i.max(j)));
            }
        }
    }
    conflicts
}

/// Compute of tile `t` must follow its input load; the store of tile `t`
/// must follow every compute of that tile.
pub fn check_dependencies(schedule: &ExecutionSchedule) -> Vec<String> {
    let mut errors = Vec::new();
    for (u, _) in schedule.units.iter().enumerate() {
        let phases: Vec<&Phase> = schedule.phases.iter().filter(|p| p.unit == u).collect();
        // Loads and stores carry tile ids local to their fusion window; windows
        // are laid out in order, so only compare phases that share a window span.
        for p in &phases {
            match p.kind {
                PhaseKind::Compute { tile, .. } => {
                    let load = phases
                        .iter()
                        .filter(|q| q.kind == PhaseKind::TransNext { tile } && q.start <= p.start)
                        .max_by_key(|q| q.start);
                    if let Some(l) = load {
                        if l.end > p.start {
                            errors.push(format!(
                                "unit {u}: compute of tile {tile} starts before its load ends"
                            ));
                        }
                    } else {
                        errors.push(format!(
                            "unit {u}: compute of tile {tile} has no input load"
                        ));
                    }
                }
                PhaseKind::TransPrev { tile } => {
                    let latest_load = phases
                        .iter()
                        .filter(|q| q.kind == PhaseKind::TransNext { tile } && q.start <= p.start)
                        .map(|q| q.start)
                        .max()
                        .unwrap_or(0);
                    let unfinished = phases.iter().any(|q| {
                        matches!(q.kind, PhaseKind::Compute { tile: ct, .. } | PhaseKind::Rearrange { tile: ct, .. } if ct == tile)
                            && q.start >= latest_load
                            && q.start <= p.start
                            && q.end > p.start
                    });
                    if unfinished {
                        errors.push(format!(
                            "unit {u}: store of tile {tile} starts before its compute ends"
                        ));
                    }
                }
                _ => {}
            }
        }
    }
    errors
}
