//! Z-flow dataflow: serpentine traversal of the kernel with pixels shifted
//! between neighbouring registers of a `poy x pox` register file.
//!
//! Register array `j` feeds output row `oy0 + j` of the tile, lane `i` inside
//! an array feeds output column `ox0 + i`. For one (sub-)kernel pass:
//!
//! - the first position fills every lane (shifted in from the loading edge
//!   during `pox - 1` prologue cycles when the pass opens a tile);
//! - a horizontal step shifts each array by one lane and reads one fresh
//!   pixel at the leading edge (lane `pox - 1` on left-to-right rows, lane 0
//!   on right-to-left rows);
//! - a row transition (inflection) copies array `j + 1` into array `j`; the
//!   bottom array is refilled from the combination (prefetch) registers.
//!
//! Kernel row 0 runs left-to-right, odd rows run right-to-left.
//!
//! Stride 2 is mapped onto the same engine by splitting the kernel (and the
//! input it touches) into its four column/row parity phases; each phase is a
//! unit-step traversal over a parity-subsampled view of the input.
//!
//! The engine moves actual int8 values, so functional results are only correct
//! if the choreography is.

use std::io::{self, Write};

use crate::error::{Result, SimError};
use crate::kseg::{self, PartialPlane, SubKernel};
use crate::netmodel::{requantize, AcceleratorConfig, LayerKind, LayerSpec, TensorI8, Weights};
use crate::par::{self, ExecPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::LeftToRight => "LTR",
            Direction::RightToLeft => "RTL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelSource {
    BufferRead,
    NeighborReuse { from_array: usize, from_lane: usize },
    PrefetchRegister,
    ZeroPad,
}

impl PixelSource {
    pub fn tag(self) -> &'static str {
        match self {
            PixelSource::BufferRead => "buffer",
            PixelSource::NeighborReuse { .. } => "neighbor",
            PixelSource::PrefetchRegister => "prefetch",
            PixelSource::ZeroPad => "zero",
        }
    }
}

/// One register receiving a value in a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneDelivery {
    pub lane: usize,
    /// Unpadded input coordinate (x, y) of the delivered pixel.
    pub coord: (i64, i64),
    pub source: PixelSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleEvent {
    pub cycle: u64,
    /// Kernel column/row of the MAC issued this cycle (or about to be, in the prologue).
    pub kernel_pos: (usize, usize),
    pub direction: Direction,
    pub prologue: bool,
    /// True on the first cycle of a kernel row other than row 0.
    pub inflection: bool,
    /// Indexed by register array; lists only lanes that received a value.
    pub per_array_sources: Vec<Vec<LaneDelivery>>,
}

/// Counters, and optionally the per-cycle events, of one or more passes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataflowTrace {
    pub events: Vec<CycleEvent>,
    /// Pixels fetched from the input buffers, including prefetch issues.
    pub buffer_read_count: u64,
    pub neighbor_reuse_count: u64,
    /// Deliveries served from the combination registers (a subset of buffer reads).
    pub prefetch_count: u64,
    pub zero_pad_count: u64,
    pub deliveries: u64,
    pub total_cycles: u64,
    pub prologue_cycles: u64,
    pub register_slots: usize,
    pub max_prefetch_occupancy: usize,
}

impl DataflowTrace {
    fn with_slots(cfg: &AcceleratorConfig) -> Self {
        Self {
            register_slots: register_slots(cfg),
            ..Default::default()
        }
    }

    /// Buffer reads that went straight into a register.
    pub fn direct_read_count(&self) -> u64 {
        self.buffer_read_count - self.prefetch_count
    }

    /// Every delivery is accounted for exactly once by its source.
    pub fn accounting_holds(&self) -> bool {
        self.direct_read_count()
            + self.neighbor_reuse_count
            + self.prefetch_count
            + self.zero_pad_count
            == self.deliveries
    }

    /// Sum counters of another trace into this one; events are not merged.
    pub fn absorb(&mut self, other: &DataflowTrace) {
        self.buffer_read_count += other.buffer_read_count;
        self.neighbor_reuse_count += other.neighbor_reuse_count;
        self.prefetch_count += other.prefetch_count;
        self.zero_pad_count += other.zero_pad_count;
        self.deliveries += other.deliveries;
        self.total_cycles += other.total_cycles;
        self.prologue_cycles += other.prologue_cycles;
        self.register_slots = self.register_slots.max(other.register_slots);
        self.max_prefetch_occupancy = self
            .max_prefetch_occupancy
            .max(other.max_prefetch_occupancy);
    }

    /// Write one `cycle,kx,ky,direction,array_index,source_tag,coord` line per delivery.
    pub fn write_records<W: Write>(&self, mut out: W) -> io::Result<()> {
        for ev in &self.events {
            for (array, lanes) in ev.per_array_sources.iter().enumerate() {
                for d in lanes {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{}:{}",
                        ev.cycle,
                        ev.kernel_pos.0,
                        ev.kernel_pos.1,
                        ev.direction.tag(),
                        array,
                        d.source.tag(),
                        d.coord.0,
                        d.coord.1
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Register slots of the engine: the array file plus one row of combination registers.
pub fn register_slots(cfg: &AcceleratorConfig) -> usize {
    cfg.pox * cfg.poy + cfg.pox
}

/// Cycles of register fill before the first MAC of a tile.
pub fn prologue_cycles(cfg: &AcceleratorConfig) -> u64 {
    cfg.pox.saturating_sub(1) as u64
}

/// Read-only view of one input channel; out-of-range reads are padding.
#[derive(Clone, Copy)]
struct Plane<'a> {
    data: Option<&'a [i8]>,
    height: usize,
    width: usize,
}

impl Plane<'_> {
    #[inline]
    fn get(&self, x: i64, y: i64) -> Option<i8> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        Some(match self.data {
            Some(d) => d[y as usize * self.width + x as usize],
            None => 0,
        })
    }
}

/// Unit-step traversal of one kernel phase for one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PassGeom {
    base_x: i64,
    base_y: i64,
    /// Input distance between neighbouring lanes/arrays, and between
    /// consecutive kernel columns/rows of the phase.
    step: i64,
    cols: usize,
    rows: usize,
    kx0: usize,
    ky0: usize,
}

impl PassGeom {
    #[inline]
    fn coord(&self, lane: usize, array: usize, a: usize, b: usize) -> (i64, i64) {
        (
            self.base_x + (lane + a) as i64 * self.step,
            self.base_y + (array + b) as i64 * self.step,
        )
    }

    fn kernel_pos(&self, a: usize, b: usize) -> (usize, usize) {
        (
            self.kx0 + a * self.step as usize,
            self.ky0 + b * self.step as usize,
        )
    }
}

/// Passes covering one sub-kernel of a tile whose first output is (ox0, oy0).
fn tile_passes(layer: &LayerSpec, ox0: usize, oy0: usize, sub: SubKernel) -> Vec<PassGeom> {
    let pad = layer.pad as i64;
    match layer.stride {
        1 => vec![PassGeom {
            base_x: (ox0 + sub.x_offset) as i64 - pad,
            base_y: oy0 as i64 - pad,
            step: 1,
            cols: sub.width,
            rows: layer.nky,
            kx0: sub.x_offset,
            ky0: 0,
        }],
        _ => {
            let mut passes = Vec::with_capacity(4);
            for py in 0..2usize {
                for px in 0..2usize {
                    let cols = sub.width.saturating_sub(px).div_ceil(2);
                    let rows = layer.nky.saturating_sub(py).div_ceil(2);
                    if cols == 0 || rows == 0 {
                        continue;
                    }
                    passes.push(PassGeom {
                        base_x: (2 * ox0 + sub.x_offset + px) as i64 - pad,
                        base_y: (2 * oy0 + py) as i64 - pad,
                        step: 2,
                        cols,
                        rows,
                        kx0: sub.x_offset + px,
                        ky0: py,
                    });
                }
            }
            passes
        }
    }
}

enum Step {
    Fill,
    Horizontal(Direction),
    Vertical,
}

struct Registers {
    pox: usize,
    poy: usize,
    vals: Vec<i8>,
    coords: Vec<(i64, i64)>,
    next_vals: Vec<i8>,
    next_coords: Vec<(i64, i64)>,
}

impl Registers {
    fn new(cfg: &AcceleratorConfig) -> Self {
        let n = cfg.pox * cfg.poy;
        Self {
            pox: cfg.pox,
            poy: cfg.poy,
            vals: vec![0; n],
            coords: vec![(i64::MIN, i64::MIN); n],
            next_vals: vec![0; n],
            next_coords: vec![(i64::MIN, i64::MIN); n],
        }
    }
}

struct PassOptions {
    prologue: bool,
    record: bool,
    cycle0: u64,
}

/// Run one pass, calling `on_mac(kx, ky, registers)` once per kernel position.
/// Returns the cycles used, prologue included.
fn run_pass<F>(
    geom: &PassGeom,
    plane: Plane<'_>,
    regs: &mut Registers,
    opts: &PassOptions,
    trace: &mut DataflowTrace,
    mut on_mac: F,
) -> u64
where
    F: FnMut(usize, usize, &[i8]),
{
    let (pox, poy) = (regs.pox, regs.poy);
    let mut cycle = opts.cycle0;

    let fresh = |coord: (i64, i64), trace: &mut DataflowTrace| -> (i8, PixelSource) {
        trace.deliveries += 1;
        match plane.get(coord.0, coord.1) {
            Some(v) => {
                trace.buffer_read_count += 1;
                (v, PixelSource::BufferRead)
            }
            None => {
                trace.zero_pad_count += 1;
                (0, PixelSource::ZeroPad)
            }
        }
    };

    let mut first = true;
    for b in 0..geom.rows {
        let direction = if b % 2 == 0 {
            Direction::LeftToRight
        } else {
            Direction::RightToLeft
        };
        for idx in 0..geom.cols {
            let a = match direction {
                Direction::LeftToRight => idx,
                Direction::RightToLeft => geom.cols - 1 - idx,
            };
            let step = if first {
                Step::Fill
            } else if idx == 0 {
                Step::Vertical
            } else {
                Step::Horizontal(direction)
            };
            let mut sources: Vec<Vec<LaneDelivery>> = if opts.record {
                vec![Vec::new(); poy]
            } else {
                Vec::new()
            };

            match step {
                Step::Fill => {
                    // Lanes are shifted in one per cycle; the last arrives with the first MAC.
                    let shifted_in = if opts.prologue { pox - 1 } else { 0 };
                    for t in 0..shifted_in {
                        let mut pro: Vec<Vec<LaneDelivery>> = if opts.record {
                            vec![Vec::new(); poy]
                        } else {
                            Vec::new()
                        };
                        for j in 0..poy {
                            let coord = geom.coord(t, j, a, b);
                            let (v, source) = fresh(coord, trace);
                            regs.vals[j * pox + t] = v;
                            regs.coords[j * pox + t] = coord;
                            if opts.record {
                                pro[j].push(LaneDelivery {
                                    lane: t,
                                    coord,
                                    source,
                                });
                            }
                        }
                        if opts.record {
                            trace.events.push(CycleEvent {
                                cycle,
                                kernel_pos: geom.kernel_pos(a, b),
                                direction,
                                prologue: true,
                                inflection: false,
                                per_array_sources: pro,
                            });
                        }
                        cycle += 1;
                        trace.prologue_cycles += 1;
                    }
                    for j in 0..poy {
                        for i in shifted_in..pox {
                            let coord = geom.coord(i, j, a, b);
                            let (v, source) = fresh(coord, trace);
                            regs.vals[j * pox + i] = v;
                            regs.coords[j * pox + i] = coord;
                            if opts.record {
                                sources[j].push(LaneDelivery {
                                    lane: i,
                                    coord,
                                    source,
                                });
                            }
                        }
                    }
                }
                Step::Horizontal(dir) => {
                    for j in 0..poy {
                        for i in 0..pox {
                            let coord = geom.coord(i, j, a, b);
                            let from = match dir {
                                Direction::LeftToRight => (i + 1 < pox).then_some(i + 1),
                                Direction::RightToLeft => i.checked_sub(1),
                            };
                            let dst = j * pox + i;
                            let source = match from {
                                Some(src) if regs.coords[j * pox + src] == coord => {
                                    trace.deliveries += 1;
                                    trace.neighbor_reuse_count += 1;
                                    regs.next_vals[dst] = regs.vals[j * pox + src];
                                    PixelSource::NeighborReuse {
                                        from_array: j,
                                        from_lane: src,
                                    }
                                }
                                _ => {
                                    debug_assert!(
                                        from.is_none(),
                                        "shift source holds the wrong pixel"
                                    );
                                    let (v, s) = fresh(coord, trace);
                                    regs.next_vals[dst] = v;
                                    s
                                }
                            };
                            regs.next_coords[dst] = coord;
                            if opts.record {
                                sources[j].push(LaneDelivery {
                                    lane: i,
                                    coord,
                                    source,
                                });
                            }
                        }
                    }
                    std::mem::swap(&mut regs.vals, &mut regs.next_vals);
                    std::mem::swap(&mut regs.coords, &mut regs.next_coords);
                }
                Step::Vertical => {
                    let mut prefetched = 0;
                    for j in 0..poy {
                        for i in 0..pox {
                            let coord = geom.coord(i, j, a, b);
                            let dst = j * pox + i;
                            let source = if j + 1 < poy && regs.coords[(j + 1) * pox + i] == coord {
                                trace.deliveries += 1;
                                trace.neighbor_reuse_count += 1;
                                regs.next_vals[dst] = regs.vals[(j + 1) * pox + i];
                                PixelSource::NeighborReuse {
                                    from_array: j + 1,
                                    from_lane: i,
                                }
                            } else {
                                debug_assert!(
                                    j + 1 == poy,
                                    "vertical source holds the wrong pixel"
                                );
                                trace.deliveries += 1;
                                match plane.get(coord.0, coord.1) {
                                    Some(v) => {
                                        trace.buffer_read_count += 1;
                                        trace.prefetch_count += 1;
                                        prefetched += 1;
                                        regs.next_vals[dst] = v;
                                        PixelSource::PrefetchRegister
                                    }
                                    None => {
                                        trace.zero_pad_count += 1;
                                        regs.next_vals[dst] = 0;
                                        PixelSource::ZeroPad
                                    }
                                }
                            };
                            regs.next_coords[dst] = coord;
                            if opts.record {
                                sources[j].push(LaneDelivery {
                                    lane: i,
                                    coord,
                                    source,
                                });
                            }
                        }
                    }
                    trace.max_prefetch_occupancy = trace.max_prefetch_occupancy.max(prefetched);
                    std::mem::swap(&mut regs.vals, &mut regs.next_vals);
                    std::mem::swap(&mut regs.coords, &mut regs.next_coords);
                }
            }

            let (kx, ky) = geom.kernel_pos(a, b);
            on_mac(kx, ky, &regs.vals);
            if opts.record {
                trace.events.push(CycleEvent {
                    cycle,
                    kernel_pos: (kx, ky),
                    direction,
                    prologue: false,
                    inflection: matches!(step, Step::Vertical),
                    per_array_sources: sources,
                });
            }
            cycle += 1;
            first = false;
        }
    }
    let used = cycle - opts.cycle0;
    trace.total_cycles += used;
    used
}

fn check_sub_kernel(layer: &LayerSpec, cfg: &AcceleratorConfig, sub: SubKernel) -> Result<()> {
    if sub.width == 0 || sub.x_offset + sub.width > layer.nkx {
        return Err(SimError::Plan(format!(
            "sub-kernel ({}, {}) outside kernel width {}",
            sub.x_offset, sub.width, layer.nkx
        )));
    }
    if sub.width > 2 * cfg.pox {
        return Err(SimError::Plan(format!(
            "sub-kernel width {} exceeds 2*pox = {}; segment the kernel first",
            sub.width,
            2 * cfg.pox
        )));
    }
    Ok(())
}

/// Trace one tile, one input channel and one sub-kernel, recording every cycle.
pub fn plan_zflow(
    layer: &LayerSpec,
    cfg: &AcceleratorConfig,
    tile_origin: (usize, usize),
    sub: SubKernel,
) -> Result<DataflowTrace> {
    if layer.stride == 2 {
        return stride2_plan(layer, cfg, tile_origin, sub);
    }
    plan_passes(layer, cfg, tile_origin, sub)
}

/// Stride-2 variant of [`plan_zflow`]: the four parity phases run back to back,
/// each as a unit-step traversal over every other input column/row.
pub fn stride2_plan(
    layer: &LayerSpec,
    cfg: &AcceleratorConfig,
    tile_origin: (usize, usize),
    sub: SubKernel,
) -> Result<DataflowTrace> {
    if layer.stride != 2 {
        return Err(SimError::Plan(format!(
            "stride2_plan needs stride 2, got {}",
            layer.stride
        )));
    }
    plan_passes(layer, cfg, tile_origin, sub)
}

fn plan_passes(
    layer: &LayerSpec,
    cfg: &AcceleratorConfig,
    (ox0, oy0): (usize, usize),
    sub: SubKernel,
) -> Result<DataflowTrace> {
    layer.validate()?;
    cfg.validate()?;
    check_sub_kernel(layer, cfg, sub)?;
    let plane = Plane {
        data: None,
        height: layer.niy,
        width: layer.nix,
    };
    let mut regs = Registers::new(cfg);
    let mut trace = DataflowTrace::with_slots(cfg);
    let mut cycle = 0;
    for (p, geom) in tile_passes(layer, ox0, oy0, sub).iter().enumerate() {
        let opts = PassOptions {
            prologue: p == 0,
            record: true,
            cycle0: cycle,
        };
        cycle += run_pass(geom, plane, &mut regs, &opts, &mut trace, |_, _, _| {});
    }
    Ok(trace)
}

/// Widest receptive row a stride-2 tile touches: `2 * (pox - 1) + nkx`.
pub fn receptive_width(pox: usize, nkx: usize, stride: usize) -> usize {
    stride * (pox - 1) + nkx
}

/// Output-channel lanes that share one traversal schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
struct LaneGroup {
    outputs: std::ops::Range<usize>,
}

fn lane_groups(layer: &LayerSpec, cfg: &AcceleratorConfig) -> Vec<LaneGroup> {
    let mut groups = Vec::new();
    match layer.kind {
        LayerKind::Conv | LayerKind::Dwcv => {
            for start in (0..layer.nof).step_by(cfg.pof) {
                groups.push(LaneGroup {
                    outputs: start..(start + cfg.pof).min(layer.nof),
                });
            }
        }
        // Lanes of one step never straddle two groups.
        LayerKind::GroupConv => {
            let nofg = layer.nof_group();
            for g in 0..layer.group_num {
                for start in (0..nofg).step_by(cfg.pof) {
                    let lo = g * nofg + start;
                    groups.push(LaneGroup {
                        outputs: lo..(lo + cfg.pof).min((g + 1) * nofg),
                    });
                }
            }
        }
    }
    groups
}

/// Number of output-channel steps of the PE array for a layer.
pub fn lane_group_count(layer: &LayerSpec, cfg: &AcceleratorConfig) -> u64 {
    match layer.kind {
        LayerKind::Conv | LayerKind::Dwcv => layer.nof.div_ceil(cfg.pof) as u64,
        LayerKind::GroupConv => (layer.group_num * layer.nof_group().div_ceil(cfg.pof)) as u64,
    }
}

/// Closed-form cycle count of a layer (or of `out_rows` output rows of it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleModel {
    /// Cycles in which the PE array issues MACs (masked lanes included).
    pub mac_cycles: u64,
    pub prologue_cycles: u64,
}

impl CycleModel {
    pub fn total(&self) -> u64 {
        self.mac_cycles + self.prologue_cycles
    }
}

pub fn cycle_model(
    layer: &LayerSpec,
    cfg: &AcceleratorConfig,
    out_rows: Option<usize>,
) -> CycleModel {
    let rows = out_rows.unwrap_or(layer.noy);
    let tiles = (layer.nox.div_ceil(cfg.pox) * rows.div_ceil(cfg.poy)) as u64
        * lane_group_count(layer, cfg);
    let per_tile = (layer.reduction_channels() * layer.nkx * layer.nky) as u64;
    CycleModel {
        mac_cycles: tiles * per_tile,
        prologue_cycles: tiles * prologue_cycles(cfg),
    }
}

/// Functional result of running a layer through the engine.
#[derive(Debug, Clone)]
pub struct LayerRun {
    pub output: TensorI8,
    pub accumulators: PartialPlane,
    /// Per-segment partial sums before composition.
    pub partials: Vec<PartialPlane>,
    pub trace: DataflowTrace,
    /// Cycles counted while executing (prologue included).
    pub compute_cycles: u64,
}

pub fn execute_layer(
    layer: &LayerSpec,
    input: &TensorI8,
    weights: &Weights,
    cfg: &AcceleratorConfig,
) -> Result<LayerRun> {
    execute_layer_with(layer, input, weights, cfg, ExecPolicy::default())
}

struct TileResult {
    /// [segment][output channel][array * pox + lane]
    acc: Vec<Vec<i32>>,
    trace: DataflowTrace,
    cycles: u64,
}

pub fn execute_layer_with(
    layer: &LayerSpec,
    input: &TensorI8,
    weights: &Weights,
    cfg: &AcceleratorConfig,
    policy: ExecPolicy,
) -> Result<LayerRun> {
    layer.validate()?;
    cfg.validate()?;
    if input.dims() != layer.input_dims() || input.data.len() != layer.nif * layer.niy * layer.nix {
        return Err(SimError::Shape(format!(
            "input dims {:?} != layer input {:?}",
            input.dims(),
            layer.input_dims()
        )));
    }
    if !weights.matches(layer) {
        return Err(SimError::Shape(format!(
            "weights ({}, {}, {}, {}) do not match layer {:?}",
            weights.nof,
            weights.channels,
            weights.nky,
            weights.nkx,
            Weights::shape_for(layer)
        )));
    }
    let plan = kseg::segment_kernel(layer.nkx, layer.nky, cfg.pox, layer.stride)?;
    let groups = lane_groups(layer, cfg);
    let tiles_x = layer.nox.div_ceil(cfg.pox);
    let tiles_y = layer.noy.div_ceil(cfg.poy);
    let lanes = cfg.pox * cfg.poy;
    let plane_len = layer.niy * layer.nix;

    let run_tile = |tile: usize| -> TileResult {
        let (ox0, oy0) = ((tile % tiles_x) * cfg.pox, (tile / tiles_x) * cfg.poy);
        let mut acc = vec![vec![0i32; layer.nof * lanes]; plan.sub_kernels.len()];
        let mut trace = DataflowTrace::with_slots(cfg);
        let mut regs = Registers::new(cfg);
        let mut cycles = 0u64;
        let passes: Vec<Vec<PassGeom>> = plan
            .sub_kernels
            .iter()
            .map(|&s| tile_passes(layer, ox0, oy0, s))
            .collect();

        for group in &groups {
            // DWCV lanes each stream their own channel through a private register
            // file; CONV and GroupCONV lanes share one stream.
            let streams: Vec<std::ops::Range<usize>> = match layer.kind {
                LayerKind::Dwcv => group.outputs.clone().map(|f| f..f + 1).collect(),
                _ => vec![group.outputs.clone()],
            };
            let mut group_cycles = None;
            for outs in streams {
                let c_base = layer.input_channel_base(outs.start);
                let mut stream_cycles = 0u64;
                let mut first_pass = true;
                for c_local in 0..layer.reduction_channels() {
                    let c = c_base + c_local;
                    let plane = Plane {
                        data: Some(&input.data[c * plane_len..(c + 1) * plane_len]),
                        height: layer.niy,
                        width: layer.nix,
                    };
                    for (seg, seg_passes) in passes.iter().enumerate() {
                        let seg_acc = &mut acc[seg];
                        for geom in seg_passes {
                            let opts = PassOptions {
                                prologue: first_pass,
                                record: false,
                                cycle0: 0,
                            };
                            first_pass = false;
                            stream_cycles += run_pass(
                                geom,
                                plane,
                                &mut regs,
                                &opts,
                                &mut trace,
                                |kx, ky, vals| {
                                    for f in outs.clone() {
                                        let w = weights.at(f, c_local, ky, kx) as i32;
                                        if w == 0 {
                                            continue;
                                        }
                                        let dst = &mut seg_acc[f * lanes..(f + 1) * lanes];
                                        for (d, &v) in dst.iter_mut().zip(vals) {
                                            *d += w * v as i32;
                                        }
                                    }
                                },
                            );
                        }
                    }
                }
                // Parallel register files finish together.
                debug_assert!(group_cycles.is_none_or(|g| g == stream_cycles));
                group_cycles = Some(stream_cycles);
            }
            cycles += group_cycles.unwrap_or(0);
        }
        TileResult { acc, trace, cycles }
    };

    let results = par::map_indexed(policy, tiles_x * tiles_y, run_tile);

    let mut partials: Vec<PartialPlane> = plan
        .sub_kernels
        .iter()
        .map(|_| PartialPlane::zeros(layer.nof, layer.noy, layer.nox))
        .collect();
    let mut trace = DataflowTrace::with_slots(cfg);
    let mut compute_cycles = 0;
    for (tile, res) in results.iter().enumerate() {
        let (ox0, oy0) = ((tile % tiles_x) * cfg.pox, (tile / tiles_x) * cfg.poy);
        trace.absorb(&res.trace);
        compute_cycles += res.cycles;
        for (seg, seg_acc) in res.acc.iter().enumerate() {
            let part = &mut partials[seg];
            for f in 0..layer.nof {
                for j in 0..cfg.poy {
                    let oy = oy0 + j;
                    if oy >= layer.noy {
                        break;
                    }
                    for i in 0..cfg.pox {
                        let ox = ox0 + i;
                        if ox >= layer.nox {
                            break;
                        }
                        let idx = part.index(f, oy, ox);
                        part.data[idx] = seg_acc[f * lanes + j * cfg.pox + i];
                    }
                }
            }
        }
    }
    let accumulators = kseg::compose_partials(&partials)?;
    let mut output = TensorI8::zeros(layer.nof, layer.noy, layer.nox);
    for (o, &a) in output.data.iter_mut().zip(&accumulators.data) {
        *o = requantize(a, layer.requant_shift, layer.activation);
    }
    Ok(LayerRun {
        output,
        accumulators,
        partials,
        trace,
        compute_cycles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::LayerSpec;

    fn full(layer: &LayerSpec) -> SubKernel {
        SubKernel {
            x_offset: 0,
            width: layer.nkx,
        }
    }

    fn interior_layer(k_x: usize, k_y: usize, stride: usize) -> LayerSpec {
        let mut l = LayerSpec::conv(1, 1, 48, 48, 1, stride, 0).unwrap();
        l.nkx = k_x;
        l.nky = k_y;
        crate::netmodel::derive_output_dims(&l.to_def()).unwrap()
    }

    #[test]
    fn pointwise_has_no_reuse() {
        let cfg = AcceleratorConfig::default();
        let layer = interior_layer(1, 1, 1);
        let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
        assert_eq!(t.buffer_read_count, 64);
        assert_eq!(t.neighbor_reuse_count, 0);
        assert_eq!(t.total_cycles, 1 + prologue_cycles(&cfg));
    }

    #[test]
    fn one_row_kernel_shifts_two_of_three_columns() {
        let cfg = AcceleratorConfig::default();
        let layer = interior_layer(3, 1, 1);
        let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
        let compute: Vec<&CycleEvent> = t.events.iter().filter(|e| !e.prologue).collect();
        assert_eq!(compute.len(), 3);
        for ev in &compute[1..] {
            for lanes in &ev.per_array_sources {
                let reused = lanes
                    .iter()
                    .filter(|d| matches!(d.source, PixelSource::NeighborReuse { .. }))
                    .count();
                assert_eq!(reused, cfg.pox - 1);
                assert_eq!(
                    lanes
                        .iter()
                        .filter(|d| d.source == PixelSource::BufferRead)
                        .count(),
                    1
                );
            }
        }
        assert_eq!(t.buffer_read_count, 8 * (8 + 2));
    }

    #[test]
    fn serpentine_visits_every_position_once() {
        let cfg = AcceleratorConfig::default();
        for stride in [1, 2] {
            let layer = interior_layer(5, 4, stride);
            let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
            let mut seen: Vec<(usize, usize)> = t
                .events
                .iter()
                .filter(|e| !e.prologue)
                .map(|e| e.kernel_pos)
                .collect();
            assert_eq!(seen.len(), 20);
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 20);
        }
    }

    #[test]
    fn directions_alternate_by_row() {
        let cfg = AcceleratorConfig::default();
        let layer = interior_layer(3, 3, 1);
        let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
        for ev in t.events.iter().filter(|e| !e.prologue) {
            let expect = if ev.kernel_pos.1 % 2 == 0 {
                Direction::LeftToRight
            } else {
                Direction::RightToLeft
            };
            assert_eq!(ev.direction, expect);
        }
    }

    #[test]
    fn per_cycle_bound_and_prefetch_only_at_inflection() {
        let cfg = AcceleratorConfig::default();
        let layer = interior_layer(7, 6, 1);
        let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
        assert!(t.accounting_holds());
        for ev in &t.events {
            for (j, lanes) in ev.per_array_sources.iter().enumerate() {
                let reads = lanes
                    .iter()
                    .filter(|d| d.source == PixelSource::BufferRead)
                    .count();
                assert!(reads <= 1, "cycle {} array {j} reads {reads}", ev.cycle);
                let pre = lanes
                    .iter()
                    .filter(|d| d.source == PixelSource::PrefetchRegister)
                    .count();
                if pre > 0 {
                    assert!(ev.inflection && j == cfg.poy - 1);
                    assert!(pre <= cfg.pox);
                }
            }
        }
        assert!(t.max_prefetch_occupancy <= cfg.pox);
    }

    #[test]
    fn register_slots_do_not_depend_on_kernel() {
        let cfg = AcceleratorConfig::default();
        for k in [1, 3, 9, 16] {
            let layer = interior_layer(k, k, 1);
            let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
            assert_eq!(t.register_slots, 72);
        }
    }

    #[test]
    fn too_wide_sub_kernel_is_rejected() {
        let cfg = AcceleratorConfig::default();
        let layer = interior_layer(17, 1, 1);
        assert!(matches!(
            plan_zflow(&layer, &cfg, (0, 0), full(&layer)),
            Err(SimError::Plan(_))
        ));
    }

    #[test]
    fn stride2_pointwise_reads_footprint() {
        let cfg = AcceleratorConfig::default();
        let layer = interior_layer(1, 1, 2);
        let t = stride2_plan(&layer, &cfg, (0, 0), full(&layer)).unwrap();
        assert_eq!(t.buffer_read_count, 64);
        assert_eq!(t.neighbor_reuse_count, 0);
        assert_eq!(receptive_width(8, 3, 2), 17);
        assert!(stride2_plan(
            &interior_layer(3, 3, 1),
            &cfg,
            (0, 0),
            SubKernel {
                x_offset: 0,
                width: 3
            }
        )
        .is_err());
    }

    #[test]
    fn padded_positions_are_zero_pad_not_reads() {
        let cfg = AcceleratorConfig::default();
        let layer = LayerSpec::conv(1, 1, 8, 8, 3, 1, 1).unwrap();
        let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
        // Full footprint is 10x10; the 8x8 interior is real data.
        assert!(t.zero_pad_count > 0);
        for ev in &t.events {
            for lanes in &ev.per_array_sources {
                for d in lanes {
                    let inside = (0..8).contains(&d.coord.0) && (0..8).contains(&d.coord.1);
                    match d.source {
                        PixelSource::BufferRead | PixelSource::PrefetchRegister => assert!(inside),
                        PixelSource::ZeroPad => assert!(!inside),
                        PixelSource::NeighborReuse { .. } => {}
                    }
                }
            }
        }
    }

    #[test]
    fn cycle_formula_example() {
        let cfg = AcceleratorConfig::default();
        let layer = LayerSpec::conv(1, 16, 8, 8, 3, 1, 1).unwrap();
        let m = cycle_model(&layer, &cfg, None);
        assert_eq!(m.mac_cycles, 9);
        assert_eq!(m.total(), 9 + 7);
        let input = TensorI8::zeros(1, 8, 8);
        let run = execute_layer(&layer, &input, &Weights::zeros_for(&layer), &cfg).unwrap();
        assert_eq!(run.compute_cycles, m.total());
        assert!(run.output.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn trace_records_format() {
        let cfg = AcceleratorConfig::default();
        let layer = interior_layer(1, 1, 1);
        let t = plan_zflow(&layer, &cfg, (0, 0), full(&layer)).unwrap();
        let mut buf = Vec::new();
        t.write_records(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 64);
        assert_eq!(text.lines().next().unwrap(), "0,0,0,LTR,0,buffer,0:0");
    }
}
