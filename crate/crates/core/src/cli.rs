//! Command-line frontend: `simulate`, `sweep-kernel`, `compare-fusion`, `verify`.
//!
//! Every command writes plain CSV ('.' decimals, LF endings, header always
//! present) to `--out` or stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::builtins;
use crate::error::SimError;
use crate::kseg::segment_kernel;
use crate::netmodel::{AcceleratorConfig, BlockKind, LayerSpec, NetItem, NetworkSpec};
use crate::perf::{self, PerfReport};
use crate::sched::{self, ExecutionSchedule, SchedOptions, StrategyPolicy};
use crate::verify;
use crate::zflow;

#[derive(Debug, Parser)]
#[command(
    name = "lksim",
    version,
    about = "Cycle-approximate CNN accelerator simulator for arbitrary kernel sizes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub hw: HwArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Schedule a network and report cycles, throughput, utilization and DRAM bytes.
    Simulate(SimulateArgs),
    /// Compare the engine against the split-kernel baseline over kernel sizes.
    SweepKernel(SweepArgs),
    /// Compare layer-by-layer and fused execution of every block.
    CompareFusion(CompareArgs),
    /// Run the randomized oracle equivalence and schedule checks.
    Verify(VerifyArgs),
}

/// Accelerator overrides, accepted by every command.
#[derive(Debug, Clone, Args)]
pub struct HwArgs {
    /// DRAM bandwidth in bytes per cycle.
    #[arg(long, global = true, value_name = "BYTES_PER_CYCLE")]
    pub bw: Option<f64>,
    /// Fixed DRAM latency per transfer.
    #[arg(long = "dram-latency", global = true, value_name = "CYCLES")]
    pub dram_latency: Option<u64>,
    /// Buffer capacities in bytes: input, output, weight.
    #[arg(long, global = true, value_name = "IN,OUT,WT")]
    pub bufs: Option<String>,
    #[arg(long, global = true)]
    pub pox: Option<usize>,
    #[arg(long, global = true)]
    pub poy: Option<usize>,
    #[arg(long, global = true)]
    pub pof: Option<usize>,
    /// Clock in MHz.
    #[arg(long, global = true, value_name = "MHZ")]
    pub freq: Option<f64>,
    /// DSP count used for DSP efficiency.
    #[arg(long, global = true)]
    pub dsp: Option<u32>,
}

impl HwArgs {
    pub fn config(&self) -> anyhow::Result<AcceleratorConfig> {
        let mut cfg = AcceleratorConfig::default();
        if let Some(b) = self.bw {
            cfg.dram_bytes_per_cycle = b;
        }
        if let Some(l) = self.dram_latency {
            cfg.dram_fixed_latency_cycles = l;
        }
        if let Some(spec) = &self.bufs {
            let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                bail!("--bufs expects IN,OUT,WT, got `{spec}`");
            }
            let parse = |s: &str| {
                s.parse::<u64>()
                    .with_context(|| format!("bad buffer size `{s}`"))
            };
            cfg.input_buf_bytes = parse(parts[0])?;
            cfg.output_buf_bytes = parse(parts[1])?;
            cfg.weight_buf_bytes = parse(parts[2])?;
        }
        if let Some(v) = self.pox {
            cfg.pox = v;
        }
        if let Some(v) = self.poy {
            cfg.poy = v;
        }
        if let Some(v) = self.pof {
            cfg.pof = v;
        }
        if let Some(v) = self.freq {
            cfg.freq_mhz = v;
        }
        if let Some(v) = self.dsp {
            cfg.dsp_count = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct NetworkSource {
    /// Network JSON file.
    #[arg(long, value_name = "PATH")]
    pub network: Option<PathBuf>,
    /// Builtin network name.
    #[arg(long, value_name = "NAME")]
    pub builtin: Option<String>,
}

impl NetworkSource {
    pub fn load(&self) -> anyhow::Result<NetworkSpec> {
        if let Some(path) = &self.network {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return NetworkSpec::from_json(&text)
                .map_err(|e| anyhow::Error::new(e).context(path.display().to_string()));
        }
        let name = self.builtin.as_deref().unwrap_or_default();
        Ok(builtins::load(name)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Baseline,
    Fused,
}

impl StrategyArg {
    fn policy(self) -> StrategyPolicy {
        match self {
            StrategyArg::Baseline => StrategyPolicy::AllBaseline,
            StrategyArg::Fused => StrategyPolicy::FuseWherePossible,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: NetworkSource,
    /// Strategy to run; both when omitted.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// CSV output; the summary JSON goes next to it with a `.json` extension.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Export the schedule(s) as JSON.
    #[arg(long = "schedule-json", value_name = "PATH")]
    pub schedule_json: Option<PathBuf>,
    /// Write the register-level trace of the first layer's first tile.
    #[arg(long = "dump-trace", value_name = "PATH")]
    pub dump_trace: Option<PathBuf>,
    /// Output rows per tile for fused bypass blocks.
    #[arg(long = "vf-rows", value_name = "ROWS")]
    pub vf_rows: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Kernel sizes: `a,b,c`, `a..b` or `a..b:step` (inclusive).
    #[arg(long, default_value = "3..31:2")]
    pub sizes: String,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub source: NetworkSource,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = verify::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = verify::DEFAULT_CASES)]
    pub cases: usize,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Corrupt one engine weight per case to exercise failure reporting.
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: bool,
}

/// Process exit code for an error raised by a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<SimError>().map(SimError::root) {
        Some(SimError::Schema(_)) => 2,
        Some(SimError::Capacity { .. }) => 3,
        _ => 1,
    }
}

/// Run a parsed command. Returns the exit code for completed commands.
pub fn run(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = cli.hw.config()?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::SweepKernel(a) => cmd_sweep_kernel(a, &cfg),
        Command::CompareFusion(a) => cmd_compare_fusion(a, &cfg),
        Command::Verify(a) => cmd_verify(a, &cfg),
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Fixed-precision float for diff-stable CSV.
fn f(v: f64) -> String {
    format!("{v:.6}")
}

pub const SIMULATE_HEADER: &str =
    "item,strategy,cycles,wall_time_us,gops,utilization,dram_bytes_in,dram_bytes_wt,dram_bytes_out";

pub fn simulate_csv(reports: &[PerfReport]) -> String {
    let mut s = String::from(SIMULATE_HEADER);
    s.push('\n');
    for r in reports {
        for it in &r.items {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                it.item,
                r.strategy,
                it.cycles,
                f(it.wall_time_us),
                f(it.gops),
                f(it.utilization),
                it.dram_bytes.input,
                it.dram_bytes.weights,
                it.dram_bytes.output
            );
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{},{},{},{},{}",
            r.strategy,
            r.total_cycles,
            f(r.wall_time_s * 1e6),
            f(r.gops),
            f(r.pe_utilization),
            r.dram_bytes.input,
            r.dram_bytes.weights,
            r.dram_bytes.output
        );
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    network: &'a str,
    config: &'a AcceleratorConfig,
    reports: &'a [PerfReport],
}

fn cmd_simulate(a: &SimulateArgs, cfg: &AcceleratorConfig) -> anyhow::Result<i32> {
    let net = a.source.load()?;
    let policies = match a.strategy {
        Some(s) => vec![s.policy()],
        None => vec![
            StrategyPolicy::AllBaseline,
            StrategyPolicy::FuseWherePossible,
        ],
    };
    let opts = SchedOptions {
        vf_rows_per_tile: a.vf_rows,
    };
    let mut reports = Vec::new();
    let mut schedules: Vec<ExecutionSchedule> = Vec::new();
    for p in policies {
        let (s, r) = sched::schedule_network_with(&net, cfg, p, opts)?;
        reports.push(r);
        schedules.push(s);
    }
    emit(a.out.as_deref(), &simulate_csv(&reports))?;
    if let Some(out) = &a.out {
        let summary = Summary {
            network: &net.name,
            config: cfg,
            reports: &reports,
        };
        let json = serde_json::to_string_pretty(&summary)? + "\n";
        fs::write(out.with_extension("json"), json)?;
    }
    if let Some(path) = &a.schedule_json {
        let json = serde_json::to_string_pretty(&schedules)? + "\n";
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.dump_trace {
        let layer = &net.items[0].layers()[0];
        let plan = segment_kernel(layer.nkx, layer.nky, cfg.pox, layer.stride)?;
        let trace = zflow::plan_zflow(layer, cfg, (0, 0), plan.sub_kernels[0])?;
        let mut buf = b"cycle,kx,ky,direction,array_index,source_tag,coord\n".to_vec();
        trace.write_records(&mut buf)?;
        fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

/// Parse `a,b,c`, `a..b` or `a..b:step` (ranges inclusive).
pub fn parse_sizes(spec: &str) -> anyhow::Result<Vec<usize>> {
    let spec = spec.trim();
    let sizes: Vec<usize> = if let Some((lo, rest)) = spec.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, s)) => (h, s.trim().parse::<usize>().context("bad step")?),
            None => (rest, 1),
        };
        let lo: usize = lo.trim().parse().context("bad range start")?;
        let hi: usize = hi.trim().parse().context("bad range end")?;
        if step == 0 || lo > hi {
            bail!("empty size range `{spec}`");
        }
        (lo..=hi).step_by(step).collect()
    } else {
        spec.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .with_context(|| format!("bad size `{s}`"))
            })
            .collect::<anyhow::Result<_>>()?
    };
    if sizes.is_empty() || sizes.contains(&0) {
        bail!("sizes must be non-empty and at least 1");
    }
    Ok(sizes)
}

pub const SWEEP_HEADER: &str =
    "k,zflow_gops_model,baseline_gops_model,zflow_arrangement_bits,baseline_line_buffer_bits,padded_fraction";

/// Layer used for kernel sweeps: 16 -> 16 channels, 56x56, stride 1, same padding.
pub fn sweep_layer(k: usize) -> crate::error::Result<LayerSpec> {
    LayerSpec::conv(16, 16, 56, 56, k, 1, k / 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub zflow_gops: f64,
    pub baseline_gops: f64,
    pub zflow_bits: u64,
    pub baseline_bits: u64,
    pub padded_fraction: f64,
}

pub fn sweep_rows(sizes: &[usize], cfg: &AcceleratorConfig) -> crate::error::Result<Vec<SweepRow>> {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .iter()
        .map(|&k| {
            let layer = sweep_layer(k)?;
            let split = perf::baseline_split_model(&layer, cfg, &perf::DEFAULT_SUB_SIZES);
            Ok(SweepRow {
                k,
                zflow_gops: perf::zflow_gops_model(&layer, cfg),
                baseline_gops: split.gops,
                zflow_bits: perf::zflow_arrangement_bits(cfg),
                baseline_bits: split.line_buffer_bits,
                padded_fraction: split.padded_fraction,
            })
        })
        .collect()
}

fn cmd_sweep_kernel(a: &SweepArgs, cfg: &AcceleratorConfig) -> anyhow::Result<i32> {
    let sizes = parse_sizes(&a.sizes)?;
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in sweep_rows(&sizes, cfg)? {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.k,
            f(r.zflow_gops),
            f(r.baseline_gops),
            r.zflow_bits,
            r.baseline_bits,
            f(r.padded_fraction)
        );
    }
    emit(a.out.as_deref(), &s)?;
    Ok(0)
}

pub const COMPARE_HEADER: &str = "item,block_kind,baseline_cycles,fused_cycles,baseline_transfer_cycles,fused_transfer_cycles,overall_savings_pct,transmission_savings_pct,note";

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRow {
    pub item: usize,
    pub block_kind: BlockKind,
    pub baseline_cycles: u64,
    pub fused_cycles: u64,
    pub baseline_transfer_cycles: u64,
    pub fused_transfer_cycles: u64,
    pub note: String,
}

impl FusionRow {
    pub fn overall_savings_pct(&self) -> f64 {
        savings(self.baseline_cycles, self.fused_cycles)
    }

    pub fn transmission_savings_pct(&self) -> f64 {
        savings(self.baseline_transfer_cycles, self.fused_transfer_cycles)
    }
}

fn savings(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    (before as f64 - after as f64) / before as f64 * 100.0
}

pub fn fusion_rows(
    net: &NetworkSpec,
    cfg: &AcceleratorConfig,
) -> crate::error::Result<Vec<FusionRow>> {
    let mut rows = Vec::new();
    let mut base = 0;
    for (i, item) in net.items.iter().enumerate() {
        let n = item.layers().len();
        if let NetItem::Block(b) = item {
            let opts = SchedOptions::default();
            let lbl = sched::schedule_item(item, i, base, cfg, StrategyPolicy::AllBaseline, opts)
                .map_err(|e| e.at_item(i))?;
            let fused =
                sched::schedule_item(item, i, base, cfg, StrategyPolicy::FuseWherePossible, opts)
                    .map_err(|e| e.at_item(i))?;
            let note = fused
                .units
                .iter()
                .map(|u| u.note.as_str())
                .find(|s| !s.is_empty())
                .unwrap_or("");
            rows.push(FusionRow {
                item: i,
                block_kind: b.kind,
                baseline_cycles: lbl.total_cycles,
                fused_cycles: fused.total_cycles,
                baseline_transfer_cycles: lbl.transfer_cycles(),
                fused_transfer_cycles: fused.transfer_cycles(),
                note: note.to_string(),
            });
        }
        base += n;
    }
    Ok(rows)
}

/// Quote a CSV field when needed.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_compare_fusion(a: &CompareArgs, cfg: &AcceleratorConfig) -> anyhow::Result<i32> {
    let net = a.source.load()?;
    let mut s = String::from(COMPARE_HEADER);
    s.push('\n');
    for r in fusion_rows(&net, cfg)? {
        let _ = writeln!(
            s,
            "{},{:?},{},{},{},{},{},{},{}",
            r.item,
            r.block_kind,
            r.baseline_cycles,
            r.fused_cycles,
            r.baseline_transfer_cycles,
            r.fused_transfer_cycles,
            f(r.overall_savings_pct()),
            f(r.transmission_savings_pct()),
            csv_field(&r.note)
        );
    }
    emit(a.out.as_deref(), &s)?;
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs, cfg: &AcceleratorConfig) -> anyhow::Result<i32> {
    let summary = verify::run_verify(a.seed, a.cases, cfg, a.inject_fault)?;
    let text = format!("seed: {}\n{}", a.seed, summary.render());
    emit(a.out.as_deref(), &text)?;
    Ok(if summary.all_passed() { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_specs() {
        assert_eq!(parse_sizes("3,5,7").unwrap(), vec![3, 5, 7]);
        assert_eq!(parse_sizes("3..7").unwrap(), vec![3, 4, 5, 6, 7]);
        assert_eq!(parse_sizes("3..31:2").unwrap().len(), 15);
        assert!(parse_sizes("0").is_err());
        assert!(parse_sizes("9..3").is_err());
    }

    #[test]
    fn exit_codes() {
        let schema = anyhow::Error::new(SimError::Schema("x".into()).at_item(2));
        assert_eq!(exit_code(&schema), 2);
        let cap = anyhow::Error::new(SimError::Capacity {
            layer: "l".into(),
            reason: "r".into(),
        });
        assert_eq!(exit_code(&cap), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn sweep_rows_are_sorted() {
        let rows = sweep_rows(&[7, 3, 7], &AcceleratorConfig::default()).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![3, 7]);
    }

    #[test]
    fn quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
