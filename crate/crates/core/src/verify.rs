//! Seeded randomized equivalence checks between the engine and the oracle,
//! plus segmentation and schedule sanity checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::builtins;
use crate::error::Result;
use crate::kseg::{segment_kernel, SubKernel};
use crate::netmodel::{macs_of, AcceleratorConfig, Activation, LayerSpec, TensorI8, Weights};
use crate::par::{self, ExecPolicy};
use crate::perf::{oracle_conv, oracle_conv_acc};
use crate::sched::{check_conflicts, check_dependencies, schedule_network, StrategyPolicy};
use crate::zflow::{execute_layer_with, plan_zflow};

pub const DEFAULT_SEED: u64 = 0x5eed_2024;
pub const DEFAULT_CASES: usize = 500;
pub const KERNEL_SIZES: [usize; 10] = [1, 3, 5, 7, 9, 13, 17, 24, 31, 33];
const MAX_CASE_MACS: u64 = 4_000_000;

/// Random layer geometry: inputs at most 64x64x16.
pub fn random_layer(rng: &mut impl Rng) -> LayerSpec {
    let k = KERNEL_SIZES[rng.random_range(0..KERNEL_SIZES.len())];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let min_side = k.saturating_sub(2 * pad).max(1);
    let mut h = rng.random_range(min_side..=64);
    let mut w = rng.random_range(min_side..=64);
    let kind = rng.random_range(0..3);
    let (mut nif, mut nof, groups) = match kind {
        0 => (rng.random_range(1..=16), rng.random_range(1..=24), 1),
        1 => {
            let c = rng.random_range(1..=16);
            (c, c, c)
        }
        _ => {
            let g = [2, 4, 8][rng.random_range(0..3)];
            (
                g * rng.random_range(1..=16 / g),
                g * rng.random_range(1..=4),
                g,
            )
        }
    };
    let build = |nif: usize, nof: usize, h: usize, w: usize| -> LayerSpec {
        let l = match kind {
            0 => LayerSpec::conv(nif, nof, h, w, k, stride, pad),
            1 => LayerSpec::dwcv(nif, h, w, k, stride, pad),
            _ => LayerSpec::group_conv(nif, nof, h, w, k, stride, pad, groups),
        };
        l.expect("generated layer is valid")
    };
    let mut layer = build(nif, nof, h, w);
    while macs_of(&layer) > MAX_CASE_MACS {
        if h.max(w) > min_side.max(8) {
            h = (h * 3 / 4).max(min_side);
            w = (w * 3 / 4).max(min_side);
        } else if kind == 0 && nif > 1 {
            nif = nif.div_ceil(2);
            nof = nof.div_ceil(2);
        } else {
            break;
        }
        layer = build(nif, nof, h, w);
    }
    let act = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::None
    };
    layer
        .with_activation(act)
        .with_requant_shift(rng.random_range(0..=10))
}

pub fn random_operands(layer: &LayerSpec, rng: &mut impl Rng) -> (TensorI8, Weights) {
    let (c, h, w) = layer.input_dims();
    let input: Vec<i8> = (0..c * h * w).map(|_| rng.random()).collect();
    let (f, wc, ky, kx) = Weights::shape_for(layer);
    let weights: Vec<i8> = (0..f * wc * ky * kx).map(|_| rng.random()).collect();
    (
        TensorI8::from_vec(c, h, w, input).expect("dims match"),
        Weights::from_vec(layer, weights).expect("dims match"),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseResult {
    pub index: usize,
    pub layer: LayerSpec,
    pub case_seed: u64,
    /// First differing output element: (channel, y, x, engine, oracle).
    pub mismatch: Option<(usize, usize, usize, i32, i32)>,
}

/// Run one case: engine vs oracle on the accumulators and the int8 outputs.
pub fn run_case(
    index: usize,
    case_seed: u64,
    cfg: &AcceleratorConfig,
    inject_fault: bool,
) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let layer = random_layer(&mut rng);
    let (input, weights) = random_operands(&layer, &mut rng);
    let mut engine_weights = weights.clone();
    if inject_fault {
        engine_weights.data[0] = engine_weights.data[0].wrapping_add(1);
    }
    let run = execute_layer_with(&layer, &input, &engine_weights, cfg, ExecPolicy::Sequential)?;
    let acc = oracle_conv_acc(&layer, &input, &weights)?;
    let out = oracle_conv(&layer, &input, &weights)?;
    let mut mismatch = None;
    for (i, (&a, &b)) in run.accumulators.data.iter().zip(&acc.data).enumerate() {
        if a != b || run.output.data[i] != out.data[i] {
            let per = layer.noy * layer.nox;
            mismatch = Some((i / per, (i % per) / layer.nox, i % layer.nox, a, b));
            break;
        }
    }
    Ok(CaseResult {
        index,
        layer,
        case_seed,
        mismatch,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifySummary {
    pub oracle_cases: usize,
    pub oracle_matches: usize,
    pub first_failure: Option<String>,
    pub kseg_checks: usize,
    pub kseg_passed: usize,
    pub schedules_checked: usize,
    pub schedules_conflict_free: usize,
    pub schedules_dependency_sound: usize,
}

impl VerifySummary {
    pub fn all_passed(&self) -> bool {
        self.oracle_matches == self.oracle_cases
            && self.kseg_passed == self.kseg_checks
            && self.schedules_conflict_free == self.schedules_checked
            && self.schedules_dependency_sound == self.schedules_checked
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "oracle: {}/{} matches\nkseg: {}/{} partitions exact\nschedules: {}/{} conflict-free, {}/{} dependency-sound\n",
            self.oracle_matches,
            self.oracle_cases,
            self.kseg_passed,
            self.kseg_checks,
            self.schedules_conflict_free,
            self.schedules_checked,
            self.schedules_dependency_sound,
            self.schedules_checked,
        );
        if let Some(f) = &self.first_failure {
            s.push_str(&format!("first failure: {f}\n"));
        }
        s.push_str(if self.all_passed() {
            "result: PASS\n"
        } else {
            "result: FAIL\n"
        });
        s
    }
}

/// Per-case seeds drawn from one master stream, so results do not depend on
/// how cases are spread over threads.
pub fn case_seeds(seed: u64, cases: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases).map(|_| rng.random()).collect()
}

pub fn run_oracle_cases(
    seed: u64,
    cases: usize,
    cfg: &AcceleratorConfig,
    inject_fault: bool,
    policy: ExecPolicy,
) -> Result<Vec<CaseResult>> {
    let seeds = case_seeds(seed, cases);
    par::map_indexed(policy, cases, |i| run_case(i, seeds[i], cfg, inject_fault))
        .into_iter()
        .collect()
}

/// Segmented execution of a wide kernel against the oracle, and the segment
/// traversal lengths against the kernel area.
pub fn kseg_check(nkx: usize, stride: usize, seed: u64, cfg: &AcceleratorConfig) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (nkx as u64) << 8 ^ stride as u64);
    let nky = rng.random_range(1..=5);
    let mut layer = LayerSpec::conv(2, 3, 40, 48, 1, stride, 0)?;
    layer.nkx = nkx;
    layer.nky = nky;
    layer.pad = nkx / 2;
    let layer = crate::netmodel::derive_output_dims(&layer.to_def())?;
    let (input, weights) = random_operands(&layer, &mut rng);
    let run = execute_layer_with(&layer, &input, &weights, cfg, ExecPolicy::Sequential)?;
    let exact = run.accumulators == oracle_conv_acc(&layer, &input, &weights)?;
    let plan = segment_kernel(nkx, nky, cfg.pox, stride)?;
    let mut positions = 0;
    for &sub in &plan.sub_kernels {
        let t = plan_zflow(&layer, cfg, (0, 0), sub)?;
        positions += t.total_cycles - t.prologue_cycles;
    }
    let covered = plan
        .sub_kernels
        .iter()
        .map(|s: &SubKernel| s.width)
        .sum::<usize>()
        == nkx;
    Ok(exact && covered && positions == (nkx * nky) as u64 && plan.is_segmented())
}

pub fn run_verify(
    seed: u64,
    cases: usize,
    cfg: &AcceleratorConfig,
    inject_fault: bool,
) -> Result<VerifySummary> {
    let results = run_oracle_cases(seed, cases, cfg, inject_fault, ExecPolicy::Parallel)?;
    let mut summary = VerifySummary {
        oracle_cases: results.len(),
        ..Default::default()
    };
    for r in &results {
        match r.mismatch {
            None => summary.oracle_matches += 1,
            Some((f, y, x, got, want)) if summary.first_failure.is_none() => {
                summary.first_failure = Some(format!(
                    "case {} (case seed {:#x}): {} [act {:?}, shift {}] differs at (f={f}, y={y}, x={x}): engine acc {got}, oracle acc {want}",
                    r.index,
                    r.case_seed,
                    r.layer.describe(),
                    r.layer.activation,
                    r.layer.requant_shift
                ));
            }
            Some(_) => {}
        }
    }
    for nkx in [17, 24, 31, 33] {
        for stride in [1, 2] {
            summary.kseg_checks += 1;
            if kseg_check(nkx, stride, seed, cfg)? {
                summary.kseg_passed += 1;
            }
        }
    }
    for name in builtins::DEMO_NAMES {
        let net = builtins::load(name)?;
        for policy in [
            StrategyPolicy::AllBaseline,
            StrategyPolicy::FuseWherePossible,
        ] {
            let (s, _) = schedule_network(&net, cfg, policy)?;
            summary.schedules_checked += 1;
            if check_conflicts(&s).is_empty() {
                summary.schedules_conflict_free += 1;
            }
            if check_dependencies(&s).is_empty() {
                summary.schedules_dependency_sound += 1;
            }
        }
    }
    Ok(summary)
}
