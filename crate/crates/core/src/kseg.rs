//! Kernel segmentation for kernels wider than twice the output-column unrolling.
//!
//! A wide kernel is cut along x into sub-kernels of `pox` columns plus one
//! remainder. Each sub-kernel is run through the Z-flow engine on its own and
//! the int32 partial planes are summed; nothing is zero padded.

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubKernel {
    /// First kernel column covered by this segment.
    pub x_offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KsegPlan {
    pub sub_kernels: Vec<SubKernel>,
    /// Vertical extent; never segmented.
    pub nky: usize,
}

impl KsegPlan {
    pub fn nkx(&self) -> usize {
        self.sub_kernels.iter().map(|s| s.width).sum()
    }

    pub fn is_segmented(&self) -> bool {
        self.sub_kernels.len() > 1
    }

    /// Kernel positions visited across all segments.
    pub fn kernel_positions(&self) -> usize {
        self.nkx() * self.nky
    }
}

/// Split an `nkx`-wide kernel so that every segment is at most `2 * pox` wide.
pub fn segment_kernel(nkx: usize, nky: usize, pox: usize, stride: usize) -> Result<KsegPlan> {
    if nkx == 0 || nky == 0 || pox == 0 {
        return Err(SimError::Plan(
            "kernel extents and pox must be positive".into(),
        ));
    }
    if !matches!(stride, 1 | 2) {
        return Err(SimError::Plan(format!("stride {stride} not in {{1, 2}}")));
    }
    let sub_kernels = if nkx <= 2 * pox {
        vec![SubKernel {
            x_offset: 0,
            width: nkx,
        }]
    } else {
        let mut segs = Vec::with_capacity(nkx.div_ceil(pox));
        let mut off = 0;
        while off < nkx {
            let width = pox.min(nkx - off);
            segs.push(SubKernel {
                x_offset: off,
                width,
            });
            off += width;
        }
        segs
    };
    Ok(KsegPlan { sub_kernels, nky })
}

/// Input-column base offset of a sub-kernel: output column `ox` reads input
/// column `ox * stride + x_offset + local_kx` (before padding is removed).
pub fn sub_input_offset(entry: SubKernel, _stride: usize) -> usize {
    entry.x_offset
}

/// First padded-input column a sub-kernel touches for output column `ox`.
pub fn first_read_column(entry: SubKernel, stride: usize, ox: usize) -> usize {
    ox * stride + sub_input_offset(entry, stride)
}

/// Dense int32 plane stack (channels, height, width) of partial sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialPlane {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl PartialPlane {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

/// Elementwise sum of one partial plane per sub-kernel.
pub fn compose_partials(partials: &[PartialPlane]) -> Result<PartialPlane> {
    let first = partials
        .first()
        .ok_or_else(|| SimError::Shape("no partial planes to compose".into()))?;
    let mut out = first.clone();
    for p in &partials[1..] {
        if p.dims() != out.dims() {
            return Err(SimError::Shape(format!(
                "partial dims {:?} != {:?}",
                p.dims(),
                out.dims()
            )));
        }
        for (o, v) in out.data.iter_mut().zip(&p.data) {
            *o = o.wrapping_add(*v);
        }
    }
    Ok(out)
}
