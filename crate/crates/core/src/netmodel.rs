//! Layers, blocks, networks and accelerator configuration.
//!
//! Loop-dimension fields keep their conventional names: `n*` are convolution
//! loop extents (`nix`/`niy`/`nif` input width/height/channels, `nox`/`noy`/`nof`
//! output, `nkx`/`nky` kernel), `p*` are the unrolling factors of the MAC array.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "CONV")]
    Conv,
    #[serde(rename = "DWCV")]
    Dwcv,
    #[serde(rename = "GroupCONV")]
    GroupConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

/// On-disk form of a layer: the output extents are always derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDef {
    pub kind: LayerKind,
    pub nix: usize,
    pub niy: usize,
    pub nif: usize,
    pub nof: usize,
    pub nkx: usize,
    pub nky: usize,
    pub stride: usize,
    pub pad: usize,
    pub group_num: usize,
    pub activation: Activation,
    pub requant_shift: u32,
}

/// One convolution layer with derived output extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub nix: usize,
    pub niy: usize,
    pub nif: usize,
    pub nox: usize,
    pub noy: usize,
    pub nof: usize,
    pub nkx: usize,
    pub nky: usize,
    pub stride: usize,
    pub pad: usize,
    pub group_num: usize,
    pub activation: Activation,
    pub requant_shift: u32,
}

fn out_extent(n_in: usize, pad: usize, k: usize, stride: usize, axis: &str) -> Result<usize> {
    let padded = n_in + 2 * pad;
    if padded < k {
        return Err(SimError::Geometry(format!(
            "kernel {axis}={k} exceeds padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Fill in `nox`/`noy` from the input extents, kernel, stride and padding.
pub fn derive_output_dims(def: &LayerDef) -> Result<LayerSpec> {
    if def.stride == 0 {
        return Err(SimError::Geometry("stride must be positive".into()));
    }
    let nox = out_extent(def.nix, def.pad, def.nkx, def.stride, "x")?;
    let noy = out_extent(def.niy, def.pad, def.nky, def.stride, "y")?;
    Ok(LayerSpec {
        kind: def.kind,
        nix: def.nix,
        niy: def.niy,
        nif: def.nif,
        nox,
        noy,
        nof: def.nof,
        nkx: def.nkx,
        nky: def.nky,
        stride: def.stride,
        pad: def.pad,
        group_num: def.group_num,
        activation: def.activation,
        requant_shift: def.requant_shift,
    })
}

impl LayerSpec {
    /// Build and validate a layer from its on-disk description.
    pub fn from_def(def: &LayerDef) -> Result<Self> {
        let layer = derive_output_dims(def)?;
        layer.validate()?;
        Ok(layer)
    }

    pub fn to_def(&self) -> LayerDef {
        LayerDef {
            kind: self.kind,
            nix: self.nix,
            niy: self.niy,
            nif: self.nif,
            nof: self.nof,
            nkx: self.nkx,
            nky: self.nky,
            stride: self.stride,
            pad: self.pad,
            group_num: self.group_num,
            activation: self.activation,
            requant_shift: self.requant_shift,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        nif: usize,
        nof: usize,
        niy: usize,
        nix: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::from_def(&LayerDef {
            kind: LayerKind::Conv,
            nix,
            niy,
            nif,
            nof,
            nkx: k,
            nky: k,
            stride,
            pad,
            group_num: 1,
            activation: Activation::None,
            requant_shift: 0,
        })
    }

    pub fn dwcv(
        channels: usize,
        niy: usize,
        nix: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::from_def(&LayerDef {
            kind: LayerKind::Dwcv,
            nix,
            niy,
            nif: channels,
            nof: channels,
            nkx: k,
            nky: k,
            stride,
            pad,
            group_num: 1,
            activation: Activation::None,
            requant_shift: 0,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn group_conv(
        nif: usize,
        nof: usize,
        niy: usize,
        nix: usize,
        k: usize,
        stride: usize,
        pad: usize,
        group_num: usize,
    ) -> Result<Self> {
        Self::from_def(&LayerDef {
            kind: LayerKind::GroupConv,
            nix,
            niy,
            nif,
            nof,
            nkx: k,
            nky: k,
            stride,
            pad,
            group_num,
            activation: Activation::None,
            requant_shift: 0,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_requant_shift(mut self, shift: u32) -> Self {
        self.requant_shift = shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nix", self.nix),
            ("niy", self.niy),
            ("nif", self.nif),
            ("nof", self.nof),
            ("nkx", self.nkx),
            ("nky", self.nky),
            ("stride", self.stride),
            ("group_num", self.group_num),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SimError::Shape(format!("{name} must be positive")));
            }
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(SimError::Shape(format!(
                "stride {} not in {{1, 2}}",
                self.stride
            )));
        }
        if self.requant_shift > 31 {
            return Err(SimError::Shape("requant_shift must be <= 31".into()));
        }
        match self.kind {
            LayerKind::Conv if self.group_num != 1 => {
                Err(SimError::Shape("CONV layers use group_num = 1".into()))
            }
            LayerKind::Dwcv if self.nif != self.nof => Err(SimError::Shape(format!(
                "DWCV needs nif == nof, got {} and {}",
                self.nif, self.nof
            ))),
            LayerKind::Dwcv if self.group_num != 1 => {
                Err(SimError::Shape("DWCV layers use group_num = 1".into()))
            }
            LayerKind::GroupConv
                if !self.nif.is_multiple_of(self.group_num)
                    || !self.nof.is_multiple_of(self.group_num) =>
            {
                Err(SimError::Shape(format!(
                    "group_num {} must divide nif {} and nof {}",
                    self.group_num, self.nif, self.nof
                )))
            }
            _ => Ok(()),
        }
    }

    /// Number of independent channel groups (DWCV: one per channel).
    pub fn groups(&self) -> usize {
        match self.kind {
            LayerKind::Conv => 1,
            LayerKind::Dwcv => self.nof,
            LayerKind::GroupConv => self.group_num,
        }
    }

    pub fn nif_group(&self) -> usize {
        self.nif / self.groups()
    }

    pub fn nof_group(&self) -> usize {
        self.nof / self.groups()
    }

    /// Input channels each output channel reduces over.
    pub fn reduction_channels(&self) -> usize {
        self.nif_group()
    }

    /// First input channel read by output channel `f`.
    pub fn input_channel_base(&self, f: usize) -> usize {
        (f / self.nof_group()) * self.nif_group()
    }

    pub fn input_bytes(&self) -> u64 {
        (self.nix * self.niy * self.nif) as u64
    }

    pub fn output_bytes(&self) -> u64 {
        (self.nox * self.noy * self.nof) as u64
    }

    pub fn weight_bytes(&self) -> u64 {
        (self.nof * self.reduction_channels() * self.nkx * self.nky) as u64
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        (self.nif, self.niy, self.nix)
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        (self.nof, self.noy, self.nox)
    }

    pub fn describe(&self) -> String {
        let kind = match self.kind {
            LayerKind::Conv => "CONV",
            LayerKind::Dwcv => "DWCV",
            LayerKind::GroupConv => "GroupCONV",
        };
        format!(
            "{kind} {}x{} s{} p{} g{} {}x{}x{} -> {}x{}x{}",
            self.nkx,
            self.nky,
            self.stride,
            self.pad,
            self.group_num,
            self.nif,
            self.niy,
            self.nix,
            self.nof,
            self.noy,
            self.nox
        )
    }
}

/// Multiply-accumulate count of a layer. One MAC is two operations.
pub fn macs_of(layer: &LayerSpec) -> u64 {
    (layer.nkx * layer.nky) as u64
        * layer.reduction_channels() as u64
        * (layer.nox * layer.noy) as u64
        * layer.nof as u64
}

/// int32 accumulator -> arithmetic shift -> activation -> saturate to int8.
pub fn requantize(acc: i32, shift: u32, activation: Activation) -> i8 {
    let mut v = acc >> shift;
    if activation == Activation::Relu {
        v = v.max(0);
    }
    v.clamp(i8::MIN as i32, i8::MAX as i32) as i8
}

/// Unrolling, clock, buffers and DRAM model of the accelerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorConfig {
    pub pox: usize,
    pub poy: usize,
    pub pof: usize,
    pub freq_mhz: f64,
    /// Capacity of each member of the InputA/InputB pair.
    pub input_buf_bytes: u64,
    /// Capacity of each member of the OutputA/OutputB pair.
    pub output_buf_bytes: u64,
    pub weight_buf_bytes: u64,
    pub dram_bytes_per_cycle: f64,
    pub dram_fixed_latency_cycles: u64,
    pub dsp_count: u32,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        Self {
            pox: 8,
            poy: 8,
            pof: 16,
            freq_mhz: 200.0,
            input_buf_bytes: 256 * 1024,
            output_buf_bytes: 256 * 1024,
            weight_buf_bytes: 128 * 1024,
            dram_bytes_per_cycle: 16.0,
            dram_fixed_latency_cycles: 100,
            dsp_count: 522,
        }
    }
}

impl AcceleratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pox == 0 || self.poy == 0 || self.pof == 0 {
            return Err(SimError::Shape("unrolling factors must be positive".into()));
        }
        if self.freq_mhz.is_nan()
            || self.freq_mhz <= 0.0
            || self.dram_bytes_per_cycle.is_nan()
            || self.dram_bytes_per_cycle <= 0.0
        {
            return Err(SimError::Shape(
                "frequency and DRAM bandwidth must be positive".into(),
            ));
        }
        if self.input_buf_bytes == 0 || self.output_buf_bytes == 0 || self.weight_buf_bytes == 0 {
            return Err(SimError::Shape("buffer capacities must be positive".into()));
        }
        if self.dsp_count == 0 {
            return Err(SimError::Shape("dsp_count must be positive".into()));
        }
        Ok(())
    }

    /// MAC units in the PE array.
    pub fn mac_units(&self) -> u64 {
        (self.pox * self.poy * self.pof) as u64
    }

    /// Peak throughput in GOPS (two operations per MAC per cycle).
    pub fn peak_gops(&self) -> f64 {
        2.0 * self.mac_units() as f64 * self.freq_mhz / 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    BypassBranch,
    MultiBranch,
}

/// A chain of dependent layers or a set of parallel branches on one input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub layers: Vec<LayerSpec>,
    pub shortcut: bool,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, layers: Vec<LayerSpec>, shortcut: bool) -> Result<Self> {
        let block = Self {
            kind,
            layers,
            shortcut,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| SimError::Shape("block has no layers".into()))?;
        for l in &self.layers {
            l.validate()?;
        }
        match self.kind {
            BlockKind::BypassBranch => {
                for (i, pair) in self.layers.windows(2).enumerate() {
                    if pair[0].output_dims() != pair[1].input_dims() {
                        return Err(SimError::Shape(format!(
                            "layer {i} output {:?} does not feed layer {} input {:?}",
                            pair[0].output_dims(),
                            i + 1,
                            pair[1].input_dims()
                        )));
                    }
                }
                if self.shortcut && self.input_dims() != self.output_dims() {
                    return Err(SimError::Shape(
                        "shortcut needs matching block input and output dims".into(),
                    ));
                }
            }
            BlockKind::MultiBranch => {
                if self.shortcut {
                    return Err(SimError::Shape(
                        "shortcut is only defined for bypass blocks".into(),
                    ));
                }
                for l in &self.layers[1..] {
                    if l.input_dims() != first.input_dims()
                        || (l.nox, l.noy) != (first.nox, first.noy)
                    {
                        return Err(SimError::Shape(
                            "branches must share input dims and output extents".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.layers[0].input_dims()
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        match self.kind {
            BlockKind::BypassBranch => self.layers[self.layers.len() - 1].output_dims(),
            BlockKind::MultiBranch => {
                let l = &self.layers[0];
                (self.layers.iter().map(|b| b.nof).sum(), l.noy, l.nox)
            }
        }
    }
}

/// Inverted-bottleneck block: 1x1 expand, kxk depthwise, 1x1 project.
pub fn build_mbconv(
    c_in: usize,
    expansion: usize,
    dwcv_k: usize,
    stride: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Result<BlockSpec> {
    if [c_in, expansion, dwcv_k, stride, c_out, h, w].contains(&0) {
        return Err(SimError::Shape("MBconv parameters must be positive".into()));
    }
    if dwcv_k.is_multiple_of(2) {
        return Err(SimError::Shape(format!(
            "MBconv depthwise kernel {dwcv_k} must be odd"
        )));
    }
    let hidden = c_in * expansion;
    let expand = LayerSpec::conv(c_in, hidden, h, w, 1, 1, 0)?.with_activation(Activation::Relu);
    let dw = LayerSpec::dwcv(hidden, h, w, dwcv_k, stride, dwcv_k / 2)?
        .with_activation(Activation::Relu);
    let project = LayerSpec::conv(hidden, c_out, dw.noy, dw.nox, 1, 1, 0)?;
    BlockSpec::new(
        BlockKind::BypassBranch,
        vec![expand, dw, project],
        stride == 1 && c_in == c_out,
    )
}

/// Large-kernel depthwise block: 1x1, lk x lk depthwise (same padding), 1x1, with shortcut.
pub fn build_replk_block(c: usize, lk: usize, h: usize, w: usize) -> Result<BlockSpec> {
    if [c, lk, h, w].contains(&0) {
        return Err(SimError::Shape("RepLK parameters must be positive".into()));
    }
    if lk.is_multiple_of(2) {
        return Err(SimError::Shape(format!("RepLK kernel {lk} must be odd")));
    }
    let pre = LayerSpec::conv(c, c, h, w, 1, 1, 0)?.with_activation(Activation::Relu);
    let dw = LayerSpec::dwcv(c, h, w, lk, 1, lk / 2)?;
    let post = LayerSpec::conv(c, c, h, w, 1, 1, 0)?;
    BlockSpec::new(BlockKind::BypassBranch, vec![pre, dw, post], true)
}

/// Pyramid block: parallel group convolutions of different kernel sizes on one input.
pub fn build_pyconv_block(
    c_in: usize,
    h: usize,
    w: usize,
    branch_kernels: &[usize],
    branch_groups: &[usize],
    branch_nof: &[usize],
) -> Result<BlockSpec> {
    if branch_kernels.is_empty()
        || branch_kernels.len() != branch_groups.len()
        || branch_kernels.len() != branch_nof.len()
    {
        return Err(SimError::Shape(
            "branch lists must be non-empty and equally long".into(),
        ));
    }
    let mut layers = Vec::with_capacity(branch_kernels.len());
    for ((&k, &g), &nof) in branch_kernels.iter().zip(branch_groups).zip(branch_nof) {
        if g == 0 || !c_in.is_multiple_of(g) || nof % g != 0 {
            return Err(SimError::Shape(format!(
                "group count {g} must divide c_in {c_in} and branch nof {nof}"
            )));
        }
        if k % 2 == 0 {
            return Err(SimError::Shape(format!("branch kernel {k} must be odd")));
        }
        layers.push(LayerSpec::group_conv(c_in, nof, h, w, k, 1, k / 2, g)?);
    }
    BlockSpec::new(BlockKind::MultiBranch, layers, false)
}

/// Either a standalone layer or a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetItem {
    Layer(LayerSpec),
    Block(BlockSpec),
}

impl NetItem {
    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self {
            NetItem::Layer(l) => l.input_dims(),
            NetItem::Block(b) => b.input_dims(),
        }
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        match self {
            NetItem::Layer(l) => l.output_dims(),
            NetItem::Block(b) => b.output_dims(),
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        match self {
            NetItem::Layer(l) => std::slice::from_ref(l),
            NetItem::Block(b) => &b.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub items: Vec<NetItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    name: String,
    items: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlock {
    block_kind: BlockKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<LayerDef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    branches: Option<Vec<LayerDef>>,
    #[serde(default)]
    shortcut: bool,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, items: Vec<NetItem>) -> Result<Self> {
        let net = Self {
            name: name.into(),
            items,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(SimError::Shape("network has no items".into()));
        }
        for (i, pair) in self.items.windows(2).enumerate() {
            if pair[0].output_dims() != pair[1].input_dims() {
                return Err(SimError::Shape(format!(
                    "item {i} output {:?} does not feed item {} input {:?}",
                    pair[0].output_dims(),
                    i + 1,
                    pair[1].input_dims()
                )));
            }
        }
        Ok(())
    }

    /// Parse the strict network JSON schema. Unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawNetwork =
            serde_json::from_str(text).map_err(|e| SimError::Schema(e.to_string()))?;
        let mut items = Vec::with_capacity(raw.items.len());
        for (i, value) in raw.items.into_iter().enumerate() {
            let item = parse_item(value).map_err(|e| match e {
                SimError::Schema(msg) => SimError::Schema(format!("item {i}: {msg}")),
                other => other.at_item(i),
            })?;
            items.push(item);
        }
        Self::new(raw.name, items)
    }

    pub fn to_json(&self) -> String {
        let items: Vec<serde_json::Value> = self
            .items
            .iter()
            .map(|item| match item {
                NetItem::Layer(l) => serde_json::to_value(l.to_def()).expect("layer serializes"),
                NetItem::Block(b) => {
                    let defs: Vec<LayerDef> = b.layers.iter().map(LayerSpec::to_def).collect();
                    let raw = match b.kind {
                        BlockKind::BypassBranch => RawBlock {
                            block_kind: b.kind,
                            layers: Some(defs),
                            branches: None,
                            shortcut: b.shortcut,
                        },
                        BlockKind::MultiBranch => RawBlock {
                            block_kind: b.kind,
                            layers: None,
                            branches: Some(defs),
                            shortcut: b.shortcut,
                        },
                    };
                    serde_json::to_value(raw).expect("block serializes")
                }
            })
            .collect();
        let doc = serde_json::json!({ "name": self.name, "items": items });
        serde_json::to_string_pretty(&doc).expect("network serializes")
    }
}

fn parse_item(value: serde_json::Value) -> Result<NetItem> {
    let is_block = value.get("block_kind").is_some();
    if !is_block {
        let def: LayerDef =
            serde_json::from_value(value).map_err(|e| SimError::Schema(e.to_string()))?;
        return Ok(NetItem::Layer(LayerSpec::from_def(&def)?));
    }
    let raw: RawBlock =
        serde_json::from_value(value).map_err(|e| SimError::Schema(e.to_string()))?;
    let defs = match (raw.block_kind, raw.layers, raw.branches) {
        (BlockKind::BypassBranch, Some(l), None) => l,
        (BlockKind::MultiBranch, None, Some(b)) => b,
        (BlockKind::BypassBranch, _, _) => {
            return Err(SimError::Schema(
                "BypassBranch blocks list `layers` only".into(),
            ))
        }
        (BlockKind::MultiBranch, _, _) => {
            return Err(SimError::Schema(
                "MultiBranch blocks list `branches` only".into(),
            ))
        }
    };
    let layers = defs
        .iter()
        .map(LayerSpec::from_def)
        .collect::<Result<Vec<_>>>()?;
    Ok(NetItem::Block(BlockSpec::new(
        raw.block_kind,
        layers,
        raw.shortcut,
    )?))
}

/// Dense int8 feature map, channel-major (c, h, w).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorI8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i8>,
}

impl TensorI8 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(SimError::Shape(format!(
                "tensor data length {} != {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: i8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Per-output-channel kernels, laid out (nof, reduction channels, nky, nkx).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Weights {
    pub nof: usize,
    pub channels: usize,
    pub nky: usize,
    pub nkx: usize,
    pub data: Vec<i8>,
}

impl Weights {
    pub fn zeros_for(layer: &LayerSpec) -> Self {
        let (nof, channels, nky, nkx) = Self::shape_for(layer);
        Self {
            nof,
            channels,
            nky,
            nkx,
            data: vec![0; nof * channels * nky * nkx],
        }
    }

    pub fn shape_for(layer: &LayerSpec) -> (usize, usize, usize, usize) {
        (layer.nof, layer.reduction_channels(), layer.nky, layer.nkx)
    }

    pub fn from_vec(layer: &LayerSpec, data: Vec<i8>) -> Result<Self> {
        let mut w = Self::zeros_for(layer);
        if data.len() != w.data.len() {
            return Err(SimError::Shape(format!(
                "weight length {} != expected {}",
                data.len(),
                w.data.len()
            )));
        }
        w.data = data;
        Ok(w)
    }

    pub fn matches(&self, layer: &LayerSpec) -> bool {
        (self.nof, self.channels, self.nky, self.nkx) == Self::shape_for(layer)
            && self.data.len() == self.nof * self.channels * self.nky * self.nkx
    }

    #[inline]
    pub fn at(&self, f: usize, c: usize, ky: usize, kx: usize) -> i8 {
        self.data[((f * self.channels + c) * self.nky + ky) * self.nkx + kx]
    }

    #[inline]
    pub fn set(&mut self, f: usize, c: usize, ky: usize, kx: usize, v: i8) {
        self.data[((f * self.channels + c) * self.nky + ky) * self.nkx + kx] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn def(nix: usize, nkx: usize, pad: usize, stride: usize) -> LayerDef {
        LayerDef {
            kind: LayerKind::Conv,
            nix,
            niy: nix,
            nif: 1,
            nof: 1,
            nkx,
            nky: nkx,
            stride,
            pad,
            group_num: 1,
            activation: Activation::None,
            requant_shift: 0,
        }
    }

    #[test]
    fn output_dims_examples() {
        assert_eq!(derive_output_dims(&def(56, 3, 1, 1)).unwrap().nox, 56);
        assert_eq!(derive_output_dims(&def(224, 7, 3, 2)).unwrap().nox, 112);
        assert!(matches!(
            derive_output_dims(&def(5, 7, 0, 1)),
            Err(SimError::Geometry(_))
        ));
    }

    #[test]
    fn derive_is_idempotent() {
        let l = derive_output_dims(&def(31, 5, 2, 2)).unwrap();
        assert_eq!(derive_output_dims(&l.to_def()).unwrap(), l);
    }

    #[test]
    fn mbconv_examples() {
        let b = build_mbconv(24, 6, 3, 1, 24, 28, 28).unwrap();
        assert_eq!(b.layers.len(), 3);
        assert_eq!(b.layers[1].kind, LayerKind::Dwcv);
        assert_eq!((b.layers[1].nif, b.layers[1].nof), (144, 144));
        assert!(b.shortcut);
        assert!(!build_mbconv(24, 6, 3, 2, 40, 28, 28).unwrap().shortcut);
        let e1 = build_mbconv(16, 1, 3, 1, 16, 56, 56).unwrap();
        assert_eq!((e1.layers[0].nif, e1.layers[0].nof), (16, 16));
        assert!(build_mbconv(24, 6, 4, 1, 24, 28, 28).is_err());
    }

    #[test]
    fn replk_examples() {
        let b = build_replk_block(128, 31, 14, 14).unwrap();
        assert_eq!(
            (b.layers[1].nkx, b.layers[1].nky, b.layers[1].pad),
            (31, 31, 15)
        );
        assert!(b.shortcut);
        assert_eq!(build_replk_block(64, 3, 56, 56).unwrap().layers[1].nkx, 3);
        let b = build_replk_block(96, 13, 28, 28).unwrap();
        assert_eq!((b.layers[1].pad, b.layers[1].nox), (6, 28));
    }

    #[test]
    fn pyconv_examples() {
        let b = build_pyconv_block(64, 56, 56, &[9, 7, 5, 3], &[16, 8, 4, 1], &[16, 16, 16, 16])
            .unwrap();
        assert_eq!(b.layers.len(), 4);
        assert_eq!(b.layers[0].nof_group(), 1);
        assert_eq!(b.output_dims(), (64, 56, 56));
        let single = build_pyconv_block(64, 56, 56, &[3], &[1], &[64]).unwrap();
        assert_eq!(
            macs_of(&single.layers[0]),
            macs_of(&LayerSpec::conv(64, 64, 56, 56, 3, 1, 1).unwrap())
        );
        let b = build_pyconv_block(64, 56, 56, &[5, 3], &[4, 1], &[32, 32]).unwrap();
        assert_eq!(
            b.layers.iter().map(|l| l.nof_group()).collect::<Vec<_>>(),
            vec![8, 32]
        );
        assert!(matches!(
            build_pyconv_block(64, 56, 56, &[5, 3], &[3, 1], &[32, 32]),
            Err(SimError::Shape(_))
        ));
    }

    #[test]
    fn macs_examples() {
        let conv = LayerSpec::conv(16, 16, 8, 8, 3, 1, 1).unwrap();
        assert_eq!(macs_of(&conv), 147_456);
        let dw = LayerSpec::dwcv(16, 8, 8, 3, 1, 1).unwrap();
        assert_eq!(macs_of(&dw), 9_216);
        let g = LayerSpec::group_conv(16, 16, 8, 8, 3, 1, 1, 4).unwrap();
        assert_eq!(macs_of(&g), 36_864);
        let g1 = LayerSpec::group_conv(16, 16, 8, 8, 3, 1, 1, 1).unwrap();
        assert_eq!(macs_of(&g1), macs_of(&conv));
    }

    #[test]
    fn requantize_saturates() {
        assert_eq!(requantize(1000, 2, Activation::None), 127);
        assert_eq!(requantize(-1000, 0, Activation::None), -128);
        assert_eq!(requantize(-7, 1, Activation::None), -4);
        assert_eq!(requantize(-7, 1, Activation::Relu), 0);
    }

    #[test]
    fn json_rejects_unknown_key() {
        let text = r#"{"name":"x","items":[{"kind":"CONV","nix":8,"niy":8,"nif":1,"nof":1,
            "nkx":3,"nky":3,"stride":1,"pad":1,"group_num":1,"activation":"none",
            "requant_shift":0,"bogus":1}]}"#;
        let err = NetworkSpec::from_json(text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let net = NetworkSpec::new(
            "rt",
            vec![
                NetItem::Layer(LayerSpec::conv(3, 24, 28, 28, 3, 1, 1).unwrap()),
                NetItem::Block(build_mbconv(24, 6, 3, 1, 24, 28, 28).unwrap()),
            ],
        )
        .unwrap();
        assert_eq!(NetworkSpec::from_json(&net.to_json()).unwrap(), net);
    }

    #[test]
    fn default_config() {
        let cfg = AcceleratorConfig::default();
        assert_eq!((cfg.pox, cfg.poy, cfg.pof), (8, 8, 16));
        assert_eq!(cfg.freq_mhz, 200.0);
        assert!((cfg.peak_gops() - 409.6).abs() < 1e-9);
    }
}
