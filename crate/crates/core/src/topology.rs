//! Declarative network descriptions.
//!
//! A topology document lists each *unique* weighted layer once, in execution
//! order, together with pooling layers. Backward-residual (BackRes) groups
//! mark a contiguous run of layers that is executed `n` times with the same
//! weights, the block consuming its own output on every repetition. Skip
//! links add a source activation into a convolution output or concatenate a
//! pooled source map onto a fully-connected input.
//!
//! ```json
//! {
//!   "name": "VGG2x4",
//!   "input_shape": [3, 32, 64],
//!   "layers": [
//!     {"name": "Conv1", "kind": "conv", "params": {"in": 3, "out": 64, "k": 3, "stride": 1}, "neuron": "relu"},
//!     {"name": "Conv2", "kind": "conv", "params": {"in": 64, "out": 64, "k": 3, "stride": 1}, "neuron": "relu"},
//!     {"name": "Pool1", "kind": "pool", "params": {"p": 2, "stride": 2}},
//!     {"name": "FC1", "kind": "fc", "params": {"in": 2048, "out": 512}, "neuron": "relu"},
//!     {"name": "FC2", "kind": "fc", "params": {"in": 512, "out": 10}}
//!   ],
//!   "backres": [{"members": ["Conv2"], "n": 4}],
//!   "skips": [],
//!   "classifier": "softmax"
//! }
//! ```

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::kernels::window_out;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeuronKind {
    Relu,
    Lif,
    If,
    #[default]
    None,
}

impl NeuronKind {
    pub fn is_spiking(self) -> bool {
        matches!(self, NeuronKind::Lif | NeuronKind::If)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Pool {
        window: usize,
        stride: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        !matches!(self, LayerKind::Pool { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerKind::Fc { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerKind::Pool { .. } => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerKind::Fc { inputs, .. } => inputs,
            LayerKind::Pool { window, .. } => window * window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub neuron: NeuronKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackResGroup {
    pub members: Vec<String>,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Elementwise add into the destination convolution's output, the source
    /// occupying the leading channels.
    AddZeroPad,
    /// Pool the source through the pooling layers on the way to the
    /// destination and append it to the fully-connected input vector.
    ConcatToFc,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipLink {
    pub source: String,
    pub dest: String,
    pub mode: SkipMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Softmax,
    Stochmax,
}

pub const INPUT: &str = "Input";

/// Validated network description. Immutable once parsed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologySpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub backres_groups: Vec<BackResGroup>,
    pub skips: Vec<SkipLink>,
    pub classifier: ClassifierKind,
}

// ---- document form ---------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    #[serde(default)]
    name: String,
    input_shape: [usize; 3],
    layers: Vec<LayerDoc>,
    #[serde(default)]
    backres: Vec<BackResGroup>,
    #[serde(default)]
    skips: Vec<SkipLink>,
    #[serde(default)]
    classifier: ClassifierKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    name: String,
    kind: String,
    params: HashMap<String, usize>,
    #[serde(default)]
    neuron: NeuronKind,
}

fn param(doc: &LayerDoc, key: &str) -> Result<usize> {
    doc.params
        .get(key)
        .copied()
        .ok_or_else(|| config_err!("layer {}: missing parameter '{}'", doc.name, key))
}

fn check_params(doc: &LayerDoc, allowed: &[&str]) -> Result<()> {
    for k in doc.params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(config_err!("layer {}: unknown parameter '{}'", doc.name, k));
        }
    }
    Ok(())
}

impl LayerDoc {
    fn into_spec(self) -> Result<LayerSpec> {
        let kind = match self.kind.to_ascii_lowercase().as_str() {
            "conv" => {
                check_params(&self, &["in", "out", "k", "stride", "padding"])?;
                let kernel = param(&self, "k")?;
                LayerKind::Conv {
                    in_channels: param(&self, "in")?,
                    out_channels: param(&self, "out")?,
                    kernel,
                    stride: self.params.get("stride").copied().unwrap_or(1),
                    padding: self.params.get("padding").copied().unwrap_or((kernel.max(1) - 1) / 2),
                }
            }
            "pool" => {
                check_params(&self, &["p", "stride"])?;
                let window = param(&self, "p")?;
                LayerKind::Pool {
                    window,
                    stride: self.params.get("stride").copied().unwrap_or(window),
                }
            }
            "fc" => {
                check_params(&self, &["in", "out"])?;
                LayerKind::Fc {
                    inputs: param(&self, "in")?,
                    outputs: param(&self, "out")?,
                }
            }
            other => return Err(config_err!("layer {}: unknown layer kind '{}'", self.name, other)),
        };
        let zero = match kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0,
            LayerKind::Pool { window, stride } => window == 0 || stride == 0,
            LayerKind::Fc { inputs, outputs } => inputs == 0 || outputs == 0,
        };
        if zero {
            return Err(config_err!("layer {}: parameters must be positive", self.name));
        }
        Ok(LayerSpec {
            name: self.name,
            kind,
            neuron: self.neuron,
        })
    }
}

impl From<&LayerSpec> for LayerDoc {
    fn from(l: &LayerSpec) -> Self {
        let mut params = HashMap::new();
        let kind = match l.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                params.insert("in".into(), in_channels);
                params.insert("out".into(), out_channels);
                params.insert("k".into(), kernel);
                params.insert("stride".into(), stride);
                params.insert("padding".into(), padding);
                "conv"
            }
            LayerKind::Pool { window, stride } => {
                params.insert("p".into(), window);
                params.insert("stride".into(), stride);
                "pool"
            }
            LayerKind::Fc { inputs, outputs } => {
                params.insert("in".into(), inputs);
                params.insert("out".into(), outputs);
                "fc"
            }
        };
        LayerDoc {
            name: l.name.clone(),
            kind: kind.into(),
            params,
            neuron: l.neuron,
        }
    }
}

/// Parses and validates a topology document (JSON).
pub fn parse_topology(text: &str) -> Result<TopologySpec> {
    let doc: TopologyDoc = serde_json::from_str(text)?;
    let layers = doc
        .layers
        .into_iter()
        .map(LayerDoc::into_spec)
        .collect::<Result<Vec<_>>>()?;
    let spec = TopologySpec {
        name: doc.name,
        input_shape: doc.input_shape,
        layers,
        backres_groups: doc.backres,
        skips: doc.skips,
        classifier: doc.classifier,
    };
    spec.validate()?;
    Ok(spec)
}

// ---- execution plan --------------------------------------------------------

/// Where a skip link reads its value from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceRef {
    Input,
    Step(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedSkip {
    pub source: SourceRef,
    pub mode: SkipMode,
    /// Plan indices of the pooling steps applied to the source (concat only).
    pub pools: Vec<usize>,
    /// Shape of the source value before pooling.
    pub source_shape: Vec<usize>,
}

/// One layer invocation in the unrolled graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanStep {
    /// Index into `TopologySpec::layers`; shared weights share this index.
    pub layer: usize,
    /// 1-based repetition index inside a BackRes group (1 otherwise).
    pub unroll_index: usize,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub skips: Vec<ResolvedSkip>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub steps: Vec<PlanStep>,
}

impl ExecutionPlan {
    pub fn layer_sequence<'a>(&self, spec: &'a TopologySpec) -> Vec<&'a str> {
        self.steps.iter().map(|s| spec.layers[s.layer].name.as_str()).collect()
    }

    pub fn weighted_steps(&self, spec: &TopologySpec) -> usize {
        self.steps
            .iter()
            .filter(|s| spec.layers[s.layer].kind.is_weighted())
            .count()
    }
}

impl TopologySpec {
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// BackRes unroll count of a layer (1 when it is in no group).
    pub fn unroll_count(&self, layer: usize) -> usize {
        let name = &self.layers[layer].name;
        self.backres_groups
            .iter()
            .find(|g| g.members.iter().any(|m| m == name))
            .map_or(1, |g| g.n)
    }

    /// Unique weight elements; shared BackRes weights count once, no biases.
    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.kind.parameter_count()).sum()
    }

    /// Weighted layer applications in the fully unrolled graph.
    pub fn logical_depth(&self) -> usize {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_weighted())
            .map(|(i, _)| self.unroll_count(i))
            .sum()
    }

    /// Unique weighted layers.
    pub fn real_depth(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_weighted()).count()
    }

    pub fn with_unroll(&self, group: usize, n: usize) -> Result<TopologySpec> {
        let mut s = self.clone();
        let g = s
            .backres_groups
            .get_mut(group)
            .ok_or_else(|| config_err!("no BackRes group {}", group))?;
        g.n = n;
        s.validate()?;
        Ok(s)
    }

    fn group_ranges(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut ranges = Vec::new();
        for g in &self.backres_groups {
            if g.n == 0 {
                return Err(config_err!("BackRes group {:?}: n must be >= 1", g.members));
            }
            if g.members.is_empty() {
                return Err(config_err!("BackRes group with no members"));
            }
            let idx = g
                .members
                .iter()
                .map(|m| {
                    self.layer_index(m)
                        .ok_or_else(|| config_err!("BackRes group references undefined layer {}", m))
                })
                .collect::<Result<Vec<_>>>()?;
            for w in idx.windows(2) {
                if w[1] != w[0] + 1 {
                    return Err(config_err!(
                        "BackRes group members {:?} must be contiguous and in layer order",
                        g.members
                    ));
                }
            }
            ranges.push((idx[0], idx[idx.len() - 1] + 1, g.n));
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(config_err!("BackRes groups overlap"));
            }
        }
        Ok(ranges)
    }

    /// Layer invocation order with BackRes groups repeated in place.
    fn invocation_order(&self) -> Result<Vec<(usize, usize)>> {
        let ranges = self.group_ranges()?;
        let mut order = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            if let Some(&(_, end, n)) = ranges.iter().find(|r| r.0 == i) {
                for rep in 1..=n {
                    for l in i..end {
                        order.push((l, rep));
                    }
                }
                i = end;
            } else {
                order.push((i, 1));
                i += 1;
            }
        }
        Ok(order)
    }

    /// Unrolls BackRes groups into an ordered list of layer invocations and
    /// resolves every skip link against it. Also performs the full shape check.
    pub fn unroll(&self) -> Result<ExecutionPlan> {
        let order = self.invocation_order()?;
        let mut steps: Vec<PlanStep> = Vec::with_capacity(order.len());
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let input_shape = shape.clone();

        for &(layer, unroll_index) in &order {
            let spec = &self.layers[layer];
            let mut skips = Vec::new();
            for link in self.skips.iter().filter(|s| s.dest == spec.name) {
                let (source, source_shape, src_pos) = if link.source == INPUT {
                    (SourceRef::Input, input_shape.clone(), None)
                } else {
                    let src_layer = self
                        .layer_index(&link.source)
                        .ok_or_else(|| config_err!("skip references undefined layer {}", link.source))?;
                    let pos = steps.iter().rposition(|s| s.layer == src_layer).ok_or_else(|| {
                        config_err!("skip source {} does not precede destination {}", link.source, link.dest)
                    })?;
                    (SourceRef::Step(pos), steps[pos].output_shape.clone(), Some(pos))
                };
                let first = src_pos.map_or(0, |p| p + 1);
                let pools: Vec<usize> = (first..steps.len())
                    .filter(|&i| matches!(self.layers[steps[i].layer].kind, LayerKind::Pool { .. }))
                    .collect();
                skips.push(ResolvedSkip {
                    source,
                    mode: link.mode,
                    pools: if link.mode == SkipMode::ConcatToFc {
                        pools
                    } else {
                        Vec::new()
                    },
                    source_shape,
                });
            }

            let out = self.layer_output_shape(layer, &shape, &skips, &steps)?;
            steps.push(PlanStep {
                layer,
                unroll_index,
                input_shape: shape.clone(),
                output_shape: out.clone(),
                skips,
            });
            shape = out;
        }
        Ok(ExecutionPlan { steps })
    }

    fn layer_output_shape(
        &self,
        layer: usize,
        input: &[usize],
        skips: &[ResolvedSkip],
        steps: &[PlanStep],
    ) -> Result<Vec<usize>> {
        let spec = &self.layers[layer];
        let name = &spec.name;
        match spec.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = match input {
                    [c, h, w] => (*c, *h, *w),
                    _ => {
                        return Err(config_err!(
                            "layer {}: convolution needs a [C,H,W] input, got {:?}",
                            name,
                            input
                        ))
                    }
                };
                if c != in_channels {
                    return Err(config_err!(
                        "layer {}: expects {} input channels, receives {}",
                        name,
                        in_channels,
                        c
                    ));
                }
                let ho = window_out(h, kernel, stride, padding)
                    .ok_or_else(|| config_err!("layer {}: kernel {} does not fit {}x{}", name, kernel, h, w))?;
                let wo = window_out(w, kernel, stride, padding)
                    .ok_or_else(|| config_err!("layer {}: kernel {} does not fit {}x{}", name, kernel, h, w))?;
                let out = vec![out_channels, ho, wo];
                for s in skips {
                    match s.mode {
                        SkipMode::AddZeroPad => {
                            let ss = &s.source_shape;
                            if ss.len() != 3 || ss[1] != ho || ss[2] != wo || ss[0] > out_channels {
                                return Err(config_err!(
                                    "layer {}: add skip source shape {:?} incompatible with output {:?}",
                                    name,
                                    ss,
                                    out
                                ));
                            }
                        }
                        SkipMode::ConcatToFc => {
                            return Err(config_err!(
                                "layer {}: concat_to_fc skip must target a fully-connected layer",
                                name
                            ))
                        }
                    }
                }
                Ok(out)
            }
            LayerKind::Pool { window, stride } => {
                let (c, h, w) = match input {
                    [c, h, w] => (*c, *h, *w),
                    _ => {
                        return Err(config_err!(
                            "layer {}: pooling needs a [C,H,W] input, got {:?}",
                            name,
                            input
                        ))
                    }
                };
                if window > h || window > w {
                    return Err(config_err!(
                        "layer {}: window {} larger than input {}x{}",
                        name,
                        window,
                        h,
                        w
                    ));
                }
                if !skips.is_empty() {
                    return Err(config_err!("layer {}: pooling layers cannot receive skips", name));
                }
                Ok(vec![
                    c,
                    window_out(h, window, stride, 0).unwrap(),
                    window_out(w, window, stride, 0).unwrap(),
                ])
            }
            LayerKind::Fc { inputs, outputs } => {
                let mut total: usize = input.iter().product();
                for s in skips {
                    match s.mode {
                        SkipMode::ConcatToFc => {
                            let mut ss = s.source_shape.clone();
                            for &p in &s.pools {
                                let LayerKind::Pool { window, stride } = self.layers[steps[p].layer].kind else {
                                    return Err(Error::Internal("pool index is not a pool".into()));
                                };
                                if ss.len() != 3 || window > ss[1] || window > ss[2] {
                                    return Err(config_err!("layer {}: skip source {:?} cannot be pooled", name, ss));
                                }
                                ss = vec![
                                    ss[0],
                                    window_out(ss[1], window, stride, 0).unwrap(),
                                    window_out(ss[2], window, stride, 0).unwrap(),
                                ];
                            }
                            total += ss.iter().product::<usize>();
                        }
                        SkipMode::AddZeroPad => {
                            return Err(config_err!(
                                "layer {}: add_zero_pad skip must target a convolution",
                                name
                            ))
                        }
                    }
                }
                if total != inputs {
                    return Err(config_err!(
                        "layer {}: declares {} inputs but receives {}",
                        name,
                        inputs,
                        total
                    ));
                }
                Ok(vec![outputs])
            }
        }
    }

    /// Structural checks plus the full unrolled shape check.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(config_err!("input_shape must be positive, got {:?}", self.input_shape));
        }
        if self.layers.is_empty() {
            return Err(config_err!("topology has no layers"));
        }
        let mut seen = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.name == INPUT {
                return Err(config_err!("layer name '{}' is reserved", INPUT));
            }
            if seen.insert(l.name.as_str(), i).is_some() {
                return Err(config_err!("duplicate layer name {}", l.name));
            }
            if !l.kind.is_weighted() && l.neuron != NeuronKind::None {
                return Err(config_err!("layer {}: pooling layers carry no neuron", l.name));
            }
        }
        for s in &self.skips {
            if s.source != INPUT && self.layer_index(&s.source).is_none() {
                return Err(config_err!("skip references undefined layer {}", s.source));
            }
            let dest = self
                .layer_index(&s.dest)
                .ok_or_else(|| config_err!("skip references undefined layer {}", s.dest))?;
            if s.mode == SkipMode::ConcatToFc && !matches!(self.layers[dest].kind, LayerKind::Fc { .. }) {
                return Err(config_err!(
                    "skip into {}: concat_to_fc needs a fully-connected destination",
                    s.dest
                ));
            }
        }
        for g in &self.backres_groups {
            for m in &g.members {
                let i = self
                    .layer_index(m)
                    .ok_or_else(|| config_err!("BackRes group references undefined layer {}", m))?;
                if !self.layers[i].kind.is_weighted() {
                    return Err(config_err!("BackRes member {} must be a weighted layer", m));
                }
            }
        }
        let last = self.layers.last().unwrap();
        if !matches!(last.kind, LayerKind::Fc { .. }) || last.neuron != NeuronKind::None {
            return Err(config_err!(
                "last layer {} must be a fully-connected classifier layer without neuron",
                last.name
            ));
        }

        let plan = self.unroll()?;
        // each group must map its own output shape back onto its input shape
        for g in &self.backres_groups {
            let first = self.layer_index(&g.members[0]).unwrap();
            let last = self.layer_index(g.members.last().unwrap()).unwrap();
            let step_in = plan.steps.iter().find(|s| s.layer == first).unwrap();
            let step_out = plan.steps.iter().find(|s| s.layer == last).unwrap();
            if step_in.input_shape != step_out.output_shape {
                return Err(config_err!(
                    "BackRes group {:?}: output shape {:?} differs from input shape {:?}",
                    g.members,
                    step_out.output_shape,
                    step_in.input_shape
                ));
            }
        }
        Ok(())
    }

    /// JSON document in the topology file schema.
    pub fn to_document(&self) -> String {
        let doc = TopologyDoc {
            name: self.name.clone(),
            input_shape: self.input_shape,
            layers: self.layers.iter().map(LayerDoc::from).collect(),
            backres: self.backres_groups.clone(),
            skips: self.skips.clone(),
            classifier: self.classifier,
        };
        to_canonical_json(&doc)
    }

    /// SHA-256 over the canonical document; independent of key order and
    /// whitespace in the source file.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_document().as_bytes()))
    }
}

fn to_canonical_json<T: Serialize>(v: &T) -> String {
    // serde_json::Value sorts object keys (BTreeMap), which canonicalises HashMap params
    let value = serde_json::to_value(v).expect("topology serializes");
    serde_json::to_string_pretty(&value).expect("value serializes")
}

/// Bundled topologies from the reference tables.
pub mod fixtures {
    use super::{parse_topology, TopologySpec};

    pub const CONVERSION_VGG7: &str = include_str!("../topologies/conversion_vgg7.json");
    pub const CONVERSION_VGG2X4: &str = include_str!("../topologies/conversion_vgg2x4.json");
    pub const CONVERSION_VGG3X2: &str = include_str!("../topologies/conversion_vgg3x2.json");
    pub const STDP_RESNET2: &str = include_str!("../topologies/stdp_resnet2.json");
    pub const STDP_RESNET3: &str = include_str!("../topologies/stdp_resnet3.json");
    pub const STDP_RESNET2X2: &str = include_str!("../topologies/stdp_resnet2x2.json");
    pub const AGD_VGG5: &str = include_str!("../topologies/agd_vgg5.json");
    pub const AGD_VGG3X2: &str = include_str!("../topologies/agd_vgg3x2.json");
    pub const AGD_VGG7: &str = include_str!("../topologies/agd_vgg7.json");
    pub const AGD_VGG3X4: &str = include_str!("../topologies/agd_vgg3x4.json");
    pub const CONVNN_RESNET2: &str = include_str!("../topologies/convnn_resnet2.json");
    pub const CONVNN_RESNET3: &str = include_str!("../topologies/convnn_resnet3.json");
    pub const HYBRID_VGG9: &str = include_str!("../topologies/hybrid_vgg9.json");
    pub const HYBRID_VGG8X2: &str = include_str!("../topologies/hybrid_vgg8x2.json");

    pub const ALL: &[(&str, &str)] = &[
        ("conversion_vgg7", CONVERSION_VGG7),
        ("conversion_vgg2x4", CONVERSION_VGG2X4),
        ("conversion_vgg3x2", CONVERSION_VGG3X2),
        ("stdp_resnet2", STDP_RESNET2),
        ("stdp_resnet3", STDP_RESNET3),
        ("stdp_resnet2x2", STDP_RESNET2X2),
        ("agd_vgg5", AGD_VGG5),
        ("agd_vgg3x2", AGD_VGG3X2),
        ("agd_vgg7", AGD_VGG7),
        ("agd_vgg3x4", AGD_VGG3X4),
        ("convnn_resnet2", CONVNN_RESNET2),
        ("convnn_resnet3", CONVNN_RESNET3),
        ("hybrid_vgg9", HYBRID_VGG9),
        ("hybrid_vgg8x2", HYBRID_VGG8X2),
    ];

    pub fn load(name: &str) -> Option<TopologySpec> {
        ALL.iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| parse_topology(text).expect("bundled topology is valid"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(backres_n: usize) -> String {
        format!(
            r#"{{
            "name": "tiny",
            "input_shape": [1, 4, 4],
            "layers": [
                {{"name": "Conv1", "kind": "conv", "params": {{"in": 1, "out": 2, "k": 3}}, "neuron": "lif"}},
                {{"name": "Conv2", "kind": "conv", "params": {{"in": 2, "out": 2, "k": 3}}, "neuron": "lif"}},
                {{"name": "Pool1", "kind": "pool", "params": {{"p": 2}}}},
                {{"name": "FC1", "kind": "fc", "params": {{"in": 8, "out": 3}}}}
            ],
            "backres": [{{"members": ["Conv2"], "n": {backres_n}}}]
        }}"#
        )
    }

    #[test]
    fn unroll_count_one_is_identity() {
        let s = parse_topology(&tiny(1)).unwrap();
        let plan = s.unroll().unwrap();
        assert_eq!(plan.layer_sequence(&s), ["Conv1", "Conv2", "Pool1", "FC1"]);
        assert!(plan.steps.iter().all(|st| st.unroll_index == 1));
    }

    #[test]
    fn unroll_repeats_members() {
        let s = parse_topology(&tiny(3)).unwrap();
        let plan = s.unroll().unwrap();
        assert_eq!(
            plan.layer_sequence(&s),
            ["Conv1", "Conv2", "Conv2", "Conv2", "Pool1", "FC1"]
        );
        let idx: Vec<_> = plan.steps.iter().map(|st| st.unroll_index).collect();
        assert_eq!(idx, [1, 1, 2, 3, 1, 1]);
        assert_eq!(s.logical_depth(), 5);
        assert_eq!(s.real_depth(), 3);
    }

    #[test]
    fn parameter_count_ignores_unroll() {
        let a = parse_topology(&tiny(1)).unwrap();
        let b = parse_topology(&tiny(4)).unwrap();
        assert_eq!(a.count_parameters(), b.count_parameters());
        assert_eq!(a.count_parameters(), 9 * 2 + 9 * 4 + 8 * 3);
    }

    #[test]
    fn rejects_unknown_kind() {
        let t = tiny(1).replace("\"pool\"", "\"maxpool\"");
        let err = parse_topology(&t).unwrap_err().to_string();
        assert!(err.contains("maxpool") && err.contains("Pool1"), "{err}");
    }

    #[test]
    fn rejects_dangling_references() {
        let t = tiny(1).replace(
            "\"backres\"",
            "\"skips\": [{\"source\": \"Conv9\", \"dest\": \"Conv2\", \"mode\": \"add_zero_pad\"}], \"backres\"",
        );
        let err = parse_topology(&t).unwrap_err().to_string();
        assert!(err.contains("Conv9"), "{err}");
        let t = tiny(1).replace("[\"Conv2\"]", "[\"Conv7\"]");
        assert!(parse_topology(&t).unwrap_err().to_string().contains("Conv7"));
    }

    #[test]
    fn rejects_shape_mismatch_with_layer_name() {
        let t = tiny(1).replace("\"in\": 8", "\"in\": 9");
        let err = parse_topology(&t).unwrap_err().to_string();
        assert!(err.contains("FC1") && err.contains('8') && err.contains('9'), "{err}");
        let t = tiny(1).replace("\"in\": 2, \"out\": 2", "\"in\": 3, \"out\": 2");
        assert!(parse_topology(&t).unwrap_err().to_string().contains("Conv2"));
    }

    #[test]
    fn rejects_channel_changing_backres() {
        let t = tiny(2)
            .replace("\"in\": 2, \"out\": 2", "\"in\": 2, \"out\": 4")
            .replace("\"in\": 8", "\"in\": 16");
        assert!(parse_topology(&t).is_err());
    }

    #[test]
    fn document_round_trip_preserves_spec_and_hash() {
        let s = parse_topology(&tiny(2)).unwrap();
        let again = parse_topology(&s.to_document()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.hash(), again.hash());
        assert_ne!(s.hash(), parse_topology(&tiny(3)).unwrap().hash());
    }
}
