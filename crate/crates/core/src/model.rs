//! Declarative network specifications, whole-network execution, and weight
//! persistence.
//!
//! A [`NetworkSpec`] is a validated chain of named layer nodes with symbolic
//! shape propagation; [`Network`] pairs a spec with owned parameter state
//! and runs forward/backward over batches. Weights round-trip through a
//! versioned little-endian binary format, bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, lrn_backward, lrn_forward, out_extent,
    pool_backward, pool_forward, softmax_cross_entropy, softmax_cross_entropy_backward, ActKind,
    BnCache, BnMode, BnParams, ConvSpec, FcSpec, LrnParams, PoolCache, PoolSpec,
};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{Dist, Shape, Tensor};

/// Input resolution / width preset shared by the builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 227x227 input, canonical channel widths.
    Full,
    /// 64x64 input, conv widths divided by 8, fc widths 256/128.
    Mini,
}

impl Scale {
    pub fn token(&self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Mini => "mini",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "mini" => Ok(Scale::Mini),
            other => Err(Error::invalid(format!("unknown scale {other:?}, expected full|mini"))),
        }
    }
}

/// Which layer backs the optimized variant's norm5 node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Lrn,
    BatchNorm,
}

/// Layer geometry without parameter values.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    },
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Activation { act: ActKind },
    Lrn { params: LrnParams },
    BatchNorm { channels: usize },
    Fc { in_dim: usize, out_dim: usize },
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: NodeKind,
    pub bottom: String,
    pub top: String,
}

/// A validated layer chain: unique names, each node consuming the previous
/// node's output, exactly one loss node at the end, and consistent shapes
/// from `input_shape` (per-sample `[C, H, W]`) down to `num_classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    nodes: Vec<LayerNode>,
    num_classes: usize,
    input_shape: Shape,
}

impl NetworkSpec {
    pub fn new(nodes: Vec<LayerNode>, num_classes: usize, input_shape: Shape) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be at least 2, got {num_classes}")));
        }
        if nodes.is_empty() {
            return Err(Error::invalid("network needs at least one node"));
        }
        if input_shape.dims().len() != 3 {
            return Err(Error::shape(format!(
                "input shape must be [C, H, W], got {input_shape}"
            )));
        }
        let mut prev = "data";
        for node in &nodes {
            if node.name.is_empty() || node.name == "data" {
                return Err(Error::invalid(format!("bad node name {:?}", node.name)));
            }
            if nodes.iter().filter(|n| n.name == node.name).count() > 1 {
                return Err(Error::invalid(format!("duplicate node name {:?}", node.name)));
            }
            if node.bottom != prev {
                return Err(Error::invalid(format!(
                    "node {:?} consumes {:?} but the previous output is {:?}",
                    node.name, node.bottom, prev
                )));
            }
            if node.top != node.name {
                return Err(Error::invalid(format!(
                    "node {:?} must write its own top, got {:?}",
                    node.name, node.top
                )));
            }
            prev = &node.name;
        }
        let losses = nodes.iter().filter(|n| n.kind == NodeKind::SoftmaxCe).count();
        if losses != 1 || nodes.last().unwrap().kind != NodeKind::SoftmaxCe {
            return Err(Error::invalid(
                "network must end with its single softmax cross-entropy node",
            ));
        }
        let spec = NetworkSpec { nodes, num_classes, input_shape };
        let shapes = spec.propagate()?;
        let into_loss = if shapes.len() >= 2 {
            shapes[shapes.len() - 2].numel()
        } else {
            spec.input_shape.numel()
        };
        if into_loss != num_classes {
            return Err(Error::shape(format!(
                "loss node receives {into_loss} values per sample, expected num_classes = {num_classes}"
            )));
        }
        Ok(spec)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    /// Per-node output shapes (per-sample; the loss node yields a scalar).
    pub fn propagate(&self) -> Result<Vec<Shape>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            cur = node_output_shape(&node.kind, &cur, &node.name)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Copy of the spec with `name` removed and its consumer rewired to the
    /// removed node's input.
    pub fn without_node(&self, name: &str) -> Result<NetworkSpec> {
        let idx = self
            .nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::invalid(format!("no node named {name:?}")))?;
        let mut nodes = self.nodes.clone();
        let removed = nodes.remove(idx);
        if let Some(next) = nodes.get_mut(idx) {
            next.bottom = removed.bottom;
        }
        NetworkSpec::new(nodes, self.num_classes, self.input_shape.clone())
    }

    /// Parameter names in deterministic node order: `<node>.w` / `<node>.b`
    /// for conv and fc, `<node>.gamma` / `<node>.beta` for batch norm.
    pub fn trainable_keys(&self) -> Vec<String> {
        let mut keys = Vec::new();
        for node in &self.nodes {
            match node.kind {
                NodeKind::Conv { .. } | NodeKind::Fc { .. } => {
                    keys.push(format!("{}.w", node.name));
                    keys.push(format!("{}.b", node.name));
                }
                NodeKind::BatchNorm { .. } => {
                    keys.push(format!("{}.gamma", node.name));
                    keys.push(format!("{}.beta", node.name));
                }
                _ => {}
            }
        }
        keys
    }

    /// Human-readable dump in the block style of network prototext files.
    pub fn to_text(&self) -> String {
        let d = self.input_shape.dims();
        let mut s = format!(
            "input: \"data\"\ninput_dim: {}\ninput_dim: {}\ninput_dim: {}\n",
            d[0], d[1], d[2]
        );
        for node in &self.nodes {
            s.push_str("layer {\n");
            s.push_str(&format!("  name: \"{}\"\n", node.name));
            s.push_str(&format!("  type: \"{}\"\n", kind_type_name(&node.kind)));
            s.push_str(&format!("  bottom: \"{}\"\n", node.bottom));
            s.push_str(&format!("  top: \"{}\"\n", node.top));
            match &node.kind {
                NodeKind::Conv { out_channels, kernel, stride, pad, .. } => {
                    s.push_str(&format!(
                        "  convolution_param {{ num_output: {} kernel_size: {} stride: {} pad: {} }}\n",
                        out_channels,
                        pair(*kernel),
                        pair(*stride),
                        pair(*pad)
                    ));
                }
                NodeKind::MaxPool { window, stride } => {
                    s.push_str(&format!(
                        "  pooling_param {{ pool: MAX kernel_size: {window} stride: {stride} }}\n"
                    ));
                }
                NodeKind::AvgPool { window, stride } => {
                    s.push_str(&format!(
                        "  pooling_param {{ pool: AVE kernel_size: {window} stride: {stride} }}\n"
                    ));
                }
                NodeKind::Lrn { params } => {
                    s.push_str(&format!(
                        "  lrn_param {{ local_size: {} alpha: {} beta: {} k: {} }}\n",
                        params.local_size, params.alpha, params.beta, params.k
                    ));
                }
                NodeKind::BatchNorm { channels } => {
                    s.push_str(&format!("  batch_norm_param {{ channels: {channels} }}\n"));
                }
                NodeKind::Fc { out_dim, .. } => {
                    s.push_str(&format!("  inner_product_param {{ num_output: {out_dim} }}\n"));
                }
                NodeKind::Activation { .. } | NodeKind::SoftmaxCe => {}
            }
            s.push_str("}\n");
        }
        s
    }
}

fn pair(v: (usize, usize)) -> String {
    if v.0 == v.1 {
        v.0.to_string()
    } else {
        format!("{}x{}", v.0, v.1)
    }
}

fn kind_type_name(kind: &NodeKind) -> &'static str {
    match kind {
        NodeKind::Conv { .. } => "Convolution",
        NodeKind::MaxPool { .. } | NodeKind::AvgPool { .. } => "Pooling",
        NodeKind::Activation { act } => match act {
            ActKind::Sigmoid => "Sigmoid",
            ActKind::Tanh => "TanH",
            ActKind::Relu => "ReLU",
        },
        NodeKind::Lrn { .. } => "LRN",
        NodeKind::BatchNorm { .. } => "BatchNorm",
        NodeKind::Fc { .. } => "InnerProduct",
        NodeKind::SoftmaxCe => "SoftmaxWithLoss",
    }
}

fn spatial3(shape: &Shape, name: &str) -> Result<(usize, usize, usize)> {
    let d = shape.dims();
    if d.len() != 3 {
        return Err(Error::shape(format!(
            "{name}: expected a [C, H, W] input, got {shape}"
        )));
    }
    Ok((d[0], d[1], d[2]))
}

fn node_output_shape(kind: &NodeKind, input: &Shape, name: &str) -> Result<Shape> {
    match kind {
        NodeKind::Conv { in_channels, out_channels, kernel, stride, pad } => {
            let (c, h, w) = spatial3(input, name)?;
            if c != *in_channels {
                return Err(Error::shape(format!(
                    "{name}: expects {in_channels} input channels, got {c}"
                )));
            }
            let oh = out_extent(h, kernel.0, stride.0, pad.0, name)?;
            let ow = out_extent(w, kernel.1, stride.1, pad.1, name)?;
            Shape::new(&[*out_channels, oh, ow])
        }
        NodeKind::MaxPool { window, stride } | NodeKind::AvgPool { window, stride } => {
            let (c, h, w) = spatial3(input, name)?;
            let oh = out_extent(h, *window, *stride, 0, name)?;
            let ow = out_extent(w, *window, *stride, 0, name)?;
            Shape::new(&[c, oh, ow])
        }
        NodeKind::Activation { .. } => Ok(input.clone()),
        NodeKind::Lrn { .. } => {
            spatial3(input, name)?;
            Ok(input.clone())
        }
        NodeKind::BatchNorm { channels } => {
            let (c, _, _) = spatial3(input, name)?;
            if c != *channels {
                return Err(Error::shape(format!(
                    "{name}: expects {channels} channels, got {c}"
                )));
            }
            Ok(input.clone())
        }
        NodeKind::Fc { in_dim, out_dim } => {
            if input.numel() != *in_dim {
                return Err(Error::shape(format!(
                    "{name}: expects {in_dim} inputs, got {} from {input}",
                    input.numel()
                )));
            }
            Shape::new(&[*out_dim])
        }
        NodeKind::SoftmaxCe => Ok(Shape::scalar()),
    }
}

struct ScaleTable {
    input: usize,
    conv_channels: [usize; 5],
    conv1_pad: usize,
    fc_dims: [usize; 2],
}

fn scale_table(scale: Scale) -> ScaleTable {
    match scale {
        Scale::Full => ScaleTable {
            input: 227,
            conv_channels: [96, 256, 384, 384, 256],
            conv1_pad: 0,
            fc_dims: [4096, 4096],
        },
        Scale::Mini => ScaleTable {
            input: 64,
            conv_channels: [12, 32, 48, 48, 32],
            conv1_pad: 2,
            fc_dims: [256, 128],
        },
    }
}

/// Spatial extent after the conv1..pool5 stack for a given scale.
fn pool5_extent(t: &ScaleTable) -> Result<usize> {
    let mut s = out_extent(t.input, 11, 4, t.conv1_pad, "conv1")?;
    s = out_extent(s, 3, 2, 0, "pool1")?;
    s = out_extent(s, 5, 1, 2, "conv2")?;
    s = out_extent(s, 3, 2, 0, "pool2")?;
    s = out_extent(s, 3, 1, 1, "conv3")?;
    s = out_extent(s, 3, 1, 1, "conv4")?;
    s = out_extent(s, 3, 1, 1, "conv5")?;
    out_extent(s, 3, 2, 0, "pool5")
}

/// The 8-layer baseline: five convolutions (three max-pools interleaved)
/// followed by three fully connected layers, ReLU after conv1-5, fc6, and
/// fc7, softmax cross-entropy on the fc8 logits. Grayscale input.
pub fn build_alexnet(num_classes: usize, scale: Scale) -> Result<NetworkSpec> {
    assemble(num_classes, scale, None)
}

/// The baseline plus a single `norm5` node between pool5 and fc6, backed by
/// either response normalization (local_size 5, alpha 1e-4, beta 0.75) or
/// batch normalization.
pub fn build_alexnet_optimized(
    num_classes: usize,
    scale: Scale,
    norm_kind: NormKind,
) -> Result<NetworkSpec> {
    assemble(num_classes, scale, Some(norm_kind))
}

fn assemble(num_classes: usize, scale: Scale, norm5: Option<NormKind>) -> Result<NetworkSpec> {
    let t = scale_table(scale);
    let c = t.conv_channels;
    let conv = |ci: usize, co: usize, k: usize, s: usize, p: usize| NodeKind::Conv {
        in_channels: ci,
        out_channels: co,
        kernel: (k, k),
        stride: (s, s),
        pad: (p, p),
    };
    let relu = NodeKind::Activation { act: ActKind::Relu };
    let pool = NodeKind::MaxPool { window: 3, stride: 2 };

    let mut list: Vec<(&str, NodeKind)> = vec![
        ("conv1", conv(1, c[0], 11, 4, t.conv1_pad)),
        ("relu1", relu.clone()),
        ("pool1", pool.clone()),
        ("conv2", conv(c[0], c[1], 5, 1, 2)),
        ("relu2", relu.clone()),
        ("pool2", pool.clone()),
        ("conv3", conv(c[1], c[2], 3, 1, 1)),
        ("relu3", relu.clone()),
        ("conv4", conv(c[2], c[3], 3, 1, 1)),
        ("relu4", relu.clone()),
        ("conv5", conv(c[3], c[4], 3, 1, 1)),
        ("relu5", relu.clone()),
        ("pool5", pool),
    ];
    match norm5 {
        Some(NormKind::Lrn) => list.push(("norm5", NodeKind::Lrn { params: LrnParams::default() })),
        Some(NormKind::BatchNorm) => {
            list.push(("norm5", NodeKind::BatchNorm { channels: c[4] }))
        }
        None => {}
    }
    let spatial = pool5_extent(&t)?;
    let flat = c[4] * spatial * spatial;
    list.push(("fc6", NodeKind::Fc { in_dim: flat, out_dim: t.fc_dims[0] }));
    list.push(("relu6", relu.clone()));
    list.push(("fc7", NodeKind::Fc { in_dim: t.fc_dims[0], out_dim: t.fc_dims[1] }));
    list.push(("relu7", relu));
    list.push(("fc8", NodeKind::Fc { in_dim: t.fc_dims[1], out_dim: num_classes }));
    list.push(("loss", NodeKind::SoftmaxCe));

    let mut nodes = Vec::with_capacity(list.len());
    let mut prev = "data".to_string();
    for (name, kind) in list {
        nodes.push(LayerNode { name: name.to_string(), kind, bottom: prev, top: name.to_string() });
        prev = name.to_string();
    }
    let input = Shape::new(&[1, t.input, t.input])?;
    NetworkSpec::new(nodes, num_classes, input)
}

/// Trainable parameter elements (weights and biases) over the whole spec.
pub fn param_count(spec: &NetworkSpec) -> u64 {
    let mut total = 0u64;
    for node in spec.nodes() {
        total += match node.kind {
            NodeKind::Conv { in_channels, out_channels, kernel, .. } => {
                (out_channels * in_channels * kernel.0 * kernel.1 + out_channels) as u64
            }
            NodeKind::Fc { in_dim, out_dim } => (out_dim * in_dim + out_dim) as u64,
            NodeKind::BatchNorm { channels } => 2 * channels as u64,
            _ => 0,
        };
    }
    total
}

/// Weight count of a dense connection from every input pixel to every
/// hidden unit.
pub fn dense_connection_weights(input_pixels: u64, hidden_units: u64) -> u64 {
    input_pixels * hidden_units
}

/// Weight count when each hidden unit connects only to a local window.
pub fn local_connection_weights(hidden_units: u64, window: (u64, u64)) -> u64 {
    hidden_units * window.0 * window.1
}

const WEIGHT_MAGIC: &[u8; 4] = b"NIGW";
const WEIGHT_VERSION: u32 = 1;

/// Ordered map from parameter name to tensor. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::data(format!("weight store already has an entry {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::data(format!("weight store has no entry {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::data(format!("weight store has no entry {name:?}")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Append a store body: entry count, then per entry the name, rank, dims,
/// and raw little-endian doubles.
pub(crate) fn encode_store(store: &WeightStore, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.entries() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let dims = tensor.shape().dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) fn decode_store(r: &mut ByteReader) -> Result<WeightStore> {
    let count = r.u32("entry count")?;
    let mut store = WeightStore::new();
    for i in 0..count {
        let what = format!("entry {i}");
        let name_len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::parse(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32(&what)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&what)? as usize);
        }
        let shape = Shape::new(&dims)?;
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            data.push(r.f64(&what)?);
        }
        store.insert(name, Tensor::from_vec(data, shape)?)?;
    }
    Ok(store)
}

/// Serialize a store: magic, format version, then the store body.
pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    encode_store(store, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Read back a [`save_weights`] file. Fails closed: any truncation, magic,
/// version, or trailing-byte problem yields an error and no partial store.
pub fn load_weights(path: &Path) -> Result<WeightStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |msg: String| Error::parse(format!("{}: {msg}", path.display()));
    let mut r = ByteReader::new(&bytes);
    if r.take(4, "magic").map_err(|_| ctx("truncated file while reading magic".into()))?
        != WEIGHT_MAGIC
    {
        return Err(ctx("not a weight store (bad magic)".into()));
    }
    let version = r.u32("version").map_err(|e| ctx(e.to_string()))?;
    if version != WEIGHT_VERSION {
        return Err(ctx(format!("unsupported weight store version {version}")));
    }
    let store = decode_store(&mut r).map_err(|e| ctx(e.to_string()))?;
    if !r.done() {
        return Err(ctx("trailing bytes after the last entry".into()));
    }
    Ok(store)
}

fn annotate(name: &str, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
        Error::InvalidParam(m) => Error::InvalidParam(format!("{name}: {m}")),
        Error::Parse(m) => Error::Parse(format!("{name}: {m}")),
        Error::Data(m) => Error::Data(format!("{name}: {m}")),
        Error::Train(m) => Error::Train(format!("{name}: {m}")),
        io @ Error::Io { .. } => io,
    }
}

#[derive(Debug, Clone)]
enum NodeState {
    Conv(ConvSpec),
    Pool(PoolSpec),
    Act(ActKind),
    Lrn(LrnParams),
    Bn(BnParams),
    Fc(FcSpec),
    Loss,
}

enum LayerCache {
    Conv { input: Tensor },
    Pool(PoolCache),
    Act { input: Tensor },
    Lrn { input: Tensor },
    Bn(BnCache),
    Fc { input: Tensor, pre_shape: Shape },
    Loss,
}

/// Everything backward needs from a train-mode forward.
pub struct TrainPass {
    pub loss: f64,
    pub logits: Tensor,
    pub probs: Tensor,
    labels: Vec<usize>,
    caches: Vec<LayerCache>,
}

/// A spec plus owned parameter state for every node.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    states: Vec<NodeState>,
}

impl Network {
    /// Fresh parameters: gaussian(0, sqrt(2/fan_in)) weights and zero biases
    /// for conv/fc, identity-initialized batch norm. Node i draws from the
    /// substream `derive_seed(seed, i)`, so adding a node never shifts the
    /// values of the others.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Network> {
        let mut states = Vec::with_capacity(spec.nodes().len());
        for (i, node) in spec.nodes().iter().enumerate() {
            let mut rng = SeededRng::new(derive_seed(seed, i as u64));
            let state = match &node.kind {
                NodeKind::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
                    let w = Tensor::random(
                        Shape::new(&[*out_channels, *in_channels, kernel.0, kernel.1])?,
                        Dist::Gaussian { mean: 0.0, std: (2.0 / fan_in).sqrt() },
                        &mut rng,
                    );
                    let b = Tensor::new(Shape::new(&[*out_channels])?);
                    NodeState::Conv(ConvSpec::new(
                        *in_channels,
                        *out_channels,
                        *kernel,
                        *stride,
                        *pad,
                        w,
                        b,
                    )?)
                }
                NodeKind::MaxPool { window, stride } => NodeState::Pool(PoolSpec::max(*window, *stride)),
                NodeKind::AvgPool { window, stride } => NodeState::Pool(PoolSpec::mean(*window, *stride)),
                NodeKind::Activation { act } => NodeState::Act(*act),
                NodeKind::Lrn { params } => NodeState::Lrn(*params),
                NodeKind::BatchNorm { channels } => NodeState::Bn(BnParams::new(*channels)?),
                NodeKind::Fc { in_dim, out_dim } => {
                    let w = Tensor::random(
                        Shape::new(&[*out_dim, *in_dim])?,
                        Dist::Gaussian { mean: 0.0, std: (2.0 / *in_dim as f64).sqrt() },
                        &mut rng,
                    );
                    let b = Tensor::new(Shape::new(&[*out_dim])?);
                    NodeState::Fc(FcSpec::new(*in_dim, *out_dim, w, b)?)
                }
                NodeKind::SoftmaxCe => NodeState::Loss,
            };
            states.push(state);
        }
        Ok(Network { spec, states })
    }

    /// Rebuild a network from stored tensors, validating that the store has
    /// exactly the entries the spec calls for, with matching shapes.
    pub fn from_weights(spec: NetworkSpec, store: &WeightStore) -> Result<Network> {
        let mut used = 0usize;
        let mut states = Vec::with_capacity(spec.nodes().len());
        for node in spec.nodes() {
            let name = &node.name;
            let mut fetch = |suffix: &str| -> Result<Tensor> {
                used += 1;
                store.get(&format!("{name}.{suffix}")).cloned()
            };
            let state = match &node.kind {
                NodeKind::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    NodeState::Conv(
                        ConvSpec::new(
                            *in_channels,
                            *out_channels,
                            *kernel,
                            *stride,
                            *pad,
                            fetch("w")?,
                            fetch("b")?,
                        )
                        .map_err(|e| annotate(name, e))?,
                    )
                }
                NodeKind::MaxPool { window, stride } => NodeState::Pool(PoolSpec::max(*window, *stride)),
                NodeKind::AvgPool { window, stride } => NodeState::Pool(PoolSpec::mean(*window, *stride)),
                NodeKind::Activation { act } => NodeState::Act(*act),
                NodeKind::Lrn { params } => NodeState::Lrn(*params),
                NodeKind::BatchNorm { channels } => {
                    let mut p = BnParams::new(*channels)?;
                    p.gamma = fetch("gamma")?;
                    p.beta_shift = fetch("beta")?;
                    p.running_mean = fetch("running_mean")?;
                    p.running_var = fetch("running_var")?;
                    let dims = [*channels];
                    for (field, t) in [
                        ("gamma", &p.gamma),
                        ("beta", &p.beta_shift),
                        ("running_mean", &p.running_mean),
                        ("running_var", &p.running_var),
                    ] {
                        if t.shape().dims() != dims {
                            return Err(Error::shape(format!(
                                "{name}.{field}: shape {} does not match [{channels}]",
                                t.shape()
                            )));
                        }
                    }
                    NodeState::Bn(p)
                }
                NodeKind::Fc { in_dim, out_dim } => NodeState::Fc(
                    FcSpec::new(*in_dim, *out_dim, fetch("w")?, fetch("b")?)
                        .map_err(|e| annotate(name, e))?,
                ),
                NodeKind::SoftmaxCe => NodeState::Loss,
            };
            states.push(state);
        }
        if used != store.len() {
            return Err(Error::data(format!(
                "weight store has {} entries, the spec uses {used}",
                store.len()
            )));
        }
        Ok(Network { spec, states })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Snapshot of all stored tensors, including batch-norm running stats.
    pub fn weights(&self) -> WeightStore {
        let mut store = WeightStore::new();
        for (node, state) in self.spec.nodes().iter().zip(&self.states) {
            let name = &node.name;
            let mut put = |suffix: &str, t: &Tensor| {
                store
                    .insert(format!("{name}.{suffix}"), t.clone())
                    .expect("node names are unique");
            };
            match state {
                NodeState::Conv(spec) => {
                    put("w", &spec.weights);
                    put("b", &spec.bias);
                }
                NodeState::Fc(spec) => {
                    put("w", &spec.weights);
                    put("b", &spec.bias);
                }
                NodeState::Bn(p) => {
                    put("gamma", &p.gamma);
                    put("beta", &p.beta_shift);
                    put("running_mean", &p.running_mean);
                    put("running_var", &p.running_var);
                }
                _ => {}
            }
        }
        store
    }

    /// Visit every trainable tensor in deterministic node order, matching
    /// [`NetworkSpec::trainable_keys`]. Running stats are not visited.
    pub fn visit_trainable(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (node, state) in self.spec.nodes.iter().zip(self.states.iter_mut()) {
            let name = &node.name;
            match state {
                NodeState::Conv(spec) => {
                    f(&format!("{name}.w"), &mut spec.weights);
                    f(&format!("{name}.b"), &mut spec.bias);
                }
                NodeState::Fc(spec) => {
                    f(&format!("{name}.w"), &mut spec.weights);
                    f(&format!("{name}.b"), &mut spec.bias);
                }
                NodeState::Bn(p) => {
                    f(&format!("{name}.gamma"), &mut p.gamma);
                    f(&format!("{name}.beta"), &mut p.beta_shift);
                }
                _ => {}
            }
        }
    }

    fn require_batch(&self, batch: &Tensor) -> Result<usize> {
        let dims = batch.shape().dims();
        let want = self.spec.input_shape.dims();
        if dims.len() != 4 || &dims[1..] != want {
            return Err(Error::shape(format!(
                "input batch shape {} does not match [N, {}, {}, {}]",
                batch.shape(),
                want[0],
                want[1],
                want[2]
            )));
        }
        Ok(dims[0])
    }

    /// Run the chain up to the loss node and return the logits. Batch-norm
    /// nodes use their running statistics.
    pub fn forward_infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.require_batch(batch)?;
        let mut cur = batch.clone();
        for (node, state) in self.spec.nodes().iter().zip(&self.states) {
            let name = &node.name;
            cur = match state {
                NodeState::Conv(spec) => {
                    conv2d_forward(&cur, spec).map_err(|e| annotate(name, e))?
                }
                NodeState::Pool(spec) => {
                    pool_forward(&cur, spec).map_err(|e| annotate(name, e))?.0
                }
                NodeState::Act(kind) => activation_forward(&cur, *kind),
                NodeState::Lrn(p) => lrn_forward(&cur, p).map_err(|e| annotate(name, e))?,
                NodeState::Bn(p) => {
                    let mut infer = p.clone();
                    infer.mode = BnMode::Infer;
                    batchnorm_forward(&cur, &mut infer).map_err(|e| annotate(name, e))?.0
                }
                NodeState::Fc(spec) => {
                    let n = cur.shape().dims()[0];
                    let flat = cur
                        .reshape(Shape::new(&[n, spec.in_dim])?)
                        .map_err(|e| annotate(name, e))?;
                    fc_forward(&flat, spec).map_err(|e| annotate(name, e))?
                }
                NodeState::Loss => break,
            };
        }
        Ok(cur)
    }

    /// Train-mode forward: batch-norm uses batch statistics and updates its
    /// running averages; every node's backward inputs are cached.
    pub fn forward_train(&mut self, batch: &Tensor, labels: &[usize]) -> Result<TrainPass> {
        let n = self.require_batch(batch)?;
        if labels.len() != n {
            return Err(Error::data(format!(
                "batch has {n} samples but {} labels",
                labels.len()
            )));
        }
        let mut caches = Vec::with_capacity(self.states.len());
        let mut cur = batch.clone();
        let mut head = None;
        for (node, state) in self.spec.nodes.iter().zip(self.states.iter_mut()) {
            let name = &node.name;
            match state {
                NodeState::Conv(spec) => {
                    let y = conv2d_forward(&cur, spec).map_err(|e| annotate(name, e))?;
                    caches.push(LayerCache::Conv { input: std::mem::replace(&mut cur, y) });
                }
                NodeState::Pool(spec) => {
                    let (y, pc) = pool_forward(&cur, spec).map_err(|e| annotate(name, e))?;
                    caches.push(LayerCache::Pool(pc));
                    cur = y;
                }
                NodeState::Act(kind) => {
                    let y = activation_forward(&cur, *kind);
                    caches.push(LayerCache::Act { input: std::mem::replace(&mut cur, y) });
                }
                NodeState::Lrn(p) => {
                    let y = lrn_forward(&cur, p).map_err(|e| annotate(name, e))?;
                    caches.push(LayerCache::Lrn { input: std::mem::replace(&mut cur, y) });
                }
                NodeState::Bn(p) => {
                    p.mode = BnMode::Train;
                    let (y, bc) = batchnorm_forward(&cur, p).map_err(|e| annotate(name, e))?;
                    caches.push(LayerCache::Bn(bc));
                    cur = y;
                }
                NodeState::Fc(spec) => {
                    let pre_shape = cur.shape().clone();
                    let flat = cur
                        .reshape(Shape::new(&[n, spec.in_dim])?)
                        .map_err(|e| annotate(name, e))?;
                    let y = fc_forward(&flat, spec).map_err(|e| annotate(name, e))?;
                    caches.push(LayerCache::Fc { input: flat, pre_shape });
                    cur = y;
                }
                NodeState::Loss => {
                    let (loss, probs) =
                        softmax_cross_entropy(&cur, labels).map_err(|e| annotate(name, e))?;
                    caches.push(LayerCache::Loss);
                    head = Some((loss, probs));
                }
            }
        }
        let (loss, probs) = head.expect("validated spec ends in a loss node");
        Ok(TrainPass { loss, logits: cur, probs, labels: labels.to_vec(), caches })
    }

    /// Gradients for every trainable parameter, keyed like
    /// [`NetworkSpec::trainable_keys`].
    pub fn backward(&self, pass: &TrainPass) -> Result<WeightStore> {
        let g = softmax_cross_entropy_backward(&pass.probs, &pass.labels)?;
        self.backward_from(pass, g)
    }

    fn backward_from(&self, pass: &TrainPass, mut g: Tensor) -> Result<WeightStore> {
        if pass.caches.len() != self.states.len() {
            return Err(Error::train(format!(
                "stale caches: {} cached layers for {} nodes",
                pass.caches.len(),
                self.states.len()
            )));
        }
        let mut grads = WeightStore::new();
        for ((node, state), cache) in self
            .spec
            .nodes()
            .iter()
            .zip(&self.states)
            .zip(&pass.caches)
            .rev()
            .skip(1)
        {
            let name = &node.name;
            match (state, cache) {
                (NodeState::Conv(spec), LayerCache::Conv { input }) => {
                    let cg = conv2d_backward(input, spec, &g).map_err(|e| annotate(name, e))?;
                    grads.insert(format!("{name}.w"), cg.grad_w)?;
                    grads.insert(format!("{name}.b"), cg.grad_b)?;
                    g = cg.grad_in;
                }
                (NodeState::Pool(spec), LayerCache::Pool(pc)) => {
                    g = pool_backward(spec, pc, &g).map_err(|e| annotate(name, e))?;
                }
                (NodeState::Act(kind), LayerCache::Act { input }) => {
                    g = activation_backward(input, *kind, &g).map_err(|e| annotate(name, e))?;
                }
                (NodeState::Lrn(p), LayerCache::Lrn { input }) => {
                    g = lrn_backward(input, p, &g).map_err(|e| annotate(name, e))?;
                }
                (NodeState::Bn(p), LayerCache::Bn(bc)) => {
                    let bg = batchnorm_backward(p, bc, &g).map_err(|e| annotate(name, e))?;
                    grads.insert(format!("{name}.gamma"), bg.grad_gamma)?;
                    grads.insert(format!("{name}.beta"), bg.grad_beta)?;
                    g = bg.grad_in;
                }
                (NodeState::Fc(spec), LayerCache::Fc { input, pre_shape }) => {
                    let fg = fc_backward(input, spec, &g).map_err(|e| annotate(name, e))?;
                    grads.insert(format!("{name}.w"), fg.grad_w)?;
                    grads.insert(format!("{name}.b"), fg.grad_b)?;
                    g = fg.grad_in.reshape(pre_shape.clone()).map_err(|e| annotate(name, e))?;
                }
                _ => {
                    return Err(Error::train(format!(
                        "{name}: cached layer does not match the node kind"
                    )))
                }
            }
        }
        Ok(grads)
    }
}
