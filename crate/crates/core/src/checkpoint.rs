//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header  "WTFC" | u32 version (=1)
//! spec    u32 input rank | u32 dims[rank] | u32 classes | u32 layer count
//!         per layer: u8 kind, then
//!           0 conv:       u32 in_channels, u32 out_channels, u32 kernel, u32 stride
//!           1 dense:      u32 inputs, u32 outputs
//!           2 avgpool
//!           3 activation: u8 activation (0 relu, 1 tanh)
//!           4 flatten
//! body    per parameterized layer, in order: W, b, B
//!         each array: u32 rank | u32 dims[rank] | f64 values[product(dims)]
//! footer  u8 rng algorithm (0 = chacha8)
//!         u64 init seed | u64 feedback seed | u64 shuffle seed
//!         u64 epochs | u64 batch size | f64 learning rate
//!         u8 training mode (0 bp, 1 fa, 255 untrained)
//!         "CFTW"
//! ```

use std::fs;
use std::path::Path;

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::layers::{Activation, FeedbackMode, LayerSpec, LayerState};
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WTFC";
pub const END_MARKER: &[u8; 4] = b"CFTW";
pub const FORMAT_VERSION: u32 = 1;
const RNG_CHACHA8: u8 = 0;
// Largest array we are willing to allocate while parsing; LeNet's biggest is 30 720 values.
const MAX_ARRAY_LEN: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    pub init_seed: u64,
    pub feedback_seed: u64,
    pub shuffle_seed: u64,
    pub epochs: u64,
    pub batch_size: u64,
    pub learning_rate: f64,
    /// `None` for a network that has not been trained.
    pub mode: Option<FeedbackMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        encode_spec(&mut out, self.network.spec());
        for state in self.network.states().iter().flatten() {
            put_tensor(&mut out, state.weights());
            put_tensor(&mut out, state.bias());
            put_tensor(&mut out, state.feedback());
        }
        out.push(RNG_CHACHA8);
        let m = &self.meta;
        for v in [m.init_seed, m.feedback_seed, m.shuffle_seed, m.epochs, m.batch_size] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&m.learning_rate.to_le_bytes());
        out.push(match m.mode {
            Some(FeedbackMode::WeightTransport) => 0,
            Some(FeedbackMode::FeedbackAlignment) => 1,
            None => 255,
        });
        out.extend_from_slice(END_MARKER);
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, source);
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error("bad magic, not a checkpoint file"));
        }
        let version = r.u32_le("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let spec = decode_spec(&mut r)?;
        spec.validate().map_err(|e| r.error(format!("inconsistent network description: {e}")))?;

        let mut states = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let Some(ws) = layer.weight_shape() else {
                states.push(None);
                continue;
            };
            let w = get_tensor(&mut r, "weights")?;
            let b = get_tensor(&mut r, "bias")?;
            let fb = get_tensor(&mut r, "feedback")?;
            if w.shape() != ws.as_slice() {
                return Err(r.error(format!("layer {i}: weights {:?}, description says {ws:?}", w.shape())));
            }
            let state = LayerState::new(w, b, fb).map_err(|e| r.error(format!("layer {i}: {e}")))?;
            states.push(Some(state));
        }

        let rng = r.u8("rng algorithm")?;
        if rng != RNG_CHACHA8 {
            return Err(r.error(format!("unknown rng algorithm id {rng}")));
        }
        let init_seed = r.u64_le("init seed")?;
        let feedback_seed = r.u64_le("feedback seed")?;
        let shuffle_seed = r.u64_le("shuffle seed")?;
        let epochs = r.u64_le("epochs")?;
        let batch_size = r.u64_le("batch size")?;
        let learning_rate = r.f64_le("learning rate")?;
        let mode = match r.u8("training mode")? {
            0 => Some(FeedbackMode::WeightTransport),
            1 => Some(FeedbackMode::FeedbackAlignment),
            255 => None,
            other => return Err(r.error(format!("unknown training mode code {other}"))),
        };
        if r.take(4, "end marker")? != END_MARKER {
            return Err(r.error("missing end marker"));
        }
        r.expect_end()?;
        let network = Network::from_parts(spec, states).map_err(|e| r.error(e.to_string()))?;
        Ok(Self {
            network,
            meta: TrainingMeta { init_seed, feedback_seed, shuffle_seed, epochs, batch_size, learning_rate, mode },
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_usize(out: &mut Vec<u8>, v: usize) {
    put_u32(out, u32::try_from(v).expect("extent fits in u32"));
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_usize(out, t.rank());
    for &d in t.shape() {
        put_usize(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_usize(r: &mut Reader<'_>, what: &str) -> Result<usize> {
    Ok(r.u32_le(what)? as usize)
}

fn get_tensor(r: &mut Reader<'_>, what: &str) -> Result<Tensor> {
    let rank = get_usize(r, what)?;
    if rank == 0 || rank > 8 {
        return Err(r.error(format!("{what}: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(get_usize(r, what)?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ARRAY_LEN)
        .ok_or_else(|| r.error(format!("{what}: shape {shape:?} too large")))?;
    let raw = r.take(n * 8, what)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| r.error(format!("{what}: {e}")))
}

fn encode_spec(out: &mut Vec<u8>, spec: &NetworkSpec) {
    put_usize(out, spec.input_shape.len());
    for &d in &spec.input_shape {
        put_usize(out, d);
    }
    put_usize(out, spec.classes);
    put_usize(out, spec.layers.len());
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                out.push(0);
                for v in [in_channels, out_channels, kernel, stride] {
                    put_usize(out, v);
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                out.push(1);
                put_usize(out, inputs);
                put_usize(out, outputs);
            }
            LayerSpec::AvgPool => out.push(2),
            LayerSpec::Activation(act) => {
                out.push(3);
                out.push(act.code());
            }
            LayerSpec::Flatten => out.push(4),
        }
    }
}

fn decode_spec(r: &mut Reader<'_>) -> Result<NetworkSpec> {
    let rank = get_usize(r, "input rank")?;
    if rank == 0 || rank > 8 {
        return Err(r.error(format!("implausible input rank {rank}")));
    }
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(get_usize(r, "input extent")?);
    }
    let classes = get_usize(r, "class count")?;
    let count = get_usize(r, "layer count")?;
    if count > 1024 {
        return Err(r.error(format!("implausible layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let layer = match r.u8("layer kind")? {
            0 => LayerSpec::Conv {
                in_channels: get_usize(r, "conv in_channels")?,
                out_channels: get_usize(r, "conv out_channels")?,
                kernel: get_usize(r, "conv kernel")?,
                stride: get_usize(r, "conv stride")?,
            },
            1 => LayerSpec::Dense { inputs: get_usize(r, "dense inputs")?, outputs: get_usize(r, "dense outputs")? },
            2 => LayerSpec::AvgPool,
            3 => {
                let code = r.u8("activation")?;
                LayerSpec::Activation(
                    Activation::from_code(code).ok_or_else(|| r.error(format!("unknown activation code {code}")))?,
                )
            }
            4 => LayerSpec::Flatten,
            other => return Err(r.error(format!("layer {i}: unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    Ok(NetworkSpec { input_shape, classes, layers })
}
