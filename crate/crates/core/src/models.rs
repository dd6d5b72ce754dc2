//! Optimizee models: a small MLP for MNIST and a batch-normalized convnet
//! for CIFAR-10, expressed as pure loss builders over a [`Graph`].
//!
//! Parameter order inside a [`ParamSet`] is fixed for the lifetime of a run;
//! the coordinatewise optimizer keys its per-coordinate state off that order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NodeId};
use crate::tensor::Tensor;

/// Which optimizer group a parameter belongs to. The convnet routes its
/// convolutional and dense parameters to separate update-rule instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Conv,
    Linear,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: vec![] }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            group,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    /// Total number of scalar coordinates.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Replace all tensors, keeping names/groups/order. Shapes must match.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<ParamSet> {
        if tensors.len() != self.entries.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, t)| {
                if t.shape() != e.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "param-set-update",
                        lhs: e.tensor.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                Ok(ParamEntry {
                    name: e.name.clone(),
                    tensor: t,
                    group: e.group,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet { entries })
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.tensor.bit_eq(&b.tensor)
            })
    }

    /// Serialize to the flat binary layout:
    ///
    /// ```text
    /// magic   4 bytes  "MOPS"
    /// version u32 LE   1
    /// count   u32 LE
    /// entry*  name_len u32 LE, name utf-8,
    ///         group u8 (0 conv / 1 linear),
    ///         ndim u32 LE, dim u64 LE * ndim,
    ///         payload f64 LE * numel
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MOPS");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.group {
                ParamGroup::Conv => 0,
                ParamGroup::Linear => 1,
            });
            out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != b"MOPS" {
            return Err(Error::InvalidConfig("bad parameter file magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::InvalidConfig(format!(
                "unsupported parameter file version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::InvalidConfig("non-utf8 parameter name".into()))?;
            let group = match r.u8()? {
                0 => ParamGroup::Conv,
                1 => ParamGroup::Linear,
                g => return Err(Error::InvalidConfig(format!("bad group tag {g}"))),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            set.push(name, Tensor::new(shape, data)?, group);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(
            File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let mut f = BufReader::new(
            File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        ParamSet::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::InvalidConfig("truncated parameter file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Architecture tag; fully determines all layer shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// flatten -> 784x20 -> relu -> 20x10 -> softmax cross-entropy
    MnistMlp,
    /// 3 x [conv3x3 -> batchnorm -> relu -> avgpool2] with 16 channels,
    /// then 256x32 -> relu -> 32x10 -> softmax cross-entropy
    CifarConvnet,
}

pub const MLP_HIDDEN: usize = 20;
pub const CLASSES: usize = 10;
pub const CONV_CHANNELS: usize = 16;
pub const CONV_BLOCKS: usize = 3;
pub const FC_HIDDEN: usize = 32;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy)]
pub struct ModelSpec {
    pub arch: Arch,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Arch, seed: u64) -> Self {
        ModelSpec { arch, seed }
    }

    /// (channels, height, width) of one input image.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self.arch {
            Arch::MnistMlp => (1, 28, 28),
            Arch::CifarConvnet => (3, 32, 32),
        }
    }
}

/// Running batch-norm statistics, one (mean, var) pair per conv block.
/// Buffers, not parameters: they never receive gradients.
#[derive(Debug, Clone)]
pub struct BnState {
    pub mean: Vec<Tensor>,
    pub var: Vec<Tensor>,
}

impl BnState {
    pub fn new(spec: &ModelSpec) -> Self {
        let blocks = match spec.arch {
            Arch::MnistMlp => 0,
            Arch::CifarConvnet => CONV_BLOCKS,
        };
        BnState {
            mean: vec![Tensor::zeros(&[CONV_CHANNELS]); blocks],
            var: vec![Tensor::full(&[CONV_CHANNELS], 1.0); blocks],
        }
    }

    fn absorb(&mut self, layer: usize, batch_mean: &Tensor, batch_var: &Tensor) {
        let m = BN_MOMENTUM;
        self.mean[layer] = self.mean[layer]
            .zip_map(batch_mean, |r, b| m * r + (1.0 - m) * b)
            .expect("bn mean shape");
        self.var[layer] = self.var[layer]
            .zip_map(batch_var, |r, b| m * r + (1.0 - m) * b)
            .expect("bn var shape");
    }
}

/// How batch-norm layers source their statistics for one forward pass.
pub enum StatsMode<'a> {
    /// Batch statistics; fold them into the running buffers.
    TrainUpdate(&'a mut BnState),
    /// Batch statistics; buffers untouched (attack generation, evaluation).
    Batch,
    /// Fixed running statistics (inference).
    Running(&'a BnState),
}

/// Deterministic initialization: weights ~ Normal(0, sqrt(2/fan_in))
/// truncated at two standard deviations; biases zero; batch-norm scale one,
/// shift zero. The same seed always yields the same parameters.
pub fn init_params(spec: &ModelSpec) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut set = ParamSet::new();
    match spec.arch {
        Arch::MnistMlp => {
            let w1 = he_truncated(&mut rng, &[28 * 28, MLP_HIDDEN], 28 * 28);
            set.push("fc1.weight", w1, ParamGroup::Linear);
            set.push("fc1.bias", Tensor::zeros(&[MLP_HIDDEN]), ParamGroup::Linear);
            let w2 = he_truncated(&mut rng, &[MLP_HIDDEN, CLASSES], MLP_HIDDEN);
            set.push("fc2.weight", w2, ParamGroup::Linear);
            set.push("fc2.bias", Tensor::zeros(&[CLASSES]), ParamGroup::Linear);
        }
        Arch::CifarConvnet => {
            let mut cin = 3;
            for l in 0..CONV_BLOCKS {
                let w = he_truncated(&mut rng, &[CONV_CHANNELS, cin, 3, 3], cin * 9);
                set.push(format!("conv{l}.weight"), w, ParamGroup::Conv);
                set.push(
                    format!("conv{l}.bn_scale"),
                    Tensor::full(&[CONV_CHANNELS], 1.0),
                    ParamGroup::Conv,
                );
                set.push(
                    format!("conv{l}.bn_shift"),
                    Tensor::zeros(&[CONV_CHANNELS]),
                    ParamGroup::Conv,
                );
                cin = CONV_CHANNELS;
            }
            let spatial = 32 >> CONV_BLOCKS; // halved by each pool
            let fc_in = CONV_CHANNELS * spatial * spatial;
            let w = he_truncated(&mut rng, &[fc_in, FC_HIDDEN], fc_in);
            set.push("fc1.weight", w, ParamGroup::Linear);
            set.push("fc1.bias", Tensor::zeros(&[FC_HIDDEN]), ParamGroup::Linear);
            let w2 = he_truncated(&mut rng, &[FC_HIDDEN, CLASSES], FC_HIDDEN);
            set.push("fc2.weight", w2, ParamGroup::Linear);
            set.push("fc2.bias", Tensor::zeros(&[CLASSES]), ParamGroup::Linear);
        }
    }
    set
}

fn he_truncated(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let sigma = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    Tensor::from_fn(shape, |_| loop {
        let z = normal.sample(rng);
        if z.abs() <= 2.0 * sigma {
            return z;
        }
    })
}

/// Build the mean cross-entropy loss for a batch on the tape.
///
/// `params` are graph nodes aligned with [`init_params`] order, so the same
/// builder serves plain evaluation, attack gradients and unrolled
/// meta-training.
pub fn forward_loss(
    graph: &mut Graph,
    spec: &ModelSpec,
    params: &[NodeId],
    images: NodeId,
    labels: NodeId,
    stats: StatsMode,
) -> Result<NodeId> {
    let logits = forward_logits(graph, spec, params, images, stats)?;
    graph.softmax_cross_entropy(logits, labels)
}

fn forward_logits(
    graph: &mut Graph,
    spec: &ModelSpec,
    params: &[NodeId],
    images: NodeId,
    mut stats: StatsMode,
) -> Result<NodeId> {
    let batch = graph.value(images).shape()[0];
    match spec.arch {
        Arch::MnistMlp => {
            expect_params(spec, params, 4)?;
            let x = graph.reshape(images, vec![batch, 28 * 28])?;
            let h = graph.matmul(x, params[0])?;
            let h = graph.add_bias(h, params[1])?;
            let h = graph.relu(h)?;
            let z = graph.matmul(h, params[2])?;
            graph.add_bias(z, params[3])
        }
        Arch::CifarConvnet => {
            expect_params(spec, params, 3 * CONV_BLOCKS + 4)?;
            let mut x = images;
            for l in 0..CONV_BLOCKS {
                let w = params[3 * l];
                let scale = params[3 * l + 1];
                let shift = params[3 * l + 2];
                x = graph.conv2d_same(x, w)?;
                let mode = match &stats {
                    StatsMode::Running(bn) => BnMode::Running {
                        mean: bn.mean[l].clone(),
                        var: bn.var[l].clone(),
                    },
                    _ => BnMode::Batch,
                };
                x = graph.batch_norm(x, scale, shift, BN_EPS, mode)?;
                if let StatsMode::TrainUpdate(bn) = &mut stats {
                    let (bm, bv) = graph.bn_batch_stats(x).expect("batch-mode bn node");
                    let (bm, bv) = (bm.clone(), bv.clone());
                    bn.absorb(l, &bm, &bv);
                }
                x = graph.relu(x)?;
                x = graph.avg_pool2(x)?;
            }
            let base = 3 * CONV_BLOCKS;
            let spatial = 32 >> CONV_BLOCKS;
            let flat = graph.reshape(x, vec![batch, CONV_CHANNELS * spatial * spatial])?;
            let h = graph.matmul(flat, params[base])?;
            let h = graph.add_bias(h, params[base + 1])?;
            let h = graph.relu(h)?;
            let z = graph.matmul(h, params[base + 2])?;
            graph.add_bias(z, params[base + 3])
        }
    }
}

fn expect_params(spec: &ModelSpec, params: &[NodeId], want: usize) -> Result<()> {
    if params.len() != want {
        return Err(Error::InvalidConfig(format!(
            "{:?} expects {} parameter tensors, got {}",
            spec.arch,
            want,
            params.len()
        )));
    }
    Ok(())
}

/// Loss of a parameter set on a batch, on a throwaway graph.
pub fn loss_value(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &Tensor,
    stats: StatsMode,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.tensors().map(|t| g.constant(t.clone())).collect();
    let x = g.constant(images.clone());
    let y = g.constant(labels.clone());
    let loss = forward_loss(&mut g, spec, &ids, x, y, stats)?;
    Ok(g.value(loss).item())
}

/// Loss and parameter gradients on a throwaway graph (values detached).
pub fn loss_and_param_grads(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &Tensor,
    stats: StatsMode,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.tensors().map(|t| g.leaf(t.clone(), true)).collect();
    let x = g.constant(images.clone());
    let y = g.constant(labels.clone());
    let loss = forward_loss(&mut g, spec, &ids, x, y, stats)?;
    let grads = g.backward(loss)?;
    let gs = ids.iter().map(|&id| g.grad_or_zeros(&grads, id)).collect();
    Ok((g.value(loss).item(), gs))
}
