//! The learned update rule: a two-layer LSTM applied coordinatewise.
//!
//! One set of weights (phi) is shared across every scalar coordinate of a
//! parameter group; each coordinate carries its own hidden/cell state.
//! Inputs are preprocessed gradients (a magnitude/direction pair), the output
//! is a scaled scalar update added to the coordinate.
//!
//! Everything is expressed through tape ops over row-batched coordinates
//! ([n, .] tensors, one row per coordinate), so one code path serves both the
//! differentiable unrolled meta-training and the frozen transfer phase.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{ParamGroup, ParamSet};
use crate::tensor::Tensor;

/// Hidden state width of both LSTM layers.
pub const HIDDEN: usize = 20;
/// Input width of the first layer: the preprocessed gradient pair.
pub const INPUT: usize = 2;
/// Fixed scale applied to the projected update. Zero-initialized projection
/// plus a small scale keeps early meta-training stable.
pub const OUT_SCALE: f64 = 0.1;

/// Magnitude/direction separation of a raw gradient:
/// (log|g|/p, sign g) for |g| >= e^-p, else (-1, e^p * g).
/// Both branches meet at (-1, sign g) on the boundary.
pub fn preprocess_gradient(g: f64, p: f64) -> (f64, f64) {
    debug_assert!(p > 0.0);
    let cut = (-p).exp();
    if g.abs() >= cut {
        let dir = if g > 0.0 { 1.0 } else { -1.0 };
        (g.abs().ln() / p, dir)
    } else {
        (-1.0, p.exp() * g)
    }
}

/// Shared LSTM weights for one parameter group.
///
/// Gate matrices are stored fused as wx [in, 4H], wh [H, 4H], b [4H] with
/// gate order (input, forget, candidate, output); the projection maps the
/// top hidden vector to the scalar update.
#[derive(Debug, Clone)]
pub struct LstmPhi {
    params: ParamSet,
    pub out_scale: f64,
}

const PHI_NAMES: [&str; 8] = [
    "l1.wx", "l1.wh", "l1.b", "l2.wx", "l2.wh", "l2.b", "proj.w", "proj.b",
];

impl LstmPhi {
    /// Forget-gate biases 1.0, projection zero, everything else small
    /// uniform in [-0.1, 0.1].
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-0.1..0.1));
        let mut set = ParamSet::new();
        let l1_wx = u(&[INPUT, 4 * HIDDEN]);
        let l1_wh = u(&[HIDDEN, 4 * HIDDEN]);
        let l1_b = with_forget_bias(u(&[4 * HIDDEN]));
        let l2_wx = u(&[HIDDEN, 4 * HIDDEN]);
        let l2_wh = u(&[HIDDEN, 4 * HIDDEN]);
        let l2_b = with_forget_bias(u(&[4 * HIDDEN]));
        set.push(PHI_NAMES[0], l1_wx, ParamGroup::Linear);
        set.push(PHI_NAMES[1], l1_wh, ParamGroup::Linear);
        set.push(PHI_NAMES[2], l1_b, ParamGroup::Linear);
        set.push(PHI_NAMES[3], l2_wx, ParamGroup::Linear);
        set.push(PHI_NAMES[4], l2_wh, ParamGroup::Linear);
        set.push(PHI_NAMES[5], l2_b, ParamGroup::Linear);
        set.push(PHI_NAMES[6], Tensor::zeros(&[HIDDEN, 1]), ParamGroup::Linear);
        set.push(PHI_NAMES[7], Tensor::zeros(&[1]), ParamGroup::Linear);
        LstmPhi {
            params: set,
            out_scale: OUT_SCALE,
        }
    }

    pub fn zeros() -> Self {
        let mut phi = LstmPhi::init(0);
        let zeroed = phi
            .params
            .with_tensors(phi.params.tensors().map(|t| Tensor::zeros(t.shape())).collect())
            .expect("shapes unchanged");
        phi.params = zeroed;
        phi
    }

    pub fn param_set(&self) -> &ParamSet {
        &self.params
    }

    pub fn from_param_set(params: ParamSet, out_scale: f64) -> Result<Self> {
        if params.len() != PHI_NAMES.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} phi tensors, got {}",
                PHI_NAMES.len(),
                params.len()
            )));
        }
        for (e, want) in params.iter().zip(PHI_NAMES) {
            if e.name != want {
                return Err(Error::InvalidConfig(format!(
                    "phi entry {} where {want} expected",
                    e.name
                )));
            }
        }
        Ok(LstmPhi { params, out_scale })
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        LstmPhi::from_param_set(params, self.out_scale)
    }

    pub fn bit_eq(&self, other: &LstmPhi) -> bool {
        self.params.bit_eq(&other.params)
    }
}

fn with_forget_bias(b: Tensor) -> Tensor {
    let mut data = b.data().to_vec();
    for v in &mut data[HIDDEN..2 * HIDDEN] {
        *v = 1.0;
    }
    Tensor::new(b.shape().to_vec(), data).expect("bias shape")
}

/// Hidden and cell vectors for every coordinate of a group, both layers.
#[derive(Debug, Clone)]
pub struct CoordStates {
    pub h1: Tensor,
    pub c1: Tensor,
    pub h2: Tensor,
    pub c2: Tensor,
}

impl CoordStates {
    pub fn zeros(coords: usize) -> Self {
        CoordStates {
            h1: Tensor::zeros(&[coords, HIDDEN]),
            c1: Tensor::zeros(&[coords, HIDDEN]),
            h2: Tensor::zeros(&[coords, HIDDEN]),
            c2: Tensor::zeros(&[coords, HIDDEN]),
        }
    }

    pub fn coords(&self) -> usize {
        self.h1.shape()[0]
    }
}

struct GroupSlot {
    group: ParamGroup,
    phi: LstmPhi,
    states: CoordStates,
    /// Indices into the optimizee ParamSet order.
    members: Vec<usize>,
    /// Packed start offset per member.
    offsets: Vec<usize>,
    coords: usize,
}

/// Per-group shared weights plus per-coordinate recurrent state, routed by
/// each parameter's group label.
pub struct GroupedMetaOptimizer {
    slots: Vec<GroupSlot>,
    param_shapes: Vec<Vec<usize>>,
}

/// Graph node handles for one unroll window.
pub struct TapeSession {
    groups: Vec<GroupNodes>,
    /// Whether phi leaves were inserted as gradient sinks.
    pub train_phi: bool,
}

struct GroupNodes {
    phi: Vec<NodeId>, // aligned with PHI_NAMES
    h1: NodeId,
    c1: NodeId,
    h2: NodeId,
    c2: NodeId,
}

impl GroupedMetaOptimizer {
    /// Build slots for every group present in `params`, in order of first
    /// appearance, with zeroed per-coordinate state.
    pub fn for_params(params: &ParamSet, mut phi_for: impl FnMut(ParamGroup) -> LstmPhi) -> Self {
        let mut slots: Vec<GroupSlot> = Vec::new();
        for (i, e) in params.iter().enumerate() {
            let len = e.tensor.len();
            match slots.iter_mut().find(|s| s.group == e.group) {
                Some(slot) => {
                    slot.members.push(i);
                    slot.offsets.push(slot.coords);
                    slot.coords += len;
                }
                None => slots.push(GroupSlot {
                    group: e.group,
                    phi: phi_for(e.group),
                    states: CoordStates::zeros(0),
                    members: vec![i],
                    offsets: vec![0],
                    coords: len,
                }),
            }
        }
        for slot in &mut slots {
            slot.states = CoordStates::zeros(slot.coords);
        }
        GroupedMetaOptimizer {
            slots,
            param_shapes: params.tensors().map(|t| t.shape().to_vec()).collect(),
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.slots.iter().map(|s| s.group)
    }

    pub fn phi(&self, group: ParamGroup) -> &LstmPhi {
        &self.slots.iter().find(|s| s.group == group).expect("group").phi
    }

    pub fn set_phi(&mut self, group: ParamGroup, phi: LstmPhi) {
        let slot = self
            .slots
            .iter_mut()
            .find(|s| s.group == group)
            .expect("group");
        slot.phi = phi;
    }

    pub fn states(&self, group: ParamGroup) -> &CoordStates {
        &self
            .slots
            .iter()
            .find(|s| s.group == group)
            .expect("group")
            .states
    }

    /// Total per-coordinate state count (must equal the optimizee's scalar
    /// parameter count for the lifetime of a run).
    pub fn coord_count(&self) -> usize {
        self.slots.iter().map(|s| s.coords).sum()
    }

    pub fn reset_states(&mut self) {
        for slot in &mut self.slots {
            slot.states = CoordStates::zeros(slot.coords);
        }
    }

    /// Insert phi tensors and current states as leaves on `graph`. With
    /// `train_phi`, phi leaves are gradient sinks for the window backward.
    pub fn begin_window(&self, graph: &mut Graph, train_phi: bool) -> TapeSession {
        let groups = self
            .slots
            .iter()
            .map(|slot| GroupNodes {
                phi: slot
                    .phi
                    .params
                    .tensors()
                    .map(|t| graph.leaf(t.clone(), train_phi))
                    .collect(),
                h1: graph.constant(slot.states.h1.clone()),
                c1: graph.constant(slot.states.c1.clone()),
                h2: graph.constant(slot.states.h2.clone()),
                c2: graph.constant(slot.states.c2.clone()),
            })
            .collect();
        TapeSession {
            groups,
            train_phi,
        }
    }

    /// Phi node ids for the window backward, ordered like the phi ParamSet.
    pub fn phi_nodes(&self, session: &TapeSession, group: ParamGroup) -> Vec<NodeId> {
        let i = self
            .slots
            .iter()
            .position(|s| s.group == group)
            .expect("group");
        session.groups[i].phi.clone()
    }

    /// One coordinatewise update for every parameter, on the tape.
    ///
    /// `grads` are detached gradient values aligned with the parameter order;
    /// they enter as constants (the first-order rule), get preprocessed, run
    /// through both LSTM layers under the group's phi nodes, and the
    /// projected, scaled update is added to each parameter node. State node
    /// handles inside the session advance to the new states.
    pub fn step_on_graph(
        &self,
        graph: &mut Graph,
        session: &mut TapeSession,
        param_nodes: &[NodeId],
        grads: &[Tensor],
        p: f64,
    ) -> Result<Vec<NodeId>> {
        if param_nodes.len() != self.param_shapes.len() || grads.len() != param_nodes.len() {
            return Err(Error::MissingGradient(format!(
                "expected {} gradients, got {}",
                self.param_shapes.len(),
                grads.len()
            )));
        }
        let mut new_params: Vec<Option<NodeId>> = vec![None; param_nodes.len()];
        for (slot, nodes) in self.slots.iter().zip(&mut session.groups) {
            // Pack this group's gradients into one [n, 2] preprocessed input.
            let mut input = Vec::with_capacity(slot.coords * INPUT);
            for &m in &slot.members {
                for &g in grads[m].data() {
                    let (a, b) = preprocess_gradient(g, p);
                    input.push(a);
                    input.push(b);
                }
            }
            let x = graph.constant(Tensor::new(vec![slot.coords, INPUT], input)?);

            let out1 = graph.lstm_cell(
                x, nodes.h1, nodes.c1, nodes.phi[0], nodes.phi[1], nodes.phi[2], HIDDEN,
            )?;
            let h1 = graph.slice_cols(out1, 0, HIDDEN)?;
            let c1 = graph.slice_cols(out1, HIDDEN, HIDDEN)?;
            let out2 = graph.lstm_cell(
                h1, nodes.h2, nodes.c2, nodes.phi[3], nodes.phi[4], nodes.phi[5], HIDDEN,
            )?;
            let h2 = graph.slice_cols(out2, 0, HIDDEN)?;
            let c2 = graph.slice_cols(out2, HIDDEN, HIDDEN)?;
            nodes.h1 = h1;
            nodes.c1 = c1;
            nodes.h2 = h2;
            nodes.c2 = c2;

            let proj = graph.matmul(h2, nodes.phi[6])?;
            let proj = graph.add_bias(proj, nodes.phi[7])?;
            let update = graph.scalar_mul(proj, slot.phi.out_scale)?;

            for (&m, &off) in slot.members.iter().zip(&slot.offsets) {
                let len = self.param_shapes[m].iter().product();
                let seg = graph.slice_rows(update, off, len)?;
                let seg = graph.reshape(seg, self.param_shapes[m].clone())?;
                new_params[m] = Some(graph.add(param_nodes[m], seg)?);
            }
        }
        Ok(new_params.into_iter().map(|n| n.expect("all params updated")).collect())
    }

    /// Copy the session's current state node values back into the optimizer
    /// (the truncation-boundary detach).
    pub fn absorb_states(&mut self, graph: &Graph, session: &TapeSession) {
        for (slot, nodes) in self.slots.iter_mut().zip(&session.groups) {
            slot.states = CoordStates {
                h1: graph.value(nodes.h1).clone(),
                c1: graph.value(nodes.c1).clone(),
                h2: graph.value(nodes.h2).clone(),
                c2: graph.value(nodes.c2).clone(),
            };
        }
    }

    /// Value-space update: run one step on a throwaway graph, advance the
    /// stored states, return the updated parameters.
    pub fn apply_update(
        &mut self,
        params: &ParamSet,
        grads: &[Tensor],
        p: f64,
    ) -> Result<ParamSet> {
        let mut graph = Graph::new();
        let mut session = self.begin_window(&mut graph, false);
        let param_nodes: Vec<NodeId> =
            params.tensors().map(|t| graph.constant(t.clone())).collect();
        let new_nodes = self.step_on_graph(&mut graph, &mut session, &param_nodes, grads, p)?;
        self.absorb_states(&graph, &session);
        let tensors = new_nodes
            .iter()
            .map(|&id| graph.value(id).clone())
            .collect();
        params.with_tensors(tensors)
    }
}

/// Single-coordinate step in value space; used by the scalar-oracle tests
/// and exposes the per-coordinate contract directly.
pub fn lstm_step(
    phi: &LstmPhi,
    input: (f64, f64),
    state: &CoordStates,
) -> Result<(f64, CoordStates)> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, INPUT], vec![input.0, input.1])?);
    let phi_ids: Vec<NodeId> = phi.params.tensors().map(|t| g.constant(t.clone())).collect();
    let h1 = g.constant(state.h1.clone());
    let c1 = g.constant(state.c1.clone());
    let h2 = g.constant(state.h2.clone());
    let c2 = g.constant(state.c2.clone());
    let out1 = g.lstm_cell(x, h1, c1, phi_ids[0], phi_ids[1], phi_ids[2], HIDDEN)?;
    let h1n = g.slice_cols(out1, 0, HIDDEN)?;
    let c1n = g.slice_cols(out1, HIDDEN, HIDDEN)?;
    let out2 = g.lstm_cell(h1n, h2, c2, phi_ids[3], phi_ids[4], phi_ids[5], HIDDEN)?;
    let h2n = g.slice_cols(out2, 0, HIDDEN)?;
    let c2n = g.slice_cols(out2, HIDDEN, HIDDEN)?;
    let proj = g.matmul(h2n, phi_ids[6])?;
    let proj = g.add_bias(proj, phi_ids[7])?;
    let update = g.scalar_mul(proj, phi.out_scale)?;
    Ok((
        g.value(update).data()[0],
        CoordStates {
            h1: g.value(h1n).clone(),
            c1: g.value(c1n).clone(),
            h2: g.value(h2n).clone(),
            c2: g.value(c2n).clone(),
        },
    ))
}

/// Checkpoint format: the phi checkpoint is one ParamSet section per group,
/// each preceded by a group tag byte, after an overall header.
///
/// ```text
/// magic   4 bytes "MOPH"
/// version u32 LE  1
/// groups  u32 LE
/// group*  tag u8 (0 conv / 1 linear), section_len u64 LE, ParamSet bytes
/// ```
pub fn phi_checkpoint_bytes(opt: &GroupedMetaOptimizer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"MOPH");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(opt.slots.len() as u32).to_le_bytes());
    for slot in &opt.slots {
        out.push(match slot.group {
            ParamGroup::Conv => 0,
            ParamGroup::Linear => 1,
        });
        let section = slot.phi.params.to_bytes();
        out.extend_from_slice(&(section.len() as u64).to_le_bytes());
        out.extend_from_slice(&section);
    }
    out
}

/// Parse a phi checkpoint into (group, ParamSet) sections.
pub fn phi_checkpoint_parse(bytes: &[u8]) -> Result<Vec<(ParamGroup, ParamSet)>> {
    let err = |m: &str| Error::InvalidConfig(format!("phi checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..4] != b"MOPH" {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != 1 {
        return Err(err("unsupported version"));
    }
    let groups = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        if pos + 9 > bytes.len() {
            return Err(err("truncated section header"));
        }
        let group = match bytes[pos] {
            0 => ParamGroup::Conv,
            1 => ParamGroup::Linear,
            _ => return Err(err("bad group tag")),
        };
        let len = u64::from_le_bytes(bytes[pos + 1..pos + 9].try_into().unwrap()) as usize;
        pos += 9;
        if pos + len > bytes.len() {
            return Err(err("truncated section"));
        }
        out.push((group, ParamSet::from_bytes(&bytes[pos..pos + len])?));
        pos += len;
    }
    Ok(out)
}
