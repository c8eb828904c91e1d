//! Dense tensor math with reverse-mode differentiation over a fixed op set.
//!
//! Values are stored row-major in f64 so every reduction and log-sum-exp
//! runs at 64-bit precision. A [`Tape`] owns all values produced during a
//! forward pass; ops append nodes in topological order and [`Tape::backward`]
//! replays them once in reverse. Stochastic ops (dropout) consume an explicit
//! RNG stream so identical seeds give bitwise-identical runs.

use rand::Rng;
use std::collections::HashMap;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: {details}")]
    Invalid { op: &'static str, details: String },
    #[error("backprop requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backprop on an empty tape")]
    EmptyTape,
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    /// Uniform init on [-bound, bound] from an explicit RNG stream.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor (1-D counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul,
    Transpose,
    /// Elementwise when shapes match; rhs of shape [n] or [1, n] broadcasts
    /// over the rows of a [m, n] lhs.
    Add { broadcast_rhs: bool },
    Mul,
    MulScalar(f64),
    /// x: [T, d_in], w: [k, d_in, d_out], same padding, ceil(T/stride) frames out.
    Conv1d { stride: usize, kernel: usize, pad_left: usize },
    Gelu,
    /// inputs: x [T, d], gain [d], bias [d]; saves per-row (mean, inv_std).
    LayerNorm { saved: Vec<(f64, f64)> },
    LogSoftmax,
    Softmax,
    EmbedLookup { ids: Vec<usize> },
    DropoutMask { mask: Vec<f64> },
    ConcatTime,
    SliceTime { start: usize },
    Sum,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to `requires_grad` leaves.
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

/// Ordered record of ops; owns every tensor produced during a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, mut value: Tensor) -> NodeId {
        value.requires_grad =
            value.requires_grad || inputs.iter().any(|&i| self.nodes[i.0].value.requires_grad);
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(op: &'static str, details: String) -> TensorError {
        TensorError::ShapeMismatch { op, details }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", va.shape, vb.shape),
            ));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        // i-k-j order: streams rows of b through rows of the output.
        for i in 0..m {
            for p in 0..k {
                let aip = va.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(Op::Matmul, vec![a, b], Tensor::new(vec![m, n], out)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(Self::shape_err("transpose", format!("{:?}", v.shape)));
        }
        let (m, n) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![x], Tensor::new(vec![n, m], out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape == vb.shape {
            let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
            let shape = va.shape.clone();
            return Ok(self.push(Op::Add { broadcast_rhs: false }, vec![a, b], Tensor::new(shape, data)));
        }
        // rhs broadcast over rows: [m, n] + [n] or [1, n]
        if va.shape.len() == 2 && vb.len() == va.shape[1] {
            let (m, n) = (va.shape[0], va.shape[1]);
            let mut data = va.data.clone();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += vb.data[j];
                }
            }
            return Ok(self.push(Op::Add { broadcast_rhs: true }, vec![a, b], Tensor::new(vec![m, n], data)));
        }
        Err(Self::shape_err(
            "add",
            format!("{:?} + {:?}", va.shape, vb.shape),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} * {:?}", va.shape, vb.shape),
            ));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let shape = va.shape.clone();
        Ok(self.push(Op::Mul, vec![a, b], Tensor::new(shape, data)))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data.iter().map(|a| a * c).collect();
        let shape = v.shape.clone();
        Ok(self.push(Op::MulScalar(c), vec![x], Tensor::new(shape, data)))
    }

    /// 1-D convolution over time with same padding: output length ceil(T/stride).
    /// x: [T, d_in], w: [kernel, d_in, d_out].
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if stride < 1 {
            return Err(TensorError::Invalid { op: "conv1d", details: "stride must be >= 1".into() });
        }
        if vx.shape.len() != 2 || vw.shape.len() != 3 || vx.shape[1] != vw.shape[1] {
            return Err(Self::shape_err(
                "conv1d",
                format!("x {:?}, w {:?}", vx.shape, vw.shape),
            ));
        }
        let (t_in, d_in) = (vx.shape[0], vx.shape[1]);
        let (kernel, _, d_out) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        if t_in == 0 {
            return Err(TensorError::Invalid { op: "conv1d", details: "empty time axis".into() });
        }
        let t_out = t_in.div_ceil(stride);
        let total_pad = ((t_out - 1) * stride + kernel).saturating_sub(t_in);
        let pad_left = total_pad / 2;
        let mut out = vec![0.0; t_out * d_out];
        for t in 0..t_out {
            for k in 0..kernel {
                let src = (t * stride + k) as isize - pad_left as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let xrow = &vx.data[src as usize * d_in..(src as usize + 1) * d_in];
                let orow = &mut out[t * d_out..(t + 1) * d_out];
                for i in 0..d_in {
                    let xv = xrow[i];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &vw.data[(k * d_in + i) * d_out..(k * d_in + i + 1) * d_out];
                    for o in 0..d_out {
                        orow[o] += xv * wrow[o];
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv1d { stride, kernel, pad_left },
            vec![x, w],
            Tensor::new(vec![t_out, d_out], out),
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v
            .data
            .iter()
            .map(|&a| 0.5 * a * (1.0 + (GELU_A * (a + GELU_B * a * a * a)).tanh()))
            .collect();
        let shape = v.shape.clone();
        Ok(self.push(Op::Gelu, vec![x], Tensor::new(shape, data)))
    }

    /// Row-wise layer norm with affine gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        if vg.len() != d || vb.len() != d || vx.shape.len() != 2 {
            return Err(Self::shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape, vg.shape, vb.shape),
            ));
        }
        let rows = vx.rows();
        let mut out = vec![0.0; rows * d];
        let mut saved = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            saved.push((mean, inv_std));
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * vg.data[j] + vb.data[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm { saved },
            vec![x, gain, bias],
            Tensor::new(vec![rows, d], out),
        ))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(Self::shape_err("log_softmax", format!("{:?}", v.shape)));
        }
        let (rows, d) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &v.data[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            for j in 0..d {
                out[r * d + j] = row[j] - lse;
            }
        }
        Ok(self.push(Op::LogSoftmax, vec![x], Tensor::new(vec![rows, d], out)))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(Self::shape_err("softmax", format!("{:?}", v.shape)));
        }
        let (rows, d) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &v.data[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[r * d + j] /= sum;
            }
        }
        Ok(self.push(Op::Softmax, vec![x], Tensor::new(vec![rows, d], out)))
    }

    /// Gather rows of `table` ([v, d]) at `ids`.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        if v.shape.len() != 2 {
            return Err(Self::shape_err("embed_lookup", format!("{:?}", v.shape)));
        }
        let (vocab, d) = (v.shape[0], v.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embed_lookup",
                details: format!("id {bad} out of range for table with {vocab} rows"),
            });
        }
        let mut out = vec![0.0; ids.len() * d];
        for (r, &i) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&v.data[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::EmbedLookup { ids: ids.to_vec() },
            vec![table],
            Tensor::new(vec![ids.len(), d], out),
        ))
    }

    /// Inverted dropout: keeps each element with probability 1-rate, scaling
    /// survivors by 1/(1-rate). The mask is drawn from the explicit stream.
    pub fn dropout_mask(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout_mask",
                details: format!("rate {rate} outside [0, 1)"),
            });
        }
        let v = self.value(x);
        if rate == 0.0 {
            let t = v.clone();
            return Ok(self.push(Op::DropoutMask { mask: vec![1.0; t.len()] }, vec![x], t));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = v.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape.clone();
        Ok(self.push(Op::DropoutMask { mask }, vec![x], Tensor::new(shape, data)))
    }

    /// Stack `a` over `b` along the time (row) axis.
    pub fn concat_time(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[1] {
            return Err(Self::shape_err(
                "concat_time",
                format!("{:?} ++ {:?}", va.shape, vb.shape),
            ));
        }
        let d = va.shape[1];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let rows = va.shape[0] + vb.shape[0];
        Ok(self.push(Op::ConcatTime, vec![a, b], Tensor::new(vec![rows, d], data)))
    }

    pub fn slice_time(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape.len() != 2 || start + len > v.shape[0] {
            return Err(Self::shape_err(
                "slice_time",
                format!("[{start}..{}] of {:?}", start + len, v.shape),
            ));
        }
        let d = v.shape[1];
        let data = v.data[start * d..(start + len) * d].to_vec();
        Ok(self.push(Op::SliceTime { start }, vec![x], Tensor::new(vec![len, d], data)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let total: f64 = v.data.iter().sum();
        Ok(self.push(Op::Sum, vec![x], Tensor::scalar(total)))
    }

    /// Backprop from a scalar loss; returns gradients for requires_grad leaves.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss(v.shape.clone()));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Backprop seeding `node` with an externally computed upstream gradient
    /// (used to compose with losses evaluated outside the tape).
    pub fn backward_seeded(&self, node: NodeId, seed: Vec<f64>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        assert_eq!(seed.len(), self.value(node).len(), "seed gradient length mismatch");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[node.0] = Some(seed);
        // Reverse topological sweep: each node is visited exactly once.
        for idx in (0..=node.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let n = &self.nodes[idx];
            if !n.value.requires_grad {
                continue;
            }
            if matches!(n.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            self.accumulate_inputs(idx, &gout, &mut grads);
        }
        let mut map = HashMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[idx].op, Op::Leaf) && self.nodes[idx].value.requires_grad {
                    let shape = self.nodes[idx].value.shape.clone();
                    map.insert(NodeId(idx), Tensor::new(shape, g));
                }
            }
        }
        Ok(Gradients { grads: map })
    }

    fn accumulate_inputs(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let n = &self.nodes[idx];
        let needs: Vec<bool> = n
            .inputs
            .iter()
            .map(|&i| self.nodes[i.0].value.requires_grad)
            .collect();
        let mut add_to = |slot: usize, contrib: Vec<f64>| {
            let target = n.inputs[slot].0;
            match &mut grads[target] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                None => grads[target] = Some(contrib),
            }
        };
        match &n.op {
            Op::Leaf => {}
            Op::Matmul => {
                let va = self.value(n.inputs[0]);
                let vb = self.value(n.inputs[1]);
                let (m, k, nn) = (va.shape[0], va.shape[1], vb.shape[1]);
                if needs[0] {
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let brow = &vb.data[p * nn..(p + 1) * nn];
                            let grow = &gout[i * nn..(i + 1) * nn];
                            for j in 0..nn {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    add_to(0, da);
                }
                if needs[1] {
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * nn];
                    for i in 0..m {
                        let grow = &gout[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let aip = va.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * nn..(p + 1) * nn];
                            for j in 0..nn {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                    add_to(1, db);
                }
            }
            Op::Transpose => {
                if needs[0] {
                    let v = &n.value;
                    let (m, nn) = (v.shape[0], v.shape[1]); // output is [m, nn]
                    let mut dx = vec![0.0; m * nn];
                    for i in 0..m {
                        for j in 0..nn {
                            dx[j * m + i] = gout[i * nn + j];
                        }
                    }
                    add_to(0, dx);
                }
            }
            Op::Add { broadcast_rhs } => {
                if needs[0] {
                    add_to(0, gout.to_vec());
                }
                if needs[1] {
                    if *broadcast_rhs {
                        let nn = self.value(n.inputs[1]).len();
                        let rows = gout.len() / nn;
                        let mut db = vec![0.0; nn];
                        for r in 0..rows {
                            for j in 0..nn {
                                db[j] += gout[r * nn + j];
                            }
                        }
                        add_to(1, db);
                    } else {
                        add_to(1, gout.to_vec());
                    }
                }
            }
            Op::Mul => {
                let va = self.value(n.inputs[0]);
                let vb = self.value(n.inputs[1]);
                if needs[0] {
                    add_to(0, gout.iter().zip(&vb.data).map(|(g, b)| g * b).collect());
                }
                if needs[1] {
                    add_to(1, gout.iter().zip(&va.data).map(|(g, a)| g * a).collect());
                }
            }
            Op::MulScalar(c) => {
                if needs[0] {
                    add_to(0, gout.iter().map(|g| g * c).collect());
                }
            }
            Op::Conv1d { stride, kernel, pad_left } => {
                let vx = self.value(n.inputs[0]);
                let vw = self.value(n.inputs[1]);
                let (t_in, d_in) = (vx.shape[0], vx.shape[1]);
                let d_out = vw.shape[2];
                let t_out = n.value.shape[0];
                if needs[0] {
                    let mut dx = vec![0.0; t_in * d_in];
                    for t in 0..t_out {
                        let grow = &gout[t * d_out..(t + 1) * d_out];
                        for k in 0..*kernel {
                            let src = (t * stride + k) as isize - *pad_left as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let drow = &mut dx[src as usize * d_in..(src as usize + 1) * d_in];
                            for i in 0..d_in {
                                let wrow = &vw.data[(k * d_in + i) * d_out..(k * d_in + i + 1) * d_out];
                                let mut acc = 0.0;
                                for o in 0..d_out {
                                    acc += grow[o] * wrow[o];
                                }
                                drow[i] += acc;
                            }
                        }
                    }
                    add_to(0, dx);
                }
                if needs[1] {
                    let mut dw = vec![0.0; vw.len()];
                    for t in 0..t_out {
                        let grow = &gout[t * d_out..(t + 1) * d_out];
                        for k in 0..*kernel {
                            let src = (t * stride + k) as isize - *pad_left as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let xrow = &vx.data[src as usize * d_in..(src as usize + 1) * d_in];
                            for i in 0..d_in {
                                let xv = xrow[i];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &mut dw[(k * d_in + i) * d_out..(k * d_in + i + 1) * d_out];
                                for o in 0..d_out {
                                    wrow[o] += xv * grow[o];
                                }
                            }
                        }
                    }
                    add_to(1, dw);
                }
            }
            Op::Gelu => {
                if needs[0] {
                    let vx = self.value(n.inputs[0]);
                    let dx = vx
                        .data
                        .iter()
                        .zip(gout)
                        .map(|(&a, g)| {
                            let u = GELU_A * (a + GELU_B * a * a * a);
                            let th = u.tanh();
                            let d = 0.5 * (1.0 + th)
                                + 0.5 * a * (1.0 - th * th) * GELU_A * (1.0 + 3.0 * GELU_B * a * a);
                            g * d
                        })
                        .collect();
                    add_to(0, dx);
                }
            }
            Op::LayerNorm { saved } => {
                let vx = self.value(n.inputs[0]);
                let vg = self.value(n.inputs[1]);
                let d = vx.shape[1];
                let rows = vx.shape[0];
                let mut dx = vec![0.0; vx.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let (mean, inv_std) = saved[r];
                    let xrow = &vx.data[r * d..(r + 1) * d];
                    let grow = &gout[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let dxhat = grow[j] * vg.data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let dxhat = grow[j] * vg.data[j];
                        dx[r * d + j] =
                            inv_std * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                if needs[0] {
                    add_to(0, dx);
                }
                if needs[1] {
                    add_to(1, dgain);
                }
                if needs[2] {
                    add_to(2, dbias);
                }
            }
            Op::LogSoftmax => {
                if needs[0] {
                    let vy = &n.value;
                    let (rows, d) = (vy.shape[0], vy.shape[1]);
                    let mut dx = vec![0.0; vy.len()];
                    for r in 0..rows {
                        let grow = &gout[r * d..(r + 1) * d];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..d {
                            dx[r * d + j] = grow[j] - vy.data[r * d + j].exp() * gsum;
                        }
                    }
                    add_to(0, dx);
                }
            }
            Op::Softmax => {
                if needs[0] {
                    let vy = &n.value;
                    let (rows, d) = (vy.shape[0], vy.shape[1]);
                    let mut dx = vec![0.0; vy.len()];
                    for r in 0..rows {
                        let grow = &gout[r * d..(r + 1) * d];
                        let yrow = &vy.data[r * d..(r + 1) * d];
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..d {
                            dx[r * d + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    add_to(0, dx);
                }
            }
            Op::EmbedLookup { ids } => {
                if needs[0] {
                    let vt = self.value(n.inputs[0]);
                    let d = vt.shape[1];
                    let mut dt = vec![0.0; vt.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += gout[r * d + j];
                        }
                    }
                    add_to(0, dt);
                }
            }
            Op::DropoutMask { mask } => {
                if needs[0] {
                    add_to(0, gout.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
            }
            Op::ConcatTime => {
                let la = self.value(n.inputs[0]).len();
                if needs[0] {
                    add_to(0, gout[..la].to_vec());
                }
                if needs[1] {
                    add_to(1, gout[la..].to_vec());
                }
            }
            Op::SliceTime { start } => {
                if needs[0] {
                    let vx = self.value(n.inputs[0]);
                    let d = vx.shape[1];
                    let mut dx = vec![0.0; vx.len()];
                    dx[start * d..start * d + gout.len()].copy_from_slice(gout);
                    add_to(0, dx);
                }
            }
            Op::Sum => {
                if needs[0] {
                    let len = self.value(n.inputs[0]).len();
                    add_to(0, vec![gout[0]; len]);
                }
            }
        }
    }
}

/// Central finite differences of a scalar-valued function: the independent
/// oracle for gradient checks. `f` must be pure and deterministic.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&probe);
        probe.data[i] = orig - eps;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape.to_vec(), grad)
}

/// Max relative error between `got` and `want`, guarded for tiny magnitudes.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(g.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let x = tape.leaf(Tensor::new(vec![3, 2], (0..6).map(|v| v as f64).collect()));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn log_softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![0.0; 4]));
        let y = tape.log_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - (-(4.0f64).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_stride_two_length() {
        let mut tape = Tape::new();
        let mut r = rng(0);
        let x = tape.leaf(Tensor::uniform(vec![10, 3], 1.0, &mut r));
        let w = tape.leaf(Tensor::uniform(vec![7, 3, 4], 0.5, &mut r));
        let y = tape.conv1d(x, w, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[5, 4]);
        let x2 = tape.leaf(Tensor::uniform(vec![101, 3], 1.0, &mut r));
        let y2 = tape.conv1d(x2, w, 2).unwrap();
        assert_eq!(tape.value(y2).shape(), &[51, 4]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backprop_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).with_grad());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backprop_dot_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, -0.5]).with_grad());
        let xt = tape.transpose(x).unwrap();
        let dot = tape.matmul(x, xt).unwrap();
        let grads = tape.backward(dot).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, -1.0]);
    }

    #[test]
    fn backprop_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn finite_diff_on_sum_and_quadratic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let g = finite_diff_grad(&mut |t| t.data().iter().sum(), &x, 1e-3);
        assert!(max_rel_err(g.data(), &[1.0, 1.0]) < 1e-9);
        let g2 = finite_diff_grad(
            &mut |t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-3,
        );
        assert!(max_rel_err(g2.data(), &[1.0, 2.0]) < 1e-6);
    }

    /// Three-layer net gradient vs the finite-difference oracle.
    #[test]
    fn three_layer_net_matches_finite_differences() {
        let mut r = rng(7);
        let x0 = Tensor::uniform(vec![4, 5], 1.0, &mut r);
        let w1 = Tensor::uniform(vec![5, 6], 0.6, &mut r);
        let b1 = Tensor::uniform(vec![6], 0.2, &mut r);
        let w2 = Tensor::uniform(vec![6, 6], 0.6, &mut r);
        let g2 = Tensor::uniform(vec![6], 0.5, &mut r);
        let c2 = Tensor::uniform(vec![6], 0.2, &mut r);
        let w3 = Tensor::uniform(vec![6, 3], 0.6, &mut r);

        let run = |x0v: &Tensor, w1v: &Tensor, w2v: &Tensor, w3v: &Tensor| -> (Tape, NodeId, [NodeId; 4]) {
            let mut tape = Tape::new();
            let x = tape.leaf(x0v.clone().with_grad());
            let w1n = tape.leaf(w1v.clone().with_grad());
            let b1n = tape.leaf(b1.clone());
            let w2n = tape.leaf(w2v.clone().with_grad());
            let g2n = tape.leaf(g2.clone());
            let c2n = tape.leaf(c2.clone());
            let w3n = tape.leaf(w3v.clone().with_grad());
            let h1 = tape.matmul(x, w1n).unwrap();
            let h1 = tape.add(h1, b1n).unwrap();
            let h1 = tape.gelu(h1).unwrap();
            let h2 = tape.matmul(h1, w2n).unwrap();
            let h2 = tape.layer_norm(h2, g2n, c2n).unwrap();
            let h3 = tape.matmul(h2, w3n).unwrap();
            let h3 = tape.log_softmax(h3).unwrap();
            let loss = tape.sum(h3).unwrap();
            let loss = tape.mul_scalar(loss, 0.25).unwrap();
            (tape, loss, [x, w1n, w2n, w3n])
        };

        let (tape, loss, ids) = run(&x0, &w1, &w2, &w3);
        let grads = tape.backward(loss).unwrap();

        let params: [&Tensor; 4] = [&x0, &w1, &w2, &w3];
        for (slot, want) in params.iter().enumerate() {
            let fd = finite_diff_grad(
                &mut |p| {
                    let mut args: Vec<Tensor> = params.iter().map(|t| (*t).clone()).collect();
                    args[slot] = p.clone();
                    let (tape, loss, _) = run(&args[0], &args[1], &args[2], &args[3]);
                    tape.value(loss).data()[0]
                },
                want,
                1e-3,
            );
            let got = grads.get(ids[slot]).unwrap();
            let err = max_rel_err(got.data(), fd.data());
            assert!(err < 1e-3, "slot {slot}: rel err {err}");
        }
    }

    #[test]
    fn forward_and_grad_deterministic() {
        let build = || {
            let mut r = rng(99);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::uniform(vec![6, 4], 1.0, &mut r).with_grad());
            let d = tape.dropout_mask(x, 0.3, &mut r).unwrap();
            let g = tape.gelu(d).unwrap();
            let s = tape.sum(g).unwrap();
            let grads = tape.backward(s).unwrap();
            (
                tape.value(s).data().to_vec(),
                grads.get(x).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn embed_lookup_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).with_grad());
        let out = tape.embed_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(out).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = tape.sum(out).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![5., 6.]));
        let c = tape.concat_time(a, b).unwrap();
        let back = tape.slice_time(c, 2, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[5., 6.]);
    }

    proptest! {
        #[test]
        fn exp_log_softmax_rows_sum_to_one(vals in proptest::collection::vec(-20.0f64..20.0, 8)) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![2, 4], vals));
            let y = tape.log_softmax(x).unwrap();
            let v = tape.value(y);
            for r in 0..2 {
                let s: f64 = v.data()[r * 4..(r + 1) * 4].iter().map(|a| a.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn add_commutes(vals in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![2, 3], vals.clone()));
            let b = tape.leaf(Tensor::new(vec![2, 3], vals.iter().rev().cloned().collect()));
            let ab = tape.add(a, b).unwrap();
            let ba = tape.add(b, a).unwrap();
            prop_assert_eq!(tape.value(ab).data(), tape.value(ba).data());
        }
    }
}
