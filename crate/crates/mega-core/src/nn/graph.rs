use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::{axpy, matmul_nn, matmul_nt, matmul_tn, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_S: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    /// a[m,k] * b[k,n]
    Matmul(NodeId, NodeId),
    /// a[m,k] * b[n,k]^T
    MatmulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x[m,n] + b[n], broadcast over rows
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    /// x * s where s is a [1] node
    MulScalar(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    GatherRows {
        src: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        src: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    MeanRows(NodeId),
    Reshape(NodeId),
    /// Rebuild an N-row sequence: visible rows come from `encoded` in order,
    /// hidden rows are the broadcast mask-token vector.
    AssembleVisible {
        encoded: Option<NodeId>,
        mask_token: NodeId,
        visible: Vec<bool>,
    },
    /// Mean of -log softmax(logits)[target] over rows with include=true.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        include: Vec<bool>,
    },
    /// 6 reals -> 3x3 rotation via Gram-Schmidt; columns (a, b, a x b).
    Rot6d(NodeId),
    /// Frobenius norm of (x - target), scalar output.
    FrobeniusDist {
        x: NodeId,
        target: Tensor,
    },
    /// Mean over selected rows of the L1 distance to target rows.
    L1Masked {
        x: NodeId,
        target: Tensor,
        rows: Vec<bool>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to every parameter in a `ParamSet`.
pub struct Gradients {
    pub by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients {
            by_param: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.by_param[i].as_ref()
    }

    /// acc += scale * other, merging lazily allocated entries.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(s) = src {
                match dst {
                    Some(d) => axpy(&mut d.data, scale, &s.data),
                    None => {
                        let mut t = Tensor::zeros(&s.shape);
                        axpy(&mut t.data, scale, &s.data);
                        *dst = Some(t);
                    }
                }
            }
        }
    }
}

/// A single-use computation tape over shared immutable parameters.
///
/// Values are computed eagerly as nodes are pushed; `backward` walks the
/// tape in reverse and returns per-parameter gradients.
pub struct Graph<'a> {
    params: &'a ParamSet,
    nodes: Vec<Node>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        let value = self.params.value(index).clone();
        self.push(Op::Param(index), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {} vs {}",
                k, k2
            )));
        }
        let data = matmul_nn(&va.data, &vb.data, m, k, n);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_vec(&[m, n], data)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dims {} vs {}",
                k, k2
            )));
        }
        let data = matmul_nt(&va.data, &vb.data, m, k, n);
        Ok(self.push(Op::MatmulNT(a, b), Tensor::from_vec(&[m, n], data)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).check_same_shape(self.value(b))?;
        let shape = self.value(a).shape.clone();
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(&shape, data)))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rank() != 1 || vb.cols() != vx.cols() {
            return Err(Error::Shape(format!(
                "bias shape {:?} for input {:?}",
                vb.shape, vx.shape
            )));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vx.data.clone();
        for i in 0..m {
            axpy(&mut data[i * n..(i + 1) * n], 1.0, &vb.data);
        }
        let shape = vx.shape.clone();
        Ok(self.push(Op::AddBias(x, b), Tensor::from_vec(&shape, data)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let t = Tensor::from_vec(&v.shape.clone(), v.data.iter().map(|a| a * c).collect());
        self.push(Op::Scale(x, c), t)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = self.value(x);
        let t = Tensor::from_vec(&v.shape.clone(), v.data.iter().map(|a| a * sv).collect());
        self.push(Op::MulScalar(x, s), t)
    }

    /// Per last axis: (x - mean) / sqrt(var + eps) * gain + bias, var with 1/d.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        if vg.cols() != d || vb.cols() != d || vg.rank() != 1 || vb.rank() != 1 {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} for input {:?}",
                vg.shape, vb.shape, vx.shape
            )));
        }
        let m = vx.rows();
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &vx.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * vg.data[j] + vb.data[j];
            }
        }
        let shape = vx.shape.clone();
        Ok(self.push(
            Op::LayerNorm { x, gain, bias },
            Tensor::from_vec(&shape, out),
        ))
    }

    /// tanh-form GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v
            .data
            .iter()
            .map(|&a| 0.5 * a * (1.0 + (GELU_S * (a + GELU_C * a * a * a)).tanh()))
            .collect();
        let shape = v.shape.clone();
        self.push(Op::Gelu(x), Tensor::from_vec(&shape, data))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&v.data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let shape = v.shape.clone();
        self.push(Op::SoftmaxRows(x), Tensor::from_vec(&shape, out))
    }

    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(src);
        let n = v.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        self.push(
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            Tensor::from_vec(&[idx.len(), n], data),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::Shape(format!(
                    "concat_rows widths {} vs {}",
                    n,
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_vec(&[rows, n], data),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != m {
                return Err(Error::Shape(format!(
                    "concat_cols heights {} vs {}",
                    m,
                    v.rows()
                )));
            }
            total += v.cols();
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.cols();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_vec(&[m, total], data),
        ))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(src);
        let n = v.cols();
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let data = v.data[start * n..(start + len) * n].to_vec();
        self.push(
            Op::SliceRows { src, start, len },
            Tensor::from_vec(&[len, n], data),
        )
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(src);
        let (m, n) = (v.rows(), v.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&v.data[i * n + start..i * n + start + len]);
        }
        self.push(
            Op::SliceCols { src, start, len },
            Tensor::from_vec(&[m, len], data),
        )
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            axpy(&mut data, 1.0, v.row(i));
        }
        for d in &mut data {
            *d /= m as f64;
        }
        self.push(Op::MeanRows(x), Tensor::from_vec(&[1, n], data))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x);
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            v.shape,
            shape
        );
        let t = Tensor::from_vec(shape, v.data.clone());
        self.push(Op::Reshape(x), t)
    }

    /// Rebuild the full-length sequence before the decoder: encoded rows are
    /// placed at visible slots, the mask token fills hidden slots.
    pub fn assemble_visible(
        &mut self,
        encoded: Option<NodeId>,
        mask_token: NodeId,
        visible: &[bool],
    ) -> Result<NodeId> {
        let mvec = self.value(mask_token);
        if mvec.rank() != 1 {
            return Err(Error::Shape("mask token must be a vector".into()));
        }
        let d = mvec.cols();
        let n_visible = visible.iter().filter(|v| **v).count();
        if let Some(e) = encoded {
            let ve = self.value(e);
            if ve.rows() != n_visible || ve.cols() != d {
                return Err(Error::Shape(format!(
                    "assemble expects [{}, {}] encoded rows, got {:?}",
                    n_visible, d, ve.shape
                )));
            }
        } else if n_visible != 0 {
            return Err(Error::Shape(
                "visible slots present but no encoded rows supplied".into(),
            ));
        }
        let n = visible.len();
        let mut data = vec![0.0; n * d];
        let mut cursor = 0;
        for (i, &vis) in visible.iter().enumerate() {
            let row = &mut data[i * d..(i + 1) * d];
            if vis {
                row.copy_from_slice(self.value(encoded.unwrap()).row(cursor));
                cursor += 1;
            } else {
                row.copy_from_slice(&self.value(mask_token).data);
            }
        }
        Ok(self.push(
            Op::AssembleVisible {
                encoded,
                mask_token,
                visible: visible.to_vec(),
            },
            Tensor::from_vec(&[n, d], data),
        ))
    }

    /// Mean over included rows of -log softmax(logits)[target], stabilized by
    /// max subtraction. Errors if no row is included.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        include: &[bool],
    ) -> Result<NodeId> {
        let v = self.value(logits);
        let (m, s) = (v.rows(), v.cols());
        if targets.len() != m || include.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows, {} targets, {} mask entries",
                m,
                targets.len(),
                include.len()
            )));
        }
        if !include.iter().any(|&b| b) {
            return Err(Error::EmptyLoss);
        }
        for &t in targets {
            if t as usize >= s {
                return Err(Error::InvalidToken {
                    index: t,
                    size: s as u32,
                });
            }
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..m {
            if !include[i] {
                continue;
            }
            let row = v.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[targets[i] as usize];
            count += 1;
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
            },
            value,
        ))
    }

    /// Gram-Schmidt 6D-to-rotation. Output is the 3x3 matrix (row-major) with
    /// columns a = normalize(r123), b = normalize(r456 - (a.r456)a), c = a x b.
    pub fn rot6d(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.len() != 6 {
            return Err(Error::Shape(format!("rot6d expects 6 values, got {:?}", v.shape)));
        }
        let r = rot6d_forward(&v.data)?;
        Ok(self.push(Op::Rot6d(x), Tensor::from_vec(&[3, 3], r.to_vec())))
    }

    pub fn frobenius_dist(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        self.value(x).check_same_shape(&target)?;
        let d = self
            .value(x)
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(self.push(Op::FrobeniusDist { x, target }, Tensor::scalar(d)))
    }

    /// Mean over selected rows of sum_j |x[i,j] - target[i,j]|.
    /// Yields exactly 0 (with zero gradient) when no row is selected.
    pub fn l1_masked(&mut self, x: NodeId, target: Tensor, rows: &[bool]) -> Result<NodeId> {
        let v = self.value(x);
        v.check_same_shape(&target)?;
        if rows.len() != v.rows() {
            return Err(Error::Shape("l1_masked row mask length".into()));
        }
        let n = v.cols();
        let count = rows.iter().filter(|r| **r).count();
        let mut total = 0.0;
        for (i, &on) in rows.iter().enumerate() {
            if !on {
                continue;
            }
            for j in 0..n {
                total += (v.data[i * n + j] - target.data[i * n + j]).abs();
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Op::L1Masked {
                x,
                target,
                rows: rows.to_vec(),
            },
            Tensor::scalar(value),
        ))
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros(self.params.len());

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param(p) => match &mut out.by_param[*p] {
                    Some(acc) => axpy(&mut acc.data, 1.0, &g.data),
                    slot @ None => *slot = Some(g.clone()),
                },
                Op::Matmul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    let da = matmul_nt(&g.data, &vb.data, m, n, k);
                    let db = matmul_tn(&va.data, &g.data, k, m, n);
                    accumulate(&mut node_grads, *a, &va.shape.clone(), &da);
                    accumulate(&mut node_grads, *b, &vb.shape.clone(), &db);
                }
                Op::MatmulNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                    let da = matmul_nn(&g.data, &vb.data, m, n, k);
                    let db = matmul_tn(&g.data, &va.data, n, m, k);
                    accumulate(&mut node_grads, *a, &va.shape.clone(), &da);
                    accumulate(&mut node_grads, *b, &vb.shape.clone(), &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads, *a, &g.shape, &g.data);
                    accumulate(&mut node_grads, *b, &g.shape, &g.data);
                }
                Op::AddBias(x, b) => {
                    accumulate(&mut node_grads, *x, &g.shape, &g.data);
                    let n = self.value(*b).cols();
                    let mut db = vec![0.0; n];
                    for i in 0..g.rows() {
                        axpy(&mut db, 1.0, &g.data[i * n..(i + 1) * n]);
                    }
                    accumulate(&mut node_grads, *b, &[n], &db);
                }
                Op::Scale(x, c) => {
                    let dx: Vec<f64> = g.data.iter().map(|v| v * c).collect();
                    accumulate(&mut node_grads, *x, &g.shape, &dx);
                }
                Op::MulScalar(x, s) => {
                    let sv = self.value(*s).item();
                    let vx = self.value(*x);
                    let dx: Vec<f64> = g.data.iter().map(|v| v * sv).collect();
                    let ds = g
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(gv, xv)| gv * xv)
                        .sum::<f64>();
                    accumulate(&mut node_grads, *x, &g.shape, &dx);
                    accumulate(&mut node_grads, *s, &[1], &[ds]);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let vx = self.value(*x);
                    let vg = self.value(*gain);
                    let (m, d) = (vx.rows(), vx.cols());
                    let mut dx = vec![0.0; m * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..m {
                        let row = &vx.data[i * d..(i + 1) * d];
                        let grow = &g.data[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = grow[j] * vg.data[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgain[j] += grow[j] * xhat;
                            dbias[j] += grow[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = grow[j] * vg.data[j];
                            dx[i * d + j] = rstd
                                * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut node_grads, *x, &vx.shape.clone(), &dx);
                    accumulate(&mut node_grads, *gain, &[d], &dgain);
                    accumulate(&mut node_grads, *bias, &[d], &dbias);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let dx: Vec<f64> = vx
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&a, &gv)| {
                            let inner = GELU_S * (a + GELU_C * a * a * a);
                            let t = inner.tanh();
                            let sech2 = 1.0 - t * t;
                            gv * (0.5 * (1.0 + t)
                                + 0.5 * a * sech2 * GELU_S * (1.0 + 3.0 * GELU_C * a * a))
                        })
                        .collect();
                    accumulate(&mut node_grads, *x, &vx.shape.clone(), &dx);
                }
                Op::SoftmaxRows(x) => {
                    let p = &self.nodes[id].value;
                    let (m, n) = (p.rows(), p.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let prow = p.row(i);
                        let grow = &g.data[i * n..(i + 1) * n];
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut node_grads, *x, &p.shape.clone(), &dx);
                }
                Op::GatherRows { src, idx } => {
                    let vs = self.value(*src);
                    let n = vs.cols();
                    let mut ds = vec![0.0; vs.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut ds[i * n..(i + 1) * n], 1.0, &g.data[r * n..(r + 1) * n]);
                    }
                    accumulate(&mut node_grads, *src, &vs.shape.clone(), &ds);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let v = self.value(p);
                        let len = v.len();
                        let shape = v.shape.clone();
                        accumulate(&mut node_grads, p, &shape, &g.data[off..off + len]);
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let v = self.value(p);
                        let w = v.cols();
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data[i * total + off..i * total + off + w]);
                        }
                        let shape = v.shape.clone();
                        accumulate(&mut node_grads, p, &shape, &dp);
                        off += w;
                    }
                }
                Op::SliceRows { src, start, len } => {
                    let vs = self.value(*src);
                    let n = vs.cols();
                    let mut ds = vec![0.0; vs.len()];
                    ds[start * n..(start + len) * n].copy_from_slice(&g.data);
                    accumulate(&mut node_grads, *src, &vs.shape.clone(), &ds);
                }
                Op::SliceCols { src, start, len } => {
                    let vs = self.value(*src);
                    let (m, n) = (vs.rows(), vs.cols());
                    let mut ds = vec![0.0; vs.len()];
                    for i in 0..m {
                        ds[i * n + start..i * n + start + len]
                            .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut node_grads, *src, &vs.shape.clone(), &ds);
                }
                Op::MeanRows(x) => {
                    let vx = self.value(*x);
                    let (m, n) = (vx.rows(), vx.cols());
                    let mut dx = vec![0.0; m * n];
                    let inv = 1.0 / m as f64;
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g.data[j] * inv;
                        }
                    }
                    accumulate(&mut node_grads, *x, &vx.shape.clone(), &dx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape.clone();
                    accumulate(&mut node_grads, *x, &shape, &g.data);
                }
                Op::AssembleVisible {
                    encoded,
                    mask_token,
                    visible,
                } => {
                    let d = self.value(*mask_token).cols();
                    let mut dmask = vec![0.0; d];
                    let mut denc = encoded.map(|e| vec![0.0; self.value(e).len()]);
                    let mut cursor = 0;
                    for (i, &vis) in visible.iter().enumerate() {
                        let grow = &g.data[i * d..(i + 1) * d];
                        if vis {
                            let de = denc.as_mut().unwrap();
                            axpy(&mut de[cursor * d..(cursor + 1) * d], 1.0, grow);
                            cursor += 1;
                        } else {
                            axpy(&mut dmask, 1.0, grow);
                        }
                    }
                    accumulate(&mut node_grads, *mask_token, &[d], &dmask);
                    if let (Some(e), Some(de)) = (encoded, denc) {
                        let shape = self.value(*e).shape.clone();
                        accumulate(&mut node_grads, *e, &shape, &de);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    include,
                } => {
                    let v = self.value(*logits);
                    let (m, s) = (v.rows(), v.cols());
                    let count = include.iter().filter(|b| **b).count() as f64;
                    let scale = g.item() / count;
                    let mut dl = vec![0.0; m * s];
                    for i in 0..m {
                        if !include[i] {
                            continue;
                        }
                        let row = v.row(i);
                        let drow = &mut dl[i * s..(i + 1) * s];
                        softmax_into(row, drow);
                        for dv in drow.iter_mut() {
                            *dv *= scale;
                        }
                        drow[targets[i] as usize] -= scale;
                    }
                    accumulate(&mut node_grads, *logits, &v.shape.clone(), &dl);
                }
                Op::Rot6d(x) => {
                    let vx = self.value(*x);
                    let dx = rot6d_backward(&vx.data, &g.data);
                    accumulate(&mut node_grads, *x, &vx.shape.clone(), &dx);
                }
                Op::FrobeniusDist { x, target } => {
                    let vx = self.value(*x);
                    let dist = self.nodes[id].value.item().max(1e-12);
                    let scale = g.item() / dist;
                    let dx: Vec<f64> = vx
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(a, b)| scale * (a - b))
                        .collect();
                    accumulate(&mut node_grads, *x, &vx.shape.clone(), &dx);
                }
                Op::L1Masked { x, target, rows } => {
                    let vx = self.value(*x);
                    let n = vx.cols();
                    let count = rows.iter().filter(|r| **r).count();
                    if count > 0 {
                        let scale = g.item() / count as f64;
                        let mut dx = vec![0.0; vx.len()];
                        for (i, &on) in rows.iter().enumerate() {
                            if !on {
                                continue;
                            }
                            for j in 0..n {
                                let diff = vx.data[i * n + j] - target.data[i * n + j];
                                dx[i * n + j] = if diff > 0.0 {
                                    scale
                                } else if diff < 0.0 {
                                    -scale
                                } else {
                                    0.0
                                };
                            }
                        }
                        accumulate(&mut node_grads, *x, &vx.shape.clone(), &dx);
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: &[f64]) {
    match &mut grads[id.0] {
        Some(t) => axpy(&mut t.data, 1.0, delta),
        slot @ None => {
            *slot = Some(Tensor::from_vec(shape, delta.to_vec()));
        }
    }
}

pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Row-major 3x3 with columns (a, b, c).
pub(crate) fn rot6d_forward(r: &[f64]) -> Result<[f64; 9]> {
    let u = &r[0..3];
    let v = &r[3..6];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if nu < 1e-8 {
        return Err(Error::DegenerateRotation(format!(
            "first column norm {:.3e}",
            nu
        )));
    }
    let a = [u[0] / nu, u[1] / nu, u[2] / nu];
    let av = a[0] * v[0] + a[1] * v[1] + a[2] * v[2];
    let w = [v[0] - av * a[0], v[1] - av * a[1], v[2] - av * a[2]];
    let nw = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if nw < 1e-8 {
        return Err(Error::DegenerateRotation(format!(
            "columns parallel (residual norm {:.3e})",
            nw
        )));
    }
    let b = [w[0] / nw, w[1] / nw, w[2] / nw];
    let c = cross3(&a, &b);
    Ok([a[0], b[0], c[0], a[1], b[1], c[1], a[2], b[2], c[2]])
}

/// Chain rule through normalize / project / cross, hand-derived.
fn rot6d_backward(r: &[f64], g: &[f64]) -> Vec<f64> {
    let u = [r[0], r[1], r[2]];
    let v = [r[3], r[4], r[5]];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let a = [u[0] / nu, u[1] / nu, u[2] / nu];
    let av = a[0] * v[0] + a[1] * v[1] + a[2] * v[2];
    let w = [v[0] - av * a[0], v[1] - av * a[1], v[2] - av * a[2]];
    let nw = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let b = [w[0] / nw, w[1] / nw, w[2] / nw];

    // Column gradients from the row-major output gradient.
    let ga = [g[0], g[3], g[6]];
    let gb = [g[1], g[4], g[7]];
    let gc = [g[2], g[5], g[8]];

    // c = a x b: dL/da += b x gc, dL/db += gc x a.
    let mut da = cross3(&b, &gc);
    let mut db = cross3(&gc, &a);
    for i in 0..3 {
        da[i] += ga[i];
        db[i] += gb[i];
    }

    // b = w / |w|: dL/dw = (I - b b^T)/|w| db.
    let bdb = b[0] * db[0] + b[1] * db[1] + b[2] * db[2];
    let dw = [
        (db[0] - b[0] * bdb) / nw,
        (db[1] - b[1] * bdb) / nw,
        (db[2] - b[2] * bdb) / nw,
    ];

    // w = v - (a.v) a: dL/dv = dw - a (a.dw); dL/da += -(v (a.dw) + (a.v) dw).
    let adw = a[0] * dw[0] + a[1] * dw[1] + a[2] * dw[2];
    let dv = [
        dw[0] - a[0] * adw,
        dw[1] - a[1] * adw,
        dw[2] - a[2] * adw,
    ];
    for i in 0..3 {
        da[i] -= v[i] * adw + av * dw[i];
    }

    // a = u / |u|: dL/du = (I - a a^T)/|u| da.
    let ada = a[0] * da[0] + a[1] * da[1] + a[2] * da[2];
    let du = [
        (da[0] - a[0] * ada) / nu,
        (da[1] - a[1] * ada) / nu,
        (da[2] - a[2] * ada) / nu,
    ];

    vec![du[0], du[1], du[2], dv[0], dv[1], dv[2]]
}
