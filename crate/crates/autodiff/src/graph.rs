use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::kernels::{broadcast_map, col2im, gemm, im2col, strides, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Stride, zero padding and channel grouping of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    /// Padding `kernel / 2`, so stride 1 preserves the spatial size.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Conv2dSpec {
            stride,
            pad: kernel / 2,
            groups: 1,
        }
    }

    pub fn valid(stride: usize) -> Self {
        Conv2dSpec {
            stride,
            pad: 0,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        spec: Conv2dSpec,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    Mean(Var),
    Sum(Var),
    MseLoss {
        pred: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Upsample2x(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    GlobalAvgPool(Var),
    SubsamplePad {
        x: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulBroadcast(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } | Op::Concat { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::MseLoss { pred, .. } => vec![*pred],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Silu(x)
            | Op::Softmax(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Upsample2x(x)
            | Op::GlobalAvgPool(x) => vec![*x],
            Op::Permute { x, .. } | Op::SubsamplePad { x } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, which is
/// therefore a valid topological order for the reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_node(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, true)
    }

    /// Bind a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf_node(t, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of every bound parameter, in name order. Parameters that did
    /// not influence the loss get a zero gradient.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let node = &self.nodes[v.0];
                let g = node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    /// Batched matmul of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(AutodiffError::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            "batch_matmul",
        )
    }

    /// `x: [N, C_in, H, W]`, `w: [C_out, C_in / groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, geom, c_out) = conv_geometry(&sx, &sw, spec)?;
        let groups = spec.groups;
        let cout_g = c_out / groups;
        let k_rows = geom.cols_rows();
        let hw = geom.out_h * geom.out_w;
        let in_block = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; n * c_out * hw];
        let mut cols = vec![0.0; geom.cols_len()];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for s in 0..n {
            for g in 0..groups {
                let x_off = (s * groups + g) * in_block;
                im2col(&xv[x_off..x_off + in_block], &geom, &mut cols);
                let w_g = &wv[g * cout_g * k_rows..(g + 1) * cout_g * k_rows];
                let o_off = (s * c_out + g * cout_g) * hw;
                gemm(
                    cout_g,
                    k_rows,
                    hw,
                    w_g,
                    false,
                    &cols,
                    false,
                    &mut out[o_off..o_off + cout_g * hw],
                    false,
                );
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c_out, geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, spec },
            "conv2d",
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul")
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == sb.len() && sa.iter().zip(sb).all(|(&x, &y)| y == x || y == 1);
        if !ok {
            return Err(AutodiffError::shape(op, sa, sb));
        }
        Ok(broadcast_map(sa, sb))
    }

    /// `a + b` where `b` has the rank of `a` and broadcasts along its size-1 axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.check_broadcast("add_broadcast", a, b)?;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&map)
            .map(|(&x, &j)| x + bv[j])
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(t, Op::AddBroadcast(a, b), "add_broadcast")
    }

    /// `a * b` with `b` broadcast as in [`Graph::add_broadcast`].
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.check_broadcast("mul_broadcast", a, b)?;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&map)
            .map(|(&x, &j)| x * bv[j])
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(t, Op::MulBroadcast(a, b), "mul_broadcast")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x * sigmoid(x));
        self.push(t, Op::Silu(a), "silu")
    }

    /// Normalize over the last axis, then apply per-feature `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(AutodiffError::shape("layer_norm", &sx, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_parts(sx, out), Op::Softmax(x), "softmax")
    }

    /// Row lookup into `table: [V, D]`; `None` yields a zero row.
    pub fn embedding(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(AutodiffError::invalid("embedding", format!("table shape {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(AutodiffError::invalid("embedding", "no ids"));
        }
        let tv = self.value(table).data();
        let mut out = vec![0.0; ids.len() * d];
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= v {
                    return Err(AutodiffError::invalid(
                        "embedding",
                        format!("id {id} out of range for {v} rows"),
                    ));
                }
                out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(AutodiffError::shape("mse_loss", self.shape(pred), target.shape()));
        }
        let pv = self.value(pred).data();
        let s: f64 = pv.iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let loss = s / pv.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
            "mse_loss",
        )
    }

    /// Mean cross-entropy of `logits: [N, G]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(AutodiffError::shape("cross_entropy", &sl, &[labels.len()]));
        }
        let g = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= g) {
            return Err(AutodiffError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {g} classes"),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &l) in probs.chunks_mut(g).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
            softmax_in_place(row);
        }
        let loss = total / labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(AutodiffError::shape("reshape", self.shape(x), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(AutodiffError::invalid("permute", format!("{perm:?} for shape {sx:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let out = permute_data(self.value(x).data(), &sx, perm);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute { x, perm: perm.to_vec() },
            "permute",
        )
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(AutodiffError::invalid("upsample2x", format!("shape {sx:?}")));
        }
        let (h, w) = (sx[2], sx[3]);
        let planes = sx[0] * sx[1];
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![sx[0], sx[1], 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            "upsample2x",
        )
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(AutodiffError::shape("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&bv[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        self.push(Tensor::from_parts(shape, out), Op::Concat { a, b, axis }, "concat")
    }

    /// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(AutodiffError::invalid("global_avg_pool", format!("shape {sx:?}")));
        }
        let hw = sx[2] * sx[3];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(
            Tensor::from_parts(vec![sx[0], sx[1]], out),
            Op::GlobalAvgPool(x),
            "global_avg_pool",
        )
    }

    /// Parameter-free shortcut for a stride-2 stage transition: keep every
    /// other row/column and zero-extend the channel axis to `out_channels`.
    pub fn subsample_pad(&mut self, x: Var, out_channels: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || out_channels < sx[1] {
            return Err(AutodiffError::invalid(
                "subsample_pad",
                format!("shape {sx:?} to {out_channels} channels"),
            ));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * out_channels * ho * wo];
        for s in 0..n {
            for ch in 0..c {
                let src = &xv[(s * c + ch) * h * w..];
                let dst = &mut out[(s * out_channels + ch) * ho * wo..];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[i * wo + j] = src[2 * i * w + 2 * j];
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, out_channels, ho, wo], out),
            Op::SubsamplePad { x },
            "subsample_pad",
        )
    }

    // ---------------------------------------------------------- composites

    /// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let out = self.shape(w)[1];
        let b2 = self.reshape(b, &[1, out])?;
        self.add_broadcast(y, b2)
    }

    /// Per-channel bias for an `[N, C, H, W]` activation.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(b)[0];
        let b4 = self.reshape(b, &[1, c, 1, 1])?;
        self.add_broadcast(x, b4)
    }

    /// Single-head scaled dot-product attention over `[B, L, D]` tensors.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self.shape(q).last().unwrap();
        let scores = self.batch_matmul(q, k, true)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = self.softmax(scores)?;
        self.batch_matmul(weights, v, false)
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`, accumulating `∂loss/∂node` into
    /// every node that depends on a tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &gy);
            self.nodes[i].grad = Some(gy);
            for (v, g) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, i: usize, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let g = gy.data();
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, false);
                    out.push((*a, like(*a, da)));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, false);
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &bv[s * k * n..(s + 1) * k * n],
                            !*trans_b,
                            &mut da[s * m * k..(s + 1) * m * k],
                            false,
                        );
                    }
                    out.push((*a, like(*a, da)));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gs, true, as_, false, dbs, false);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, dbs, false);
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Conv2d { x, w, spec } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, geom, c_out) = conv_geometry(sx, sw, *spec).expect("validated in forward");
                let groups = spec.groups;
                let cout_g = c_out / groups;
                let k_rows = geom.cols_rows();
                let hw = geom.out_h * geom.out_w;
                let in_block = geom.channels * geom.height * geom.width;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let mut dx = if want_x { vec![0.0; xv.len()] } else { vec![] };
                let mut dw = if want_w { vec![0.0; wv.len()] } else { vec![] };
                let mut cols = vec![0.0; geom.cols_len()];
                let mut dcols = vec![0.0; geom.cols_len()];
                for s in 0..n {
                    for gi in 0..groups {
                        let x_off = (s * groups + gi) * in_block;
                        let o_off = (s * c_out + gi * cout_g) * hw;
                        let gy_g = &g[o_off..o_off + cout_g * hw];
                        let w_range = gi * cout_g * k_rows..(gi + 1) * cout_g * k_rows;
                        if want_w {
                            im2col(&xv[x_off..x_off + in_block], &geom, &mut cols);
                            gemm(
                                cout_g,
                                hw,
                                k_rows,
                                gy_g,
                                false,
                                &cols,
                                true,
                                &mut dw[w_range.clone()],
                                true,
                            );
                        }
                        if want_x {
                            gemm(k_rows, cout_g, hw, &wv[w_range], true, gy_g, false, &mut dcols, false);
                            col2im(&dcols, &geom, &mut dx[x_off..x_off + in_block]);
                        }
                    }
                }
                let mut out = Vec::new();
                if want_x {
                    out.push((*x, like(*x, dx)));
                }
                if want_w {
                    out.push((*w, like(*w, dw)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, like(*b, g.iter().map(|v| -v).collect()))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, like(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect())),
                    (*b, like(*b, g.iter().zip(av).map(|(x, y)| x * y).collect())),
                ]
            }
            Op::AddBroadcast(a, b) => {
                let map = broadcast_map(self.shape(*a), self.shape(*b));
                let mut db = vec![0.0; self.value(*b).numel()];
                for (gv, &j) in g.iter().zip(&map) {
                    db[j] += gv;
                }
                vec![(*a, gy.clone()), (*b, like(*b, db))]
            }
            Op::MulBroadcast(a, b) => {
                let map = broadcast_map(self.shape(*a), self.shape(*b));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut db = vec![0.0; bv.len()];
                let mut da = vec![0.0; av.len()];
                for (idx, (&gv, &j)) in g.iter().zip(&map).enumerate() {
                    da[idx] = gv * bv[j];
                    db[j] += gv * av[idx];
                }
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Scale(a, s) => vec![(*a, like(*a, g.iter().map(|v| v * s).collect()))],
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(av)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(av)
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    (*x, like(*x, dx)),
                    (*gain, like(*gain, dgain)),
                    (*bias, like(*bias, dbias)),
                ]
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, like(*a, dx))]
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (i, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                }
                vec![(*table, like(*table, dt))]
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, Tensor::full(self.shape(*a), g[0] / n as f64))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g[0]))],
            Op::MseLoss { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * g[0] / pv.len() as f64;
                let d = pv.iter().zip(target.data()).map(|(p, t)| scale * (p - t)).collect();
                vec![(*pred, like(*pred, d))]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] -= scale;
                }
                vec![(*logits, like(*logits, d))]
            }
            Op::Reshape(a) => vec![(*a, like(*a, g.to_vec()))],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = permute_data(g, node.value.shape(), &inv);
                vec![(*x, like(*x, d))]
            }
            Op::Upsample2x(a) => {
                let sx = self.shape(*a);
                let (h, w) = (sx[2], sx[3]);
                let planes = sx[0] * sx[1];
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                vec![(*a, like(*a, dx))]
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
                let mut da = Vec::with_capacity(outer * ca);
                let mut db = Vec::with_capacity(outer * cb);
                for o in 0..outer {
                    let base = o * (ca + cb);
                    da.extend_from_slice(&g[base..base + ca]);
                    db.extend_from_slice(&g[base + ca..base + ca + cb]);
                }
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::GlobalAvgPool(a) => {
                let sx = self.shape(*a);
                let hw = sx[2] * sx[3];
                let mut dx = Vec::with_capacity(g.len() * hw);
                for gv in g {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                vec![(*a, like(*a, dx))]
            }
            Op::SubsamplePad { x } => {
                let sx = self.shape(*x);
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let so = node.value.shape();
                let (co, ho, wo) = (so[1], so[2], so[3]);
                let mut dx = vec![0.0; n * c * h * w];
                for s in 0..n {
                    for ch in 0..c {
                        let src = &g[(s * co + ch) * ho * wo..];
                        let dst = &mut dx[(s * c + ch) * h * w..];
                        for i in 0..ho {
                            for j in 0..wo {
                                dst[2 * i * w + 2 * j] = src[i * wo + j];
                            }
                        }
                    }
                }
                vec![(*x, like(*x, dx))]
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn conv_geometry(sx: &[usize], sw: &[usize], spec: Conv2dSpec) -> Result<(usize, ConvGeom, usize)> {
    if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
        return Err(AutodiffError::shape("conv2d", sx, sw));
    }
    let groups = spec.groups;
    if groups == 0
        || spec.stride == 0
        || !sx[1].is_multiple_of(groups)
        || !sw[0].is_multiple_of(groups)
        || sw[1] * groups != sx[1]
    {
        return Err(AutodiffError::shape("conv2d", sx, sw));
    }
    let k = sw[2];
    let (h, w) = (sx[2], sx[3]);
    if h + 2 * spec.pad < k || w + 2 * spec.pad < k {
        return Err(AutodiffError::shape("conv2d", sx, sw));
    }
    let out_h = (h + 2 * spec.pad - k) / spec.stride + 1;
    let out_w = (w + 2 * spec.pad - k) / spec.stride + 1;
    Ok((
        sx[0],
        ConvGeom {
            channels: sx[1] / groups,
            height: h,
            width: w,
            kernel: k,
            stride: spec.stride,
            pad: spec.pad,
            out_h,
            out_w,
        },
        sw[0],
    ))
}
