//! Tape-based reverse-mode autodiff over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly and
//! records enough structure to replay the chain rule in reverse. Shapes are
//! validated when a node is created, so `backward` itself cannot encounter a
//! mismatch. Gradients are accumulated per node and read back with
//! [`Graph::grad`] after a single `backward` call from a scalar root.
//!
//! The op set is exactly what the models in this workspace need — MLPs,
//! convolutional U-Net blocks, attention, and differentiable volume
//! rendering — nothing speculative. Every op's derivative is covered by the
//! finite-difference harness in [`crate::numerics::gradcheck`].

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::par;

/// Handle to a node on the tape. Only valid for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId, T),
    MulScalar(NodeId, T),
    Exp(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    /// (m,k) @ (k,n)
    MatMul(NodeId, NodeId),
    /// Batched matmul; with `transpose_b` the right operand is (B,n,k) and is
    /// read transposed, which is how attention scores q·kᵀ are formed.
    Bmm {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    /// NCHW convolution via im2col + gemm. The col matrix is rebuilt in the
    /// backward pass rather than saved.
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    /// (rows, c) + bias (c,)
    AddBiasRow(NodeId, NodeId),
    /// (b,c,h,w) + bias (c,)
    AddBiasChan(NodeId, NodeId),
    /// (b,c,h,w) + per-sample channel map (b,c) — FiLM-style conditioning.
    AddChanMap(NodeId, NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    },
    /// Softmax over the trailing axis, any rank.
    SoftmaxLast(NodeId),
    UpsampleNearest {
        x: NodeId,
        factor: usize,
    },
    /// Concatenate along axis 1; all other axes must match.
    ConcatAxis1(NodeId, NodeId),
    Reshape(NodeId),
    /// (b,x,y) -> (b,y,x)
    Transpose12(NodeId),
    /// (a,b,c,d) -> (a,c,b,d); its own inverse, used for attention head split.
    Permute0213(NodeId),
    /// Reverse block order along axis 0; its own inverse. With two stacked
    /// streams this swaps them, which is how cross-view attention reads the
    /// other stream's keys/values.
    FlipBatch0(NodeId),
    MeanAll(NodeId),
    /// (r,s) -> (r,1) row sums.
    SumAxisLast(NodeId),
    /// (r,c) + column (r,1) broadcast over c.
    AddColBroadcast(NodeId, NodeId),
    /// Gather rows of `table` (v,d) at fixed indices -> (len,d).
    Embed {
        table: NodeId,
        indices: Vec<usize>,
    },
    /// Exclusive prefix sum along each row of (r,s): out[r,0] = 0,
    /// out[r,i] = Σ_{j<i} x[r,j]. The transmittance accumulator.
    CumsumExclusive(NodeId),
    /// out[r,c] = Σ_s w[r,s]·v[r,s,c] — volume-rendering contraction.
    WeightedSumSamples {
        w: NodeId,
        v: NodeId,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    /// Op-specific saved state for backward (group-norm means/inv-stds).
    aux: Vec<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

#[inline]
fn sigmoid_of<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (T::ZERO - x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
fn softplus_of<T: Scalar>(x: T) -> T {
    // max(x,0) + ln1p(exp(-|x|)) is exact for large |x| where the naive
    // form overflows or rounds to zero.
    x.maximum(T::ZERO) + (T::ZERO - x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("node shape/value always consistent")
    }

    /// Gradient accumulated by the last `backward`, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        op: Op<T>,
        shape: Vec<usize>,
        value: Vec<T>,
        aux: Vec<T>,
        requires_grad: bool,
    ) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn input(&mut self, t: &Tensor<T>, op: &'static str, requires_grad: bool) -> Result<NodeId> {
        if t.is_empty() {
            return Err(Error::InvalidShape {
                op: "Graph::input",
                shape: t.shape().to_vec(),
                reason: "zero-element tensors cannot enter the graph".into(),
            });
        }
        t.assert_finite(op)?;
        Ok(self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), vec![], requires_grad))
    }

    /// Trainable input. The tensor must already be finite; this is where all
    /// external data enters the tape, so it is checked once here.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<NodeId> {
        self.input(t, "Graph::leaf", true)
    }

    /// Non-trainable input: frozen weights, data, masks, quadrature tables.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<NodeId> {
        self.input(t, "Graph::constant", false)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), shape, value, vec![], rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), shape, value, vec![], rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), shape, value, vec![], rg))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| T::ZERO - x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Neg(a), shape, value, vec![], rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x + s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::AddScalar(a, s), shape, value, vec![], rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::MulScalar(a, s), shape, value, vec![], rg)
    }

    /// `exp` is the one op here that can overflow to infinity from finite
    /// input, so its output is checked.
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x.exp()).collect();
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "exp" });
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Exp(a), shape, value, vec![], rg))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x * sigmoid_of(x))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Silu(a), shape, value, vec![], rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| softplus_of(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Softplus(a), shape, value, vec![], rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| sigmoid_of(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sigmoid(a), shape, value, vec![], rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![T::ZERO; m * n];
        gemm_rowmajor(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            k as isize,
            1,
            &self.nodes[b.0].value,
            n as isize,
            1,
            &mut value,
            false,
        );
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], value, vec![], rg))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut value = vec![T::ZERO; bsz * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            par::for_each_chunk_mut(&mut value, m * n, |i, out| {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
                gemm_rowmajor(m, k, n, ai, k as isize, 1, bi, rsb, csb, out, false);
            });
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Op::Bmm { a, b, transpose_b },
            vec![bsz, m, n],
            value,
            vec![],
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (bsz, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: sx.clone(),
                reason: format!("kernel {kh}x{kw} with pad {pad} exceeds input"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let mut value = vec![T::ZERO; bsz * cout * ho * wo];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            par::for_each_chunk_mut(&mut value, cout * ho * wo, |i, out| {
                let mut col = vec![T::ZERO; kdim * ho * wo];
                im2col(
                    &xv[i * cin * h * wdt..(i + 1) * cin * h * wdt],
                    cin,
                    h,
                    wdt,
                    kh,
                    kw,
                    stride,
                    pad,
                    ho,
                    wo,
                    &mut col,
                );
                gemm_rowmajor(
                    cout,
                    kdim,
                    ho * wo,
                    wv,
                    kdim as isize,
                    1,
                    &col,
                    (ho * wo) as isize,
                    1,
                    out,
                    false,
                );
            });
        }
        let rg = self.needs_grad(&[x, w]);
        Ok(self.push(
            Op::Conv2d { x, w, stride, pad },
            vec![bsz, cout, ho, wo],
            value,
            vec![],
            rg,
        ))
    }

    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[bias.0].shape);
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut value = self.nodes[a.0].value.clone();
        let bv = &self.nodes[bias.0].value;
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] = value[r * cols + c] + bv[c];
            }
        }
        let rg = self.needs_grad(&[a, bias]);
        Ok(self.push(Op::AddBiasRow(a, bias), vec![rows, cols], value, vec![], rg))
    }

    pub fn add_bias_chan(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[bias.0].shape);
        if sa.len() != 4 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_chan",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (bsz, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let hw = h * w;
        let mut value = self.nodes[a.0].value.clone();
        let bv = &self.nodes[bias.0].value;
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let add = bv[ci];
                for v in &mut value[base..base + hw] {
                    *v = *v + add;
                }
            }
        }
        let shape = sa.clone();
        let rg = self.needs_grad(&[a, bias]);
        Ok(self.push(Op::AddBiasChan(a, bias), shape, value, vec![], rg))
    }

    pub fn add_chan_map(&mut self, a: NodeId, map: NodeId) -> Result<NodeId> {
        let (sa, sm) = (&self.nodes[a.0].shape, &self.nodes[map.0].shape);
        if sa.len() != 4 || sm.len() != 2 || sm[0] != sa[0] || sm[1] != sa[1] {
            return Err(Error::ShapeMismatch {
                op: "add_chan_map",
                lhs: sa.clone(),
                rhs: sm.clone(),
            });
        }
        let (bsz, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let hw = h * w;
        let mut value = self.nodes[a.0].value.clone();
        let mv = &self.nodes[map.0].value;
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let add = mv[bi * c + ci];
                for v in &mut value[base..base + hw] {
                    *v = *v + add;
                }
            }
        }
        let shape = sa.clone();
        let rg = self.needs_grad(&[a, map]);
        Ok(self.push(Op::AddChanMap(a, map), shape, value, vec![], rg))
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(Error::InvalidShape {
                op: "group_norm",
                shape: sx.clone(),
                reason: "expected rank-4 NCHW".into(),
            });
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument {
                op: "group_norm",
                reason: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        for p in [gamma, beta] {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != 1 || sp[0] != c {
                return Err(Error::ShapeMismatch {
                    op: "group_norm",
                    lhs: sx.clone(),
                    rhs: sp.clone(),
                });
            }
        }
        let cg = c / groups;
        let m = cg * h * w;
        let mut value = vec![T::ZERO; bsz * c * h * w];
        // aux layout: [mean, inv_std] per (batch, group).
        let mut aux = vec![T::ZERO; bsz * groups * 2];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            let eps_t = T::from_f64(eps);
            let inv_m = T::ONE / T::from_f64(m as f64);
            for bi in 0..bsz {
                for g in 0..groups {
                    let start = (bi * c + g * cg) * h * w;
                    let xs = &xv[start..start + m];
                    let mut sum = T::ZERO;
                    for &v in xs {
                        sum = sum + v;
                    }
                    let mean = sum * inv_m;
                    let mut var = T::ZERO;
                    for &v in xs {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_m;
                    let inv_std = T::ONE / (var + eps_t).sqrt();
                    aux[(bi * groups + g) * 2] = mean;
                    aux[(bi * groups + g) * 2 + 1] = inv_std;
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        let base = (bi * c + ch) * h * w;
                        let (ga, be) = (gv[ch], bv[ch]);
                        for k in 0..h * w {
                            value[base + k] = ga * (xv[base + k] - mean) * inv_std + be;
                        }
                    }
                }
            }
        }
        let shape = sx.clone();
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            },
            shape,
            value,
            aux,
            rg,
        ))
    }

    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() {
            return Err(Error::InvalidShape {
                op: "softmax_last",
                shape: vec![],
                reason: "needs at least one axis".into(),
            });
        }
        let n = *sa.last().unwrap();
        let mut value = self.nodes[a.0].value.clone();
        par::for_each_chunk_mut(&mut value, n, |_, row| {
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut sum = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            let inv = T::ONE / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        });
        let shape = sa.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SoftmaxLast(a), shape, value, vec![], rg))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(Error::InvalidShape {
                op: "upsample_nearest",
                shape: sx.clone(),
                reason: "expected rank-4 NCHW".into(),
            });
        }
        if factor == 0 {
            return Err(Error::InvalidArgument {
                op: "upsample_nearest",
                reason: "factor must be positive".into(),
            });
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut value = vec![T::ZERO; bsz * c * ho * wo];
        let xv = &self.nodes[x.0].value;
        for bc in 0..bsz * c {
            let src = &xv[bc * h * w..(bc + 1) * h * w];
            let dst = &mut value[bc * ho * wo..(bc + 1) * ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    dst[oh * wo + ow] = src[(oh / factor) * w + (ow / factor)];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::UpsampleNearest { x, factor },
            vec![bsz, c, ho, wo],
            value,
            vec![],
            rg,
        ))
    }

    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let compatible = sa.len() == sb.len()
            && sa.len() >= 2
            && sa[0] == sb[0]
            && sa[2..] == sb[2..];
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat_axis1",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let lead = sa[0];
        let trail: usize = sa[2..].iter().product();
        let (na, nb) = (sa[1] * trail, sb[1] * trail);
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let mut value = vec![T::ZERO; lead * (na + nb)];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for l in 0..lead {
            value[l * (na + nb)..l * (na + nb) + na].copy_from_slice(&av[l * na..(l + 1) * na]);
            value[l * (na + nb) + na..(l + 1) * (na + nb)].copy_from_slice(&bv[l * nb..(l + 1) * nb]);
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::ConcatAxis1(a, b), shape, value, vec![], rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.clone(),
                reason: format!("node has {} elements, target wants {n}", self.nodes[a.0].value.len()),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Reshape(a), shape, value, vec![], rg))
    }

    pub fn transpose12(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 3 {
            return Err(Error::InvalidShape {
                op: "transpose12",
                shape: sa.clone(),
                reason: "expected rank-3".into(),
            });
        }
        let (bsz, x, y) = (sa[0], sa[1], sa[2]);
        let mut value = vec![T::ZERO; bsz * x * y];
        let av = &self.nodes[a.0].value;
        for bi in 0..bsz {
            for xi in 0..x {
                for yi in 0..y {
                    value[bi * x * y + yi * x + xi] = av[bi * x * y + xi * y + yi];
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Transpose12(a), vec![bsz, y, x], value, vec![], rg))
    }

    pub fn permute0213(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 4 {
            return Err(Error::InvalidShape {
                op: "permute0213",
                shape: sa.clone(),
                reason: "expected rank-4".into(),
            });
        }
        let (d0, d1, d2, d3) = (sa[0], sa[1], sa[2], sa[3]);
        let mut value = vec![T::ZERO; d0 * d1 * d2 * d3];
        let av = &self.nodes[a.0].value;
        permute_0213(av, &mut value, d0, d1, d2, d3);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Permute0213(a), vec![d0, d2, d1, d3], value, vec![], rg))
    }

    pub fn flip_batch0(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() {
            return Err(Error::InvalidShape {
                op: "flip_batch0",
                shape: vec![],
                reason: "needs at least one axis".into(),
            });
        }
        let lead = sa[0];
        let block: usize = sa[1..].iter().product();
        let av = &self.nodes[a.0].value;
        let mut value = vec![T::ZERO; av.len()];
        for l in 0..lead {
            value[(lead - 1 - l) * block..(lead - l) * block]
                .copy_from_slice(&av[l * block..(l + 1) * block]);
        }
        let shape = sa.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::FlipBatch0(a), shape, value, vec![], rg))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len().max(1);
        let mut sum = T::ZERO;
        for &v in &self.nodes[a.0].value {
            sum = sum + v;
        }
        let value = vec![sum / T::from_f64(n as f64)];
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::MeanAll(a), vec![], value, vec![], rg)
    }

    pub fn sum_axis_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::InvalidShape {
                op: "sum_axis_last",
                shape: sa.clone(),
                reason: "expected rank-2".into(),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].value;
        let mut value = vec![T::ZERO; rows];
        for r in 0..rows {
            let mut s = T::ZERO;
            for c in 0..cols {
                s = s + av[r * cols + c];
            }
            value[r] = s;
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SumAxisLast(a), vec![rows, 1], value, vec![], rg))
    }

    pub fn add_col_broadcast(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (sa, sc) = (&self.nodes[a.0].shape, &self.nodes[col.0].shape);
        if sa.len() != 2 || sc.len() != 2 || sc[0] != sa[0] || sc[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_col_broadcast",
                lhs: sa.clone(),
                rhs: sc.clone(),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut value = self.nodes[a.0].value.clone();
        let cv = &self.nodes[col.0].value;
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] = value[r * cols + c] + cv[r];
            }
        }
        let rg = self.needs_grad(&[a, col]);
        Ok(self.push(Op::AddColBroadcast(a, col), vec![rows, cols], value, vec![], rg))
    }

    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embed",
                shape: st.clone(),
                reason: "table must be rank-2 (vocab, dim)".into(),
            });
        }
        let (v, d) = (st[0], st[1]);
        if indices.is_empty() {
            return Err(Error::InvalidArgument {
                op: "embed",
                reason: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument {
                op: "embed",
                reason: format!("index {bad} out of range for vocab {v}"),
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut value = vec![T::ZERO; indices.len() * d];
        for (row, &idx) in indices.iter().enumerate() {
            value[row * d..(row + 1) * d].copy_from_slice(&tv[idx * d..(idx + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            value,
            vec![],
            rg,
        ))
    }

    pub fn cumsum_exclusive(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::InvalidShape {
                op: "cumsum_exclusive",
                shape: sa.clone(),
                reason: "expected rank-2".into(),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].value;
        let mut value = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let mut acc = T::ZERO;
            for c in 0..cols {
                value[r * cols + c] = acc;
                acc = acc + av[r * cols + c];
            }
        }
        let shape = sa.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::CumsumExclusive(a), shape, value, vec![], rg))
    }

    pub fn weighted_sum_samples(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let (sw, sv) = (&self.nodes[w.0].shape, &self.nodes[v.0].shape);
        if sw.len() != 2 || sv.len() != 3 || sv[0] != sw[0] || sv[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum_samples",
                lhs: sw.clone(),
                rhs: sv.clone(),
            });
        }
        let (rows, s, c) = (sv[0], sv[1], sv[2]);
        let wv = &self.nodes[w.0].value;
        let vv = &self.nodes[v.0].value;
        let mut value = vec![T::ZERO; rows * c];
        for r in 0..rows {
            for si in 0..s {
                let wgt = wv[r * s + si];
                let vbase = (r * s + si) * c;
                for ci in 0..c {
                    value[r * c + ci] = value[r * c + ci] + wgt * vv[vbase + ci];
                }
            }
        }
        let rg = self.needs_grad(&[w, v]);
        Ok(self.push(
            Op::WeightedSumSamples { w, v },
            vec![rows, c],
            value,
            vec![],
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Gradients land in per-node buffers
    /// readable via [`Graph::grad`]; calling again replaces them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                reason: format!(
                    "root must be scalar, has {} elements",
                    self.nodes[root.0].value.len()
                ),
            });
        }
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::ONE]);

        // Tape order is topological, so one reverse sweep suffices: by the
        // time a node is visited every consumer has already deposited its
        // contribution.
        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.accumulate_parents(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<T> {
        let n = self.nodes[id.0].value.len();
        self.grads[id.0].get_or_insert_with(|| vec![T::ZERO; n])
    }

    fn accumulate_parents(&mut self, i: usize, g: &[T]) -> Result<()> {
        // Clone is cheap: ops hold ids and small scalars (Embed's index list
        // is the one exception and stays modest in this workspace).
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let buf = self.grad_buf(a);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let buf = self.grad_buf(b);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let buf = self.grad_buf(a);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let buf = self.grad_buf(b);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d - gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.clone();
                    let buf = self.grad_buf(a);
                    for ((d, &gi), &bi) in buf.iter_mut().zip(g).zip(&bv) {
                        *d = *d + gi * bi;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.clone();
                    let buf = self.grad_buf(b);
                    for ((d, &gi), &ai) in buf.iter_mut().zip(g).zip(&av) {
                        *d = *d + gi * ai;
                    }
                }
            }
            Op::Neg(a) => {
                let buf = self.grad_buf(a);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d = *d - gi;
                }
            }
            Op::AddScalar(a, _) => {
                let buf = self.grad_buf(a);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d = *d + gi;
                }
            }
            Op::MulScalar(a, s) => {
                let buf = self.grad_buf(a);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d = *d + gi * s;
                }
            }
            Op::Exp(a) => {
                let yv = self.nodes[i].value.clone();
                let buf = self.grad_buf(a);
                for ((d, &gi), &yi) in buf.iter_mut().zip(g).zip(&yv) {
                    *d = *d + gi * yi;
                }
            }
            Op::Silu(a) => {
                let xv = self.nodes[a.0].value.clone();
                let buf = self.grad_buf(a);
                for ((d, &gi), &xi) in buf.iter_mut().zip(g).zip(&xv) {
                    let s = sigmoid_of(xi);
                    *d = *d + gi * (s + xi * s * (T::ONE - s));
                }
            }
            Op::Softplus(a) => {
                let xv = self.nodes[a.0].value.clone();
                let buf = self.grad_buf(a);
                for ((d, &gi), &xi) in buf.iter_mut().zip(g).zip(&xv) {
                    *d = *d + gi * sigmoid_of(xi);
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.clone();
                let buf = self.grad_buf(a);
                for ((d, &gi), &yi) in buf.iter_mut().zip(g).zip(&yv) {
                    *d = *d + gi * yi * (T::ONE - yi);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA += G · Bᵀ
                    let bv = self.nodes[b.0].value.clone();
                    let buf = self.grad_buf(a);
                    gemm_rowmajor(m, n, k, g, n as isize, 1, &bv, 1, n as isize, buf, true);
                }
                if self.nodes[b.0].requires_grad {
                    // dB += Aᵀ · G
                    let av = self.nodes[a.0].value.clone();
                    let buf = self.grad_buf(b);
                    gemm_rowmajor(k, m, n, &av, 1, k as isize, g, n as isize, 1, buf, true);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let sa = self.nodes[a.0].shape.clone();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.nodes[i].shape[2];
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.clone();
                    let buf = self.grad_buf(a);
                    for bi in 0..bsz {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let out = &mut buf[bi * m * k..(bi + 1) * m * k];
                        if transpose_b {
                            // dA += G · B, B is (n,k)
                            gemm_rowmajor(m, n, k, gi, n as isize, 1, bb, k as isize, 1, out, true);
                        } else {
                            // dA += G · Bᵀ, B is (k,n)
                            gemm_rowmajor(m, n, k, gi, n as isize, 1, bb, 1, n as isize, out, true);
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.clone();
                    let buf = self.grad_buf(b);
                    for bi in 0..bsz {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut buf[bi * k * n..(bi + 1) * k * n];
                        if transpose_b {
                            // dB += Gᵀ · A -> (n,m)·(m,k) = (n,k)
                            gemm_rowmajor(n, m, k, gi, 1, n as isize, aa, k as isize, 1, out, true);
                        } else {
                            // dB += Aᵀ · G -> (k,m)·(m,n)
                            gemm_rowmajor(k, m, n, aa, 1, k as isize, gi, n as isize, 1, out, true);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.nodes[x.0].shape.clone();
                let sw = self.nodes[w.0].shape.clone();
                let (bsz, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let so = self.nodes[i].shape.clone();
                let (ho, wo) = (so[2], so[3]);
                let kdim = cin * kh * kw;
                let l = ho * wo;
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                let x_rg = self.nodes[x.0].requires_grad;
                let w_rg = self.nodes[w.0].requires_grad;
                let mut col = vec![T::ZERO; kdim * l];
                let mut dcol = vec![T::ZERO; kdim * l];
                // dW accumulates across batch items; keep the loop sequential
                // so the summation order never depends on scheduling.
                for bi in 0..bsz {
                    let gi = &g[bi * cout * l..(bi + 1) * cout * l];
                    im2col(
                        &xv[bi * cin * h * wdt..(bi + 1) * cin * h * wdt],
                        cin,
                        h,
                        wdt,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                        &mut col,
                    );
                    if w_rg {
                        // dW += G · colᵀ : (cout,l)·(l,kdim)
                        let buf = self.grad_buf(w);
                        gemm_rowmajor(cout, l, kdim, gi, l as isize, 1, &col, 1, l as isize, buf, true);
                    }
                    if x_rg {
                        // dcol = Wᵀ · G : (kdim,cout)·(cout,l)
                        for v in dcol.iter_mut() {
                            *v = T::ZERO;
                        }
                        gemm_rowmajor(
                            kdim, cout, l, &wv, 1, kdim as isize, gi, l as isize, 1, &mut dcol,
                            false,
                        );
                        let buf = self.grad_buf(x);
                        col2im_add(
                            &dcol,
                            cin,
                            h,
                            wdt,
                            kh,
                            kw,
                            stride,
                            pad,
                            ho,
                            wo,
                            &mut buf[bi * cin * h * wdt..(bi + 1) * cin * h * wdt],
                        );
                    }
                }
            }
            Op::AddBiasRow(a, bias) => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if self.nodes[a.0].requires_grad {
                    let buf = self.grad_buf(a);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let buf = self.grad_buf(bias);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] = buf[c] + g[r * cols + c];
                        }
                    }
                }
            }
            Op::AddBiasChan(a, bias) => {
                let s = self.nodes[i].shape.clone();
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.nodes[a.0].requires_grad {
                    let buf = self.grad_buf(a);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let buf = self.grad_buf(bias);
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut s = T::ZERO;
                            for &gi in &g[base..base + hw] {
                                s = s + gi;
                            }
                            buf[ci] = buf[ci] + s;
                        }
                    }
                }
            }
            Op::AddChanMap(a, map) => {
                let s = self.nodes[i].shape.clone();
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.nodes[a.0].requires_grad {
                    let buf = self.grad_buf(a);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[map.0].requires_grad {
                    let buf = self.grad_buf(map);
                    for bc in 0..bsz * c {
                        let base = bc * hw;
                        let mut s = T::ZERO;
                        for &gi in &g[base..base + hw] {
                            s = s + gi;
                        }
                        buf[bc] = buf[bc] + s;
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            } => {
                let s = self.nodes[i].shape.clone();
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                let cg = c / groups;
                let m = cg * hw;
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gamma.0].value.clone();
                let aux = self.nodes[i].aux.clone();
                let inv_m = T::ONE / T::from_f64(m as f64);
                let x_rg = self.nodes[x.0].requires_grad;
                let ga_rg = self.nodes[gamma.0].requires_grad;
                let be_rg = self.nodes[beta.0].requires_grad;
                for bi in 0..bsz {
                    for gi in 0..groups {
                        let mean = aux[(bi * groups + gi) * 2];
                        let inv_std = aux[(bi * groups + gi) * 2 + 1];
                        // dxhat = g·gamma; also need its mean and its
                        // xhat-weighted mean over the group.
                        let mut sum_dxh = T::ZERO;
                        let mut sum_dxh_xh = T::ZERO;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let base = (bi * c + ch) * hw;
                            for k in 0..hw {
                                let xh = (xv[base + k] - mean) * inv_std;
                                let dxh = g[base + k] * gv[ch];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xh;
                            }
                        }
                        let mean_dxh = sum_dxh * inv_m;
                        let mean_dxh_xh = sum_dxh_xh * inv_m;
                        if x_rg {
                            let buf = self.grad_buf(x);
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let base = (bi * c + ch) * hw;
                                for k in 0..hw {
                                    let xh = (xv[base + k] - mean) * inv_std;
                                    let dxh = g[base + k] * gv[ch];
                                    buf[base + k] = buf[base + k]
                                        + inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                                }
                            }
                        }
                    }
                }
                if ga_rg || be_rg {
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let gi = ch / cg;
                            let mean = aux[(bi * groups + gi) * 2];
                            let inv_std = aux[(bi * groups + gi) * 2 + 1];
                            let base = (bi * c + ch) * hw;
                            let mut dg = T::ZERO;
                            let mut db = T::ZERO;
                            for k in 0..hw {
                                let xh = (xv[base + k] - mean) * inv_std;
                                dg = dg + g[base + k] * xh;
                                db = db + g[base + k];
                            }
                            if ga_rg {
                                let buf = self.grad_buf(gamma);
                                buf[ch] = buf[ch] + dg;
                            }
                            if be_rg {
                                let buf = self.grad_buf(beta);
                                buf[ch] = buf[ch] + db;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                let n = *self.nodes[i].shape.last().unwrap();
                let yv = self.nodes[i].value.clone();
                let buf = self.grad_buf(a);
                for r in 0..yv.len() / n {
                    let y = &yv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = T::ZERO;
                    for (yi, gi) in y.iter().zip(gr) {
                        dot = dot + *yi * *gi;
                    }
                    for c in 0..n {
                        buf[r * n + c] = buf[r * n + c] + y[c] * (gr[c] - dot);
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let so = self.nodes[i].shape.clone();
                let (ho, wo) = (so[2], so[3]);
                let (h, w) = (ho / factor, wo / factor);
                let buf = self.grad_buf(x);
                for bc in 0..so[0] * so[1] {
                    let gsrc = &g[bc * ho * wo..(bc + 1) * ho * wo];
                    let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let t = (oh / factor) * w + (ow / factor);
                            dst[t] = dst[t] + gsrc[oh * wo + ow];
                        }
                    }
                }
            }
            Op::ConcatAxis1(a, b) => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let lead = sa[0];
                let trail: usize = sa[2..].iter().product();
                let (na, nb) = (sa[1] * trail, sb[1] * trail);
                if self.nodes[a.0].requires_grad {
                    let buf = self.grad_buf(a);
                    for l in 0..lead {
                        let gs = &g[l * (na + nb)..l * (na + nb) + na];
                        for (d, &gi) in buf[l * na..(l + 1) * na].iter_mut().zip(gs) {
                            *d = *d + gi;
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let buf = self.grad_buf(b);
                    for l in 0..lead {
                        let gs = &g[l * (na + nb) + na..(l + 1) * (na + nb)];
                        for (d, &gi) in buf[l * nb..(l + 1) * nb].iter_mut().zip(gs) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let buf = self.grad_buf(a);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d = *d + gi;
                }
            }
            Op::Transpose12(a) => {
                // Output is (b,y,x); scatter grads back to (b,x,y).
                let so = self.nodes[i].shape.clone();
                let (bsz, y, x) = (so[0], so[1], so[2]);
                let buf = self.grad_buf(a);
                for bi in 0..bsz {
                    for yi in 0..y {
                        for xi in 0..x {
                            buf[bi * x * y + xi * y + yi] =
                                buf[bi * x * y + xi * y + yi] + g[bi * x * y + yi * x + xi];
                        }
                    }
                }
            }
            Op::Permute0213(a) => {
                // The permutation is self-inverse, so permuting the incoming
                // grad with the output dims maps it back to input layout.
                let so = self.nodes[i].shape.clone();
                let mut back = vec![T::ZERO; g.len()];
                permute_0213(g, &mut back, so[0], so[1], so[2], so[3]);
                let buf = self.grad_buf(a);
                for (d, &gi) in buf.iter_mut().zip(&back) {
                    *d = *d + gi;
                }
            }
            Op::FlipBatch0(a) => {
                // Self-inverse: flipping the incoming grad restores input order.
                let so = self.nodes[i].shape.clone();
                let lead = so[0];
                let block: usize = so[1..].iter().product();
                let buf = self.grad_buf(a);
                for l in 0..lead {
                    let gs = &g[(lead - 1 - l) * block..(lead - l) * block];
                    for (d, &gi) in buf[l * block..(l + 1) * block].iter_mut().zip(gs) {
                        *d = *d + gi;
                    }
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len().max(1);
                let gi = g[0] / T::from_f64(n as f64);
                let buf = self.grad_buf(a);
                for d in buf.iter_mut() {
                    *d = *d + gi;
                }
            }
            Op::SumAxisLast(a) => {
                let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let buf = self.grad_buf(a);
                for r in 0..rows {
                    for c in 0..cols {
                        buf[r * cols + c] = buf[r * cols + c] + g[r];
                    }
                }
            }
            Op::AddColBroadcast(a, col) => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if self.nodes[a.0].requires_grad {
                    let buf = self.grad_buf(a);
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[col.0].requires_grad {
                    let buf = self.grad_buf(col);
                    for r in 0..rows {
                        let mut s = T::ZERO;
                        for c in 0..cols {
                            s = s + g[r * cols + c];
                        }
                        buf[r] = buf[r] + s;
                    }
                }
            }
            Op::Embed { table, indices } => {
                let d = self.nodes[i].shape[1];
                let buf = self.grad_buf(table);
                for (row, &idx) in indices.iter().enumerate() {
                    for k in 0..d {
                        buf[idx * d + k] = buf[idx * d + k] + g[row * d + k];
                    }
                }
            }
            Op::CumsumExclusive(a) => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let buf = self.grad_buf(a);
                for r in 0..rows {
                    // dx[j] = Σ_{i>j} g[i]: running suffix sum.
                    let mut run = T::ZERO;
                    for c in (0..cols).rev() {
                        buf[r * cols + c] = buf[r * cols + c] + run;
                        run = run + g[r * cols + c];
                    }
                }
            }
            Op::WeightedSumSamples { w, v } => {
                let sv = self.nodes[v.0].shape.clone();
                let (rows, s, c) = (sv[0], sv[1], sv[2]);
                if self.nodes[w.0].requires_grad {
                    let vv = self.nodes[v.0].value.clone();
                    let buf = self.grad_buf(w);
                    for r in 0..rows {
                        for si in 0..s {
                            let mut acc = T::ZERO;
                            let vbase = (r * s + si) * c;
                            for ci in 0..c {
                                acc = acc + g[r * c + ci] * vv[vbase + ci];
                            }
                            buf[r * s + si] = buf[r * s + si] + acc;
                        }
                    }
                }
                if self.nodes[v.0].requires_grad {
                    let wv = self.nodes[w.0].value.clone();
                    let buf = self.grad_buf(v);
                    for r in 0..rows {
                        for si in 0..s {
                            let wgt = wv[r * s + si];
                            let vbase = (r * s + si) * c;
                            for ci in 0..c {
                                buf[vbase + ci] = buf[vbase + ci] + wgt * g[r * c + ci];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// gemm on row-major buffers with explicit strides; `accumulate` selects
/// beta=1 so the call adds into `c` instead of overwriting it.
#[allow(clippy::too_many_arguments)]
fn gemm_rowmajor<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one NCHW item into a (cin·kh·kw, ho·wo) patch matrix. Out-of-bounds
/// taps read as zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let l = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        for d in dst[oh * wo..(oh + 1) * wo].iter_mut() {
                            *d = T::ZERO;
                        }
                        continue;
                    }
                    let src_row = c * h * w + ih as usize * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        dst[oh * wo + ow] = if iw < 0 || iw >= w as isize {
                            T::ZERO
                        } else {
                            x[src_row + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch-matrix gradients back onto the
/// input gradient image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let l = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * l..(row + 1) * l];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = c * h * w + ih as usize * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            let t = dst_row + iw as usize;
                            dx[t] = dx[t] + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn permute_0213<T: Scalar>(src: &[T], dst: &mut [T], d0: usize, d1: usize, d2: usize, d3: usize) {
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let s = ((a * d1 + b) * d2 + c) * d3;
                let t = ((a * d2 + c) * d1 + b) * d3;
                dst[t..t + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mul_backward_is_other_operand() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[2.0, 3.0])).unwrap();
        let b = g.leaf(&t(&[2], &[5.0, 7.0])).unwrap();
        let p = g.mul(a, b).unwrap();
        let loss = g.mean_all(p);
        g.backward(loss).unwrap();
        // d mean(a*b)/da = b/2
        assert_eq!(g.grad(a).unwrap(), &[2.5, 3.5]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.5]);
    }

    #[test]
    fn matmul_forward_matches_tensor_matmul() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let expect = a.matmul(&b).unwrap();
        let mut g = Graph::new();
        let an = g.constant(&a).unwrap();
        let bn = g.constant(&b).unwrap();
        let c = g.matmul(an, bn).unwrap();
        assert_eq!(g.value(c), expect.data());
    }

    #[test]
    fn flip_batch0_reverses_blocks_and_inverts_itself() {
        let mut g = Graph::new();
        let a = g
            .constant(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let f = g.flip_batch0(a).unwrap();
        assert_eq!(g.value(f), &[5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
        assert_eq!(g.shape(f), &[3, 2]);
        let ff = g.flip_batch0(f).unwrap();
        assert_eq!(g.value(ff), g.value(a));
        // Rank-1 flip reverses scalars.
        let r1 = g.constant(&t(&[3], &[7.0, 8.0, 9.0])).unwrap();
        let fr = g.flip_batch0(r1).unwrap();
        assert_eq!(g.value(fr), &[9.0, 8.0, 7.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(&t(&[2], &[3.0, 4.0])).unwrap();
        let p = g.mul(a, b).unwrap();
        let loss = g.mean_all(p);
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g
            .leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]))
            .unwrap();
        let s = g.softmax_last(a).unwrap();
        let v = g.value(s);
        assert_relative_eq!(v[0] + v[1] + v[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(v[3] + v[4] + v[5], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cumsum_exclusive_starts_at_zero() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[1, 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = g.cumsum_exclusive(a).unwrap();
        assert_eq!(g.value(c), &[0.0, 1.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_axis1_rank2_and_rank4_layouts() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(&t(&[2, 1], &[9.0, 8.0])).unwrap();
        let c = g.concat_axis1(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.value(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let x = g
            .constant(&Tensor::new(vec![1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap())
            .unwrap();
        let y = g
            .constant(&Tensor::new(vec![1, 1, 2, 2], vec![10.0, 11.0, 12.0, 13.0]).unwrap())
            .unwrap();
        let z = g.concat_axis1(x, y).unwrap();
        assert_eq!(g.shape(z), &[1, 3, 2, 2]);
        assert_eq!(
            g.value(z),
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 10.0, 11.0, 12.0, 13.0]
        );
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        // 1x1 kernel with weight 1 is the identity map.
        let mut g = Graph::new();
        let x = g
            .constant(&Tensor::new(vec![1, 1, 2, 3], (1..=6).map(f64::from).collect()).unwrap())
            .unwrap();
        let w = g.constant(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv2d_hand_checked_3x3() {
        // Single 2x2 input, 3x3 averaging-style kernel of ones, pad 1:
        // each output pixel sums the in-bounds neighbourhood.
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let w = g.constant(&Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap()).unwrap();
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn exp_overflow_is_caught() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::from_vec(vec![1000.0f32])).unwrap();
        assert!(matches!(g.exp(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn leaf_rejects_nan_input() {
        let mut g = Graph::<f32>::new();
        let bad = Tensor::from_vec(vec![f32::NAN]);
        assert!(g.leaf(&bad).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shape_mismatch_rejected_at_op_creation() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.leaf(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let mut g = Graph::new();
        let table = g
            .leaf(&t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]))
            .unwrap();
        let e = g.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let loss = g.mean_all(e);
        g.backward(loss).unwrap();
        // Row 2 used twice, row 0 once, row 1 never; mean divides by 6.
        let gt = g.grad(table).unwrap();
        assert_relative_eq!(gt[0], 1.0 / 6.0);
        assert_relative_eq!(gt[2], 0.0);
        assert_relative_eq!(gt[4], 2.0 / 6.0);
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let table = g.leaf(&t(&[3, 2], &[0.0; 6])).unwrap();
        assert!(g.embed(table, &[3]).is_err());
    }

    #[test]
    fn transpose12_round_trip() {
        let mut g = Graph::new();
        let a = g
            .constant(&Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap())
            .unwrap();
        let tr = g.transpose12(a).unwrap();
        let back = g.transpose12(tr).unwrap();
        assert_eq!(g.value(back), g.value(a));
        assert_eq!(g.shape(tr), &[2, 3, 2]);
    }

    #[test]
    fn upsample_then_pool_grad_is_block_count() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 1], &[0.0]).reshape(vec![1, 1, 1, 1]).unwrap()).unwrap();
        let up = g.upsample_nearest(a, 3).unwrap();
        assert_eq!(g.shape(up), &[1, 1, 3, 3]);
        let loss = g.mean_all(up);
        g.backward(loss).unwrap();
        // Nine copies each with weight 1/9 sum to exactly 1.
        assert_relative_eq!(g.grad(a).unwrap()[0], 1.0);
    }
}
