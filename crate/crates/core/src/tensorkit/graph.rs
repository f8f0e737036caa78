//! Define-by-run computation graph with reverse-mode gradients. Values are
//! f64 throughout; parameters are kept f32-representable by the optimizer so
//! 32-bit checkpoints round-trip bit-exactly.

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddBias(TensorId, TensorId),
    BroadcastAddChannel(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    Relu(TensorId),
    PRelu(TensorId, TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    SoftmaxLast(TensorId),
    LayerNorm(TensorId, TensorId, TensorId),
    BatchNormTrain(TensorId, TensorId, TensorId),
    BatchNormEval(TensorId, TensorId, TensorId, TensorId, TensorId),
    InstanceNorm(TensorId, TensorId, TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    },
    Conv1d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    },
    AdaptiveAvgPool2d(TensorId, usize, usize),
    Reshape(TensorId),
    Permute(TensorId, Vec<usize>),
    ConcatLast(Vec<TensorId>),
    MeanAxis(TensorId, usize),
    MeanAll(TensorId),
    PowerNormalize(TensorId, usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    /// Saved forward intermediates (normalization stats, softmax output...).
    aux: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    /// Parameter bindings: (name, node) pairs recorded by the caller so that
    /// gradients can be collected per named parameter after backward.
    pub bindings: Vec<(String, TensorId)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: Vec::new(),
            needs_grad,
            aux: Vec::new(),
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }
    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }
    pub fn aux(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].aux
    }
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>, needs_grad: bool) -> TensorId {
        self.push(Op::Leaf, shape.to_vec(), value, needs_grad)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> TensorId {
        self.leaf(shape, value, false)
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape, v, ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub(a, b), shape, v, ng)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), shape, v, ng)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape, v, ng)
    }

    /// `x (..., D) + b (D)`, broadcast over leading dims.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(b), &[d], "bias shape mismatch");
        let bv = self.value(b).to_vec();
        let v: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, xv)| xv + bv[i % d])
            .collect();
        let ng = self.needs(x) || self.needs(b);
        let shape = self.shape(x).to_vec();
        self.push(Op::AddBias(x, b), shape, v, ng)
    }

    /// `x (N,C,H,W) + v (N,C)`, broadcast over the spatial grid.
    pub fn broadcast_add_channel(&mut self, x: TensorId, v: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(self.shape(v), &xs[..2], "channel vector shape mismatch");
        let hw = xs[2] * xs[3];
        let vv = self.value(v).to_vec();
        let val: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, xv)| xv + vv[i / hw])
            .collect();
        let ng = self.needs(x) || self.needs(v);
        self.push(Op::BroadcastAddChannel(x, v), xs, val, ng)
    }

    // ---- activations --------------------------------------------------

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v: Vec<f64> = self.value(x).iter().map(|a| a.max(0.0)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), shape, v, ng)
    }

    /// Parametric rectifier with a single learnable slope `alpha` (shape [1]).
    pub fn prelu(&mut self, x: TensorId, alpha: TensorId) -> TensorId {
        assert_eq!(self.shape(alpha), &[1]);
        let a = self.value(alpha)[0];
        let v: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&t| if t > 0.0 { t } else { a * t })
            .collect();
        let ng = self.needs(x) || self.needs(alpha);
        let shape = self.shape(x).to_vec();
        self.push(Op::PRelu(x, alpha), shape, v, ng)
    }

    pub fn tanh_act(&mut self, x: TensorId) -> TensorId {
        let v: Vec<f64> = self.value(x).iter().map(|a| a.tanh()).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh(x), shape, v, ng)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let v: Vec<f64> = self
            .value(x)
            .iter()
            .map(|a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid(x), shape, v, ng)
    }

    pub fn softmax_last(&mut self, x: TensorId) -> TensorId {
        let d = *self.shape(x).last().unwrap();
        let mut v = self.value(x).to_vec();
        for row in v.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::SoftmaxLast(x), shape, v, ng)
    }

    // ---- matrix products ----------------------------------------------

    /// `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul inner dim mismatch");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut v = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let out = &mut v[i * n..(i + 1) * n];
                for p in 0..k {
                    let aik = av[i * k + p];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, bb) in out.iter_mut().zip(brow) {
                        *o += aik * bb;
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), vec![m, n], v, ng)
    }

    /// Batched matmul: `(..., m, k) x (..., k, n)` with equal leading dims.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() >= 3 && sb.len() == sa.len());
        assert_eq!(&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "bmm inner dim mismatch");
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut v = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..batch {
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let bb = &bv[bi * k * n..(bi + 1) * k * n];
                let ob = &mut v[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    let out = &mut ob[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aik = ab[i * k + p];
                        let brow = &bb[p * n..(p + 1) * n];
                        for (o, x) in out.iter_mut().zip(brow) {
                            *o += aik * x;
                        }
                    }
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Bmm(a, b), shape, v, ng)
    }

    /// Affine layer on the last axis: `x (..., in) . w (in, out) + b (out)`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2);
        assert_eq!(*xs.last().unwrap(), ws[0], "linear input dim mismatch");
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, ws[0]]);
        let y = self.matmul(flat, w);
        let y = self.add_bias(y, b);
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(ws[1]);
        self.reshape(y, &out_shape)
    }

    // ---- normalization ------------------------------------------------

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let n = self.value(x).len() / d;
        let mut v = vec![0.0; n * d];
        let mut aux = vec![0.0; n * d + n]; // xhat then invstd per row
        {
            let xv = self.value(x);
            let gv = self.value(gamma).to_vec();
            let bv = self.value(beta).to_vec();
            for r in 0..n {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                aux[n * d + r] = inv;
                for j in 0..d {
                    let xh = (row[j] - mean) * inv;
                    aux[r * d + j] = xh;
                    v[r * d + j] = gv[j] * xh + bv[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        let id = self.push(Op::LayerNorm(x, gamma, beta), shape, v, ng);
        self.nodes[id.0].aux = aux;
        id
    }

    /// Channel layout for batch/instance norm: channel axis is 1; reduction
    /// runs over every other axis.
    fn channel_layout(&self, x: TensorId) -> (usize, usize, usize) {
        let s = self.shape(x);
        assert!(s.len() >= 2);
        let n = s[0];
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        (n, c, inner)
    }

    /// Batch normalization with batch statistics (training mode). The
    /// computed per-channel mean/var are stored in `aux` (2*C values,
    /// biased variance) for the caller to fold into running statistics.
    pub fn batch_norm_train(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (n, c, inner) = self.channel_layout(x);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let count = (n * inner) as f64;
        let xv = self.value(x).to_vec();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for t in 0..inner {
                    mean[ci] += xv[base + t];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for t in 0..inner {
                    let dlt = xv[base + t] - mean[ci];
                    var[ci] += dlt * dlt;
                }
            }
        }
        for vv in var.iter_mut() {
            *vv /= count;
        }
        let mut v = vec![0.0; xv.len()];
        let mut aux = vec![0.0; xv.len() + 2 * c]; // xhat, then mean, var
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + NORM_EPS).sqrt();
                let base = (ni * c + ci) * inner;
                for t in 0..inner {
                    let xh = (xv[base + t] - mean[ci]) * inv;
                    aux[base + t] = xh;
                    v[base + t] = gv[ci] * xh + bv[ci];
                }
            }
        }
        aux[xv.len()..xv.len() + c].copy_from_slice(&mean);
        aux[xv.len() + c..].copy_from_slice(&var);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        let id = self.push(Op::BatchNormTrain(x, gamma, beta), shape, v, ng);
        self.nodes[id.0].aux = aux;
        id
    }

    /// Batch normalization with fixed running statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: TensorId,
        var: TensorId,
    ) -> TensorId {
        let (n, c, inner) = self.channel_layout(x);
        assert_eq!(self.shape(mean), &[c]);
        assert_eq!(self.shape(var), &[c]);
        let xv = self.value(x).to_vec();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mv = self.value(mean).to_vec();
        let vv = self.value(var).to_vec();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (vv[ci] + NORM_EPS).sqrt();
                let base = (ni * c + ci) * inner;
                for t in 0..inner {
                    out[base + t] = gv[ci] * (xv[base + t] - mv[ci]) * inv + bv[ci];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        self.push(Op::BatchNormEval(x, gamma, beta, mean, var), shape, out, ng)
    }

    /// Instance normalization over the spatial axes of `(N,C,H,W)` (or any
    /// rank >= 3 layout) with per-channel affine.
    pub fn instance_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (n, c, inner) = self.channel_layout(x);
        assert!(inner > 0);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let xv = self.value(x).to_vec();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let groups = n * c;
        let mut v = vec![0.0; xv.len()];
        let mut aux = vec![0.0; xv.len() + groups]; // xhat then invstd per group
        for g in 0..groups {
            let base = g * inner;
            let row = &xv[base..base + inner];
            let mean = row.iter().sum::<f64>() / inner as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / inner as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            aux[xv.len() + g] = inv;
            let ci = g % c;
            for t in 0..inner {
                let xh = (row[t] - mean) * inv;
                aux[base + t] = xh;
                v[base + t] = gv[ci] * xh + bv[ci];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        let id = self.push(Op::InstanceNorm(x, gamma, beta), shape, v, ng);
        self.nodes[id.0].aux = aux;
        id
    }

    // ---- convolutions -------------------------------------------------

    /// 2-D convolution: x (N,Ci,H,W), w (Co,Ci,kh,kw), b (Co).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(self.shape(b), &[co]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for ni in 0..n {
                for coi in 0..co {
                    let obase = (ni * co + coi) * oh * ow;
                    for cii in 0..ci {
                        let ibase = (ni * ci + cii) * h * wd;
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let wval = wv[((coi * ci + cii) * kh + khi) * kw + kwi];
                                if wval == 0.0 {
                                    continue;
                                }
                                for ohi in 0..oh {
                                    let ih = (ohi * stride + khi) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let irow = ibase + ih as usize * wd;
                                    let orow = obase + ohi * ow;
                                    for owi in 0..ow {
                                        let iw = (owi * stride + kwi) as isize - pad as isize;
                                        if iw < 0 || iw >= wd as isize {
                                            continue;
                                        }
                                        out[orow + owi] += wval * xv[irow + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                    let bvv = bv[coi];
                    for e in &mut out[obase..obase + oh * ow] {
                        *e += bvv;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Op::Conv2d { x, w, b, stride, pad },
            vec![n, co, oh, ow],
            out,
            ng,
        )
    }

    /// 1-D convolution: x (N,Ci,L), w (Co,Ci,k), b (Co).
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 3);
        assert_eq!(xs[1], ws[1], "conv1d channel mismatch");
        let (n, ci, l) = (xs[0], xs[1], xs[2]);
        let (co, _, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(self.shape(b), &[co]);
        let ol = (l + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * ol];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for ni in 0..n {
                for coi in 0..co {
                    let obase = (ni * co + coi) * ol;
                    for cii in 0..ci {
                        let ibase = (ni * ci + cii) * l;
                        for ki in 0..k {
                            let wval = wv[(coi * ci + cii) * k + ki];
                            for oli in 0..ol {
                                let il = (oli * stride + ki) as isize - pad as isize;
                                if il < 0 || il >= l as isize {
                                    continue;
                                }
                                out[obase + oli] += wval * xv[ibase + il as usize];
                            }
                        }
                    }
                    let bvv = bv[coi];
                    for e in &mut out[obase..obase + ol] {
                        *e += bvv;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Op::Conv1d { x, w, b, stride, pad },
            vec![n, co, ol],
            out,
            ng,
        )
    }

    /// Transposed 2-D convolution: x (N,Ci,H,W), w (Ci,Co,kh,kw), stride s,
    /// no padding; output (N,Co,(H-1)s+kh,(W-1)s+kw).
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    ) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (_, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(self.shape(b), &[co]);
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let mut out = vec![0.0; n * co * oh * ow];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for ni in 0..n {
                for cii in 0..ci {
                    let ibase = (ni * ci + cii) * h * wd;
                    for coi in 0..co {
                        let obase = (ni * co + coi) * oh * ow;
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let wval = wv[((cii * co + coi) * kh + khi) * kw + kwi];
                                if wval == 0.0 {
                                    continue;
                                }
                                for hi in 0..h {
                                    let orow = obase + (hi * stride + khi) * ow + kwi;
                                    let irow = ibase + hi * wd;
                                    for wi in 0..wd {
                                        out[orow + wi * stride] += wval * xv[irow + wi];
                                    }
                                }
                            }
                        }
                    }
                }
                for coi in 0..co {
                    let obase = (ni * co + coi) * oh * ow;
                    let bvv = bv[coi];
                    for e in &mut out[obase..obase + oh * ow] {
                        *e += bvv;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Op::ConvTranspose2d { x, w, b, stride },
            vec![n, co, oh, ow],
            out,
            ng,
        )
    }

    /// Adaptive average pooling to `(oh, ow)`.
    pub fn adaptive_avg_pool2d(&mut self, x: TensorId, oh: usize, ow: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; n * c * oh * ow];
        {
            let xv = self.value(x);
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * oh * ow;
                for i in 0..oh {
                    let h0 = i * h / oh;
                    let h1 = ((i + 1) * h + oh - 1) / oh;
                    for j in 0..ow {
                        let w0 = j * w / ow;
                        let w1 = ((j + 1) * w + ow - 1) / ow;
                        let mut s = 0.0;
                        for hh in h0..h1 {
                            for ww in w0..w1 {
                                s += xv[ibase + hh * w + ww];
                            }
                        }
                        out[obase + i * ow + j] = s / ((h1 - h0) * (w1 - w0)) as f64;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(Op::AdaptiveAvgPool2d(x, oh, ow), vec![n, c, oh, ow], out, ng)
    }

    // ---- shape juggling -----------------------------------------------

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        assert_eq!(numel(shape), self.value(x).len(), "reshape size mismatch");
        let v = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Reshape(x), shape.to_vec(), v, ng)
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(axes.len(), xs.len());
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let v = permute_values(self.value(x), &xs, axes);
        let ng = self.needs(x);
        self.push(Op::Permute(x, axes.to_vec()), out_shape, v, ng)
    }

    pub fn concat_last(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let dims: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(&self.shape(p)[..self.shape(p).len() - 1], &lead[..]);
                *self.shape(p).last().unwrap()
            })
            .collect();
        let total: usize = dims.iter().sum();
        let mut v = vec![0.0; rows * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let d = dims[pi];
            let pv = self.value(p);
            for r in 0..rows {
                v[r * total + off..r * total + off + d].copy_from_slice(&pv[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatLast(parts.to_vec()), shape, v, ng)
    }

    /// Mean over one axis.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert!(axis < xs.len());
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut v = vec![0.0; outer * inner];
        {
            let xv = self.value(x);
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for t in 0..inner {
                        v[o * inner + t] += xv[base + t];
                    }
                }
            }
            for e in v.iter_mut() {
                *e /= mid as f64;
            }
        }
        let mut shape = xs[..axis].to_vec();
        shape.extend_from_slice(&xs[axis + 1..]);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(x);
        self.push(Op::MeanAxis(x, axis), shape, v, ng)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        let s: f64 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(Op::MeanAll(x), vec![1], vec![s / n as f64], ng)
    }

    /// Per-row unit-power scaling: each row of `x (N, 2*P)` encodes P complex
    /// symbols as interleaved reals; rows are scaled so the mean per-symbol
    /// power is exactly 1.
    pub fn power_normalize(&mut self, x: TensorId, pairs: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        assert_eq!(d, 2 * pairs, "power_normalize expects 2*pairs reals per row");
        let rows = self.value(x).len() / d;
        let mut v = vec![0.0; rows * d];
        let mut aux = vec![0.0; rows];
        {
            let xv = self.value(x);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let power = row.iter().map(|a| a * a).sum::<f64>() / pairs as f64;
                if power <= 0.0 {
                    return Err(Error::Numeric(
                        "zero-power symbol block cannot be normalized".into(),
                    ));
                }
                let s = 1.0 / power.sqrt();
                aux[r] = s;
                for j in 0..d {
                    v[r * d + j] = row[j] * s;
                }
            }
        }
        let ng = self.needs(x);
        let id = self.push(Op::PowerNormalize(x, pairs), xs, v, ng);
        self.nodes[id.0].aux = aux;
        Ok(id)
    }

    // ---- backward -----------------------------------------------------

    fn ensure_grad(&mut self, id: TensorId) {
        if self.nodes[id.0].grad.is_empty() {
            let n = self.nodes[id.0].value.len();
            self.nodes[id.0].grad = vec![0.0; n];
        }
    }

    /// Reverse-mode sweep seeding d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        for n in &mut self.nodes {
            n.grad.clear();
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_empty() || !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = std::mem::take(&mut self.nodes[idx].grad);
            self.backprop_node(idx, &op, &g);
            self.nodes[idx].grad = g;
        }
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.needs(id) {
            return;
        }
        self.ensure_grad(id);
        for (gv, dv) in self.nodes[id.0].grad.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    fn accumulate_fn(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        self.ensure_grad(id);
        let mut g = std::mem::take(&mut self.nodes[id.0].grad);
        f(&mut g);
        self.nodes[id.0].grad = g;
    }

    fn backprop_node(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                self.accumulate_fn(*b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                self.accumulate_fn(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate_fn(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate_fn(*a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, g);
                let d = self.shape(*b)[0];
                self.accumulate_fn(*b, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                });
            }
            Op::BroadcastAddChannel(x, v) => {
                self.accumulate(*x, g);
                let xs = self.shape(*x).to_vec();
                let hw = xs[2] * xs[3];
                self.accumulate_fn(*v, |gv| {
                    for (i, gg) in g.iter().enumerate() {
                        gv[i / hw] += gg;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                // dA = G . B^T
                self.accumulate_fn(*a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for (gv, bb) in grow.iter().zip(brow) {
                                s += gv * bb;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T . G
                self.accumulate_fn(*b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for (bb, gv) in brow.iter_mut().zip(grow) {
                                *bb += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *self.shape(*b).last().unwrap();
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                self.accumulate_fn(*a, |ga| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gb[i * n + j] * bb[p * n + j];
                                }
                                gab[i * k + p] += s;
                            }
                        }
                    }
                });
                self.accumulate_fn(*b, |gbv| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let gbb = &mut gbv[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = ab[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gbb[p * n + j] += aip * gb[i * n + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).to_vec();
                self.accumulate_fn(*x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::PRelu(x, alpha) => {
                let xv = self.value(*x).to_vec();
                let a = self.value(*alpha)[0];
                self.accumulate_fn(*x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += if xv[i] > 0.0 { g[i] } else { a * g[i] };
                    }
                });
                self.accumulate_fn(*alpha, |ga| {
                    let mut s = 0.0;
                    for i in 0..xv.len() {
                        if xv[i] <= 0.0 {
                            s += g[i] * xv[i];
                        }
                    }
                    ga[0] += s;
                });
            }
            Op::Tanh(x) => {
                let yv = self.nodes[idx].value.clone();
                self.accumulate_fn(*x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[idx].value.clone();
                self.accumulate_fn(*x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let yv = self.nodes[idx].value.clone();
                let d = *self.nodes[idx].shape.last().unwrap();
                self.accumulate_fn(*x, |gx| {
                    for r in 0..yv.len() / d {
                        let y = &yv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(x, gamma, beta) => {
                let d = *self.nodes[idx].shape.last().unwrap();
                let total = self.nodes[idx].value.len();
                let n = total / d;
                let aux = self.nodes[idx].aux.clone();
                let gv = self.value(*gamma).to_vec();
                self.accumulate_fn(*gamma, |gg| {
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * aux[r * d + j];
                        }
                    }
                });
                self.accumulate_fn(*beta, |gb| {
                    for r in 0..n {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                self.accumulate_fn(*x, |gx| {
                    for r in 0..n {
                        let inv = aux[n * d + r];
                        let xh = &aux[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[j];
                        }
                        let df = d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            gx[r * d + j] +=
                                inv * (dxh - sum_dxhat / df - xh[j] * sum_dxhat_xhat / df);
                        }
                    }
                });
            }
            Op::BatchNormTrain(x, gamma, beta) => {
                let (n, c, inner) = self.channel_layout(*x);
                let total = n * c * inner;
                let aux = self.nodes[idx].aux.clone();
                let var = &aux[total + c..total + 2 * c];
                let gv = self.value(*gamma).to_vec();
                self.accumulate_fn(*gamma, |gg| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            for t in 0..inner {
                                gg[ci] += g[base + t] * aux[base + t];
                            }
                        }
                    }
                });
                self.accumulate_fn(*beta, |gb| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            for t in 0..inner {
                                gb[ci] += g[base + t];
                            }
                        }
                    }
                });
                let count = (n * inner) as f64;
                self.accumulate_fn(*x, |gx| {
                    for ci in 0..c {
                        let inv = 1.0 / (var[ci] + NORM_EPS).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for ni in 0..n {
                            let base = (ni * c + ci) * inner;
                            for t in 0..inner {
                                let dxh = g[base + t] * gv[ci];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * aux[base + t];
                            }
                        }
                        for ni in 0..n {
                            let base = (ni * c + ci) * inner;
                            for t in 0..inner {
                                let dxh = g[base + t] * gv[ci];
                                gx[base + t] += inv
                                    * (dxh
                                        - sum_dxhat / count
                                        - aux[base + t] * sum_dxhat_xhat / count);
                            }
                        }
                    }
                });
            }
            Op::BatchNormEval(x, gamma, beta, mean, var) => {
                let (n, c, inner) = self.channel_layout(*x);
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gamma).to_vec();
                let mv = self.value(*mean).to_vec();
                let vv = self.value(*var).to_vec();
                self.accumulate_fn(*gamma, |gg| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let inv = 1.0 / (vv[ci] + NORM_EPS).sqrt();
                            let base = (ni * c + ci) * inner;
                            for t in 0..inner {
                                gg[ci] += g[base + t] * (xv[base + t] - mv[ci]) * inv;
                            }
                        }
                    }
                });
                self.accumulate_fn(*beta, |gb| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            for t in 0..inner {
                                gb[ci] += g[base + t];
                            }
                        }
                    }
                });
                self.accumulate_fn(*x, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let inv = 1.0 / (vv[ci] + NORM_EPS).sqrt();
                            let base = (ni * c + ci) * inner;
                            for t in 0..inner {
                                gx[base + t] += g[base + t] * gv[ci] * inv;
                            }
                        }
                    }
                });
            }
            Op::InstanceNorm(x, gamma, beta) => {
                let (n, c, inner) = self.channel_layout(*x);
                let total = n * c * inner;
                let aux = self.nodes[idx].aux.clone();
                let gv = self.value(*gamma).to_vec();
                self.accumulate_fn(*gamma, |gg| {
                    for gi in 0..n * c {
                        let base = gi * inner;
                        let ci = gi % c;
                        for t in 0..inner {
                            gg[ci] += g[base + t] * aux[base + t];
                        }
                    }
                });
                self.accumulate_fn(*beta, |gb| {
                    for gi in 0..n * c {
                        let base = gi * inner;
                        let ci = gi % c;
                        for t in 0..inner {
                            gb[ci] += g[base + t];
                        }
                    }
                });
                self.accumulate_fn(*x, |gx| {
                    for gi in 0..n * c {
                        let base = gi * inner;
                        let ci = gi % c;
                        let inv = aux[total + gi];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for t in 0..inner {
                            let dxh = g[base + t] * gv[ci];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * aux[base + t];
                        }
                        let df = inner as f64;
                        for t in 0..inner {
                            let dxh = g[base + t] * gv[ci];
                            gx[base + t] +=
                                inv * (dxh - sum_dxhat / df - aux[base + t] * sum_dxhat_xhat / df);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let os = self.nodes[idx].shape.clone();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow) = (os[2], os[3]);
                let xv = self.value(*x).to_vec();
                let wv = self.value(*w).to_vec();
                self.accumulate_fn(*b, |gb| {
                    for ni in 0..n {
                        for coi in 0..co {
                            let obase = (ni * co + coi) * oh * ow;
                            for e in &g[obase..obase + oh * ow] {
                                gb[coi] += e;
                            }
                        }
                    }
                });
                self.accumulate_fn(*w, |gw| {
                    for ni in 0..n {
                        for coi in 0..co {
                            let obase = (ni * co + coi) * oh * ow;
                            for cii in 0..ci {
                                let ibase = (ni * ci + cii) * h * wd;
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let mut s = 0.0;
                                        for ohi in 0..oh {
                                            let ih =
                                                (ohi * stride + khi) as isize - pad as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            let irow = ibase + ih as usize * wd;
                                            let orow = obase + ohi * ow;
                                            for owi in 0..ow {
                                                let iw = (owi * stride + kwi) as isize
                                                    - pad as isize;
                                                if iw < 0 || iw >= wd as isize {
                                                    continue;
                                                }
                                                s += g[orow + owi] * xv[irow + iw as usize];
                                            }
                                        }
                                        gw[((coi * ci + cii) * kh + khi) * kw + kwi] += s;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate_fn(*x, |gx| {
                    for ni in 0..n {
                        for coi in 0..co {
                            let obase = (ni * co + coi) * oh * ow;
                            for cii in 0..ci {
                                let ibase = (ni * ci + cii) * h * wd;
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let wval = wv[((coi * ci + cii) * kh + khi) * kw + kwi];
                                        if wval == 0.0 {
                                            continue;
                                        }
                                        for ohi in 0..oh {
                                            let ih =
                                                (ohi * stride + khi) as isize - pad as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            let irow = ibase + ih as usize * wd;
                                            let orow = obase + ohi * ow;
                                            for owi in 0..ow {
                                                let iw = (owi * stride + kwi) as isize
                                                    - pad as isize;
                                                if iw < 0 || iw >= wd as isize {
                                                    continue;
                                                }
                                                gx[irow + iw as usize] += wval * g[orow + owi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let os = self.nodes[idx].shape.clone();
                let (n, ci, l) = (xs[0], xs[1], xs[2]);
                let (co, _, k) = (ws[0], ws[1], ws[2]);
                let ol = os[2];
                let xv = self.value(*x).to_vec();
                let wv = self.value(*w).to_vec();
                self.accumulate_fn(*b, |gb| {
                    for ni in 0..n {
                        for coi in 0..co {
                            let obase = (ni * co + coi) * ol;
                            for e in &g[obase..obase + ol] {
                                gb[coi] += e;
                            }
                        }
                    }
                });
                self.accumulate_fn(*w, |gw| {
                    for ni in 0..n {
                        for coi in 0..co {
                            let obase = (ni * co + coi) * ol;
                            for cii in 0..ci {
                                let ibase = (ni * ci + cii) * l;
                                for ki in 0..k {
                                    let mut s = 0.0;
                                    for oli in 0..ol {
                                        let il = (oli * stride + ki) as isize - pad as isize;
                                        if il < 0 || il >= l as isize {
                                            continue;
                                        }
                                        s += g[obase + oli] * xv[ibase + il as usize];
                                    }
                                    gw[(coi * ci + cii) * k + ki] += s;
                                }
                            }
                        }
                    }
                });
                self.accumulate_fn(*x, |gx| {
                    for ni in 0..n {
                        for coi in 0..co {
                            let obase = (ni * co + coi) * ol;
                            for cii in 0..ci {
                                let ibase = (ni * ci + cii) * l;
                                for ki in 0..k {
                                    let wval = wv[(coi * ci + cii) * k + ki];
                                    for oli in 0..ol {
                                        let il = (oli * stride + ki) as isize - pad as isize;
                                        if il < 0 || il >= l as isize {
                                            continue;
                                        }
                                        gx[ibase + il as usize] += wval * g[obase + oli];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let stride = *stride;
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let os = self.nodes[idx].shape.clone();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (_, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow) = (os[2], os[3]);
                let xv = self.value(*x).to_vec();
                let wv = self.value(*w).to_vec();
                self.accumulate_fn(*b, |gb| {
                    for ni in 0..n {
                        for coi in 0..co {
                            let obase = (ni * co + coi) * oh * ow;
                            for e in &g[obase..obase + oh * ow] {
                                gb[coi] += e;
                            }
                        }
                    }
                });
                self.accumulate_fn(*w, |gw| {
                    for ni in 0..n {
                        for cii in 0..ci {
                            let ibase = (ni * ci + cii) * h * wd;
                            for coi in 0..co {
                                let obase = (ni * co + coi) * oh * ow;
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let mut s = 0.0;
                                        for hi in 0..h {
                                            let orow = obase + (hi * stride + khi) * ow + kwi;
                                            let irow = ibase + hi * wd;
                                            for wi in 0..wd {
                                                s += xv[irow + wi] * g[orow + wi * stride];
                                            }
                                        }
                                        gw[((cii * co + coi) * kh + khi) * kw + kwi] += s;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate_fn(*x, |gx| {
                    for ni in 0..n {
                        for cii in 0..ci {
                            let ibase = (ni * ci + cii) * h * wd;
                            for coi in 0..co {
                                let obase = (ni * co + coi) * oh * ow;
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let wval = wv[((cii * co + coi) * kh + khi) * kw + kwi];
                                        if wval == 0.0 {
                                            continue;
                                        }
                                        for hi in 0..h {
                                            let orow = obase + (hi * stride + khi) * ow + kwi;
                                            let irow = ibase + hi * wd;
                                            for wi in 0..wd {
                                                gx[irow + wi] += wval * g[orow + wi * stride];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AdaptiveAvgPool2d(x, oh, ow) => {
                let (oh, ow) = (*oh, *ow);
                let xs = self.shape(*x).to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                self.accumulate_fn(*x, |gx| {
                    for nc in 0..n * c {
                        let ibase = nc * h * w;
                        let obase = nc * oh * ow;
                        for i in 0..oh {
                            let h0 = i * h / oh;
                            let h1 = ((i + 1) * h + oh - 1) / oh;
                            for j in 0..ow {
                                let w0 = j * w / ow;
                                let w1 = ((j + 1) * w + ow - 1) / ow;
                                let share = g[obase + i * ow + j] / ((h1 - h0) * (w1 - w0)) as f64;
                                for hh in h0..h1 {
                                    for ww in w0..w1 {
                                        gx[ibase + hh * w + ww] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(*x, g);
            }
            Op::Permute(x, axes) => {
                let out_shape = self.nodes[idx].shape.clone();
                // Inverse permutation maps output grads back to input layout.
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gx = permute_values(g, &out_shape, &inv);
                self.accumulate(*x, &gx);
            }
            Op::ConcatLast(parts) => {
                let lead_rows: usize = {
                    let s = self.nodes[idx].shape.clone();
                    s[..s.len() - 1].iter().product()
                };
                let total = *self.nodes[idx].shape.last().unwrap();
                let mut off = 0;
                for &p in parts {
                    let d = *self.shape(p).last().unwrap();
                    let mut gp = vec![0.0; lead_rows * d];
                    for r in 0..lead_rows {
                        gp[r * d..(r + 1) * d]
                            .copy_from_slice(&g[r * total + off..r * total + off + d]);
                    }
                    self.accumulate(p, &gp);
                    off += d;
                }
            }
            Op::MeanAxis(x, axis) => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let mid = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                self.accumulate_fn(*x, |gx| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for t in 0..inner {
                                gx[base + t] += g[o * inner + t] / mid as f64;
                            }
                        }
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let share = g[0] / n;
                self.accumulate_fn(*x, |gx| {
                    for e in gx.iter_mut() {
                        *e += share;
                    }
                });
            }
            Op::PowerNormalize(x, pairs) => {
                let pairs = *pairs;
                let d = 2 * pairs;
                let xv = self.value(*x).to_vec();
                let scales = self.nodes[idx].aux.clone();
                self.accumulate_fn(*x, |gx| {
                    for r in 0..xv.len() / d {
                        let s = scales[r];
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let coef = s * s * s / pairs as f64;
                        for j in 0..d {
                            gx[r * d + j] += s * gr[j] - coef * row[j] * dot;
                        }
                    }
                });
            }
        }
    }

    /// Sum gradients per bound parameter name. A name bound more than once
    /// accumulates across bindings.
    pub fn collect_grads(&self) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut out: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for (name, id) in &self.bindings {
            let node = &self.nodes[id.0];
            let g = if node.grad.is_empty() {
                vec![0.0; node.value.len()]
            } else {
                node.grad.clone()
            };
            out.entry(name.clone())
                .and_modify(|acc| {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                })
                .or_insert(g);
        }
        out
    }
}

fn permute_values(values: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; values.len()];
    let mut idx = vec![0usize; rank];
    for ov in out.iter_mut() {
        let mut src = 0;
        for (k, &i) in idx.iter().enumerate() {
            src += i * in_strides[axes[k]];
        }
        *ov = values[src];
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}
