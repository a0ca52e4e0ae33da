//! Reverse-mode autodiff over a flat op tape.
//!
//! Only what the toy models need: dense matmuls, layer norms, SiLU, 3x3
//! convolutions, pooling/upsampling, embeddings, and fused attention ops.
//! Values are plain shape-tagged buffers; the tape owns everything, and
//! gradients accumulate in a fixed reverse order.

use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Shape-tagged dense buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tn<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tn<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tn { shape: shape.to_vec(), data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Tn { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: S) -> Self {
        Tn { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    /// a[m,k] * b[k,n]
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// a[m,n] + row b[n]
    AddRow(NodeId, NodeId),
    /// x[c,h,w] + per-channel b[c]
    AddChannel(NodeId, NodeId),
    Scale(NodeId, S),
    Silu(NodeId),
    /// Normalize the last dimension of a 2-D input.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: Vec<S> },
    /// Normalize across channels per pixel for a [c,h,w] input.
    NormChannels { x: NodeId, gamma: NodeId, beta: NodeId, cache: Vec<S> },
    Embedding { table: NodeId, ids: Vec<usize> },
    /// Strictly causal multi-head self-attention over rows of x[l,c].
    SelfAttention {
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
        cache: AttnCache<S>,
    },
    /// Multi-head cross-attention: queries from xq[m,c], keys/values from ctx[l,cp].
    CrossAttention {
        xq: NodeId,
        ctx: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
        cache: AttnCache<S>,
    },
    /// Same-padded 3x3 convolution, stride 1.
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    AvgPool2(NodeId),
    UpsampleNearest2(NodeId),
    /// [c,h,w] -> [h*w, c]
    ChwToHwc(NodeId),
    /// [h*w, c] -> [c,h,w]
    HwcToChw { x: NodeId, h: usize, w: usize },
    Reshape(NodeId),
    /// Mean squared error against a constant target.
    MseLoss { pred: NodeId, target: NodeId },
}

#[derive(Debug, Clone)]
pub struct AttnCache<S> {
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    m: Vec<S>,
    rows: usize,
    kv: usize,
}

struct Node<S> {
    value: Tn<S>,
    grad: Option<Tn<S>>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tn<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tn<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tn<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tn<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id.0].value.shape;
        assert_eq!(s.len(), 2, "expected 2-D value");
        (s[0], s[1])
    }

    fn shape3(&self, id: NodeId) -> (usize, usize, usize) {
        let s = &self.nodes[id.0].value.shape;
        assert_eq!(s.len(), 3, "expected 3-D value");
        (s[0], s[1], s[2])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        assert_eq!(k, k2, "matmul inner dim");
        let mut out = vec![S::zero(); m * n];
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            matmul_into(av, bv, &mut out, m, k, n);
        }
        self.push(Tn::from_vec(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape, self.nodes[b.0].value.shape, "add shape");
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        self.push(Tn::from_vec(&shape, data), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape2(a);
        assert_eq!(self.nodes[b.0].value.len(), n, "row bias length");
        let mut data = self.nodes[a.0].value.data.clone();
        let bias = &self.nodes[b.0].value.data;
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bias[c];
            }
        }
        self.push(Tn::from_vec(&[m, n], data), Op::AddRow(a, b))
    }

    pub fn add_channel(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (c, h, w) = self.shape3(x);
        assert_eq!(self.nodes[b.0].value.len(), c, "channel bias length");
        let mut data = self.nodes[x.0].value.data.clone();
        let bias = &self.nodes[b.0].value.data;
        for ch in 0..c {
            for i in 0..h * w {
                data[ch * h * w + i] += bias[ch];
            }
        }
        self.push(Tn::from_vec(&[c, h, w], data), Op::AddChannel(x, b))
    }

    pub fn scale(&mut self, a: NodeId, s: S) -> NodeId {
        let data: Vec<S> = self.nodes[a.0].value.data.iter().map(|&x| x * s).collect();
        let shape = self.nodes[a.0].value.shape.clone();
        self.push(Tn::from_vec(&shape, data), Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        self.push(Tn::from_vec(&shape, data), Op::Silu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (m, n) = self.shape2(x);
        assert_eq!(self.nodes[gamma.0].value.len(), n);
        assert_eq!(self.nodes[beta.0].value.len(), n);
        let eps = S::of(LN_EPS);
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let bt = &self.nodes[beta.0].value.data;
        let mut out = vec![S::zero(); m * n];
        // cache: xhat rows followed by per-row inverse stddev
        let mut cache = vec![S::zero(); m * n + m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() / S::of(n as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>()
                / S::of(n as f64);
            let inv_s = S::one() / (var + eps).sqrt();
            cache[m * n + r] = inv_s;
            for c in 0..n {
                let xhat = (row[c] - mean) * inv_s;
                cache[r * n + c] = xhat;
                out[r * n + c] = xhat * g[c] + bt[c];
            }
        }
        self.push(Tn::from_vec(&[m, n], out), Op::LayerNorm { x, gamma, beta, cache })
    }

    pub fn norm_channels(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (c, h, w) = self.shape3(x);
        assert_eq!(self.nodes[gamma.0].value.len(), c);
        assert_eq!(self.nodes[beta.0].value.len(), c);
        let eps = S::of(LN_EPS);
        let hw = h * w;
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let bt = &self.nodes[beta.0].value.data;
        let mut out = vec![S::zero(); c * hw];
        let mut cache = vec![S::zero(); c * hw + hw];
        for p in 0..hw {
            let mut mean = S::zero();
            for ch in 0..c {
                mean += xv[ch * hw + p];
            }
            mean = mean / S::of(c as f64);
            let mut var = S::zero();
            for ch in 0..c {
                let d = xv[ch * hw + p] - mean;
                var += d * d;
            }
            var = var / S::of(c as f64);
            let inv_s = S::one() / (var + eps).sqrt();
            cache[c * hw + p] = inv_s;
            for ch in 0..c {
                let xhat = (xv[ch * hw + p] - mean) * inv_s;
                cache[ch * hw + p] = xhat;
                out[ch * hw + p] = xhat * g[ch] + bt[ch];
            }
        }
        self.push(Tn::from_vec(&[c, h, w], out), Op::NormChannels { x, gamma, beta, cache })
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (v, d) = self.shape2(table);
        let tv = &self.nodes[table.0].value.data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id out of range");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            Tn::from_vec(&[ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    pub fn self_attention(
        &mut self,
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
    ) -> NodeId {
        let (l, c) = self.shape2(x);
        let (_, inner) = self.shape2(wq);
        assert_eq!(inner % heads, 0);
        let xv = self.nodes[x.0].value.data.clone();
        let q = matmul_new(&xv, &self.nodes[wq.0].value.data, l, c, inner);
        let k = matmul_new(&xv, &self.nodes[wk.0].value.data, l, c, inner);
        let v = matmul_new(&xv, &self.nodes[wv.0].value.data, l, c, inner);
        let d = inner / heads;
        let mut m = vec![S::zero(); heads * l * l];
        let mut att = vec![S::zero(); l * inner];
        for h in 0..heads {
            for i in 0..l {
                // causal: keys j <= i only
                let scale = S::one() / S::of(d as f64).sqrt();
                let mut max = S::neg_infinity();
                let mut scores = vec![S::zero(); i + 1];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut dot = S::zero();
                    for e in 0..d {
                        dot += q[i * inner + h * d + e] * k[j * inner + h * d + e];
                    }
                    *sc = dot * scale;
                    if *sc > max {
                        max = *sc;
                    }
                }
                let mut sum = S::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                for (j, sc) in scores.iter().enumerate() {
                    let p = *sc / sum;
                    m[(h * l + i) * l + j] = p;
                    for e in 0..d {
                        att[i * inner + h * d + e] += p * v[j * inner + h * d + e];
                    }
                }
            }
        }
        let out = matmul_new(&att, &self.nodes[wo.0].value.data, l, inner, c);
        let cache = AttnCache { q, k, v, m, rows: l, kv: l };
        self.push(
            Tn::from_vec(&[l, c], out),
            Op::SelfAttention { x, wq, wk, wv, wo, heads, cache },
        )
    }

    pub fn cross_attention(
        &mut self,
        xq: NodeId,
        ctx: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
    ) -> NodeId {
        let (m_rows, c) = self.shape2(xq);
        let (l, cp) = self.shape2(ctx);
        let (_, inner) = self.shape2(wq);
        assert_eq!(inner % heads, 0);
        let q = matmul_new(&self.nodes[xq.0].value.data, &self.nodes[wq.0].value.data, m_rows, c, inner);
        let k = matmul_new(&self.nodes[ctx.0].value.data, &self.nodes[wk.0].value.data, l, cp, inner);
        let v = matmul_new(&self.nodes[ctx.0].value.data, &self.nodes[wv.0].value.data, l, cp, inner);
        let d = inner / heads;
        let mut m = vec![S::zero(); heads * m_rows * l];
        let mut att = vec![S::zero(); m_rows * inner];
        for h in 0..heads {
            for i in 0..m_rows {
                let scale = S::one() / S::of(d as f64).sqrt();
                let mut max = S::neg_infinity();
                let mut scores = vec![S::zero(); l];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut dot = S::zero();
                    for e in 0..d {
                        dot += q[i * inner + h * d + e] * k[j * inner + h * d + e];
                    }
                    *sc = dot * scale;
                    if *sc > max {
                        max = *sc;
                    }
                }
                let mut sum = S::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                for (j, sc) in scores.iter().enumerate() {
                    let p = *sc / sum;
                    m[(h * m_rows + i) * l + j] = p;
                    for e in 0..d {
                        att[i * inner + h * d + e] += p * v[j * inner + h * d + e];
                    }
                }
            }
        }
        let out = matmul_new(&att, &self.nodes[wo.0].value.data, m_rows, inner, c);
        let cache = AttnCache { q, k, v, m, rows: m_rows, kv: l };
        self.push(
            Tn::from_vec(&[m_rows, c], out),
            Op::CrossAttention { xq, ctx, wq, wk, wv, wo, heads, cache },
        )
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (cin, h, wd) = self.shape3(x);
        let ws = &self.nodes[w.0].value.shape;
        assert_eq!(ws.len(), 4, "conv weight is [cout,cin,3,3]");
        let cout = ws[0];
        assert_eq!(ws[1], cin);
        assert_eq!((ws[2], ws[3]), (3, 3));
        assert_eq!(self.nodes[b.0].value.len(), cout);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![S::zero(); cout * h * wd];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        for ky in 0..3usize {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                acc += xv[(ci * h + sy as usize) * wd + sx as usize]
                                    * wv[((co * cin + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[(co * h + y) * wd + xx] = acc;
                }
            }
        }
        self.push(Tn::from_vec(&[cout, h, wd], out), Op::Conv3x3 { x, w, b })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.shape3(x);
        assert!(h % 2 == 0 && w % 2 == 0);
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].value.data;
        let quarter = S::of(0.25);
        let mut out = vec![S::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = S::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += xv[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                    out[(ch * oh + y) * ow + xx] = acc * quarter;
                }
            }
        }
        self.push(Tn::from_vec(&[c, oh, ow], out), Op::AvgPool2(x))
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.shape3(x);
        let (oh, ow) = (h * 2, w * 2);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![S::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tn::from_vec(&[c, oh, ow], out), Op::UpsampleNearest2(x))
    }

    pub fn chw_to_hwc(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.shape3(x);
        let hw = h * w;
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![S::zero(); hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = xv[ch * hw + p];
            }
        }
        self.push(Tn::from_vec(&[hw, c], out), Op::ChwToHwc(x))
    }

    pub fn hwc_to_chw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let (hw, c) = self.shape2(x);
        assert_eq!(hw, h * w);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![S::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = xv[p * c + ch];
            }
        }
        self.push(Tn::from_vec(&[c, h, w], out), Op::HwcToChw { x, h, w })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        assert_eq!(
            self.nodes[x.0].value.len(),
            shape.iter().product::<usize>(),
            "reshape size"
        );
        let data = self.nodes[x.0].value.data.clone();
        self.push(Tn::from_vec(shape, data), Op::Reshape(x))
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        assert_eq!(self.nodes[pred.0].value.shape, self.nodes[target.0].value.shape);
        let n = self.nodes[pred.0].value.len();
        let mut acc = S::zero();
        for (p, t) in self.nodes[pred.0]
            .value
            .data
            .iter()
            .zip(self.nodes[target.0].value.data.iter())
        {
            let d = *p - *t;
            acc += d * d;
        }
        let loss = acc / S::of(n as f64);
        self.push(Tn::scalar(loss), Op::MseLoss { pred, target })
    }

    fn accumulate(&mut self, id: NodeId, delta: &[S]) {
        let node = &mut self.nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tn::zeros(&node.value.shape));
        for (g, &d) in grad.data.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    /// Backpropagates from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tn::scalar(S::one()));
        for idx in (0..self.nodes.len()).rev() {
            let grad = match &self.nodes[idx].grad {
                Some(g) => g.data.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape2(a);
                    let (_, n) = self.shape2(b);
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    // dA = dC * B^T
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad[i * n + j];
                            for kk in 0..k {
                                da[i * k + kk] += g * bv[kk * n + j];
                            }
                        }
                    }
                    // dB = A^T * dC
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let a_ik = av[i * k + kk];
                            for j in 0..n {
                                db[kk * n + j] += a_ik * grad[i * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddRow(a, b) => {
                    let (m, n) = self.shape2(a);
                    self.accumulate(a, &grad);
                    let mut db = vec![S::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += grad[r * n + c];
                        }
                    }
                    self.accumulate(b, &db);
                }
                Op::AddChannel(x, b) => {
                    let (c, h, w) = self.shape3(x);
                    self.accumulate(x, &grad);
                    let mut db = vec![S::zero(); c];
                    for ch in 0..c {
                        for p in 0..h * w {
                            db[ch] += grad[ch * h * w + p];
                        }
                    }
                    self.accumulate(b, &db);
                }
                Op::Scale(a, s) => {
                    let da: Vec<S> = grad.iter().map(|&g| g * s).collect();
                    self.accumulate(a, &da);
                }
                Op::Silu(a) => {
                    let xv = self.nodes[a.0].value.data.clone();
                    let da: Vec<S> = grad
                        .iter()
                        .zip(xv.iter())
                        .map(|(&g, &x)| {
                            let sg = sigmoid(x);
                            g * sg * (S::one() + x * (S::one() - sg))
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (m, n) = self.shape2(x);
                    let g = self.nodes[gamma.0].value.data.clone();
                    let mut dx = vec![S::zero(); m * n];
                    let mut dg = vec![S::zero(); n];
                    let mut db = vec![S::zero(); n];
                    for r in 0..m {
                        let inv_s = cache[m * n + r];
                        let xhat = &cache[r * n..(r + 1) * n];
                        let gr = &grad[r * n..(r + 1) * n];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for c in 0..n {
                            let dxhat = gr[c] * g[c];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat[c];
                            dg[c] += gr[c] * xhat[c];
                            db[c] += gr[c];
                        }
                        mean_dxhat = mean_dxhat / S::of(n as f64);
                        mean_dxhat_xhat = mean_dxhat_xhat / S::of(n as f64);
                        for c in 0..n {
                            let dxhat = gr[c] * g[c];
                            dx[r * n + c] =
                                (dxhat - mean_dxhat - xhat[c] * mean_dxhat_xhat) * inv_s;
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dg);
                    self.accumulate(beta, &db);
                }
                Op::NormChannels { x, gamma, beta, cache } => {
                    let (c, h, w) = self.shape3(x);
                    let hw = h * w;
                    let g = self.nodes[gamma.0].value.data.clone();
                    let mut dx = vec![S::zero(); c * hw];
                    let mut dg = vec![S::zero(); c];
                    let mut db = vec![S::zero(); c];
                    for p in 0..hw {
                        let inv_s = cache[c * hw + p];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for ch in 0..c {
                            let gr = grad[ch * hw + p];
                            let xhat = cache[ch * hw + p];
                            let dxhat = gr * g[ch];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                            dg[ch] += gr * xhat;
                            db[ch] += gr;
                        }
                        mean_dxhat = mean_dxhat / S::of(c as f64);
                        mean_dxhat_xhat = mean_dxhat_xhat / S::of(c as f64);
                        for ch in 0..c {
                            let gr = grad[ch * hw + p];
                            let xhat = cache[ch * hw + p];
                            let dxhat = gr * g[ch];
                            dx[ch * hw + p] =
                                (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_s;
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dg);
                    self.accumulate(beta, &db);
                }
                Op::Embedding { table, ids } => {
                    let (v, d) = self.shape2(table);
                    let mut dt = vec![S::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += grad[r * d + c];
                        }
                    }
                    self.accumulate(table, &dt);
                }
                Op::SelfAttention { x, wq, wk, wv, wo, heads, cache } => {
                    let (l, c) = self.shape2(x);
                    let inner = cache.q.len() / l;
                    let (dq, dk, dv, datt, dwo) = attention_backward(
                        &grad,
                        &cache,
                        heads,
                        inner,
                        &self.nodes[wo.0].value.data,
                        c,
                    );
                    let _ = datt;
                    // grads through the three input projections
                    let xv = self.nodes[x.0].value.data.clone();
                    let wqv = self.nodes[wq.0].value.data.clone();
                    let wkv = self.nodes[wk.0].value.data.clone();
                    let wvv = self.nodes[wv.0].value.data.clone();
                    let mut dx = vec![S::zero(); l * c];
                    let mut dwq = vec![S::zero(); c * inner];
                    let mut dwk = vec![S::zero(); c * inner];
                    let mut dwv = vec![S::zero(); c * inner];
                    proj_backward(&xv, &wqv, &dq, l, c, inner, &mut dx, &mut dwq);
                    proj_backward(&xv, &wkv, &dk, l, c, inner, &mut dx, &mut dwk);
                    proj_backward(&xv, &wvv, &dv, l, c, inner, &mut dx, &mut dwv);
                    self.accumulate(x, &dx);
                    self.accumulate(wq, &dwq);
                    self.accumulate(wk, &dwk);
                    self.accumulate(wv, &dwv);
                    self.accumulate(wo, &dwo);
                }
                Op::CrossAttention { xq, ctx, wq, wk, wv, wo, heads, cache } => {
                    let (m_rows, c) = self.shape2(xq);
                    let (l, cp) = self.shape2(ctx);
                    let inner = cache.q.len() / m_rows;
                    let (dq, dk, dv, datt, dwo) = attention_backward(
                        &grad,
                        &cache,
                        heads,
                        inner,
                        &self.nodes[wo.0].value.data,
                        c,
                    );
                    let _ = datt;
                    let xv = self.nodes[xq.0].value.data.clone();
                    let cv = self.nodes[ctx.0].value.data.clone();
                    let wqv = self.nodes[wq.0].value.data.clone();
                    let wkv = self.nodes[wk.0].value.data.clone();
                    let wvv = self.nodes[wv.0].value.data.clone();
                    let mut dxq = vec![S::zero(); m_rows * c];
                    let mut dctx = vec![S::zero(); l * cp];
                    let mut dwq = vec![S::zero(); c * inner];
                    let mut dwk = vec![S::zero(); cp * inner];
                    let mut dwv = vec![S::zero(); cp * inner];
                    proj_backward(&xv, &wqv, &dq, m_rows, c, inner, &mut dxq, &mut dwq);
                    proj_backward(&cv, &wkv, &dk, l, cp, inner, &mut dctx, &mut dwk);
                    proj_backward(&cv, &wvv, &dv, l, cp, inner, &mut dctx, &mut dwv);
                    self.accumulate(xq, &dxq);
                    self.accumulate(ctx, &dctx);
                    self.accumulate(wq, &dwq);
                    self.accumulate(wk, &dwk);
                    self.accumulate(wv, &dwv);
                    self.accumulate(wo, &dwo);
                }
                Op::Conv3x3 { x, w, b } => {
                    let (cin, h, wd) = self.shape3(x);
                    let ws = self.nodes[w.0].value.shape.clone();
                    let cout = ws[0];
                    let xv = self.nodes[x.0].value.data.clone();
                    let wv = self.nodes[w.0].value.data.clone();
                    let mut dx = vec![S::zero(); cin * h * wd];
                    let mut dw = vec![S::zero(); cout * cin * 9];
                    let mut db = vec![S::zero(); cout];
                    for co in 0..cout {
                        for y in 0..h {
                            for xx in 0..wd {
                                let g = grad[(co * h + y) * wd + xx];
                                db[co] += g;
                                for ci in 0..cin {
                                    for ky in 0..3usize {
                                        let sy = y as isize + ky as isize - 1;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3usize {
                                            let sx = xx as isize + kx as isize - 1;
                                            if sx < 0 || sx >= wd as isize {
                                                continue;
                                            }
                                            let xi = (ci * h + sy as usize) * wd + sx as usize;
                                            let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                            dw[wi] += g * xv[xi];
                                            dx[xi] += g * wv[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(w, &dw);
                    self.accumulate(b, &db);
                }
                Op::AvgPool2(x) => {
                    let (c, h, w) = self.shape3(x);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = S::of(0.25);
                    let mut dx = vec![S::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let g = grad[(ch * oh + y) * ow + xx] * quarter;
                                for dy in 0..2 {
                                    for dxp in 0..2 {
                                        dx[(ch * h + 2 * y + dy) * w + 2 * xx + dxp] += g;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::UpsampleNearest2(x) => {
                    let (c, h, w) = self.shape3(x);
                    let (oh, ow) = (h * 2, w * 2);
                    let mut dx = vec![S::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[(ch * h + y / 2) * w + xx / 2] +=
                                    grad[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::ChwToHwc(x) => {
                    let (c, h, w) = self.shape3(x);
                    let hw = h * w;
                    let mut dx = vec![S::zero(); c * hw];
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[ch * hw + p] += grad[p * c + ch];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::HwcToChw { x, h, w } => {
                    let (hw, c) = self.shape2(x);
                    let _ = (h, w);
                    let mut dx = vec![S::zero(); hw * c];
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[p * c + ch] += grad[ch * hw + p];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Reshape(x) => {
                    self.accumulate(x, &grad);
                }
                Op::MseLoss { pred, target } => {
                    let n = self.nodes[pred.0].value.len();
                    let scale = S::of(2.0 / n as f64) * grad[0];
                    let dp: Vec<S> = self.nodes[pred.0]
                        .value
                        .data
                        .iter()
                        .zip(self.nodes[target.0].value.data.iter())
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect();
                    let dt: Vec<S> = dp.iter().map(|&v| -v).collect();
                    self.accumulate(pred, &dp);
                    self.accumulate(target, &dt);
                }
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bb) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bb;
            }
        }
    }
}

fn matmul_new<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

/// Shared tail of the fused attention backward: from the output gradient to
/// gradients of per-head Q/K/V and the output projection.
#[allow(clippy::type_complexity)]
fn attention_backward<S: Scalar>(
    grad: &[S],
    cache: &AttnCache<S>,
    heads: usize,
    inner: usize,
    wo: &[S],
    c: usize,
) -> (Vec<S>, Vec<S>, Vec<S>, Vec<S>, Vec<S>) {
    let rows = cache.rows;
    let kv = cache.kv;
    let d = inner / heads;
    let scale = S::one() / S::of(d as f64).sqrt();

    // att = merged M*V rows, needed for dWo; recompute from cache
    let mut att = vec![S::zero(); rows * inner];
    for h in 0..heads {
        for i in 0..rows {
            for j in 0..kv {
                let p = cache.m[(h * rows + i) * kv + j];
                if p == S::zero() {
                    continue;
                }
                for e in 0..d {
                    att[i * inner + h * d + e] += p * cache.v[j * inner + h * d + e];
                }
            }
        }
    }
    // dWo = att^T * grad
    let mut dwo = vec![S::zero(); inner * c];
    for i in 0..rows {
        for kk in 0..inner {
            let a = att[i * inner + kk];
            for j in 0..c {
                dwo[kk * c + j] += a * grad[i * c + j];
            }
        }
    }
    // datt = grad * Wo^T
    let mut datt = vec![S::zero(); rows * inner];
    for i in 0..rows {
        for j in 0..c {
            let g = grad[i * c + j];
            for kk in 0..inner {
                datt[i * inner + kk] += g * wo[kk * c + j];
            }
        }
    }
    let mut dq = vec![S::zero(); rows * inner];
    let mut dk = vec![S::zero(); kv * inner];
    let mut dv = vec![S::zero(); kv * inner];
    for h in 0..heads {
        for i in 0..rows {
            // dM and softmax backward per row
            let mrow = &cache.m[(h * rows + i) * kv..(h * rows + i + 1) * kv];
            let mut dm = vec![S::zero(); kv];
            for (j, dmj) in dm.iter_mut().enumerate() {
                let mut acc = S::zero();
                for e in 0..d {
                    acc += datt[i * inner + h * d + e] * cache.v[j * inner + h * d + e];
                }
                *dmj = acc;
            }
            let mut dot = S::zero();
            for j in 0..kv {
                dot += dm[j] * mrow[j];
            }
            for j in 0..kv {
                let ds = mrow[j] * (dm[j] - dot);
                if ds == S::zero() && mrow[j] == S::zero() {
                    continue;
                }
                for e in 0..d {
                    dq[i * inner + h * d + e] +=
                        ds * cache.k[j * inner + h * d + e] * scale;
                    dk[j * inner + h * d + e] +=
                        ds * cache.q[i * inner + h * d + e] * scale;
                }
            }
            for j in 0..kv {
                let p = mrow[j];
                if p == S::zero() {
                    continue;
                }
                for e in 0..d {
                    dv[j * inner + h * d + e] += p * datt[i * inner + h * d + e];
                }
            }
        }
    }
    (dq, dk, dv, datt, dwo)
}

/// Backward of `proj = input * w`: accumulates into `d_input` and `dw`.
fn proj_backward<S: Scalar>(
    input: &[S],
    w: &[S],
    dproj: &[S],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    d_input: &mut [S],
    dw: &mut [S],
) {
    for i in 0..rows {
        for j in 0..out_dim {
            let g = dproj[i * out_dim + j];
            if g == S::zero() {
                continue;
            }
            for kk in 0..in_dim {
                d_input[i * in_dim + kk] += g * w[kk * out_dim + j];
                dw[kk * out_dim + j] += g * input[i * in_dim + kk];
            }
        }
    }
}
