use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Permitted keys for every query row of an attention pattern, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyLists {
    rows: Vec<Vec<u32>>,
}

impl KeyLists {
    /// Builds key lists from a dense row-major boolean mask.
    pub fn from_dense(n: usize, allowed: &[bool]) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::dim(format!(
                "mask of {} entries is not {n}x{n}",
                allowed.len()
            )));
        }
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| allowed[i * n + j])
                    .map(|j| j as u32)
                    .collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn new(rows: Vec<Vec<u32>>) -> Result<Self> {
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::DegenerateQuery { row: i });
            }
            if r.iter().any(|&j| j as usize >= n) || r.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!(
                    "key list of row {i} is not strictly ascending within 0..{n}"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    fn total(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    top: usize,
    left: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Visits every (column-row, output-pixel, input offset) of the im2col map.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let npix = self.ho * self.wo;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(r * npix + oy * self.wo + ox, src);
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        keys: Arc<KeyLists>,
        heads: usize,
        offsets: Vec<usize>,
        weights: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Transpose(Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    MaskedL1 {
        pred: Var,
        target: Tensor<T>,
        mask: Vec<bool>,
        count: usize,
    },
    MaskedMse {
        pred: Var,
        target: Tensor<T>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only computation record for reverse-mode differentiation.
///
/// Node order is a valid topological order. One record serves one
/// forward/backward pass and is then dropped.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every parameter of a store; untouched parameters are zero.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads.iter_mut().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    /// Global L2 norm over all parameters.
    pub fn global_norm(&self) -> T {
        self.grads.iter().map(Tensor::sq_norm).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Trainable leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul of {} and {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add of {} and {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul of {} and {}",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let vb = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(vb) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(b).numel() != d {
            return Err(Error::dim(format!(
                "bias {} does not match last axis of {}",
                shape_str(self.shape(b)),
                shape_str(self.shape(x))
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(b).numel() != c {
            return Err(Error::dim(format!(
                "channel bias {} does not match {}",
                shape_str(self.shape(b)),
                shape_str(self.shape(x))
            )));
        }
        let per = self.value(x).numel() / c.max(1);
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            for o in plane {
                *o += bias[ch];
            }
        }
        Ok(self.push(out, Op::AddChannelBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Normalises over the last axis then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm over {} with gain {} and bias {}",
                shape_str(xv.shape()),
                shape_str(self.shape(gain)),
                shape_str(self.shape(bias))
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let dn = T::c(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            let o = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Multi-head scaled dot-product attention restricted to `keys`.
    ///
    /// `q`, `k`, `v` are `[S, d]` with `d` split into `heads` contiguous
    /// column blocks. Keys absent from a query's list receive weight zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        keys: Arc<KeyLists>,
        heads: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::dim(format!(
                "attention q {} k {} v {}",
                shape_str(&sq),
                shape_str(self.shape(k)),
                shape_str(self.shape(v))
            )));
        }
        let (s, d) = (sq[0], sq[1]);
        if keys.len() != s {
            return Err(Error::dim(format!(
                "attention pattern has {} rows for {s} tokens",
                keys.len()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("d_model {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut offsets = Vec::with_capacity(s + 1);
        let mut acc = 0;
        for i in 0..s {
            offsets.push(acc);
            acc += keys.row(i).len();
        }
        offsets.push(acc);
        let total = keys.total();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![T::zero(); heads * total];
        let mut out = Tensor::zeros(&[s, d]);
        let o = out.data_mut();
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..s {
                let row = keys.row(i);
                let w = &mut weights[h * total + offsets[i]..h * total + offsets[i + 1]];
                let qi = &qv[i * d + c0..i * d + c0 + dh];
                let mut max = T::neg_infinity();
                for (wj, &j) in w.iter_mut().zip(row) {
                    let kj = &kv[j as usize * d + c0..j as usize * d + c0 + dh];
                    let sc = dot(qi, kj) * scale;
                    *wj = sc;
                    if sc > max {
                        max = sc;
                    }
                }
                let mut z = T::zero();
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    z += *wj;
                }
                let oi = &mut o[i * d + c0..i * d + c0 + dh];
                for (wj, &j) in w.iter_mut().zip(row) {
                    *wj /= z;
                    let vj = &vv[j as usize * d + c0..j as usize * d + c0 + dh];
                    for (oo, &x) in oi.iter_mut().zip(vj) {
                        *oo += *wj * x;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                keys,
                heads,
                offsets,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Cross-correlation with same padding, then striding.
    ///
    /// `x` is `[C, H, W]`, `kernels` is `[C', C, kh, kw]`; the output is
    /// `[C', ceil(H / stride), ceil(W / stride)]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(kernels));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::dim(format!(
                "conv2d input {} with kernels {}",
                shape_str(sx),
                shape_str(sw)
            )));
        }
        if sw.iter().any(|&e| e == 0) || stride == 0 {
            return Err(Error::dim(format!(
                "conv2d kernels {} with stride {stride} have a zero extent",
                shape_str(sw)
            )));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
        if kh > h + pad_h || kw > w + pad_w {
            return Err(Error::dim("conv2d kernel larger than padded input".to_string()));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            ho,
            wo,
            top: pad_h / 2,
            left: pad_w / 2,
        };
        let npix = ho * wo;
        let mut cols = vec![T::zero(); geom.patch() * npix];
        let xv = self.value(x).data();
        geom.for_each(|dst, src| cols[dst] = xv[src]);
        let mut out = Tensor::zeros(&[c_out, ho, wo]);
        T::gemm(
            c_out,
            geom.patch(),
            npix,
            T::one(),
            self.value(kernels).data(),
            geom.patch() as isize,
            1,
            &cols,
            npix as isize,
            1,
            T::zero(),
            out.data_mut(),
            npix as isize,
            1,
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w: kernels,
                geom,
                cols,
            },
            &[x, kernels],
        ))
    }

    /// Feature-wise modulation `(1 + gamma[c]) * x[c, ...] + beta[c]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(format!(
                "FiLM on {} with gamma {} and beta {}",
                shape_str(self.shape(x)),
                shape_str(self.shape(gamma)),
                shape_str(self.shape(beta))
            )));
        }
        let per = self.value(x).numel() / c.max(1);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            let s = T::one() + g[ch];
            for o in plane {
                *o = s * *o + b[ch];
            }
        }
        Ok(self.push(out, Op::Film { x, gamma, beta }, &[x, gamma, beta]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose of {}", shape_str(s))));
        }
        let out = transpose(self.value(x));
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.last_dim());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            if r >= n {
                return Err(Error::Range { index: r, size: n });
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero `[rows, d]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.rows() != idx.len() {
            return Err(Error::dim(format!(
                "scatter of {} rows with {} indices",
                xv.rows(),
                idx.len()
            )));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        for (i, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::Range {
                    index: r,
                    size: rows,
                });
            }
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(xv.row(i));
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let d = self.value(first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.last_dim() != d {
                return Err(Error::dim(format!(
                    "concat_rows of widths {d} and {}",
                    pv.last_dim()
                )));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d.max(1);
        let out = Tensor::new(&[rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean absolute error over entries where `mask` is set.
    ///
    /// The subgradient at zero error is zero.
    pub fn masked_l1(&mut self, pred: Var, target: Tensor<T>, mask: Vec<bool>) -> Result<Var> {
        let (count, value) = self.masked_reduce(pred, &target, &mask, |e| e.abs())?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedL1 {
                pred,
                target,
                mask,
                count,
            },
            &[pred],
        ))
    }

    /// Mean squared error over entries where `mask` is set.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor<T>, mask: Vec<bool>) -> Result<Var> {
        let (count, value) = self.masked_reduce(pred, &target, &mask, |e| e * e)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            },
            &[pred],
        ))
    }

    fn masked_reduce(
        &self,
        pred: Var,
        target: &Tensor<T>,
        mask: &[bool],
        f: impl Fn(T) -> T,
    ) -> Result<(usize, T)> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() || mask.len() != target.numel() {
            return Err(Error::dim(format!(
                "loss over prediction {} with target {} and {} mask flags",
                shape_str(pv.shape()),
                shape_str(target.shape()),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok((0, T::zero()));
        }
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &t), _)| f(p - t))
            .sum();
        Ok((count, total / T::c(count as f64)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients::zeros(store);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let dst = out.get_mut(*id);
                if dst.shape() != g.shape() {
                    return Err(Error::dim(format!(
                        "gradient {} for parameter {}",
                        shape_str(g.shape()),
                        shape_str(dst.shape())
                    )));
                }
                dst.add_assign(&g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, p, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(&[m, p]);
                    T::gemm(
                        m,
                        n,
                        p,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::zero(),
                        da.data_mut(),
                        p as isize,
                        1,
                    );
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[p, n]);
                    T::gemm(
                        p,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        p as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
                if self.needs(*a) {
                    acc(*a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (x, &y) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = g;
                    for (x, &y) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    acc(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*b) {
                    let bs = self.shape(*b);
                    let d = g.last_dim();
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new(bs, db)?);
                }
                if self.needs(*x) {
                    acc(*x, g);
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.needs(*b) {
                    let c = self.value(*b).numel();
                    let per = (g.numel() / c.max(1)).max(1);
                    let db: Vec<T> = g.data().chunks(per).map(|p| p.iter().copied().sum()).collect();
                    acc(*b, Tensor::new(self.shape(*b), db)?);
                }
                if self.needs(*x) {
                    acc(*x, g);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(*x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.last_dim();
                let rows = g.rows();
                let gv = self.value(*gain).data();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let dy = g.data()[r * d + j];
                            dg[j] += dy * xhat[r * d + j];
                            db[j] += dy;
                        }
                    }
                    if self.needs(*gain) {
                        acc(*gain, Tensor::new(self.shape(*gain), dg)?);
                    }
                    if self.needs(*bias) {
                        acc(*bias, Tensor::new(self.shape(*bias), db)?);
                    }
                }
                if self.needs(*x) {
                    let dn = T::c(d as f64);
                    let mut dx = Tensor::zeros(g.shape());
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh /= dn;
                        mean_dhh /= dn;
                        let o = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            o[j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x) => {
                let mut dx = g;
                for (o, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *o *= gelu_grad(v);
                }
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                keys,
                heads,
                offsets,
                weights,
            } => {
                let (s, d) = (g.shape()[0], g.shape()[1]);
                let dh = d / heads;
                let scale = T::one() / T::c(dh as f64).sqrt();
                let total = offsets[s];
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = Tensor::zeros(&[s, d]);
                let mut dk = Tensor::zeros(&[s, d]);
                let mut dv = Tensor::zeros(&[s, d]);
                let mut dw = Vec::new();
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..s {
                        let row = keys.row(i);
                        let w = &weights[h * total + offsets[i]..h * total + offsets[i + 1]];
                        let gi = &g.data()[i * d + c0..i * d + c0 + dh];
                        dw.clear();
                        let mut wdw = T::zero();
                        for (&wj, &j) in w.iter().zip(row) {
                            let j = j as usize;
                            let vj = &vv[j * d + c0..j * d + c0 + dh];
                            let x = dot(gi, vj);
                            wdw += wj * x;
                            dw.push(x);
                            let dvj = &mut dv.data_mut()[j * d + c0..j * d + c0 + dh];
                            for (o, &gg) in dvj.iter_mut().zip(gi) {
                                *o += wj * gg;
                            }
                        }
                        let qi = &qv[i * d + c0..i * d + c0 + dh];
                        for ((&wj, &j), &x) in w.iter().zip(row).zip(&dw) {
                            let j = j as usize;
                            let ds = wj * (x - wdw) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &kv[j * d + c0..j * d + c0 + dh];
                            let dqi = &mut dq.data_mut()[i * d + c0..i * d + c0 + dh];
                            for (o, &kk) in dqi.iter_mut().zip(kj) {
                                *o += ds * kk;
                            }
                            let dkj = &mut dk.data_mut()[j * d + c0..j * d + c0 + dh];
                            for (o, &qq) in dkj.iter_mut().zip(qi) {
                                *o += ds * qq;
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    acc(*q, dq);
                }
                if self.needs(*k) {
                    acc(*k, dk);
                }
                if self.needs(*v) {
                    acc(*v, dv);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let npix = geom.ho * geom.wo;
                let patch = geom.patch();
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.shape(*w));
                    T::gemm(
                        geom.c_out,
                        npix,
                        patch,
                        T::one(),
                        g.data(),
                        npix as isize,
                        1,
                        cols,
                        1,
                        npix as isize,
                        T::zero(),
                        dw.data_mut(),
                        patch as isize,
                        1,
                    );
                    acc(*w, dw);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); patch * npix];
                    T::gemm(
                        patch,
                        geom.c_out,
                        npix,
                        T::one(),
                        self.value(*w).data(),
                        1,
                        patch as isize,
                        g.data(),
                        npix as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        npix as isize,
                        1,
                    );
                    let mut dx = Tensor::zeros(&[geom.c_in, geom.h, geom.w]);
                    let dxd = dx.data_mut();
                    geom.for_each(|col, src| dxd[src] += dcols[col]);
                    acc(*x, dx);
                }
            }
            Op::Film { x, gamma, beta } => {
                let c = self.shape(*x)[0];
                let per = (g.numel() / c.max(1)).max(1);
                let gm = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let xv = self.value(*x).data();
                    let dg: Vec<T> = g
                        .data()
                        .chunks(per)
                        .zip(xv.chunks(per))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(*gamma, Tensor::new(self.shape(*gamma), dg)?);
                }
                if self.needs(*beta) {
                    let db: Vec<T> = g.data().chunks(per).map(|p| p.iter().copied().sum()).collect();
                    acc(*beta, Tensor::new(self.shape(*beta), db)?);
                }
                if self.needs(*x) {
                    let mut dx = g;
                    for (ch, plane) in dx.data_mut().chunks_mut(per).enumerate() {
                        let s = T::one() + gm[ch];
                        for o in plane {
                            *o *= s;
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Transpose(x) => acc(*x, transpose(&g)),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshaped(&shape)?);
            }
            Op::GatherRows { x, idx } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = g.last_dim();
                for (i, &r) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, dx);
            }
            Op::ScatterRows { x, idx } => {
                let d = g.last_dim();
                let mut data = Vec::with_capacity(idx.len() * d);
                for &r in idx {
                    data.extend_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(self.shape(*x), data)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        let slice = g.data()[start..start + n].to_vec();
                        acc(p, Tensor::new(self.shape(p), slice)?);
                    }
                    start += n;
                }
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                count,
            } => {
                let mut dp = Tensor::zeros(self.shape(*pred));
                if *count > 0 {
                    let scale = g.data()[0] / T::c(*count as f64);
                    let pv = self.value(*pred).data();
                    for (i, o) in dp.data_mut().iter_mut().enumerate() {
                        if mask[i] {
                            let e = pv[i] - target.data()[i];
                            *o = if e > T::zero() {
                                scale
                            } else if e < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
                acc(*pred, dp);
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                let mut dp = Tensor::zeros(self.shape(*pred));
                if *count > 0 {
                    let scale = g.data()[0] * T::c(2.0) / T::c(*count as f64);
                    let pv = self.value(*pred).data();
                    for (i, o) in dp.data_mut().iter_mut().enumerate() {
                        if mask[i] {
                            *o = scale * (pv[i] - target.data()[i]);
                        }
                    }
                }
                acc(*pred, dp);
            }
        }
        Ok(())
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn transpose<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (a, b) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[b, a]);
    let src = x.data();
    let dst = out.data_mut();
    for i in 0..a {
        for j in 0..b {
            dst[j * a + i] = src[i * b + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}
