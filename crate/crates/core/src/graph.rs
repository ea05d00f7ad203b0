//! A reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every model in the crate (generator, discriminator, encoder, the frozen
//! feature extractors) records its forward pass on a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node returns gradients for every leaf that
//! was registered with `requires_grad`. Operations are coarse (whole
//! convolutions, fused AdaIN) so the tape stays short.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const ADAIN_EPS: f64 = 1e-5;
const PIXEL_NORM_EPS: f64 = 1e-8;
const UNIT_NORM_EPS: f64 = 1e-10;
const MBSTD_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    AdaIn {
        x: Var,
        style: Var,
        xn: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample2x {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    PixelNorm {
        x: Var,
        inv: Vec<f64>,
    },
    ChannelUnitNorm {
        x: Var,
        inv: Vec<f64>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SumSq {
        x: Var,
    },
    SoftplusMean {
        x: Var,
        sign: f64,
    },
    Reshape {
        x: Var,
    },
    CatRows {
        parts: Vec<Var>,
    },
    Row {
        x: Var,
        index: usize,
    },
    RepeatBatch {
        x: Var,
    },
    MinibatchStd {
        x: Var,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf holding a shared tensor; no copy is made.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `x [B, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear expects [B, in]");
        assert_eq!(ws.len(), 2, "linear weight expects [out, in]");
        assert_eq!(xs[1], ws[1], "linear input width");
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; batch * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), fout);
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            (fin as isize, 1),
            self.value(w).data(),
            (1, fin as isize),
            beta,
            &mut out,
            (fout as isize, 1),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(
            Tensor::from_parts(vec![batch, fout], out),
            Op::Linear { x, w, b },
            &parents,
        )
    }

    /// 2-D convolution of `x [B, C, H, W]` with `w [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight expects [O, C, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        let ho = (xs[2] + 2 * pad - k) / stride + 1;
        let wo = (xs[3] + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = geom.cin * k * k;
        let hw = ho * wo;
        let in_per = geom.cin * geom.h * geom.w;
        let out_per = geom.cout * hw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; geom.batch * out_per];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for ob in out.chunks_mut(out_per) {
                for (o, plane) in ob.chunks_mut(hw).enumerate() {
                    plane.fill(bv[o]);
                }
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        let mut cols = Vec::new();
        if geom.is_pointwise() {
            for bi in 0..geom.batch {
                gemm(
                    geom.cout,
                    ckk,
                    hw,
                    wv,
                    (ckk as isize, 1),
                    &xv[bi * in_per..(bi + 1) * in_per],
                    (hw as isize, 1),
                    beta,
                    &mut out[bi * out_per..(bi + 1) * out_per],
                    (hw as isize, 1),
                );
            }
        } else {
            cols = vec![0.0; geom.batch * ckk * hw];
            for bi in 0..geom.batch {
                let col = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
                im2col(&xv[bi * in_per..(bi + 1) * in_per], &geom, col);
                gemm(
                    geom.cout,
                    ckk,
                    hw,
                    wv,
                    (ckk as isize, 1),
                    col,
                    (hw as isize, 1),
                    beta,
                    &mut out[bi * out_per..(bi + 1) * out_per],
                    (hw as isize, 1),
                );
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(
            Tensor::from_parts(vec![geom.batch, geom.cout, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &parents,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self
            .value(x)
            .map(|a| if a >= 0.0 { a } else { slope * a });
        self.push_op(v, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push_op(v, Op::Tanh { x }, &[x])
    }

    /// Instance-normalizes `x [B, C, H, W]` and modulates it with
    /// `style [B, 2C]` as `(1 + scale) * x̂ + bias`.
    pub fn adain(&mut self, x: Var, style: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert_eq!(self.shape(style), &[batch, 2 * ch], "adain style shape");
        let xv = self.value(x).data();
        let sv = self.value(style).data();
        let mut xn = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; batch * ch];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * hw;
                let plane = &xv[off..off + hw];
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + ADAIN_EPS).sqrt();
                inv_std[b * ch + c] = inv;
                let gain = 1.0 + sv[b * 2 * ch + c];
                let bias = sv[b * 2 * ch + ch + c];
                for i in 0..hw {
                    let n = (plane[i] - mean) * inv;
                    xn[off + i] = n;
                    out[off + i] = gain * n + bias;
                }
            }
        }
        self.push_op(
            Tensor::from_parts(xs, out),
            Op::AdaIn {
                x,
                style,
                xn,
                inv_std,
            },
            &[x, style],
        )
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
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
        self.push_op(
            Tensor::from_parts(vec![xs[0], xs[1], 2 * h, 2 * w], out),
            Op::Upsample2x { x },
            &[x],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_op(v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_op(v, Op::Sub { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push_op(v, Op::Scale { x, c }, &[x])
    }

    /// Normalizes each row of `[B, d]` to unit root-mean-square.
    pub fn pixel_norm(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = xs[1];
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut inv = vec![0.0; xs[0]];
        for (r, (src, dst)) in xv.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let s = 1.0 / (ms + PIXEL_NORM_EPS).sqrt();
            inv[r] = s;
            for (o, i) in dst.iter_mut().zip(src) {
                *o = i * s;
            }
        }
        self.push_op(
            Tensor::from_parts(xs, out),
            Op::PixelNorm { x, inv },
            &[x],
        )
    }

    /// Scales every spatial position of `[B, C, H, W]` to unit L2 norm across channels.
    pub fn channel_unit_norm(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut inv = vec![0.0; batch * hw];
        for b in 0..batch {
            for p in 0..hw {
                let mut s = 0.0;
                for c in 0..ch {
                    let v = xv[(b * ch + c) * hw + p];
                    s += v * v;
                }
                let n = 1.0 / (s + UNIT_NORM_EPS).sqrt();
                inv[b * hw + p] = n;
                for c in 0..ch {
                    let i = (b * ch + c) * hw + p;
                    out[i] = xv[i] * n;
                }
            }
        }
        self.push_op(
            Tensor::from_parts(xs, out),
            Op::ChannelUnitNorm { x, inv },
            &[x],
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let hw = xs[2] * xs[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push_op(
            Tensor::from_parts(vec![xs[0], xs[1]], data),
            Op::GlobalAvgPool { x },
            &[x],
        )
    }

    /// Scalar mean of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(s / av.len() as f64);
        self.push_op(v, Op::Mse { a, b }, &[a, b])
    }

    /// Scalar sum of squares.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum_sq());
        self.push_op(v, Op::SumSq { x }, &[x])
    }

    /// Scalar `mean(softplus(sign * x))`.
    pub fn softplus_mean(&mut self, x: Var, sign: f64) -> Var {
        let xv = self.value(x).data();
        let s: f64 = xv.iter().map(|&v| softplus(sign * v)).sum();
        let v = Tensor::scalar(s / xv.len() as f64);
        self.push_op(v, Op::SoftplusMean { x, sign }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .reshaped(shape)
            .expect("reshape element count");
        self.push_op(v, Op::Reshape { x }, &[x])
    }

    pub fn cat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::cat_rows(&refs).expect("cat_rows shape");
        self.push_op(
            v,
            Op::CatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let v = self.value(x).row(index);
        self.push_op(v, Op::Row { x, index }, &[x])
    }

    /// Repeats a `[1, ...]` tensor `times` along the leading axis.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs[0], 1, "repeat_batch expects a leading axis of 1");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let mut shape = xs;
        shape[0] = times;
        self.push_op(
            Tensor::from_parts(shape, data),
            Op::RepeatBatch { x },
            &[x],
        )
    }

    /// Appends one channel holding the across-batch standard deviation,
    /// averaged over every feature position.
    pub fn minibatch_std(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let j = ch * hw;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; j];
        for row in xv.chunks(j) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / batch as f64;
            }
        }
        let mut var = vec![0.0; j];
        for row in xv.chunks(j) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / batch as f64;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v + MBSTD_EPS).sqrt()).collect();
        let stat = std.iter().sum::<f64>() / j as f64;
        let mut data = Vec::with_capacity(batch * (ch + 1) * hw);
        for row in xv.chunks(j) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(stat, hw));
        }
        self.push_op(
            Tensor::from_parts(vec![batch, ch + 1, xs[2], xs[3]], data),
            Op::MinibatchStd { x, mean, std },
            &[x],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; batch * fin];
                    gemm(
                        batch,
                        fout,
                        fin,
                        gd,
                        (fout as isize, 1),
                        self.value(*w).data(),
                        (fin as isize, 1),
                        0.0,
                        &mut dx,
                        (fin as isize, 1),
                    );
                    self.accumulate(grads, *x, &dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        batch,
                        fin,
                        gd,
                        (1, fout as isize),
                        self.value(*x).data(),
                        (fin as isize, 1),
                        0.0,
                        &mut dw,
                        (fin as isize, 1),
                    );
                    self.accumulate(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; fout];
                        for row in gd.chunks(fout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols, gd, grads),
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&a, &d)| if a >= 0.0 { d } else { slope * d })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Tanh { x } => {
                let yv = node.value.data();
                let dx: Vec<f64> = yv.iter().zip(gd).map(|(y, d)| d * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::AdaIn {
                x,
                style,
                xn,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let sv = self.value(*style).data();
                let mut dx = vec![0.0; xn.len()];
                let mut ds = vec![0.0; batch * 2 * ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let off = (bi * ch + c) * hw;
                        let gain = 1.0 + sv[bi * 2 * ch + c];
                        let mut dgain = 0.0;
                        let mut dbias = 0.0;
                        let mut mean_dxn = 0.0;
                        let mut mean_dxn_xn = 0.0;
                        for p in 0..hw {
                            let gv = gd[off + p];
                            let n = xn[off + p];
                            dgain += gv * n;
                            dbias += gv;
                            mean_dxn += gv * gain;
                            mean_dxn_xn += gv * gain * n;
                        }
                        mean_dxn /= hw as f64;
                        mean_dxn_xn /= hw as f64;
                        ds[bi * 2 * ch + c] = dgain;
                        ds[bi * 2 * ch + ch + c] = dbias;
                        let inv = inv_std[bi * ch + c];
                        for p in 0..hw {
                            let dxn = gd[off + p] * gain;
                            dx[off + p] = inv * (dxn - mean_dxn - xn[off + p] * mean_dxn_xn);
                        }
                    }
                }
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, &dx);
                }
                if self.requires_grad(*style) {
                    self.accumulate(grads, *style, &ds);
                }
            }
            Op::Upsample2x { x } => {
                let xs = self.shape(*x);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gd);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::PixelNorm { x, inv } => {
                let xs = self.shape(*x);
                let d = xs[1];
                let yv = node.value.data();
                let mut dx = vec![0.0; yv.len()];
                for r in 0..xs[0] {
                    let y = &yv[r * d..(r + 1) * d];
                    let dy = &gd[r * d..(r + 1) * d];
                    let m = y.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        dx[r * d + k] = (dy[k] - y[k] * m) * inv[r];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ChannelUnitNorm { x, inv } => {
                let xs = self.shape(*x);
                let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let yv = node.value.data();
                let mut dx = vec![0.0; yv.len()];
                for bi in 0..batch {
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for c in 0..ch {
                            let idx = (bi * ch + c) * hw + p;
                            dot += yv[idx] * gd[idx];
                        }
                        let n = inv[bi * hw + p];
                        for c in 0..ch {
                            let idx = (bi * ch + c) * hw + p;
                            dx[idx] = (gd[idx] - yv[idx] * dot) * n;
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let mut dx = vec![0.0; xs.iter().product()];
                for (plane, &gv) in dx.chunks_mut(hw).zip(gd) {
                    plane.fill(gv / hw as f64);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = 2.0 * gd[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                if self.requires_grad(*b) {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &db);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SumSq { x } => {
                let k = 2.0 * gd[0];
                let dx: Vec<f64> = self.value(*x).data().iter().map(|v| k * v).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::SoftplusMean { x, sign } => {
                let xv = self.value(*x).data();
                let k = gd[0] / xv.len() as f64;
                let dx: Vec<f64> = xv.iter().map(|&v| k * sign * sigmoid(sign * v)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, gd),
            Op::CatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::Row { x, index } => {
                let xs = self.shape(*x);
                let stride: usize = xs[1..].iter().product();
                let mut dx = vec![0.0; xs.iter().product()];
                dx[index * stride..(index + 1) * stride].copy_from_slice(gd);
                self.accumulate(grads, *x, &dx);
            }
            Op::RepeatBatch { x } => {
                let n = self.value(*x).len();
                let mut dx = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (d, v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::MinibatchStd { x, mean, std } => {
                let xs = self.shape(*x);
                let (batch, hw) = (xs[0], xs[2] * xs[3]);
                let j = mean.len();
                let xv = self.value(*x).data();
                let mut dstat = 0.0;
                for b in 0..batch {
                    let off = b * (j + hw) + j;
                    dstat += gd[off..off + hw].iter().sum::<f64>();
                }
                let k = dstat / (j * batch) as f64;
                let mut dx = vec![0.0; batch * j];
                for b in 0..batch {
                    let src = &gd[b * (j + hw)..b * (j + hw) + j];
                    for q in 0..j {
                        let i = b * j + q;
                        dx[i] = src[q] + k * (xv[i] - mean[q]) / std[q];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), delta.to_vec()))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let ckk = geom.cin * geom.k * geom.k;
        let hw = geom.ho * geom.wo;
        let in_per = geom.cin * geom.h * geom.w;
        let out_per = geom.cout * hw;
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        if self.requires_grad(w) {
            let mut dw = vec![0.0; geom.cout * ckk];
            for bi in 0..geom.batch {
                let col = if geom.is_pointwise() {
                    &xv[bi * in_per..(bi + 1) * in_per]
                } else {
                    &cols[bi * ckk * hw..(bi + 1) * ckk * hw]
                };
                gemm(
                    geom.cout,
                    hw,
                    ckk,
                    &gd[bi * out_per..(bi + 1) * out_per],
                    (hw as isize, 1),
                    col,
                    (1, hw as isize),
                    1.0,
                    &mut dw,
                    (ckk as isize, 1),
                );
            }
            self.accumulate(grads, w, &dw);
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut db = vec![0.0; geom.cout];
                for ob in gd.chunks(out_per) {
                    for (o, plane) in ob.chunks(hw).enumerate() {
                        db[o] += plane.iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, &db);
            }
        }
        if self.requires_grad(x) {
            let mut dx = vec![0.0; geom.batch * in_per];
            let mut dcol = vec![0.0; ckk * hw];
            for bi in 0..geom.batch {
                let target = if geom.is_pointwise() {
                    &mut dx[bi * in_per..(bi + 1) * in_per]
                } else {
                    &mut dcol[..]
                };
                gemm(
                    ckk,
                    geom.cout,
                    hw,
                    wv,
                    (1, ckk as isize),
                    &gd[bi * out_per..(bi + 1) * out_per],
                    (hw as isize, 1),
                    0.0,
                    target,
                    (hw as isize, 1),
                );
                if !geom.is_pointwise() {
                    col2im(&dcol, geom, &mut dx[bi * in_per..(bi + 1) * in_per]);
                }
            }
            self.accumulate(grads, x, &dx);
        }
    }
}


fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product with explicit
/// (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given dimensions
    // and strides (all are dense row- or column-major layouts of the stated
    // sizes), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a scalar loss from `inputs` and checks each input's analytic
    /// gradient against central differences.
    fn check_grad(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (vi, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("missing gradient");
            for idx in 0..inputs[vi].len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(
                    err < tol || (a - numeric).abs() < 1e-8,
                    "input {vi} index {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn minibatch_std_gradient_and_value() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 2, 2], 1.0, &mut r);
        check_grad(
            vec![x.clone(), w],
            |g, v| {
                let y = g.minibatch_std(v[0]);
                let c = g.constant(Tensor::zeros(&[3, 3, 2, 2]));
                let d = g.sub(y, c);
                let e = g.add(d, v[1]);
                g.sum_sq(e)
            },
            1e-5,
        );
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.minibatch_std(xv);
        let mut stds = 0.0;
        for q in 0..8 {
            let col: Vec<f64> = (0..3).map(|b| x.data()[b * 8 + q]).collect();
            let m = col.iter().sum::<f64>() / 3.0;
            stds += (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        }
        let got = g.value(y).data()[8];
        assert!((got - stds / 8.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn conv_forward_matches_direct_loop() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[4], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), 2, 1);
        let out = g.value(y);
        assert_eq!(out.shape(), &[2, 4, 3, 3]);
        for bi in 0..2 {
            for o in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = b.data()[o];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || iy >= 5 || ix < 0 || ix >= 6 {
                                        continue;
                                    }
                                    s += x.data()[((bi * 3 + c) * 5 + iy as usize) * 6 + ix as usize]
                                        * w.data()[((o * 3 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out.data()[((bi * 4 + o) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_upsample_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let w1 = Tensor::randn(&[2, 3, 1, 1], 0.5, &mut r);
        let t = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut r);
        check_grad(
            vec![x, w, b, w1],
            move |g, v| {
                let u = g.upsample2x(v[0]);
                let c = g.conv2d(u, v[1], Some(v[2]), 1, 1);
                let a = g.leaky_relu(c, 0.2);
                let p = g.conv2d(a, v[3], None, 1, 0);
                let tt = g.constant(t.clone());
                g.mse(p, tt)
            },
            1e-5,
        );
    }

    #[test]
    fn strided_conv_gradient() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        check_grad(
            vec![x, w],
            |g, v| {
                let c = g.conv2d(v[0], v[1], None, 2, 1);
                let t = g.tanh(c);
                g.sum_sq(t)
            },
            1e-5,
        );
    }

    #[test]
    fn adain_gradient() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let s = Tensor::randn(&[2, 6], 0.5, &mut r);
        let t = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        check_grad(
            vec![x, s],
            move |g, v| {
                let y = g.adain(v[0], v[1]);
                let tt = g.constant(t.clone());
                g.mse(y, tt)
            },
            1e-5,
        );
    }

    #[test]
    fn norms_linear_and_pooling_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 5], 1.0, &mut r);
        let w = Tensor::randn(&[4, 5], 0.5, &mut r);
        let b = Tensor::randn(&[4], 0.5, &mut r);
        let img = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
        check_grad(
            vec![x, w, b, img],
            |g, v| {
                let p = g.pixel_norm(v[0]);
                let l = g.linear(p, v[1], Some(v[2]));
                let l = g.leaky_relu(l, 5.0);
                let r1 = g.row(l, 1);
                let r0 = g.row(l, 0);
                let cat = g.cat_rows(&[r1, r0]);
                let s1 = g.sum_sq(cat);
                let n = g.channel_unit_norm(v[3]);
                let pooled = g.global_avg_pool(n);
                let rep = g.reshape(pooled, &[1, 6]);
                let rep = g.repeat_batch(rep, 3);
                let s2 = g.softplus_mean(rep, -1.0);
                let s2 = g.scale(s2, 3.0);
                let tot = g.add(s1, s2);
                let diff = g.sub(tot, s1);
                g.add(tot, diff)
            },
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.variable(Tensor::scalar(3.0));
        let s = g.sub(a, b);
        let l = g.sum_sq(s);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert!((grads.get(b).unwrap().item() - 2.0).abs() < 1e-12);
    }
}
