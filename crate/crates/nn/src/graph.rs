//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Operations execute eagerly when they are pushed onto the [`Graph`]; the
//! node list is therefore already in topological order and
//! [`Graph::backward`] only has to walk it in reverse.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MulScalar { x: Var, s: Var },
    AddScalar { x: Var, s: Var },
    AddChannel { x: Var, v: Var },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Mse(Var, Var),
    MeanSquare(Var),
    Warp { image: Var, flow: Var },
    DiffX(Var),
    DiffY(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Execution tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are still reported for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a parameter from `store` so its gradient is collected.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Stride-1 "same" convolution. `w` is `(out, in, k, k)` with odd `k`,
    /// `b` is `(out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::Conv2d { x, w, b })
    }

    /// `x (n, in) · wᵀ + b` with `w (out, in)` and `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (n, inp) = (xv.shape()[0], xv.shape()[1]);
        let outp = wv.shape()[0];
        assert_eq!(wv.shape()[1], inp, "linear: weight/input width mismatch");
        let mut out = vec![0.0; n * outp];
        for i in 0..n {
            for o in 0..outp {
                let mut acc = bv.data()[o];
                for k in 0..inp {
                    acc += xv.data()[i * inp + k] * wv.data()[o * inp + k];
                }
                out[i * outp + o] = acc;
            }
        }
        let out = Tensor::from_vec(&[n, outp], out).expect("linear output");
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        self.push(out, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        self.push(out, Op::MulScalar { x, s })
    }

    /// Add the single-element tensor `s` to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v + sv);
        self.push(out, Op::AddScalar { x, s })
    }

    /// Broadcast-add `v (n, c)` over the spatial axes of `x (n, c, h, w)`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let vv = self.value(v);
        assert_eq!(vv.shape(), [n, c], "add_channel: bias shape");
        let mut out = xv.clone();
        let hw = h * w;
        for (plane, &bias) in out.data_mut().chunks_mut(hw).zip(vv.data()) {
            for p in plane {
                *p += bias;
            }
        }
        self.push(out, Op::AddChannel { x, v })
    }

    /// 2×2 average pooling; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let src = xv.data();
        for plane in 0..n * c {
            let s = &src[plane * h * w..];
            let d = &mut out[plane * oh * ow..];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    d[y * ow + x] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out).expect("pool output");
        self.push(out, Op::AvgPool2(x))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let src = xv.data();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    d[y * ow + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out).expect("upsample output");
        self.push(out, Op::Upsample2(x))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dims4();
        let (nb, cb, hb, wb) = bv.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: incompatible shapes");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], out).expect("concat output");
        self.push(out, Op::Concat(a, b))
    }

    /// Mean squared difference, a single-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse: shape mismatch");
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(sum / av.len() as f64);
        self.push(out, Op::Mse(a, b))
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sum: f64 = xv.data().iter().map(|v| v * v).sum();
        let out = Tensor::scalar(sum / xv.len() as f64);
        self.push(out, Op::MeanSquare(x))
    }

    /// Backward bilinear warp: `out(p) = image(p + flow(p))` with
    /// clamp-to-edge sampling. `flow` is `(n, 2, h, w)` holding `(dx, dy)`
    /// in pixels.
    pub fn warp(&mut self, image: Var, flow: Var) -> Var {
        let out = warp_forward(self.value(image), self.value(flow));
        self.push(out, Op::Warp { image, flow })
    }

    /// Forward differences along the column axis, `(n, c, h, w - 1)`.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = Vec::with_capacity(n * c * h * (w - 1));
        for row in xv.data().chunks(w) {
            for pair in row.windows(2) {
                out.push(pair[1] - pair[0]);
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w - 1], out).expect("diff_x output");
        self.push(out, Op::DiffX(x))
    }

    /// Forward differences along the row axis, `(n, c, h - 1, w)`.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = Vec::with_capacity(n * c * (h - 1) * w);
        for plane in xv.data().chunks(h * w) {
            for y in 0..h - 1 {
                for x in 0..w {
                    out.push(plane[(y + 1) * w + x] - plane[y * w + x]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h - 1, w], out).expect("diff_y output");
        self.push(out, Op::DiffY(x))
    }

    /// Gradients of the single-element node `loss` with respect to the
    /// leaves of the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match self.nodes[idx].op.clone() {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) =
                        conv2d_backward(self.value(x), self.value(w), &g);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(x);
                    let wv = self.value(w);
                    let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                    let outp = wv.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dw = Tensor::zeros(wv.shape());
                    let mut db = Tensor::zeros(&[outp]);
                    for i in 0..n {
                        for o in 0..outp {
                            let go = g.data()[i * outp + o];
                            db.data_mut()[o] += go;
                            for k in 0..inp {
                                dx.data_mut()[i * inp + k] += go * wv.data()[o * inp + k];
                                dw.data_mut()[o * inp + k] += go * xv.data()[i * inp + k];
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                }
                Op::Silu(x) => {
                    let xv = self.value(x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.map(|v| -v));
                    accumulate(&mut grads, a, g);
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, x, g.map(|v| v * factor));
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(s).data()[0];
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    accumulate(&mut grads, s, Tensor::full(self.value(s).shape(), ds));
                    accumulate(&mut grads, x, g.map(|v| v * sv));
                }
                Op::AddScalar { x, s } => {
                    accumulate(&mut grads, s, Tensor::full(self.value(s).shape(), g.sum()));
                    accumulate(&mut grads, x, g);
                }
                Op::AddChannel { x, v } => {
                    let (_, _, h, w) = g.dims4();
                    let dv: Vec<f64> = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    let dv = Tensor::from_vec(self.value(v).shape(), dv).expect("add_channel grad");
                    accumulate(&mut grads, v, dv);
                    accumulate(&mut grads, x, g);
                }
                Op::AvgPool2(x) => {
                    let (n, c, h, w) = self.value(x).dims4();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let d = dx.data_mut();
                    for plane in 0..n * c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = 0.25 * g.data()[plane * oh * ow + y * ow + x];
                                let i = plane * h * w + 2 * y * w + 2 * x;
                                d[i] += gv;
                                d[i + 1] += gv;
                                d[i + w] += gv;
                                d[i + w + 1] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Upsample2(x) => {
                    let (n, c, h, w) = self.value(x).dims4();
                    let (oh, ow) = (h * 2, w * 2);
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let d = dx.data_mut();
                    for plane in 0..n * c {
                        for y in 0..oh {
                            for x in 0..ow {
                                d[plane * h * w + (y / 2) * w + x / 2] +=
                                    g.data()[plane * oh * ow + y * ow + x];
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = self.value(a).dims4();
                    let cb = self.value(b).dims4().1;
                    let hw = h * w;
                    let mut da = Vec::with_capacity(n * ca * hw);
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for item in g.data().chunks((ca + cb) * hw) {
                        da.extend_from_slice(&item[..ca * hw]);
                        db.extend_from_slice(&item[ca * hw..]);
                    }
                    accumulate(&mut grads, a, Tensor::from_vec(&[n, ca, h, w], da).expect("concat"));
                    accumulate(&mut grads, b, Tensor::from_vec(&[n, cb, h, w], db).expect("concat"));
                }
                Op::Mse(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let k = 2.0 * g.data()[0] / av.len() as f64;
                    let mut da = av.clone();
                    for (d, &y) in da.data_mut().iter_mut().zip(bv.data()) {
                        *d = k * (*d - y);
                    }
                    accumulate(&mut grads, b, da.map(|v| -v));
                    accumulate(&mut grads, a, da);
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(x);
                    let k = 2.0 * g.data()[0] / xv.len() as f64;
                    accumulate(&mut grads, x, xv.map(|v| k * v));
                }
                Op::Warp { image, flow } => {
                    let (di, df) = warp_backward(self.value(image), self.value(flow), &g);
                    accumulate(&mut grads, image, di);
                    accumulate(&mut grads, flow, df);
                }
                Op::DiffX(x) => {
                    let (n, c, h, w) = self.value(x).dims4();
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let d = dx.data_mut();
                    for (r, grow) in g.data().chunks(w - 1).enumerate() {
                        for (i, &gv) in grow.iter().enumerate() {
                            d[r * w + i + 1] += gv;
                            d[r * w + i] -= gv;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::DiffY(x) => {
                    let (n, c, h, w) = self.value(x).dims4();
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let d = dx.data_mut();
                    for plane in 0..n * c {
                        for y in 0..h - 1 {
                            for x in 0..w {
                                let gv = g.data()[plane * (h - 1) * w + y * w + x];
                                d[plane * h * w + (y + 1) * w + x] += gv;
                                d[plane * h * w + y * w + x] -= gv;
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
            }
        }

        let mut params: Vec<Option<Tensor>> = Vec::new();
        for (node, grad) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(grad)) = (&node.op, grad) {
                if params.len() <= id.0 {
                    params.resize(id.0 + 1, None);
                }
                match &mut params[id.0] {
                    Some(existing) => existing.add_scaled(grad, 1.0),
                    slot @ None => *slot = Some(grad.clone()),
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf (input or parameter binding).
    /// Intermediate gradients are released during the backward sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a parameter, summed over all of its
    /// bindings on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, ci, k, k2) = w.dims4();
    assert_eq!(ci, c, "conv2d: input channels {c} vs weight {ci}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    assert_eq!(k % 2, 1, "conv2d: odd kernels only");
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![0.0; n * o * hw];
    let mut col = vec![0.0; ckk * hw];
    for i in 0..n {
        im2col(&x.data()[i * c * hw..(i + 1) * c * hw], c, h, wd, k, &mut col);
        let dst = &mut out[i * o * hw..(i + 1) * o * hw];
        for (oc, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(b.data()[oc]);
        }
        // SAFETY: all slices are sized for the declared strides.
        unsafe {
            matrixmultiply::dgemm(
                o,
                ckk,
                hw,
                1.0,
                w.data().as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                hw as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[n, o, h, wd], out).expect("conv output")
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let hw = h * wd;
    let ckk = c * k * k;
    let mut dx = vec![0.0; n * c * hw];
    let mut dw = vec![0.0; o * ckk];
    let mut db = vec![0.0; o];
    let mut col = vec![0.0; ckk * hw];
    let mut dcol = vec![0.0; ckk * hw];
    for i in 0..n {
        let gi = &g.data()[i * o * hw..(i + 1) * o * hw];
        for (oc, plane) in gi.chunks(hw).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
        im2col(&x.data()[i * c * hw..(i + 1) * c * hw], c, h, wd, k, &mut col);
        // SAFETY: all slices are sized for the declared strides.
        unsafe {
            // dW += dY · colᵀ
            matrixmultiply::dgemm(
                o,
                hw,
                ckk,
                1.0,
                gi.as_ptr(),
                hw as isize,
                1,
                col.as_ptr(),
                1,
                hw as isize,
                1.0,
                dw.as_mut_ptr(),
                ckk as isize,
                1,
            );
            // dcol = Wᵀ · dY
            matrixmultiply::dgemm(
                ckk,
                o,
                hw,
                1.0,
                w.data().as_ptr(),
                1,
                ckk as isize,
                gi.as_ptr(),
                hw as isize,
                1,
                0.0,
                dcol.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        col2im(&dcol, c, h, wd, k, &mut dx[i * c * hw..(i + 1) * c * hw]);
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("conv dx"),
        Tensor::from_vec(w.shape(), dw).expect("conv dw"),
        Tensor::from_vec(&[o], db).expect("conv db"),
    )
}

fn im2col(src: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let src = &col[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sample location along one axis: lower index, fraction, and
/// whether the coordinate was clamped (zero derivative).
#[inline]
fn sample_axis(pos: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    let clamped = !(0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    if extent == 1 {
        return (0, 0, 0.0, clamped);
    }
    let lo = (p.floor() as usize).min(extent - 2);
    (lo, lo + 1, p - lo as f64, clamped)
}

/// Tape-free version of [`Graph::warp`].
pub fn warp_forward(image: &Tensor, flow: &Tensor) -> Tensor {
    let (n, c, h, w) = image.dims4();
    assert_eq!(flow.shape(), [n, 2, h, w], "warp: flow must be (n, 2, h, w)");
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for i in 0..n {
        let fx = &flow.data()[(2 * i) * hw..(2 * i + 1) * hw];
        let fy = &flow.data()[(2 * i + 1) * hw..(2 * i + 2) * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, ax, _) = sample_axis(x as f64 + fx[p], w);
                let (y0, y1, ay, _) = sample_axis(y as f64 + fy[p], h);
                for ch in 0..c {
                    let plane = &image.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    out[(i * c + ch) * hw + p] = (1.0 - ax) * (1.0 - ay) * plane[y0 * w + x0]
                        + ax * (1.0 - ay) * plane[y0 * w + x1]
                        + (1.0 - ax) * ay * plane[y1 * w + x0]
                        + ax * ay * plane[y1 * w + x1];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("warp output")
}

fn warp_backward(image: &Tensor, flow: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = image.dims4();
    let hw = h * w;
    let mut di = vec![0.0; n * c * hw];
    let mut df = vec![0.0; n * 2 * hw];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let fxv = flow.data()[(2 * i) * hw + p];
                let fyv = flow.data()[(2 * i + 1) * hw + p];
                let (x0, x1, ax, cx) = sample_axis(x as f64 + fxv, w);
                let (y0, y1, ay, cy) = sample_axis(y as f64 + fyv, h);
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let go = g.data()[base + p];
                    let plane = &image.data()[base..base + hw];
                    let v00 = plane[y0 * w + x0];
                    let v10 = plane[y0 * w + x1];
                    let v01 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    let d = &mut di[base..base + hw];
                    d[y0 * w + x0] += go * (1.0 - ax) * (1.0 - ay);
                    d[y0 * w + x1] += go * ax * (1.0 - ay);
                    d[y1 * w + x0] += go * (1.0 - ax) * ay;
                    d[y1 * w + x1] += go * ax * ay;
                    gx += go * ((1.0 - ay) * (v10 - v00) + ay * (v11 - v01));
                    gy += go * ((1.0 - ax) * (v01 - v00) + ax * (v11 - v10));
                }
                if !cx {
                    df[(2 * i) * hw + p] = gx;
                }
                if !cy {
                    df[(2 * i + 1) * hw + p] = gy;
                }
            }
        }
    }
    (
        Tensor::from_vec(image.shape(), di).expect("warp di"),
        Tensor::from_vec(flow.shape(), df).expect("warp df"),
    )
}
