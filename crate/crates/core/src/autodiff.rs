//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Graph`] records one forward episode; [`Graph::backward`] replays it in
//! reverse. Nodes only ever reference earlier nodes, and every kernel runs in
//! a fixed order, so gradients are deterministic.

use crate::tensor::{sigmoid, softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Pixel-space corner indices and fractions for a normalized (x, y) sample
/// location on an (h, w) grid, clamped to the valid bilinear domain.
#[allow(clippy::type_complexity)]
fn bilinear_corners(
    (gh, gw): (usize, usize),
    x: f64,
    y: f64,
) -> (usize, usize, usize, usize, f64, f64, f64, f64) {
    let xp = (x * (gw as f64 - 1.0)).clamp(0.0, gw as f64 - 1.0);
    let yp = (y * (gh as f64 - 1.0)).clamp(0.0, gh as f64 - 1.0);
    let x0 = (xp.floor() as usize).min(gw - 1);
    let y0 = (yp.floor() as usize).min(gh - 1);
    let x1 = (x0 + 1).min(gw - 1);
    let y1 = (y0 + 1).min(gh - 1);
    let fx = xp - x0 as f64;
    let fy = yp - y0 as f64;
    (x0, y0, x1, y1, fx, fy, xp, yp)
}

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

type BackFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    backward: Option<BackFn>,
}

/// Accumulates gradients into parent nodes during the reverse sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
}

impl<'a> GradSink<'a> {
    pub fn add(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_in_place(&g),
            slot => *slot = Some(g),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (gradients are collected but nothing propagates
    /// further).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Alias of [`Graph::leaf`]; used for values that are inputs, not
    /// parameters. Gradients are still accumulated if requested.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Re-enters a value as a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.leaf(t)
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.zip(&bv, |x, y| x * y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip(&bv, |gg, y| gg * y));
                sink.add(b, g.zip(&av, |gg, x| gg * x));
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.zip(&bv, |x, y| x / y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip(&bv, |gg, y| gg / y));
                let mut gb = g.zip(&av, |gg, x| gg * x);
                gb = gb.zip(&bv, |t, y| -t / (y * y));
                sink.add(b, gb);
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.map(|x| -x)))),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Some(Box::new(move |g, sink| sink.add(a, g.clone()))))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.map(|x| x * c)))),
        )
    }

    /// Multiplies a tensor by a scalar-valued variable (both get gradients).
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar_var needs a scalar");
        let av = self.value(a).clone();
        let sv = self.value(s).item();
        let out = av.map(|x| x * sv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.map(|x| x * sv));
                let gs: f64 = g.data().iter().zip(av.data()).map(|(&gg, &x)| gg * x).sum();
                sink.add(s, Tensor::scalar(gs));
            })),
        )
    }

    /// Elementwise multiply by a fixed tensor (no gradient into the mask).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let out = self.value(a).zip(&mask, |x, m| x * m);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip(&mask, |gg, m| gg * m));
            })),
        )
    }

    // ---- unary maps ----

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value(a).clone();
        let out = av.map(f);
        let ov = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gx = g.clone();
                for ((gv, &x), &y) in gx.data_mut().iter_mut().zip(av.data()).zip(ov.data()) {
                    *gv *= df(x, y);
                }
                sink.add(a, gx);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        // tanh approximation
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    // ---- min/max with subgradient to the winning side (ties go to `a`) ----

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.zip(&bv, f64::max);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Tensor::zeros(g.shape().to_vec());
                let mut gb = Tensor::zeros(g.shape().to_vec());
                for i in 0..g.len() {
                    if av.data()[i] >= bv.data()[i] {
                        ga.data_mut()[i] = g.data()[i];
                    } else {
                        gb.data_mut()[i] = g.data()[i];
                    }
                }
                sink.add(a, ga);
                sink.add(b, gb);
            })),
        )
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.zip(&bv, f64::min);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Tensor::zeros(g.shape().to_vec());
                let mut gb = Tensor::zeros(g.shape().to_vec());
                for i in 0..g.len() {
                    if av.data()[i] <= bv.data()[i] {
                        ga.data_mut()[i] = g.data()[i];
                    } else {
                        gb.data_mut()[i] = g.data()[i];
                    }
                }
                sink.add(a, ga);
                sink.add(b, gb);
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.matmul(&bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.matmul_t(&bv));
                sink.add(b, av.t_matmul(g));
            })),
        )
    }

    /// `a` is `[m, n]`, `bias` is `[n]`; adds the bias to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(bv.len(), n, "bias length mismatch");
        let mut out = av.clone();
        for r in 0..m {
            for c in 0..n {
                out.data_mut()[r * n + c] += bv.data()[c];
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for r in 0..g.rows() {
                    for c in 0..n {
                        gb[c] += g.data()[r * n + c];
                    }
                }
                sink.add(bias, Tensor::new(vec![n], gb));
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let orig = self.value(a).shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone().reshaped(orig.clone()));
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            row_counts.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = row_counts.iter().sum();
        let parts_owned: Vec<Var> = parts.to_vec();
        self.push(
            Tensor::new(vec![total, cols], data),
            Some(Box::new(move |g, sink| {
                let mut offset = 0;
                for (&p, &rc) in parts_owned.iter().zip(row_counts.iter()) {
                    let slice = &g.data()[offset * cols..(offset + rc) * cols];
                    sink.add(p, Tensor::new(vec![rc, cols], slice.to_vec()));
                    offset += rc;
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        assert!(r0 <= r1 && r1 <= m);
        let out = Tensor::new(vec![r1 - r0, n], v.data()[r0 * n..r1 * n].to_vec());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut full = Tensor::zeros(vec![m, n]);
                full.data_mut()[r0 * n..r1 * n].copy_from_slice(g.data());
                sink.add(a, full);
            })),
        )
    }

    /// Row gather; indices may repeat (used for embedding lookup).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            assert!(i < m, "row index {} out of range {}", i, m);
            data.extend_from_slice(v.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        let out = Tensor::new(vec![indices.len(), n], data);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut full = Tensor::zeros(vec![m, n]);
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        full.data_mut()[i * n + c] += g.data()[r * n + c];
                    }
                }
                sink.add(a, full);
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        assert!(c0 <= c1 && c1 <= n);
        let w = c1 - c0;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&v.data()[r * n + c0..r * n + c1]);
        }
        self.push(
            Tensor::new(vec![m, w], data),
            Some(Box::new(move |g, sink| {
                let mut full = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    full.data_mut()[r * n + c0..r * n + c1]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                sink.add(a, full);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let parts_owned: Vec<Var> = parts.to_vec();
        self.push(
            Tensor::new(vec![m, total], data),
            Some(Box::new(move |g, sink| {
                let mut offset = 0;
                for (&p, &w) in parts_owned.iter().zip(widths.iter()) {
                    let mut part = Tensor::zeros(vec![m, w]);
                    for r in 0..m {
                        part.data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    sink.add(p, part);
                    offset += w;
                }
            })),
        )
    }

    /// Gathers single elements of a matrix; backward scatter-adds.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let data: Vec<f64> = coords.iter().map(|&(r, c)| v.at2(r, c)).collect();
        let coords_owned: Vec<(usize, usize)> = coords.to_vec();
        self.push(
            Tensor::new(vec![coords.len()], data),
            Some(Box::new(move |g, sink| {
                let mut full = Tensor::zeros(vec![m, n]);
                for (i, &(r, c)) in coords_owned.iter().enumerate() {
                    full.data_mut()[r * n + c] += g.data()[i];
                }
                sink.add(a, full);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, sink| {
                sink.add(a, Tensor::full(shape.clone(), g.item()));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Column means over rows: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += v.at2(r, c);
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        self.push(
            Tensor::new(vec![n], out),
            Some(Box::new(move |g, sink| {
                let mut full = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    for c in 0..n {
                        full.data_mut()[r * n + c] = g.data()[c] / m as f64;
                    }
                }
                sink.add(a, full);
            })),
        )
    }

    // ---- row-wise normalizations ----

    /// Softmax per row restricted to `allowed` positions; others get 0.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &[bool]) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        assert_eq!(allowed.len(), m * n);
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let row = v.row(r);
            let mask = &allowed[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for (x, &ok) in row.iter().zip(mask) {
                if ok && *x > mx {
                    mx = *x;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0;
            for (c, (&x, &ok)) in row.iter().zip(mask).enumerate() {
                if ok {
                    let e = (x - mx).exp();
                    out.data_mut()[r * n + c] = e;
                    denom += e;
                }
            }
            for c in 0..n {
                out.data_mut()[r * n + c] /= denom;
            }
        }
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (m, n) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yy, &gg)| yy * gg).sum();
                    for c in 0..n {
                        gx.data_mut()[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                sink.add(a, gx);
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let len = self.value(a).len();
        self.masked_softmax_rows(a, &vec![true; len])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let row = v.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for c in 0..n {
                out.data_mut()[r * n + c] = row[c] - lse;
            }
        }
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (m, n) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..n {
                        let p = y.at2(r, c).exp();
                        gx.data_mut()[r * n + c] = gr[c] - p * gsum;
                    }
                }
                sink.add(a, gx);
            })),
        )
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = self.value(a).clone();
        let gm = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let (m, n) = (v.rows(), v.cols());
        assert_eq!(gm.len(), n);
        assert_eq!(bt.len(), n);
        let mut xhat = Tensor::zeros(vec![m, n]);
        let mut inv_sigma = vec![0.0; m];
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let row = v.row(r);
            let mu: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = is;
            for c in 0..n {
                let xh = (row[c] - mu) * is;
                xhat.data_mut()[r * n + c] = xh;
                out.data_mut()[r * n + c] = xh * gm.data()[c] + bt.data()[c];
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gx = Tensor::zeros(vec![m, n]);
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let xh = xhat.row(r);
                    // dy/dgamma, dy/dbeta
                    for c in 0..n {
                        ggamma[c] += gr[c] * xh[c];
                        gbeta[c] += gr[c];
                    }
                    // dx via the standard layer-norm backward
                    let gy: Vec<f64> = (0..n).map(|c| gr[c] * gm.data()[c]).collect();
                    let mean_gy: f64 = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy_xh: f64 =
                        gy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        gx.data_mut()[r * n + c] =
                            inv_sigma[r] * (gy[c] - mean_gy - xh[c] * mean_gy_xh);
                    }
                }
                sink.add(a, gx);
                sink.add(gamma, Tensor::new(vec![n], ggamma));
                sink.add(beta, Tensor::new(vec![n], gbeta));
            })),
        )
    }

    /// Normalizes each row to unit L2 norm (norm clamped at `eps`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).clone();
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        let mut norms = vec![0.0; m];
        for r in 0..m {
            let row = v.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            norms[r] = norm;
            for c in 0..n {
                out.data_mut()[r * n + c] = row[c] / norm;
            }
        }
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let yr = y.row(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        gx.data_mut()[r * n + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                sink.add(a, gx);
            })),
        )
    }

    // ---- deformable sampling ----

    /// Multi-head, multi-level deformable aggregation.
    ///
    /// `values[l]` is the projected value map of level `l`, `[H_l*W_l, D]`
    /// row-major over (y, x). `locs` is `[Q, H*L*P*2]` of normalized (x, y)
    /// sampling locations and `weights` is `[Q, H*L*P]` attention weights.
    /// Head `h` reads and writes channel block `h*D/H .. (h+1)*D/H`.
    /// Pixel coordinates use `x_pix = x * (W-1)` clamped to the map, so
    /// out-of-range locations clamp to the valid bilinear domain.
    pub fn deform_sample(
        &mut self,
        values: &[Var],
        level_shapes: &[(usize, usize)],
        locs: Var,
        weights: Var,
        heads: usize,
    ) -> Var {
        let n_levels = values.len();
        assert_eq!(level_shapes.len(), n_levels);
        let dim = self.value(values[0]).cols();
        assert_eq!(dim % heads, 0);
        let dh = dim / heads;
        let locs_v = self.value(locs).clone();
        let w_v = self.value(weights).clone();
        let q = locs_v.rows();
        let hlp = w_v.cols();
        assert_eq!(locs_v.cols(), hlp * 2);
        assert_eq!(hlp % (heads * n_levels), 0);
        let points = hlp / (heads * n_levels);
        let vals: Vec<Tensor> = values.iter().map(|&v| self.value(v).clone()).collect();
        let shapes: Vec<(usize, usize)> = level_shapes.to_vec();

        let mut out = Tensor::zeros(vec![q, dim]);
        for qi in 0..q {
            for h in 0..heads {
                for l in 0..n_levels {
                    let (gh, gw) = shapes[l];
                    let _ = gh;
                    for p in 0..points {
                        let w = w_v.at2(qi, (h * n_levels + l) * points + p);
                        let base = ((h * n_levels + l) * points + p) * 2;
                        let (x0, y0, x1, y1, fx, fy, _, _) = bilinear_corners(
                            shapes[l],
                            locs_v.at2(qi, base),
                            locs_v.at2(qi, base + 1),
                        );
                        let vmap = &vals[l];
                        for c in 0..dh {
                            let cc = h * dh + c;
                            let v00 = vmap.at2(y0 * gw + x0, cc);
                            let v01 = vmap.at2(y0 * gw + x1, cc);
                            let v10 = vmap.at2(y1 * gw + x0, cc);
                            let v11 = vmap.at2(y1 * gw + x1, cc);
                            let interp = v00 * (1.0 - fx) * (1.0 - fy)
                                + v01 * fx * (1.0 - fy)
                                + v10 * (1.0 - fx) * fy
                                + v11 * fx * fy;
                            out.data_mut()[qi * dim + cc] += w * interp;
                        }
                    }
                }
            }
        }

        let values_owned: Vec<Var> = values.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut g_vals: Vec<Tensor> = vals
                    .iter()
                    .map(|v| Tensor::zeros(v.shape().to_vec()))
                    .collect();
                let mut g_locs = Tensor::zeros(vec![q, hlp * 2]);
                let mut g_w = Tensor::zeros(vec![q, hlp]);
                for qi in 0..q {
                    for h in 0..heads {
                        for l in 0..n_levels {
                            let (gh, gw) = shapes[l];
                            for p in 0..points {
                                let widx = (h * n_levels + l) * points + p;
                                let w = w_v.at2(qi, widx);
                                let (x0, y0, x1, y1, fx, fy, xp, yp) = bilinear_corners(
                                    shapes[l],
                                    locs_v.at2(qi, widx * 2),
                                    locs_v.at2(qi, widx * 2 + 1),
                                );
                                let vmap = &vals[l];
                                let mut interp_dot_g = 0.0;
                                let mut due_dx = 0.0;
                                let mut due_dy = 0.0;
                                for c in 0..dh {
                                    let cc = h * dh + c;
                                    let go = g.at2(qi, cc);
                                    let v00 = vmap.at2(y0 * gw + x0, cc);
                                    let v01 = vmap.at2(y0 * gw + x1, cc);
                                    let v10 = vmap.at2(y1 * gw + x0, cc);
                                    let v11 = vmap.at2(y1 * gw + x1, cc);
                                    let interp = v00 * (1.0 - fx) * (1.0 - fy)
                                        + v01 * fx * (1.0 - fy)
                                        + v10 * (1.0 - fx) * fy
                                        + v11 * fx * fy;
                                    interp_dot_g += go * interp;
                                    // corner gradients
                                    let gv = &mut g_vals[l];
                                    gv.data_mut()[(y0 * gw + x0) * dim + cc] +=
                                        go * w * (1.0 - fx) * (1.0 - fy);
                                    gv.data_mut()[(y0 * gw + x1) * dim + cc] +=
                                        go * w * fx * (1.0 - fy);
                                    gv.data_mut()[(y1 * gw + x0) * dim + cc] +=
                                        go * w * (1.0 - fx) * fy;
                                    gv.data_mut()[(y1 * gw + x1) * dim + cc] += go * w * fx * fy;
                                    // spatial derivative of the interpolant
                                    due_dx += go * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                                    due_dy += go * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                                }
                                g_w.data_mut()[qi * hlp + widx] += interp_dot_g;
                                // chain through clamp: zero gradient when pinned
                                let base = widx * 2;
                                let x_norm = locs_v.at2(qi, base);
                                let y_norm = locs_v.at2(qi, base + 1);
                                let x_raw = x_norm * (gw as f64 - 1.0);
                                let y_raw = y_norm * (gh as f64 - 1.0);
                                if x_raw > 0.0 && x_raw < gw as f64 - 1.0 && xp == x_raw {
                                    g_locs.data_mut()[qi * hlp * 2 + base] +=
                                        w * due_dx * (gw as f64 - 1.0);
                                }
                                if y_raw > 0.0 && y_raw < gh as f64 - 1.0 && yp == y_raw {
                                    g_locs.data_mut()[qi * hlp * 2 + base + 1] +=
                                        w * due_dy * (gh as f64 - 1.0);
                                }
                            }
                        }
                    }
                }
                for (v, gv) in values_owned.iter().zip(g_vals) {
                    sink.add(*v, gv);
                }
                sink.add(locs, g_locs);
                sink.add(weights, g_w);
            })),
        )
    }

    // ---- backward ----

    /// Runs the reverse sweep from `loss` (must be scalar) and returns one
    /// gradient slot per node.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(bw) = &self.nodes[i].backward {
                let (lower, _upper) = grads.split_at_mut(i);
                let mut sink = GradSink { grads: lower };
                bw(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        leaves: &[Tensor],
        tol: f64,
    ) {
        // analytic
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[vars[li].id()]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
            for i in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[i] += h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[i] -= h;
                let eval = |ts: &[Tensor]| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "leaf {} elem {}: analytic {} vs fd {}",
                    li,
                    i,
                    a,
                    fd
                );
            }
        }
    }

    #[test]
    fn matmul_bias_gelu_gradcheck() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.2, 0.05, 0.9, -1.4]);
        let w = Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.4]);
        let b = Tensor::new(vec![2], vec![0.05, -0.3]);
        fd_check(
            |g, vs| {
                let y = g.matmul(vs[0], vs[1]);
                let y = g.add_row_broadcast(y, vs[2]);
                let y = g.gelu(y);
                let y = g.square(y);
                g.mean_all(y)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn softmax_layernorm_gradcheck() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.7, 1.2, 0.0, 2.0, -0.4, 0.6, -1.1]);
        let gm = Tensor::new(vec![4], vec![1.1, 0.9, 1.0, 1.2]);
        let bt = Tensor::new(vec![4], vec![0.0, 0.1, -0.1, 0.2]);
        fd_check(
            |g, vs| {
                let y = g.layer_norm(vs[0], vs[1], vs[2], 1e-5);
                let s = g.softmax_rows(y);
                let s2 = g.square(s);
                g.sum_all(s2)
            },
            &[x, gm, bt],
            1e-4,
        );
    }

    #[test]
    fn log_softmax_pick_gradcheck() {
        let x = Tensor::new(vec![2, 5], vec![0.3, -0.7, 1.2, 0.0, 0.5, 2.0, -0.4, 0.6, -1.1, 0.9]);
        fd_check(
            |g, vs| {
                let ls = g.log_softmax_rows(vs[0]);
                let picked = g.pick(ls, &[(0, 2), (1, 4)]);
                let s = g.sum_all(picked);
                g.neg(s)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn normalize_minmax_gradcheck() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.2, 0.4, 0.9, -1.3]);
        let y = Tensor::new(vec![2, 3], vec![0.5, 0.2, -0.8, 1.4, -0.9, 0.3]);
        fd_check(
            |g, vs| {
                let n = g.l2_normalize_rows(vs[0], 1e-12);
                let mx = g.max_elem(n, vs[1]);
                let mn = g.min_elem(mx, vs[0]);
                let sp = g.softplus(mn);
                g.sum_all(sp)
            },
            &[x, y],
            1e-5,
        );
    }

    #[test]
    fn deform_sample_gradcheck() {
        let v0 = Tensor::new(vec![6, 2], (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let v1 = Tensor::new(vec![2, 2], vec![0.4, -0.2, 0.9, 0.1]);
        let locs = Tensor::new(vec![1, 8], vec![0.31, 0.42, 0.77, 0.18, 0.5, 0.66, 0.21, 0.83]);
        let w_raw = Tensor::new(vec![1, 4], vec![0.4, 0.3, 0.2, 0.1]);
        fd_check(
            |g, vs| {
                // 1 head, 2 levels ((2,3) and (1,2)), 2 points
                let w = g.softmax_rows(vs[3]);
                let out = g.deform_sample(&[vs[0], vs[1]], &[(2, 3), (1, 2)], vs[2], w, 1);
                let sq = g.square(out);
                g.sum_all(sq)
            },
            &[v0, v1, locs, w_raw],
            1e-4,
        );
    }

    #[test]
    fn select_concat_slice_gradcheck() {
        let a = Tensor::new(vec![3, 2], vec![0.3, -0.7, 1.2, 0.4, 0.9, -1.3]);
        let b = Tensor::new(vec![2, 2], vec![0.5, 0.2, -0.8, 1.4]);
        fd_check(
            |g, vs| {
                let sel = g.select_rows(vs[0], &[2, 0, 2]);
                let cat = g.concat_rows(&[sel, vs[1]]);
                let cols = g.slice_cols(cat, 1, 2);
                let rows = g.slice_rows(cols, 1, 4);
                let t = g.tanh(rows);
                g.sum_all(t)
            },
            &[a, b],
            1e-5,
        );
    }
}
