//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Each
//! record keeps its output value and, when any input requires a gradient,
//! a closure mapping the output gradient to input gradients. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse insertion
//! order and accumulates gradients.
//!
//! Every primitive verifies that its output is finite and returns
//! [`Error::NonFinite`] otherwise.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Maps the output gradient to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `var`, zeros when `var` did not
    /// influence the loss.
    pub fn tensor(&self, var: &Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Records a primitive. `backward` is dropped unless some input
    /// requires a gradient.
    pub fn custom<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var<'t>],
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        value.ensure_finite(op)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let id = self.push_node(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", root.value.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g);
            grads[id] = Some(g);
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: if id == loss.id { "loss" } else { "backward" } });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let (xs, ys) = (x.clone(), y.clone());
        self.tape.custom(
            op,
            (*y).clone(),
            &[*self],
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .zip(xs.data())
                    .zip(ys.data())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.custom("add", out, &[*self, *other], Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.custom(
            "sub",
            out,
            &[*self, *other],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        )
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.custom(
            "mul",
            out,
            &[*self, *other],
            Box::new(move |g| {
                let da = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Adds a `[c]` vector to every row of a `[... x c]` tensor.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let c = x.last_dim();
        if b.len() != c {
            return shape_err("add_bias", format!("bias {:?} vs last dim {}", b.shape(), c));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.custom(
            "add_bias",
            out,
            &[*self, *bias],
            Box::new(move |g| {
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        )
    }

    /// Multiplies every row of a `[... x c]` tensor by a `[c]` vector.
    pub fn mul_row(&self, gain: &Var<'t>) -> Result<Var<'t>> {
        let (x, s) = (self.value(), gain.value());
        let c = x.last_dim();
        if s.len() != c {
            return shape_err("mul_row", format!("gain {:?} vs last dim {}", s.shape(), c));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(s.data()).for_each(|(v, sv)| *v *= sv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.custom(
            "mul_row",
            out,
            &[*self, *gain],
            Box::new(move |g| {
                let mut dx = g.to_vec();
                let mut ds = vec![0.0; c];
                for (i, row) in dx.chunks_mut(c).enumerate() {
                    let xr = x.row(i);
                    for j in 0..c {
                        ds[j] += row[j] * xr[j];
                        row[j] *= s.data()[j];
                    }
                }
                vec![Some(dx), Some(ds)]
            }),
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * factor, move |_, _| factor)
    }

    pub fn add_scalar(&self, offset: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + offset, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// `max(x, 0)^2`.
    pub fn squared_relu(&self) -> Result<Var<'t>> {
        self.unary("squared_relu", |x| if x > 0.0 { x * x } else { 0.0 }, |x, _| if x > 0.0 { 2.0 * x } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    /// Lower clamp; gradient passes only where the input is above `lo`.
    pub fn clamp_min(&self, lo: f64) -> Result<Var<'t>> {
        self.unary("clamp_min", move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    /// Rounds half away from zero; the backward pass is the identity.
    pub fn ste_round(&self) -> Result<Var<'t>> {
        self.unary("ste_round", f64::round, |_, _| 1.0)
    }

    /// `2*[x >= 0] - 1`; the backward pass is the identity on `[-1, 1]`
    /// and zero outside, so saturated codes stop drifting.
    pub fn ste_sign(&self) -> Result<Var<'t>> {
        self.unary("ste_sign", |x| if x >= 0.0 { 1.0 } else { -1.0 }, |x, _| if x.abs() <= 1.0 { 1.0 } else { 0.0 })
    }

    /// Binary entropy in bits of a probability tensor, clamped away from
    /// 0 and 1.
    pub fn binary_entropy_bits(&self) -> Result<Var<'t>> {
        const EPS: f64 = 1e-12;
        self.unary(
            "binary_entropy_bits",
            |p| {
                let p = p.clamp(EPS, 1.0 - EPS);
                -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
            },
            |p, _| {
                let p = p.clamp(EPS, 1.0 - EPS);
                ((1.0 - p) / p).log2()
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.len();
        self.tape.custom("sum", Tensor::scalar(x.sum()), &[*self], Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean over rows of a `[rows x c]` tensor, giving `[c]`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        let rows = x.rows();
        if rows == 0 {
            return shape_err("mean_rows", "no rows");
        }
        let mut out = vec![0.0; c];
        for r in 0..rows {
            out.iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v / rows as f64);
        }
        self.tape.custom(
            "mean_rows",
            Tensor::new(vec![c], out)?,
            &[*self],
            Box::new(move |g| {
                let dx = (0..rows * c).map(|i| g[i % c] / rows as f64).collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        self.tape.custom("reshape", out, &[*self], Box::new(|g| vec![Some(g.to_vec())]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        self.tape.custom(
            "transpose",
            Tensor::new(vec![c, r], data)?,
            &[*self],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `out.flat[i] = self.flat[indices[i]]`. Gradients scatter-add back,
    /// so repeated indices are allowed.
    pub fn gather(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return shape_err("gather", format!("shape {:?} vs {} indices", shape, indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return shape_err("gather", format!("index {} out of {}", bad, x.len()));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let len = x.len();
        self.tape.custom(
            "gather",
            Tensor::new(shape.to_vec(), data)?,
            &[*self],
            Box::new(move |g| {
                let mut dx = vec![0.0; len];
                for (&i, gv) in indices.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if start > end || end > r {
            return shape_err("slice_rows", format!("[{start}, {end}) of {r} rows"));
        }
        let data = x.data()[start * c..end * c].to_vec();
        self.tape.custom(
            "slice_rows",
            Tensor::new(vec![end - start, c], data)?,
            &[*self],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                dx[start * c..end * c].copy_from_slice(g);
                vec![Some(dx)]
            }),
        )
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if start > end || end > c {
            return shape_err("slice_cols", format!("[{start}, {end}) of {c} cols"));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        self.tape.custom(
            "slice_cols",
            Tensor::new(vec![r, w], data)?,
            &[*self],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let c = values[0].dims2()?.1;
        let mut data = Vec::new();
        let mut rows = Vec::with_capacity(parts.len());
        for v in &values {
            let (r, vc) = v.dims2()?;
            if vc != c {
                return shape_err("concat_rows", format!("column count {vc} vs {c}"));
            }
            rows.push(r);
            data.extend_from_slice(v.data());
        }
        let total: usize = rows.iter().sum();
        first.tape.custom(
            "concat_rows",
            Tensor::new(vec![total, c], data)?,
            parts,
            Box::new(move |g| {
                let mut off = 0;
                rows.iter()
                    .map(|&r| {
                        let part = g[off * c..(off + r) * c].to_vec();
                        off += r;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let r = values[0].dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (vr, vc) = v.dims2()?;
            if vr != r {
                return shape_err("concat_cols", format!("row count {vr} vs {r}"));
            }
            widths.push(vc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        first.tape.custom(
            "concat_cols",
            Tensor::new(vec![r, total], data)?,
            parts,
            Box::new(move |g| {
                let mut out: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(r * w)).collect();
                for i in 0..r {
                    let mut off = i * total;
                    for (o, &w) in out.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                out.into_iter().map(Some).collect()
            }),
        )
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return shape_err("matmul", format!("[{m}x{k}] * [{k2}x{n}]"));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        self.tape.custom(
            "matmul",
            out,
            &[*self, *other],
            Box::new(move |g| {
                let da = matmul_nt(g, b.data(), m, n, k);
                let db = matmul_tn(a.data(), g, m, k, n);
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// `x W + b` with `W: [in x out]`, `b: [out]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    /// Per-row normalization with population variance, then `* gamma + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let c = x.last_dim();
        if gm.len() != c || bt.len() != c {
            return shape_err("layer_norm", format!("affine params {:?}/{:?} vs {}", gm.shape(), bt.shape(), c));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        self.tape.custom(
            "layer_norm",
            Tensor::new(x.shape().to_vec(), out)?,
            &[*self, *gamma, *beta],
            Box::new(move |g| {
                let mut dx = vec![0.0; rows * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gm.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    pub fn softmax_lastdim(&self) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        let saved = out.clone();
        self.tape.custom(
            "softmax",
            (*out).clone(),
            &[*self],
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(saved.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean cross-entropy (nats) of `[n x classes]` logits against class ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, k) = x.dims2()?;
        if targets.len() != n {
            return shape_err("cross_entropy", format!("{} targets for {} rows", targets.len(), n));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("target class {bad} >= {k}")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            softmax_in_place(row);
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let targets = targets.to_vec();
        self.tape.custom(
            "cross_entropy",
            Tensor::scalar(loss),
            &[*self],
            Box::new(move |g| {
                let scale = g[0] / n as f64;
                let mut dx = probs.clone();
                for (row, &t) in dx.chunks_mut(k).zip(&targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(dx)]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    let inner = s * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(i2.matmul(&m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[0.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let inputs = vec![
            Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut r),
            Tensor::rand_uniform(&[4, 2], -2.0, 2.0, &mut r),
        ];
        let report = check_gradients(&inputs, GradCheck::default(), |vars| {
            let y = vars[0].matmul(&vars[1])?;
            let w = vars[0].tape().constant(Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
            y.mul(&w)?.sum()
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn layer_norm_values() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::full(&[2], 1.0));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap());
        let y = x.layer_norm(&one, &zero, 1e-5).unwrap().value();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut r = rng();
        let inputs = vec![
            Tensor::rand_uniform(&[3, 5], -2.0, 2.0, &mut r),
            Tensor::rand_uniform(&[5], 0.5, 1.5, &mut r),
            Tensor::rand_uniform(&[5], -1.0, 1.0, &mut r),
        ];
        let weights = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut r);
        let report = check_gradients(&inputs, GradCheck::default(), |v| {
            let w = v[0].tape().constant(weights.clone());
            v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&w)?.sum()
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn activation_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-2.0, 3.0, 0.0]).unwrap());
        assert_eq!(x.squared_relu().unwrap().value().data(), &[0.0, 9.0, 0.0]);
        assert_eq!(x.sigmoid().unwrap().value().data()[2], 0.5);
        let s = x.softmax_lastdim().unwrap().value();
        assert!((s.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_gradients() {
        let mut r = rng();
        let a = Tensor::rand_uniform(&[4, 3], -2.0, 2.0, &mut r);
        let b = Tensor::rand_uniform(&[4, 3], -2.0, 2.0, &mut r);
        let bias = Tensor::rand_uniform(&[3], -2.0, 2.0, &mut r);
        let weights = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut r);
        let cases: Vec<(&str, Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>>)> = vec![
            ("sigmoid", Box::new(|v| v[0].sigmoid())),
            ("gelu", Box::new(|v| v[0].gelu())),
            ("squared_relu", Box::new(|v| v[0].squared_relu())),
            ("softplus", Box::new(|v| v[0].softplus())),
            ("exp", Box::new(|v| v[0].exp())),
            ("softmax", Box::new(|v| v[0].softmax_lastdim())),
            ("mul", Box::new(|v| v[0].mul(&v[1]))),
            ("sub", Box::new(|v| v[0].sub(&v[1]))),
            ("add_bias", Box::new(|v| v[0].add_bias(&v[2]))),
            ("mul_row", Box::new(|v| v[0].mul_row(&v[2]))),
            ("transpose", Box::new(|v| v[0].transpose()?.transpose())),
            ("slice_cols", Box::new(|v| Var::concat_cols(&[v[0].slice_cols(1, 3)?, v[1].slice_cols(0, 1)?]))),
            ("slice_rows", Box::new(|v| Var::concat_rows(&[v[1].slice_rows(2, 4)?, v[0].slice_rows(0, 2)?]))),
            ("mean_rows", Box::new(|v| Var::concat_rows(&[v[0].mean_rows()?.reshape(&[1, 3])?, v[1].slice_rows(0, 3)?]))),
        ];
        for (name, f) in cases {
            let inputs = vec![a.clone(), b.clone(), bias.clone()];
            let report = check_gradients(&inputs, GradCheck::default(), |v| {
                let y = f(v)?;
                let w = v[0].tape().constant(weights.clone());
                y.mul(&w)?.sum()
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut r = rng();
        let inputs = vec![Tensor::rand_uniform(&[5, 4], -2.0, 2.0, &mut r)];
        let report =
            check_gradients(&inputs, GradCheck::default(), |v| v[0].cross_entropy(&[0, 3, 1, 1, 2])).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn composition_follows_chain_rule() {
        let mut r = rng();
        let inputs = vec![Tensor::rand_uniform(&[6], -2.0, 2.0, &mut r)];
        let report = check_gradients(&inputs, GradCheck::default(), |v| v[0].gelu()?.sigmoid()?.sum()).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn non_finite_output_is_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![1000.0]).unwrap());
        assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
        let z = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(z.ln().is_err());
    }

    #[test]
    fn straight_through_ops() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4], vec![0.4, -0.5, 2.5, 0.0]).unwrap());
        let r = x.ste_round().unwrap();
        assert_eq!(r.value().data(), &[0.0, -1.0, 3.0, 0.0]);
        let s = x.ste_sign().unwrap();
        assert_eq!(s.value().data(), &[1.0, -1.0, 1.0, 1.0]);
        let g = tape.backward(&s.sum().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let mut r = rng();
            let x = tape.constant(Tensor::rand_uniform(&[8, 8], -2.0, 2.0, &mut r));
            let w = tape.constant(Tensor::rand_uniform(&[8, 8], -2.0, 2.0, &mut r));
            x.matmul(&w).unwrap().gelu().unwrap().softmax_lastdim().unwrap().value().data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
