//! Eager reverse-mode tape.
//!
//! Every primitive computes its value immediately and appends a node holding
//! the value and the ids of its inputs. `backward` walks the nodes in exact
//! reverse order. Non-smooth primitives (relu, trilinear cell selection)
//! fold their branch decisions into a kink signature so finite-difference
//! checks can tell when a perturbation crossed a kink.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{GradSet, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::field::{self, Grid, SynthBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    out_c: usize,
    /// input spatial dims (z, y, x)
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Sqrt(Var),
    Relu(Var),
    Softplus(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        g: ConvGeom,
    },
    AvgPool {
        x: Var,
        lead: usize,
        inp: [usize; 3],
        f: [usize; 3],
    },
    Upsample {
        x: Var,
        lead: usize,
        inp: [usize; 3],
        f: [usize; 3],
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Mse(Var, Var),
    MaskedMse {
        a: Var,
        b: Var,
        mask: Arc<Vec<bool>>,
        count: usize,
    },
    Mean(Var),
    Sum(Var),
    Kl {
        mu: Var,
        sigma: Var,
    },
    Warp {
        vol: Var,
        dvf: Var,
        grid: Grid,
    },
    Smoothness {
        dvf: Var,
        grid: Grid,
    },
    Synth {
        coeffs: Var,
        basis: Arc<SynthBasis>,
    },
    BoxMean {
        x: Var,
        dims: [usize; 3],
        radius: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    consumed: bool,
    kinks: u64,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every registered parameter; parameters the output does not
    /// depend on get zeros.
    pub fn params(&self, shapes: &ParamSet) -> GradSet {
        let mut out = GradSet::new();
        for (name, var) in &self.params {
            let g = match self.get(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(shapes[name].shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2))
    .wrapping_mul(0x0100_0000_01b3)
}

fn same_shape(primitive: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            primitive,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Spatial dims `(z, y, x)` and leading element count of a tensor whose
/// trailing `spatial` axes are spatial (2 or 3).
fn split_spatial(
    primitive: &'static str,
    shape: &[usize],
    spatial: usize,
) -> Result<(usize, [usize; 3])> {
    if shape.len() < spatial {
        return Err(Error::shape(
            primitive,
            format!("need {spatial} spatial axes, got {shape:?}"),
        ));
    }
    let cut = shape.len() - spatial;
    let lead = shape[..cut].iter().product();
    let s = &shape[cut..];
    let dims = if spatial == 3 {
        [s[0], s[1], s[2]]
    } else {
        [1, s[0], s[1]]
    };
    Ok((lead, dims))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Hash of every branch decision taken by non-smooth primitives.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf whose gradient is tracked when `t.requires_grad` is set.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf bound to a named entry of `params`. Repeated calls with the
    /// same name return the same variable.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Named parameter used as a frozen constant (no gradient).
    pub fn frozen(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        Ok(self.constant(t))
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.val(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(name, self.val(a), self.val(b))?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.val(x);
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| f(*v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.val(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::shape(
                "sqrt",
                format!("needs positive input, got {v}"),
            ));
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut h = self.kinks;
        for (i, v) in self.val(x).data().iter().enumerate() {
            if *v > 0.0 {
                h = mix(h, i as u64);
            }
        }
        self.kinks = mix(h, 0x7265_6c75);
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.val(s).len() != 1 {
            return Err(Error::shape(
                "mul_scalar_var",
                format!("scale must have one element, got {:?}", self.val(s).shape()),
            ));
        }
        let c = self.val(s).item();
        let src = self.val(x);
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v * c).collect(),
        )?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalarVar(x, s), rg))
    }

    /// `y = x·Wᵀ + b` over the last axis; `w` is `[out, in]`, `b` is `[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.val(x).shape().to_vec(),
            self.val(w).shape().to_vec(),
            self.val(b).shape().to_vec(),
        );
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "dense",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (out, inp) = (ws[0], ws[1]);
        let rows = self.val(x).len() / inp;
        let (xd, wd, bd) = (self.val(x).data(), self.val(w).data(), self.val(b).data());
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                y[r * out + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Dense {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    /// 3D convolution over `[B, C, Z, Y, X]` with a cubic kernel `[O, C, k, k, k]`
    /// and zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape("conv3d", format!("x {xs:?}, w {ws:?}")));
        }
        let g = self.conv_geom(
            "conv3d",
            xs[0],
            xs[1],
            [xs[2], xs[3], xs[4]],
            &ws,
            [ws[2]; 3],
            [stride; 3],
            [pad; 3],
        )?;
        self.conv(x, w, b, g, vec![xs[0], ws[0], g.out[0], g.out[1], g.out[2]])
    }

    /// 2D convolution over `[B, C, Y, X]` with a square kernel `[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let g = self.conv_geom(
            "conv2d",
            xs[0],
            xs[1],
            [1, xs[2], xs[3]],
            &ws,
            [1, ws[2], ws[3]],
            [1, stride, stride],
            [0, pad, pad],
        )?;
        self.conv(x, w, b, g, vec![xs[0], ws[0], g.out[1], g.out[2]])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        name: &'static str,
        batch: usize,
        in_c: usize,
        inp: [usize; 3],
        ws: &[usize],
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<ConvGeom> {
        let mut out = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || inp[a] + 2 * pad[a] < k[a] {
                return Err(Error::shape(
                    name,
                    format!(
                        "input {inp:?} too small for kernel {k:?} (pad {pad:?}, stride {stride:?})"
                    ),
                ));
            }
            out[a] = (inp[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
        }
        Ok(ConvGeom {
            batch,
            in_c,
            out_c: ws[0],
            inp,
            out,
            k,
            stride,
            pad,
        })
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, g: ConvGeom, shape: Vec<usize>) -> Result<Var> {
        if self.val(b).shape() != [g.out_c] {
            return Err(Error::shape(
                "conv",
                format!(
                    "bias {:?} for {} output channels",
                    self.val(b).shape(),
                    g.out_c
                ),
            ));
        }
        let y = conv_forward(
            &g,
            self.val(x).data(),
            self.val(w).data(),
            self.val(b).data(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv { x, w, b, g }, rg))
    }

    /// Mean pooling over non-overlapping blocks of the trailing `spatial` axes.
    pub fn avg_pool(&mut self, x: Var, factor: usize, spatial: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let (lead, inp) = split_spatial("avg_pool", &xs, spatial)?;
        let f = if spatial == 3 {
            [factor; 3]
        } else {
            [1, factor, factor]
        };
        if factor == 0 || (0..3).any(|a| inp[a] % f[a] != 0) {
            return Err(Error::shape(
                "avg_pool",
                format!("{xs:?} not divisible by {factor}"),
            ));
        }
        let out = [inp[0] / f[0], inp[1] / f[1], inp[2] / f[2]];
        let xd = self.val(x).data();
        let norm = 1.0 / (f[0] * f[1] * f[2]) as f64;
        let on = out[0] * out[1] * out[2];
        let inn = inp[0] * inp[1] * inp[2];
        let mut y = vec![0.0; lead * on];
        for l in 0..lead {
            for z in 0..inp[0] {
                for yy in 0..inp[1] {
                    for xx in 0..inp[2] {
                        let o = ((z / f[0]) * out[1] + yy / f[1]) * out[2] + xx / f[2];
                        y[l * on + o] += xd[l * inn + (z * inp[1] + yy) * inp[2] + xx] * norm;
                    }
                }
            }
        }
        let mut shape = xs.clone();
        let n = shape.len();
        for a in 0..spatial {
            shape[n - spatial + a] = out[3 - spatial + a];
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::AvgPool { x, lead, inp, f }, rg))
    }

    /// Nearest-neighbour upsampling of the trailing `spatial` axes.
    pub fn upsample(&mut self, x: Var, factor: usize, spatial: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let (lead, inp) = split_spatial("upsample", &xs, spatial)?;
        if factor == 0 {
            return Err(Error::shape("upsample", "factor must be positive"));
        }
        let f = if spatial == 3 {
            [factor; 3]
        } else {
            [1, factor, factor]
        };
        let out = [inp[0] * f[0], inp[1] * f[1], inp[2] * f[2]];
        let xd = self.val(x).data();
        let on = out[0] * out[1] * out[2];
        let inn = inp[0] * inp[1] * inp[2];
        let mut y = vec![0.0; lead * on];
        for l in 0..lead {
            for z in 0..out[0] {
                for yy in 0..out[1] {
                    for xx in 0..out[2] {
                        let src = ((z / f[0]) * inp[1] + yy / f[1]) * inp[2] + xx / f[2];
                        y[l * on + (z * out[1] + yy) * out[2] + xx] = xd[l * inn + src];
                    }
                }
            }
        }
        let mut shape = xs.clone();
        let n = shape.len();
        for a in 0..spatial {
            shape[n - spatial + a] = out[3 - spatial + a];
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::Upsample { x, lead, inp, f }, rg))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.val(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::new();
        let mut total_axis = 0;
        for p in parts {
            let s = self.val(*p).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("{first:?} vs {s:?} along axis {axis}"),
                ));
            }
            widths.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.val(*p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut t = self.val(x).reshaped(shape)?;
        t.requires_grad = false;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(
                "transpose",
                format!("need 2 axes, got {xs:?}"),
            ));
        }
        let (rows, cols) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let batch = self.val(x).len() / (rows * cols);
        let xd = self.val(x).data();
        let mut y = vec![0.0; xd.len()];
        for b in 0..batch {
            for r in 0..rows {
                for c in 0..cols {
                    y[b * rows * cols + c * rows + r] = xd[b * rows * cols + r * cols + c];
                }
            }
        }
        let mut shape = xs.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Mean over the first axis of a 2D tensor: `[R, C] → [1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(Error::shape(
                "mean_rows",
                format!("need [rows, cols], got {xs:?}"),
            ));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xd = self.val(x).data();
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                y[c] += xd[r * cols + c] / rows as f64;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![1, cols], y)?,
            Op::MeanRows { x, rows, cols },
            rg,
        ))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.val(a), self.val(b))?;
        let n = self.val(a).len() as f64;
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// Mean squared difference over the elements where `mask` is set; 0 when
    /// the mask selects nothing.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Result<Var> {
        same_shape("masked_mse", self.val(a), self.val(b))?;
        if mask.len() != self.val(a).len() {
            return Err(Error::shape(
                "masked_mse",
                format!("mask of {} for {:?}", mask.len(), self.val(a).shape()),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((x, y), _)| (x - y) * (x - y))
            .sum();
        let v = if count == 0 { 0.0 } else { s / count as f64 };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(v),
            Op::MaskedMse {
                a,
                b,
                mask: Arc::new(mask),
                count,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).len() as f64;
        let s: f64 = self.val(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `½ Σ (μ² + σ² − 1 − ln σ²)`, KL divergence of a diagonal Gaussian from
    /// the standard normal, summed over all elements.
    pub fn kl_gaussian(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        same_shape("kl_gaussian", self.val(mu), self.val(sigma))?;
        if let Some(s) = self.val(sigma).data().iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "kl_gaussian needs sigma > 0, got {s}"
            )));
        }
        let v = kl_value(self.val(mu).data(), self.val(sigma).data());
        let rg = self.rg(mu) || self.rg(sigma);
        Ok(self.push(Tensor::scalar(v), Op::Kl { mu, sigma }, rg))
    }

    /// Backward warp of a scalar volume by a channel-major displacement field
    /// (mm) on `grid`.
    pub fn warp(&mut self, vol: Var, dvf: Var, grid: &Grid) -> Result<Var> {
        let n = grid.len();
        if self.val(vol).len() != n || self.val(dvf).len() != 3 * n {
            return Err(Error::shape(
                "warp",
                format!(
                    "volume {:?}, field {:?} on grid {:?}",
                    self.val(vol).shape(),
                    self.val(dvf).shape(),
                    grid.dims
                ),
            ));
        }
        let vd = self.val(vol).data();
        let dd = self.val(dvf).data();
        let mut h = self.kinks;
        let mut y = vec![0.0; n];
        for (idx, yv) in y.iter_mut().enumerate() {
            let p = field::displaced_index(grid, idx, [dd[idx], dd[n + idx], dd[2 * n + idx]]);
            for c in field::cells(grid.dims, p) {
                h = mix(h, (c.base as u64) << 1 | c.clamped as u64);
            }
            *yv = field::sample_index(vd, grid.dims, p);
        }
        self.kinks = mix(h, 0x7761_7270);
        let shape = self.val(vol).shape().to_vec();
        let rg = self.rg(vol) || self.rg(dvf);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Warp {
                vol,
                dvf,
                grid: *grid,
            },
            rg,
        ))
    }

    /// Mean squared Frobenius norm of the spatial Jacobian of a channel-major
    /// field.
    pub fn smoothness(&mut self, dvf: Var, grid: &Grid) -> Result<Var> {
        if self.val(dvf).len() != 3 * grid.len() {
            return Err(Error::shape(
                "smoothness",
                format!("field {:?} on grid {:?}", self.val(dvf).shape(), grid.dims),
            ));
        }
        let v = field::smoothness_channels(grid, self.val(dvf).data());
        let rg = self.rg(dvf);
        Ok(self.push(Tensor::scalar(v), Op::Smoothness { dvf, grid: *grid }, rg))
    }

    /// Band-limited synthesis; output is `[3, Z, Y, X]`.
    pub fn synth(&mut self, coeffs: Var, basis: Arc<SynthBasis>) -> Result<Var> {
        if self.val(coeffs).len() != basis.coeff_len() {
            return Err(Error::shape(
                "synth",
                format!(
                    "{} coefficients for a basis of {}",
                    self.val(coeffs).len(),
                    basis.coeff_len()
                ),
            ));
        }
        let y = basis.synthesize(self.val(coeffs).data());
        let [nx, ny, nz] = basis.target.dims;
        let rg = self.rg(coeffs);
        Ok(self.push(
            Tensor::new(vec![3, nz, ny, nx], y)?,
            Op::Synth { coeffs, basis },
            rg,
        ))
    }

    /// Local mean over a `(2r+1)³` window clipped to the grid; the divisor is
    /// the number of in-grid voxels.
    pub fn box_mean(&mut self, x: Var, dims: [usize; 3], radius: usize) -> Result<Var> {
        if self.val(x).len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(
                "box_mean",
                format!("{:?} for dims {dims:?}", self.val(x).shape()),
            ));
        }
        let mut y = self.val(x).data().to_vec();
        for axis in 0..3 {
            y = box_axis(&y, dims, axis, radius, false);
        }
        let shape = self.val(x).shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::BoxMean { x, dims, radius }, rg))
    }

    /// Reverse pass from `output`. A scalar output may omit `seed` (taken as 1).
    /// The tape can be differentiated once.
    pub fn backward(&mut self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let out_shape = self.val(output).shape().to_vec();
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(Error::shape(
                        "backward",
                        format!("seed {:?} for output {out_shape:?}", s.shape()),
                    ));
                }
                s
            }
            None => {
                if self.val(output).len() != 1 {
                    return Err(Error::shape(
                        "backward",
                        format!("non-scalar output {out_shape:?} needs a seed"),
                    ));
                }
                Tensor::filled(&out_shape, 1.0)
            }
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.into_data());

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| {
                    Tensor::new(n.value.shape().to_vec(), g).expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(k, s)| *s += g[k] * bv[k])
                });
                acc(*b, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(k, s)| *s += g[k] * av[k])
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(k, s)| *s += g[k] / bv[k])
                });
                acc(*b, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(k, s)| *s -= g[k] * av[k] / (bv[k] * bv[k]))
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)
            }),
            Op::AddScalar(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::MulScalarVar(x, sc) => {
                let c = val(*sc)[0];
                let xv = val(*x);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)
                });
                let dot: f64 = xv.iter().zip(g).map(|(a, b)| a * b).sum();
                acc(*sc, &mut |s| s[0] += dot);
            }
            Op::Sqrt(x) => {
                let y = nodes[i].value.data();
                acc(*x, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(k, s)| *s += g[k] / (2.0 * y[k]))
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    s.iter_mut().enumerate().for_each(|(k, s)| {
                        if xv[k] > 0.0 {
                            *s += g[k]
                        }
                    })
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(k, s)| *s += g[k] * sigmoid(xv[k]))
                });
            }
            Op::Dense {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for k in 0..inp {
                                s[r * inp + k] += go * wv[o * inp + k];
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for k in 0..inp {
                                s[o * inp + k] += go * xv[r * inp + k];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..rows {
                        for o in 0..out {
                            s[o] += g[r * out + o];
                        }
                    }
                });
            }
            Op::Conv { x, w, b, g: geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| conv_backward_input(geom, g, wv, s));
                acc(*w, &mut |s| conv_backward_weight(geom, g, xv, s));
                acc(*b, &mut |s| {
                    let on = geom.out[0] * geom.out[1] * geom.out[2];
                    for bi in 0..geom.batch {
                        for o in 0..geom.out_c {
                            let base = (bi * geom.out_c + o) * on;
                            s[o] += g[base..base + on].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::AvgPool { x, lead, inp, f } => {
                let out = [inp[0] / f[0], inp[1] / f[1], inp[2] / f[2]];
                let on = out[0] * out[1] * out[2];
                let inn = inp[0] * inp[1] * inp[2];
                let norm = 1.0 / (f[0] * f[1] * f[2]) as f64;
                acc(*x, &mut |s| {
                    for l in 0..*lead {
                        for z in 0..inp[0] {
                            for yy in 0..inp[1] {
                                for xx in 0..inp[2] {
                                    let o = ((z / f[0]) * out[1] + yy / f[1]) * out[2] + xx / f[2];
                                    s[l * inn + (z * inp[1] + yy) * inp[2] + xx] +=
                                        g[l * on + o] * norm;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, lead, inp, f } => {
                let out = [inp[0] * f[0], inp[1] * f[1], inp[2] * f[2]];
                let on = out[0] * out[1] * out[2];
                let inn = inp[0] * inp[1] * inp[2];
                acc(*x, &mut |s| {
                    for l in 0..*lead {
                        for z in 0..out[0] {
                            for yy in 0..out[1] {
                                for xx in 0..out[2] {
                                    let src =
                                        ((z / f[0]) * inp[1] + yy / f[1]) * inp[2] + xx / f[2];
                                    s[l * inn + src] += g[l * on + (z * out[1] + yy) * out[2] + xx];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, w) in parts.iter().zip(widths) {
                    let off = offset;
                    acc(*p, &mut |s| {
                        for o in 0..*outer {
                            for k in 0..*w {
                                s[o * w + k] += g[o * row + off + k];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                acc(*x, &mut |s| {
                    for b in 0..*batch {
                        for r in 0..rows {
                            for c in 0..cols {
                                s[b * rows * cols + r * cols + c] +=
                                    g[b * rows * cols + c * rows + r];
                            }
                        }
                    }
                });
            }
            Op::MeanRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(j, s)| *s += k * (av[j] - bv[j]))
                });
                acc(*b, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(j, s)| *s -= k * (av[j] - bv[j]))
                });
            }
            Op::MaskedMse { a, b, mask, count } => {
                if *count > 0 {
                    let (av, bv) = (val(*a), val(*b));
                    let k = 2.0 * g[0] / *count as f64;
                    acc(*a, &mut |s| {
                        s.iter_mut().enumerate().for_each(|(j, s)| {
                            if mask[j] {
                                *s += k * (av[j] - bv[j])
                            }
                        })
                    });
                    acc(*b, &mut |s| {
                        s.iter_mut().enumerate().for_each(|(j, s)| {
                            if mask[j] {
                                *s -= k * (av[j] - bv[j])
                            }
                        })
                    });
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Kl { mu, sigma } => {
                let (mv, sv) = (val(*mu), val(*sigma));
                acc(*mu, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(j, s)| *s += g[0] * mv[j])
                });
                acc(*sigma, &mut |s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(j, s)| *s += g[0] * (sv[j] - 1.0 / sv[j]))
                });
            }
            Op::Warp { vol, dvf, grid } => {
                let n = grid.len();
                let (vv, dv) = (val(*vol), val(*dvf));
                let pos = |idx: usize| {
                    field::displaced_index(grid, idx, [dv[idx], dv[n + idx], dv[2 * n + idx]])
                };
                acc(*dvf, &mut |s| {
                    for idx in 0..n {
                        if g[idx] == 0.0 {
                            continue;
                        }
                        let (_, d) = field::sample_index_grad(vv, grid.dims, pos(idx));
                        for a in 0..3 {
                            s[a * n + idx] += g[idx] * d[a] / grid.spacing[a];
                        }
                    }
                });
                acc(*vol, &mut |s| {
                    for idx in 0..n {
                        if g[idx] != 0.0 {
                            field::scatter_index(s, grid.dims, pos(idx), g[idx]);
                        }
                    }
                });
            }
            Op::Smoothness { dvf, grid } => {
                let d = field::smoothness_channels_grad(grid, val(*dvf));
                acc(*dvf, &mut |s| {
                    s.iter_mut().zip(&d).for_each(|(s, d)| *s += g[0] * d)
                });
            }
            Op::Synth { coeffs, basis } => {
                let d = basis.adjoint(g);
                acc(*coeffs, &mut |s| {
                    s.iter_mut().zip(&d).for_each(|(s, d)| *s += d)
                });
            }
            Op::BoxMean { x, dims, radius } => {
                let mut d = g.to_vec();
                for axis in (0..3).rev() {
                    d = box_axis(&d, *dims, axis, *radius, true);
                }
                acc(*x, &mut |s| s.iter_mut().zip(&d).for_each(|(s, d)| *s += d));
            }
        }
    }
}

pub(crate) fn kl_value(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// 1D clipped box mean along `axis`, or its transpose.
fn box_axis(x: &[f64], dims: [usize; 3], axis: usize, r: usize, transpose: bool) -> Vec<f64> {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let count = |i: usize| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64;
    let mut out = vec![0.0; x.len()];
    let mut prefix = vec![0.0; n + 1];
    for start in 0..x.len() {
        if (start / stride) % n != 0 {
            continue;
        }
        for i in 0..n {
            let v = x[start + i * stride];
            prefix[i + 1] = prefix[i] + if transpose { v / count(i) } else { v };
        }
        for i in 0..n {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            let s = prefix[hi + 1] - prefix[lo];
            out[start + i * stride] = if transpose { s } else { s / count(i) };
        }
    }
    out
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let on = g.out[0] * g.out[1] * g.out[2];
    let inn = g.inp[0] * g.inp[1] * g.inp[2];
    let kn = g.k[0] * g.k[1] * g.k[2];
    let mut y = vec![0.0; g.batch * g.out_c * on];
    for bi in 0..g.batch {
        for o in 0..g.out_c {
            let yo = &mut y[(bi * g.out_c + o) * on..(bi * g.out_c + o + 1) * on];
            yo.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..g.in_c {
                let xc = &x[(bi * g.in_c + c) * inn..(bi * g.in_c + c + 1) * inn];
                let wk = &w[(o * g.in_c + c) * kn..(o * g.in_c + c + 1) * kn];
                conv_taps(g, |oz, oy, ox, iz, iy, ix, kidx| {
                    yo[(oz * g.out[1] + oy) * g.out[2] + ox] +=
                        wk[kidx] * xc[(iz * g.inp[1] + iy) * g.inp[2] + ix];
                });
            }
        }
    }
    y
}

fn conv_backward_input(g: &ConvGeom, gy: &[f64], w: &[f64], gx: &mut [f64]) {
    let on = g.out[0] * g.out[1] * g.out[2];
    let inn = g.inp[0] * g.inp[1] * g.inp[2];
    let kn = g.k[0] * g.k[1] * g.k[2];
    for bi in 0..g.batch {
        for o in 0..g.out_c {
            let go = &gy[(bi * g.out_c + o) * on..(bi * g.out_c + o + 1) * on];
            for c in 0..g.in_c {
                let gxc = &mut gx[(bi * g.in_c + c) * inn..(bi * g.in_c + c + 1) * inn];
                let wk = &w[(o * g.in_c + c) * kn..(o * g.in_c + c + 1) * kn];
                conv_taps(g, |oz, oy, ox, iz, iy, ix, kidx| {
                    gxc[(iz * g.inp[1] + iy) * g.inp[2] + ix] +=
                        wk[kidx] * go[(oz * g.out[1] + oy) * g.out[2] + ox];
                });
            }
        }
    }
}

fn conv_backward_weight(g: &ConvGeom, gy: &[f64], x: &[f64], gw: &mut [f64]) {
    let on = g.out[0] * g.out[1] * g.out[2];
    let inn = g.inp[0] * g.inp[1] * g.inp[2];
    let kn = g.k[0] * g.k[1] * g.k[2];
    for bi in 0..g.batch {
        for o in 0..g.out_c {
            let go = &gy[(bi * g.out_c + o) * on..(bi * g.out_c + o + 1) * on];
            for c in 0..g.in_c {
                let xc = &x[(bi * g.in_c + c) * inn..(bi * g.in_c + c + 1) * inn];
                let gwk = &mut gw[(o * g.in_c + c) * kn..(o * g.in_c + c + 1) * kn];
                conv_taps(g, |oz, oy, ox, iz, iy, ix, kidx| {
                    gwk[kidx] += go[(oz * g.out[1] + oy) * g.out[2] + ox]
                        * xc[(iz * g.inp[1] + iy) * g.inp[2] + ix];
                });
            }
        }
    }
}

/// Visits every (output voxel, kernel tap) pair whose input lies inside the
/// unpadded input.
#[inline]
fn conv_taps(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    for kz in 0..g.k[0] {
        for ky in 0..g.k[1] {
            for kx in 0..g.k[2] {
                let kidx = (kz * g.k[1] + ky) * g.k[2] + kx;
                for oz in 0..g.out[0] {
                    let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                    if iz < 0 || iz >= g.inp[0] as isize {
                        continue;
                    }
                    for oy in 0..g.out[1] {
                        let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                        if iy < 0 || iy >= g.inp[1] as isize {
                            continue;
                        }
                        for ox in 0..g.out[2] {
                            let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                            if ix < 0 || ix >= g.inp[2] as isize {
                                continue;
                            }
                            f(oz, oy, ox, iz as usize, iy as usize, ix as usize, kidx);
                        }
                    }
                }
            }
        }
    }
}

/// Runs `graph` on a fresh tape with `inputs` as leaves and returns the output
/// values together with the tape for a later backward pass.
pub fn forward<F>(
    inputs: &[Tensor],
    params: &ParamSet,
    graph: F,
) -> Result<(Vec<Tensor>, Vec<Var>, Tape)>
where
    F: FnOnce(&mut Tape, &[Var], &ParamSet) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let outs = graph(&mut tape, &vars, params)?;
    for o in &outs {
        if !tape.value(*o).is_finite() {
            return Err(Error::NonFinite(format!("forward output node {}", o.0)));
        }
    }
    let values = outs.iter().map(|o| tape.value(*o).clone()).collect();
    Ok((values, outs, tape))
}
