use std::sync::Arc;

use rand::Rng;

use super::{dim_err, gemm, MatView, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotation angles for rotary position encoding.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    head_dim: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Real> RopeTable<F> {
    /// Angle for pair `i` at position `p` is `p · base^(−2i/head_dim)`.
    pub fn new(positions: &[f64], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(TensorError::Contract(format!(
                "rotary encoding needs an even head dimension, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p * freq;
                cos.push(F::from_f64(angle.cos()));
                sin.push(F::from_f64(angle.sin()));
            }
        }
        Ok(RopeTable { head_dim, cos, sin })
    }

    pub fn len(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    Softmax {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Silu(Var),
    LeakyRelu(Var, F),
    Rope {
        x: Var,
        table: Arc<RopeTable<F>>,
    },
    SwapAxes12(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<F>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Softmax { .. } => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::Silu(..) => "silu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Rope { .. } => "rope",
            Op::SwapAxes12(..) => "swap_axes",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Ordered record of every operation in one forward pass.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers; [`Tape::backward`] walks the list in exact reverse. Gradients
/// arriving at a node from several consumers are summed.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
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

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable input; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Moves a value out, leaving an empty placeholder. Only for tapes that
    /// will not be differentiated afterwards.
    pub fn take_value(&mut self, v: Var) -> Tensor<F> {
        std::mem::replace(
            &mut self.nodes[v.0].value,
            Tensor {
                shape: vec![1],
                data: vec![F::zero()],
            },
        )
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        self.grad(v).map(|g| Tensor {
            shape: self.shape(v).to_vec(),
            data: g.to_vec(),
        })
    }

    /// Name of the first recorded op whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes.iter().find(|n| !n.value.is_finite()).map(|n| n.op.name())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── forward operations ───────────────────────────────────────────

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, false)
    }

    /// `a[..., k] · b` with `b` stored as `[k, n]`, or as `[n, k]` when
    /// `trans_b` is set.
    pub fn linear(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return dim_err("matmul", format!("right operand must be 2-D, got {:?}", bv.shape()));
        }
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let (k, n) = if trans_b { (bc, br) } else { (br, bc) };
        if av.last_dim() != k {
            return dim_err(
                "matmul",
                format!("{:?} × {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            );
        }
        let m = av.rows();
        let mut out = vec![F::zero(); m * n];
        gemm(
            MatView::new(av.data(), m, k, false),
            MatView::new(bv.data(), br, bc, trans_b),
            &mut out,
            false,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::MatMul { a, b, trans_b }))
    }

    /// Batched product over all leading axes of two tensors of rank ≥ 3.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return dim_err("bmm", format!("incompatible batch shapes {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (ar, ac) = (sa[r - 2], sa[r - 1]);
        let (br, bc) = (sb[r - 2], sb[r - 1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return dim_err("bmm", format!("inner extents {k} and {k2} differ"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                MatView::new(&av.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac, trans_a),
                MatView::new(&bv.data()[i * br * bc..(i + 1) * br * bc], br, bc, trans_b),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Bmm { a, b, trans_a, trans_b }))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: av.shape().to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// Adds a `[n]` vector to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape() != [xv.last_dim()] {
            return dim_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape()));
        }
        let n = xv.last_dim();
        let b = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| v * c).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: F = xv.data().iter().copied().sum();
        let m = s / F::from_f64(xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), rg, Op::Mean(x))
    }

    /// `y = gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return dim_err("rmsnorm", format!("gain {:?} for input {:?}", gv.shape(), xv.shape()));
        }
        let eps = F::from_f64(eps);
        let inv_d = F::from_f64(1.0 / d as f64);
        let g = gv.data();
        let mut data = vec![F::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for (row, out) in xv.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let ms: F = row.iter().map(|&v| v * v).sum::<F>() * inv_d;
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..d {
                out[j] = g[j] * row[j] * r;
            }
        }
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x, gain]);
        Ok(self.push(t, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last axis of `[..., T, T]` scores where row `i` may
    /// only see columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return dim_err("causal_softmax", format!("needs square trailing axes, got {s:?}"));
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(TensorError::NonFinite {
                op: "softmax input".into(),
            });
        }
        let n = xv.last_dim();
        let mut data = vec![F::zero(); xv.numel()];
        for (r, (row, out)) in xv.data().chunks_exact(n).zip(data.chunks_exact_mut(n)).enumerate() {
            let limit = if causal { (r % n) + 1 } else { n };
            let mx = row[..limit].iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..limit {
                let e = (row[j] - mx).exp();
                out[j] = e;
                total += e;
            }
            let inv = F::one() / total;
            for o in out[..limit].iter_mut() {
                *o = *o * inv;
            }
            debug_assert!(!causal || out[limit..].iter().all(|v| *v == F::zero()));
        }
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax { x }))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales
    /// the survivors by `1/(1−p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<F> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v / (F::one() + (-v).exp())).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Silu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v >= F::zero() { v } else { v * s })
            .collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::LeakyRelu(x, s))
    }

    /// Rotates consecutive pairs `(2i, 2i+1)` of `x[B, T, heads, head_dim]`
    /// by the angle stored for position `t`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable<F>>) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[3] != table.head_dim {
            return dim_err("rope", format!("input {s:?}, table head_dim {}", table.head_dim));
        }
        if s[1] > table.len() {
            return dim_err("rope", format!("{} positions, table holds {}", s[1], table.len()));
        }
        let data = rope_apply(xv.data(), s, &table, false);
        let t = Tensor {
            shape: s.to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Rope { x, table }))
    }

    /// `[a, b, c, d] → [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return dim_err("swap_axes12", format!("needs rank 4, got {s:?}"));
        }
        let data = swap12(xv.data(), s);
        let t = Tensor {
            shape: vec![s[0], s[2], s[1], s[3]],
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::SwapAxes12(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    /// Rows whose target is `None` are ignored; all-ignored yields zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        if lv.rows() != targets.len() {
            return dim_err(
                "cross_entropy",
                format!("{} rows of logits, {} targets", lv.rows(), targets.len()),
            );
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let mut probs = vec![F::zero(); lv.numel()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for ((row, p), t) in lv.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)).zip(targets) {
            let Some(t) = *t else { continue };
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                p[j] = e;
                z += e;
            }
            for pj in p.iter_mut() {
                *pj = *pj / z;
            }
            total += (z.ln() + mx - row[t]).as_f64();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(F::from_f64(loss)),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Same as [`Tape::cross_entropy`] with every row supervised.
    pub fn cross_entropy_all(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.cross_entropy(logits, &t)
    }

    /// Selects rows of a `[V, d]` table; the result is `[index.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return dim_err("gather_rows", format!("table must be 2-D, got {:?}", tv.shape()));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: v,
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![index.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            rg,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
        ))
    }

    /// Unit-normalizes each row over the last axis. Rows with norm below
    /// `1e-12` map to zero (and pass no gradient).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = vec![F::zero(); xv.numel()];
        let mut inv_norm = Vec::with_capacity(xv.rows());
        for (row, out) in xv.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            let inv = if norm.as_f64() < 1e-12 {
                F::zero()
            } else {
                F::one() / norm
            };
            inv_norm.push(inv);
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::L2Normalize { x, inv_norm })
    }

    // ── reverse pass ─────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, g: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        g(buf);
    }

    /// Populates gradients of every `requires_grad` node reachable from the
    /// scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].value.is_finite() {
            return Err(TensorError::NonFinite {
                op: self.first_non_finite().unwrap_or("loss").into(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_node(i, &op, &g);
            self.nodes[i].op = op;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: format!("{} (gradient)", self.nodes[i].op.name()),
                });
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let av = self.nodes[a.0].value.clone_shape_data();
                let bv = self.nodes[b.0].value.clone_shape_data();
                let k = av.0.last().copied().unwrap();
                let m = av.1.len() / k;
                let (br, bc) = (bv.0[0], bv.0[1]);
                let n = if trans_b { br } else { bc };
                // dA[m,k] = G[m,n] · op(B)ᵀ
                self.accumulate(a, |ga| {
                    gemm(
                        MatView::new(g, m, n, false),
                        MatView::new(&bv.1, br, bc, !trans_b),
                        ga,
                        true,
                    )
                });
                if trans_b {
                    // B stored [n,k]: dB = Gᵀ · A
                    self.accumulate(b, |gb| {
                        gemm(MatView::new(g, m, n, true), MatView::new(&av.1, m, k, false), gb, true)
                    });
                } else {
                    self.accumulate(b, |gb| {
                        gemm(MatView::new(&av.1, m, k, true), MatView::new(g, m, n, false), gb, true)
                    });
                }
            }
            Op::Bmm { a, b, trans_a, trans_b } => {
                let (a, b, ta, tb) = (*a, *b, *trans_a, *trans_b);
                let (sa, ad) = self.nodes[a.0].value.clone_shape_data();
                let (sb, bd) = self.nodes[b.0].value.clone_shape_data();
                let r = sa.len();
                let (ar, ac, br, bc) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
                let m = if ta { ac } else { ar };
                let n = if tb { br } else { bc };
                let batch: usize = sa[..r - 2].iter().product();
                let (asz, bsz, gsz) = (ar * ac, br * bc, m * n);
                self.accumulate(a, |ga| {
                    for i in 0..batch {
                        let gi = &g[i * gsz..(i + 1) * gsz];
                        let bi = &bd[i * bsz..(i + 1) * bsz];
                        let out = &mut ga[i * asz..(i + 1) * asz];
                        if ta {
                            // A stored [k,m]: dA = op(B) · Gᵀ
                            gemm(MatView::new(bi, br, bc, tb), MatView::new(gi, m, n, true), out, true);
                        } else {
                            gemm(MatView::new(gi, m, n, false), MatView::new(bi, br, bc, !tb), out, true);
                        }
                    }
                });
                self.accumulate(b, |gb| {
                    for i in 0..batch {
                        let gi = &g[i * gsz..(i + 1) * gsz];
                        let ai = &ad[i * asz..(i + 1) * asz];
                        let out = &mut gb[i * bsz..(i + 1) * bsz];
                        if tb {
                            // B stored [n,k]: dB = Gᵀ · op(A)
                            gemm(MatView::new(gi, m, n, true), MatView::new(ai, ar, ac, ta), out, true);
                        } else {
                            gemm(MatView::new(ai, ar, ac, !ta), MatView::new(gi, m, n, false), out, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.nodes[bias.0].value.numel();
                self.accumulate(*x, |gx| gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.accumulate(*bias, |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                self.accumulate(a, |ga| {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += y * w;
                    }
                });
                self.accumulate(b, |gb| {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(&av) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(*x, |gx| gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c));
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |gx| gx.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let g0 = g[0] / F::from_f64(n as f64);
                self.accumulate(*x, |gx| gx.iter_mut().for_each(|x| *x += g0));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xd = self.nodes[x.0].value.data().to_vec();
                let gd = self.nodes[gain.0].value.data().to_vec();
                let d = gd.len();
                let inv_d = F::from_f64(1.0 / d as f64);
                self.accumulate(x, |gx| {
                    for (r, ((xr, gr), out)) in xd
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let ir = inv_rms[r];
                        let dot: F = (0..d).map(|j| gd[j] * gr[j] * xr[j]).sum();
                        let coef = ir * ir * ir * dot * inv_d;
                        for j in 0..d {
                            out[j] += ir * gd[j] * gr[j] - coef * xr[j];
                        }
                    }
                });
                self.accumulate(gain, |gg| {
                    for (r, (xr, gr)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        let ir = inv_rms[r];
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j] * ir;
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data().to_vec();
                let n = self.nodes[i].value.last_dim();
                self.accumulate(*x, |gx| {
                    for ((yr, gr), out) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, |gx| {
                    for ((o, &y), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += y * m;
                    }
                });
            }
            Op::Silu(x) => {
                let xd = self.nodes[x.0].value.data().to_vec();
                self.accumulate(*x, |gx| {
                    for ((o, &y), &v) in gx.iter_mut().zip(g).zip(&xd) {
                        let s = F::one() / (F::one() + (-v).exp());
                        *o += y * s * (F::one() + v * (F::one() - s));
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xd = self.nodes[x.0].value.data().to_vec();
                let slope = *slope;
                self.accumulate(*x, |gx| {
                    for ((o, &y), &v) in gx.iter_mut().zip(g).zip(&xd) {
                        *o += if v >= F::zero() { y } else { y * slope };
                    }
                });
            }
            Op::Rope { x, table } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let back = rope_apply(g, &s, table, true);
                self.accumulate(*x, |gx| gx.iter_mut().zip(&back).for_each(|(o, &v)| *o += v));
            }
            Op::SwapAxes12(x) => {
                let s = self.nodes[i].value.shape().to_vec();
                let back = swap12(g, &s);
                self.accumulate(*x, |gx| gx.iter_mut().zip(&back).for_each(|(o, &v)| *o += v));
            }
            Op::Reshape(x) => {
                self.accumulate(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let c = self.nodes[logits.0].value.last_dim();
                let scale = g[0] / F::from_f64(*count as f64);
                self.accumulate(*logits, |gl| {
                    for ((out, p), t) in gl.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(targets) {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            out[j] += p[j] * scale;
                        }
                        out[t] = out[t] - scale;
                    }
                });
            }
            Op::Gather { table, index } => {
                let d = self.nodes[table.0].value.last_dim();
                self.accumulate(*table, |gt| {
                    for (r, &ix) in index.iter().enumerate() {
                        for j in 0..d {
                            gt[ix * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::L2Normalize { x, inv_norm } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.last_dim();
                self.accumulate(*x, |gx| {
                    for (r, ((yr, gr), out)) in y
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let inv = inv_norm[r];
                        if inv == F::zero() {
                            continue;
                        }
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            out[j] += (gr[j] - yr[j] * dot) * inv;
                        }
                    }
                });
            }
        }
    }
}

impl<F: Real> Tensor<F> {
    fn clone_shape_data(&self) -> (Vec<usize>, Vec<F>) {
        (self.shape.clone(), self.data.clone())
    }
}

fn rope_apply<F: Real>(x: &[F], shape: &[usize], table: &RopeTable<F>, inverse: bool) -> Vec<F> {
    let (b, t, h, hd) = (shape[0], shape[1], shape[2], shape[3]);
    let half = hd / 2;
    let mut out = vec![F::zero(); x.len()];
    for bi in 0..b {
        for ti in 0..t {
            let cs = &table.cos[ti * half..(ti + 1) * half];
            let sn = &table.sin[ti * half..(ti + 1) * half];
            for hi in 0..h {
                let base = ((bi * t + ti) * h + hi) * hd;
                for p in 0..half {
                    let (x0, x1) = (x[base + 2 * p], x[base + 2 * p + 1]);
                    let (c, s) = (cs[p], if inverse { -sn[p] } else { sn[p] });
                    out[base + 2 * p] = x0 * c - x1 * s;
                    out[base + 2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
    out
}

fn swap12<F: Real>(x: &[F], s: &[usize]) -> Vec<F> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![F::zero(); x.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let src = ((ai * b + bi) * c + ci) * d;
                let dst = ((ai * c + ci) * b + bi) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
