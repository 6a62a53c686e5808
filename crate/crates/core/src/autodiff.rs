//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A `Tape` records ops during the forward pass; `backward` replays them in
//! reverse. Ops are batched ([rows, cols] tensors), so a whole ray batch
//! flows through a handful of nodes instead of one node per scalar.
//!
//! The density path additionally supports a forward-tangent pass built out
//! of tape nodes (see [`tangent`]): the spatial gradient of the density is
//! itself a differentiable quantity, which is what analytic surface normals
//! need.

use std::rc::Rc;

use crate::error::{InvrenderError, Result};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Square,
    Recip,
    Abs,
}

/// Precomputed interpolation footprint for one (sample, level) pair of the
/// hash grid: the 8 corner rows in the flattened table tensor, their
/// trilinear weights (level annealing folded in) and the weight Jacobian
/// w.r.t. the input position.
#[derive(Clone, Debug)]
pub struct InterpFootprint<T> {
    pub corners: [u32; 8],
    pub weights: [T; 8],
    pub dwdx: [[T; 3]; 8],
}

/// Footprints for a whole batch: `samples * levels` entries, level-major
/// inside each sample.
#[derive(Clone, Debug)]
pub struct InterpSpans<T> {
    pub samples: usize,
    pub levels: usize,
    pub feat: usize,
    pub footprints: Vec<InterpFootprint<T>>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Unary(UnaryKind, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, T),
    AddConst(NodeId, T),
    MaxConst(NodeId, T),
    MinConst(NodeId, T),
    Matmul(NodeId, NodeId),
    /// `[m, n] + [1, n]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Elementwise product with a constant `[n]` vector broadcast over rows.
    MulRowConst(NodeId, Rc<Vec<T>>),
    /// Elementwise product with a constant tensor of the same shape.
    MulElemConst(NodeId, Rc<Tensor<T>>),
    /// `[m, n] * [m, 1]`, per-row scalar broadcast.
    MulColBroadcast(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// `[m, n] -> [m, 1]`.
    SumCols(NodeId),
    /// Sum groups of `g` consecutive rows: `[m, n] -> [m/g, n]`.
    SumRowGroups(NodeId, usize),
    /// Per-row exclusive prefix sum along columns.
    CumsumExclRow(NodeId),
    /// Concatenate along columns.
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    /// `out[i] = in[perm[i]]`; backward scatter-adds in row order.
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// Multi-level trilinear interpolation from a table tensor, with exact
    /// input-Jacobian flowing back into `x` when present.
    GatherInterp { tables: NodeId, x: Option<NodeId>, spans: Rc<InterpSpans<T>> },
    /// Forward tangent of `GatherInterp` w.r.t. x: `[3m, levels*feat]`,
    /// direction-major blocks. Differentiable w.r.t. the tables.
    GatherInterpTangent { tables: NodeId, spans: Rc<InterpSpans<T>> },
    /// Annealed Fourier features of `[m, 3]` positions.
    Fourier { x: NodeId, freqs: Rc<Vec<T>>, weights: Rc<Vec<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: one optional gradient tensor per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient w.r.t. `id`, zeros if the node never received one.
    pub fn wrt(&self, id: NodeId, tape: &Tape<T>) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, cl) = tape.value(id).shape();
                Tensor::zeros(r, cl)
            }
        }
    }
}

fn stable_softplus<T: Real>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf; gradient is accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    fn shape_err(op: &str, expected: String, got: String) -> InvrenderError {
        InvrenderError::ShapeMismatch { op: op.to_string(), expected, got }
    }

    fn binary_same_shape(&mut self, op_name: &str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Self::shape_err(op_name, format!("{:?}", sa), format!("{:?}", sb)));
        }
        Ok(())
    }

    pub fn try_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let v = {
            let ta = self.value(a);
            let tb = self.value(b);
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(ta.rows(), ta.cols(), data)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.try_add(a, b).unwrap()
    }

    pub fn try_sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let v = {
            let ta = self.value(a);
            let tb = self.value(b);
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
            Tensor::new(ta.rows(), ta.cols(), data)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.try_sub(a, b).unwrap()
    }

    pub fn try_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let v = {
            let ta = self.value(a);
            let tb = self.value(b);
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(ta.rows(), ta.cols(), data)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.try_mul(a, b).unwrap()
    }

    pub fn mul_const(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::MulConst(a, s), ng)
    }

    pub fn add_const(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddConst(a, s), ng)
    }

    pub fn max_const(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x.max(s));
        let ng = self.needs(a);
        self.push(v, Op::MaxConst(a, s), ng)
    }

    pub fn min_const(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x.min(s));
        let ng = self.needs(a);
        self.push(v, Op::MinConst(a, s), ng)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: NodeId) -> NodeId {
        let v = match kind {
            UnaryKind::Neg => self.value(a).map(|x| -x),
            UnaryKind::Relu => self.value(a).map(|x| x.max(T::zero())),
            UnaryKind::Softplus => self.value(a).map(stable_softplus),
            UnaryKind::Sigmoid => self.value(a).map(stable_sigmoid),
            UnaryKind::Tanh => self.value(a).map(|x| x.tanh()),
            UnaryKind::Exp => self.value(a).map(|x| x.exp()),
            UnaryKind::Ln => self.value(a).map(|x| x.ln()),
            UnaryKind::Sqrt => self.value(a).map(|x| x.sqrt()),
            UnaryKind::Sin => self.value(a).map(|x| x.sin()),
            UnaryKind::Cos => self.value(a).map(|x| x.cos()),
            UnaryKind::Square => self.value(a).map(|x| x * x),
            UnaryKind::Recip => self.value(a).map(|x| T::one() / x),
            UnaryKind::Abs => self.value(a).map(|x| x.abs()),
        };
        let ng = self.needs(a);
        self.push(v, Op::Unary(kind, a), ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Ln, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sin, a)
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Cos, a)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Square, a)
    }
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Recip, a)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn try_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa.1 != sb.0 {
            return Err(Self::shape_err("matmul", format!("[{}, k] x [k, n]", sa.0), format!("{:?} x {:?}", sa, sb)));
        }
        let v = {
            let ta = &self.nodes[a.0].value;
            let tb = &self.nodes[b.0].value;
            ta.matmul(tb)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul(a, b), ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.try_matmul(a, b).unwrap()
    }

    /// `[m, n] + [1, n]` bias broadcast.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        let sb = self.value(bias).shape();
        assert_eq!(sb, (1, n), "add_row: bias shape {:?} does not broadcast over [{}, {}]", sb, m, n);
        let v = {
            let ta = &self.nodes[a.0].value;
            let tb = &self.nodes[bias.0].value;
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    data.push(ta.at(i, j) + tb.at(0, j));
                }
            }
            Tensor::new(m, n, data)
        };
        let ng = self.needs(a) || self.needs(bias);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    /// Elementwise product with a constant `[n]` vector broadcast over rows.
    pub fn mul_row_const(&mut self, a: NodeId, row: Vec<T>) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert_eq!(row.len(), n, "mul_row_const length mismatch");
        let row = Rc::new(row);
        let v = {
            let ta = &self.nodes[a.0].value;
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    data.push(ta.at(i, j) * row[j]);
                }
            }
            Tensor::new(m, n, data)
        };
        let ng = self.needs(a);
        self.push(v, Op::MulRowConst(a, row), ng)
    }

    /// Elementwise product with a constant tensor (masks, gates).
    pub fn mul_elem_const(&mut self, a: NodeId, t: Tensor<T>) -> NodeId {
        assert_eq!(self.value(a).shape(), t.shape(), "mul_elem_const shape mismatch");
        let v = {
            let ta = &self.nodes[a.0].value;
            let data = ta.data().iter().zip(t.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(ta.rows(), ta.cols(), data)
        };
        let ng = self.needs(a);
        self.push(v, Op::MulElemConst(a, Rc::new(t)), ng)
    }

    /// `[m, n] * [m, 1]` per-row scalar broadcast.
    pub fn mul_col_broadcast(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(col).shape(), (m, 1), "mul_col_broadcast: column shape mismatch");
        let v = {
            let ta = &self.nodes[a.0].value;
            let tc = &self.nodes[col.0].value;
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let s = tc.at(i, 0);
                for j in 0..n {
                    data.push(ta.at(i, j) * s);
                }
            }
            Tensor::new(m, n, data)
        };
        let ng = self.needs(a) || self.needs(col);
        self.push(v, Op::MulColBroadcast(a, col), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let ng = self.needs(a);
        self.push(Tensor::scalar(s / c(n as f64)), Op::MeanAll(a), ng)
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        let v = {
            let ta = &self.nodes[a.0].value;
            let mut data = Vec::with_capacity(m);
            for i in 0..m {
                let mut acc = T::zero();
                for j in 0..n {
                    acc += ta.at(i, j);
                }
                data.push(acc);
            }
            Tensor::new(m, 1, data)
        };
        let ng = self.needs(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Sum groups of `g` consecutive rows: `[m, n] -> [m/g, n]`.
    pub fn sum_row_groups(&mut self, a: NodeId, g: usize) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert!(g >= 1 && m % g == 0, "sum_row_groups: {} rows not divisible by {}", m, g);
        let v = {
            let ta = &self.nodes[a.0].value;
            let mut data = vec![T::zero(); (m / g) * n];
            for i in 0..m {
                let o = (i / g) * n;
                for j in 0..n {
                    data[o + j] += ta.at(i, j);
                }
            }
            Tensor::new(m / g, n, data)
        };
        let ng = self.needs(a);
        self.push(v, Op::SumRowGroups(a, g), ng)
    }

    /// Per-row exclusive prefix sum along columns.
    pub fn cumsum_excl_row(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        let v = {
            let ta = &self.nodes[a.0].value;
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let mut acc = T::zero();
                for j in 0..n {
                    data.push(acc);
                    acc += ta.at(i, j);
                }
            }
            Tensor::new(m, n, data)
        };
        let ng = self.needs(a);
        self.push(v, Op::CumsumExclRow(a), ng)
    }

    /// Concatenate along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        for &p in parts {
            assert_eq!(self.value(p).rows(), m, "concat_cols row mismatch");
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(m, total, data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert!(start < end && end <= n, "slice_cols out of range");
        let v = {
            let ta = &self.nodes[a.0].value;
            let mut data = Vec::with_capacity(m * (end - start));
            for i in 0..m {
                data.extend_from_slice(&ta.row(i)[start..end]);
            }
            Tensor::new(m, end - start, data)
        };
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a).reshaped(rows, cols);
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// `out[i] = in[perm[i]]`. Also covers row tiling and repetition.
    pub fn gather_rows(&mut self, a: NodeId, perm: Vec<usize>) -> NodeId {
        let (m, n) = self.value(a).shape();
        for &p in &perm {
            assert!(p < m, "gather_rows index out of range");
        }
        let perm = Rc::new(perm);
        let v = {
            let ta = &self.nodes[a.0].value;
            let mut data = Vec::with_capacity(perm.len() * n);
            for &p in perm.iter() {
                data.extend_from_slice(ta.row(p));
            }
            Tensor::new(perm.len(), n, data)
        };
        let ng = self.needs(a);
        self.push(v, Op::GatherRows(a, perm), ng)
    }

    /// Multi-level trilinear interpolation: `tables` is `[entries, feat]`,
    /// the spans carry the per-sample corner rows and weights. Output is
    /// `[samples, levels*feat]`. When `x` is given, the exact piecewise
    /// Jacobian of the weights flows back into it.
    pub fn gather_interp(&mut self, tables: NodeId, x: Option<NodeId>, spans: Rc<InterpSpans<T>>) -> NodeId {
        let feat = spans.feat;
        let n = spans.samples;
        let levels = spans.levels;
        assert_eq!(self.value(tables).cols(), feat);
        assert_eq!(spans.footprints.len(), n * levels);
        let v = {
            let tab = &self.nodes[tables.0].value;
            let mut data = vec![T::zero(); n * levels * feat];
            for s in 0..n {
                for l in 0..levels {
                    let fp = &spans.footprints[s * levels + l];
                    let o = s * levels * feat + l * feat;
                    for ci in 0..8 {
                        let w = fp.weights[ci];
                        if w == T::zero() {
                            continue;
                        }
                        let row = tab.row(fp.corners[ci] as usize);
                        for f in 0..feat {
                            data[o + f] += w * row[f];
                        }
                    }
                }
            }
            Tensor::new(n, levels * feat, data)
        };
        let ng = self.needs(tables) || x.map_or(false, |xi| self.needs(xi));
        self.push(v, Op::GatherInterp { tables, x, spans }, ng)
    }

    /// Forward tangent of `gather_interp` w.r.t. the input position,
    /// stacked direction-major: rows `[d*n + i]` hold d(out_i)/d(x_d).
    pub fn gather_interp_tangent(&mut self, tables: NodeId, spans: Rc<InterpSpans<T>>) -> NodeId {
        let feat = spans.feat;
        let n = spans.samples;
        let levels = spans.levels;
        let v = {
            let tab = &self.nodes[tables.0].value;
            let mut data = vec![T::zero(); 3 * n * levels * feat];
            for d in 0..3 {
                for s in 0..n {
                    for l in 0..levels {
                        let fp = &spans.footprints[s * levels + l];
                        let o = (d * n + s) * levels * feat + l * feat;
                        for ci in 0..8 {
                            let dw = fp.dwdx[ci][d];
                            if dw == T::zero() {
                                continue;
                            }
                            let row = tab.row(fp.corners[ci] as usize);
                            for f in 0..feat {
                                data[o + f] += dw * row[f];
                            }
                        }
                    }
                }
            }
            Tensor::new(3 * n, levels * feat, data)
        };
        let ng = self.needs(tables);
        self.push(v, Op::GatherInterpTangent { tables, spans }, ng)
    }

    /// Normalize each row to unit length (with a 1e-24 guard under the
    /// square root). Composite of existing ops, fully differentiable.
    pub fn unit_rows(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        let s = self.sum_cols(sq);
        let s = self.add_const(s, T::of(1e-24));
        let r = self.sqrt(s);
        let inv = self.recip(r);
        self.mul_col_broadcast(a, inv)
    }

    /// Annealed Fourier features: x is `[m, 3]`, output `[m, 6L]` laid out
    /// axis-major as (sin, cos) pairs per frequency.
    pub fn fourier(&mut self, x: NodeId, freqs: Vec<T>, weights: Vec<T>) -> NodeId {
        assert_eq!(freqs.len(), weights.len());
        assert_eq!(self.value(x).cols(), 3, "fourier expects [m, 3] positions");
        let freqs = Rc::new(freqs);
        let weights = Rc::new(weights);
        let l = freqs.len();
        let v = {
            let tx = &self.nodes[x.0].value;
            let m = tx.rows();
            let mut data = Vec::with_capacity(m * 6 * l);
            for i in 0..m {
                for axis in 0..3 {
                    let xv = tx.at(i, axis);
                    for k in 0..l {
                        let arg = freqs[k] * xv;
                        data.push(weights[k] * arg.sin());
                        data.push(weights[k] * arg.cos());
                    }
                }
            }
            Tensor::new(m, 6 * l, data)
        };
        let ng = self.needs(x);
        self.push(v, Op::Fourier { x, freqs, weights }, ng)
    }

    /// Backward from a scalar loss node with seed 1.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward() expects a scalar loss; use backward_seeded");
        self.backward_seeded(loss, Tensor::scalar(T::one())).unwrap()
    }

    /// Backward from `out` with an explicit seed of matching shape.
    pub fn backward_seeded(&self, out: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.value(out).shape() != seed.shape() {
            return Err(InvrenderError::ShapeMismatch {
                op: "backward".to_string(),
                expected: format!("{:?}", self.value(out).shape()),
                got: format!("{:?}", seed.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            if let Some(g) = grads[idx].take() {
                if self.nodes[idx].needs_grad {
                    self.accumulate(idx, &g, &mut grads);
                }
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    // TEMP: profiling helper
    pub fn backward_profiled(&self, loss: NodeId) -> Vec<(String, f64, usize)> {
        use std::collections::HashMap as Map;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut times: Map<String, (f64, usize)> = Map::new();
        for idx in (0..=loss.0).rev() {
            if let Some(g) = grads[idx].take() {
                if self.nodes[idx].needs_grad {
                    let t = std::time::Instant::now();
                    self.accumulate(idx, &g, &mut grads);
                    let el = t.elapsed().as_secs_f64();
                    let key = match &self.nodes[idx].op {
                        Op::Leaf => "Leaf",
                        Op::Unary(k, _) => match k {
                            UnaryKind::Exp => "Unary:Exp",
                            UnaryKind::Sigmoid => "Unary:Sigmoid",
                            UnaryKind::Softplus => "Unary:Softplus",
                            UnaryKind::Relu => "Unary:Relu",
                            _ => "Unary:other",
                        },
                        Op::Add(..) => "Add",
                        Op::Sub(..) => "Sub",
                        Op::Mul(..) => "Mul",
                        Op::MulConst(..) => "MulConst",
                        Op::AddConst(..) => "AddConst",
                        Op::MaxConst(..) => "MaxConst",
                        Op::MinConst(..) => "MinConst",
                        Op::Matmul(..) => "Matmul",
                        Op::AddRow(..) => "AddRow",
                        Op::MulRowConst(..) => "MulRowConst",
                        Op::MulElemConst(..) => "MulElemConst",
                        Op::MulColBroadcast(..) => "MulColBroadcast",
                        Op::SumAll(..) => "SumAll",
                        Op::MeanAll(..) => "MeanAll",
                        Op::SumCols(..) => "SumCols",
                        Op::SumRowGroups(..) => "SumRowGroups",
                        Op::CumsumExclRow(..) => "CumsumExclRow",
                        Op::Concat(..) => "Concat",
                        Op::SliceCols(..) => "SliceCols",
                        Op::Reshape(..) => "Reshape",
                        Op::GatherRows(..) => "GatherRows",
                        Op::GatherInterp { .. } => "GatherInterp",
                        Op::GatherInterpTangent { .. } => "GatherInterpTangent",
                        Op::Fourier { .. } => "Fourier",
                    };
                    let e = times.entry(key.to_string()).or_insert((0.0, 0));
                    e.0 += el;
                    e.1 += 1;
                }
                grads[idx] = Some(g);
            }
        }
        let mut v: Vec<(String, f64, usize)> =
            times.into_iter().map(|(k, (t, n))| (k, t, n)).collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        v
    }

    fn add_grad(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::add_grad(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::add_grad(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = self.value(*b);
                    let data = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    Self::add_grad(grads, *a, Tensor::new(g.rows(), g.cols(), data));
                }
                if self.needs(*b) {
                    let ta = self.value(*a);
                    let data = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    Self::add_grad(grads, *b, Tensor::new(g.rows(), g.cols(), data));
                }
            }
            Op::MulConst(a, s) => {
                if self.needs(*a) {
                    let s = *s;
                    Self::add_grad(grads, *a, g.map(|v| v * s));
                }
            }
            Op::AddConst(a, _) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.clone());
                }
            }
            Op::MaxConst(a, s) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x > *s { gv } else { T::zero() })
                        .collect();
                    Self::add_grad(grads, *a, Tensor::new(g.rows(), g.cols(), data));
                }
            }
            Op::MinConst(a, s) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x < *s { gv } else { T::zero() })
                        .collect();
                    Self::add_grad(grads, *a, Tensor::new(g.rows(), g.cols(), data));
                }
            }
            Op::Unary(kind, a) => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let ty = &self.nodes[idx].value;
                    let data: Vec<T> = match kind {
                        UnaryKind::Neg => g.data().iter().map(|&gv| -gv).collect(),
                        UnaryKind::Relu => g
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                            .collect(),
                        UnaryKind::Softplus => g
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&gv, &x)| gv * stable_sigmoid(x))
                            .collect(),
                        UnaryKind::Sigmoid => g
                            .data()
                            .iter()
                            .zip(ty.data())
                            .map(|(&gv, &y)| gv * y * (T::one() - y))
                            .collect(),
                        UnaryKind::Tanh => g
                            .data()
                            .iter()
                            .zip(ty.data())
                            .map(|(&gv, &y)| gv * (T::one() - y * y))
                            .collect(),
                        UnaryKind::Exp => g.data().iter().zip(ty.data()).map(|(&gv, &y)| gv * y).collect(),
                        UnaryKind::Ln => g.data().iter().zip(ta.data()).map(|(&gv, &x)| gv / x).collect(),
                        UnaryKind::Sqrt => g
                            .data()
                            .iter()
                            .zip(ty.data())
                            .map(|(&gv, &y)| gv / (c::<T>(2.0) * y))
                            .collect(),
                        UnaryKind::Sin => g.data().iter().zip(ta.data()).map(|(&gv, &x)| gv * x.cos()).collect(),
                        UnaryKind::Cos => g.data().iter().zip(ta.data()).map(|(&gv, &x)| -gv * x.sin()).collect(),
                        UnaryKind::Square => g
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&gv, &x)| gv * c::<T>(2.0) * x)
                            .collect(),
                        UnaryKind::Recip => g
                            .data()
                            .iter()
                            .zip(ty.data())
                            .map(|(&gv, &y)| -gv * y * y)
                            .collect(),
                        UnaryKind::Abs => g
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&gv, &x)| {
                                if x > T::zero() {
                                    gv
                                } else if x < T::zero() {
                                    -gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                    };
                    Self::add_grad(grads, *a, Tensor::new(g.rows(), g.cols(), data));
                }
            }
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let (m, k) = self.value(*a).shape();
                    let mut da = Tensor::zeros(m, k);
                    Tensor::matmul_a_bt_into(g, self.value(*b), &mut da);
                    Self::add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let (k, n) = self.value(*b).shape();
                    let mut db = Tensor::zeros(k, n);
                    Tensor::matmul_at_b_into(self.value(*a), g, &mut db);
                    Self::add_grad(grads, *b, db);
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(*a) {
                    Self::add_grad(grads, *a, g.clone());
                }
                if self.needs(*bias) {
                    let (m, n) = g.shape();
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.at(i, j);
                        }
                    }
                    Self::add_grad(grads, *bias, Tensor::new(1, n, db));
                }
            }
            Op::MulRowConst(a, row) => {
                if self.needs(*a) {
                    let (m, n) = g.shape();
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        for j in 0..n {
                            data.push(g.at(i, j) * row[j]);
                        }
                    }
                    Self::add_grad(grads, *a, Tensor::new(m, n, data));
                }
            }
            Op::MulElemConst(a, t) => {
                if self.needs(*a) {
                    let data = g.data().iter().zip(t.data()).map(|(&gv, &tv)| gv * tv).collect();
                    Self::add_grad(grads, *a, Tensor::new(g.rows(), g.cols(), data));
                }
            }
            Op::MulColBroadcast(a, col) => {
                let (m, n) = g.shape();
                if self.needs(*a) {
                    let tc = self.value(*col);
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let s = tc.at(i, 0);
                        for j in 0..n {
                            data.push(g.at(i, j) * s);
                        }
                    }
                    Self::add_grad(grads, *a, Tensor::new(m, n, data));
                }
                if self.needs(*col) {
                    let ta = self.value(*a);
                    let mut data = Vec::with_capacity(m);
                    for i in 0..m {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += g.at(i, j) * ta.at(i, j);
                        }
                        data.push(acc);
                    }
                    Self::add_grad(grads, *col, Tensor::new(m, 1, data));
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let s = g.item();
                    let (m, n) = self.value(*a).shape();
                    Self::add_grad(grads, *a, Tensor::full(m, n, s));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let s = g.item() / c((m * n) as f64);
                    Self::add_grad(grads, *a, Tensor::full(m, n, s));
                }
            }
            Op::SumCols(a) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let s = g.at(i, 0);
                        data.extend(std::iter::repeat(s).take(n));
                    }
                    Self::add_grad(grads, *a, Tensor::new(m, n, data));
                }
            }
            Op::SumRowGroups(a, grp) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        data.extend_from_slice(g.row(i / grp));
                    }
                    Self::add_grad(grads, *a, Tensor::new(m, n, data));
                }
            }
            Op::CumsumExclRow(a) => {
                if self.needs(*a) {
                    // y_j = sum_{j' < j} x_{j'}  =>  dx_j = sum_{j' > j} g_{j'}
                    let (m, n) = g.shape();
                    let mut data = vec![T::zero(); m * n];
                    for i in 0..m {
                        let mut acc = T::zero();
                        for j in (0..n).rev() {
                            data[i * n + j] = acc;
                            acc += g.at(i, j);
                        }
                    }
                    Self::add_grad(grads, *a, Tensor::new(m, n, data));
                }
            }
            Op::Concat(parts) => {
                let m = g.rows();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        Self::add_grad(grads, p, Tensor::new(m, w, data));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let mut data = vec![T::zero(); m * n];
                    for i in 0..m {
                        for (j, &gv) in g.row(i).iter().enumerate() {
                            data[i * n + start + j] = gv;
                        }
                    }
                    let _ = end;
                    Self::add_grad(grads, *a, Tensor::new(m, n, data));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    Self::add_grad(grads, *a, g.reshaped(m, n));
                }
            }
            Op::GatherRows(a, perm) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let mut data = vec![T::zero(); m * n];
                    for (i, &p) in perm.iter().enumerate() {
                        let dst = &mut data[p * n..(p + 1) * n];
                        for (d, &gv) in dst.iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    Self::add_grad(grads, *a, Tensor::new(m, n, data));
                }
            }
            Op::GatherInterp { tables, x, spans } => {
                let feat = spans.feat;
                let levels = spans.levels;
                if self.needs(*tables) {
                    let (e, f) = self.value(*tables).shape();
                    let mut data = vec![T::zero(); e * f];
                    for s in 0..spans.samples {
                        for l in 0..levels {
                            let fp = &spans.footprints[s * levels + l];
                            let go = s * levels * feat + l * feat;
                            for ci in 0..8 {
                                let w = fp.weights[ci];
                                if w == T::zero() {
                                    continue;
                                }
                                let row = fp.corners[ci] as usize * feat;
                                for fj in 0..feat {
                                    data[row + fj] += w * g.data()[go + fj];
                                }
                            }
                        }
                    }
                    Self::add_grad(grads, *tables, Tensor::new(e, f, data));
                }
                if let Some(xi) = x {
                    if self.needs(*xi) {
                        let tab = self.value(*tables);
                        let n = spans.samples;
                        let mut data = vec![T::zero(); n * 3];
                        for s in 0..n {
                            for l in 0..levels {
                                let fp = &spans.footprints[s * levels + l];
                                let go = s * levels * feat + l * feat;
                                for ci in 0..8 {
                                    let row = tab.row(fp.corners[ci] as usize);
                                    let mut dot = T::zero();
                                    for fj in 0..feat {
                                        dot += row[fj] * g.data()[go + fj];
                                    }
                                    for d in 0..3 {
                                        data[s * 3 + d] += fp.dwdx[ci][d] * dot;
                                    }
                                }
                            }
                        }
                        Self::add_grad(grads, *xi, Tensor::new(n, 3, data));
                    }
                }
            }
            Op::GatherInterpTangent { tables, spans } => {
                if self.needs(*tables) {
                    let feat = spans.feat;
                    let levels = spans.levels;
                    let n = spans.samples;
                    let (e, f) = self.value(*tables).shape();
                    let mut data = vec![T::zero(); e * f];
                    for d in 0..3 {
                        for s in 0..n {
                            for l in 0..levels {
                                let fp = &spans.footprints[s * levels + l];
                                let go = (d * n + s) * levels * feat + l * feat;
                                for ci in 0..8 {
                                    let dw = fp.dwdx[ci][d];
                                    if dw == T::zero() {
                                        continue;
                                    }
                                    let row = fp.corners[ci] as usize * feat;
                                    for fj in 0..feat {
                                        data[row + fj] += dw * g.data()[go + fj];
                                    }
                                }
                            }
                        }
                    }
                    Self::add_grad(grads, *tables, Tensor::new(e, f, data));
                }
            }
            Op::Fourier { x, freqs, weights } => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let m = tx.rows();
                    let l = freqs.len();
                    let mut data = vec![T::zero(); m * 3];
                    for i in 0..m {
                        for axis in 0..3 {
                            let xv = tx.at(i, axis);
                            let base = i * 6 * l + axis * 2 * l;
                            let mut acc = T::zero();
                            for k in 0..l {
                                let arg = freqs[k] * xv;
                                let gs = g.data()[base + 2 * k];
                                let gc = g.data()[base + 2 * k + 1];
                                acc += weights[k] * freqs[k] * (gs * arg.cos() - gc * arg.sin());
                            }
                            data[i * 3 + axis] = acc;
                        }
                    }
                    Self::add_grad(grads, *x, Tensor::new(m, 3, data));
                }
            }
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn forward_softplus_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.softplus(x);
        assert!((tape.value(y).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.reshape(x, 2, 2);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn forward_shape_mismatch_is_structured_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(2, 2));
        let b = tape.param(Tensor::zeros(3, 2));
        match tape.try_add(a, b) {
            Err(crate::error::InvrenderError::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
        match tape.try_matmul(a, b) {
            Err(crate::error::InvrenderError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let k = tape.constant_scalar(5.0);
        let y = tape.mul_const(k, 2.0);
        let grads = tape.backward(y);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.wrt(x, &tape).item(), 0.0);
    }

    #[test]
    fn backward_seed_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(2, 2));
        let y = tape.relu(x);
        let err = tape.backward_seeded(y, Tensor::zeros(3, 1)).unwrap_err();
        assert!(matches!(err, crate::error::InvrenderError::ShapeMismatch { .. }));
    }

    /// Build a 3-layer MLP loss from flat inputs; used both on the tape and
    /// as the plain closure for the finite-difference oracle.
    fn mlp_loss_plain(inputs: &[Vec<f64>]) -> f64 {
        let x = &inputs[0]; // 4
        let w1 = &inputs[1]; // 4x5
        let w2 = &inputs[2]; // 5x5
        let w3 = &inputs[3]; // 5x1
        let mut h1 = vec![0.0; 5];
        for j in 0..5 {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += x[i] * w1[i * 5 + j];
            }
            h1[j] = acc.tanh();
        }
        let mut h2 = vec![0.0; 5];
        for j in 0..5 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += h1[i] * w2[i * 5 + j];
            }
            // softplus
            h2[j] = acc.max(0.0) + (1.0 + (-acc.abs()).exp()).ln();
        }
        let mut out = 0.0;
        for i in 0..5 {
            out += h2[i] * w3[i];
        }
        out
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Vec<f64>> = vec![
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ];
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(1, 4, inputs[0].clone()));
        let w1 = tape.param(Tensor::new(4, 5, inputs[1].clone()));
        let w2 = tape.param(Tensor::new(5, 5, inputs[2].clone()));
        let w3 = tape.param(Tensor::new(5, 1, inputs[3].clone()));
        let h1p = tape.matmul(x, w1);
        let h1 = tape.tanh(h1p);
        let h2p = tape.matmul(h1, w2);
        let h2 = tape.softplus(h2p);
        let out = tape.matmul(h2, w3);
        assert!((tape.value(out).item() - mlp_loss_plain(&inputs)).abs() < 1e-12);
        let grads = tape.backward(out);
        let analytic: Vec<Vec<f64>> = [x, w1, w2, w3]
            .iter()
            .map(|&id| grads.wrt(id, &tape).data().to_vec())
            .collect();
        gradcheck::assert_gradients_close(
            &mut |ins| mlp_loss_plain(ins),
            &inputs,
            &analytic,
            1e-5,
            1e-4,
            "3-layer MLP",
        );
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(1, 3, vec![0.4, -0.2, 0.9]));
        let s = tape.sigmoid(x);
        let l1 = tape.sum_all(s);
        let sq = tape.square(x);
        let l2 = tape.sum_all(sq);
        let (a, b) = (2.5, -1.25);
        let l1s = tape.mul_const(l1, a);
        let l2s = tape.mul_const(l2, b);
        let combined = tape.add(l1s, l2s);
        let g_combined = tape.backward(combined).wrt(x, &tape);
        let g1 = tape.backward(l1).wrt(x, &tape);
        let g2 = tape.backward(l2).wrt(x, &tape);
        for i in 0..3 {
            // exact up to multiplication reassociation (one ulp)
            let lin = a * g1.data()[i] + b * g2.data()[i];
            let err = (g_combined.data()[i] - lin).abs();
            assert!(err <= 4.0 * f64::EPSILON * lin.abs().max(1.0), "linearity violated: {}", err);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = tape.param(Tensor::new(6, 4, data));
        let w = tape.param(Tensor::new(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let h = tape.matmul(x, w);
        let a = tape.tanh(h);
        let l = tape.mean_all(a);
        let g1 = tape.backward(l);
        let g2 = tape.backward(l);
        assert_eq!(g1.wrt(x, &tape).data(), g2.wrt(x, &tape).data());
        assert_eq!(g1.wrt(w, &tape).data(), g2.wrt(w, &tape).data());
    }

    #[test]
    fn cumsum_and_row_group_ops() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let cs = tape.cumsum_excl_row(x);
        assert_eq!(tape.value(cs).data(), &[0.0, 1.0, 3.0, 0.0, 4.0, 9.0]);
        let sg = tape.sum_row_groups(x, 2);
        assert_eq!(tape.value(sg).data(), &[5.0, 7.0, 9.0]);
        // gradcheck both through a scalar reduction
        let c1 = tape.square(cs);
        let l1 = tape.sum_all(c1);
        let grads = tape.backward(l1);
        let analytic = vec![grads.wrt(x, &tape).data().to_vec()];
        let inputs = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        gradcheck::assert_gradients_close(
            &mut |ins| {
                let v = &ins[0];
                let rows = [[v[0], v[1], v[2]], [v[3], v[4], v[5]]];
                let mut total = 0.0;
                for r in rows {
                    let mut acc = 0.0;
                    for val in r {
                        total += acc * acc;
                        acc += val;
                    }
                }
                total
            },
            &inputs,
            &analytic,
            1e-5,
            1e-6,
            "cumsum_excl_row",
        );
    }

    #[test]
    fn composed_ops_gradcheck_property() {
        // Random composed graphs of supported ops, inputs in [-2, 2].
        for trial in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let xv: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let wv: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plain = |ins: &[Vec<f64>]| {
                let x = &ins[0];
                let w = &ins[1];
                let mut h = [0.0; 3];
                for i in 0..2 {
                    for j in 0..3 {
                        h[j] += x[i * 3 + j] * 0.5 + w[i * 3 + j];
                    }
                }
                let mut total = 0.0;
                for j in 0..3 {
                    let s = 1.0 / (1.0 + (-h[j]).exp());
                    let sp = h[j].max(0.0) + (1.0 + (-h[j].abs()).exp()).ln();
                    total += (s * sp + h[j].sin() * h[j].cos()).max(0.1);
                }
                total / 3.0 + w[6] * w[6] + w[7].tanh() + w[8].abs().sqrt()
            };
            let mut tape = Tape::<f64>::new();
            let x = tape.param(Tensor::new(2, 3, xv.clone()));
            let w = tape.param(Tensor::new(3, 3, wv.clone()));
            let xs = tape.mul_const(x, 0.5);
            // first two rows of w via gather
            let w2 = tape.gather_rows(w, vec![0, 1]);
            let sum = tape.add(xs, w2);
            let h = tape.sum_row_groups(sum, 2);
            let s = tape.sigmoid(h);
            let sp = tape.softplus(h);
            let prod = tape.mul(s, sp);
            let hs = tape.sin(h);
            let hc = tape.cos(h);
            let trig = tape.mul(hs, hc);
            let both = tape.add(prod, trig);
            let clamped = tape.max_const(both, 0.1);
            let m = tape.mean_all(clamped);
            let w3 = tape.gather_rows(w, vec![2]);
            let w6 = tape.slice_cols(w3, 0, 1);
            let w7 = tape.slice_cols(w3, 1, 2);
            let w8 = tape.slice_cols(w3, 2, 3);
            let w6sq = tape.square(w6);
            let w7t = tape.tanh(w7);
            let w8a = tape.abs(w8);
            let w8s = tape.sqrt(w8a);
            let t1 = tape.add(w6sq, w7t);
            let t2 = tape.add(t1, w8s);
            let t2r = tape.reshape(t2, 1, 1);
            let loss = tape.add(m, t2r);
            assert!((tape.value(loss).item() - plain(&[xv.clone(), wv.clone()])).abs() < 1e-10);
            let grads = tape.backward(loss);
            let analytic = vec![grads.wrt(x, &tape).data().to_vec(), grads.wrt(w, &tape).data().to_vec()];
            gradcheck::assert_gradients_close(
                &mut |ins| plain(ins),
                &[xv.clone(), wv.clone()],
                &analytic,
                1e-5,
                1e-4,
                &format!("composed graph trial {}", trial),
            );
        }
    }
}
