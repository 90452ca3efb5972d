//! Reverse-mode autodiff over dense `f64` matrices.
//!
//! Every tensor is a row-major `rows x cols` matrix; vectors are `1 x n` and
//! scalars `1 x 1`. A [`Graph`] records one forward pass; [`Var::backward`]
//! consumes the recorded closures and returns per-node gradients. Nodes whose
//! ancestors contain no differentiable leaf skip gradient bookkeeping
//! entirely, so evaluation-only passes pay almost nothing for the tape.
//!
//! Matrix products go through `matrixmultiply::dgemm`; everything else is
//! straightforward elementwise or reduction code.

use std::cell::RefCell;
use std::rc::Rc;

/// Immutable row-major matrix value.
#[derive(Clone, Debug)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Rc<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Tensor {
            rows,
            cols,
            data: Rc::new(data),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(1, 1, vec![x])
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor::new(1, data.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.len());
        Tensor {
            rows,
            cols,
            data: Rc::clone(&self.data),
        }
    }
}

/// `out = A(m x k) * B(k x n)`, with optional logical transposes of the
/// stored operands.
fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

type BackFn = Box<dyn FnOnce(&[f64], &mut GradBuf)>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
    needs_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
}

/// One recorded forward pass.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradient accumulation buffer used during the backward sweep.
pub struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuf {
    /// Mutable gradient slot for node `id`, zero-initialized on first touch.
    pub fn accum(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Gradients keyed by node id, as returned by [`Var::backward`].
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.slots.get_mut(id).and_then(|s| s.take())
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Inner { nodes: Vec::new() })),
        }
    }

    fn push(&self, value: Tensor, back: Option<BackFn>, needs_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            back: if needs_grad { back } else { None },
            needs_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, None, false)
    }

    /// A differentiable leaf; its gradient is available after `backward`.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None, true)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_as(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn rows(&self) -> usize {
        self.value_shape().0
    }

    pub fn cols(&self) -> usize {
        self.value_shape().1
    }

    fn value_shape(&self) -> (usize, usize) {
        let inner = self.graph.inner.borrow();
        let t = &inner.nodes[self.id].value;
        (t.rows, t.cols)
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].needs_grad
    }

    /// Runs the backward sweep seeded with ones at `self` (normally a
    /// scalar objective). Consumes the graph's recorded closures.
    pub fn backward(&self) -> Gradients {
        let n = self.graph.len();
        let mut buf = GradBuf {
            slots: vec![None; n],
        };
        let seed_len = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id].value.len()
        };
        buf.slots[self.id] = Some(vec![1.0; seed_len]);
        for id in (0..=self.id).rev() {
            let grad = match buf.slots[id].take() {
                Some(g) => g,
                None => continue,
            };
            let back = {
                let mut inner = self.graph.inner.borrow_mut();
                inner.nodes[id].back.take()
            };
            if let Some(back) = back {
                back(&grad, &mut buf);
            }
            let keep = {
                let inner = self.graph.inner.borrow();
                inner.nodes[id].needs_grad
            };
            if keep {
                // Leaves (and interior nodes, harmlessly) keep their gradient
                // for the caller.
                buf.slots[id] = Some(grad);
            }
        }
        Gradients { slots: buf.slots }
    }

    fn unary(
        &self,
        out: Tensor,
        back: impl FnOnce(&[f64], &mut GradBuf) + 'static,
    ) -> Var {
        let needs = self.needs_grad();
        self.graph.push(out, Some(Box::new(back)), needs)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn map(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let x = self.value();
        let y: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.rows, x.cols, y);
        let out_copy = out.clone();
        let id = self.id;
        self.unary(out, move |g, buf| {
            let slot = buf.accum(id, x.len());
            for i in 0..x.len() {
                slot[i] += g[i] * df(x.data()[i], out_copy.data()[i]);
            }
        })
    }

    pub fn relu(&self) -> Var {
        self.map(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var {
        self.map(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.map(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Var {
        self.map(
            |x| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn exp(&self) -> Var {
        self.map(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.map(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Var {
        self.map(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    /// `x * sigmoid(x)`, the swish activation.
    pub fn swish(&self) -> Var {
        self.map(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        self.map(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.map(move |x| x + s, |_, _| 1.0)
    }

    /// Elementwise addition of a constant tensor (same shape).
    pub fn add_const(&self, t: &Tensor) -> Var {
        let x = self.value();
        assert_eq!((x.rows, x.cols), (t.rows, t.cols));
        let y: Vec<f64> = x.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
        let id = self.id;
        let len = x.len();
        self.unary(Tensor::new(x.rows, x.cols, y), move |g, buf| {
            let slot = buf.accum(id, len);
            for i in 0..len {
                slot[i] += g[i];
            }
        })
    }

    /// Elementwise `self - t` for a constant tensor.
    pub fn sub_const(&self, t: &Tensor) -> Var {
        let x = self.value();
        assert_eq!((x.rows, x.cols), (t.rows, t.cols));
        let y: Vec<f64> = x.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
        let id = self.id;
        let len = x.len();
        self.unary(Tensor::new(x.rows, x.cols, y), move |g, buf| {
            let slot = buf.accum(id, len);
            for i in 0..len {
                slot[i] += g[i];
            }
        })
    }

    /// Elementwise multiplication by a constant tensor (same shape).
    pub fn mul_const(&self, t: &Tensor) -> Var {
        let x = self.value();
        assert_eq!((x.rows, x.cols), (t.rows, t.cols));
        let y: Vec<f64> = x.data().iter().zip(t.data()).map(|(a, b)| a * b).collect();
        let id = self.id;
        let len = x.len();
        let t = t.clone();
        self.unary(Tensor::new(x.rows, x.cols, y), move |g, buf| {
            let slot = buf.accum(id, len);
            for i in 0..len {
                slot[i] += g[i] * t.data()[i];
            }
        })
    }

    fn binary(
        &self,
        rhs: &Var,
        out: Tensor,
        back: impl FnOnce(&[f64], &mut GradBuf) + 'static,
    ) -> Var {
        assert!(self.graph.same_as(&rhs.graph), "vars from different graphs");
        let needs = self.needs_grad() || rhs.needs_grad();
        self.graph.push(out, Some(Box::new(back)), needs)
    }

    pub fn add(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
        let y: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, z)| x + z).collect();
        let (ia, ib, la) = (self.id, rhs.id, a.len());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.binary(rhs, Tensor::new(a.rows, a.cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, la);
                for i in 0..la {
                    s[i] += g[i];
                }
            }
            if nb {
                let s = buf.accum(ib, la);
                for i in 0..la {
                    s[i] += g[i];
                }
            }
        })
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
        let y: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, z)| x - z).collect();
        let (ia, ib, la) = (self.id, rhs.id, a.len());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.binary(rhs, Tensor::new(a.rows, a.cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, la);
                for i in 0..la {
                    s[i] += g[i];
                }
            }
            if nb {
                let s = buf.accum(ib, la);
                for i in 0..la {
                    s[i] -= g[i];
                }
            }
        })
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul shape mismatch");
        let y: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, z)| x * z).collect();
        let (ia, ib, la) = (self.id, rhs.id, a.len());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        let (av, bv) = (a.clone(), b.clone());
        self.binary(rhs, Tensor::new(a.rows, a.cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, la);
                for i in 0..la {
                    s[i] += g[i] * bv.data()[i];
                }
            }
            if nb {
                let s = buf.accum(ib, la);
                for i in 0..la {
                    s[i] += g[i] * av.data()[i];
                }
            }
        })
    }

    pub fn div(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "div shape mismatch");
        let y: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, z)| x / z).collect();
        let (ia, ib, la) = (self.id, rhs.id, a.len());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        let (av, bv) = (a.clone(), b.clone());
        self.binary(rhs, Tensor::new(a.rows, a.cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, la);
                for i in 0..la {
                    s[i] += g[i] / bv.data()[i];
                }
            }
            if nb {
                let s = buf.accum(ib, la);
                for i in 0..la {
                    let d = bv.data()[i];
                    s[i] -= g[i] * av.data()[i] / (d * d);
                }
            }
        })
    }

    /// Adds a `1 x C` row vector to every row of an `R x C` matrix.
    pub fn add_rowvec(&self, bias: &Var) -> Var {
        let (a, b) = (self.value(), bias.value());
        assert_eq!(b.rows, 1);
        assert_eq!(a.cols, b.cols, "add_rowvec width mismatch");
        let mut y = a.data().to_vec();
        for r in 0..a.rows {
            for c in 0..a.cols {
                y[r * a.cols + c] += b.data()[c];
            }
        }
        let (ia, ib) = (self.id, bias.id);
        let (na, nb) = (self.needs_grad(), bias.needs_grad());
        let (rows, cols) = (a.rows, a.cols);
        self.binary(bias, Tensor::new(rows, cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, rows * cols);
                for i in 0..rows * cols {
                    s[i] += g[i];
                }
            }
            if nb {
                let s = buf.accum(ib, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        s[c] += g[r * cols + c];
                    }
                }
            }
        })
    }

    /// Multiplies every row of an `R x C` matrix by a `1 x C` row vector.
    pub fn mul_rowvec(&self, scale: &Var) -> Var {
        let (a, b) = (self.value(), scale.value());
        assert_eq!(b.rows, 1);
        assert_eq!(a.cols, b.cols, "mul_rowvec width mismatch");
        let mut y = a.data().to_vec();
        for r in 0..a.rows {
            for c in 0..a.cols {
                y[r * a.cols + c] *= b.data()[c];
            }
        }
        let (ia, ib) = (self.id, scale.id);
        let (na, nb) = (self.needs_grad(), scale.needs_grad());
        let (rows, cols) = (a.rows, a.cols);
        let (av, bv) = (a.clone(), b.clone());
        self.binary(scale, Tensor::new(rows, cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        s[r * cols + c] += g[r * cols + c] * bv.data()[c];
                    }
                }
            }
            if nb {
                let s = buf.accum(ib, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        s[c] += g[r * cols + c] * av.data()[r * cols + c];
                    }
                }
            }
        })
    }

    /// Adds an `R x 1` column vector to every column of an `R x C` matrix.
    pub fn add_colvec(&self, bias: &Var) -> Var {
        let (a, b) = (self.value(), bias.value());
        assert_eq!(b.cols, 1);
        assert_eq!(a.rows, b.rows, "add_colvec height mismatch");
        let mut y = a.data().to_vec();
        for r in 0..a.rows {
            for c in 0..a.cols {
                y[r * a.cols + c] += b.data()[r];
            }
        }
        let (ia, ib) = (self.id, bias.id);
        let (na, nb) = (self.needs_grad(), bias.needs_grad());
        let (rows, cols) = (a.rows, a.cols);
        self.binary(bias, Tensor::new(rows, cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, rows * cols);
                for i in 0..rows * cols {
                    s[i] += g[i];
                }
            }
            if nb {
                let s = buf.accum(ib, rows);
                for r in 0..rows {
                    for c in 0..cols {
                        s[r] += g[r * cols + c];
                    }
                }
            }
        })
    }

    /// Elementwise division by an `R x 1` column vector broadcast across
    /// columns.
    pub fn div_colvec(&self, denom: &Var) -> Var {
        let (a, d) = (self.value(), denom.value());
        assert_eq!(d.cols, 1);
        assert_eq!(a.rows, d.rows, "div_colvec height mismatch");
        let mut y = a.data().to_vec();
        for r in 0..a.rows {
            for c in 0..a.cols {
                y[r * a.cols + c] /= d.data()[r];
            }
        }
        let (ia, id_) = (self.id, denom.id);
        let (na, nd) = (self.needs_grad(), denom.needs_grad());
        let (rows, cols) = (a.rows, a.cols);
        let (av, dv) = (a.clone(), d.clone());
        self.binary(denom, Tensor::new(rows, cols, y), move |g, buf| {
            if na {
                let s = buf.accum(ia, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        s[r * cols + c] += g[r * cols + c] / dv.data()[r];
                    }
                }
            }
            if nd {
                let s = buf.accum(id_, rows);
                for r in 0..rows {
                    let den = dv.data()[r];
                    for c in 0..cols {
                        s[r] -= g[r * cols + c] * av.data()[r * cols + c] / (den * den);
                    }
                }
            }
        })
    }

    pub fn matmul(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut y = vec![0.0; m * n];
        gemm_into(m, k, n, a.data(), false, b.data(), false, 0.0, &mut y);
        let (ia, ib) = (self.id, rhs.id);
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        let (av, bv) = (a.clone(), b.clone());
        self.binary(rhs, Tensor::new(m, n, y), move |g, buf| {
            if na {
                // dA = G * B^T  (m x k)
                let s = buf.accum(ia, m * k);
                gemm_into(m, n, k, g, false, bv.data(), true, 1.0, s);
            }
            if nb {
                // dB = A^T * G  (k x n)
                let s = buf.accum(ib, k * n);
                gemm_into(k, m, n, av.data(), true, g, false, 1.0, s);
            }
        })
    }

    pub fn transpose(&self) -> Var {
        let a = self.value();
        let (rows, cols) = (a.rows, a.cols);
        let mut y = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                y[c * rows + r] = a.data()[r * cols + c];
            }
        }
        let id = self.id;
        self.unary(Tensor::new(cols, rows, y), move |g, buf| {
            let s = buf.accum(id, rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    s[r * cols + c] += g[c * rows + r];
                }
            }
        })
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        let a = self.value();
        assert_eq!(rows * cols, a.len(), "reshape length mismatch");
        let id = self.id;
        let len = a.len();
        self.unary(a.reshaped(rows, cols), move |g, buf| {
            let s = buf.accum(id, len);
            for i in 0..len {
                s[i] += g[i];
            }
        })
    }

    pub fn sum(&self) -> Var {
        let a = self.value();
        let total: f64 = a.data().iter().sum();
        let id = self.id;
        let len = a.len();
        self.unary(Tensor::scalar(total), move |g, buf| {
            let s = buf.accum(id, len);
            for v in s.iter_mut() {
                *v += g[0];
            }
        })
    }

    pub fn mean(&self) -> Var {
        let n = {
            let v = self.value();
            v.len() as f64
        };
        self.sum().mul_scalar(1.0 / n)
    }

    /// Row sums: `R x C -> R x 1`.
    pub fn sum_rows(&self) -> Var {
        let a = self.value();
        let (rows, cols) = (a.rows, a.cols);
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                y[r] += a.data()[r * cols + c];
            }
        }
        let id = self.id;
        self.unary(Tensor::new(rows, 1, y), move |g, buf| {
            let s = buf.accum(id, rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    s[r * cols + c] += g[r];
                }
            }
        })
    }

    /// Column sums: `R x C -> 1 x C`.
    pub fn sum_cols(&self) -> Var {
        let a = self.value();
        let (rows, cols) = (a.rows, a.cols);
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                y[c] += a.data()[r * cols + c];
            }
        }
        let id = self.id;
        self.unary(Tensor::new(1, cols, y), move |g, buf| {
            let s = buf.accum(id, rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    s[r * cols + c] += g[c];
                }
            }
        })
    }

    /// Concatenates along columns; all parts must share a row count.
    pub fn concat_cols(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let graph = parts[0].graph.clone();
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows;
        let total: usize = vals.iter().map(|v| v.cols).sum();
        for (p, v) in parts.iter().zip(&vals) {
            assert!(graph.same_as(&p.graph), "vars from different graphs");
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
        }
        let mut y = vec![0.0; rows * total];
        let mut off = 0;
        for v in &vals {
            for r in 0..rows {
                y[r * total + off..r * total + off + v.cols]
                    .copy_from_slice(&v.data()[r * v.cols..(r + 1) * v.cols]);
            }
            off += v.cols;
        }
        let meta: Vec<(usize, usize, bool)> = parts
            .iter()
            .zip(&vals)
            .map(|(p, v)| (p.id, v.cols, p.needs_grad()))
            .collect();
        let needs = meta.iter().any(|&(_, _, n)| n);
        graph.push(
            Tensor::new(rows, total, y),
            Some(Box::new(move |g, buf| {
                let mut off = 0;
                for &(id, cols, n) in &meta {
                    if n {
                        let s = buf.accum(id, rows * cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                s[r * cols + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += cols;
                }
            })),
            needs,
        )
    }

    /// Column slice `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var {
        let a = self.value();
        assert!(start < end && end <= a.cols, "slice_cols out of range");
        let (rows, cols) = (a.rows, a.cols);
        let w = end - start;
        let mut y = vec![0.0; rows * w];
        for r in 0..rows {
            y[r * w..(r + 1) * w].copy_from_slice(&a.data()[r * cols + start..r * cols + end]);
        }
        let id = self.id;
        self.unary(Tensor::new(rows, w, y), move |g, buf| {
            let s = buf.accum(id, rows * cols);
            for r in 0..rows {
                for c in 0..w {
                    s[r * cols + start + c] += g[r * w + c];
                }
            }
        })
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(&self) -> Var {
        let a = self.value();
        let (rows, cols) = (a.rows, a.cols);
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                y[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                y[r * cols + c] /= z;
            }
        }
        let out = Tensor::new(rows, cols, y);
        let yv = out.clone();
        let id = self.id;
        self.unary(out, move |g, buf| {
            let s = buf.accum(id, rows * cols);
            for r in 0..rows {
                let yr = &yv.data()[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for c in 0..cols {
                    s[r * cols + c] += yr[c] * (gr[c] - dot);
                }
            }
        })
    }

    /// Exclusive prefix sums along each row: `out[r,c] = sum_{c' < c} a[r,c']`.
    pub fn cumsum_rows_exclusive(&self) -> Var {
        let a = self.value();
        let (rows, cols) = (a.rows, a.cols);
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                y[r * cols + c] = acc;
                acc += a.data()[r * cols + c];
            }
        }
        let id = self.id;
        self.unary(Tensor::new(rows, cols, y), move |g, buf| {
            let s = buf.accum(id, rows * cols);
            for r in 0..rows {
                let mut acc = 0.0;
                for c in (0..cols).rev() {
                    s[r * cols + c] += acc;
                    acc += g[r * cols + c];
                }
            }
        })
    }

    /// Per-ray weighted feature sums.
    ///
    /// `self` is `R x S` (weights per ray sample); `x` is `(R*S) x C`
    /// (per-sample features, ray-major). Output `R x C` with
    /// `out[r,c] = sum_s self[r,s] * x[r*S+s, c]`.
    pub fn weighted_sum_per_ray(&self, x: &Var) -> Var {
        let (w, xv) = (self.value(), x.value());
        let (rays, samples) = (w.rows, w.cols);
        assert_eq!(
            xv.rows,
            rays * samples,
            "weighted_sum_per_ray shape mismatch"
        );
        let cols = xv.cols;
        let mut y = vec![0.0; rays * cols];
        for r in 0..rays {
            for s in 0..samples {
                let wv = w.data()[r * samples + s];
                if wv == 0.0 {
                    continue;
                }
                let xrow = &xv.data()[(r * samples + s) * cols..(r * samples + s + 1) * cols];
                for c in 0..cols {
                    y[r * cols + c] += wv * xrow[c];
                }
            }
        }
        let (iw, ix) = (self.id, x.id);
        let (nw, nx) = (self.needs_grad(), x.needs_grad());
        let (wv2, xv2) = (w.clone(), xv.clone());
        self.binary(x, Tensor::new(rays, cols, y), move |g, buf| {
            if nw {
                let s = buf.accum(iw, rays * samples);
                for r in 0..rays {
                    for k in 0..samples {
                        let xrow =
                            &xv2.data()[(r * samples + k) * cols..(r * samples + k + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        s[r * samples + k] += xrow.iter().zip(gr).map(|(x, g)| x * g).sum::<f64>();
                    }
                }
            }
            if nx {
                let s = buf.accum(ix, rays * samples * cols);
                for r in 0..rays {
                    for k in 0..samples {
                        let wv = wv2.data()[r * samples + k];
                        if wv == 0.0 {
                            continue;
                        }
                        let gr = &g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            s[(r * samples + k) * cols + c] += wv * gr[c];
                        }
                    }
                }
            }
        })
    }
}

/// Spatial metadata for conv feature maps stored as `(channels, h*w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spatial {
    pub h: usize,
    pub w: usize,
}

impl Spatial {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn conv_out(&self, k: usize, stride: usize, pad: usize) -> Spatial {
        Spatial {
            h: (self.h + 2 * pad - k) / stride + 1,
            w: (self.w + 2 * pad - k) / stride + 1,
        }
    }
}

fn im2col(
    input: &[f64],
    c_in: usize,
    sp: Spatial,
    k: usize,
    stride: usize,
    pad: usize,
    out_sp: Spatial,
) -> Vec<f64> {
    let cols = out_sp.len();
    let mut col = vec![0.0; c_in * k * k * cols];
    for ci in 0..c_in {
        let plane = &input[ci * sp.len()..(ci + 1) * sp.len()];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..out_sp.h {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= sp.h as isize {
                        continue;
                    }
                    for ox in 0..out_sp.w {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= sp.w as isize {
                            continue;
                        }
                        dst[oy * out_sp.w + ox] = plane[iy as usize * sp.w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &[f64],
    c_in: usize,
    sp: Spatial,
    k: usize,
    stride: usize,
    pad: usize,
    out_sp: Spatial,
    grad_input: &mut [f64],
) {
    let cols = out_sp.len();
    for ci in 0..c_in {
        let plane = &mut grad_input[ci * sp.len()..(ci + 1) * sp.len()];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..out_sp.h {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= sp.h as isize {
                        continue;
                    }
                    for ox in 0..out_sp.w {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= sp.w as isize {
                            continue;
                        }
                        plane[iy as usize * sp.w + ix as usize] += src[oy * out_sp.w + ox];
                    }
                }
            }
        }
    }
}

/// 2-D convolution over a `(c_in, h*w)` map with a `(c_out, c_in*k*k)` kernel.
///
/// Returns the `(c_out, h_out*w_out)` map and its spatial size. Uses im2col
/// plus one gemm per direction.
pub fn conv2d(
    input: &Var,
    weight: &Var,
    sp: Spatial,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Var, Spatial) {
    let x = input.value();
    let w = weight.value();
    let c_in = x.rows;
    assert_eq!(x.cols, sp.len(), "conv2d spatial mismatch");
    assert_eq!(w.cols, c_in * k * k, "conv2d kernel shape mismatch");
    let c_out = w.rows;
    let out_sp = sp.conv_out(k, stride, pad);
    let col = im2col(x.data(), c_in, sp, k, stride, pad, out_sp);
    let mut y = vec![0.0; c_out * out_sp.len()];
    gemm_into(
        c_out,
        c_in * k * k,
        out_sp.len(),
        w.data(),
        false,
        &col,
        false,
        0.0,
        &mut y,
    );
    let (ix, iw) = (input.id, weight.id);
    let (nx, nw) = (input.needs_grad(), weight.needs_grad());
    let wv = w.clone();
    let out = input.binary(weight, Tensor::new(c_out, out_sp.len(), y), move |g, buf| {
        let kk = c_in * k * k;
        if nw {
            // dW = G * col^T  (c_out x kk)
            let s = buf.accum(iw, c_out * kk);
            gemm_into(c_out, out_sp.len(), kk, g, false, &col, true, 1.0, s);
        }
        if nx {
            // dcol = W^T * G, then scatter back to the input layout.
            let mut dcol = vec![0.0; kk * out_sp.len()];
            gemm_into(
                kk,
                c_out,
                out_sp.len(),
                wv.data(),
                true,
                g,
                false,
                0.0,
                &mut dcol,
            );
            let s = buf.accum(ix, c_in * sp.len());
            col2im(&dcol, c_in, sp, k, stride, pad, out_sp, s);
        }
    });
    (out, out_sp)
}
