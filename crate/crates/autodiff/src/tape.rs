use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::tensor::{self, Tensor};

/// Index map for [`Var::gather`] / [`Var::scatter_add`]. Entries equal to
/// [`SKIP`] read as zero (gather) or are dropped (scatter).
pub type IndexMap = Rc<[u32]>;

pub const SKIP: u32 = u32::MAX;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    Abs(usize),
    SumAll(usize),
    Expand(usize),
    Reshape(usize),
    Gather(usize, IndexMap),
    ScatterAdd(usize, IndexMap),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | MatMulNt(a, b) => {
                [Some(a), Some(b)]
            }
            Neg(a)
            | Scale(a, _)
            | Offset(a)
            | Transpose(a)
            | Exp(a)
            | Ln(a)
            | Sqrt(a)
            | Relu(a)
            | Abs(a)
            | SumAll(a)
            | Expand(a)
            | Reshape(a) => [Some(a), None],
            Gather(a, _) | ScatterAdd(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
///
/// Backward passes are themselves recorded on the tape, so a gradient
/// returned by [`Tape::grad`] is an ordinary [`Var`] that can be
/// differentiated again.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
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

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), true)
    }

    pub fn param_shared(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), false)
    }

    pub fn constant_shared(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op
            .parents()
            .iter()
            .flatten()
            .any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned vars live on this tape and carry their own history, so
    /// any scalar function of them can be passed to `grad` again.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(
            output.value().len(),
            1,
            "grad() needs a scalar output; use grad_with"
        );
        let seed = self.constant(Tensor::full(output.value().shape().to_vec(), 1.0));
        self.grad_with(output, seed, wrt)
    }

    /// Vector-Jacobian product: gradient of `<seed, output>`.
    pub fn grad_with<'t>(
        &'t self,
        output: Var<'t>,
        seed: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Vec<Var<'t>> {
        assert!(std::ptr::eq(output.tape, self));
        assert_eq!(
            seed.value().shape(),
            output.value().shape(),
            "seed shape mismatch"
        );
        let n = output.id + 1;

        // Only propagate into nodes that lead to a requested input.
        let mut relevant = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < n {
                    relevant[w.id] = true;
                }
            }
            for id in 0..n {
                if relevant[id] || !nodes[id].requires_grad {
                    continue;
                }
                relevant[id] = nodes[id]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|&p| relevant[p]);
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        grads[output.id] = Some(seed);

        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let out = self.var(id);
            let mut acc = |p: usize, contrib: Var<'t>| {
                if !relevant[p] {
                    return;
                }
                grads[p] = Some(match grads[p] {
                    Some(prev) => prev + contrib,
                    None => contrib,
                });
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, g);
                    acc(b, g);
                }
                Op::Sub(a, b) => {
                    acc(a, g);
                    if relevant[b] {
                        acc(b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if relevant[a] {
                        acc(a, g * self.var(b));
                    }
                    if relevant[b] {
                        acc(b, g * self.var(a));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.var(b);
                    if relevant[a] {
                        acc(a, g / bv);
                    }
                    if relevant[b] {
                        acc(b, -(g * out) / bv);
                    }
                }
                Op::Neg(a) => acc(a, -g),
                Op::Scale(a, c) => acc(a, g.scale(c)),
                Op::Offset(a) => acc(a, g),
                Op::MatMul(a, b) => {
                    if relevant[a] {
                        acc(a, g.matmul(self.var(b).t()));
                    }
                    if relevant[b] {
                        acc(b, self.var(a).t().matmul(g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if relevant[a] {
                        acc(a, g.matmul(self.var(b)));
                    }
                    if relevant[b] {
                        acc(b, g.t().matmul(self.var(a)));
                    }
                }
                Op::Transpose(a) => acc(a, g.t()),
                Op::Exp(a) => acc(a, g * out),
                Op::Ln(a) => acc(a, g / self.var(a)),
                Op::Sqrt(a) => acc(a, (g / out).scale(0.5)),
                Op::Relu(a) => {
                    let mask = self.value_of(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(a, g * self.constant(mask));
                }
                Op::Abs(a) => {
                    let sign = self.value_of(a).map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(a, g * self.constant(sign));
                }
                Op::SumAll(a) => {
                    let shape = self.value_of(a).shape().to_vec();
                    acc(a, g.expand(&shape));
                }
                Op::Expand(a) => {
                    let shape = self.value_of(a).shape().to_vec();
                    acc(a, g.sum().reshape(&shape));
                }
                Op::Reshape(a) => {
                    let shape = self.value_of(a).shape().to_vec();
                    acc(a, g.reshape(&shape));
                }
                Op::Gather(a, map) => {
                    let shape = self.value_of(a).shape().to_vec();
                    acc(a, g.scatter_add(map, &shape));
                }
                Op::ScatterAdd(a, map) => {
                    let shape = self.value_of(a).shape().to_vec();
                    acc(a, g.gather(map, &shape));
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape().to_vec())),
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_shared(self.value())
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
        let value = self.value().zip_map(&other.value(), f);
        self.tape.push(value, op)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.push(value, op)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    /// `self + c`, elementwise.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |v| v + c)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = tensor::matmul(&self.value(), &other.value());
        self.tape.push(value, Op::MatMul(self.id, other.id))
    }

    /// `self @ other^T` without materializing the transpose.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let value = tensor::matmul_nt(&self.value(), &other.value());
        self.tape.push(value, Op::MatMulNt(self.id, other.id))
    }

    /// 2-d transpose.
    pub fn t(self) -> Var<'t> {
        let value = tensor::transpose(&self.value());
        self.tape.push(value, Op::Transpose(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(value, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Squared L2 norm of all elements.
    pub fn sq_norm(self) -> Var<'t> {
        self.square().sum()
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.len(), 1, "expand() needs a single-element tensor");
        let value = Tensor::full(shape.to_vec(), v.item());
        self.tape.push(value, Op::Expand(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = (*self.value()).clone().reshaped(shape.to_vec());
        self.tape.push(value, Op::Reshape(self.id))
    }

    /// `out[i] = self[map[i]]`, with `out` shaped `shape`.
    pub fn gather(self, map: IndexMap, shape: &[usize]) -> Var<'t> {
        let src = self.value();
        assert_eq!(
            map.len(),
            shape.iter().product::<usize>(),
            "gather map/shape mismatch"
        );
        let data = src.data();
        let out: Vec<f64> = map
            .iter()
            .map(|&m| if m == SKIP { 0.0 } else { data[m as usize] })
            .collect();
        self.tape
            .push(Tensor::new(shape.to_vec(), out), Op::Gather(self.id, map))
    }

    /// `out[map[i]] += self[i]`, with `out` shaped `shape`.
    pub fn scatter_add(self, map: IndexMap, shape: &[usize]) -> Var<'t> {
        let src = self.value();
        assert_eq!(map.len(), src.len(), "scatter map/source mismatch");
        let mut out = Tensor::zeros(shape.to_vec());
        let dst = out.data_mut();
        for (&m, &v) in map.iter().zip(src.data()) {
            if m != SKIP {
                dst[m as usize] += v;
            }
        }
        self.tape.push(out, Op::ScatterAdd(self.id, map))
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Div(self.id, rhs.id), |a, b| a / b)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |v| -v)
    }
}
