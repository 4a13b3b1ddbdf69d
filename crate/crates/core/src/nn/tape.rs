use std::cell::RefCell;

use super::{shape_err, NnError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Sqrt(usize),
    Log(usize),
    Softmax(usize),
    Sum(usize),
    Pick(usize, usize),
    CrossEntropy(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for a single backward sweep.
///
/// Nodes are appended in evaluation order and only ever reference earlier
/// nodes, so the insertion order is already topological.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
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

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data[0]
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    /// A constant input; it receives no gradient outside the tape.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter so gradients flow back into `store` on backward.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0].value;
            Tensor {
                shape: src.shape.clone(),
                data: src.data.iter().map(|&x| f(x)).collect(),
            }
        };
        self.push(value, op)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NnError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape != y.shape {
                return Err(shape_err(name, format!("{:?} vs {:?}", x.shape, y.shape)));
            }
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            }
        };
        Ok(self.push(value, op))
    }

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NnError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            match (x.shape.as_slice(), y.shape.as_slice()) {
                (&[m, k], &[k2]) if k == k2 => Tensor {
                    shape: vec![m],
                    data: x.data.chunks_exact(k.max(1)).take(m).map(|row| dot(row, &y.data)).collect(),
                },
                (&[m, k], &[k2, n]) if k == k2 => {
                    let mut data = vec![0.0; m * n];
                    for i in 0..m {
                        let out = &mut data[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(x.data[i * k + p], &y.data[p * n..(p + 1) * n], out);
                        }
                    }
                    Tensor {
                        shape: vec![m, n],
                        data,
                    }
                }
                (s1, s2) => return Err(shape_err("matmul", format!("{s1:?} x {s2:?}"))),
            }
        };
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a.0, factor), |x| x * factor)
    }

    /// Adds a constant to every element.
    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a.0), |x| x + c)
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, NnError> {
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape.len() != 1 {
                    return Err(shape_err("concat", format!("operand shape {:?}", t.shape)));
                }
                data.extend_from_slice(&t.data);
            }
            Tensor::vector(data)
        };
        Ok(self.push(value, Op::Concat(parts.iter().map(|v| v.0).collect())))
    }

    /// Contiguous sub-range `[start, start + len)` of a 1-D tensor.
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape.len() != 1 || start + len > t.data.len() {
                return Err(shape_err(
                    "slice",
                    format!("[{start}, {}) of {:?}", start + len, t.shape),
                ));
            }
            Tensor::vector(t.data[start..start + len].to_vec())
        };
        Ok(self.push(value, Op::Slice(a.0, start)))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), f64::sqrt)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn softmax(&self, a: Var) -> Result<Var, NnError> {
        let mut value = self.value(a);
        if value.shape.len() != 1 {
            return Err(shape_err("softmax", format!("{:?}", value.shape)));
        }
        softmax_in_place(&mut value.data);
        Ok(self.push(value, Op::Softmax(a.0)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.with_value(a, |t| t.data.iter().sum());
        self.push(Tensor::scalar(total), Op::Sum(a.0))
    }

    /// Element `index` of a 1-D tensor as a scalar.
    pub fn pick(&self, a: Var, index: usize) -> Result<Var, NnError> {
        let v = self.with_value(a, |t| t.data.get(index).copied());
        let v = v.ok_or_else(|| shape_err("pick", format!("index {index} of {:?}", self.shape_of(a))))?;
        Ok(self.push(Tensor::scalar(v), Op::Pick(a.0, index)))
    }

    /// `-ln p[label]` for a probability vector `p`.
    pub fn cross_entropy(&self, probs: Var, label: usize) -> Result<Var, NnError> {
        let (total, p) = self.with_value(probs, |t| {
            (t.data.iter().sum::<f64>(), t.data.get(label).copied())
        });
        let p = p.ok_or_else(|| {
            NnError::Argument(format!("label {label} out of range for {:?}", self.shape_of(probs)))
        })?;
        if (total - 1.0).abs() > 1e-6 {
            return Err(NnError::Argument(format!(
                "cross_entropy input sums to {total}, not 1"
            )));
        }
        Ok(self.push(Tensor::scalar(-p.ln()), Op::CrossEntropy(probs.0, label)))
    }

    /// Propagates `d loss / d node` back through the tape and accumulates
    /// parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), NnError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.data.len() != 1 {
            return Err(NnError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'g mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.data.len()])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = &node.value.data;
            match node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    store
                        .grad_mut(id)
                        .data
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&nodes[a].value, &nodes[b].value);
                    let (m, k) = (x.shape[0], x.shape[1]);
                    if y.shape.len() == 1 {
                        let ga = acc(&mut grads, &nodes, a);
                        for r in 0..m {
                            axpy(g[r], &y.data, &mut ga[r * k..(r + 1) * k]);
                        }
                        let gb = acc(&mut grads, &nodes, b);
                        for r in 0..m {
                            axpy(g[r], &x.data[r * k..(r + 1) * k], gb);
                        }
                    } else {
                        let n = y.shape[1];
                        let ga = acc(&mut grads, &nodes, a);
                        for r in 0..m {
                            for p in 0..k {
                                ga[r * k + p] += dot(&g[r * n..(r + 1) * n], &y.data[p * n..(p + 1) * n]);
                            }
                        }
                        let gb = acc(&mut grads, &nodes, b);
                        for r in 0..m {
                            for p in 0..k {
                                axpy(x.data[r * k + p], &g[r * n..(r + 1) * n], &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    axpy(1.0, &g, acc(&mut grads, &nodes, a));
                    axpy(1.0, &g, acc(&mut grads, &nodes, b));
                }
                Op::Sub(a, b) => {
                    axpy(1.0, &g, acc(&mut grads, &nodes, a));
                    axpy(-1.0, &g, acc(&mut grads, &nodes, b));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&nodes[a].value.data, &nodes[b].value.data);
                    let ga = acc(&mut grads, &nodes, a);
                    ga.iter_mut().zip(&g).zip(y).for_each(|((d, gi), yi)| *d += gi * yi);
                    let gb = acc(&mut grads, &nodes, b);
                    gb.iter_mut().zip(&g).zip(x).for_each(|((d, gi), xi)| *d += gi * xi);
                }
                Op::Scale(a, f) => axpy(f, &g, acc(&mut grads, &nodes, a)),
                Op::Offset(a) => axpy(1.0, &g, acc(&mut grads, &nodes, a)),
                Op::Concat(ref parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.data.len();
                        axpy(1.0, &g[offset..offset + n], acc(&mut grads, &nodes, p));
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let ga = acc(&mut grads, &nodes, a);
                    axpy(1.0, &g, &mut ga[start..start + g.len()]);
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, &nodes, a);
                    for ((d, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        *d += gi * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, &nodes, a);
                    for ((d, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        *d += gi * y * (1.0 - y);
                    }
                }
                Op::Relu(a) => {
                    let ga = acc(&mut grads, &nodes, a);
                    for ((d, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        if *y > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Sqrt(a) => {
                    let ga = acc(&mut grads, &nodes, a);
                    for ((d, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        *d += gi * 0.5 / y;
                    }
                }
                Op::Log(a) => {
                    let x = &nodes[a].value.data;
                    let ga = acc(&mut grads, &nodes, a);
                    for ((d, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *d += gi / xi;
                    }
                }
                Op::Softmax(a) => {
                    // J^T g = y * (g - <g, y>)
                    let inner = dot(&g, out);
                    let ga = acc(&mut grads, &nodes, a);
                    for ((d, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        *d += y * (gi - inner);
                    }
                }
                Op::Sum(a) => {
                    acc(&mut grads, &nodes, a).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Pick(a, idx) => acc(&mut grads, &nodes, a)[idx] += g[0],
                Op::CrossEntropy(a, label) => {
                    let p = nodes[a].value.data[label];
                    acc(&mut grads, &nodes, a)[label] -= g[0] / p;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let p = tape.softmax(x).unwrap();
        for v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_positive_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let v: Vec<f64> = (0..7).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = softmax(&v);
            assert!(p.iter().all(|&x| x > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0 / 9.0; 9]));
        for label in 0..9 {
            let l = tape.cross_entropy(p, label).unwrap();
            assert!((tape.scalar_value(l) - 9f64.ln()).abs() < 1e-12);
        }
        assert!((9f64.ln() - 2.1972).abs() < 1e-4);
        let bad = tape.constant(Tensor::vector(vec![0.5, 0.6]));
        assert!(tape.cross_entropy(bad, 0).is_err());
    }

    #[test]
    fn matmul_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let va = tape.constant(Tensor::new(vec![3, 4], a.clone()).unwrap());
        let vb = tape.constant(Tensor::new(vec![4, 2], b.clone()).unwrap());
        let c = tape.value(tape.matmul(va, vb).unwrap());
        assert_eq!(c.shape(), &[3, 2]);
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.matmul(va, bad), Err(NnError::Shape { .. })));
        assert!(tape.add(va, vb).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.sum(c);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(w).data().iter().all(|&g| g == 0.0));

        let loss = tape.sum(wv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[1.0, 1.0, 1.0]);

        assert!(tape.backward(wv, &mut store).is_err());
        store.zero_grads();
        assert!(store.grad(w).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matrix_matmul_gradient() {
        // loss = sum(A B) with finite differences on A
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let a = store.add_uniform("a", &[2, 3], 1, &mut rng);
        let b = store.add_uniform("b", &[3, 2], 1, &mut rng);
        let f = |s: &ParamStore| {
            let t = Tape::new();
            let (va, vb) = (t.param(s, a), t.param(s, b));
            let m = t.matmul(va, vb).unwrap();
            let sq = t.mul(m, m).unwrap();
            let l = t.sum(sq);
            (t, l)
        };
        let (t, l) = f(&store);
        t.backward(l, &mut store).unwrap();
        let analytic = store.flat_grads();
        let base = store.flat_values();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-6;
            store.set_flat_values(&p);
            let (t1, l1) = f(&store);
            p[i] -= 2e-6;
            store.set_flat_values(&p);
            let (t2, l2) = f(&store);
            let num = (t1.scalar_value(l1) - t2.scalar_value(l2)) / 2e-6;
            assert!((num - analytic[i]).abs() < 1e-6, "{i}: {num} vs {}", analytic[i]);
        }
    }
}
