//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the records in reverse and
//! returns exact partial derivatives of a scalar output with respect to every
//! leaf created with [`Tape::leaf`].
//!
//! Records whose inputs all come from constants carry no backward closure, so
//! evaluation-only passes cost little more than plain tensor code.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice tells which parents need a gradient at all.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.dims()))
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node("leaf", value, true, Vec::new(), None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node("constant", value, false, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Copies the value of `v` into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation result. `backward` must be `Some` whenever any
    /// parent requires a gradient; it is dropped otherwise.
    pub fn record(
        &mut self,
        op: &'static str,
        parents: &[Var],
        value: Tensor,
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        value.check_finite(op)?;
        let requires = self.any_requires_grad(parents);
        if requires && backward.is_none() {
            return Err(Error::Contract(format!("{op}: missing backward rule")));
        }
        let backward = if requires { backward } else { None };
        let parents = parents.iter().map(|p| p.0).collect();
        Ok(self.push_node(op, value, requires, parents, backward))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got dims {:?} from {}",
                out.value.dims(),
                out.op
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.value.dims(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &need);
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(pg.dims(), self.nodes[p].value.dims(), "grad dims for {}", node.op);
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                g.check_finite(&format!("gradient of {}", node.op))?;
            }
        }
        Ok(Gradients { grads })
    }

    fn binary_same_dims(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("{op}: {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_dims(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let bw: BackwardFn = Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]);
        self.record("add", &[a, b], value, Some(bw))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_dims(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let bw: BackwardFn = Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]);
        self.record("sub", &[a, b], value, Some(bw))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_dims(a, b, "mul")?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let value = av.zip_map(&bv, |x, y| x * y)?;
        let bw: Option<BackwardFn> = self.any_requires_grad(&[a, b]).then(|| {
            Box::new(move |g: &Tensor, need: &[bool]| {
                vec![
                    need[0].then(|| g.zip_map(&bv, |x, y| x * y).unwrap()),
                    need[1].then(|| g.zip_map(&av, |x, y| x * y).unwrap()),
                ]
            }) as BackwardFn
        });
        self.record("mul", &[a, b], value, bw)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        let bw: BackwardFn = Box::new(move |g, _| vec![Some(g.map(|v| v * factor))]);
        self.record("scale", &[a], value, Some(bw))
    }

    /// Sum of all entries, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        let bw: BackwardFn = Box::new(move |g, _| vec![Some(Tensor::full(&dims, g.data()[0]))]);
        self.record("sum", &[a], value, Some(bw))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let value = av.map(|x| x.max(0.0));
        let bw: Option<BackwardFn> = self.requires_grad(a).then(|| {
            Box::new(move |g: &Tensor, _: &[bool]| {
                vec![Some(g.zip_map(&av, |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap())]
            }) as BackwardFn
        });
        self.record("relu", &[a], value, bw)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let from = self.dims(a).to_vec();
        let value = self.value(a).reshape(dims)?;
        let bw: BackwardFn = Box::new(move |g, _| vec![Some(g.reshape(&from).unwrap())]);
        self.record("reshape", &[a], value, Some(bw))
    }

    /// Adds `bias` (length = last axis) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.dims(bias) != [c] {
            return shape_err(format!(
                "add_bias: bias {:?} for rows of {c}",
                self.dims(bias)
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let bw: BackwardFn = Box::new(move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_parts(vec![c], acc)
            });
            vec![need[0].then(|| g.clone()), gb]
        });
        self.record("add_bias", &[x, bias], value, Some(bw))
    }

    /// 2-D product `op(a) * op(b)`, with optional transposes of the stored
    /// row-major operands.
    pub fn matmul(&mut self, a: Var, b: Var, a_trans: bool, b_trans: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() != 2 || bd.len() != 2 {
            return shape_err(format!("matmul needs 2-d operands, got {ad:?} and {bd:?}"));
        }
        let (m, k) = if a_trans { (ad[1], ad[0]) } else { (ad[0], ad[1]) };
        let (k2, n) = if b_trans { (bd[1], bd[0]) } else { (bd[0], bd[1]) };
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), a_trans, bv.data(), b_trans, &mut out, false);
        let value = Tensor::from_parts(vec![m, n], out);
        let bw: Option<BackwardFn> = self.any_requires_grad(&[a, b]).then(|| {
            Box::new(move |g: &Tensor, need: &[bool]| {
                let ga = need[0].then(|| {
                    let mut buf = vec![0.0; m * k];
                    if a_trans {
                        // dA (k x m) = op(B) * G^T
                        gemm(k, n, m, bv.data(), b_trans, g.data(), true, &mut buf, false);
                    } else {
                        // dA (m x k) = G * op(B)^T
                        gemm(m, n, k, g.data(), false, bv.data(), !b_trans, &mut buf, false);
                    }
                    Tensor::from_parts(av.dims().to_vec(), buf)
                });
                let gb = need[1].then(|| {
                    let mut buf = vec![0.0; k * n];
                    if b_trans {
                        // dB (n x k) = G^T * op(A)
                        gemm(n, m, k, g.data(), true, av.data(), a_trans, &mut buf, false);
                    } else {
                        // dB (k x n) = op(A)^T * G
                        gemm(k, m, n, av.data(), !a_trans, g.data(), false, &mut buf, false);
                    }
                    Tensor::from_parts(bv.dims().to_vec(), buf)
                });
                vec![ga, gb]
            }) as BackwardFn
        });
        self.record("matmul", &[a, b], value, bw)
    }

    /// Batched product over the leading axis: `a[i] * op(b[i])` for 3-d
    /// operands.
    pub fn bmm(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return shape_err(format!("bmm operands {ad:?} and {bd:?}"));
        }
        let (batch, m, k) = (ad[0], ad[1], ad[2]);
        let (k2, n) = if b_trans { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
        if k != k2 {
            return shape_err(format!("bmm inner dims {k} vs {k2}"));
        }
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                b_trans,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        let bw: Option<BackwardFn> = self.any_requires_grad(&[a, b]).then(|| {
            Box::new(move |g: &Tensor, need: &[bool]| {
                let gd = g.data();
                let ga = need[0].then(|| {
                    let mut buf = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !b_trans,
                            &mut buf[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    Tensor::from_parts(av.dims().to_vec(), buf)
                });
                let gb = need[1].then(|| {
                    let mut buf = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let a_i = &av.data()[i * m * k..(i + 1) * m * k];
                        let g_i = &gd[i * m * n..(i + 1) * m * n];
                        let dst = &mut buf[i * k * n..(i + 1) * k * n];
                        if b_trans {
                            gemm(n, m, k, g_i, true, a_i, false, dst, false);
                        } else {
                            gemm(k, m, n, a_i, true, g_i, false, dst, false);
                        }
                    }
                    Tensor::from_parts(bv.dims().to_vec(), buf)
                });
                vec![ga, gb]
            }) as BackwardFn
        });
        self.record("bmm", &[a, b], value, bw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_is_bit_identical_and_linear() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.1, -0.4, 0.3, 0.9, -1.2, 0.5]));
        let b = tape.leaf(t(&[3, 2], &[0.7, 0.2, -0.3, 0.8, 0.05, -0.6]));
        let p = tape.matmul(a, b, false, false).unwrap();
        let r = tape.relu(p).unwrap();
        let f = tape.sum(r).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let h = tape.sum(sq).unwrap();
        let total = tape.add(f, h).unwrap();

        let g1 = tape.backward(total).unwrap();
        let g2 = tape.backward(total).unwrap();
        assert_eq!(g1.get(a).unwrap(), g2.get(a).unwrap());
        assert_eq!(g1.get(b).unwrap(), g2.get(b).unwrap());

        let gf = tape.backward(f).unwrap();
        let gh = tape.backward(h).unwrap();
        for v in [a, b] {
            let lin = gf.get(v).unwrap().zip_map(gh.get(v).unwrap(), |x, y| x + y).unwrap();
            assert!(lin.max_abs_diff(g1.get(v).unwrap()).unwrap() < 1e-14);
        }
    }

    #[test]
    fn constants_get_no_gradient_and_detach_cuts() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 3.0]));
        let c = tape.constant(t(&[2], &[2.0, 2.0]));
        let d = tape.detach(x);
        let y = tape.mul(x, c).unwrap();
        let z = tape.mul(y, d).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        // d/dx of 2 x * stop(x) = 2 stop(x)
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 6.0]);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
    }

    #[test]
    fn matmul_transposes_and_bmm_pass_grad_check() {
        let a0 = t(&[3, 2], &[0.3, -0.1, 0.8, 0.4, -0.5, 0.2]);
        let b0 = t(&[4, 3], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9, -1.0, 1.1, 0.05]);
        for (ta, tb) in [(true, true), (false, false)] {
            let (a_in, b_in) = if (ta, tb) == (true, true) {
                (a0.clone(), b0.clone())
            } else {
                (a0.reshape(&[2, 3]).unwrap(), b0.clone().reshape(&[3, 4]).unwrap())
            };
            let b_fixed = b_in.clone();
            let err = grad_check(
                |tape, x| {
                    let b = tape.constant(b_fixed.clone());
                    let p = tape.matmul(x, b, ta, tb)?;
                    let sq = tape.mul(p, p)?;
                    tape.sum(sq)
                },
                &a_in,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "a-side err {err}");
            let a_fixed = a_in.clone();
            let err = grad_check(
                |tape, x| {
                    let a = tape.constant(a_fixed.clone());
                    let p = tape.matmul(a, x, ta, tb)?;
                    let sq = tape.mul(p, p)?;
                    tape.sum(sq)
                },
                &b_in,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "b-side err {err}");
        }

        let q = Tensor::new(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::new(&[2, 4, 2], (0..16).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let k_fixed = k.clone();
        let err = grad_check(
            |tape, x| {
                let kk = tape.constant(k_fixed.clone());
                let p = tape.bmm(x, kk, true)?;
                let sq = tape.mul(p, p)?;
                tape.sum(sq)
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
        let q_fixed = q.clone();
        let err = grad_check(
            |tape, x| {
                let qq = tape.constant(q_fixed.clone());
                let p = tape.bmm(qq, x, true)?;
                let sq = tape.mul(p, p)?;
                tape.sum(sq)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn add_bias_and_reshape_gradients() {
        let x0 = Tensor::new(&[2, 2, 3], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let err = grad_check(
            |tape, b| {
                let x = tape.constant(x0.clone());
                let flat = tape.reshape(x, &[4, 3])?;
                let y = tape.add_bias(flat, b)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &t(&[3], &[0.2, -0.3, 0.1]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }
}
