//! Differentiable operations on [`Var`].
//!
//! Shape mismatches inside a model are programming errors, so these
//! methods panic with the underlying [`crate::ShapeError`] message instead of
//! returning `Result`.

use std::rc::Rc;

use crate::tensor::Tensor;
use crate::var::Var;

fn ok<T>(r: crate::Result<T>) -> T {
    match r {
        Ok(v) => v,
        Err(e) => panic!("{e}"),
    }
}

fn unbroadcast(g: &Var, shape: &[usize]) -> Var {
    if g.shape() == shape {
        g.clone()
    } else {
        g.sum_to(shape)
    }
}

impl Var {
    pub fn add(&self, rhs: &Var) -> Var {
        let value = ok(self.value().zip_with(rhs.value(), |a, b| a + b));
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        Var::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            vec![Some(unbroadcast(g, &sa)), Some(unbroadcast(g, &sb))]
        })
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        let value = ok(self.value().zip_with(rhs.value(), |a, b| a - b));
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        Var::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            vec![Some(unbroadcast(g, &sa)), Some(unbroadcast(&g.neg(), &sb))]
        })
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        let value = ok(self.value().zip_with(rhs.value(), |a, b| a * b));
        let (a, b) = (self.clone(), rhs.clone());
        Var::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            vec![
                a.requires_grad().then(|| unbroadcast(&g.mul(&b), a.shape())),
                b.requires_grad().then(|| unbroadcast(&g.mul(&a), b.shape())),
            ]
        })
    }

    pub fn div(&self, rhs: &Var) -> Var {
        let value = ok(self.value().zip_with(rhs.value(), |a, b| a / b));
        let (a, b) = (self.clone(), rhs.clone());
        Var::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            vec![
                a.requires_grad().then(|| unbroadcast(&g.div(&b), a.shape())),
                b.requires_grad().then(|| unbroadcast(&g.mul(&a).div(&b.square()).neg(), b.shape())),
            ]
        })
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let value = self.value().map(|x| x * c);
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul_scalar(c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value().map(|x| x + c);
        Var::from_op(value, vec![self.clone()], |g| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var {
        let value = self.value().map(|x| x * x);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&a).mul_scalar(2.0))])
    }

    pub fn exp(&self) -> Var {
        let value = self.value().map(f64::exp);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&a.exp()))])
    }

    pub fn ln(&self) -> Var {
        let value = self.value().map(f64::ln);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.div(&a))])
    }

    pub fn sqrt(&self) -> Var {
        let value = self.value().map(f64::sqrt);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.div(&a.sqrt()).mul_scalar(0.5))])
    }

    pub fn sin(&self) -> Var {
        let value = self.value().map(f64::sin);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&a.cos()))])
    }

    pub fn cos(&self) -> Var {
        let value = self.value().map(f64::cos);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&a.sin()).neg())])
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().map(f64::tanh);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| {
            let t = a.tanh();
            vec![Some(g.mul(&t.square().neg().add_scalar(1.0)))]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(sigmoid);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| {
            let s = a.sigmoid();
            vec![Some(g.mul(&s.mul(&s.neg().add_scalar(1.0))))]
        })
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var {
        let value = self.value().map(softplus);
        let a = self.clone();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&a.sigmoid()))])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        let mask = Var::constant(self.value().map(|x| if x > 0.0 { 1.0 } else { slope }));
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&mask))])
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().map(|x| x.clamp(lo, hi));
        let mask = Var::constant(self.value().map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 }));
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.mul(&mask))])
    }

    pub fn matmul(&self, rhs: &Var) -> Var {
        let value = ok(self.value().matmul(rhs.value()));
        let (a, b) = (self.clone(), rhs.clone());
        Var::from_op(value, vec![self.clone(), rhs.clone()], move |g| {
            let ga = a.requires_grad().then(|| g.matmul(&b.transpose()));
            let gb = b.requires_grad().then(|| {
                if b.shape().len() == 2 && a.shape().len() > 2 {
                    // Shared rhs: fold the batch into rows.
                    let k = a.shape()[a.shape().len() - 1];
                    let n = g.shape()[g.shape().len() - 1];
                    let rows = a.value().numel() / k;
                    a.reshape(&[rows, k]).transpose().matmul(&g.reshape(&[rows, n]))
                } else {
                    a.transpose().matmul(g)
                }
            });
            vec![ga, gb]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Var {
        let value = ok(self.value().transpose_last2());
        Var::from_op(value, vec![self.clone()], |g| vec![Some(g.transpose())])
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let value = ok(self.value().permute(axes));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.permute(&inverse))])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = ok(self.value().reshape(shape));
        let orig = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.reshape(&orig))])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let value = ok(self.value().broadcast_to(shape));
        let orig = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.sum_to(&orig))])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        let value = ok(self.value().sum_to(shape));
        let orig = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.broadcast_to(&orig))])
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).mul_scalar(1.0 / n)
    }

    pub fn sum_all(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let value = ok(self.value().narrow(axis, start, len));
        let full = self.shape()[axis];
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.pad_axis(axis, start, full))])
    }

    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Var {
        let value = ok(self.value().pad_axis(axis, start, full));
        let len = self.shape()[axis];
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.narrow(axis, start, len))])
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let value = ok(Tensor::concat(&tensors, axis));
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(value, parts.to_vec(), move |g| {
            let mut start = 0;
            lens.iter()
                .map(|&len| {
                    let piece = g.narrow(axis, start, len);
                    start += len;
                    Some(piece)
                })
                .collect()
        })
    }

    /// `out[i] = self[map[i]]` (zero for [`crate::GATHER_ZERO`]).
    pub fn gather(&self, map: &Rc<Vec<u32>>, out_shape: &[usize]) -> Var {
        let value = ok(self.value().gather(map, out_shape));
        let map = map.clone();
        let in_shape = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.scatter_add(&map, &in_shape))])
    }

    pub fn scatter_add(&self, map: &Rc<Vec<u32>>, out_shape: &[usize]) -> Var {
        let value = ok(self.value().scatter_add(map, out_shape));
        let map = map.clone();
        let in_shape = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.gather(&map, &in_shape))])
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var {
        let nd = self.shape().len();
        let last = self.shape()[nd - 1];
        let rows = self.value().numel() / last.max(1);
        let mut maxes = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.value().data()[r * last..(r + 1) * last];
            maxes.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut mshape = self.shape().to_vec();
        mshape[nd - 1] = 1;
        let shift = Var::constant(Tensor::from_parts(mshape, maxes));
        let e = self.sub(&shift).exp();
        e.div(&e.sum_axis(nd - 1))
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

macro_rules! bin_op {
    ($tr:ident, $f:ident, $m:ident) => {
        impl std::ops::$tr<&Var> for &Var {
            type Output = Var;
            fn $f(self, rhs: &Var) -> Var {
                self.$m(rhs)
            }
        }
    };
}
bin_op!(Add, add, add);
bin_op!(Sub, sub, sub);
bin_op!(Mul, mul, mul);
bin_op!(Div, div, div);

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
