//! Differentiable operations on [`Var`].

use crate::real::Real;
use crate::tensor::{self as k, ConvGeom, Tensor};
use crate::var::Var;

fn unary<T: Real>(
    a: &Var<T>,
    value: Tensor<T>,
    backward: impl Fn(&Var<T>, &Var<T>, &Var<T>) -> Var<T> + 'static,
) -> Var<T> {
    Var::from_op(value, vec![a.clone()], Box::new(move |g, p, out| vec![Some(backward(g, &p[0], out))]))
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = k::binary_broadcast(self.value(), other.value(), |x, y| x + y);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| vec![Some(g.sum_to(p[0].shape())), Some(g.sum_to(p[1].shape()))]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = k::binary_broadcast(self.value(), other.value(), |x, y| x - y);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| vec![Some(g.sum_to(p[0].shape())), Some(g.neg().sum_to(p[1].shape()))]),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = k::binary_broadcast(self.value(), other.value(), |x, y| x * y);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let ga = p[0].requires_grad().then(|| g.mul(&p[1]).sum_to(p[0].shape()));
                let gb = p[1].requires_grad().then(|| g.mul(&p[0]).sum_to(p[1].shape()));
                vec![ga, gb]
            }),
        )
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let value = k::binary_broadcast(self.value(), other.value(), |x, y| x / y);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let ga = p[0].requires_grad().then(|| g.div(&p[1]).sum_to(p[0].shape()));
                let gb = p[1].requires_grad().then(|| g.mul(&p[0]).div(&p[1].square()).neg().sum_to(p[1].shape()));
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, s: T) -> Var<T> {
        unary(self, self.value().map(|x| x * s), move |g, _, _| g.scale(s))
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        unary(self, self.value().map(|x| x + s), |g, _, _| g.clone())
    }

    pub fn neg(&self) -> Var<T> {
        unary(self, self.value().map(|x| -x), |g, _, _| g.neg())
    }

    pub fn square(&self) -> Var<T> {
        unary(self, self.value().map(|x| x * x), |g, a, _| g.mul(a).scale(T::lit(2.0)))
    }

    pub fn exp(&self) -> Var<T> {
        unary(self, self.value().map(|x| x.exp()), |g, _, out| g.mul(out))
    }

    pub fn ln(&self) -> Var<T> {
        unary(self, self.value().map(|x| x.ln()), |g, a, _| g.div(a))
    }

    pub fn sqrt(&self) -> Var<T> {
        unary(self, self.value().map(|x| x.sqrt()), |g, _, out| g.div(out).scale(T::lit(0.5)))
    }

    pub fn abs(&self) -> Var<T> {
        unary(self, self.value().map(|x| x.abs()), |g, a, _| {
            let sign = a.value().map(|x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            g.mul(&Var::constant(sign))
        })
    }

    pub fn tanh(&self) -> Var<T> {
        unary(self, self.value().map(|x| x.tanh()), |g, _, out| g.mul(&out.square().neg().add_scalar(T::one())))
    }

    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        unary(self, value, |g, _, out| g.mul(out).mul(&out.neg().add_scalar(T::one())))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let value = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        unary(self, value, move |g, a, _| {
            let mask = a.value().map(|x| if x > T::zero() { T::one() } else { slope });
            g.mul(&Var::constant(mask))
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let value = self.value().map(|x| x.max(lo).min(hi));
        unary(self, value, move |g, a, _| {
            let mask = a.value().map(|x| if x > lo && x < hi { T::one() } else { T::zero() });
            g.mul(&Var::constant(mask))
        })
    }

    pub fn sum_all(&self) -> Var<T> {
        let value = Tensor::scalar(self.value().sum());
        unary(self, value, |g, a, _| g.broadcast_to(a.shape()))
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(T::lit(1.0 / n as f64))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<T> {
        unary(self, k::sum_axes(self.value(), axes), |g, a, _| g.broadcast_to(a.shape()))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<T> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).scale(T::lit(1.0 / n.max(1) as f64))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        unary(self, k::broadcast_to(self.value(), shape), |g, a, _| g.sum_to(a.shape()))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        unary(self, k::sum_to(self.value(), shape), |g, a, _| g.broadcast_to(a.shape()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        unary(self, self.value().reshape(shape), |g, a, _| g.reshape(a.shape()))
    }

    /// `op(self) * op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(&self, other: &Var<T>, ta: bool, tb: bool) -> Var<T> {
        let value = k::matmul(self.value(), other.value(), ta, tb);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (&p[0], &p[1]);
                let ga =
                    a.requires_grad().then(|| if ta { b.matmul_t(g, tb, true) } else { g.matmul_t(b, false, !tb) });
                let gb =
                    b.requires_grad().then(|| if tb { g.matmul_t(a, true, ta) } else { a.matmul_t(g, !ta, false) });
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        self.matmul_t(other, false, false)
    }

    /// NCHW convolution with an OIHW weight; no bias.
    pub fn conv2d(&self, weight: &Var<T>, geom: ConvGeom) -> Var<T> {
        let value = k::conv2d(self.value(), weight.value(), geom);
        Var::from_op(
            value,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, p, _| {
                let (x, w) = (&p[0], &p[1]);
                let gx = x.requires_grad().then(|| conv2d_input_grad(g, w, x.shape(), geom));
                let gw = w.requires_grad().then(|| conv2d_weight_grad(x, g, w.shape(), geom));
                vec![gx, gw]
            }),
        )
    }

    pub fn upsample_nearest(&self, factor: usize) -> Var<T> {
        if factor == 1 {
            return self.clone();
        }
        unary(self, k::upsample_nearest(self.value(), factor), move |g, _, _| g.sum_pool(factor))
    }

    pub fn sum_pool(&self, factor: usize) -> Var<T> {
        if factor == 1 {
            return self.clone();
        }
        unary(self, k::sum_pool(self.value(), factor), move |g, _, _| g.upsample_nearest(factor))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let total = self.shape()[axis];
        unary(self, k::narrow(self.value(), axis, start, len), move |g, _, _| g.pad_axis(axis, start, total))
    }

    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var<T> {
        let len = self.shape()[axis];
        unary(self, k::pad_axis(self.value(), axis, start, total), move |g, _, _| g.narrow(axis, start, len))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&self) -> Var<T> {
        let b = self.shape()[0];
        let rest = self.value().len() / b.max(1);
        self.reshape(&[b, rest])
    }
}

/// Gradient of a convolution with respect to its input, as a differentiable op.
pub fn conv2d_input_grad<T: Real>(gy: &Var<T>, w: &Var<T>, x_shape: &[usize], geom: ConvGeom) -> Var<T> {
    let value = k::conv2d_input_grad(gy.value(), w.value(), x_shape, geom);
    Var::from_op(
        value,
        vec![gy.clone(), w.clone()],
        Box::new(move |gz, p, _| {
            let (gy, w) = (&p[0], &p[1]);
            let d_gy = gy.requires_grad().then(|| gz.conv2d(w, geom));
            let d_w = w.requires_grad().then(|| conv2d_weight_grad(gz, gy, w.shape(), geom));
            vec![d_gy, d_w]
        }),
    )
}

/// Gradient of a convolution with respect to its weight, as a differentiable op.
pub fn conv2d_weight_grad<T: Real>(x: &Var<T>, gy: &Var<T>, w_shape: &[usize], geom: ConvGeom) -> Var<T> {
    let value = k::conv2d_weight_grad(x.value(), gy.value(), w_shape, geom);
    Var::from_op(
        value,
        vec![x.clone(), gy.clone()],
        Box::new(move |gz, p, _| {
            let (x, gy) = (&p[0], &p[1]);
            let d_x = x.requires_grad().then(|| conv2d_input_grad(gy, gz, x.shape(), geom));
            let d_gy = gy.requires_grad().then(|| x.conv2d(gz, geom));
            vec![d_x, d_gy]
        }),
    )
}

/// Concatenates along `axis`.
pub fn concat<T: Real>(parts: &[Var<T>], axis: usize) -> Var<T> {
    let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let value = k::concat(&tensors, axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Var::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g, p, _| {
            let mut start = 0;
            lens.iter()
                .zip(p)
                .map(|(&len, part)| {
                    let s = start;
                    start += len;
                    part.requires_grad().then(|| g.narrow(axis, s, len))
                })
                .collect()
        }),
    )
}

impl<T: Real> std::ops::Add for &Var<T> {
    type Output = Var<T>;
    fn add(self, rhs: &Var<T>) -> Var<T> {
        Var::add(self, rhs)
    }
}

impl<T: Real> std::ops::Sub for &Var<T> {
    type Output = Var<T>;
    fn sub(self, rhs: &Var<T>) -> Var<T> {
        Var::sub(self, rhs)
    }
}

impl<T: Real> std::ops::Mul for &Var<T> {
    type Output = Var<T>;
    fn mul(self, rhs: &Var<T>) -> Var<T> {
        Var::mul(self, rhs)
    }
}

impl<T: Real> std::ops::Neg for &Var<T> {
    type Output = Var<T>;
    fn neg(self) -> Var<T> {
        Var::neg(self)
    }
}
