//! Differentiable operations recorded on a [`Tape`].

use std::cell::Cell;

use super::{gemm, MatRef, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    Reshape {
        input: Var,
    },
    /// Scalar-valued op whose local Jacobian was computed during the forward pass.
    Fused {
        inputs: Vec<(Var, Vec<T>)>,
    },
}

thread_local! {
    static CONV_INPUT_GRAD_SIGN_FLIP: Cell<bool> = const { Cell::new(false) };
}

/// Fault injection for mutation-testing the gradient checks: while enabled,
/// the input gradient of `conv2d` on this thread is negated.
pub fn inject_conv_backward_fault(enabled: bool) {
    CONV_INPUT_GRAD_SIGN_FLIP.with(|f| f.set(enabled));
}

fn any_grad<T: Real>(tape: &Tape<T>, vars: &[Var]) -> bool {
    vars.iter().any(|&v| tape.requires_grad(v))
}

/// Output extent of a convolution along one axis.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Splits the batch into runs of samples whose unfolded input stays
    /// cache-sized, as `(first sample, geometry of the run)`.
    fn chunks(&self) -> impl Iterator<Item = (usize, ConvGeom)> {
        const TARGET: usize = 1 << 17;
        let per = (self.rows() * self.plane_out()).max(1);
        let step = (TARGET / per).max(1);
        let g = *self;
        (0..self.n).step_by(step).map(move |s0| (s0, ConvGeom { n: step.min(g.n - s0), ..g }))
    }

    /// Output columns `ox` whose input column `ox·stride + kj − pad` lies
    /// inside the image.
    fn valid_ox(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj { (self.w + self.pad - kj - 1) / self.stride + 1 } else { 0 };
        lo.min(self.wo)..hi.min(self.wo).max(lo.min(self.wo))
    }

    /// Visits every run of unfolded entries that maps to one input row, as
    /// `(column offset, input offset, length)`; consecutive entries of a run
    /// are `stride` apart in the input.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.plane_out();
        let np = self.n * p;
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let oxs = self.valid_ox(kj);
                    if oxs.is_empty() {
                        continue;
                    }
                    let ix0 = oxs.start * self.stride + kj - self.pad;
                    for b in 0..self.n {
                        let plane = (b * self.c + ci) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            f(row * np + b * p + oy * self.wo + oxs.start, plane + iy as usize * self.w + ix0, oxs.len());
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.rows() * self.n * self.plane_out()];
        let stride = self.stride;
        self.for_each_segment(|dst, src, len| {
            let dst = &mut cols[dst..][..len];
            if stride == 1 {
                dst.copy_from_slice(&x[src..][..len]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = x[src + i * stride];
                }
            }
        });
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T], sign: T) {
        let stride = self.stride;
        self.for_each_segment(|col, src, len| {
            for (i, &v) in cols[col..][..len].iter().enumerate() {
                dx[src + i * stride] += sign * v;
            }
        });
    }
}

/// 2-d convolution of an NCHW batch with an `OutC × InC × K × K` kernel.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let [n, c, h, w] = tape.value(input).dims4("conv2d")?;
    let [oc, wc, kh, kw] = tape.value(weight).dims4("conv2d")?;
    if wc != c || kh != kw {
        return Err(Error::dims("conv2d", tape.shape(input), tape.shape(weight)));
    }
    if tape.shape(bias) != [oc] {
        return Err(Error::dims("conv2d bias", tape.shape(bias), &[oc]));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be >= 1"));
    }
    let (Some(ho), Some(wo)) = (
        conv_out_size(h, kh, stride, padding),
        conv_out_size(w, kw, stride, padding),
    ) else {
        return Err(Error::dims("conv2d", tape.shape(input), tape.shape(weight)));
    };
    let g = ConvGeom {
        n,
        c,
        h,
        w,
        k: kh,
        stride,
        pad: padding,
        ho,
        wo,
    };
    let p = g.plane_out();
    let b = tape.value(bias).data();
    let x = tape.value(input).data();
    let wt = tape.value(weight).data();
    let mut out = vec![T::zero(); n * oc * p];
    for (s0, cg) in g.chunks() {
        let np = cg.n * p;
        let cols = cg.im2col(&x[s0 * c * h * w..][..cg.n * c * h * w]);
        let mut prod = vec![T::zero(); oc * np];
        gemm(
            T::one(),
            MatRef::rows(wt, oc, g.rows()),
            MatRef::rows(&cols, g.rows(), np),
            T::zero(),
            &mut prod,
        );
        for o in 0..oc {
            for s in 0..cg.n {
                let src = &prod[o * np + s * p..][..p];
                let dst = &mut out[((s0 + s) * oc + o) * p..][..p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b[o];
                }
            }
        }
    }
    let rg = any_grad(tape, &[input, weight, bias]);
    Ok(tape.push(
        Tensor::new(&[n, oc, ho, wo], out)?,
        rg,
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        },
    ))
}

/// Per-(sample, channel) plane normalization with a learnable affine.
pub fn instance_norm2d<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) -> Result<Var> {
    let [n, c, h, w] = tape.value(input).dims4("instance_norm2d")?;
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::dims("instance_norm2d", tape.shape(input), tape.shape(gamma)));
    }
    if eps <= T::zero() {
        return Err(Error::contract("instance_norm2d eps must be > 0"));
    }
    let m = h * w;
    let x = tape.value(input).data();
    let gm = tape.value(gamma).data();
    let bt = tape.value(beta).data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let ch = plane % c;
        let xs = &x[plane * m..][..m];
        let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / m as f64;
        let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m as f64;
        let istd = 1.0 / (var + eps.f64()).sqrt();
        inv_std.push(T::of(istd));
        for i in 0..m {
            let xh = T::of((xs[i].f64() - mean) * istd);
            xhat[plane * m + i] = xh;
            out[plane * m + i] = gm[ch] * xh + bt[ch];
        }
    }
    let rg = any_grad(tape, &[input, gamma, beta]);
    Ok(tape.push(
        Tensor::new(&[n, c, h, w], out)?,
        rg,
        Op::InstanceNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        },
    ))
}

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Real>(tape: &mut Tape<T>, input: Var, slope: T) -> Result<Var> {
    if !(slope >= T::zero() && slope < T::one()) {
        return Err(Error::contract("leaky_relu slope must lie in [0, 1)"));
    }
    let out = tape
        .value(input)
        .map(|v| if v >= T::zero() { v } else { slope * v });
    let rg = tape.requires_grad(input);
    Ok(tape.push(out, rg, Op::LeakyRelu { input, slope }))
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dims(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "add", a, b)?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::new(tape.shape(a), data)?;
    let rg = any_grad(tape, &[a, b]);
    Ok(tape.push(out, rg, Op::Add { a, b }))
}

/// Elementwise product.
pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mul", a, b)?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::new(tape.shape(a), data)?;
    let rg = any_grad(tape, &[a, b]);
    Ok(tape.push(out, rg, Op::Mul { a, b }))
}

/// Sum of all elements, as a one-element tensor.
pub fn sum<T: Real>(tape: &mut Tape<T>, input: Var) -> Var {
    let s = tape.value(input).sum();
    let rg = tape.requires_grad(input);
    tape.push(Tensor::scalar(s), rg, Op::Sum { input })
}

/// Concatenates two NCHW tensors along the channel axis, `a` first.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let [n, c1, h, w] = tape.value(a).dims4("concat_channels")?;
    let [n2, c2, h2, w2] = tape.value(b).dims4("concat_channels")?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::dims("concat_channels", tape.shape(a), tape.shape(b)));
    }
    let (sa, sb) = (c1 * h * w, c2 * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for s in 0..n {
        out.extend_from_slice(&tape.value(a).data()[s * sa..][..sa]);
        out.extend_from_slice(&tape.value(b).data()[s * sb..][..sb]);
    }
    let rg = any_grad(tape, &[a, b]);
    Ok(tape.push(
        Tensor::new(&[n, c1 + c2, h, w], out)?,
        rg,
        Op::Concat { a, b },
    ))
}

/// Scales every row (leading-axis slice) to unit length: `v / sqrt(|v|^2 + eps)`.
pub fn l2_normalize<T: Real>(tape: &mut Tape<T>, input: Var, eps: T) -> Result<Var> {
    if eps <= T::zero() {
        return Err(Error::contract("l2_normalize eps must be > 0"));
    }
    let x = tape.value(input);
    if x.shape().is_empty() || x.numel() == 0 {
        return Err(Error::contract("l2_normalize of an empty tensor"));
    }
    let rows = x.shape()[0];
    let width = x.numel() / rows;
    let mut out = Vec::with_capacity(x.numel());
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * width..][..width];
        let sq: f64 = row.iter().map(|v| v.f64() * v.f64()).sum();
        let nrm = T::of((sq + eps.f64()).sqrt());
        norms.push(nrm);
        out.extend(row.iter().map(|&v| v / nrm));
    }
    let out = Tensor::new(x.shape(), out)?;
    let rg = tape.requires_grad(input);
    Ok(tape.push(out, rg, Op::L2Normalize { input, norms }))
}

pub fn reshape<T: Real>(tape: &mut Tape<T>, input: Var, shape: &[usize]) -> Result<Var> {
    let out = tape.value(input).clone().reshape(shape)?;
    let rg = tape.requires_grad(input);
    Ok(tape.push(out, rg, Op::Reshape { input }))
}

/// Records a scalar computed outside the tape together with its gradient
/// with respect to each input.
pub(crate) fn fused_scalar<T: Real>(tape: &mut Tape<T>, value: T, inputs: Vec<(Var, Vec<T>)>) -> Var {
    let rg = inputs.iter().any(|(v, _)| tape.requires_grad(*v));
    tape.push(Tensor::scalar(value), rg, Op::Fused { inputs })
}

pub(crate) struct GradSink<'a, T> {
    pub grads: &'a mut [Option<Vec<T>>],
    pub requires: &'a [bool],
}

impl<T: Real> GradSink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn slot(&mut self, v: Var, len: usize) -> &mut Vec<T> {
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn accumulate(&mut self, v: Var, delta: impl IntoIterator<Item = T>, len: usize) {
        if !self.wants(v) {
            return;
        }
        for (g, d) in self.slot(v, len).iter_mut().zip(delta) {
            *g += d;
        }
    }
}

pub(crate) fn backward<'t, T: Real>(
    op: &Op<T>,
    value: &dyn Fn(Var) -> &'t Tensor<T>,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let x = value(*input);
            let wt = value(*weight);
            let [n, c, h, w] = x.dims4("conv2d").expect("recorded shape");
            let [oc, _, k, _] = wt.dims4("conv2d").expect("recorded shape");
            let [_, _, ho, wo] = out.dims4("conv2d").expect("recorded shape");
            let geom = ConvGeom {
                n,
                c,
                h,
                w,
                k,
                stride: *stride,
                pad: *padding,
                ho,
                wo,
            };
            let p = geom.plane_out();
            if sink.wants(*bias) {
                let db = sink.slot(*bias, oc);
                for s in 0..n {
                    for o in 0..oc {
                        db[o] += g[(s * oc + o) * p..][..p].iter().copied().sum::<T>();
                    }
                }
            }
            let sign = if CONV_INPUT_GRAD_SIGN_FLIP.with(|f| f.get()) {
                -T::one()
            } else {
                T::one()
            };
            let chw = c * h * w;
            for (s0, cg) in geom.chunks() {
                let np = cg.n * p;
                let mut gm = vec![T::zero(); oc * np];
                for s in 0..cg.n {
                    for o in 0..oc {
                        gm[o * np + s * p..][..p].copy_from_slice(&g[((s0 + s) * oc + o) * p..][..p]);
                    }
                }
                if sink.wants(*weight) {
                    let cols = cg.im2col(&x.data()[s0 * chw..][..cg.n * chw]);
                    let dw = sink.slot(*weight, wt.numel());
                    gemm(
                        T::one(),
                        MatRef::rows(&gm, oc, np),
                        MatRef::rows(&cols, geom.rows(), np).t(),
                        T::one(),
                        dw,
                    );
                }
                if sink.wants(*input) {
                    let mut dcols = vec![T::zero(); geom.rows() * np];
                    gemm(
                        T::one(),
                        MatRef::rows(wt.data(), oc, geom.rows()).t(),
                        MatRef::rows(&gm, oc, np),
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = sink.slot(*input, x.numel());
                    cg.col2im(&dcols, &mut dx[s0 * chw..][..cg.n * chw], sign);
                }
            }
        }
        Op::InstanceNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let [n, c, h, w] = out.dims4("instance_norm2d").expect("recorded shape");
            let m = h * w;
            let gm = value(*gamma).data();
            if sink.wants(*gamma) {
                let dg = sink.slot(*gamma, c);
                for plane in 0..n * c {
                    let s: T = (0..m).map(|i| g[plane * m + i] * xhat[plane * m + i]).sum();
                    dg[plane % c] += s;
                }
            }
            if sink.wants(*beta) {
                let db = sink.slot(*beta, c);
                for plane in 0..n * c {
                    db[plane % c] += g[plane * m..][..m].iter().copied().sum::<T>();
                }
            }
            if sink.wants(*input) {
                let dx = sink.slot(*input, n * c * m);
                let mt = T::of(m as f64);
                for plane in 0..n * c {
                    let gam = gm[plane % c];
                    let gs = &g[plane * m..][..m];
                    let xs = &xhat[plane * m..][..m];
                    let sum_d: T = gs.iter().map(|&v| v * gam).sum();
                    let sum_dx: T = gs.iter().zip(xs).map(|(&v, &xh)| v * gam * xh).sum();
                    let scale = inv_std[plane] / mt;
                    for i in 0..m {
                        dx[plane * m + i] += scale * (mt * gs[i] * gam - sum_d - xs[i] * sum_dx);
                    }
                }
            }
        }
        Op::LeakyRelu { input, slope } => {
            let x = value(*input).data();
            sink.accumulate(
                *input,
                x.iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv >= T::zero() { gv } else { *slope * gv }),
                x.len(),
            );
        }
        Op::Add { a, b } => {
            sink.accumulate(*a, g.iter().copied(), g.len());
            sink.accumulate(*b, g.iter().copied(), g.len());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (value(*a).data(), value(*b).data());
            sink.accumulate(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y), g.len());
            sink.accumulate(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x), g.len());
        }
        Op::Sum { input } => {
            let len = value(*input).numel();
            sink.accumulate(*input, std::iter::repeat(g[0]).take(len), len);
        }
        Op::Concat { a, b } => {
            let [n, c1, h, w] = value(*a).dims4("concat").expect("recorded shape");
            let c2 = value(*b).shape()[1];
            let (sa, sb) = (c1 * h * w, c2 * h * w);
            sink.accumulate(
                *a,
                (0..n).flat_map(|s| g[s * (sa + sb)..][..sa].iter().copied()),
                n * sa,
            );
            sink.accumulate(
                *b,
                (0..n).flat_map(|s| g[s * (sa + sb) + sa..][..sb].iter().copied()),
                n * sb,
            );
        }
        Op::L2Normalize { input, norms } => {
            let y = out.data();
            let rows = norms.len();
            let width = y.len() / rows;
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..rows {
                let ys = &y[r * width..][..width];
                let gs = &g[r * width..][..width];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for i in 0..width {
                    dx[r * width + i] = (gs[i] - ys[i] * dot) / norms[r];
                }
            }
            sink.accumulate(*input, dx, y.len());
        }
        Op::Reshape { input } => {
            sink.accumulate(*input, g.iter().copied(), g.len());
        }
        Op::Fused { inputs } => {
            for (v, local) in inputs {
                sink.accumulate(*v, local.iter().map(|&l| l * g[0]), local.len());
            }
        }
    }
}
