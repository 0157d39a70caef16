//! Tensor operations, recorded on a tape when one is active.
//!
//! A [`Cx`] bundles the execution mode: inference (no tape, dropout off)
//! or training (tape active, dropout draws from a seeded stream). All ops
//! validate shapes up front and reject non-finite inputs where the
//! contract calls for it, so NaNs surface at the op that received them
//! instead of propagating silently.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rng::SubRng;
use crate::tape::{Op, Tape};
use crate::tensor::{Scalar, Tensor};

/// Execution context for a forward (and optionally backward) pass.
pub struct Cx<T: Scalar> {
    tape: Option<Tape<T>>,
    training: bool,
    dropout_rng: Option<SubRng>,
}

impl<T: Scalar> Cx<T> {
    /// No tape, dropout inactive: deterministic evaluation.
    pub fn inference() -> Self {
        Cx {
            tape: None,
            training: false,
            dropout_rng: None,
        }
    }

    /// Tape active, dropout draws from `rng`.
    pub fn training(rng: SubRng) -> Self {
        Cx {
            tape: Some(Tape::new()),
            training: true,
            dropout_rng: Some(rng),
        }
    }

    /// Tape active but eval-mode (dropout off); used by gradient checks.
    pub fn recording() -> Self {
        Cx {
            tape: Some(Tape::new()),
            training: false,
            dropout_rng: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn tape_len(&self) -> usize {
        self.tape.as_ref().map_or(0, |t| t.len())
    }

    fn record(&mut self, op: Op, inputs: Vec<Tensor<T>>, output: &Tensor<T>) {
        if let Some(tape) = self.tape.as_mut() {
            tape.record(op, inputs, output.clone());
        }
    }

    /// Run reverse-mode accumulation from `loss` and clear the tape.
    /// Gradients accumulate on parameter tensors; the caller zeroes them
    /// between optimizer steps.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::invalid("backward", "no active tape"))?;
        let result = tape.backward(loss);
        self.tape = Some(Tape::new());
        result
    }

    /// 2-D convolution with zero padding.
    /// `x: [Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (cin, h, wid) = x.dims3()?;
        let (cout, wcin, kh, kw) = w.dims4()?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        for t in [x, w, b] {
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "conv2d" });
            }
        }
        let geom = ConvGeom::new(cin, cout, h, wid, kh, kw, stride, pad)?;
        let out = kernels::conv2d_im2col(&x.data(), &w.data(), &b.data(), &geom);
        let out = Tensor::new(&[cout, geom.h_out, geom.w_out], out)?;
        self.record(
            Op::Conv2d { geom },
            vec![x.clone(), w.clone(), b.clone()],
            &out,
        );
        Ok(out)
    }

    pub fn max_pool2d(&mut self, x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
        let (c, h, w) = x.dims3()?;
        let (out, argmax, ho, wo) = kernels::max_pool2d(&x.data(), c, h, w, k, stride)?;
        let out = Tensor::new(&[c, ho, wo], out)?;
        self.record(
            Op::MaxPool {
                k,
                stride,
                argmax,
                dims: (c, h, w, ho, wo),
            },
            vec![x.clone()],
            &out,
        );
        Ok(out)
    }

    fn unary(
        &mut self,
        name: &'static str,
        op: Op,
        x: &Tensor<T>,
        f: impl Fn(T) -> T,
    ) -> Result<Tensor<T>> {
        if !x.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape(), out)?;
        self.record(op, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("relu", Op::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let one = T::one();
        self.unary("sigmoid", Op::Sigmoid, x, |v| one / (one + (-v).exp()))
    }

    pub fn tanh(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary("tanh", Op::Tanh, x, |v| v.tanh())
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        op: Op,
        x: &Tensor<T>,
        y: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let out: Vec<T> = x
            .data()
            .iter()
            .zip(y.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor::new(x.shape(), out)?;
        self.record(op, vec![x.clone(), y.clone()], &out);
        Ok(out)
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same_shape("add", Op::Add, x, y, |a, b| a + b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same_shape("mul", Op::Mul, x, y, |a, b| a * b)
    }

    /// Stack feature maps along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "empty part list"));
        }
        let (_, h, w) = parts[0].dims3()?;
        let mut total_c = 0;
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            offsets.push(total_c);
            total_c += c;
        }
        let mut out = Vec::with_capacity(total_c * h * w);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        let out = Tensor::new(&[total_c, h, w], out)?;
        self.record(
            Op::ConcatChannels {
                offsets,
                plane: h * w,
            },
            parts.iter().map(|p| (*p).clone()).collect(),
            &out,
        );
        Ok(out)
    }

    /// Take channels `[start, start+len)`.
    pub fn slice_channels(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (c, h, w) = x.dims3()?;
        if start + len > c || len == 0 {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} out of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let out = x.data()[start * plane..(start + len) * plane].to_vec();
        let out = Tensor::new(&[len, h, w], out)?;
        self.record(Op::SliceChannels { start, plane }, vec![x.clone()], &out);
        Ok(out)
    }

    /// Bilinear resize (half-pixel convention, clamped at the edges).
    pub fn upsample_bilinear(&mut self, x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("upsample_bilinear", "output size must be >= 1"));
        }
        let (c, h, w) = x.dims3()?;
        let out = kernels::resize_bilinear(&x.data(), c, h, w, oh, ow);
        let out = Tensor::new(&[c, oh, ow], out)?;
        self.record(
            Op::Resize {
                dims: (c, h, w, oh, ow),
            },
            vec![x.clone()],
            &out,
        );
        Ok(out)
    }

    /// Sum of squared differences, as a `[1]` tensor.
    pub fn sum_sq_diff(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "sum_sq_diff",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { op: "sum_sq_diff" });
        }
        let mut acc = T::zero();
        for (&x, &y) in a.data().iter().zip(b.data().iter()) {
            let d = x - y;
            acc += d * d;
        }
        let out = Tensor::scalar(acc);
        self.record(Op::SumSqDiff, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in x.data().iter() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        self.record(Op::Sum, vec![x.clone()], &out);
        Ok(out)
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
        let f = T::from_f64(factor);
        let out: Vec<T> = x.data().iter().map(|&v| v * f).collect();
        let out = Tensor::new(x.shape(), out)?;
        self.record(Op::Scale { factor }, vec![x.clone()], &out);
        Ok(out)
    }

    /// Inverted dropout: identity in eval mode; in training mode zeroes
    /// each element with probability `rate` and rescales the survivors.
    pub fn dropout(&mut self, x: &Tensor<T>, rate: f64) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} not in [0,1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - rate;
        let rng = self
            .dropout_rng
            .as_mut()
            .expect("training context has a dropout stream");
        let mask: Vec<bool> = (0..x.len()).map(|_| rng.bernoulli(keep)).collect();
        let inv = T::from_f64(1.0 / keep);
        let out: Vec<T> = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * inv } else { T::zero() })
            .collect();
        let out = Tensor::new(x.shape(), out)?;
        self.record(Op::Dropout { mask, keep }, vec![x.clone()], &out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, vals: Vec<f32>) -> Tensor<f32> {
        Tensor::new(&[c, h, w], vals).unwrap()
    }

    #[test]
    fn activation_points() {
        let mut cx = Cx::<f64>::inference();
        let x = Tensor::new(&[3], vec![0.0, 20.0, -3.0]).unwrap();
        let s = cx.sigmoid(&x).unwrap().to_vec();
        assert_eq!(s[0], 0.5);
        assert!(s[1] >= 1.0 - 1e-8 && s[1] <= 1.0);
        let th = cx.tanh(&x).unwrap().to_vec();
        assert_eq!(th[0], 0.0);
        let r = cx.relu(&x).unwrap().to_vec();
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn add_mul_identities() {
        let mut cx = Cx::<f32>::inference();
        let x = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let zeros = Tensor::zeros(&[2]);
        let ones = Tensor::full(&[2], 1.0);
        assert_eq!(cx.add(&x, &zeros).unwrap().to_vec(), vec![2.0, 3.0]);
        assert_eq!(cx.mul(&x, &ones).unwrap().to_vec(), vec![2.0, 3.0]);
        let y = Tensor::new(&[2], vec![4.0, 5.0]).unwrap();
        assert_eq!(cx.mul(&x, &y).unwrap().to_vec(), vec![8.0, 15.0]);
        let bad = Tensor::zeros(&[3]);
        assert!(cx.add(&x, &bad).is_err());
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut cx = Cx::<f32>::inference();
        let a = t3(2, 4, 4, (0..32).map(|v| v as f32).collect());
        let b = t3(3, 4, 4, (0..48).map(|v| v as f32 * 0.5).collect());
        let cat = cx.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[5, 4, 4]);
        assert_eq!(&cat.to_vec()[..32], &a.to_vec()[..]);
        let a2 = cx.slice_channels(&cat, 0, 2).unwrap();
        let b2 = cx.slice_channels(&cat, 2, 3).unwrap();
        assert_eq!(a2.to_vec(), a.to_vec());
        assert_eq!(b2.to_vec(), b.to_vec());
        // single-part concat is the identity
        let one = cx.concat_channels(&[&a]).unwrap();
        assert_eq!(one.to_vec(), a.to_vec());
        // spatial mismatch rejected
        let c = t3(1, 2, 2, vec![0.0; 4]);
        assert!(cx.concat_channels(&[&a, &c]).is_err());
    }

    #[test]
    fn sum_sq_diff_values() {
        let mut cx = Cx::<f32>::inference();
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(cx.sum_sq_diff(&a, &b).unwrap().item(), 5.0);
        assert_eq!(cx.sum_sq_diff(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn sum_sq_diff_matches_scalar_loop() {
        let mut rng = crate::rng::SubRng::derive(5, &[1]);
        let a: Vec<f64> = (0..64).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut want = 0.0;
        for i in 0..64 {
            want += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let mut cx = Cx::<f64>::inference();
        let ta = Tensor::new(&[64], a).unwrap();
        let tb = Tensor::new(&[64], b).unwrap();
        let got = cx.sum_sq_diff(&ta, &tb).unwrap().item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_shape_and_nonfinite() {
        let mut cx = Cx::<f32>::inference();
        let x = t3(2, 4, 4, vec![0.0; 32]);
        let w = Tensor::new(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let b = Tensor::zeros(&[1]);
        let err = cx.conv2d(&x, &w, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
        let xn = t3(1, 2, 2, vec![0.0, f32::NAN, 0.0, 0.0]);
        let w1 = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            cx.conv2d(&xn, &w1, &b, 1, 0).unwrap_err(),
            Error::NonFinite { .. }
        ));
    }

    #[test]
    fn backward_square_loss() {
        // loss = sum_sq_diff(w, 0) with w = [3] -> grad = [6]
        let mut cx = Cx::<f64>::recording();
        let w = Tensor::param(&[1], vec![3.0]).unwrap();
        let zero = Tensor::zeros(&[1]);
        let loss = cx.sum_sq_diff(&w, &zero).unwrap();
        cx.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn disconnected_param_stays_zero() {
        let mut cx = Cx::<f64>::recording();
        let w = Tensor::param(&[1], vec![3.0]).unwrap();
        let unused = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[1]);
        let loss = cx.sum_sq_diff(&w, &zero).unwrap();
        cx.backward(&loss).unwrap();
        assert!(unused.grad().is_none());
    }

    #[test]
    fn grads_accumulate_across_backwards() {
        let w = Tensor::param(&[1], vec![2.0]).unwrap();
        let zero = Tensor::zeros(&[1]);
        for _ in 0..2 {
            let mut cx = Cx::<f64>::recording();
            let loss = cx.sum_sq_diff(&w, &zero).unwrap();
            cx.backward(&loss).unwrap();
        }
        assert_eq!(w.grad().unwrap(), vec![8.0]); // 2 * (2w) = 8
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks() {
        let x = Tensor::new(&[8], vec![1.0f32; 8]).unwrap();
        let mut cx = Cx::inference();
        let y = cx.dropout(&x, 0.5).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let mut cx = Cx::training(SubRng::derive(1, &[2]));
        let y = cx.dropout(&x, 0.5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
