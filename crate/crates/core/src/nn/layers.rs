use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

// ---- slice kernels (used by the models on their hot paths) ----

/// `y = W x + b` with `W` stored `[out][in]`.
pub fn dense_raw(x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), n_in * y.len());
    for (o, out) in y.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *out = acc;
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and, when requested, overwrites
/// `dx = Wᵀ dy`.
pub fn dense_grad_raw(x: &[f64], w: &[f64], dy: &[f64], dx: Option<&mut [f64]>, dw: &mut [f64], db: &mut [f64]) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for (d, xi) in row.iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

pub fn relu_raw(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Masks `dy` in place where the pre-activation was `<= 0` (subgradient 0 at 0).
pub fn relu_grad_raw(pre: &[f64], dy: &mut [f64]) {
    for (g, &x) in dy.iter_mut().zip(pre) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Spatial padding mode for [`conv3d_raw`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Padding {
    /// Zero padding keeping the spatial size (odd kernels only).
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

/// Geometry of a 3-D convolution over channel-last `[d][h][w][c]` data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dShape {
    pub input: [usize; 3],
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
}

impl Conv3dShape {
    pub fn output(&self) -> [usize; 3] {
        match self.padding {
            Padding::Same => self.input,
            Padding::Valid => self.input.map(|n| n + 1 - self.kernel),
        }
    }

    fn pad(&self) -> isize {
        match self.padding {
            Padding::Same => (self.kernel / 2) as isize,
            Padding::Valid => 0,
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.pow(3) * self.in_channels * self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel > 0
            && match self.padding {
                Padding::Same => self.kernel % 2 == 1,
                Padding::Valid => self.input.iter().all(|&n| n >= self.kernel),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(alloc::format!(
                "kernel {} incompatible with input {:?} and {:?} padding",
                self.kernel, self.input, self.padding
            )))
        }
    }

    /// Calls `f(out_pos, in_pos, tap)` for every in-bounds tap, where `tap`
    /// indexes the `k³` kernel positions.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output();
        let k = self.kernel;
        let pad = self.pad();
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let opos = (z * oh + y) * ow + x;
                    for kd in 0..k {
                        let zz = z as isize + kd as isize - pad;
                        if zz < 0 || zz >= id as isize {
                            continue;
                        }
                        for kh in 0..k {
                            let yy = y as isize + kh as isize - pad;
                            if yy < 0 || yy >= ih as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let xx = x as isize + kw as isize - pad;
                                if xx < 0 || xx >= iw as isize {
                                    continue;
                                }
                                let ipos = (zz as usize * ih + yy as usize) * iw + xx as usize;
                                f(opos, ipos, (kd * k + kh) * k + kw);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward 3-D convolution; kernel layout `[kd][kh][kw][cin][cout]`.
/// `y` is overwritten.
pub fn conv3d_raw(shape: &Conv3dShape, x: &[f64], kernel: &[f64], bias: Option<&[f64]>, y: &mut [f64]) {
    let (cin, cout) = (shape.in_channels, shape.out_channels);
    let n_out: usize = shape.output().iter().product();
    debug_assert_eq!(y.len(), n_out * cout);
    for p in 0..n_out {
        let row = &mut y[p * cout..(p + 1) * cout];
        match bias {
            Some(b) => row.copy_from_slice(b),
            None => row.iter_mut().for_each(|v| *v = 0.0),
        }
    }
    shape.for_each_tap(|opos, ipos, tap| {
        let xin = &x[ipos * cin..(ipos + 1) * cin];
        let yrow = &mut y[opos * cout..(opos + 1) * cout];
        let kbase = tap * cin * cout;
        for (ci, &xv) in xin.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
            for (yv, kv) in yrow.iter_mut().zip(krow) {
                *yv += xv * kv;
            }
        }
    });
}

/// Backward pass of [`conv3d_raw`]. Kernel and bias gradients accumulate;
/// `dx`, when requested, is overwritten.
pub fn conv3d_grad_raw(
    shape: &Conv3dShape,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dkernel: &mut [f64],
    dbias: Option<&mut [f64]>,
) {
    let (cin, cout) = (shape.in_channels, shape.out_channels);
    if let Some(db) = dbias {
        for row in dy.chunks_exact(cout) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    match dx {
        Some(dx) => {
            dx.iter_mut().for_each(|v| *v = 0.0);
            shape.for_each_tap(|opos, ipos, tap| {
                let g = &dy[opos * cout..(opos + 1) * cout];
                let kbase = tap * cin * cout;
                for ci in 0..cin {
                    let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                    let mut acc = 0.0;
                    for (kv, gv) in krow.iter().zip(g) {
                        acc += kv * gv;
                    }
                    dx[ipos * cin + ci] += acc;
                    let xv = x[ipos * cin + ci];
                    if xv != 0.0 {
                        let drow = &mut dkernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (d, gv) in drow.iter_mut().zip(g) {
                            *d += xv * gv;
                        }
                    }
                }
            });
        }
        None => shape.for_each_tap(|opos, ipos, tap| {
            let g = &dy[opos * cout..(opos + 1) * cout];
            let kbase = tap * cin * cout;
            for ci in 0..cin {
                let xv = x[ipos * cin + ci];
                if xv == 0.0 {
                    continue;
                }
                let drow = &mut dkernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                for (d, gv) in drow.iter_mut().zip(g) {
                    *d += xv * gv;
                }
            }
        }),
    }
}

// ---- tensor-level wrappers with shape checking ----

fn shape_err(context: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        context,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Dense layer on a single sample. `w` is `[out, in]`, `b` is `[out]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != x.len() || b.len() != ws[0] {
        return Err(shape_err("dense weights vs input", ws, x.shape()));
    }
    let mut y = vec![0.0; ws[0]];
    dense_raw(x.data(), w.data(), b.data(), &mut y);
    Tensor::new(vec![ws[0]], y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<DenseGrads> {
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != x.len() || dy.len() != ws[0] {
        return Err(shape_err("dense weights vs gradient", ws, dy.shape()));
    }
    let mut dx = vec![0.0; ws[1]];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; ws[0]];
    dense_grad_raw(x.data(), w.data(), dy.data(), Some(&mut dx), &mut dw, &mut db);
    Ok(DenseGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(ws.to_vec(), dw)?,
        bias: Tensor::new(vec![ws[0]], db)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    relu_raw(y.data_mut());
    y
}

/// Gradient with respect to the ReLU input `x`.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(shape_err("relu input vs gradient", x.shape(), dy.shape()));
    }
    let mut g = dy.clone();
    relu_grad_raw(x.data(), g.data_mut());
    Ok(g)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("residual operands", a.shape(), b.shape()));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// The upstream gradient flows unchanged to both operands.
pub fn residual_add_backward(dy: &Tensor) -> (Tensor, Tensor) {
    (dy.clone(), dy.clone())
}

fn conv_shape(x: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Conv3dShape> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 4 || ks.len() != 5 || ks[0] != ks[1] || ks[1] != ks[2] || ks[3] != xs[3] {
        return Err(shape_err("conv3d input [d,h,w,c] vs kernel [k,k,k,cin,cout]", xs, ks));
    }
    let shape = Conv3dShape {
        input: [xs[0], xs[1], xs[2]],
        kernel: ks[0],
        in_channels: ks[3],
        out_channels: ks[4],
        padding,
    };
    shape.validate()?;
    Ok(shape)
}

/// Convolution of a `[d, h, w, cin]` tensor with a `[k, k, k, cin, cout]`
/// kernel and optional `[cout]` bias.
pub fn conv3d_forward(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Tensor> {
    let shape = conv_shape(x, kernel, padding)?;
    if let Some(b) = bias {
        if b.len() != shape.out_channels {
            return Err(shape_err("conv3d bias", b.shape(), &[shape.out_channels]));
        }
    }
    let [od, oh, ow] = shape.output();
    let mut y = vec![0.0; od * oh * ow * shape.out_channels];
    conv3d_raw(&shape, x.data(), kernel.data(), bias.map(|b| b.data()), &mut y);
    Tensor::new(vec![od, oh, ow, shape.out_channels], y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv3d_backward(x: &Tensor, kernel: &Tensor, dy: &Tensor, padding: Padding) -> Result<Conv3dGrads> {
    let shape = conv_shape(x, kernel, padding)?;
    let [od, oh, ow] = shape.output();
    let expected = [od, oh, ow, shape.out_channels];
    if dy.shape() != expected {
        return Err(shape_err("conv3d output gradient", dy.shape(), &expected));
    }
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; shape.out_channels];
    conv3d_grad_raw(&shape, x.data(), kernel.data(), dy.data(), Some(&mut dx), &mut dk, Some(&mut db));
    Ok(Conv3dGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dk)?,
        bias: Tensor::new(vec![shape.out_channels], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_dense_is_identity() {
        let w = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(&[3]);
        let x = Tensor::from_slice(&[1.5, -2.0, 3.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn dense_shape_mismatch_is_an_error() {
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            dense_forward(&Tensor::zeros(&[4]), &w, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_backward_masks_nonpositive_inputs() {
        let x = Tensor::from_slice(&[-1.0, 2.0, 0.0]);
        let dy = Tensor::from_slice(&[1.0, 1.0, 1.0]);
        assert_eq!(relu_backward(&x, &dy).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn all_ones_valid_convolution_sums_the_patch() {
        let x = t(&[3, 3, 3, 1], vec![1.0; 27]);
        let k = t(&[3, 3, 3, 1, 1], vec![1.0; 27]);
        let y = conv3d_forward(&x, &k, None, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn centre_tap_kernel_with_same_padding_is_identity() {
        let cin = 2;
        let x: Vec<f64> = (0..4 * 3 * 5 * cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = t(&[4, 3, 5, cin], x);
        let mut k = vec![0.0; 27 * cin * cin];
        for c in 0..cin {
            k[13 * cin * cin + c * cin + c] = 1.0;
        }
        let k = t(&[3, 3, 3, cin, cin], k);
        let y = conv3d_forward(&x, &k, None, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn same_padding_needs_odd_kernel() {
        let x = Tensor::zeros(&[4, 4, 4, 1]);
        let k = Tensor::zeros(&[2, 2, 2, 1, 1]);
        assert!(conv3d_forward(&x, &k, None, Padding::Same).is_err());
        assert!(conv3d_forward(&Tensor::zeros(&[2, 4, 4, 1]), &Tensor::zeros(&[3, 3, 3, 1, 1]), None, Padding::Valid).is_err());
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    // scalar objective: sum(y * r) for a fixed random r, so dL/dy = r
    fn check_conv(padding: Padding) {
        let (d, cin, cout) = ([4usize, 3, 5], 2, 3);
        let x = t(&[d[0], d[1], d[2], cin], lcg(d.iter().product::<usize>() * cin, 1));
        let k = t(&[3, 3, 3, cin, cout], lcg(27 * cin * cout, 2));
        let b = t(&[cout], lcg(cout, 3));
        let y = conv3d_forward(&x, &k, Some(&b), padding).unwrap();
        let r = t(y.shape(), lcg(y.len(), 4));
        let loss = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
            let y = conv3d_forward(x, k, Some(b), padding).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv3d_backward(&x, &k, &r, padding).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &k, &b) - loss(&xm, &k, &b)) / (2.0 * h);
            assert!((num - g.input.data()[i]).abs() < 1e-7, "dx[{i}]");
        }
        for i in 0..k.len() {
            let mut kp = k.clone();
            kp.data_mut()[i] += h;
            let mut km = k.clone();
            km.data_mut()[i] -= h;
            let num = (loss(&x, &kp, &b) - loss(&x, &km, &b)) / (2.0 * h);
            assert!((num - g.kernel.data()[i]).abs() < 1e-7, "dk[{i}]");
        }
        let expected_db: Vec<f64> = (0..cout).map(|c| r.data().iter().skip(c).step_by(cout).sum()).collect();
        for (a, e) in g.bias.data().iter().zip(&expected_db) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_same_gradients_match_finite_differences() {
        check_conv(Padding::Same);
    }

    #[test]
    fn conv_valid_gradients_match_finite_differences() {
        check_conv(Padding::Valid);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let x = Tensor::from_slice(&lcg(5, 9));
        let w = t(&[4, 5], lcg(20, 10));
        let b = Tensor::from_slice(&lcg(4, 11));
        let r = lcg(4, 12);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            let y = dense_forward(x, w, &b).unwrap();
            y.data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let g = dense_backward(&x, &w, &Tensor::from_slice(&r)).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            assert!(((loss(&p, &w) - loss(&m, &w)) / (2.0 * h) - g.input.data()[i]).abs() < 1e-8);
        }
        for i in 0..20 {
            let mut p = w.clone();
            p.data_mut()[i] += h;
            let mut m = w.clone();
            m.data_mut()[i] -= h;
            assert!(((loss(&x, &p) - loss(&x, &m)) / (2.0 * h) - g.weight.data()[i]).abs() < 1e-8);
        }
        assert_eq!(g.bias.data(), &r[..]);
    }

    #[test]
    fn residual_gradient_passes_through() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[3.0, -1.0]);
        assert_eq!(residual_add(&a, &b).unwrap().data(), &[4.0, 1.0]);
        let (ga, gb) = residual_add_backward(&Tensor::from_slice(&[0.5, -0.5]));
        assert_eq!(ga, gb);
        assert!(residual_add(&a, &Tensor::zeros(&[3])).is_err());
    }
}
