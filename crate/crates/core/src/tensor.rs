//! Dense row-major tensor plus the handful of numeric kernels everything
//! else is built on: elementwise ops, matrix multiply, 2-D convolution and
//! its exact adjoint.
//!
//! Convolutions use cross-correlation semantics (no kernel flip) and
//! "same-cover" zero padding: outputs have extents ⌊H/Sh⌋ × ⌊W/Sw⌋ and the
//! input is padded symmetrically (extra row/column goes to the bottom/right)
//! so the kernel covers the whole input. `conv2d_transpose` scatters with the
//! identical padding arithmetic, which is what makes the adjoint identity
//! ⟨conv2d(a,K), b⟩ = ⟨a, conv2d_transpose(b,K)⟩ exact.

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Build from an existing flat buffer. The length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims("Tensor::from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape. Element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dims("Tensor::reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// self += alpha * other, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Number of entries with magnitude above `tol`.
    pub fn count_active(&self, tol: f64) -> usize {
        self.data.iter().filter(|v| v.abs() > tol).count()
    }
}

// ---------------------------------------------------------------------------
// Matrix products (rank-2 only). Separate entry points for the transposed
// variants so hot loops never materialize a transposed copy.
// ---------------------------------------------------------------------------

/// a[M,K] · b[K,N] -> [M,N].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dims("matmul", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a[M,K] · b[N,K]ᵀ -> [M,N].
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::dims("matmul_bt", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a[K,M]ᵀ · b[K,N] -> [M,N].
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
        return Err(Error::dims("matmul_at", &a.shape, &b.shape));
    }
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Rank-2 transpose.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::dims("transpose", &a.shape, &[2]));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

// ---------------------------------------------------------------------------
// 2-D convolution family.
// ---------------------------------------------------------------------------

/// Output extent and leading pad for one axis under same-cover padding.
/// out = ⌊h/s⌋; total pad = max(0, (out-1)·s + k − h), split with the smaller
/// half in front.
fn same_cover(h: usize, k: usize, s: usize) -> Result<(usize, usize)> {
    if s == 0 {
        return Err(Error::Parameter("stride must be >= 1".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("kernel extent must be >= 1".into()));
    }
    let out = h / s;
    if out == 0 {
        return Err(Error::Parameter(format!(
            "input extent {h} smaller than stride {s}"
        )));
    }
    let span = (out - 1) * s + k;
    let pad_total = span.saturating_sub(h);
    Ok((out, pad_total / 2))
}

/// Geometry shared by the three conv kernels.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
}

fn conv_geom(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: (usize, usize),
) -> Result<ConvGeom> {
    if input_shape.len() != 3 || kernel_shape.len() != 4 || input_shape[0] != kernel_shape[1] {
        return Err(Error::dims("conv2d", input_shape, kernel_shape));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (f, kh, kw) = (kernel_shape[0], kernel_shape[2], kernel_shape[3]);
    let (sh, sw) = stride;
    let (oh, pad_h) = same_cover(h, kh, sh)?;
    let (ow, pad_w) = same_cover(w, kw, sw)?;
    Ok(ConvGeom {
        c,
        h,
        w,
        f,
        kh,
        kw,
        sh,
        sw,
        oh,
        ow,
        pad_h,
        pad_w,
    })
}

/// Cross-correlate `input` [C,H,W] with `kernel` [F,C,Kh,Kw] at `stride`,
/// same-cover padding. Output is [F, ⌊H/Sh⌋, ⌊W/Sw⌋].
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
    let g = conv_geom(input.shape(), kernel.shape(), stride)?;
    let mut out = Tensor::zeros(&[g.f, g.oh, g.ow]);
    conv2d_into(input.data(), kernel.data(), &g, out.data_mut());
    Ok(out)
}

fn conv2d_into(input: &[f64], kernel: &[f64], g: &ConvGeom, out: &mut [f64]) {
    for f in 0..g.f {
        for oh in 0..g.oh {
            let orow = &mut out[(f * g.oh + oh) * g.ow..(f * g.oh + oh + 1) * g.ow];
            for c in 0..g.c {
                for kh in 0..g.kh {
                    let ih = (oh * g.sh + kh) as isize - g.pad_h as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let irow = &input[(c * g.h + ih as usize) * g.w..][..g.w];
                    let krow = &kernel[((f * g.c + c) * g.kh + kh) * g.kw..][..g.kw];
                    for (ow, o) in orow.iter_mut().enumerate() {
                        let base = (ow * g.sw) as isize - g.pad_w as isize;
                        let mut acc = 0.0;
                        for (kw, &kv) in krow.iter().enumerate() {
                            let iw = base + kw as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                acc += irow[iw as usize] * kv;
                            }
                        }
                        *o += acc;
                    }
                }
            }
        }
    }
}

/// Exact adjoint of `conv2d`: scatter `code` [F,Hc,Wc] back through `kernel`
/// [F,C,Kh,Kw] into an image of shape `out_hw`. `out_hw` is explicit because
/// floor division loses it when the stride exceeds 1.
pub fn conv2d_transpose(
    code: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    out_hw: (usize, usize),
) -> Result<Tensor> {
    if kernel.rank() != 4 {
        return Err(Error::dims("conv2d_transpose", code.shape(), kernel.shape()));
    }
    let c = kernel.shape()[1];
    let g = conv_geom(&[c, out_hw.0, out_hw.1], kernel.shape(), stride)?;
    if code.shape() != [g.f, g.oh, g.ow] {
        return Err(Error::dims(
            "conv2d_transpose code",
            code.shape(),
            &[g.f, g.oh, g.ow],
        ));
    }
    let mut out = Tensor::zeros(&[g.c, g.h, g.w]);
    conv2d_transpose_into(code.data(), kernel.data(), &g, out.data_mut());
    Ok(out)
}

fn conv2d_transpose_into(code: &[f64], kernel: &[f64], g: &ConvGeom, out: &mut [f64]) {
    for f in 0..g.f {
        for oh in 0..g.oh {
            let crow = &code[(f * g.oh + oh) * g.ow..][..g.ow];
            for c in 0..g.c {
                for kh in 0..g.kh {
                    let ih = (oh * g.sh + kh) as isize - g.pad_h as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let orow = &mut out[(c * g.h + ih as usize) * g.w..][..g.w];
                    let krow = &kernel[((f * g.c + c) * g.kh + kh) * g.kw..][..g.kw];
                    for (ow, &cv) in crow.iter().enumerate() {
                        if cv == 0.0 {
                            continue;
                        }
                        let base = (ow * g.sw) as isize - g.pad_w as isize;
                        for (kw, &kv) in krow.iter().enumerate() {
                            let iw = base + kw as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                orow[iw as usize] += cv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of ⟨conv2d(input, K), code⟩ with respect to K: the patch/code
/// correlation, shape [F,C,Kh,Kw]. This is the third member of the adjoint
/// family: ⟨conv2d(a,K), b⟩ = ⟨K, conv2d_kernel_grad(a, b)⟩.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    code: &Tensor,
    stride: (usize, usize),
    kernel_hw: (usize, usize),
) -> Result<Tensor> {
    if input.rank() != 3 || code.rank() != 3 {
        return Err(Error::dims("conv2d_kernel_grad", input.shape(), code.shape()));
    }
    let c = input.shape()[0];
    let f = code.shape()[0];
    let g = conv_geom(
        input.shape(),
        &[f, c, kernel_hw.0, kernel_hw.1],
        stride,
    )?;
    if code.shape() != [g.f, g.oh, g.ow] {
        return Err(Error::dims(
            "conv2d_kernel_grad code",
            code.shape(),
            &[g.f, g.oh, g.ow],
        ));
    }
    let mut out = Tensor::zeros(&[g.f, g.c, g.kh, g.kw]);
    let od = out.data_mut();
    let (input, code) = (input.data(), code.data());
    for f in 0..g.f {
        for oh in 0..g.oh {
            let crow = &code[(f * g.oh + oh) * g.ow..][..g.ow];
            for c in 0..g.c {
                for kh in 0..g.kh {
                    let ih = (oh * g.sh + kh) as isize - g.pad_h as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let irow = &input[(c * g.h + ih as usize) * g.w..][..g.w];
                    let grow = &mut od[((f * g.c + c) * g.kh + kh) * g.kw..][..g.kw];
                    for (ow, &cv) in crow.iter().enumerate() {
                        if cv == 0.0 {
                            continue;
                        }
                        let base = (ow * g.sw) as isize - g.pad_w as isize;
                        for (kw, gv) in grow.iter_mut().enumerate() {
                            let iw = base + kw as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                *gv += cv * irow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output spatial extents of conv2d for the given input extents and stride.
pub fn conv2d_out_hw(in_hw: (usize, usize), stride: (usize, usize)) -> (usize, usize) {
    (in_hw.0 / stride.0, in_hw.1 / stride.1)
}
