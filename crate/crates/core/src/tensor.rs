//! Dense row-major `f64` tensors.
//!
//! Image-like tensors use `[h, w, c]` axis order. The raw kernels in this
//! module (matrix product, convolution, channel slicing) are shared by the
//! differentiation tape and by the plain evaluation paths.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Square-matrix dimension, or an error naming `op`.
    pub fn square_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape.as_slice() {
            [r, c] if r == c => Ok(*r),
            s => Err(Error::shape(op, format!("expected square matrix, got {s:?}"))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.shape[..] else {
            return Err(Error::shape("transpose", format!("rank {} tensor", self.rank())));
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, k, n) = matmul_dims(self, rhs)?;
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let c = self.channels();
        if start >= end || end > c {
            return Err(Error::OutOfRange(format!(
                "channel slice {start}..{end} of {c} channels"
            )));
        }
        let width = end - start;
        let rows = self.data.len() / c;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + start..r * c + end]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        Tensor::new(shape, data)
    }

    /// Concatenate along the last axis. All leading dimensions must agree.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(shape, data)
    }

    /// Gather `self.data[index[i]]` into a tensor of `shape`.
    pub fn gather(&self, index: &[usize], shape: &[usize]) -> Result<Self> {
        let data = index.iter().map(|&i| self.data[i]).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k1], [k2, n]) if k1 == k2 => Ok((*m, *k1, *n)),
        (sa, sb) => Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
    }
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Stride and zero padding for a 2-D cross-correlation, per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Output spatial size for an `h×w` input and `kh×kw` kernel.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            if s == 0 || n + 2 * p < k {
                None
            } else {
                Some((n + 2 * p - k) / s + 1)
            }
        };
        match (
            axis(h, kh, self.stride.0, self.padding.0),
            axis(w, kw, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(
                "conv2d",
                format!("non-positive output for input {h}x{w}, kernel {kh}x{kw}, {self:?}"),
            )),
        }
    }
}

pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(input: &Tensor, kernel: &Tensor, g: ConvGeometry) -> Result<ConvDims> {
    let (&[h, w, cin], &[kh, kw, kcin, cout]) = (input.shape(), kernel.shape()) else {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}", input.shape(), kernel.shape()),
        ));
    };
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    let (oh, ow) = g.output_size(h, w, kh, kw)?;
    Ok(ConvDims {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
    })
}

/// Iterate valid `(out_pixel, in_pixel, tap)` triples of a convolution.
#[inline]
fn for_each_tap(d: &ConvDims, g: ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let opix = oy * d.ow + ox;
            for ky in 0..d.kh {
                let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    f(opix, iy as usize * d.w + ix as usize, ky * d.kw + kx);
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip): input `[h,w,cin]`, kernel
/// `[kh,kw,cin,cout]`, output `[oh,ow,cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(input, kernel, g)?;
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; d.oh * d.ow * d.cout];
    for_each_tap(&d, g, |opix, ipix, tap| {
        let orow = &mut out[opix * d.cout..(opix + 1) * d.cout];
        for ci in 0..d.cin {
            let a = x[ipix * d.cin + ci];
            if a == 0.0 {
                continue;
            }
            let krow = &k[(tap * d.cin + ci) * d.cout..(tap * d.cin + ci + 1) * d.cout];
            for (o, &kv) in orow.iter_mut().zip(krow) {
                *o += a * kv;
            }
        }
    });
    Tensor::new(vec![d.oh, d.ow, d.cout], out)
}

pub(crate) fn conv2d_grad_input(
    grad_out: &Tensor,
    input_shape: &[usize],
    kernel: &Tensor,
    g: ConvGeometry,
) -> Tensor {
    let d = conv_dims(&Tensor::zeros(input_shape), kernel, g).expect("validated in forward");
    let (go, k) = (grad_out.data(), kernel.data());
    let mut gi = vec![0.0; d.h * d.w * d.cin];
    for_each_tap(&d, g, |opix, ipix, tap| {
        let grow = &go[opix * d.cout..(opix + 1) * d.cout];
        for ci in 0..d.cin {
            let krow = &k[(tap * d.cin + ci) * d.cout..(tap * d.cin + ci + 1) * d.cout];
            let s: f64 = grow.iter().zip(krow).map(|(a, b)| a * b).sum();
            gi[ipix * d.cin + ci] += s;
        }
    });
    Tensor::new(input_shape.to_vec(), gi).expect("shape preserved")
}

pub(crate) fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    g: ConvGeometry,
) -> Tensor {
    let d = conv_dims(input, &Tensor::zeros(kernel_shape), g).expect("validated in forward");
    let (go, x) = (grad_out.data(), input.data());
    let mut gk = vec![0.0; kernel_shape.iter().product()];
    for_each_tap(&d, g, |opix, ipix, tap| {
        let grow = &go[opix * d.cout..(opix + 1) * d.cout];
        for ci in 0..d.cin {
            let a = x[ipix * d.cin + ci];
            if a == 0.0 {
                continue;
            }
            let krow = &mut gk[(tap * d.cin + ci) * d.cout..(tap * d.cin + ci + 1) * d.cout];
            for (kv, &gv) in krow.iter_mut().zip(grow) {
                *kv += a * gv;
            }
        }
    });
    Tensor::new(kernel_shape.to_vec(), gk).expect("shape preserved")
}
