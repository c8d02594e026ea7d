//! Dense row-major `f64` tensors and the GEMM-backed kernels behind the
//! graph ops. Feature maps are NHWC so that channel-wise linear layers,
//! layer norm and convolutions all share the same row layout.

use charformer_core::ImageTensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stack equally sized images into an NHWC batch.
    pub fn from_images(images: &[&ImageTensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?}",
                    (h, w, c),
                    img.dims()
                )));
            }
            data.extend(img.data().iter().map(|&v| v as f64));
        }
        Ok(Tensor::from_parts(vec![images.len(), h, w, c], data))
    }

    /// Split an NHWC batch back into images (values cast to `f32`).
    pub fn to_images(&self) -> Result<Vec<ImageTensor>> {
        let [n, h, w, c] = self.dims4()?;
        let per = h * w * c;
        (0..n)
            .map(|i| {
                let data = self.data[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| v as f32)
                    .collect();
                Ok(ImageTensor::new(h, w, c, data)?)
            })
            .collect()
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(Error::Shape(format!("expected NHWC, got {:?}", self.shape))),
        }
    }
}

/// `c = a·b + beta·c` for row-major operands, where `ta`/`tb` select the
/// transpose of a stored matrix. `a` is `m×k` after the optional transpose,
/// `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strided reads and
    // writes can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over an NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, h, w, cin] = input;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "kernel {k} does not fit {h}×{w} with padding {pad}"
            )));
        }
        Ok(Self {
            n,
            h,
            w,
            cin,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let mut row = 0;
    for b in 0..g.n {
        let img = &x[b * g.h * g.w * g.cin..];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (ky * g.k + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.n * g.h * g.w * g.cin];
    let mut row = 0;
    for b in 0..g.n {
        let img = &mut x[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (ky * g.k + kx) * g.cin;
                        for (d, s) in img[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// Convolution with weights laid out `[k, k, cin, cout]`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom, cout: usize) -> Vec<f64> {
    let rows = g.rows();
    let mut out = vec![0.0; rows * cout];
    if let Some(b) = bias {
        for r in out.chunks_exact_mut(cout) {
            r.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(rows, g.cin, cout, x, false, w, false, &mut out, beta);
    } else {
        let cols = im2col(x, g);
        gemm(rows, g.patch(), cout, &cols, false, w, false, &mut out, beta);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` and `dw` only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    cout: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let rows = g.rows();
    let patch = g.patch();
    let dw = need_dw.then(|| {
        let cols_owned;
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            cols_owned = im2col(x, g);
            &cols_owned
        };
        let mut dw = vec![0.0; patch * cout];
        gemm(patch, rows, cout, cols, true, dy, false, &mut dw, 0.0);
        dw
    });
    let mut db = vec![0.0; cout];
    for r in dy.chunks_exact(cout) {
        for (d, v) in db.iter_mut().zip(r) {
            *d += v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; rows * patch];
        gemm(rows, cout, patch, dy, false, w, true, &mut dcols, 0.0);
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    (dx, dw, db)
}

/// 2×2 stride-2 transposed convolution, weights `[cin, 2, 2, cout]`.
pub(crate) fn conv_t2_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, dims: [usize; 4], cout: usize) -> Vec<f64> {
    let [n, h, wd, cin] = dims;
    let rows = n * h * wd;
    let mut tmp = vec![0.0; rows * 4 * cout];
    gemm(rows, cin, 4 * cout, x, false, w, false, &mut tmp, 0.0);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for i in 0..h {
            for j in 0..wd {
                let src = &tmp[((b * h + i) * wd + j) * 4 * cout..][..4 * cout];
                for a in 0..2 {
                    for c in 0..2 {
                        let dst = ((b * oh + 2 * i + a) * ow + 2 * j + c) * cout;
                        let s = &src[(a * 2 + c) * cout..][..cout];
                        let d = &mut out[dst..dst + cout];
                        match bias {
                            Some(bb) => {
                                for ((o, v), bv) in d.iter_mut().zip(s).zip(bb) {
                                    *o = v + bv;
                                }
                            }
                            None => d.copy_from_slice(s),
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_t2_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dims: [usize; 4],
    cout: usize,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let [n, h, wd, cin] = dims;
    let rows = n * h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut gathered = vec![0.0; rows * 4 * cout];
    let mut db = vec![0.0; cout];
    for b in 0..n {
        for i in 0..h {
            for j in 0..wd {
                let dst = &mut gathered[((b * h + i) * wd + j) * 4 * cout..][..4 * cout];
                for a in 0..2 {
                    for c in 0..2 {
                        let src = ((b * oh + 2 * i + a) * ow + 2 * j + c) * cout;
                        let s = &dy[src..src + cout];
                        dst[(a * 2 + c) * cout..][..cout].copy_from_slice(s);
                        for (d, v) in db.iter_mut().zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; cin * 4 * cout];
    gemm(cin, rows, 4 * cout, x, true, &gathered, false, &mut dw, 0.0);
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; rows * cin];
        gemm(rows, 4 * cout, cin, &gathered, false, w, true, &mut dx, 0.0);
        dx
    });
    (dx, dw, db)
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visit every element of `out_shape` (row-major) together with the offset
/// of the corresponding element in a tensor whose per-axis strides are
/// `src_strides` (zero for broadcast axes).
pub(crate) fn for_each_strided(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    // Merge neighbouring axes that are jointly contiguous or jointly
    // broadcast so the inner loop runs as long as possible.
    let mut shape: Vec<usize> = Vec::with_capacity(out_shape.len());
    let mut strides: Vec<usize> = Vec::with_capacity(out_shape.len());
    for (&d, &st) in out_shape.iter().zip(src_strides) {
        if d == 1 {
            continue;
        }
        match (shape.last_mut(), strides.last_mut()) {
            (Some(pd), Some(ps)) if *ps == st * d => {
                *pd *= d;
                *ps = st;
            }
            _ => {
                shape.push(d);
                strides.push(st);
            }
        }
    }
    let (out_shape, src_strides) = (&shape[..], &strides[..]);
    if out_shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        for i in 0..inner {
            f(out + i, base + i * inner_stride);
        }
        out += inner;
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Permute axes: `out.shape[i] = x.shape[perm[i]]`.
pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let st = strides(&x.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let mut data = vec![0.0; x.data.len()];
    for_each_strided(&out_shape, &src_strides, |o, s| data[o] = x.data[s]);
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Strides of `b` when broadcast against `a` (same rank, dims equal or 1).
pub(crate) fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::Shape(format!("cannot broadcast {b:?} to {a:?}")));
    }
    let st = strides(b);
    Ok(b.iter()
        .zip(st)
        .zip(a)
        .map(|((&d, s), &ad)| if d == 1 && ad != 1 { 0 } else { s })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom, cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; g.rows() * cout];
        for b in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for co in 0..cout {
                        let mut s = 0.0;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x[((b * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci];
                                    let wv = w[((ky * g.k + kx) * g.cin + ci) * cout + co];
                                    s += xv * wv;
                                }
                            }
                        }
                        out[((b * g.oh + oy) * g.ow + ox) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 19) as f64 - 9.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (7, 1, 3)] {
            let g = ConvGeom::new([2, 6, 5, 3], k, stride, pad).unwrap();
            let x = seq(2 * 6 * 5 * 3, 0.1);
            let w = seq(k * k * 3 * 4, 0.05);
            let got = conv2d_forward(&x, &w, None, &g, 4);
            let want = naive_conv(&x, &w, &g, 4);
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12), "k{k} s{stride}");
        }
    }

    #[test]
    fn transposed_conv_places_each_tap() {
        // One input pixel, one channel: the 2×2 kernel is copied verbatim.
        let out = conv_t2_forward(&[2.0], &[1.0, 2.0, 3.0, 4.0], Some(&[0.5]), [1, 1, 1, 1], 1);
        assert_eq!(out, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], x.data()[4]);
        assert_eq!(permute(&p, &inverse_perm(&[2, 0, 1])), x);
    }

    #[test]
    fn broadcast_strides_zero_on_unit_axes() {
        assert_eq!(broadcast_strides(&[2, 3, 4], &[1, 3, 1]).unwrap(), vec![0, 1, 0]);
        assert!(broadcast_strides(&[2, 3], &[3, 3]).is_err());
    }
}
