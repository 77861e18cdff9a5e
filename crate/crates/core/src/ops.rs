//! Reference operators.
//!
//! Every kernel reads its inputs through the logical (interleaved) view and
//! produces an interleaved output, so results do not depend on the physical
//! layout of the inputs. The `*_raw` variants work on interleaved slices and
//! are what the graph executor calls.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Layout, LogicalTensor, Shape, TensorError};

#[derive(Debug, Error)]
pub enum OpError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output = ceil(input / stride); the odd padding pixel goes bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Relu6,
    Sigmoid,
    Identity,
}

impl ActKind {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActKind::Relu6 => x.clamp(0.0, 6.0),
            ActKind::Sigmoid => sigmoid(x),
            ActKind::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu6 => "relu6",
            ActKind::Sigmoid => "sigmoid",
            ActKind::Identity => "identity",
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub groups: usize,
    pub cin: usize,
    pub cout: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn standard(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride: (stride, stride),
            padding: Padding::Same,
            groups: 1,
            cin,
            cout,
            has_bias: true,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::standard(cin, cout, 1, 1)
    }

    pub fn depthwise(c: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            groups: c,
            ..Self::standard(c, c, k, stride)
        }
    }

    pub fn grouped(cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Self {
        ConvSpec {
            groups,
            ..Self::standard(cin, cout, k, stride)
        }
    }

    pub fn validate(&self) -> Result<(), OpError> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(OpError::Spec("kernel and stride must be positive".into()));
        }
        if self.groups == 0 || self.cin == 0 || self.cout == 0 {
            return Err(OpError::Spec("groups and channels must be positive".into()));
        }
        if !self.cin.is_multiple_of(self.groups) || !self.cout.is_multiple_of(self.groups) {
            return Err(OpError::Spec(format!(
                "groups {} must divide cin {} and cout {}",
                self.groups, self.cin, self.cout
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.groups == 1
    }

    /// `[cout, cin/groups, kh, kw]`
    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.cout,
            self.cin / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_dims().iter().product()
    }

    /// Output spatial size and the (top, left) padding.
    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry, OpError> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let axis = |input: usize, k: usize, s: usize| -> Result<(usize, usize), OpError> {
            match self.padding {
                Padding::Same => {
                    let out = input.div_ceil(s);
                    let total = ((out - 1) * s + k).saturating_sub(input);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if input < k {
                        return Err(OpError::Shape(format!(
                            "valid conv needs input {input} >= kernel {k}"
                        )));
                    }
                    Ok(((input - k) / s + 1, 0))
                }
            }
        };
        let (out_h, pad_top) = axis(h, kh, sh)?;
        let (out_w, pad_left) = axis(w, kw, sw)?;
        Ok(ConvGeometry {
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, OpError> {
        self.validate()?;
        if input.c != self.cin {
            return Err(OpError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.cin, input.c
            )));
        }
        let g = self.geometry(input.h, input.w)?;
        Ok(Shape {
            n: input.n,
            h: g.out_h,
            w: g.out_w,
            c: self.cout,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// One branch of a multi-output 1x1 convolution.
#[derive(Clone, Copy, Debug)]
pub struct PointwiseBranch<'a> {
    pub spec: &'a ConvSpec,
    pub weight: &'a [f32],
    pub bias: Option<&'a [f32]>,
}

fn check_conv_params(spec: &ConvSpec, w: &[f32], b: Option<&[f32]>) -> Result<(), OpError> {
    spec.validate()?;
    if w.len() != spec.weight_len() {
        return Err(OpError::Shape(format!(
            "weight has {} values, spec needs {:?}",
            w.len(),
            spec.weight_dims()
        )));
    }
    match (b, spec.has_bias) {
        (Some(b), true) if b.len() != spec.cout => Err(OpError::Shape(format!(
            "bias has {} values, expected {}",
            b.len(),
            spec.cout
        ))),
        (None, true) => Err(OpError::Shape("spec has bias but none given".into())),
        (Some(_), false) => Err(OpError::Shape("bias given but spec has none".into())),
        _ => Ok(()),
    }
}

fn interleaved(shape: Shape, values: Vec<f32>) -> Result<LogicalTensor, OpError> {
    Ok(LogicalTensor::from_interleaved(
        shape,
        Layout::Interleaved,
        &values,
    )?)
}

/// 2-D convolution (cross-correlation) with groups.
///
/// `w` is `[cout][cin/groups][kh][kw]`. Every output accumulates over
/// (ky, kx, input channel) in that order and adds the bias last; the
/// depthwise and pointwise fast paths keep the same order, so all paths
/// agree bit for bit.
pub fn conv2d(
    x: &LogicalTensor,
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<LogicalTensor, OpError> {
    let (out, shape) = conv2d_raw(&x.to_interleaved(), x.shape(), w, b, spec)?;
    interleaved(shape, out)
}

pub fn conv2d_raw(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Shape), OpError> {
    check_conv_params(spec, w, b)?;
    let os = spec.output_shape(xs)?;
    let out = if spec.is_pointwise() {
        let branch = PointwiseBranch {
            spec,
            weight: w,
            bias: b,
        };
        pointwise_multi(x, xs, &[branch]).pop().unwrap()
    } else if spec.is_depthwise() {
        depthwise(x, xs, w, b, spec, os)?
    } else {
        generic(x, xs, w, b, spec, os)?
    };
    Ok((out, os))
}

/// Direct convolution for any group count, used when no fast path applies.
pub fn conv2d_generic_raw(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Shape), OpError> {
    check_conv_params(spec, w, b)?;
    let os = spec.output_shape(xs)?;
    Ok((generic(x, xs, w, b, spec, os)?, os))
}

fn generic(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
    os: Shape,
) -> Result<Vec<f32>, OpError> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let geo = spec.geometry(xs.h, xs.w)?;
    let cin_g = spec.cin / spec.groups;
    let cout_g = spec.cout / spec.groups;
    let cout = spec.cout;

    // [ky][kx][oc][icg] so the inner loop is contiguous
    let mut wt = vec![0.0f32; w.len()];
    for oc in 0..cout {
        for icg in 0..cin_g {
            for ky in 0..kh {
                for kx in 0..kw {
                    wt[((ky * kw + kx) * cout + oc) * cin_g + icg] =
                        w[((oc * cin_g + icg) * kh + ky) * kw + kx];
                }
            }
        }
    }

    let mut out = vec![0.0f32; os.len()];
    let mut acc = vec![0.0f32; cout];
    for n in 0..xs.n {
        for oy in 0..os.h {
            for ox in 0..os.w {
                acc.fill(0.0);
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - geo.pad_top as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - geo.pad_left as isize;
                        if ix < 0 || ix >= xs.w as isize {
                            continue;
                        }
                        let base = ((n * xs.h + iy as usize) * xs.w + ix as usize) * xs.c;
                        let tap = &wt[(ky * kw + kx) * cout * cin_g..][..cout * cin_g];
                        for (oc, a) in acc.iter_mut().enumerate() {
                            let g = oc / cout_g;
                            let xin = &x[base + g * cin_g..base + (g + 1) * cin_g];
                            let wrow = &tap[oc * cin_g..(oc + 1) * cin_g];
                            for (xv, wv) in xin.iter().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
                let o = ((n * os.h + oy) * os.w + ox) * cout;
                for oc in 0..cout {
                    out[o + oc] = match b {
                        Some(b) => acc[oc] + b[oc],
                        None => acc[oc],
                    };
                }
            }
        }
    }
    Ok(out)
}

fn depthwise(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
    os: Shape,
) -> Result<Vec<f32>, OpError> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let geo = spec.geometry(xs.h, xs.w)?;
    let c = xs.c;
    // [ky][kx][c]
    let mut wt = vec![0.0f32; w.len()];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                wt[(ky * kw + kx) * c + ch] = w[(ch * kh + ky) * kw + kx];
            }
        }
    }
    let mut out = vec![0.0f32; os.len()];
    for n in 0..xs.n {
        for oy in 0..os.h {
            for ox in 0..os.w {
                let o = ((n * os.h + oy) * os.w + ox) * c;
                let acc = &mut out[o..o + c];
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - geo.pad_top as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - geo.pad_left as isize;
                        if ix < 0 || ix >= xs.w as isize {
                            continue;
                        }
                        let base = ((n * xs.h + iy as usize) * xs.w + ix as usize) * c;
                        let tap = &wt[(ky * kw + kx) * c..][..c];
                        for ((a, xv), wv) in acc.iter_mut().zip(&x[base..base + c]).zip(tap) {
                            *a += xv * wv;
                        }
                    }
                }
                if let Some(b) = b {
                    for (a, bv) in acc.iter_mut().zip(b) {
                        *a += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Evaluate several 1x1 convolutions over the same input in one pass.
///
/// Each input pixel is read once and every branch output is written from it,
/// the way a multiple-render-target draw produces several textures at once.
/// Per-element arithmetic is identical to [`conv2d`] on each branch.
pub fn conv1x1_multi(
    x: &LogicalTensor,
    branches: &[PointwiseBranch<'_>],
) -> Result<Vec<LogicalTensor>, OpError> {
    let outs = conv1x1_multi_raw(&x.to_interleaved(), x.shape(), branches)?;
    outs.into_iter().map(|(v, s)| interleaved(s, v)).collect()
}

pub fn conv1x1_multi_raw(
    x: &[f32],
    xs: Shape,
    branches: &[PointwiseBranch<'_>],
) -> Result<Vec<(Vec<f32>, Shape)>, OpError> {
    let mut shapes = Vec::with_capacity(branches.len());
    for br in branches {
        if !br.spec.is_pointwise() {
            return Err(OpError::Spec(
                "multi-output branch must be a 1x1 stride-1 dense conv".into(),
            ));
        }
        check_conv_params(br.spec, br.weight, br.bias)?;
        shapes.push(br.spec.output_shape(xs)?);
    }
    let outs = pointwise_multi(x, xs, branches);
    Ok(outs.into_iter().zip(shapes).collect())
}

fn pointwise_multi(x: &[f32], xs: Shape, branches: &[PointwiseBranch<'_>]) -> Vec<Vec<f32>> {
    let pixels = xs.n * xs.h * xs.w;
    let cin = xs.c;
    let mut outs: Vec<Vec<f32>> = branches
        .iter()
        .map(|br| vec![0.0f32; pixels * br.spec.cout])
        .collect();
    for p in 0..pixels {
        let xin = &x[p * cin..(p + 1) * cin];
        for (br, out) in branches.iter().zip(outs.iter_mut()) {
            let cout = br.spec.cout;
            let dst = &mut out[p * cout..(p + 1) * cout];
            for (oc, d) in dst.iter_mut().enumerate() {
                let wrow = &br.weight[oc * cin..(oc + 1) * cin];
                let mut acc = 0.0f32;
                for (xv, wv) in xin.iter().zip(wrow) {
                    acc += xv * wv;
                }
                *d = match br.bias {
                    Some(b) => acc + b[oc],
                    None => acc,
                };
            }
        }
    }
    outs
}

/// Bilinear upsampling by an integer factor with half-pixel centers and edge clamping.
pub fn bilinear_upsample(x: &LogicalTensor, factor: usize) -> Result<LogicalTensor, OpError> {
    let (out, shape) = bilinear_upsample_raw(&x.to_interleaved(), x.shape(), factor)?;
    interleaved(shape, out)
}

/// Source coordinate, lower index, upper index and upper weight for one output coordinate.
#[inline]
pub fn bilinear_tap(dst: usize, factor: usize, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f32 + 0.5) / factor as f32 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    let frac = src - lo as f32;
    (lo, hi, frac)
}

pub fn upsample_shape(xs: Shape, factor: usize) -> Result<Shape, OpError> {
    if factor == 0 {
        return Err(OpError::Spec("upsample factor must be >= 1".into()));
    }
    let h = xs.h.checked_mul(factor);
    let w = xs.w.checked_mul(factor);
    match (h, w) {
        (Some(h), Some(w)) => Ok(xs.with_spatial(h, w)),
        _ => Err(OpError::Tensor(TensorError::Allocation(xs))),
    }
}

pub fn bilinear_upsample_raw(
    x: &[f32],
    xs: Shape,
    factor: usize,
) -> Result<(Vec<f32>, Shape), OpError> {
    let os = upsample_shape(xs, factor)?;
    let c = xs.c;
    let xtaps: Vec<_> = (0..os.w).map(|ox| bilinear_tap(ox, factor, xs.w)).collect();
    let mut out = vec![0.0f32; os.len()];
    for n in 0..xs.n {
        for oy in 0..os.h {
            let (y0, y1, ly) = bilinear_tap(oy, factor, xs.h);
            let row0 = (n * xs.h + y0) * xs.w;
            let row1 = (n * xs.h + y1) * xs.w;
            for (ox, &(x0, x1, lx)) in xtaps.iter().enumerate() {
                let o = ((n * os.h + oy) * os.w + ox) * c;
                for ch in 0..c {
                    let a = x[(row0 + x0) * c + ch];
                    let b = x[(row0 + x1) * c + ch];
                    let cc = x[(row1 + x0) * c + ch];
                    let d = x[(row1 + x1) * c + ch];
                    let top = (1.0 - lx) * a + lx * b;
                    let bot = (1.0 - lx) * cc + lx * d;
                    out[o + ch] = (1.0 - ly) * top + ly * bot;
                }
            }
        }
    }
    Ok((out, os))
}

/// Per-channel mean over the spatial dimensions; output is (n,1,1,c).
pub fn global_avg_pool(x: &LogicalTensor) -> Result<LogicalTensor, OpError> {
    let (out, shape) = global_avg_pool_raw(&x.to_interleaved(), x.shape());
    interleaved(shape, out)
}

pub fn global_avg_pool_raw(x: &[f32], xs: Shape) -> (Vec<f32>, Shape) {
    let hw = xs.h * xs.w;
    let mut out = vec![0.0f32; xs.n * xs.c];
    for n in 0..xs.n {
        let acc = &mut out[n * xs.c..(n + 1) * xs.c];
        for p in 0..hw {
            let base = (n * hw + p) * xs.c;
            for (a, v) in acc.iter_mut().zip(&x[base..base + xs.c]) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= hw as f32;
        }
    }
    (out, xs.with_spatial(1, 1))
}

/// Weights of a squeeze-and-excitation block.
///
/// `w1` is `[c/reduction][c]`, `w2` is `[c][c/reduction]`.
#[derive(Clone, Copy, Debug)]
pub struct SeWeights<'a> {
    pub w1: &'a [f32],
    pub b1: &'a [f32],
    pub w2: &'a [f32],
    pub b2: &'a [f32],
}

pub fn se_reduced_channels(c: usize, reduction: usize) -> Result<usize, OpError> {
    if reduction == 0 || !c.is_multiple_of(reduction) {
        return Err(OpError::Spec(format!(
            "reduction {reduction} must divide channel count {c}"
        )));
    }
    Ok(c / reduction)
}

/// `x * sigmoid(w2 . relu6(w1 . gap(x) + b1) + b2)`, gate broadcast over h and w.
pub fn squeeze_excite(
    x: &LogicalTensor,
    weights: SeWeights<'_>,
    reduction: usize,
) -> Result<LogicalTensor, OpError> {
    let (out, shape) = squeeze_excite_raw(&x.to_interleaved(), x.shape(), weights, reduction)?;
    interleaved(shape, out)
}

pub fn squeeze_excite_raw(
    x: &[f32],
    xs: Shape,
    wts: SeWeights<'_>,
    reduction: usize,
) -> Result<(Vec<f32>, Shape), OpError> {
    let c = xs.c;
    let r = se_reduced_channels(c, reduction)?;
    if wts.w1.len() != r * c || wts.b1.len() != r || wts.w2.len() != c * r || wts.b2.len() != c {
        return Err(OpError::Shape(format!(
            "squeeze-excite weights do not match c={c}, reduced={r}"
        )));
    }
    let (pooled, _) = global_avg_pool_raw(x, xs);
    let hw = xs.h * xs.w;
    let mut out = vec![0.0f32; x.len()];
    let mut hidden = vec![0.0f32; r];
    for n in 0..xs.n {
        let p = &pooled[n * c..(n + 1) * c];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (pv, wv) in p.iter().zip(&wts.w1[j * c..(j + 1) * c]) {
                acc += pv * wv;
            }
            *hj = ActKind::Relu6.apply(acc + wts.b1[j]);
        }
        let gate: Vec<f32> = (0..c)
            .map(|i| {
                let mut acc = 0.0f32;
                for (hv, wv) in hidden.iter().zip(&wts.w2[i * r..(i + 1) * r]) {
                    acc += hv * wv;
                }
                sigmoid(acc + wts.b2[i])
            })
            .collect();
        for px in 0..hw {
            let base = (n * hw + px) * c;
            for ch in 0..c {
                out[base + ch] = x[base + ch] * gate[ch];
            }
        }
    }
    Ok((out, xs))
}

pub fn add(a: &LogicalTensor, b: &LogicalTensor) -> Result<LogicalTensor, OpError> {
    if a.shape() != b.shape() {
        return Err(OpError::Shape(format!(
            "add of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let out = add_raw(&a.to_interleaved(), &b.to_interleaved());
    interleaved(a.shape(), out)
}

pub fn add_raw(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn activation(x: &LogicalTensor, kind: ActKind) -> Result<LogicalTensor, OpError> {
    let mut v = x.to_interleaved();
    activation_in_place(&mut v, kind);
    interleaved(x.shape(), v)
}

pub fn activation_in_place(v: &mut [f32], kind: ActKind) {
    if kind != ActKind::Identity {
        v.iter_mut().for_each(|x| *x = kind.apply(*x));
    }
}
