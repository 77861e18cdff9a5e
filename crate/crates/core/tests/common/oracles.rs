//! Direct f64 evaluations of each operator's definition, and seeded sweeps
//! that report the largest deviation of the engine from them.

use edgeseg::ops::{self, ActKind, ConvSpec, Padding, SeWeights};
use edgeseg::tensor::Shape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 200;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn rand_shape(rng: &mut ChaCha8Rng, c: usize) -> Shape {
    Shape::new(
        rng.gen_range(1..=2),
        rng.gen_range(1..=9),
        rng.gen_range(1..=9),
        c,
    )
    .unwrap()
}

/// Largest absolute difference; infinite on a length mismatch.
pub fn max_err(got: &[f32], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}

/// (out, pad_before) along one axis.
fn axis(len: usize, k: usize, s: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((len - k) / s + 1, 0),
        Padding::Same => {
            let out = len.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(len);
            (out, total / 2)
        }
    }
}

pub fn conv_oracle(x: &[f32], xs: Shape, w: &[f32], b: &[f32], spec: &ConvSpec) -> Vec<f64> {
    let (kh, kw) = spec.kernel;
    let (oh, pt) = axis(xs.h, kh, spec.stride.0, spec.padding);
    let (ow, pl) = axis(xs.w, kw, spec.stride.1, spec.padding);
    let cig = spec.cin / spec.groups;
    let cog = spec.cout / spec.groups;
    let mut out = Vec::new();
    for n in 0..xs.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..spec.cout {
                    let g = oc / cog;
                    let mut acc = b[oc] as f64;
                    for ic in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride.0 + ky) as isize - pt as isize;
                                let ix = (ox * spec.stride.1 + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                let c = g * cig + ic;
                                let xv =
                                    x[((n * xs.h + iy as usize) * xs.w + ix as usize) * xs.c + c];
                                let wv = w[((oc * cig + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn upsample_oracle(x: &[f32], xs: Shape, f: usize) -> Vec<f64> {
    // half-pixel centers, clamped at the border
    let coord = |o: usize, len: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::new();
    for n in 0..xs.n {
        for oy in 0..xs.h * f {
            let (y0, y1, fy) = coord(oy, xs.h);
            for ox in 0..xs.w * f {
                let (x0, x1, fx) = coord(ox, xs.w);
                for c in 0..xs.c {
                    let at =
                        |y: usize, xx: usize| x[((n * xs.h + y) * xs.w + xx) * xs.c + c] as f64;
                    out.push(
                        at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                            + at(y0, x1) * (1.0 - fy) * fx
                            + at(y1, x0) * fy * (1.0 - fx)
                            + at(y1, x1) * fy * fx,
                    );
                }
            }
        }
    }
    out
}

pub fn gap_oracle(x: &[f32], xs: Shape) -> Vec<f64> {
    let mut out = vec![0.0; xs.n * xs.c];
    for n in 0..xs.n {
        for p in 0..xs.h * xs.w {
            for c in 0..xs.c {
                out[n * xs.c + c] += x[(n * xs.h * xs.w + p) * xs.c + c] as f64;
            }
        }
    }
    out.iter().map(|v| v / (xs.h * xs.w) as f64).collect()
}

pub fn se_oracle(x: &[f32], xs: Shape, w: &SeWeights, reduction: usize) -> Vec<f64> {
    let c = xs.c;
    let r = c / reduction;
    let pooled = gap_oracle(x, xs);
    let mut want = Vec::new();
    for n in 0..xs.n {
        let p = &pooled[n * c..(n + 1) * c];
        let hidden: Vec<f64> = (0..r)
            .map(|j| {
                (w.b1[j] as f64 + (0..c).map(|i| w.w1[j * c + i] as f64 * p[i]).sum::<f64>())
                    .clamp(0.0, 6.0)
            })
            .collect();
        let gate: Vec<f64> = (0..c)
            .map(|i| {
                let z = w.b2[i] as f64
                    + (0..r)
                        .map(|j| w.w2[i * r + j] as f64 * hidden[j])
                        .sum::<f64>();
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        for px in 0..xs.h * xs.w {
            for ch in 0..c {
                want.push(x[(n * xs.h * xs.w + px) * c + ch] as f64 * gate[ch]);
            }
        }
    }
    want
}

pub fn act_oracle(v: f32, kind: ActKind) -> f64 {
    let v = v as f64;
    match kind {
        ActKind::Relu6 => v.clamp(0.0, 6.0),
        ActKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        ActKind::Identity => v,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ConvFamily {
    Standard,
    Depthwise,
    Group,
}

fn conv_spec(rng: &mut ChaCha8Rng, family: ConvFamily) -> ConvSpec {
    match family {
        ConvFamily::Standard => {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            ConvSpec::standard(
                rng.gen_range(1..=5),
                rng.gen_range(1..=6),
                k,
                rng.gen_range(1..=3),
            )
        }
        ConvFamily::Depthwise => {
            let k = [3, 5][rng.gen_range(0..2)];
            ConvSpec::depthwise(rng.gen_range(1..=8), k, rng.gen_range(1..=2))
        }
        ConvFamily::Group => {
            let g = rng.gen_range(1..=4);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            ConvSpec::grouped(
                g * rng.gen_range(1..=3),
                g * rng.gen_range(1..=3),
                k,
                rng.gen_range(1..=2),
                g,
            )
        }
    }
}

/// `cases` random convolutions of one family, both paddings, weights scaled by 1/fan-in.
pub fn conv_sweep(seed: u64, family: ConvFamily, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let mut spec = conv_spec(&mut rng, family);
        spec.padding = if rng.gen_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let xs = rand_shape(&mut rng, spec.cin);
        if spec.padding == Padding::Valid && (xs.h < spec.kernel.0 || xs.w < spec.kernel.1) {
            continue;
        }
        let fan = spec.weight_len() / spec.cout;
        let x = rand_vec(&mut rng, xs.len(), 1.0);
        let w = rand_vec(&mut rng, spec.weight_len(), 1.0 / fan as f32);
        let b = rand_vec(&mut rng, spec.cout, 0.5);
        let (got, _) = ops::conv2d_raw(&x, xs, &w, Some(&b), &spec).unwrap();
        worst = worst.max(max_err(&got, &conv_oracle(&x, xs, &w, &b, &spec)));
        done += 1;
    }
    worst
}

pub fn upsample_sweep(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = rng.gen_range(1..=4);
        let xs = rand_shape(&mut rng, c);
        let f = rng.gen_range(1..=4);
        let x = rand_vec(&mut rng, xs.len(), 2.0);
        let (got, _) = ops::bilinear_upsample_raw(&x, xs, f).unwrap();
        worst = worst.max(max_err(&got, &upsample_oracle(&x, xs, f)));
    }
    worst
}

pub fn gap_sweep(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = rng.gen_range(1..=6);
        let xs = rand_shape(&mut rng, c);
        let x = rand_vec(&mut rng, xs.len(), 3.0);
        let (got, _) = ops::global_avg_pool_raw(&x, xs);
        worst = worst.max(max_err(&got, &gap_oracle(&x, xs)));
    }
    worst
}

pub fn se_sweep(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let red = rng.gen_range(1..=4);
        let c = red * rng.gen_range(1..=4);
        let r = c / red;
        let xs = rand_shape(&mut rng, c);
        let x = rand_vec(&mut rng, xs.len(), 2.0);
        let (w1, b1) = (rand_vec(&mut rng, r * c, 1.0), rand_vec(&mut rng, r, 1.0));
        let (w2, b2) = (rand_vec(&mut rng, c * r, 1.0), rand_vec(&mut rng, c, 1.0));
        let wts = SeWeights {
            w1: &w1,
            b1: &b1,
            w2: &w2,
            b2: &b2,
        };
        let (got, _) = ops::squeeze_excite_raw(&x, xs, wts, red).unwrap();
        worst = worst.max(max_err(&got, &se_oracle(&x, xs, &wts, red)));
    }
    worst
}

pub fn add_sweep(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = rng.gen_range(1..=5);
        let xs = rand_shape(&mut rng, c);
        let a = rand_vec(&mut rng, xs.len(), 4.0);
        let b = rand_vec(&mut rng, xs.len(), 4.0);
        let want: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(&p, &q)| p as f64 + q as f64)
            .collect();
        worst = worst.max(max_err(&ops::add_raw(&a, &b), &want));
    }
    worst
}

pub fn activation_sweep(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(1..64);
        let x = rand_vec(&mut rng, n, 10.0);
        for kind in [ActKind::Relu6, ActKind::Sigmoid, ActKind::Identity] {
            let mut got = x.clone();
            ops::activation_in_place(&mut got, kind);
            let want: Vec<f64> = x.iter().map(|&v| act_oracle(v, kind)).collect();
            worst = worst.max(max_err(&got, &want));
        }
    }
    worst
}
