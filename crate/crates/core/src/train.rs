//! Gradient descent on small graphs with the soft Jaccard loss.
//!
//! Backpropagation is implemented for pointwise convolutions (with their
//! fused activation), activations, bilinear upsampling and addition. Any
//! other operator makes the graph untrainable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{topo_schedule, ConvOp, Graph, GraphError, OpKind, TensorId};
use crate::metrics::{self, jaccard_grad, jaccard_loss, Mask, MetricError};
use crate::ops::{self, ActKind, ConvSpec, OpError};
use crate::tensor::Shape;
use crate::zoo::{self, ZooError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error("loss became non-finite at step {0}")]
    NonFinite(usize),
}

/// One training example: an interleaved input and its target mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Vec<f32>,
    pub target: Mask,
}

/// Reject graphs containing operators without a backward pass here.
pub fn check_trainable(g: &Graph) -> Result<(), TrainError> {
    if g.inputs().len() != 1 || g.outputs().len() != 1 {
        return Err(TrainError::Config(format!(
            "trainable graphs need one input and one output, got {} and {}",
            g.inputs().len(),
            g.outputs().len()
        )));
    }
    for n in g.nodes() {
        let ok = match &n.op {
            OpKind::Conv(c) => c.spec.is_pointwise(),
            OpKind::Activation(_) | OpKind::Upsample { .. } | OpKind::Add => true,
            _ => false,
        };
        if !ok {
            return Err(TrainError::Config(format!(
                "node {} ({}) is not supported by the trainer",
                n.name,
                n.op.name()
            )));
        }
    }
    let out = g.shape(g.outputs()[0])?;
    if out.n != 1 || out.c != 1 {
        return Err(TrainError::Config(format!(
            "output must be a single-channel mask, got {out}"
        )));
    }
    Ok(())
}

fn weight<'a>(g: &'a Graph, name: &str) -> Result<&'a [f32], TrainError> {
    g.weights
        .get(name)
        .map(|t| t.data.as_slice())
        .ok_or_else(|| TrainError::Config(format!("weight {name} is not materialised")))
}

fn act_grad(kind: ActKind, pre: f32, post: f32) -> f64 {
    match kind {
        ActKind::Identity => 1.0,
        ActKind::Relu6 => (pre > 0.0 && pre < 6.0) as u8 as f64,
        ActKind::Sigmoid => (post as f64) * (1.0 - post as f64),
    }
}

struct Trace {
    values: Vec<Option<Vec<f32>>>,
    /// Conv pre-activations by node index.
    pre: BTreeMap<usize, Vec<f32>>,
}

fn forward(g: &Graph, input: &[f32]) -> Result<Trace, TrainError> {
    let mut values: Vec<Option<Vec<f32>>> = vec![None; g.tensors().len()];
    let in_id = g.inputs()[0];
    let in_shape = g.shape(in_id)?;
    if input.len() != in_shape.len() {
        return Err(TrainError::Config(format!(
            "input has {} values, graph expects {in_shape}",
            input.len()
        )));
    }
    values[in_id.0] = Some(input.to_vec());
    let mut pre = BTreeMap::new();
    for id in topo_schedule(g)? {
        let node = g.node(id).expect("scheduled");
        let get = |t: TensorId| values[t.0].as_deref().expect("inputs computed first");
        let xs = g.shape(node.inputs[0])?;
        let out = match &node.op {
            OpKind::Conv(c) => {
                let bias = c.bias.as_deref().map(|b| weight(g, b)).transpose()?;
                let (z, _) = ops::conv2d_raw(
                    get(node.inputs[0]),
                    xs,
                    weight(g, &c.weight)?,
                    bias,
                    &c.spec,
                )?;
                let mut y = z.clone();
                ops::activation_in_place(&mut y, c.act);
                pre.insert(id.0, z);
                y
            }
            OpKind::Activation(kind) => {
                let mut y = get(node.inputs[0]).to_vec();
                ops::activation_in_place(&mut y, *kind);
                y
            }
            OpKind::Upsample { factor } => {
                ops::bilinear_upsample_raw(get(node.inputs[0]), xs, *factor)?.0
            }
            OpKind::Add => ops::add_raw(get(node.inputs[0]), get(node.inputs[1])),
            other => {
                return Err(TrainError::Config(format!(
                    "{} has no backward pass",
                    other.name()
                )))
            }
        };
        values[node.outputs[0].0] = Some(out);
    }
    Ok(Trace { values, pre })
}

/// Graph output for one input.
pub fn predict(g: &Graph, input: &[f32]) -> Result<Vec<f32>, TrainError> {
    check_trainable(g)?;
    let mut trace = forward(g, input)?;
    Ok(trace.values[g.outputs()[0].0]
        .take()
        .expect("output computed"))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], t: TensorId, g: Vec<f64>) {
    match &mut grads[t.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot => *slot = Some(g),
    }
}

fn upsample_backward(dy: &[f64], xs: Shape, factor: usize) -> Vec<f64> {
    let (oh, ow, c) = (xs.h * factor, xs.w * factor, xs.c);
    let mut dx = vec![0.0f64; xs.len()];
    for n in 0..xs.n {
        for oy in 0..oh {
            let (y0, y1, ly) = ops::bilinear_tap(oy, factor, xs.h);
            let ly = ly as f64;
            for ox in 0..ow {
                let (x0, x1, lx) = ops::bilinear_tap(ox, factor, xs.w);
                let lx = lx as f64;
                let o = ((n * oh + oy) * ow + ox) * c;
                let corners = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x1, (1.0 - ly) * lx),
                    (y1, x0, ly * (1.0 - lx)),
                    (y1, x1, ly * lx),
                ];
                for (yy, xx, wgt) in corners {
                    let i = ((n * xs.h + yy) * xs.w + xx) * c;
                    for ch in 0..c {
                        dx[i + ch] += wgt * dy[o + ch];
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward(
    c: &ConvOp,
    x: &[f32],
    pre: &[f32],
    post: &[f32],
    dy: &[f64],
    w: &[f32],
    wgrads: &mut BTreeMap<String, Vec<f64>>,
) -> Vec<f64> {
    let ConvSpec { cin, cout, .. } = c.spec;
    let pixels = x.len() / cin;
    let dz: Vec<f64> = dy
        .iter()
        .zip(pre.iter().zip(post))
        .map(|(&d, (&z, &y))| d * act_grad(c.act, z, y))
        .collect();
    let mut dw = vec![0.0f64; cout * cin];
    let mut db = vec![0.0f64; cout];
    let mut dx = vec![0.0f64; x.len()];
    for p in 0..pixels {
        let xr = &x[p * cin..(p + 1) * cin];
        let dzr = &dz[p * cout..(p + 1) * cout];
        let dxr = &mut dx[p * cin..(p + 1) * cin];
        for oc in 0..cout {
            let d = dzr[oc];
            if d == 0.0 {
                continue;
            }
            db[oc] += d;
            for ic in 0..cin {
                dw[oc * cin + ic] += d * xr[ic] as f64;
                dxr[ic] += d * w[oc * cin + ic] as f64;
            }
        }
    }
    add_into(wgrads, &c.weight, dw);
    if let Some(b) = &c.bias {
        add_into(wgrads, b, db);
    }
    dx
}

fn add_into(map: &mut BTreeMap<String, Vec<f64>>, name: &str, g: Vec<f64>) {
    match map.get_mut(name) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => {
            map.insert(name.to_string(), g);
        }
    }
}

/// Loss of one sample and the gradient of every weight.
pub fn loss_and_grads(
    g: &Graph,
    sample: &Sample,
) -> Result<(f64, BTreeMap<String, Vec<f64>>), TrainError> {
    check_trainable(g)?;
    let trace = forward(g, &sample.input)?;
    let out_id = g.outputs()[0];
    let pred: Vec<f64> = trace.values[out_id.0]
        .as_ref()
        .expect("output")
        .iter()
        .map(|&v| v as f64)
        .collect();
    let target: Vec<f64> = sample.target.values().iter().map(|&v| v as f64).collect();
    if pred.len() != target.len() {
        return Err(TrainError::Config(format!(
            "output has {} values, target mask has {}",
            pred.len(),
            target.len()
        )));
    }
    let loss = jaccard_loss(&pred, &target);

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; g.tensors().len()];
    grads[out_id.0] = Some(jaccard_grad(&pred, &target));
    let mut wgrads = BTreeMap::new();
    for id in topo_schedule(g)?.into_iter().rev() {
        let node = g.node(id).expect("scheduled");
        let Some(dy) = grads[node.outputs[0].0].take() else {
            continue;
        };
        let x_id = node.inputs[0];
        let x = trace.values[x_id.0].as_deref().expect("forward value");
        match &node.op {
            OpKind::Conv(c) => {
                let post = trace.values[node.outputs[0].0]
                    .as_deref()
                    .expect("forward value");
                let dx = conv_backward(
                    c,
                    x,
                    &trace.pre[&id.0],
                    post,
                    &dy,
                    weight(g, &c.weight)?,
                    &mut wgrads,
                );
                accumulate(&mut grads, x_id, dx);
            }
            OpKind::Activation(kind) => {
                let post = trace.values[node.outputs[0].0]
                    .as_deref()
                    .expect("forward value");
                let dx = dy
                    .iter()
                    .zip(x.iter().zip(post))
                    .map(|(&d, (&z, &y))| d * act_grad(*kind, z, y))
                    .collect();
                accumulate(&mut grads, x_id, dx);
            }
            OpKind::Upsample { factor } => {
                accumulate(
                    &mut grads,
                    x_id,
                    upsample_backward(&dy, g.shape(x_id)?, *factor),
                );
            }
            OpKind::Add => {
                accumulate(&mut grads, node.inputs[1], dy.clone());
                accumulate(&mut grads, x_id, dy);
            }
            _ => unreachable!("checked by check_trainable"),
        }
    }
    Ok((loss, wgrads))
}

/// One full-batch gradient step on the mean loss; returns that loss.
pub fn sgd_step(g: &mut Graph, batch: &[Sample], lr: f64) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in batch {
        let (l, gr) = loss_and_grads(g, s)?;
        total += l;
        for (name, v) in gr {
            add_into(&mut sum, &name, v);
        }
    }
    let scale = lr / batch.len() as f64;
    for (name, grad) in sum {
        let w = g
            .weights
            .values_mut(&name)
            .expect("gradient names come from the store");
        for (wi, gi) in w.iter_mut().zip(grad) {
            *wi = (*wi as f64 - scale * gi) as f32;
        }
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    /// Side of the square masks.
    pub size: usize,
    /// The network sees the image downscaled by this factor and upsamples back.
    pub downscale: usize,
    pub hidden: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub noise: f32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            size: 32,
            downscale: 2,
            hidden: 8,
            train_samples: 16,
            test_samples: 16,
            steps: 200,
            lr: 2.0,
            noise: 0.15,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.size == 0 || self.downscale == 0 || !self.size.is_multiple_of(self.downscale) {
            return Err(TrainError::Config(format!(
                "size {} must be a positive multiple of downscale {}",
                self.size, self.downscale
            )));
        }
        if self.hidden == 0 || self.train_samples == 0 || self.test_samples == 0 {
            return Err(TrainError::Config(
                "hidden width and sample counts must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Noisy images of one bright disk on a dark background, with the disk as target.
pub fn disk_dataset(cfg: &ToyConfig, count: usize, stream: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let s = cfg.size;
    let d = cfg.downscale;
    let half = s as f32 / 2.0;
    (0..count)
        .map(|_| {
            let r: f32 = rng.gen_range(0.18..0.34) * s as f32;
            let cy = half + rng.gen_range(-0.12..0.12) * s as f32;
            let cx = half + rng.gen_range(-0.12..0.12) * s as f32;
            let inside = |y: usize, x: usize| {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            };
            let target = Mask::from_fn(s, s, inside);
            let image: Vec<f32> = (0..s * s)
                .map(|i| {
                    let base = if inside(i / s, i % s) { 0.7 } else { 0.3 };
                    base + rng.gen_range(-cfg.noise..=cfg.noise)
                })
                .collect();
            let sd = s / d;
            let input = (0..sd * sd)
                .map(|i| {
                    let (y, x) = (i / sd, i % sd);
                    let mut acc = 0.0;
                    for yy in 0..d {
                        for xx in 0..d {
                            acc += image[(y * d + yy) * s + x * d + xx];
                        }
                    }
                    acc / (d * d) as f32
                })
                .collect();
            Sample { input, target }
        })
        .collect()
}

/// Two pointwise branches (hidden MLP and linear skip), summed, upsampled and squashed.
pub fn toy_graph(cfg: &ToyConfig) -> Result<Graph, TrainError> {
    cfg.validate()?;
    let sd = cfg.size / cfg.downscale;
    let mut g = Graph::new();
    let x = g.add_input(
        "x",
        Shape::new(1, sd, sd, 1).map_err(|e| TrainError::Config(e.to_string()))?,
    )?;
    let h = g.conv(
        "toy.hidden",
        x,
        ConvSpec::pointwise(1, cfg.hidden),
        ActKind::Relu6,
    )?;
    let a = g.conv(
        "toy.logits",
        h,
        ConvSpec::pointwise(cfg.hidden, 1),
        ActKind::Identity,
    )?;
    let b = g.conv("toy.skip", x, ConvSpec::pointwise(1, 1), ActKind::Identity)?;
    let mut t = g.add("toy.sum", a, b)?;
    if cfg.downscale > 1 {
        t = g.upsample("toy.up", t, cfg.downscale)?;
    }
    let y = g.activation("toy.mask", t, ActKind::Sigmoid)?;
    g.mark_output(y)?;
    g.weights = zoo::init_weights(&g, cfg.seed)?;
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct ToyReport {
    pub losses: Vec<f64>,
    pub initial_test_miou: f64,
    pub test_miou: f64,
    pub graph: Graph,
}

pub fn mean_iou(g: &Graph, samples: &[Sample]) -> Result<f64, TrainError> {
    let pairs = samples
        .iter()
        .map(|s| {
            let p = predict(g, &s.input)?;
            Ok((
                Mask::new(s.target.height(), s.target.width(), p)?,
                s.target.clone(),
            ))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(metrics::miou(&pairs, 0.5)?)
}

/// Train the toy network on synthetic disks and score it on a held-out set.
pub fn train_toy(cfg: &ToyConfig) -> Result<ToyReport, TrainError> {
    let mut g = toy_graph(cfg)?;
    let train = disk_dataset(cfg, cfg.train_samples, 1);
    let test = disk_dataset(cfg, cfg.test_samples, 2);
    let initial_test_miou = mean_iou(&g, &test)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let l = sgd_step(&mut g, &train, cfg.lr)?;
        if !l.is_finite() {
            return Err(TrainError::NonFinite(step));
        }
        losses.push(l);
    }
    Ok(ToyReport {
        losses,
        initial_test_miou,
        test_miou: mean_iou(&g, &test)?,
        graph: g,
    })
}
