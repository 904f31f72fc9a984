#![allow(dead_code)]

use std::collections::BTreeMap;

use l2caf_core::{HeadKind, LayerSpec, NetworkModel, NodeId, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub mod oracles;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values in `±[0.05, 1]`, keeping clear of ReLU and |x| kinks.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-2)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Largest relative error between the tape gradient of `build` and central
/// differences, over every element of every input.
pub fn fd_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &ids).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = build(&mut tape, &ids).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.wrt(ids[k]);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut p = plus[k].data().to_vec();
            let mut m = minus[k].data().to_vec();
            p[i] += FD_STEP;
            m[i] -= FD_STEP;
            plus[k] = Tensor::new(x.shape().to_vec(), p).unwrap();
            minus[k] = Tensor::new(x.shape().to_vec(), m).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut p = x.data().to_vec();
        let mut m = x.data().to_vec();
        p[i] += FD_STEP;
        m[i] -= FD_STEP;
        let fp = f(&Tensor::new(x.shape().to_vec(), p).unwrap());
        let fm = f(&Tensor::new(x.shape().to_vec(), m).unwrap());
        g.push((fp - fm) / (2.0 * FD_STEP));
    }
    Tensor::new(x.shape().to_vec(), g).unwrap()
}

pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Reduces any node to a scalar through a fixed random projection, so every
/// output element contributes to the checked gradient.
pub fn project(tape: &mut Tape, node: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(node).shape().to_vec();
    let w = uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0x9e37));
    let w = tape.constant(w);
    tape.dot(node, w)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    c / (va * vb).sqrt()
}

/// A 5x5x2 two-conv network with random weights and biases.
pub fn small_cnn(seed: u64, head: HeadKind, normalize: bool) -> NetworkModel {
    let mut layers = vec![
        LayerSpec::conv(3, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::conv(3, 4, 1, 1),
        LayerSpec::Relu,
        LayerSpec::Gap,
        LayerSpec::Dense { out_dim: head.size() },
    ];
    if normalize {
        layers.push(LayerSpec::EmbedNormalize);
    }
    let m = NetworkModel::new(vec![5, 5, 2], None, layers, head, seed).unwrap();
    // Default init has zero biases; random biases exercise every gradient path.
    let weights: Vec<Vec<Tensor>> = m
        .weights()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.iter()
                .enumerate()
                .map(|(j, w)| uniform(w.shape(), -0.5, 0.5, &mut rng(seed * 31 + (i * 7 + j) as u64)))
                .collect()
        })
        .collect();
    NetworkModel::from_parts(vec![5, 5, 2], None, m.layers().to_vec(), weights, head, BTreeMap::new()).unwrap()
}

pub type Builder = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

/// A named differentiable computation with its random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

/// One random case per differentiable tape op, drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let h = r.random_range(3..6);
    let w = r.random_range(3..6);
    let cin = r.random_range(1..4);
    let cout = r.random_range(1..4);
    let k = if r.random::<bool>() { 3 } else { 1 };
    let stride = r.random_range(1..3);
    let padding = if k == 3 { r.random_range(0..2) } else { 0 };
    let n = r.random_range(2..7);
    let m = r.random_range(1..5);
    let hid = r.random_range(1..4);
    let p = seed;
    let case = |name, inputs, build: Builder| OpCase { name, inputs, build };
    vec![
        case(
            "conv2d",
            vec![
                away_from_zero(&[h, w, cin], &mut r),
                away_from_zero(&[k, k, cin, cout], &mut r),
                away_from_zero(&[cout], &mut r),
            ],
            Box::new(move |t, x| {
                let y = t.conv2d(x[0], x[1], Some(x[2]), stride, padding)?;
                project(t, y, p)
            }),
        ),
        case(
            "relu",
            vec![away_from_zero(&[n], &mut r)],
            Box::new(move |t, x| {
                let y = t.relu(x[0])?;
                project(t, y, p)
            }),
        ),
        case(
            "tanh",
            vec![away_from_zero(&[n], &mut r)],
            Box::new(move |t, x| {
                let y = t.tanh(x[0])?;
                project(t, y, p)
            }),
        ),
        case(
            "sigmoid",
            vec![away_from_zero(&[n], &mut r)],
            Box::new(move |t, x| {
                let y = t.sigmoid(x[0])?;
                project(t, y, p)
            }),
        ),
        case(
            "global_average_pool",
            vec![away_from_zero(&[h, w, cin], &mut r)],
            Box::new(move |t, x| {
                let y = t.global_average_pool(x[0])?;
                project(t, y, p)
            }),
        ),
        case(
            "dense",
            vec![
                away_from_zero(&[m, n], &mut r),
                away_from_zero(&[n], &mut r),
                away_from_zero(&[m], &mut r),
            ],
            Box::new(move |t, x| {
                let y = t.dense(x[0], x[1], x[2])?;
                project(t, y, p)
            }),
        ),
        case(
            "flatten",
            vec![away_from_zero(&[h, w, cin], &mut r)],
            Box::new(move |t, x| {
                let y = t.flatten(x[0])?;
                project(t, y, p)
            }),
        ),
        case(
            "softmax",
            vec![away_from_zero(&[h, w], &mut r)],
            Box::new(move |t, x| {
                let y = t.softmax(x[0])?;
                project(t, y, p)
            }),
        ),
        case(
            "l2_normalize",
            vec![away_from_zero(&[h, w], &mut r)],
            Box::new(move |t, x| {
                let y = t.l2_normalize(x[0])?;
                project(t, y, p)
            }),
        ),
        case(
            "spatial_multiply",
            vec![away_from_zero(&[h, w, cin], &mut r), away_from_zero(&[h, w], &mut r)],
            Box::new(move |t, x| {
                let y = t.spatial_multiply(x[0], x[1])?;
                project(t, y, p)
            }),
        ),
        case(
            "add_sub_mul",
            vec![away_from_zero(&[n], &mut r), away_from_zero(&[n], &mut r)],
            Box::new(move |t, x| {
                let a = t.add(x[0], x[1])?;
                let s = t.sub(x[0], x[1])?;
                let y = t.mul(a, s)?;
                project(t, y, p)
            }),
        ),
        case(
            "scale_add_scalar_sum",
            vec![away_from_zero(&[n], &mut r)],
            Box::new(move |t, x| {
                let s = t.scale(x[0], -1.7)?;
                let y = t.add_scalar(s, 0.3)?;
                let q = t.mul(y, y)?;
                t.sum(q)
            }),
        ),
        case(
            "dot",
            vec![away_from_zero(&[n], &mut r), away_from_zero(&[n], &mut r)],
            Box::new(|t, x| t.dot(x[0], x[1])),
        ),
        case(
            "squared_distance",
            vec![away_from_zero(&[n], &mut r), away_from_zero(&[n], &mut r)],
            Box::new(|t, x| t.squared_distance(x[0], x[1])),
        ),
        case(
            "distance",
            vec![away_from_zero(&[n], &mut r), away_from_zero(&[n], &mut r)],
            Box::new(|t, x| t.distance(x[0], x[1])),
        ),
        case(
            "select_concat",
            vec![away_from_zero(&[n], &mut r), away_from_zero(&[m], &mut r)],
            Box::new(move |t, x| {
                let c = t.concat(&[x[0], x[1]])?;
                let s = t.select(c, (p as usize) % (n + m))?;
                let y = t.mul(s, s)?;
                let q = project(t, c, p)?;
                t.add(y, q)
            }),
        ),
        case(
            "cross_entropy",
            vec![away_from_zero(&[n], &mut r)],
            Box::new(move |t, x| t.cross_entropy(x[0], (p as usize) % n)),
        ),
        case(
            "gaussian_grid",
            vec![uniform(&[2], 0.0, (h - 1) as f64, &mut r)],
            Box::new(move |t, x| {
                let y = t.gaussian_grid(x[0], h, w)?;
                project(t, y, p)
            }),
        ),
        case(
            "gated_cell",
            vec![
                away_from_zero(&[m], &mut r),
                away_from_zero(&[hid], &mut r),
                away_from_zero(&[hid, m + hid], &mut r),
                away_from_zero(&[hid], &mut r),
                away_from_zero(&[hid, m + hid], &mut r),
                away_from_zero(&[hid], &mut r),
            ],
            Box::new(move |t, x| {
                let y = t.gated_cell(x[0], x[1], x[2], x[3], x[4], x[5])?;
                project(t, y, p)
            }),
        ),
    ]
}
