//! Central finite-difference gradient checking over small random graphs.
#![allow(dead_code)]

use dgq_core::autodiff::{Graph, Var};
use dgq_core::quantum::{self, RingCircuit};
use dgq_core::rng;
use dgq_core::tensor::Tensor;
use dgq_core::Result;
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-8;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    /// Expected ratio of analytic to numeric gradient per input: 1 except
    /// upstream of a reversal layer.
    pub sign: Vec<f64>,
    pub build: Build,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub checked: usize,
    /// Largest `|a − n| / (REL_TOL·max(|a|,|n|) + ABS_FLOOR)`; at most 1 passes.
    pub worst: f64,
    pub worst_at: (usize, usize),
    pub rel_error: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= 1.0
    }
}

fn forward(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = (case.build)(&mut g, &vars).expect("forward");
    g.value(loss).data()[0]
}

pub fn gradcheck(case: &Case) -> Check {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = (case.build)(&mut g, &vars).expect("forward");
    assert_eq!(g.value(loss).numel(), 1, "{}: loss must be scalar", case.name);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let mut check = Check {
        name: case.name,
        checked: 0,
        worst: 0.0,
        worst_at: (0, 0),
        rel_error: 0.0,
    };
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + STEP;
            let up = forward(case, &inputs);
            inputs[i].data_mut()[j] = x - STEP;
            let down = forward(case, &inputs);
            inputs[i].data_mut()[j] = x;
            let numeric = case.sign[i] * (up - down) / (2.0 * STEP);
            let a = analytic[i][j];
            let scale = a.abs().max(numeric.abs());
            let score = (a - numeric).abs() / (REL_TOL * scale + ABS_FLOOR);
            check.checked += 1;
            if score > check.worst {
                check.worst = score;
                check.worst_at = (i, j);
                check.rel_error = (a - numeric).abs() / scale.max(f64::MIN_POSITIVE);
            }
        }
    }
    check
}

/// Uniform values in `[-1, 1]`, nudged off the ReLU kink at 0.
pub fn random(shape: &[usize], r: &mut dgq_core::rng::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Non-scalar outputs are reduced by `mean‖row‖² + 0.37·Σ` so that every
/// element gets a distinct upstream gradient.
pub fn reduce(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let rows = shape[0];
    let flat = g.reshape(y, &[rows, shape[1..].iter().product()])?;
    let sq = g.mean_squared_norm(flat)?;
    let s = g.sum(y);
    let s = g.scale(s, 0.37);
    g.add(sq, s)
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    let sign = vec![1.0; inputs.len()];
    Case {
        name,
        inputs,
        sign,
        build: Box::new(build),
    }
}

/// One randomized instance of every differentiable layer type, shapes and
/// values drawn from `seed`.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut r = rng::stream(seed, 77);
    let mut pick = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (n, c, k, hw) = (pick(1, 2), pick(1, 3), pick(1, 3), pick(3, 5));
    let stride = pick(1, 2);
    let padding = pick(0, 1);
    let (features, qubits, out) = (pick(3, 5), pick(1, 3), pick(2, 4));
    let classes = pick(2, 3);
    let mut r = rng::stream(seed, 78);
    let mut rnd = |shape: &[usize]| random(shape, &mut r);
    let targets: Vec<usize> = (0..2 * n).map(|i| (i + seed as usize) % classes).collect();
    let depth = 1 + (seed as usize % 2);
    let lambda = [0.0, 0.5, 1.0][seed as usize % 3];

    let mut cases = vec![
        case("conv", vec![rnd(&[n, c, hw, hw]), rnd(&[k, c, 3, 3]), rnd(&[k])], move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, padding, 1)?;
            reduce(g, y)
        }),
        case("grouped_conv", vec![rnd(&[n, 2 * c, hw, hw]), rnd(&[2 * k, c, 3, 3])], move |g, v| {
            let y = g.conv2d(v[0], v[1], None, stride, 1, 2)?;
            reduce(g, y)
        }),
        case("pointwise_conv", vec![rnd(&[n, c, hw, hw]), rnd(&[k, c, 1, 1])], move |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0, 1)?;
            reduce(g, y)
        }),
        case("depthwise_conv", vec![rnd(&[n, c, hw, hw]), rnd(&[c, 1, 3, 3])], move |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], stride, 1)?;
            reduce(g, y)
        }),
        case("batchnorm_train", vec![rnd(&[n + 1, c, hw, hw]), rnd(&[c]), rnd(&[c])], |g, v| {
            let (y, _) = g.batch_norm_batch(v[0], v[1], v[2], 1e-5)?;
            reduce(g, y)
        }),
        case("batchnorm_running", vec![rnd(&[n, c, hw, hw]), rnd(&[c]), rnd(&[c])], move |g, v| {
            let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
            let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.2 * i as f64).collect();
            let y = g.batch_norm_running(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            reduce(g, y)
        }),
        case("linear", vec![rnd(&[2 * n, features]), rnd(&[out, features]), rnd(&[out])], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            reduce(g, y)
        }),
        case("relu6", vec![{
            // spread over (-2, 8) so both clip points are exercised
            let mut t = rnd(&[2 * n, features]);
            t.data_mut().iter_mut().for_each(|x| *x = 3.0 + 5.0 * *x);
            t.data_mut().iter_mut().filter(|x| (**x - 6.0).abs() < 0.05).for_each(|x| *x += 0.1);
            t
        }], |g, v| {
            let y = g.relu6(v[0]);
            reduce(g, y)
        }),
        case("tanh", vec![rnd(&[2 * n, features])], |g, v| {
            let y = g.tanh(v[0]);
            reduce(g, y)
        }),
        case("pooling", vec![rnd(&[n, c, 2 * hw, 2 * hw])], |g, v| {
            let p = g.max_pool2d(v[0])?;
            let a = g.global_avg_pool(p)?;
            reduce(g, a)
        }),
        case("softmax_ce", vec![{
            let mut t = rnd(&[2 * n, classes]);
            t.data_mut().iter_mut().for_each(|x| *x *= 3.0);
            t
        }], move |g, v| g.cross_entropy(v[0], &targets)),
        case("angle_encoding", vec![rnd(&[2 * n, features]), rnd(&[qubits, features])], |g, v| {
            let t = quantum::encode_angles(g, v[0], v[1])?;
            reduce(g, t)
        }),
        case("fusion", vec![rnd(&[2 * n, features]), rnd(&[2 * n, qubits]), rnd(&[features, qubits])], move |g, v| {
            let y = quantum::fuse(g, v[0], v[1], v[2], 0.1 + 0.2 * (seed % 3) as f64)?;
            reduce(g, y)
        }),
        case(
            "quantum_enhance",
            vec![rnd(&[2 * n, features]), rnd(&[qubits, features]), rnd(&[features, qubits])],
            move |g, v| {
                let circuit = RingCircuit::new(qubits, depth)?;
                let y = quantum::enhance(g, v[0], v[1], v[2], circuit, 0.3)?;
                reduce(g, y)
            },
        ),
    ];
    let targets: Vec<usize> = (0..2 * n).map(|i| i % 2).collect();
    let mut grl = case(
        "grl_composition",
        vec![rnd(&[2 * n, features]), rnd(&[out, features]), rnd(&[2, out])],
        move |g, v| {
            let h = g.linear(v[0], v[1], None)?;
            let h = g.relu6(h);
            let rev = g.grl(h, lambda);
            let d = g.linear(rev, v[2], None)?;
            g.cross_entropy(d, &targets)
        },
    );
    // inputs upstream of the reversal see −λ times the plain gradient
    grl.sign = vec![-lambda, -lambda, 1.0];
    cases.push(grl);
    cases
}
