#![allow(dead_code)]

pub mod mdms;
pub mod meta;
pub mod model;

use mmuda_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn random_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` maps the leaf handles to an output; the scalar objective is
/// `sum(output ⊙ weights)` with a fixed random weighting so every output
/// element contributes. Returns the worst relative error over the inputs.
pub fn grad_check<F>(inputs: &[Tensor], weight_seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let objective = |values: &[Tensor], grad: bool| -> (f64, Vec<Option<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars);
        let mut wr = rng(weight_seed);
        let weights = random_tensor(&mut wr, tape.shape(out));
        let w = tape.constant(weights);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).item();
        if !grad {
            return (value, Vec::new());
        }
        let grads = tape.backward(loss).unwrap();
        (value, vars.iter().map(|v| grads.wrt(*v).cloned()).collect())
    };
    let (_, analytic) = objective(inputs, true);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * h);
        }
        let a = analytic[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        worst = worst.max(relative_error(a.data(), &numeric));
    }
    worst
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// One random instance of every differentiable op kind (all dims <= 5).
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut dim = |lo: usize| r.random_range(lo..=5usize);
    let (m, k, n, b) = (dim(1), dim(1), dim(1), dim(1));
    let (c, h, w) = (dim(1), dim(3), dim(3));
    let (co, kh, kw) = (dim(1), dim(1), dim(1));
    let stride = (dim(1).min(2), dim(1).min(2));
    let pad = (dim(1) % 2, dim(1) % 2);
    let (ho, wo) = (dim(1), dim(1));
    let win = (dim(1).min(h), dim(1).min(w));
    let axis = dim(1) % 3;
    let pool_k = (dim(1).min(h), dim(1).min(w));
    let classes = dim(2);
    let mut r = rng(seed ^ 0xa5a5);
    let t = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s);
    let origins: Vec<(usize, usize)> = (0..3)
        .map(|_| (r.random_range(0..=h - win.0), r.random_range(0..=w - win.1)))
        .collect();
    let labels: Vec<u8> = (0..h * w)
        .map(|_| if r.random_bool(0.2) { 255 } else { r.random_range(0..classes as u8) })
        .collect();
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
    let o2 = origins.clone();
    vec![
        case("matmul", vec![t(&mut r, &[m, k]), t(&mut r, &[k, n])], |tp, v| tp.matmul(v[0], v[1]).unwrap()),
        case("batched_matmul", vec![t(&mut r, &[b, m, k]), t(&mut r, &[b, k, n])], |tp, v| {
            tp.matmul(v[0], v[1]).unwrap()
        }),
        case("conv2d", vec![t(&mut r, &[c, h, w]), t(&mut r, &[co, c, kh.min(h), kw.min(w)])], move |tp, v| {
            tp.conv2d(v[0], v[1], stride, pad).unwrap()
        }),
        case("add", vec![t(&mut r, &[c, h]), t(&mut r, &[c, h])], |tp, v| tp.add(v[0], v[1]).unwrap()),
        case("sub", vec![t(&mut r, &[c, h]), t(&mut r, &[c, h])], |tp, v| tp.sub(v[0], v[1]).unwrap()),
        case("mul", vec![t(&mut r, &[c, h]), t(&mut r, &[c, h])], |tp, v| tp.mul(v[0], v[1]).unwrap()),
        case("scale", vec![t(&mut r, &[c, h])], |tp, v| tp.scale(v[0], -1.7).unwrap()),
        case("add_bias", vec![t(&mut r, &[c, h, w]), t(&mut r, &[c])], |tp, v| tp.add_bias(v[0], v[1]).unwrap()),
        case("relu", vec![random_tensor_off_zero(&mut r, &[c, h])], |tp, v| tp.relu(v[0]).unwrap()),
        case("gelu", vec![t(&mut r, &[c, h])], |tp, v| tp.gelu(v[0]).unwrap()),
        case("sigmoid", vec![t(&mut r, &[c, h])], |tp, v| tp.sigmoid(v[0]).unwrap()),
        case("softmax", vec![t(&mut r, &[c, h, w])], move |tp, v| tp.softmax(v[0], axis).unwrap()),
        case("sum", vec![t(&mut r, &[c, h])], |tp, v| tp.sum(v[0]).unwrap()),
        case("mean", vec![t(&mut r, &[c, h])], |tp, v| tp.mean(v[0]).unwrap()),
        case("avg_pool2d", vec![t(&mut r, &[c, h, w])], move |tp, v| {
            tp.avg_pool2d(v[0], pool_k, (1.max(pool_k.0 / 2), pool_k.1)).unwrap()
        }),
        case("resize_bilinear", vec![t(&mut r, &[c, h, w])], move |tp, v| tp.resize_bilinear(v[0], (ho, wo)).unwrap()),
        case("concat", vec![t(&mut r, &[c, h, w]), t(&mut r, &[c, ho, w])], |tp, v| tp.concat(&[v[0], v[1]], 1).unwrap()),
        case("batch_norm_train", vec![t(&mut r, &[c, h, w]), t(&mut r, &[c]), t(&mut r, &[c])], |tp, v| {
            tp.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
        }),
        case("batch_norm_fixed", vec![t(&mut r, &[c, h, w]), t(&mut r, &[c]), t(&mut r, &[c])], move |tp, v| {
            tp.batch_norm_fixed(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
        }),
        case("transpose", vec![t(&mut r, &[b, m, k])], |tp, v| tp.transpose(v[0]).unwrap()),
        case("reshape", vec![t(&mut r, &[c, h, w])], move |tp, v| tp.reshape(v[0], &[c * h, w]).unwrap()),
        case("expand", vec![t(&mut r, &[c, h, 1]), t(&mut r, &[c, 1, w])], move |tp, v| {
            let a = tp.expand(v[0], &[c, h, w]).unwrap();
            let b = tp.expand(v[1], &[c, h, w]).unwrap();
            tp.mul(a, b).unwrap()
        }),
        case("gather_windows", vec![t(&mut r, &[c, h, w])], move |tp, v| tp.gather_windows(v[0], win, &origins).unwrap()),
        case("scatter_windows", vec![t(&mut r, &[3, c, win.0, win.1])], move |tp, v| {
            tp.scatter_windows(v[0], (h, w), &o2).unwrap()
        }),
        case("cross_entropy", vec![t(&mut r, &[classes, h, w])], move |tp, v| {
            tp.cross_entropy(v[0], &labels, 255).unwrap().var
        }),
    ]
}
