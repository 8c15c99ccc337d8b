//! Gradient-check cases grouped by op family. Each case yields its name and
//! the worst relative error over all input elements.

use docir_lab::autodiff::{Graph, Tensor, Var};

use super::{gradcheck, naive_conv, random_tensor, rng};

pub type CaseResult = (&'static str, f64);

fn case(name: &'static str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> CaseResult {
    (name, gradcheck(inputs, f))
}

pub fn elementwise() -> Vec<CaseResult> {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[3, 4], 1e-2);
    let mut off_kink = x.clone();
    for v in off_kink.data_mut() {
        if (v.abs() - 0.5).abs() < 1e-2 {
            *v *= 1.1;
        }
    }
    vec![
        case("relu", &[x.clone()], |g, v| g.relu(v[0])),
        case("tanh", &[x.clone()], |g, v| g.tanh(v[0])),
        case("sigmoid", &[x.clone()], |g, v| g.sigmoid(v[0])),
        case("softplus", &[x.clone()], |g, v| g.softplus(v[0])),
        case("exp", &[x.clone()], |g, v| g.exp(v[0])),
        case("square", &[x.clone()], |g, v| g.square(v[0])),
        case("scale", &[x.clone()], |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", &[x], |g, v| g.add_scalar(v[0], 0.3)),
        case("clamp", &[off_kink], |g, v| g.clamp(v[0], -0.5, 0.5)),
    ]
}

pub fn binary() -> Vec<CaseResult> {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[2, 5], 1e-2);
    let mut b = random_tensor(&mut r, &[2, 5], 1e-2);
    // keep a − b away from the kink of `minimum`
    for (x, y) in a.data().iter().zip(b.data_mut()) {
        if (x - *y).abs() < 1e-2 {
            *y += 0.05;
        }
    }
    let ins = [a, b];
    vec![
        case("add", &ins, |g, v| g.add(v[0], v[1]).unwrap()),
        case("sub", &ins, |g, v| g.sub(v[0], v[1]).unwrap()),
        case("mul", &ins, |g, v| g.mul(v[0], v[1]).unwrap()),
        case("minimum", &ins, |g, v| g.minimum(v[0], v[1]).unwrap()),
    ]
}

pub fn shape_and_reduction() -> Vec<CaseResult> {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[2, 3, 4], 1e-2);
    let m = random_tensor(&mut r, &[3, 4], 1e-2);
    let row = random_tensor(&mut r, &[4], 1e-2);
    let n = random_tensor(&mut r, &[3, 2], 1e-2);
    vec![
        case("reshape", &[x.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap()),
        case("flatten", &[x.clone()], |g, v| g.flatten(v[0]).unwrap()),
        case("sum", &[x.clone()], |g, v| g.sum(v[0])),
        case("mean", &[x], |g, v| g.mean(v[0])),
        case("row_sum", &[m.clone()], |g, v| g.row_sum(v[0]).unwrap()),
        case("repeat_rows", &[row], |g, v| g.repeat_rows(v[0], 3)),
        case("concat", &[m.clone(), n], |g, v| g.concat(&[v[0], v[1]]).unwrap()),
        case("columns", &[m.clone()], |g, v| g.columns(v[0], 1, 2).unwrap()),
        case("gather", &[m], |g, v| g.gather(v[0], &[2, 0, 2, 1]).unwrap()),
    ]
}

pub fn layers() -> Vec<CaseResult> {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[3, 5], 1e-2);
    let w = random_tensor(&mut r, &[4, 5], 1e-2);
    let b = random_tensor(&mut r, &[4], 1e-2);
    let mut out = vec![case("affine", &[x, w, b], |g, v| g.affine(v[0], v[1], v[2]).unwrap())];
    for (stride, names) in [(1, ["conv2d s1", "conv2d s1 no bias"]), (2, ["conv2d s2", "conv2d s2 no bias"])] {
        let x = random_tensor(&mut r, &[2, 3, 7, 7], 1e-2);
        let k = random_tensor(&mut r, &[4, 3, 3, 3], 1e-2);
        let b = random_tensor(&mut r, &[4], 1e-2);
        out.push(case(names[0], &[x.clone(), k.clone(), b], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride).unwrap()
        }));
        out.push(case(names[1], &[x, k], |g, v| g.conv2d(v[0], v[1], None, stride).unwrap()));
    }
    out
}

/// conv → tanh → affine → tanh → affine.
pub fn composite() -> CaseResult {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 2, 9, 9], 1e-2);
    let k = random_tensor(&mut r, &[3, 2, 3, 3], 1e-2);
    let kb = random_tensor(&mut r, &[3], 1e-2);
    let w1 = random_tensor(&mut r, &[6, 48], 1e-2);
    let b1 = random_tensor(&mut r, &[6], 1e-2);
    let w2 = random_tensor(&mut r, &[2, 6], 1e-2);
    let b2 = random_tensor(&mut r, &[2], 1e-2);
    case("composite", &[x, k, kb, w1, b1, w2, b2], |g, v| {
        let c = g.conv2d(v[0], v[1], Some(v[2]), 2).unwrap();
        let c = g.tanh(c);
        let f = g.flatten(c).unwrap();
        let h = g.affine(f, v[3], v[4]).unwrap();
        let h = g.tanh(h);
        g.affine(h, v[5], v[6]).unwrap()
    })
}

/// Largest absolute gap between the tape's conv2d forward pass and direct
/// loops, over several shapes, kernel sizes and strides.
pub fn conv_oracle_gap() -> f64 {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for (b, c, hw, o, k, s) in [(1, 1, 5, 1, 3, 1), (2, 4, 22, 16, 5, 2), (3, 16, 10, 8, 3, 2), (1, 3, 9, 2, 1, 3)] {
        let x = random_tensor(&mut r, &[b, c, hw, hw], 0.0);
        let kt = random_tensor(&mut r, &[o, c, k, k], 0.0);
        let bias = random_tensor(&mut r, &[o], 0.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kt.clone());
        let bv = g.constant(bias.clone());
        let out = g.conv2d(xv, kv, Some(bv), s).unwrap();
        let expect = naive_conv(&x, &kt, Some(bias.data()), s);
        let got = g.value(out).data();
        assert_eq!(got.len(), expect.len());
        for (a, e) in got.iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
    }
    worst
}
