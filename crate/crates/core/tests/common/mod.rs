#![allow(dead_code)]

pub mod gradsuite;

use nlcunet::rng::seeded;
use nlcunet::{Bound, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed, 99);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
    random(shape, seed).cast()
}

/// `|a - fd| / (|a| + |fd| + 1e-8)`.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-8)
}

/// Projects an arbitrary output onto a fixed random direction so every op
/// reduces to a scalar loss.
pub fn project(y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = seeded(seed, 7);
    let dir = Tensor::from_fn(y.shape(), |_| {
        let m: f64 = rng.random_range(0.5..1.5);
        if rng.random::<bool>() { m } else { -m }
    });
    let dir = y.tape().constant(dir);
    Ok(y.mul(&dir)?.sum())
}

/// Worst relative error between backpropagated gradients and central finite
/// differences over every scalar of every input.
///
/// A failing entry whose analytic value equals one one-sided quotient while
/// the central quotient lies halfway to the other sits on a kink of a
/// piecewise-linear activation within one step. Finite differences are not a
/// valid oracle there, so such entries are counted and skipped. A wrong
/// backward rule on a smooth function cannot produce that signature: its
/// one-sided quotients agree with each other and not with the analytic value.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>) -> f64 {
    gradcheck_report(inputs, f).worst
}

pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

pub fn gradcheck_report(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>) -> GradReport {
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&leaves).expect("forward");
    let base = loss.value().data()[0];
    let grads = loss.backward().expect("backward");
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();

    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).expect("forward").value().data()[0]
    };
    let mut report = GradReport {
        worst: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut vals = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&vals);
            vals[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&vals);
            vals[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let e = rel_err(a.data()[j], fd);
            if e >= GRAD_TOL {
                let right = (plus - base) / FD_STEP;
                let left = (base - minus) / FD_STEP;
                // at a kink the analytic value matches one side exactly and the
                // central quotient sits halfway between the sides
                let a = a.data()[j];
                let miss = (a - fd).abs();
                if (a - right).abs().min((a - left).abs()) < 0.25 * miss && (right - left).abs() > 1.5 * miss {
                    report.skipped_kinks += 1;
                    continue;
                }
            }
            if e >= GRAD_TOL && std::env::var("GRADCHECK_TRACE").is_ok() {
                eprintln!("input {i} entry {j}: analytic {:e} fd {fd:e} plus {plus:e} minus {minus:e} base {base:e}", a.data()[j]);
            }
            report.checked += 1;
            report.worst = report.worst.max(e);
        }
    }
    report
}

/// Same check for a model-style function of an input and a parameter store;
/// covers the input and every parameter scalar.
pub fn gradcheck_params(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    f: impl Fn(&Var<f64>, &Bound<f64>) -> Result<Var<f64>>,
) -> f64 {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    gradcheck(&inputs, |vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars[1..].iter().cloned()).collect());
        f(&vars[0], &bound)
    })
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [o, _, kh, kw] = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Grouped convolution with `groups == channels`, built by running the naive
/// oracle one channel at a time.
pub fn naive_grouped_conv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [_, _, kh, kw] = w.dims4().unwrap();
    let mut out = Vec::new();
    let mut per_channel = Vec::new();
    for ch in 0..c {
        let mut xs = Vec::new();
        for b in 0..n {
            let s = (b * c + ch) * h * wd;
            xs.extend_from_slice(&x.data()[s..s + h * wd]);
        }
        let xc = Tensor::new(&[n, 1, h, wd], xs).unwrap();
        let wc = Tensor::new(&[1, 1, kh, kw], w.data()[ch * kh * kw..(ch + 1) * kh * kw].to_vec()).unwrap();
        per_channel.push(naive_conv2d(&xc, &wc, None, 1, pad));
    }
    let [_, _, oh, ow] = per_channel[0].dims4().unwrap();
    for b in 0..n {
        for pc in &per_channel {
            out.extend_from_slice(&pc.data()[b * oh * ow..(b + 1) * oh * ow]);
        }
    }
    Tensor::new(&[n, c, oh, ow], out).unwrap()
}

pub fn max_abs_diff<T: nlcunet::Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Direct 2-D evaluation: the window is built from the 2-D Gaussian itself
/// and moments are taken around the local mean.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (r, row) in win.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (r as f64 - 5.0, c as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / 4.5).exp();
            total += *v;
        }
    }
    let (x, y) = (a.data(), b.data());
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let at = |d: &[f64], r: usize, c: usize| d[(i + r) * w + j + c];
            let (mut mx, mut my) = (0.0, 0.0);
            for r in 0..11 {
                for c in 0..11 {
                    let k = win[r][c] / total;
                    mx += k * at(x, r, c);
                    my += k * at(y, r, c);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for r in 0..11 {
                for c in 0..11 {
                    let k = win[r][c] / total;
                    let (dx, dy) = (at(x, r, c) - mx, at(y, r, c) - my);
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cov += k * dx * dy;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Mean squared error taken in a second pass over explicit differences.
pub fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let mse = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
    -10.0 * mse.log10()
}
