use crate::error::{Error, Result};
use crate::rng::{seeded, Gaussian};
use crate::tensor::{Scalar, Tensor, Var};

/// Floor on the estimated spectral norm.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent singular vector estimates of one weight viewed as
/// `[rows, cols]`. Both are kept at f32 precision so checkpoints restore
/// them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn unit_f32(v: &mut [f64]) {
    normalize(v);
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl PowerState {
    /// Random unit vectors.
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let mut g = Gaussian::new(seeded(seed, 0x534e));
        let mut u: Vec<f64> = (0..rows).map(|_| g.sample()).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| g.sample()).collect();
        unit_f32(&mut u);
        unit_f32(&mut v);
        Self { u, v }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = n.max(SIGMA_FLOOR);
    v.iter_mut().for_each(|x| *x /= d);
    n
}

fn matrix_dims<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize)> {
    let rows = *w.shape().first().ok_or_else(|| Error::shape("spectral_normalize", "rank", "scalar weight"))?;
    Ok((rows, w.numel() / rows))
}

/// Runs `iterations` power-iteration steps on `w` viewed as `[rows, cols]`,
/// updating `state`, and returns `sigma = u^T W v` for the updated vectors.
/// With zero iterations the stored vectors are used as they are.
pub fn power_iteration<T: Scalar>(w: &Tensor<T>, state: &mut PowerState, iterations: usize) -> Result<f64> {
    let (rows, cols) = matrix_dims(w)?;
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::shape(
            "spectral_normalize",
            "rows",
            format!(
                "state is {}x{}, weight is {rows}x{cols}",
                state.u.len(),
                state.v.len()
            ),
        ));
    }
    let a: Vec<f64> = w.data().iter().map(|x| x.as_f64()).collect();
    let row = |r: usize| &a[r * cols..(r + 1) * cols];
    for _ in 0..iterations {
        let v = &mut state.v;
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in state.u.iter().enumerate() {
            for (vc, &arc) in v.iter_mut().zip(row(r)) {
                *vc += arc * ur;
            }
        }
        unit_f32(v);
        for (r, ur) in state.u.iter_mut().enumerate() {
            *ur = row(r).iter().zip(&state.v).map(|(x, y)| x * y).sum();
        }
        unit_f32(&mut state.u);
    }
    Ok((0..rows)
        .map(|r| state.u[r] * row(r).iter().zip(&state.v).map(|(x, y)| x * y).sum::<f64>())
        .sum())
}

/// `w / sigma`, where `sigma = u^T W v` comes from power iteration on the
/// persisted `state` (zero iterations: frozen vectors, as in evaluation).
/// Gradients treat `u` and `v` as constants, which is exact for frozen
/// vectors:
/// `dW = g / sigma - <g, W> / sigma^2 * u v^T`.
pub fn spectral_normalize<T: Scalar>(w: &Var<T>, state: &mut PowerState, iterations: usize) -> Result<Var<T>> {
    let sigma = power_iteration(w.value(), state, iterations)?;
    let (u, v) = (state.u.clone(), state.v.clone());
    let floored = sigma <= SIGMA_FLOOR;
    let sigma = sigma.max(SIGMA_FLOOR);
    let inv = T::lit(1.0 / sigma);
    let out = w.value().map(|x| x * inv);
    let saved = w.value_rc();
    let cols = v.len();
    Ok(w.tape().record(out, &[w], move |g, _| {
        let mut dw = g.map(|x| x * inv);
        if !floored {
            let dot: f64 = g.data().iter().zip(saved.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let c = dot / (sigma * sigma);
            for (i, d) in dw.data_mut().iter_mut().enumerate() {
                *d -= T::lit(c * u[i / cols] * v[i % cols]);
            }
        }
        vec![Some(dw)]
    }))
}
