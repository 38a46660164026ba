//! Central-difference gradient verification.
//!
//! [`finite_difference_check`] compares tape gradients with
//! `(f(x + h) − f(x − h)) / 2h` coordinate by coordinate. [`op_suite`] runs it
//! over every differentiable tape operation on several shapes.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{BatchNormMode, Resize, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Relative error floor used in the denominator.
pub const REL_FLOOR: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-6;
/// Acceptance threshold for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of checking one function.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar function of one tensor, over all coordinates of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_inputs(|t, v| f(t, v[0]), core::slice::from_ref(x), step, None)
}

/// Multi-input variant. `coords` restricts the check to `(input, flat index)`
/// pairs; `None` checks every coordinate of every input.
pub fn check_inputs<F>(f: F, inputs: &[Tensor<f64>], step: f64, coords: Option<&[(usize, usize)]>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !grad {
            return Ok((value, None));
        }
        let mut grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()).unwrap()))
            .collect();
        Ok((value, Some(g)))
    };

    let (_, grads) = eval(inputs, true)?;
    let grads = grads.unwrap();
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let (fp, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig - step;
        let (fm, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        worst = worst.max(relative_error(grads[i].data()[j], numeric));
    }
    Ok(worst)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("valid random shape")
}

/// `sum(y ⊙ r)` for a fixed random `r`, turning a tensor-valued op into a
/// scalar whose gradient exercises every output element differently.
pub fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = random_tensor(tape.shape(y), seed ^ 0x5eed, -1.0, 1.0);
    let r = tape.constant(r)?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
}

fn case(shapes: &[&[usize]], seed: u64, f: fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Case {
    Case {
        inputs: shapes
            .iter()
            .enumerate()
            .map(|(i, s)| random_tensor(s, seed * 31 + i as u64, -1.0, 1.0))
            .collect(),
        f,
    }
}

macro_rules! probe_fn {
    (|$t:ident, $v:ident| $body:expr) => {{
        fn f($t: &mut Tape<f64>, $v: &[Var]) -> Result<Var> {
            let y = $body?;
            probe($t, y, 17)
        }
        f as fn(&mut Tape<f64>, &[Var]) -> Result<Var>
    }};
}

fn op_cases() -> Vec<(&'static str, Vec<Case>)> {
    let shapes3: [&[usize]; 3] = [&[5], &[2, 3], &[2, 3, 2, 2]];
    let unary = |f: fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Vec<Case> {
        shapes3.iter().enumerate().map(|(i, s)| case(&[s], 10 + i as u64, f)).collect()
    };
    let binary = |f: fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Vec<Case> {
        vec![
            case(&[&[2, 3], &[2, 3]], 20, f),
            case(&[&[2, 1], &[1, 3]], 21, f),
            case(&[&[2, 3, 2, 2], &[1, 3, 1, 1]], 22, f),
        ]
    };
    let mut v: Vec<(&'static str, Vec<Case>)> = Vec::new();
    v.push(("add", binary(probe_fn!(|t, x| t.add(x[0], x[1])))));
    v.push(("sub", binary(probe_fn!(|t, x| t.sub(x[0], x[1])))));
    v.push(("mul", binary(probe_fn!(|t, x| t.mul(x[0], x[1])))));
    v.push(("scale", unary(probe_fn!(|t, x| t.scale(x[0], 0.37)))));
    v.push(("relu", unary(probe_fn!(|t, x| t.relu(x[0])))));
    v.push(("sigmoid", unary(probe_fn!(|t, x| t.sigmoid(x[0])))));
    v.push(("abs", unary(probe_fn!(|t, x| t.abs(x[0])))));
    v.push(("square", unary(probe_fn!(|t, x| t.square(x[0])))));
    v.push(("sum", unary(|t: &mut Tape<f64>, x: &[Var]| {
        let s = t.sum(x[0])?;
        t.square(s)
    })));
    v.push((
        "matmul",
        vec![
            case(&[&[3, 4], &[4, 2]], 30, probe_fn!(|t, x| t.matmul(x[0], x[1]))),
            case(&[&[1, 5], &[5, 1]], 31, probe_fn!(|t, x| t.matmul(x[0], x[1]))),
            case(&[&[2, 3, 4], &[2, 4, 5]], 32, probe_fn!(|t, x| t.matmul(x[0], x[1]))),
        ],
    ));
    v.push((
        "transpose",
        vec![
            case(&[&[3, 4]], 35, probe_fn!(|t, x| t.transpose(x[0]))),
            case(&[&[2, 3, 5]], 36, probe_fn!(|t, x| t.transpose(x[0]))),
            case(&[&[2, 2, 3, 4]], 37, probe_fn!(|t, x| t.transpose(x[0]))),
        ],
    ));
    v.push((
        "reshape",
        vec![
            case(&[&[3, 4]], 38, probe_fn!(|t, x| t.reshape(x[0], &[12]))),
            case(&[&[2, 6]], 39, probe_fn!(|t, x| t.reshape(x[0], &[3, 2, 2]))),
            case(&[&[1, 2, 2, 3]], 40, probe_fn!(|t, x| t.reshape(x[0], &[4, 3]))),
        ],
    ));
    v.push((
        "softmax_rows",
        vec![
            case(&[&[4, 4]], 41, probe_fn!(|t, x| t.softmax_rows(x[0]))),
            case(&[&[3, 7]], 42, probe_fn!(|t, x| t.softmax_rows(x[0]))),
            case(&[&[2, 5, 5]], 43, probe_fn!(|t, x| t.softmax_rows(x[0]))),
        ],
    ));
    v.push((
        "conv2d",
        vec![
            case(
                &[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3]],
                50,
                probe_fn!(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 1)),
            ),
            case(
                &[&[2, 3, 5, 5], &[2, 3, 3, 3], &[2]],
                51,
                probe_fn!(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 2, 1)),
            ),
            case(
                &[&[2, 4, 3, 5], &[3, 4, 1, 1], &[3]],
                52,
                probe_fn!(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 0)),
            ),
            case(
                &[&[1, 2, 3, 4], &[6, 2, 3, 3], &[6]],
                53,
                probe_fn!(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 1)),
            ),
        ],
    ));
    v.push((
        "conv_transpose2d",
        vec![
            case(
                &[&[1, 2, 3, 3], &[2, 3, 2, 2], &[3]],
                55,
                probe_fn!(|t, x| t.conv_transpose2d(x[0], x[1], Some(x[2]), 2)),
            ),
            case(
                &[&[2, 3, 2, 4], &[3, 2, 3, 3], &[2]],
                56,
                probe_fn!(|t, x| t.conv_transpose2d(x[0], x[1], Some(x[2]), 2)),
            ),
            case(
                &[&[1, 2, 3, 2], &[2, 2, 3, 3], &[2]],
                57,
                probe_fn!(|t, x| t.conv_transpose2d(x[0], x[1], Some(x[2]), 1)),
            ),
        ],
    ));
    v.push((
        "maxpool2",
        vec![
            case(&[&[1, 1, 4, 4]], 60, probe_fn!(|t, x| t.maxpool2(x[0]))),
            case(&[&[2, 3, 2, 6]], 61, probe_fn!(|t, x| t.maxpool2(x[0]))),
            case(&[&[1, 2, 6, 4]], 62, probe_fn!(|t, x| t.maxpool2(x[0]))),
        ],
    ));
    let bn = probe_fn!(|t, x| {
        let c = t.shape(x[0])[1];
        let mut rs = RunningStats::new(c);
        t.batchnorm2d(x[0], x[1], x[2], BatchNormMode::Train(&mut rs))
    });
    v.push((
        "batchnorm2d",
        vec![
            case(&[&[2, 3, 2, 2], &[3], &[3]], 65, bn),
            case(&[&[1, 2, 3, 4], &[2], &[2]], 66, bn),
            case(&[&[3, 1, 2, 3], &[1], &[1]], 67, bn),
        ],
    ));
    v.push((
        "concat_channels",
        vec![
            case(&[&[1, 2, 3, 3], &[1, 1, 3, 3]], 70, probe_fn!(|t, x| t.concat_channels(x[0], x[1]))),
            case(&[&[2, 1, 2, 2], &[2, 3, 2, 2]], 71, probe_fn!(|t, x| t.concat_channels(x[0], x[1]))),
            case(&[&[2, 2, 1, 4], &[2, 2, 1, 4]], 72, probe_fn!(|t, x| t.concat_channels(x[0], x[1]))),
        ],
    ));
    v.push((
        "interpolate",
        vec![
            case(&[&[1, 2, 3, 4]], 75, probe_fn!(|t, x| t.interpolate(x[0], 5, 7, Resize::Bilinear))),
            case(&[&[2, 1, 8, 8]], 76, probe_fn!(|t, x| t.interpolate(x[0], 3, 4, Resize::Bilinear))),
            case(&[&[1, 3, 4, 4]], 77, probe_fn!(|t, x| t.interpolate(x[0], 6, 2, Resize::Nearest))),
        ],
    ));
    v.push((
        "global_avg_pool",
        vec![
            case(&[&[1, 2, 3, 3]], 80, probe_fn!(|t, x| t.global_avg_pool(x[0]))),
            case(&[&[2, 3, 2, 4]], 81, probe_fn!(|t, x| t.global_avg_pool(x[0]))),
            case(&[&[3, 1, 5, 1]], 82, probe_fn!(|t, x| t.global_avg_pool(x[0]))),
        ],
    ));
    v
}

/// Finite-difference check of every differentiable tape operation on three
/// shapes each, in double precision with step 1e-6.
pub fn op_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (name, cases) in op_cases() {
        let mut worst = 0.0f64;
        let mut coords = 0;
        for c in &cases {
            worst = worst.max(check_inputs(c.f, &c.inputs, DEFAULT_STEP, None)?);
            coords += c.inputs.iter().map(|t| t.len()).sum::<usize>();
        }
        out.push(CheckReport {
            name: name.to_string(),
            cases: cases.len(),
            coords,
            max_rel_error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

/// Picks `n` distinct `(input, index)` coordinates spread over all inputs.
pub fn sample_coords(sizes: &[usize], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = vec![false; total];
    let mut flat = Vec::with_capacity(n.min(total));
    // One coordinate from every input first, so small tensors are not skipped.
    let mut offset = 0;
    for &s in sizes {
        if flat.len() < n {
            let j = offset + rng.random_range(0..s);
            picked[j] = true;
            flat.push(j);
        }
        offset += s;
    }
    while flat.len() < n.min(total) {
        let j = rng.random_range(0..total);
        if !picked[j] {
            picked[j] = true;
            flat.push(j);
        }
    }
    flat.sort_unstable();
    flat.into_iter()
        .map(|mut j| {
            let mut i = 0;
            while j >= sizes[i] {
                j -= sizes[i];
                i += 1;
            }
            (i, j)
        })
        .collect()
}
