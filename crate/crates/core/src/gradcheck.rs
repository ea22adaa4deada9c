//! Central finite-difference gradient verification.
//!
//! Two harnesses: one for single tape operations built from free tensors, one
//! for whole losses over a parameter store. Both report the worst relative
//! error, with the scale floored at 1e-6 so true-zero gradients compare
//! against finite-difference noise instead of dividing by zero.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{ParameterStore, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks d(sum(f(inputs)))/d(input) for every coordinate of every input.
/// Returns the worst relative error between backward and central differences.
pub fn check_op_gradients<F>(inputs: &mut [Tensor], step: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    check_op_gradients_inner(inputs, step, None, f)
}

fn check_op_gradients_inner<F>(
    inputs: &mut [Tensor],
    step: f64,
    tamper: Option<f64>,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    for t in inputs.iter_mut() {
        t.enable_grad();
    }
    let eval = |inputs: &[Tensor], f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &ids)?;
        let loss = tape.sum_all(out)?;
        tape.scalar_value(loss)
    };

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|t| tape.leaf(t))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &ids)?;
    let loss = tape.sum_all(out)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    if let Some(delta) = tamper {
        analytic[0][0] += delta;
    }

    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = inputs[ti].values()[j];
            inputs[ti].values_mut()[j] = orig + step;
            let up = eval(inputs, &mut f)?;
            inputs[ti].values_mut()[j] = orig - step;
            let down = eval(inputs, &mut f)?;
            inputs[ti].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[ti][j], numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct StoreCheckReport {
    pub worst: f64,
    pub per_tensor: BTreeMap<String, f64>,
    pub coords_checked: usize,
}

/// Compares analytic gradients (already pulled into `store`) for `names`
/// against central differences of `loss_fn`. Probes `probes_per_tensor`
/// random coordinates per tensor, or every coorindate when the tensor is
/// smaller than that.
pub fn check_store_gradients<F>(
    store: &mut ParameterStore,
    names: &[String],
    probes_per_tensor: usize,
    step: f64,
    seed: u64,
    mut loss_fn: F,
) -> Result<StoreCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = StoreCheckReport {
        worst: 0.0,
        per_tensor: BTreeMap::new(),
        coords_checked: 0,
    };
    for name in names {
        let analytic: Vec<f64> = {
            let t = store.tensor(name)?;
            t.grad()
                .ok_or_else(|| Error::contract(format!("parameter '{name}' has no gradient")))?
                .to_vec()
        };
        let n = analytic.len();
        let coords: Vec<usize> = if n <= probes_per_tensor {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..probes_per_tensor)
                .map(|_| rng.random_range(0..n))
                .collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let mut tensor_worst = 0.0f64;
        for &j in &coords {
            let orig = store.tensor(name)?.values()[j];
            store.tensor_mut(name)?.values_mut()[j] = orig + step;
            let up = loss_fn(store)?;
            store.tensor_mut(name)?.values_mut()[j] = orig - step;
            let down = loss_fn(store)?;
            store.tensor_mut(name)?.values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            tensor_worst = tensor_worst.max(relative_error(analytic[j], numeric));
            report.coords_checked += 1;
        }
        report.worst = report.worst.max(tensor_worst);
        report.per_tensor.insert(name.clone(), tensor_worst);
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, vals).expect("shape matches values")
}

/// Finite-difference report for every tape operation, on seeded random
/// inputs. When `corrupt` names an operation, that operation's analytic
/// gradient is deliberately damaged before comparison, so the caller can
/// verify the checker actually detects broken gradients.
pub fn op_gradient_reports(seed: u64, corrupt: Option<&str>) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   inputs: &mut [Tensor],
                   f: &mut dyn FnMut(&mut Tape, &[ValueId]) -> Result<ValueId>|
     -> Result<()> {
        let tamper = if corrupt == Some(name) { Some(0.37) } else { None };
        let worst = check_op_gradients_inner(inputs, DEFAULT_STEP, tamper, f)?;
        out.push((name.to_string(), worst));
        Ok(())
    };

    let mut i = [random_tensor(&mut rng, &[3, 4], -2.0, 2.0), random_tensor(&mut rng, &[4, 2], -2.0, 2.0)];
    run("matmul", &mut i, &mut |t, ids| t.matmul(ids[0], ids[1]))?;

    let mut i = [random_tensor(&mut rng, &[3, 3], -2.0, 2.0), random_tensor(&mut rng, &[3, 3], -2.0, 2.0)];
    run("add", &mut i, &mut |t, ids| t.add(ids[0], ids[1]))?;

    let mut i = [random_tensor(&mut rng, &[4, 3], -2.0, 2.0), random_tensor(&mut rng, &[3], -2.0, 2.0)];
    run("add_row_bias", &mut i, &mut |t, ids| t.add_row_bias(ids[0], ids[1]))?;

    let mut i = [random_tensor(&mut rng, &[5], -2.0, 2.0)];
    run("scale", &mut i, &mut |t, ids| t.scale(ids[0], -1.7))?;

    let mut i = [random_tensor(&mut rng, &[2, 3], -2.0, 2.0), random_tensor(&mut rng, &[2, 3], -2.0, 2.0)];
    run("mul_elem", &mut i, &mut |t, ids| t.mul_elem(ids[0], ids[1]))?;

    let mut i = [random_tensor(&mut rng, &[7], -3.0, 3.0)];
    run("gelu", &mut i, &mut |t, ids| t.gelu(ids[0]))?;

    let mut i = [
        random_tensor(&mut rng, &[3, 5], -2.0, 2.0),
        random_tensor(&mut rng, &[5], 0.5, 1.5),
        random_tensor(&mut rng, &[5], -0.5, 0.5),
    ];
    run("layer_norm", &mut i, &mut |t, ids| t.layer_norm(ids[0], ids[1], ids[2]))?;

    let mut i = [
        random_tensor(&mut rng, &[3, 4], -1.5, 1.5),
        random_tensor(&mut rng, &[5, 4], -1.5, 1.5),
        random_tensor(&mut rng, &[5, 4], -1.5, 1.5),
    ];
    run("attention", &mut i, &mut |t, ids| t.attention(ids[0], ids[1], ids[2], 2, false))?;

    let mut i = [
        random_tensor(&mut rng, &[4, 4], -1.5, 1.5),
        random_tensor(&mut rng, &[4, 4], -1.5, 1.5),
        random_tensor(&mut rng, &[4, 4], -1.5, 1.5),
    ];
    run("attention_causal", &mut i, &mut |t, ids| t.attention(ids[0], ids[1], ids[2], 2, true))?;

    // A plain sum of log-softmax rows has identically zero input gradient;
    // weight the rows to give the check something nonzero to verify.
    let w: Vec<f64> = (0..12).map(|k| 0.1 * (k as f64 + 1.0)).collect();
    let mut i = [random_tensor(&mut rng, &[3, 4], -2.0, 2.0)];
    run("log_softmax_rows", &mut i, &mut |t, ids| {
        let y = t.log_softmax_rows(ids[0])?;
        let wc = t.constant(&[3, 4], w.clone())?;
        t.mul_elem(y, wc)
    })?;

    let w: Vec<f64> = (0..5).map(|k| 0.3 * (k as f64 - 2.0)).collect();
    let mut i = [random_tensor(&mut rng, &[5], -2.0, 2.0)];
    run("softmax_1d", &mut i, &mut |t, ids| {
        let y = t.softmax_1d(ids[0])?;
        let wc = t.constant(&[5], w.clone())?;
        t.mul_elem(y, wc)
    })?;

    let mut i = [random_tensor(&mut rng, &[4], -1.0, 1.0)];
    run("exp_vec", &mut i, &mut |t, ids| t.exp(ids[0]))?;

    let mut i = [random_tensor(&mut rng, &[4, 5], -2.0, 2.0)];
    run("pick_rowwise", &mut i, &mut |t, ids| t.pick_rowwise(ids[0], &[1, 4, 0, 2]))?;

    let mut i = [random_tensor(&mut rng, &[6, 3], -2.0, 2.0)];
    run("embed", &mut i, &mut |t, ids| t.embed(ids[0], &[0, 2, 2, 5]))?;

    let mut i = [
        random_tensor(&mut rng, &[1], -2.0, 2.0),
        random_tensor(&mut rng, &[1], -2.0, 2.0),
        random_tensor(&mut rng, &[1], -2.0, 2.0),
    ];
    run("stack_scalars", &mut i, &mut |t, ids| {
        let s = t.stack_scalars(ids)?;
        let wc = t.constant(&[3], vec![1.0, -2.0, 0.5])?;
        t.mul_elem(s, wc)
    })?;

    let mut i = [random_tensor(&mut rng, &[3, 3], -2.0, 2.0)];
    run("sum_all", &mut i, &mut |t, ids| t.sum_all(ids[0]))?;

    let mut i = [random_tensor(&mut rng, &[7], -2.0, 2.0)];
    run("mean_all", &mut i, &mut |t, ids| t.mean_all(ids[0]))?;

    let mut i = [random_tensor(&mut rng, &[6], -2.0, 2.0), random_tensor(&mut rng, &[6], -2.0, 2.0)];
    run("dot", &mut i, &mut |t, ids| t.dot(ids[0], ids[1]))?;

    Ok(out)
}
