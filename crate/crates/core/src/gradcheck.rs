//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinate with the largest error, as `(name, index, analytic, numeric)`.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coordinates: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coordinates: None,
            seed: 0,
        }
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Copy)]
enum Coord {
    Param(usize, usize),
    Input(usize, usize),
}

/// Compares tape gradients with central differences.
///
/// The scalar checked is `sum(r * y)` for the graph output `y` and a fixed
/// random projection `r`. Every trainable parameter coordinate and every
/// input coordinate is perturbed by `±eps` (or a random subset when
/// `max_coordinates` is set).
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (projection, analytic_params, analytic_inputs) = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.shape(out);
        let r = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let grads = tape.backward(out, r.clone())?;
        let params: Vec<Option<Tensor<f64>>> = store
            .ids()
            .map(|id| grads.param(id).cloned())
            .collect();
        let ins: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (r, params, ins)
    };

    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        if p.trainable {
            coords.extend((0..p.value.len()).map(|i| Coord::Param(id.index(), i)));
        }
    }
    for (k, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|i| Coord::Input(k, i)));
    }
    if let Some(limit) = cfg.max_coordinates {
        if coords.len() > limit {
            let picked = sample(&mut rng, coords.len(), limit).into_vec();
            let mut picked_sorted = picked;
            picked_sorted.sort_unstable();
            coords = picked_sorted.into_iter().map(|i| coords[i]).collect();
        }
    }

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    let mut inputs = inputs.to_vec();
    for coord in coords {
        let (numeric, analytic, name, idx) = match coord {
            Coord::Param(p, i) => {
                let id = store.ids().nth(p).expect("param index");
                let orig = store.value(id).data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
                let plus = eval(store, &inputs)?;
                store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
                let minus = eval(store, &inputs)?;
                store.get_mut(id).value.data_mut()[i] = orig;
                let analytic = analytic_params[p].as_ref().map_or(0.0, |g| g.data()[i]);
                (
                    (plus - minus) / (2.0 * cfg.eps),
                    analytic,
                    store.get(id).name.clone(),
                    i,
                )
            }
            Coord::Input(k, i) => {
                let orig = inputs[k].data()[i];
                inputs[k].data_mut()[i] = orig + cfg.eps;
                let plus = eval(store, &inputs)?;
                inputs[k].data_mut()[i] = orig - cfg.eps;
                let minus = eval(store, &inputs)?;
                inputs[k].data_mut()[i] = orig;
                (
                    (plus - minus) / (2.0 * cfg.eps),
                    analytic_inputs[k].data()[i],
                    format!("input{k}"),
                    i,
                )
            }
        };
        let err = rel_error(analytic, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name, idx, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamRole;
    use crate::tensor::Shape;

    #[test]
    fn dense_layer_matches() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                Tensor::from_fn(Shape::new(1, 1, 3, 2), |[_, _, i, o]| 0.3 * i as f64 - 0.2 * o as f64 + 0.1),
                ParamRole::Weight,
            )
            .unwrap();
        let b = store
            .add("b", Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.5, -0.25]).unwrap(), ParamRole::Bias)
            .unwrap();
        let x = Tensor::from_fn(Shape::new(2, 1, 1, 3), |[n, _, _, c]| (n as f64 - 0.5) * (c as f64 + 1.0));
        let report = finite_diff_check(&mut store, &[x], GradCheckConfig::default(), |tape, v| {
            let wv = tape.param(w);
            let bv = tape.param(b);
            tape.dense(v[0], wv, bv)
        })
        .unwrap();
        assert_eq!(report.coordinates, 6 + 2 + 6);
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn zero_parameter_graph() {
        let mut store = ParamStore::new();
        let report = finite_diff_check(&mut store, &[], GradCheckConfig::default(), |tape, _| {
            Ok(tape.input(Tensor::scalar(1.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.coordinates, 0);
    }
}
