use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::store::{GradStore, ParamStore};
use crate::Result;

/// Central-difference gradient check.
///
/// `loss` evaluates the scalar objective for a given parameter store;
/// `analytic` holds the gradients under test. Up to `max_coords` coordinates
/// are checked (all of them when the store is small; at least 200 are sampled
/// otherwise). Returns the largest relative error
/// `|num - ana| / max(|num| + |ana|, 1e-6)`.
pub fn grad_check(
    loss: impl Fn(&ParamStore) -> Result<f64>,
    analytic: &GradStore,
    params: &ParamStore,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, a) in params.iter() {
        for i in 0..a.rows() * a.cols() {
            coords.push((name.clone(), i));
        }
    }
    let budget = max_coords.max(200);
    if coords.len() > budget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(budget);
    }

    let mut worst = 0.0f64;
    let mut scratch = params.clone();
    for (name, i) in coords {
        let base = params.get(&name)?.data()[i];

        scratch.get_mut(&name)?.data_mut()[i] = base + h;
        let up = loss(&scratch)?;
        scratch.get_mut(&name)?.data_mut()[i] = base - h;
        let down = loss(&scratch)?;
        scratch.get_mut(&name)?.data_mut()[i] = base;

        let numeric = (up - down) / (2.0 * h);
        let ana = analytic.get(&name).map(|g| g.data()[i]).unwrap_or(0.0);
        let rel = (numeric - ana).abs() / (numeric.abs() + ana.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Array2, Tape};

    #[test]
    fn catches_correct_and_wrong_gradients() {
        let mut params = ParamStore::new();
        params.insert("x", Array2::from_fn(2, 2, |r, c| 0.3 + r as f64 - 0.5 * c as f64));

        // loss = sum(x * x)
        let loss = |p: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let x = tape.param("x", p.get("x")?.clone());
            let sq = tape.mul_elem(x, x)?;
            let s = tape.sum_all(sq);
            Ok(tape.value(s).get(0, 0))
        };

        let mut analytic = GradStore::new();
        analytic
            .accumulate("x", &params.get("x").unwrap().scale(2.0))
            .unwrap();
        let err = grad_check(loss, &analytic, &params, 1e-5, 200, 0).unwrap();
        assert!(err < 1e-8, "err {err}");

        let mut wrong = GradStore::new();
        wrong
            .accumulate("x", &params.get("x").unwrap().scale(3.0))
            .unwrap();
        let err = grad_check(loss, &wrong, &params, 1e-5, 200, 0).unwrap();
        assert!(err > 1e-2, "err {err}");
    }
}
