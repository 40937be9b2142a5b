use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Binding, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub samples: Vec<GradSample>,
}

/// Compares tape gradients with central finite differences on a seeded
/// subsample of at most `max_coords` coordinates drawn from the parameters
/// named in `names`.
///
/// The error per coordinate is `|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)`.
/// Losses with piecewise-linear pieces are only checked meaningfully away
/// from their kinks; callers nudge inputs off breakpoints beforehand.
pub fn grad_check<F>(
    loss_fn: F,
    store: &ParamStore,
    names: &[String],
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Binding<'t>) -> Result<Var<'t>>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let trainable: HashSet<String> = names.iter().cloned().collect();
    let analytic = {
        let tape = Tape::new();
        let binding = store.bind(&tape, &trainable);
        let loss = loss_fn(&tape, &binding)?;
        tape.backward(loss)?;
        binding.grads(&tape)
    };

    let mut coords: Vec<(String, usize)> = Vec::new();
    for name in names {
        let n = store.get(name)?.len();
        coords.extend((0..n).map(|i| (name.clone(), i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, coords.len(), max_coords.min(coords.len())).into_vec();

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let binding = s.bind(&tape, &HashSet::new());
        Ok(loss_fn(&tape, &binding)?.item())
    };

    let mut samples = Vec::with_capacity(picked.len());
    let mut probe = store.clone();
    for k in picked {
        let (name, index) = &coords[k];
        let original = store.get(name)?.data()[*index];
        probe.get_mut(name)?.data_mut()[*index] = original + epsilon;
        let plus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*index] = original - epsilon;
        let minus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*index] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let ad = analytic[name].data()[*index];
        let rel_error = (ad - numeric).abs() / (ad.abs() + numeric.abs() + 1e-12);
        samples.push(GradSample {
            name: name.clone(),
            index: *index,
            analytic: ad,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        coordinates: samples.len(),
        samples,
    })
}
