use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on a seeded sample of at least `min_coords`
/// coordinates (all of them when the model is smaller).
///
/// `loss_fn` receives the parameters registered in store order and must
/// build a scalar loss; it is called once per perturbation, so it has to be
/// a pure function of the parameters.
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    loss_fn: F,
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, EngineError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, EngineError>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(EngineError::InvalidArgument(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<_> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| grads.get_or_zeros(v, params.tensor_at(i)))
        .collect();

    // flat coordinate -> (tensor, offset)
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, min_coords.min(total)).into_vec();
    picks.sort_unstable();

    let eval = |store: &ParamStore<f64>| -> Result<f64, EngineError> {
        let mut g = Graph::new();
        let vars = store.register(&mut g);
        let l = loss_fn(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work = params.clone();
    for flat in picks {
        let (mut t, mut off) = (0, flat);
        while off >= sizes[t] {
            off -= sizes[t];
            t += 1;
        }
        let name = &names[t];
        let orig = work.get(name).expect("name from store").data()[off];
        work.get_mut(name).expect("name from store").data_mut()[off] = orig + epsilon;
        let plus = eval(&work)?;
        work.get_mut(name).expect("name from store").data_mut()[off] = orig - epsilon;
        let minus = eval(&work)?;
        work.get_mut(name).expect("name from store").data_mut()[off] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[t].data()[off];
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.clone(), off, a, numeric));
        }
    }
    Ok(report)
}
