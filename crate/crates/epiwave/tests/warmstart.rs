//! Warm-start behaviour on a real posterior: repeated rounds of monotone
//! gradient ascent must actually reach the neighbourhood of a mode, measured
//! by the drop in gradient norm.

use epiwave::model::{ModelFamily, ModelSpec, ParamVector};
use epiwave::ode::Tolerances;
use epiwave::posterior::{Posterior, PriorConfig};
use epiwave::sampler::gradient_ascent;
use epiwave::spline::SplineConfig;
use epiwave::synth::{generate_dataset, SyntheticRecipe};
use epiwave::transform::UnconstrainedPosterior;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn ascent_reaches_a_mode_of_the_posterior() {
    // Small single-wave problem so each gradient costs little.
    let spec = ModelSpec {
        family: ModelFamily::Sikr,
        n_exposed: 0,
        n_infectious: 1,
        population: 2_189_138.0,
        spline: SplineConfig {
            t0: 0.0,
            t1: 25.0,
            q_knots: 5,
            degree: 3,
        },
        horizon: 25,
    };
    let priors = PriorConfig::synthetic_benchmark(spec.family);
    let truth = ParamVector::from_parts(
        &spec,
        None,
        0.1,
        10.0,
        0.1,
        0.05,
        &vec![-1.4; spec.n_coeffs()],
    )
    .unwrap();
    let recipe = SyntheticRecipe {
        a: 50.0,
        b: 4.0,
        population: spec.population,
        model: spec.clone(),
        p_syn: truth,
        seed: 7,
        dispersion: Default::default(),
    };
    let data = generate_dataset(&recipe).unwrap().series;

    let posterior = Posterior::new(&spec, &data, &priors, Tolerances::default()).unwrap();
    let target = UnconstrainedPosterior::new(posterior);

    // The standard chain start, far from the mode.
    let start = ParamVector::from_parts(
        &spec,
        None,
        0.1,
        10.0,
        0.005,
        0.1,
        &vec![-1.6; spec.n_coeffs()],
    )
    .unwrap();
    let z0 = target
        .transform
        .to_unconstrained(start.as_slice())
        .unwrap();

    // A zero-step run just reports the gradient at the start.
    let at_start = gradient_ascent(&target, &z0, 0.0, 0).unwrap();
    let norm0 = norm(&at_start.grad);
    assert!(norm0.is_finite() && norm0 > 0.0);

    // Rounds of fixed-rate ascent; each round restarts the rate, so a round
    // that halved itself to a crawl gets another chance at full speed.
    let mut z = z0;
    let mut logp = at_start.logp;
    let mut gnorm = norm0;
    for _round in 0..200 {
        let out = gradient_ascent(&target, &z, 3e-4, 400).unwrap();
        assert!(
            out.logp >= logp - 1e-9,
            "ascent went downhill: {} -> {}",
            logp,
            out.logp
        );
        z = out.z;
        logp = out.logp;
        gnorm = norm(&out.grad);
        if gnorm <= 1e-3 * norm0 {
            break;
        }
    }

    assert!(
        gnorm <= 1e-3 * norm0,
        "gradient norm only fell from {norm0:.3e} to {gnorm:.3e}"
    );
}
