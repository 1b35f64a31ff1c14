//! Central finite differences against the analytic gradients.

use coprefl_core::baselines::proximal_loss_and_gradient;
use coprefl_core::coprefl::{meta_gradient, meta_loss, query_evaluate};
use coprefl_core::model::{init_params, loss, loss_and_gradient, ModelSpec};
use coprefl_core::rng::rng_from_seed;
use coprefl_core::{LabeledDataset, ParameterVector};
use rand::Rng;

const H: f64 = 1e-5;

fn shifted(p: &ParameterVector, k: usize, h: f64) -> ParameterVector {
    let mut v = p.clone().into_vec();
    v[k] += h;
    ParameterVector::from(v)
}

fn along(p: &ParameterVector, d: &[f64], h: f64) -> ParameterVector {
    ParameterVector::from(
        p.as_slice()
            .iter()
            .zip(d)
            .map(|(a, b)| a + h * b)
            .collect::<Vec<_>>(),
    )
}

fn random_data(dim: usize, classes: usize, n: usize, rng: &mut impl Rng) -> LabeledDataset {
    let x = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::new(x, y, dim).unwrap()
}

fn perturbed_init(spec: &ModelSpec, rng: &mut impl Rng) -> ParameterVector {
    let p = init_params(spec, rng.random());
    ParameterVector::from(
        p.as_slice()
            .iter()
            .map(|v| v + rng.random_range(-0.2..0.2))
            .collect::<Vec<_>>(),
    )
}

/// Per-coordinate check with an absolute floor for entries that vanish.
fn assert_close(analytic: &[f64], numeric: &[f64]) {
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs()).max(1e-4);
        assert!(
            (a - n).abs() / scale < 1e-4,
            "coordinate {k}: analytic {a} vs numeric {n}"
        );
    }
}

#[test]
fn model_gradient_matches_central_differences() {
    let mut rng = rng_from_seed(11);
    let specs = [
        ModelSpec::logistic(3, 4).unwrap(),
        ModelSpec::new(4, vec![5], 3).unwrap(),
        ModelSpec::new(2, vec![4, 3], 2).unwrap(),
    ];
    for spec in &specs {
        for _ in 0..10 {
            let params = perturbed_init(spec, &mut rng);
            let data = random_data(spec.input_dim, spec.n_classes, 6, &mut rng);
            let batch = data.batch().unwrap();
            let (_, g) = loss_and_gradient(&params, spec, &batch).unwrap();
            let numeric: Vec<f64> = (0..params.len())
                .map(|k| {
                    let up = loss(&shifted(&params, k, H), spec, &batch).unwrap();
                    let down = loss(&shifted(&params, k, -H), spec, &batch).unwrap();
                    (up - down) / (2.0 * H)
                })
                .collect();
            assert_close(g.as_slice(), &numeric);
        }
    }
}

#[test]
fn proximal_gradient_matches_central_differences() {
    let mut rng = rng_from_seed(12);
    let spec = ModelSpec::new(3, vec![4], 3).unwrap();
    for mu in [0.0, 0.1, 1.0, 5.0] {
        let params = perturbed_init(&spec, &mut rng);
        let anchor = perturbed_init(&spec, &mut rng);
        let data = random_data(3, 3, 5, &mut rng);
        let batch = data.batch().unwrap();
        let f = |p: &ParameterVector| {
            proximal_loss_and_gradient(p, &anchor, &spec, &batch, mu)
                .unwrap()
                .0
        };
        let (_, g) = proximal_loss_and_gradient(&params, &anchor, &spec, &batch, mu).unwrap();
        let numeric: Vec<f64> = (0..params.len())
            .map(|k| (f(&shifted(&params, k, H)) - f(&shifted(&params, k, -H))) / (2.0 * H))
            .collect();
        assert_close(g.as_slice(), &numeric);
    }
}

#[test]
fn meta_gradient_matches_directional_differences() {
    let mut rng = rng_from_seed(13);
    let spec = ModelSpec::new(3, vec![4], 3).unwrap();
    for gamma in [0.0, 0.3, 0.7, 1.0] {
        for m in 2..=6 {
            let temp = perturbed_init(&spec, &mut rng);
            let queries: Vec<LabeledDataset> =
                (0..m).map(|j| random_data(3, 3, 2 + j, &mut rng)).collect();
            let (losses, grads) = query_evaluate(&temp, &spec, &queries).unwrap();
            let g = meta_gradient(&losses, &grads, gamma).unwrap();
            let combined = |p: &ParameterVector| {
                let (l, _) = query_evaluate(p, &spec, &queries).unwrap();
                meta_loss(&l, gamma).unwrap().combined
            };
            let d: Vec<f64> = (0..temp.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let numeric =
                (combined(&along(&temp, &d, H)) - combined(&along(&temp, &d, -H))) / (2.0 * H);
            assert_close(&[g.dot(&d)], &[numeric]);
        }
    }
}

#[test]
fn variance_term_alone_has_the_centred_gradient() {
    // at gamma = 0 equal losses give a zero meta gradient
    let spec = ModelSpec::logistic(2, 2).unwrap();
    let params = init_params(&spec, 3);
    let q = LabeledDataset::new(vec![1.0, -1.0, 0.5, 0.5], vec![0, 1], 2).unwrap();
    let (losses, grads) = query_evaluate(&params, &spec, &[q.clone(), q.clone(), q]).unwrap();
    let g = meta_gradient(&losses, &grads, 0.0).unwrap();
    assert!(g.as_slice().iter().all(|v| *v == 0.0));
}
