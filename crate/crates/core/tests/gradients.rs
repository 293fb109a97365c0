use espo_core::mdm::{build_elbo_graph, build_meanfield_graph, EstimatorForm, TokenSequence};
use espo_core::nn::{grad_check, Denoiser, DenoiserConfig};
use espo_core::variance::draw_plan;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (Denoiser, espo_core::nn::ParameterSet, TokenSequence) {
    let mut cfg = DenoiserConfig::new(6, 8, 2, 2, 8);
    cfg.init_std = 0.4;
    let model = Denoiser::new(cfg).unwrap();
    let params = model.init(&mut ChaCha8Rng::seed_from_u64(21));
    let seq = TokenSequence::new(vec![3, 4], vec![2, 5, 5, 3]).unwrap();
    (model, params, seq)
}

#[test]
fn elbo_graph_gradients_match_finite_differences() {
    let (model, params, seq) = setup();
    for form in [EstimatorForm::TForm, EstimatorForm::LForm, EstimatorForm::Coupled] {
        let plan = draw_plan(form, &seq, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let report = grad_check(
            &params,
            |g, b| {
                let vars = build_elbo_graph(g, b, &model, &[(&seq, &plan)])?;
                Ok(g.sum(vars.totals))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{form:?}: {:?}", report.flagged.first());
    }
}

#[test]
fn meanfield_gradients_match_finite_differences() {
    let (model, params, seq) = setup();
    let report = grad_check(
        &params,
        |g, b| {
            let (v, _) = build_meanfield_graph(g, b, &model, &[&seq])?;
            Ok(g.sum(v))
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.flagged.first());
}
