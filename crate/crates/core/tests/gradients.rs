mod common;

use geomix::config::Config;

/// Every gradient large enough for central differences to resolve matches
/// to 1e-5; the rest differ by no more than the stencil's resolution.
#[test]
fn full_loss_gradients_match_central_differences() {
    let cfg = common::reduced_config();
    let sys = common::two_molecule_system(1);
    let chk = common::full_loss_check(&cfg, &sys, 1);
    let floor = 16.0 * chk.resolution();
    let mut resolved = 0;
    for i in 0..chk.analytic.len() {
        let (a, fd) = (chk.analytic[i], chk.numeric[i]);
        if a.abs() >= 1e-3 {
            resolved += 1;
            assert!(chk.rel_err(i) <= 1e-5, "coordinate {i}: {a:e} vs {fd:e}");
        }
        assert!((a - fd).abs() <= 1e-5 * a.abs() + floor, "coordinate {i}: {a:e} vs {fd:e} (floor {floor:e})");
    }
    assert!(resolved > 100);
}

#[test]
fn baseline_gradients_match_central_differences() {
    use geomix::autodiff::{finite_difference_gradcheck, FD_STEP};
    use geomix::config::Architecture;
    use geomix::dataset::Normalizer;
    use geomix::synthetic::{generate_dataset, SyntheticSpec};
    use geomix::Model;

    let data = generate_dataset(&SyntheticSpec::small(4, 2));
    let cfg = Config {
        architecture: Architecture::ProportionMlp,
        hidden_dim: 8,
        ..Config::default()
    };
    let model = Model::new(&cfg, Normalizer::fit(&data, false), Model::vocabulary_of(&data)).unwrap();
    let (_, grads) = model.loss_and_gradients(&data[0], None, 0.0).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let mut probe = model.clone();
    let rep = finite_difference_gradcheck(
        |x| {
            probe.params.assign_flat(x)?;
            Ok(probe.loss_value(&data[0], None, 0.0)?.total)
        },
        &model.params.flatten(),
        &analytic,
        FD_STEP,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}
