use bucket_cov::bayesopt::{bo_traces, median_at, NoiseMode, ObjectiveSpec, G_MINIMUM};
use bucket_cov::rng::RngSeed;

#[test]
fn noiseless_search_reaches_the_optimum() {
    let spec = ObjectiveSpec::with_cov([[0.0, 0.0], [0.0, 0.0]]);
    let traces = bo_traces(&spec, 50, 10, NoiseMode::WithCov, 10, RngSeed(77)).unwrap();
    for t in &traces {
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
    let m = median_at(&traces, 50);
    assert!(m - G_MINIMUM < 0.5, "median best {m} vs optimum {G_MINIMUM}");
}
