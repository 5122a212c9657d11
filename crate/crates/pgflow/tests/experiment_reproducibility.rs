//! Experiments are pure functions of their configuration: re-running one
//! must reproduce every metric value bit for bit.

use pgflow::experiments::{run_two_basin_experiment, TwoBasinConfig};

#[test]
fn two_basin_experiment_is_bit_reproducible() {
    let cfg = TwoBasinConfig { n_t: 33, n_x: 32, ..Default::default() };
    let a = run_two_basin_experiment(&cfg).unwrap();
    let b = run_two_basin_experiment(&cfg).unwrap();
    assert_eq!(a.digest, b.digest);
    assert_eq!(a.metrics.len(), b.metrics.len());
    for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(ma.name, mb.name);
        assert_eq!(ma.value.to_bits(), mb.value.to_bits(), "metric {} drifted", ma.name);
        assert_eq!(ma.pass, mb.pass);
    }
}
