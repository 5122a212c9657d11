//! Reflection symmetry of the double-well instrument: mirroring the terminal
//! cost in x swaps the roles of the two basins, because the dynamics are
//! invariant under the joint map `(x, u) -> (1 - x, -u)`. Flowing from `+1`
//! on the mirrored problem must therefore reproduce (to discretization
//! rounding) the cost of flowing from `-1` on the original, and the more
//! expensive basin swaps sides.

use std::f64::consts::PI;
use std::sync::Arc;

use pgflow::field::ControlField;
use pgflow::flow::{run_flow, FlowConfig, Termination};
use pgflow::grid::SpaceTimeGrid;
use pgflow::local_opt::ArgmaxConfig;
use pgflow::problems::build_problem;

#[test]
fn mirrored_terminal_cost_swaps_the_winning_basin() {
    let built = build_problem("quartic_trap").unwrap();
    let original = built.spec;
    let mut mirrored = original.clone();
    let h = original.terminal_cost.clone();
    mirrored.terminal_cost = Arc::new(move |x| h(&[1.0 - x[0]]));

    let grid = SpaceTimeGrid::new(original.geometry, built.default_horizon, 33, 32).unwrap();
    let mut cfg = FlowConfig::defaults(1);
    cfg.dtau = 0.2;
    cfg.max_steps = 400;
    cfg.stop_grad_norm = 2e-3;
    cfg.diag_argmax = ArgmaxConfig::incumbent_only(1);

    let run = |spec: &pgflow::ProblemSpec, start: f64| {
        let u0 = ControlField::constant(grid, &[start]).unwrap();
        let trace = run_flow(spec, u0, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::GradNorm);
        trace.final_state.j
    };

    let j_orig_pos = run(&original, 1.0);
    let j_orig_neg = run(&original, -1.0);
    let j_mirr_pos = run(&mirrored, 1.0);
    let j_mirr_neg = run(&mirrored, -1.0);

    // the basins trade places under the mirror
    assert!(
        (j_mirr_pos - j_orig_neg).abs() < 1e-9,
        "mirror(+1) = {j_mirr_pos} vs original(-1) = {j_orig_neg}"
    );
    assert!(
        (j_mirr_neg - j_orig_pos).abs() < 1e-9,
        "mirror(-1) = {j_mirr_neg} vs original(+1) = {j_orig_pos}"
    );
    // and the winner swaps sign
    assert!((j_orig_pos - j_orig_neg) * (j_mirr_pos - j_mirr_neg) < 0.0);

    // sanity: the mirrored terminal cost is the reflected original
    let probe = 0.21875;
    let orig_val = (original.terminal_cost)(&[1.0 - probe]);
    let mirr_val = (mirrored.terminal_cost)(&[probe]);
    assert_eq!(orig_val, mirr_val);
    let expected = 0.15 * (2.0 * PI * (1.0 - probe)).sin() + 0.075 * (4.0 * PI * (1.0 - probe)).sin();
    assert!((orig_val - expected).abs() < 1e-15);
}
