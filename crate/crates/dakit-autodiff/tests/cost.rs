use dakit_autodiff::{record, Value};
use nalgebra::DVector;

// One reverse sweep prices the whole gradient of a many-input scalar map,
// where forward mode pays one sweep per input coordinate. The counters make
// that asymmetry observable without wall-clock timing.
#[test]
fn reverse_gradient_costs_one_sweep_for_many_inputs() {
    let n = 200;
    let x: Vec<f64> = (0..n).map(|i| 0.01 * i as f64 - 0.7).collect();
    let inputs = [Value::Vector(DVector::from_vec(x))];

    let mut tape = record(&inputs, |tb, v| {
        // sum of sin(x_i) * x_i, built coordinatewise so the tape is long
        let mut total = tb.constant(0.0)?;
        for i in 0..n {
            let xi = tb.index(v[0], i)?;
            let s = tb.sin(xi)?;
            let p = tb.mul(s, xi)?;
            total = tb.add(total, p)?;
        }
        Ok(vec![total])
    })
    .unwrap();

    let len = tape.len() as u64;

    tape.reset_counters();
    tape.reverse_gradient(&inputs).unwrap();
    let after_rev = tape.counters();
    assert_eq!(after_rev.forward_node_visits, 0);
    assert!(
        after_rev.reverse_node_visits <= 2 * len,
        "reverse visits {} exceed 2x tape length {}",
        after_rev.reverse_node_visits,
        2 * len
    );

    tape.reset_counters();
    tape.forward_jacobian(&inputs).unwrap();
    let after_fwd = tape.counters();
    assert_eq!(after_fwd.forward_node_visits, n as u64 * len);
    assert!(after_fwd.forward_node_visits >= 100 * after_rev.reverse_node_visits);
}
