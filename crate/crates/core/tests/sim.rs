use std::f64::consts::PI;

use proptest::prelude::*;
use stnet::sim::{
    apply_load, backbone_point, backbone_samples, marker_positions, tendon_to_arc, tip_tangent, trajectory,
    ExternalLoad, LoadCondition, RobotSpec, THETA_MAX,
};

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn envelope_q() -> impl Strategy<Value = [f64; 4]> {
    let r = RobotSpec::default().pitch_radius;
    (0.0..=THETA_MAX, -PI..PI).prop_map(move |(t, p)| {
        let (qx, qy) = (r * t * p.cos(), r * t * p.sin());
        [qx, qy, -qx, -qy]
    })
}

proptest! {
    #[test]
    fn chords_never_exceed_arc_spacing(q in envelope_q()) {
        let spec = RobotSpec::default();
        let p = marker_positions(&q, &LoadCondition::None.load(), &spec).unwrap();
        let mut prev = [0.0; 3];
        let spacing = spec.length / spec.marker_count() as f64;
        for m in &p {
            prop_assert!(dist(&prev, m) <= spacing + 1e-12);
            prev = *m;
        }
        prop_assert!(p.iter().all(|m| dist(m, &[0.0; 3]) <= spec.length + 1e-9));
    }

    #[test]
    fn tendon_map_is_odd(q in prop::array::uniform4(-20.0f64..20.0)) {
        let spec = RobotSpec::default();
        let a = tendon_to_arc(&q, &spec);
        let b = tendon_to_arc(&q.map(|v| -v), &spec);
        prop_assert_eq!(a.theta, b.theta);
        prop_assert!(a.theta <= THETA_MAX);
        prop_assert!(a.phi > -PI && a.phi <= PI);
        if a.theta > 1e-9 {
            let d = (b.phi - a.phi).rem_euclid(2.0 * PI);
            prop_assert!((d - PI).abs() < 1e-12, "phi {} vs {}", a.phi, b.phi);
        }
    }

    #[test]
    fn zero_compliance_load_is_identity(
        q in envelope_q(),
        f in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let spec = RobotSpec { load_compliance: 0.0, ..RobotSpec::default() };
        let state = tendon_to_arc(&q, &spec);
        let pts: Vec<_> = spec.marker_arcs.iter().map(|&s| backbone_point(&state, s, spec.length).unwrap()).collect();
        let out = apply_load(&pts, &spec.marker_arcs, &ExternalLoad { force: f }, &spec, &tip_tangent(&state)).unwrap();
        prop_assert_eq!(out, pts);
    }

    #[test]
    fn outputs_finite_in_envelope(q in envelope_q(), li in 0usize..4) {
        let spec = RobotSpec::default();
        let load = LoadCondition::ALL[li].load();
        let p = backbone_samples(&q, &load, &spec, 50).unwrap();
        prop_assert!(p.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn unloaded_backbone_has_length_l() {
    let spec = RobotSpec::default();
    let r = spec.pitch_radius;
    for theta in [0.0, 0.3, THETA_MAX] {
        let q = [r * theta, 0.0, -r * theta, 0.0];
        let p = backbone_samples(&q, &LoadCondition::None.load(), &spec, 2001).unwrap();
        let len: f64 = p.windows(2).map(|w| dist(&w[0], &w[1])).sum();
        assert!((len - spec.length).abs() < 1e-4, "theta {theta}: {len}");
    }
}

#[test]
fn trajectory_stays_in_envelope_for_every_trial() {
    let spec = RobotSpec::default();
    for (i, load) in LoadCondition::ALL.into_iter().enumerate() {
        let steps = trajectory(5, 176, i as u64, &spec, load).unwrap();
        assert_eq!(steps.len(), 880);
        assert!(steps.iter().all(|s| s.load == load));
        let max = steps.iter().map(|s| tendon_to_arc(&s.q, &spec).theta).fold(0.0, f64::max);
        assert!(max <= THETA_MAX && max > 0.8 * THETA_MAX);
        assert_eq!(steps, trajectory(5, 176, i as u64, &spec, load).unwrap());
    }
}

#[test]
fn loads_shift_the_tip_differently() {
    let spec = RobotSpec::default();
    let q = [3.0, 1.0, -3.0, -1.0];
    let free = marker_positions(&q, &LoadCondition::None.load(), &spec).unwrap();
    let mut shifts = Vec::new();
    for l in [LoadCondition::Fe1, LoadCondition::Fe2, LoadCondition::Fe3] {
        let p = marker_positions(&q, &l.load(), &spec).unwrap();
        shifts.push(dist(&p[4], &free[4]));
        assert!(dist(&p[0], &free[0]) < dist(&p[4], &free[4]));
    }
    assert!(shifts.iter().all(|&s| s > 0.1), "{shifts:?}");
}
