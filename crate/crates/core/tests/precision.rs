use dsmdp::exact::TrajectorySpace;
use dsmdp::objectives::{kl_gradient, weighted_score};
use dsmdp::{Params, Params32, Trajectory, World, World32};

#[test]
fn single_precision_tracks_double() {
    let traj = Trajectory::worked_example();
    let (p64, r64) = (Params::worked_example(), Params::worked_example_reference());
    let (p32, r32) = (
        Params32::worked_example(),
        Params32::worked_example_reference(),
    );
    let (w64, w32) = (World::default(), World32::default());

    let a = kl_gradient(&traj, &p64, &r64, &w64).as_vec().to_array();
    let b = kl_gradient(&traj, &p32, &r32, &w32).as_vec().to_array();
    for (x, y) in a.iter().zip(b) {
        assert!((x - y as f64).abs() < 1e-5, "{x} vs {y}");
    }
    let a = weighted_score(&traj, 0.5, &p64, &w64).to_array();
    let b = weighted_score(&traj, 0.5f32, &p32, &w32).to_array();
    for (x, y) in a.iter().zip(b) {
        assert!((x - y as f64).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn single_precision_enumeration_mass() {
    let space = TrajectorySpace::new(&World32 {
        max_attempts: 8,
        ..World32::default()
    })
    .unwrap();
    let p = Params32::new(-0.3, 1.1, 0.7).unwrap();
    let mass: f32 = space.paths().iter().map(|e| e.probability(&p)).sum();
    assert!((mass - 1.0).abs() < 1e-5, "{mass}");
}
