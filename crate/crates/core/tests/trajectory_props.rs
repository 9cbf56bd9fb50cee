use dsmdp::rng::derive_seed;
use dsmdp::trajectory::{enumerate_trajectories, grad_log_prob, log_prob, sample_trajectory};
use dsmdp::{AttemptOutcome, DecisionAction, Params, Step, Trajectory, World};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = Params> {
    (-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64)
        .prop_map(|(s, dc, dw)| Params::new(s, dc, dw).unwrap())
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    (prop::collection::vec(any::<bool>(), 1..10), any::<bool>()).prop_map(|(bits, truncated)| {
        let outcomes: Vec<AttemptOutcome> = bits
            .into_iter()
            .map(|b| {
                if b {
                    AttemptOutcome::Correct
                } else {
                    AttemptOutcome::Wrong
                }
            })
            .collect();
        if truncated {
            Trajectory::truncated_from_outcomes(&outcomes).unwrap()
        } else {
            Trajectory::from_outcomes(&outcomes).unwrap()
        }
    })
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-probability written out step by step from the raw logits.
fn naive_log_prob(t: &Trajectory, p: &Params) -> f64 {
    let n = t.len();
    t.steps()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            // a truncated record's last STOP stands in for the RESAMPLE taken
            let decision = if t.truncated() && k + 1 == n {
                DecisionAction::Resample
            } else {
                s.decision
            };
            let sample = match s.outcome {
                AttemptOutcome::Correct => sig(p.theta_s),
                AttemptOutcome::Wrong => 1.0 - sig(p.theta_s),
            };
            let decide = match (s.outcome, decision) {
                (AttemptOutcome::Correct, DecisionAction::Stop) => sig(p.theta_d_c),
                (AttemptOutcome::Correct, DecisionAction::Resample) => 1.0 - sig(p.theta_d_c),
                (AttemptOutcome::Wrong, DecisionAction::Resample) => sig(p.theta_d_w),
                (AttemptOutcome::Wrong, DecisionAction::Stop) => 1.0 - sig(p.theta_d_w),
            };
            sample.ln() + decide.ln()
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn log_prob_factorizes(p in params(), t in trajectory()) {
        let a = log_prob(&t, &p);
        let b = naive_log_prob(&t, &p);
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradient_split_matches_finite_differences(p in params(), t in trajectory()) {
        let g = grad_log_prob(&t, &p);
        let h = 1e-6;
        let fd = |shift: fn(&Params, f64) -> Params| {
            (log_prob(&t, &shift(&p, h)) - log_prob(&t, &shift(&p, -h))) / (2.0 * h)
        };
        let fs = fd(|p, h| Params { theta_s: p.theta_s + h, ..*p });
        let fc = fd(|p, h| Params { theta_d_c: p.theta_d_c + h, ..*p });
        let fw = fd(|p, h| Params { theta_d_w: p.theta_d_w + h, ..*p });
        let total = g.total();
        prop_assert!((total.s - fs).abs() < 1e-8, "s {} vs {fs}", total.s);
        prop_assert!((total.d_c - fc).abs() < 1e-8, "d_c {} vs {fc}", total.d_c);
        prop_assert!((total.d_w - fw).abs() < 1e-8, "d_w {} vs {fw}", total.d_w);
        prop_assert_eq!(g.sampling.d_c, 0.0);
        prop_assert_eq!(g.sampling.d_w, 0.0);
        prop_assert_eq!(g.decision.s, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn enumeration_is_a_distribution(p in params(), horizon in 1usize..=8) {
        let world = World { max_attempts: horizon, ..World::default() };
        let paths = enumerate_trajectories(&world).unwrap();
        let mass: f64 = paths.iter().map(|e| log_prob(&e.trajectory, &p).exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-12, "mass {mass}");
        let factored: f64 = paths.iter().map(|e| e.probability(&p)).sum();
        prop_assert!((factored - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_pure(p in params(), seed in any::<u64>(), horizon in 1usize..12) {
        let world = World { max_attempts: horizon, ..World::default() };
        let a = sample_trajectory(&p, &world, seed);
        let b = sample_trajectory(&p, &world, seed);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.len() <= horizon);
        if a.truncated() {
            prop_assert_eq!(a.len(), horizon);
        }
    }

    #[test]
    fn wire_format_round_trips(t in trajectory()) {
        let line = t.to_json_line();
        prop_assert!(!line.contains('\n'));
        let back: Trajectory = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, t);
    }
}

#[test]
fn truncation_only_at_the_horizon() {
    let p = Params::new(-1.0, -2.0, 3.0).unwrap();
    let world = World {
        max_attempts: 5,
        ..World::default()
    };
    for i in 0..2000 {
        let t = sample_trajectory(&p, &world, derive_seed(11, i));
        assert_eq!(t.steps().last().unwrap().decision, DecisionAction::Stop);
        if t.truncated() {
            assert_eq!(t.len(), 5);
        }
    }
}

#[test]
fn first_attempt_rate_matches_p_correct() {
    let p = Params::new(0.4, 2.2, 1.4).unwrap();
    let world = World::default();
    let n = 20_000;
    let hits = (0..n)
        .filter(|&i| {
            sample_trajectory(&p, &world, derive_seed(3, i)).steps()[0].outcome
                == AttemptOutcome::Correct
        })
        .count();
    let pc = p.action_probs().p_correct;
    let se = (pc * (1.0 - pc) / n as f64).sqrt();
    let rate = hits as f64 / n as f64;
    assert!((rate - pc).abs() < 4.0 * se, "rate {rate} vs {pc}");
}

#[test]
fn rejects_malformed_records() {
    use AttemptOutcome::*;
    use DecisionAction::*;
    assert!(Trajectory::new(vec![], false).is_err());
    assert!(Trajectory::new(
        vec![Step::new(Correct, Stop), Step::new(Wrong, Stop)],
        false
    )
    .is_err());
    assert!(Trajectory::new(vec![Step::new(Wrong, Resample)], false).is_err());
    assert!(serde_json::from_str::<Trajectory>(
        r#"{"steps":[{"outcome":"C","decision":"RESAMPLE"}]}"#
    )
    .is_err());
    let ok: Trajectory = serde_json::from_str(
        r#"{"steps":[{"outcome":"W","decision":"RESAMPLE"},{"outcome":"C","decision":"STOP"}]}"#,
    )
    .unwrap();
    assert_eq!(ok, Trajectory::worked_example());
}
