//! Published worked-example values versus recomputation.
//!
//! The example: θ = (0.4, 2.2, 1.4), reference (0.3, 2.0, 1.2), both answer
//! lengths 8, γ = 1, the trajectory W→RESAMPLE, C→STOP with advantage 0.5.

use serde::Serialize;

use dsmdp::objectives::{
    combine, kl_gradient, kl_q_values, weighted_score, ObjectiveGradient, Track,
};
use dsmdp::{KlSignConvention, ParamVec, Params, Trajectory, World};

use crate::output::{fmt, OutputDir};
use crate::{CliError, CliResult, GoldensArgs};

pub const TOLERANCE: f64 = 5e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GoldenRow {
    pub name: &'static str,
    pub expected: f64,
    pub computed: f64,
    pub diff: f64,
    /// Flips sign under the alternate KL convention.
    pub sign_sensitive: bool,
    pub status: Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    /// Sign-sensitive value that differs under the alternate convention, as documented.
    Xfail,
    /// Sign-sensitive value that unexpectedly matches under the alternate convention.
    Xpass,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Xfail => "XFAIL",
            Status::Xpass => "XPASS",
        }
    }

    fn is_ok(self) -> bool {
        matches!(self, Status::Pass | Status::Xfail)
    }
}

/// Published values: (name, value, sign-sensitive).
const PUBLISHED: [(&str, f64, bool); 39] = [
    ("P(C)", 0.5987, false),
    ("P(W)", 0.4013, false),
    ("P(STOP|C)", 0.9002, false),
    ("P(RESAMPLE|W)", 0.8022, false),
    ("P_ref(C)", 0.5744, false),
    ("P_ref(W)", 0.4256, false),
    ("P_ref(STOP|C)", 0.8808, false),
    ("P_ref(RESAMPLE|W)", 0.7685, false),
    ("reward d/d theta_s", -0.0987, false),
    ("reward d/d theta_d_w", 0.0989, false),
    ("reward d/d theta_d_c", 0.0499, false),
    ("per-token penalty, sample W", 0.0588, true),
    ("per-token penalty, sample C", -0.0415, true),
    ("d_1 sample W", 0.4704, true),
    ("d_1 RESAMPLE", -0.0429, true),
    ("d_2 sample C", -0.3320, true),
    ("d_2 STOP", -0.0218, true),
    ("future, step 2 STOP", 0.0, false),
    ("future, step 2 sample C", -0.0218, true),
    ("future, step 1 RESAMPLE", -0.3538, true),
    ("future, step 1 sample W", -0.3967, true),
    ("Q step 2 STOP", -0.0218, true),
    ("Q step 2 sample C", -0.3538, true),
    ("Q step 1 RESAMPLE", -0.3967, true),
    ("Q step 1 sample W", 0.0737, true),
    ("score step 2 STOP (theta_d_c)", 0.0998, false),
    ("score step 2 sample C (theta_s)", 0.4013, false),
    ("score step 1 RESAMPLE (theta_d_w)", 0.1978, false),
    ("score step 1 sample W (theta_s)", -0.5987, false),
    ("contribution step 2 STOP", -0.0022, true),
    ("contribution step 2 sample C", -0.1420, true),
    ("contribution step 1 RESAMPLE", -0.0785, true),
    ("contribution step 1 sample W", -0.0441, true),
    ("KL d/d theta_s", -0.1861, true),
    ("KL d/d theta_d_w", -0.0785, true),
    ("KL d/d theta_d_c", -0.0022, true),
    ("net d/d theta_s", -0.2848, false),
    ("net d/d theta_d_w", 0.0204, false),
    ("net d/d theta_d_c", 0.0477, false),
];

/// Recomputed values in [`PUBLISHED`] order.
pub fn recompute(convention: KlSignConvention, perturb: f64) -> dsmdp::Result<Vec<f64>> {
    let base = Params::worked_example();
    let params = Params::new(base.theta_s + perturb, base.theta_d_c, base.theta_d_w)?;
    let reference = Params::worked_example_reference();
    let world = World {
        kl_sign_convention: convention,
        ..World::default()
    };
    let traj = Trajectory::worked_example();
    let p = params.action_probs();
    let r = reference.action_probs();

    let reward = ObjectiveGradient::new(Track::Reward, weighted_score(&traj, 0.5, &params, &world));
    let rows = kl_q_values(&traj, &params, &reference, &world);
    // Table order runs backward: STOP, sample C, RESAMPLE, sample W.
    let back = [&rows[3], &rows[2], &rows[1], &rows[0]];
    let on_param = |v: ParamVec<f64>, name: &str| match name {
        "theta_s" => v.s,
        "theta_d_c" => v.d_c,
        _ => v.d_w,
    };
    let kl = kl_gradient(&traj, &params, &reference, &world);
    let net = combine(reward, kl, &world).net;
    let len = world.len_wrong as f64;

    let mut v = vec![
        p.p_correct,
        p.p_wrong,
        p.p_stop_given_c,
        p.p_resample_given_w,
        r.p_correct,
        r.p_wrong,
        r.p_stop_given_c,
        r.p_resample_given_w,
        reward.d_theta_s,
        reward.d_theta_d_w,
        reward.d_theta_d_c,
        rows[0].immediate / len,
        rows[2].immediate / world.len_correct as f64,
        rows[0].immediate,
        rows[1].immediate,
        rows[2].immediate,
        rows[3].immediate,
    ];
    v.extend(back.iter().map(|e| e.future));
    v.extend(back.iter().map(|e| e.q));
    v.extend(back.iter().map(|e| on_param(e.score, e.parameter())));
    v.extend(
        back.iter()
            .map(|e| on_param(e.contribution(), e.parameter())),
    );
    v.extend([kl.d_theta_s, kl.d_theta_d_w, kl.d_theta_d_c]);
    v.extend([net.d_theta_s, net.d_theta_d_w, net.d_theta_d_c]);
    Ok(v)
}

pub fn compare(convention: KlSignConvention, perturb: f64) -> dsmdp::Result<Vec<GoldenRow>> {
    let computed = recompute(convention, perturb)?;
    let alternate = convention != KlSignConvention::AppendixC;
    Ok(PUBLISHED
        .iter()
        .zip(computed)
        .map(|(&(name, expected, sign_sensitive), computed)| {
            let diff = computed - expected;
            let within = diff.abs() <= TOLERANCE;
            let status = match (alternate && sign_sensitive, within) {
                (false, true) => Status::Pass,
                (false, false) => Status::Fail,
                (true, false) => Status::Xfail,
                (true, true) => Status::Xpass,
            };
            GoldenRow {
                name,
                expected,
                computed,
                diff,
                sign_sensitive,
                status,
            }
        })
        .collect())
}

pub fn run(args: &GoldensArgs) -> CliResult<()> {
    let convention: KlSignConvention = args.convention.into();
    let perturb = args.perturb.unwrap_or(0.0);
    let rows = compare(convention, perturb)?;

    println!(
        "{:<36} {:>10} {:>12} {:>11}  status",
        "value", "published", "computed", "diff"
    );
    for r in &rows {
        println!(
            "{:<36} {:>10.4} {:>12.6} {:>11.2e}  {}",
            r.name,
            r.expected,
            r.computed,
            r.diff,
            r.status.label()
        );
    }
    let bad: Vec<&GoldenRow> = rows.iter().filter(|r| !r.status.is_ok()).collect();
    let passed = rows.iter().filter(|r| r.status == Status::Pass).count();
    println!(
        "{passed}/{} within {TOLERANCE:e}; {} expected sign flips; {} unexpected",
        rows.len(),
        rows.iter().filter(|r| r.status == Status::Xfail).count(),
        bad.len()
    );

    if let Some(dir) = &args.out {
        let mut out = OutputDir::create(dir)?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.name.to_string(),
                    fmt(r.expected),
                    fmt(r.computed),
                    fmt(r.diff),
                    fmt(r.sign_sensitive),
                    r.status.label().to_string(),
                ]
            })
            .collect();
        out.write_table(
            args.format,
            "goldens",
            &[
                "value",
                "published",
                "computed",
                "diff",
                "sign_sensitive",
                "status",
            ],
            &table,
            &rows,
        )?;
        let config = serde_json::json!({
            "convention": convention,
            "perturb": perturb,
            "tolerance": TOLERANCE,
        });
        out.finish("goldens", None, &config)?;
    }

    if bad.is_empty() {
        Ok(())
    } else {
        let report: Vec<String> = bad
            .iter()
            .map(|r| {
                format!(
                    "{}: published {} computed {:.6} (diff {:+.2e})",
                    r.name, r.expected, r.computed, r.diff
                )
            })
            .collect();
        Err(CliError::Validation(format!(
            "{} value(s) outside tolerance:\n  {}",
            bad.len(),
            report.join("\n  ")
        )))
    }
}
