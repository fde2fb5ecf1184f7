//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use f2bev::diff::GradCheckOptions;
use f2bev::heads::TaskMode;
use f2bev::pipeline::gradient_suite;
use f2bev::Scalar;

struct Outcome {
    pass: bool,
    detail: String,
}

fn projection() -> Outcome {
    let st = projection_fidelity(&rig(), 10_000, 1);
    let pin = pinhole_reduction(10_000, 2);
    Outcome {
        pass: st.min_cos > 1.0 - 1e-12 && st.max_px < 1e-6 && st.seconds < 2.0 && pin < 1e-9,
        detail: format!(
            "{} points, 1 - min cos {:.1e}, max pixel error {:.1e}, {:.2} s, pinhole {:.1e}",
            st.points,
            1.0 - st.min_cos,
            st.max_px,
            st.seconds,
            pin
        ),
    }
}

fn grid() -> Outcome {
    let bad = grid_mismatches();
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() { "50x50 at 0.33 m: 4 corners and center exact".into() } else { format!("{bad:?}") },
    }
}

fn oracles() -> Outcome {
    let cams = rig();
    let n = 120;
    let worst = |f: &dyn Fn(u64) -> f64| (0..n).map(f).fold(0.0, f64::max);
    let errs = [
        ("deformable", worst(&deformable_instance::<f64>), worst(&deformable_instance::<f32>)),
        ("spatial", worst(&|s| sca_oracle_diff::<f64>(s, &cams)), worst(&|s| sca_oracle_diff::<f32>(s, &cams))),
        ("temporal", worst(&temporal_instance::<f64>), worst(&temporal_instance::<f32>)),
    ];
    Outcome {
        pass: errs.iter().all(|e| e.1 < 1e-9 && e.2 < 1e-4),
        detail: format!(
            "{n} instances each; {}",
            errs.iter().map(|e| format!("{} {:.1e} / {:.1e}", e.0, e.1, e.2)).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn grad_suite<T: Scalar>() -> (usize, Vec<String>, f64) {
    let cases = gradient_suite::<T>(&GradCheckOptions::for_precision::<T>()).expect("gradient suite");
    let worst = cases.iter().map(|c| c.report.max_err()).fold(0.0, f64::max);
    (cases.len(), cases.iter().filter(|c| !c.report.passed()).map(|c| c.name.clone()).collect(), worst)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let (n64, f64s, w64) = grad_suite::<f64>();
    let (n32, f32s, w32) = grad_suite::<f32>();
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        pass: f64s.is_empty() && f32s.is_empty() && secs < 300.0,
        detail: format!("{n64} + {n32} cases, worst rel err {w64:.1e} (f64) / {w32:.1e} (f32), {secs:.1} s, failed {f64s:?} {f32s:?}"),
    }
}

fn masking() -> Outcome {
    let st = masking_check::<f32>(7, &rig(), 1000);
    Outcome {
        pass: st.pairs >= 1000 && st.changed == 0,
        detail: format!("{} pairs, {} changed, {} perturbations visible elsewhere", st.pairs, st.changed, st.effective),
    }
}

fn geometry() -> Outcome {
    let cams = rig();
    let stats: Vec<_> = (0..5).map(|s| geometric_consistency(s, &cams)).collect();
    Outcome {
        pass: stats.iter().all(|s| s.unoccluded > 0 && s.ratio() >= 0.95),
        detail: stats.iter().map(|s| format!("{}/{}", s.matched, s.unoccluded)).collect::<Vec<_>>().join(", "),
    }
}

fn learning() -> Outcome {
    let runs = [(TaskMode::Height, 0.90), (TaskMode::Segmentation, 0.90), (TaskMode::Multitask, 0.85)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (task, target) in runs {
        let r = overfit(task, target, 5000);
        let ok = r.steps <= 5000 && r.seconds < 1800.0 && r.iou.iter().all(|(_, v)| *v >= target);
        pass &= ok;
        let ious = r.iou.iter().map(|(t, v)| format!("{t} {v:.3}")).collect::<Vec<_>>().join(" ");
        parts.push(format!("{task:?}: {ious} after {} steps in {:.0} s", r.steps, r.seconds));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn metrics() -> Outcome {
    let checks = metric_checks();
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome {
        pass: failed.is_empty(),
        detail: if failed.is_empty() { format!("{} checks", checks.len()) } else { format!("failed {failed:?}") },
    }
}

fn temporal() -> Outcome {
    let st = temporal_effect(5);
    Outcome {
        pass: st.first_frame_equal && st.differing == st.frames - 1 && st.identity_exact,
        detail: format!(
            "{}/{} later frames differ, first frame equal {}, identity alignment exact {}",
            st.differing,
            st.frames - 1,
            st.first_frame_equal,
            st.identity_exact
        ),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("projection fidelity", projection),
        ("grid cell coordinates", grid),
        ("attention oracle equivalence", oracles),
        ("gradient suite", gradients),
        ("masking exactness", masking),
        ("geometric consistency", geometry),
        ("desk-scale learning", learning),
        ("metric conformance", metrics),
        ("temporal effect", temporal),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        failed += !o.pass as usize;
        println!("{} {}. {name}: {} ({:.1} s)", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {}/{} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
