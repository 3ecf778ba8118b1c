//! Temporary probe: derived symmetric closed form vs oracle on the grid.

use qcoupled_core::kernel::{contour_derivative, eval_phase_solve, ComplexPoint};
use qcoupled_core::model::{build_network_model, ModelSpec, NetworkParams};
use qcoupled_core::oracle::{refine_truncation, OracleMetric};
use qcoupled_core::C64;

fn table2(lambda: f64, gamma: f64) -> NetworkParams {
    NetworkParams {
        lambda1: vec![lambda, 0.5, 0.1],
        lambda2: vec![lambda, 0.6, 0.2],
        nu1: 6.0,
        nu2: 6.0,
        r12: 0.3,
        r21: 0.3,
        gamma: vec![gamma, gamma],
        tau: vec![5.0, 8.0],
        w: 0.5,
    }
}

fn derived(spec: &ModelSpec) -> (f64, f64, f64, f64) {
    let one = C64::new(1.0, 0.0);
    let rad = 1e-2;
    let t0 = eval_phase_solve(spec, ComplexPoint::real(1.0, 1.0)).unwrap().t.re;
    let tx = contour_derivative(
        |x| Ok(eval_phase_solve(spec, ComplexPoint::new(x, one))?.t),
        one, 1, rad,
    ).unwrap().re;
    let ty = contour_derivative(
        |y| Ok(eval_phase_solve(spec, ComplexPoint::new(one, y))?.t),
        one, 1, rad,
    ).unwrap().re;
    let r_at = |x: C64, y: C64| -> C64 {
        let mut d0 = C64::new(spec.switch.theta_out(0), 0.0);
        for (i, j, rate) in spec.interior.nonneg() {
            if (i, j) != (0, 0) {
                d0 += rate * (one - x.powi(i) * y.powi(j));
            }
        }
        let mut r = x * y * d0;
        for (j, rate) in spec.interior.x_decrements() {
            r += y * rate * (x - y.powi(j));
        }
        for (i, rate) in spec.interior.y_decrements() {
            r += x * rate * (y - x.powi(i));
        }
        r
    };
    let n_map = |x: C64| -> Result<C64, qcoupled_core::kernel::KernelError> {
        let t = eval_phase_solve(spec, ComplexPoint::new(x, x))?.t;
        Ok(t * r_at(x, x) - x * x)
    };
    let n1 = contour_derivative(n_map, one, 1, rad).unwrap().re;
    let n2 = contour_derivative(n_map, one, 2, rad).unwrap().re;
    let f_sum: f64 = eval_phase_solve(spec, ComplexPoint::real(1.0, 1.0))
        .unwrap().f.iter().map(|v| v.re).sum();
    let df_dx = contour_derivative(
        |x| Ok(eval_phase_solve(spec, ComplexPoint::new(x, one))?.f.iter().sum()),
        one, 1, rad,
    ).unwrap().re;
    let df_dy = contour_derivative(
        |y| Ok(eval_phase_solve(spec, ComplexPoint::new(one, y))?.f.iter().sum()),
        one, 1, rad,
    ).unwrap().re;
    let pi11 = 1.0 / (1.0 + f_sum);
    let q2 = spec.boundary_y.rate(0, -1);
    let p00 = pi11 * n1 / (t0 * q2);
    let m = (q2 * p00 * (t0 + tx + ty) - pi11 * n2 / 2.0) / (2.0 * n1);
    let lift = 1.0 + f_sum;
    (
        pi11 * df_dx + m * lift,
        pi11 * df_dy + m * lift,
        p00,
        m,
    )
}

fn main() {
    println!("lambda gamma | M1_form M1_oracle err1 | M2_form M2_oracle err2 | sum_err | P00_err");
    for &gamma in &[0.5, 1.0] {
        for &lambda in &[0.2, 0.5, 0.8, 1.1] {
            let spec = build_network_model(&table2(lambda, gamma)).unwrap();
            let (m1, m2, p00, _m) = derived(&spec);
            let o1 = refine_truncation(&spec, OracleMetric::MeanX1, 1e-7).unwrap().value;
            let o2 = refine_truncation(&spec, OracleMetric::MeanX2, 1e-7).unwrap().value;
            let op = refine_truncation(&spec, OracleMetric::OriginProb, 1e-7).unwrap().value;
            println!(
                "{lambda:.1} {gamma:.1} | {m1:.8} {o1:.8} {:+.2e} | {m2:.8} {o2:.8} {:+.2e} | {:+.2e} | {:+.2e}",
                (m1 - o1) / o1,
                (m2 - o2) / o2,
                (m1 + m2 - o1 - o2) / (o1 + o2),
                (p00 - op) / op,
            );
        }
    }

    // Fully symmetrised degraded modes: closed form should be exact.
    let mut p = table2(0.5, 0.5);
    p.lambda1 = vec![0.5, 0.55, 0.15];
    p.lambda2 = vec![0.5, 0.55, 0.15];
    let spec = build_network_model(&p).unwrap();
    let (m1, m2, p00, _m) = derived(&spec);
    let o1 = refine_truncation(&spec, OracleMetric::MeanX1, 1e-7).unwrap().value;
    let op = refine_truncation(&spec, OracleMetric::OriginProb, 1e-7).unwrap().value;
    println!(
        "fully symmetric: M1={m1:.10} M2={m2:.10} oracle={o1:.10} err={:+.2e} P00 err={:+.2e}",
        (m1 - o1) / o1,
        (p00 - op) / op,
    );
}
