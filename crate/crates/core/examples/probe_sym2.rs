//! Temporary probe: printed closed form vs direct diagonal differentiation.

use qcoupled_core::kernel::{contour_derivative, eval_phase_solve, eval_rkc, ComplexPoint};
use qcoupled_core::model::{build_network_model, NetworkParams};
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

fn main() {
    let one = C64::new(1.0, 0.0);
    let spec = build_network_model(&table2(0.5, 0.5)).unwrap();
    let rad = 5e-3;

    let n_theta = spec.n as f64 * spec.switch.theta(0, 1);
    let a = spec.interior.rate(1, 0);
    let b = spec.interior.rate(1, 1);
    let d = spec.interior.rate(-1, 0);
    let q2 = spec.boundary_y.rate(0, -1);
    println!("n_theta={n_theta}  a={a} b={b} d={d} q2={q2}");
    println!(
        "interior transfers: ( -1,1)={}  (1,-1)={}",
        spec.interior.rate(-1, 1),
        spec.interior.rate(1, -1)
    );

    let t0 = eval_phase_solve(&spec, ComplexPoint::real(1.0, 1.0))
        .unwrap()
        .t
        .re;
    println!("T0={t0:.12}  T0*Ntheta={:.12}", t0 * n_theta);

    let tx = contour_derivative(
        |x| Ok(eval_phase_solve(&spec, ComplexPoint::new(x, one))?.t),
        one,
        1,
        rad,
    )
    .unwrap()
    .re;
    let ty = contour_derivative(
        |y| Ok(eval_phase_solve(&spec, ComplexPoint::new(one, y))?.t),
        one,
        1,
        rad,
    )
    .unwrap()
    .re;
    let t2d = contour_derivative(
        |x| Ok(eval_phase_solve(&spec, ComplexPoint::new(x, x))?.t),
        one,
        2,
        rad,
    )
    .unwrap()
    .re;
    println!("Tx={tx:.10}  Ty={ty:.10}  T2diag={t2d:.10}");

    // n(x) = T(x,x) R(x,x) - x^2 directly (R assembled from the fields so the
    // contour may leave the closed bidisc).
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
        let t = eval_phase_solve(&spec, ComplexPoint::new(x, x))?.t;
        Ok(t * r_at(x, x) - x * x)
    };
    let n1 = contour_derivative(n_map, one, 1, rad).unwrap().re;
    let n2 = contour_derivative(n_map, one, 2, rad).unwrap().re;
    println!("n'(1)={n1:.10}  n''(1)={n2:.10}");
    let bracket = n_theta * (tx + t0) + t0 * (d - a - b) - 1.0;
    println!("printed bracket={bracket:.10}  2*bracket={:.10}", 2.0 * bracket);

    // phase prefactors by public calls
    let f_sum: f64 = eval_phase_solve(&spec, ComplexPoint::real(1.0, 1.0))
        .unwrap()
        .f
        .iter()
        .map(|v| v.re)
        .sum();
    let df_dx = contour_derivative(
        |x| Ok(eval_phase_solve(&spec, ComplexPoint::new(x, one))?.f.iter().sum()),
        one,
        1,
        rad,
    )
    .unwrap()
    .re;
    let df_dy = contour_derivative(
        |y| Ok(eval_phase_solve(&spec, ComplexPoint::new(one, y))?.f.iter().sum()),
        one,
        1,
        rad,
    )
    .unwrap()
    .re;
    let pi11 = 1.0 / (1.0 + f_sum);
    println!("f_sum={f_sum:.10}  df_dx={df_dx:.10}  df_dy={df_dy:.10}  Pi11={pi11:.10}");

    let rho = t0 * (a + b) / (t0 * (n_theta + d) + n_theta * tx - 1.0);
    println!("rho={rho:.10}");

    let p00 = pi11 * n1 / (t0 * q2);
    let p00_printed = 2.0 * pi11 * bracket / (t0 * q2);
    println!("P00 derived={p00:.12}  printed={p00_printed:.12}  oracle=0.629032258065");

    let s_printed =
        2.0 * (2.0 * tx * (n_theta + d - a - b) + t0 * (n_theta + 2.0 * d - 4.0 * a - 5.0 * b))
            + n_theta * t2d;
    let m_printed = (p00 * q2 * (2.0 * tx + t0) + 0.5 * s_printed * pi11) / (2.0 * bracket);
    let m_derived = (q2 * p00 * (t0 + tx + ty) - pi11 * n2 / 2.0) / (2.0 * n1);
    println!("S_printed={s_printed:.10}");
    println!("M printed={m_printed:.10}  derived={m_derived:.10}");

    let lift = 1.0 + f_sum;
    for (name, m) in [("printed", m_printed), ("derived", m_derived)] {
        let m1 = pi11 * df_dx + m * lift;
        let m2 = pi11 * df_dy + m * lift;
        println!(
            "{name}: M1={m1:.10} (oracle 0.195288217855, err {:+.3e})  M2={m2:.10} (oracle 0.201282475490, err {:+.3e})",
            (m1 - 0.195288217855) / 0.195288217855,
            (m2 - 0.201282475490) / 0.201282475490,
        );
    }
}
