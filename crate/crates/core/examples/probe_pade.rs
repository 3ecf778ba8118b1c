//! Temporary probe: series coefficients and rational approximants.

use qcoupled_core::model::build_network_model;
use qcoupled_core::psa::{pade_from_series, psa_moment_series};
use qcoupled_core::model::NetworkParams;

fn main() {
    let mut p = NetworkParams {
        lambda1: vec![0.5, 0.5, 0.1],
        lambda2: vec![0.5, 0.6, 0.2],
        nu1: 6.0,
        nu2: 6.0,
        r12: 0.3,
        r21: 0.3,
        gamma: vec![0.5, 0.5],
        tau: vec![5.0, 8.0],
        w: 0.5,
    };
    p.lambda1 = vec![0.5, 0.55, 0.15];
    p.lambda2 = vec![0.5, 0.55, 0.15];
    let spec = build_network_model(&p).unwrap();
    let series = psa_moment_series(&spec, 10).unwrap();
    println!("v1: {:?}", series.series_x1());
    println!("v2: {:?}", series.series_x2());
    for (l, k) in [(5usize, 5usize), (4, 4), (5, 4), (3, 3), (2, 2)] {
        match pade_from_series(&series.series_x1(), l, k) {
            Ok(a) => println!("[{l}/{k}] eval(0.5) = {:.10}", a.eval(0.5)),
            Err(e) => println!("[{l}/{k}] error: {e}"),
        }
    }
    println!("partial sums at w=0.5:");
    for m in 0..=10 {
        println!("  M={m}: {:.10}", series.mean_x1(0.5, m));
    }
}
