//! Temporary probe: oracle values for the symmetric Table-2 instance.

use qcoupled_core::model::{build_network_model, NetworkParams};
use qcoupled_core::oracle::{refine_truncation, OracleMetric};

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
    let spec = build_network_model(&table2(0.5, 0.5)).unwrap();
    assert!(qcoupled_core::is_symmetric(&spec));
    for (name, metric) in [
        ("mean_x1", OracleMetric::MeanX1),
        ("mean_x2", OracleMetric::MeanX2),
        ("origin", OracleMetric::OriginProb),
    ] {
        let est = refine_truncation(&spec, metric, 1e-7).unwrap();
        println!(
            "{name}: {:.12} at level {} (boundary mass {:.3e})",
            est.value, est.level, est.boundary_mass
        );
        println!("  ladder: {:?}", est.ladder);
    }
}
