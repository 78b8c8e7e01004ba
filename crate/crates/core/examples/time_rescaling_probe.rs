//! Compressing a control schedule in time: the error functional shrinks
//! linearly with the compression factor while the mean endpoint is fixed.

use statlin_plan::cli::{brockett_probe, ProbeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ProbeConfig {
        etas: vec![0.8, 0.4, 0.2, 0.1, 0.05, 0.025],
        ..ProbeConfig::default()
    };
    let report = brockett_probe(&cfg)?;
    println!("{:>7} {:>14} {:>14}", "eta", "constraint", "end error");
    for r in &report.rows {
        println!("{:7.3} {:14.6e} {:14.3e}", r.eta, r.constraint_value, r.terminal_error);
    }
    println!("log-log slope {:.4}", report.slope);
    Ok(())
}
