//! Picking the brightness threshold that singles out one example: the
//! secure-aggregation optimum from order-statistic CDFs, and the fixed
//! dataset quantile of the global setting.

use seerlab::data::{synthetic, SyntheticSpec};
use seerlab::property::{
    estimate_order_stat_cdfs, global_quantile_threshold, measure_all, optimize_threshold,
    secagg_event_rates, Measurement,
};

fn main() -> seerlab::Result<()> {
    let ds = synthetic(&SyntheticSpec {
        n: 8192,
        ..Default::default()
    })?;
    let m = Measurement::Brightness;
    let values = measure_all(ds.images(), &m)?;
    let b = 16;

    let (phi1, phi2) = estimate_order_stat_cdfs(&ds, b, &m, 4000, 0)?;
    println!("B={b}, z-scored brightness, 4000 batches");
    println!(
        "{:>3} {:>8} {:>9} {:>11} {:>12}",
        "C", "tau", "p", "one client", "one example"
    );
    for c in [1, 2, 4, 8] {
        let (tau, p) = optimize_threshold(&phi1, &phi2, c)?;
        let (one_client, one_example) = secagg_event_rates(&values, b, c, tau, 4000, 1)?;
        println!("{c:>3} {tau:>8.4} {p:>9.5} {one_client:>11.4} {one_example:>12.4}");
    }

    for b in [16, 128] {
        let tau = global_quantile_threshold(&ds, &m, b)?;
        let q = 1.0 / b as f64;
        let ideal = (1.0 - q).powi(b as i32 - 1);
        println!("global B={b}: tau {tau:.4}, ideal P(|i_rec| = 1) {ideal:.4}");
    }
    Ok(())
}
