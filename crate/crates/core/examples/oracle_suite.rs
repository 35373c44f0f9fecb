//! Runs every numerical self-check and prints the CSV report.
//! Usage: oracle_suite [seed]

use xformer::oracles::{run_oracle_suite, OracleReport, Tolerances};

fn main() -> xformer::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let reports = run_oracle_suite(seed, &Tolerances::default())?;
    println!("{}", OracleReport::CSV_HEADER);
    for r in &reports {
        println!("{}", r.csv_row());
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} families, {failed} failed", reports.len());
    Ok(())
}
