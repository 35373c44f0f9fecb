//! Discretizes a random continuous state-space model and runs it three
//! ways: the recurrence, the convolution kernel and the diagonalized form.

use xformer::ssm::{apply_kernel, build_kernel, diagonalize, discretize, random_continuous, scan_recurrent, Discretization, Mat, SsmConfig};
use xformer::Rng;

fn main() -> xformer::Result<()> {
    let mut rng = Rng::new(5);
    let cfg = SsmConfig { d_state: 4, ..SsmConfig::default() };
    let cont = random_continuous(3, &cfg, &mut rng)?;
    let inputs = Mat::from_fn(32, 3, |_, _| rng.gaussian());
    for method in [Discretization::Zoh, Discretization::Bilinear] {
        let ds = discretize(&cont, method)?;
        let scanned = scan_recurrent(&ds, &inputs);
        let conv = apply_kernel(&build_kernel(&ds, 32), ds.d(), &inputs)?;
        let diag = diagonalize(&ds)?;
        let diag_out = scan_recurrent(&diag.ssm, &inputs);
        println!(
            "{method:?}: |scan - conv| {:.2e}, |scan - diagonal| {:.2e}",
            (&scanned - conv).abs().max(),
            (&scanned - diag_out).abs().max()
        );
    }
    Ok(())
}
