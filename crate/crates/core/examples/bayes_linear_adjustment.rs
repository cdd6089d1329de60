//! Adjusting beliefs about two quantities by two noisy measurements.

use inspection_bl::bayes_linear::{
    adjusted_expectation, adjusted_variance, adjustment_discrepancy, mahalanobis_discrepancy, resolved_variance,
    CrossMoment, MomentPair,
};
use nalgebra::{dmatrix, dvector};

fn main() -> inspection_bl::Result<()> {
    // Wall thickness now and in a year; data are two readings of "now".
    let b = MomentPair::new(dvector![10.0, 9.7], dmatrix![0.04, 0.04; 0.04, 0.05])?;
    let d = MomentPair::new(dvector![10.0, 10.0], dmatrix![0.0656, 0.04; 0.04, 0.0656])?;
    let cov = CrossMoment::new(dmatrix![0.04, 0.04; 0.04, 0.04]);
    let y = dvector![9.62, 9.71];

    let e = adjusted_expectation(&b, &d, &cov, &y)?;
    let v = adjusted_variance(&b, &d, &cov)?;
    let rv = resolved_variance(&d, &cov)?;
    println!("adjusted mean  {:.4} {:.4}", e[0], e[1]);
    println!("adjusted sd    {:.4} {:.4}", v[(0, 0)].sqrt(), v[(1, 1)].sqrt());
    println!("data discrepancy       {:.3}", mahalanobis_discrepancy(&y, &d)?);
    println!("adjustment discrepancy {:.3}", adjustment_discrepancy(&e, b.mean(), &rv)?);
    Ok(())
}
