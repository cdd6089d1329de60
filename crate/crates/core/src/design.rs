//! Synthetic stand-in for the offshore platform: four circuits of pipe-work
//! welds (64 components), 83 monthly time points and 174 irregular, partial
//! inspections grouped into circuit campaigns.

use crate::simulator::derive_seed;
use crate::system::{InspectionDataset, PriorSpecification, SystemTopology};

pub const OFFSHORE_HORIZON: usize = 83;
pub const OFFSHORE_OBSERVATIONS: usize = 174;
pub const OFFSHORE_CIRCUITS: [usize; 4] = [17, 17, 17, 13];

/// Campaign months per circuit.
const CAMPAIGNS: [&[usize]; 4] = [
    &[3, 20, 38, 61, 80],
    &[7, 29, 52, 74],
    &[11, 27, 45, 66, 82],
    &[15, 40, 58, 77],
];

/// Components never inspected (indices).
const UNOBSERVED: [usize; 2] = [29, 58];

pub fn offshore_topology() -> SystemTopology {
    SystemTopology::from_circuit_sizes(&OFFSHORE_CIRCUITS).expect("fixed sizes are valid")
}

/// The 174-point design with zero thickness values.
///
/// Every component of the third circuit is first inspected in month 11; the
/// remaining points are chosen by a fixed pseudo-random score so that
/// coverage is partial and per-component counts vary between 0 and 5.
pub fn offshore_design() -> InspectionDataset {
    let mut mandatory = Vec::new();
    let mut scored = Vec::new();
    let mut start = 0;
    for (circuit, &size) in OFFSHORE_CIRCUITS.iter().enumerate() {
        for c in start..start + size {
            if UNOBSERVED.contains(&c) {
                continue;
            }
            for (k, &t) in CAMPAIGNS[circuit].iter().enumerate() {
                if circuit == 2 && k == 0 {
                    mandatory.push((c, t));
                } else {
                    let score = derive_seed(0x0FF5_4043, (c * 97 + t) as u64);
                    scored.push((score, c, t));
                }
            }
        }
        start += size;
    }
    scored.sort_unstable();
    let take = OFFSHORE_OBSERVATIONS - mandatory.len();
    let points = mandatory
        .into_iter()
        .chain(scored.into_iter().take(take).map(|(_, c, t)| (c, t)));
    InspectionDataset::design(OFFSHORE_HORIZON, points)
}

/// Offshore prior values with synthetic starting states: initial thickness
/// around 10 mm and initial loss rates around 0.02 mm/month, varying smoothly
/// along each circuit.
pub fn offshore_prior() -> PriorSpecification {
    let n: usize = OFFSHORE_CIRCUITS.iter().sum();
    let mut prior = PriorSpecification::offshore(n, 10.0, -0.02);
    for c in 0..n {
        let phase = c as f64 * 0.37;
        prior.x0[c] = 10.0 + 0.4 * phase.sin();
        prior.alpha0[c] = -0.02 - 0.004 * (phase * 0.5).cos();
    }
    prior
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::validate_dataset;

    #[test]
    fn design_shape() {
        let d = offshore_design();
        let topo = offshore_topology();
        assert_eq!(topo.len(), 64);
        assert_eq!(d.len(), 174);
        assert_eq!(d.horizon(), 83);
        assert!(validate_dataset(&d, &topo).is_empty());
        for c in UNOBSERVED {
            assert!(d.times_of(c).is_empty());
        }
        for c in 34..51 {
            assert_eq!(d.times_of(c)[0], 11);
        }
        let with_three = (0..64).filter(|&c| d.times_of(c).len() >= 3).count();
        assert!(with_three >= 20, "{with_three}");
    }
}
