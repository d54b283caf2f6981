//! Monte-Carlo squared distances checked against the closed form
//! `E dist^2(g, [a, b]) = (1 + b^2) Q(b) - b pdf(b) + (1 + a^2) cdf(a) + a pdf(a)`.

use fedmac::theorylab::{eta_sq_mc, gen_instance, scaled_subdifferential, CoordSet, PriorConfig, PriorKind, SideModel};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn closed_form(sets: &[CoordSet]) -> f64 {
    let n = Normal::standard();
    sets.iter()
        .map(|&s| match s {
            CoordSet::Point(c) => 1.0 + c * c,
            CoordSet::Interval(a, b) => {
                (1.0 + b * b) * n.sf(b) - b * n.pdf(b) + (1.0 + a * a) * n.cdf(a) + a * n.pdf(a)
            }
        })
        .sum()
}

#[test]
fn monte_carlo_matches_closed_form() {
    let sides = [
        SideModel::Exact,
        SideModel::Noisy { sigma: 0.3 },
        SideModel::ShiftedSupport { k: 2 },
    ];
    let mut k = 0;
    for side in sides {
        for kind in [PriorKind::F1, PriorKind::F2] {
            for (gamma, zeta) in [(0.5, 0.0), (1.5, 0.4), (2.5, 1.0)] {
                k += 1;
                let inst = gen_instance(96, 1, 6, side, k).unwrap();
                let prior = PriorConfig::new(kind, gamma, zeta).unwrap();
                let sets = scaled_subdifferential(&inst.theta_star, &inst.w_side, &prior).unwrap();
                let exact = closed_form(&sets);
                let (est, se) = eta_sq_mc(&inst.theta_star, &inst.w_side, &prior, 20_000, k).unwrap();
                assert!(
                    (est - exact).abs() <= 4.0 * se,
                    "{side:?} {kind:?} gamma {gamma} zeta {zeta}: mc {est} vs {exact} (se {se})"
                );
            }
        }
    }
}

#[test]
fn unit_interval_value() {
    // 2 (2 Q(1) - pdf(1)) with Q(1) = 0.1586553, pdf(1) = 0.2419707
    assert!((closed_form(&[CoordSet::Interval(-1.0, 1.0)]) - 0.1506796).abs() < 1e-6);
    assert!((closed_form(&[CoordSet::Point(2.0)]) - 5.0).abs() < 1e-15);
}
