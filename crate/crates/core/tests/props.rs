//! Property tests for the kernel and field invariants.

use proptest::prelude::*;
use srwcr_core::bspline::{basis, compose, transform_point, DisplacementField, FfdGrid};
use srwcr_core::histogram::{parzen, parzen_deriv, BinConfig};
use srwcr_core::volume::Volume3D;

proptest! {
    /// The window kernel is a partition of unity over the intensity bins for
    /// any value inside the bin range.
    #[test]
    fn parzen_partition_of_unity(v in 0.0f64..31.0) {
        let cfg = BinConfig::default();
        let s: f64 = (0..=cfg.l_max).map(|a| parzen(a as f64 - v)).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    /// The kernel is even and its derivative odd.
    #[test]
    fn parzen_symmetry(t in -1.5f64..1.5) {
        prop_assert_eq!(parzen(t), parzen(-t));
        prop_assert_eq!(parzen_deriv(t), -parzen_deriv(-t));
    }

    /// Spline basis partition of unity and non-negativity on its support.
    #[test]
    fn basis_partition_of_unity(t in 0.0f64..1.0) {
        let s: f64 = (0..4).map(|l| basis(l, t)).sum();
        prop_assert!((s - 1.0).abs() < 1e-13);
        for l in 0..4 {
            prop_assert!(basis(l, t) >= 0.0);
        }
    }

    /// A zero grid is an exact identity transform anywhere in the domain.
    #[test]
    fn zero_grid_identity(
        x in 0.0f64..15.0,
        y in 0.0f64..11.0,
        z in 0.0f64..9.0,
    ) {
        let g = FfdGrid::for_domain((16, 12, 10), (4.0, 4.0, 4.0));
        prop_assert_eq!(transform_point(&g, [x, y, z]), [x, y, z]);
    }

    /// Clamped trilinear samples never leave the data range.
    #[test]
    fn trilinear_stays_in_range(
        vals in proptest::collection::vec(0.0f64..31.0, 27),
        px in -2.0f64..5.0,
        py in -2.0f64..5.0,
        pz in -2.0f64..5.0,
    ) {
        let v = Volume3D::from_data((3, 3, 3), (1.0, 1.0, 1.0), vals.clone()).unwrap();
        let s = v.trilinear_sample([px, py, pz]);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
    }

    /// Normalization maps into [0, l_max] and is idempotent.
    #[test]
    fn normalize_range_and_idempotence(
        vals in proptest::collection::vec(-50.0f64..80.0, 8),
    ) {
        let v = Volume3D::from_data((2, 2, 2), (1.0, 1.0, 1.0), vals).unwrap();
        let n = v.normalize_intensity(31, None);
        for &x in n.data() {
            prop_assert!((0.0..=31.0).contains(&x));
        }
        let n2 = n.normalize_intensity(31, None);
        prop_assert_eq!(n.data(), n2.data());
    }

    /// Composing with the zero field is the identity in both operand slots.
    #[test]
    fn compose_zero_identity(
        vals in proptest::collection::vec(-2.0f64..2.0, 27 * 3),
    ) {
        let data: Vec<[f64; 3]> = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let f = DisplacementField::from_data((3, 3, 3), data).unwrap();
        let zero = DisplacementField::zero((3, 3, 3));
        let left = compose(&zero, &f).unwrap();
        prop_assert_eq!(left.data(), f.data());
        let right = compose(&f, &zero).unwrap();
        for (a, b) in right.data().iter().zip(f.data()) {
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }
}
