use std::f64::consts::PI;

use proptest::prelude::*;

use scch_core::heatmap::{decode, encode, heatmap_loss, AUAnnotation, Location};
use scch_core::{Tape, Tensor};

fn one(x: usize, y: usize, intensity: u8) -> Vec<AUAnnotation> {
    vec![AUAnnotation::new(0, vec![Location::new(x as f32, y as f32)], intensity)]
}

proptest! {
    #[test]
    fn round_trip(i in 1u8..=5, s in 0usize..4, x in 0usize..32, y in 0usize..24) {
        let sigma = [1.0f32, 1.5, 2.0, 3.0][s];
        let set = encode(&one(x, y, i), sigma, 24, 32).unwrap();
        let d = &decode(&set)[0];
        prop_assert!((d.intensity - i as f32).abs() < 1e-5);
        prop_assert_eq!(&d.locations, &vec![Location::new(x as f32, y as f32)]);
    }

    #[test]
    fn radial_symmetry_and_falloff(i in 1u8..=5, s in 0usize..4, dx in 0i64..6, dy in 0i64..6) {
        let sigma = [1.0f32, 1.5, 2.0, 3.0][s];
        let (c, size) = (10i64, 21usize);
        let set = encode(&one(c as usize, c as usize, i), sigma, size, size).unwrap();
        let at = |x: i64, y: i64| set.maps.data()[(y as usize) * size + x as usize];
        let v = at(c + dx, c + dy);
        // the 8 reflections and the transpose share the distance
        for (a, b) in [(dx, dy), (-dx, dy), (dx, -dy), (-dx, -dy), (dy, dx), (-dy, dx), (dy, -dx), (-dy, -dx)] {
            prop_assert_eq!(at(c + a, c + b), v);
        }
        // stepping outward strictly lowers the value while it is representable
        let next = at(c + dx + 1, c + dy);
        let expect = i as f64 / (2.0 * PI * (sigma as f64).powi(2))
            * (-(((dx + 1).pow(2) + dy.pow(2)) as f64) / (2.0 * (sigma as f64).powi(2))).exp();
        if expect > 1e-30 {
            prop_assert!(next < v);
        }
    }

    #[test]
    fn loss_nonnegative_zero_iff_equal(a in prop::collection::vec(-2.0f32..2.0, 12), b in prop::collection::vec(-2.0f32..2.0, 12)) {
        let tape = Tape::new();
        let ta = Tensor::new(&[3, 2, 2], a.clone()).unwrap();
        let tb = Tensor::new(&[3, 2, 2], b.clone()).unwrap();
        let l = heatmap_loss(tape.constant(ta.clone()), tape.constant(tb)).unwrap().value().item();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
        let same = heatmap_loss(tape.constant(ta.clone()), tape.constant(ta)).unwrap().value().item();
        prop_assert_eq!(same, 0.0);
    }
}

#[test]
fn zero_intensity_has_no_location() {
    for sigma in [1.0, 1.5, 2.0, 3.0] {
        let d = &decode(&encode(&one(3, 4, 0), sigma, 8, 8).unwrap())[0];
        assert_eq!(d.intensity, 0.0);
        assert!(d.locations.is_empty());
    }
}
