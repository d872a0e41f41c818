use ndarray::{Array2, Array3};
use proptest::prelude::*;
use spineseg::loss::{tversky, tversky_loss, tversky_loss_grad, TverskyParams, TverskyVariant};
use spineseg::metrics::{
    binarize, confusion_counts, dice, inter_reader, mean_std, merge_slice_predictions, sensitivity, specificity, MetricError,
};

fn mask(dims: (usize, usize, usize), bits: &[bool]) -> Array3<u8> {
    Array3::from_shape_vec(dims, bits.iter().map(|&b| u8::from(b)).collect()).unwrap()
}

#[test]
fn hand_counted_overlap() {
    let mut r = Array3::zeros((4, 4, 1));
    let mut p = Array3::zeros((4, 4, 1));
    for i in 0..4 {
        r[[i, 0, 0]] = 1;
    }
    for i in 2..6 {
        p[[i % 4, i / 4, 0]] = 1;
    }
    // Overlap is (2,0) and (3,0).
    assert_eq!(dice(&p, &r).unwrap(), 0.5);
    assert_eq!(sensitivity(&p, &r).unwrap(), 0.5);
}

#[test]
fn dilated_prediction_matches_brute_force_dice() {
    let mut r = Array3::zeros((12, 12, 6));
    for x in 4..8 {
        for y in 3..7 {
            for z in 2..4 {
                r[[x, y, z]] = 1u8;
            }
        }
    }
    let mut d = r.clone();
    for ((x, y, z), v) in d.indexed_iter_mut() {
        let near = (-1i64..=1).any(|dx| {
            (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dz| {
                    let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    a >= 0 && b >= 0 && c >= 0 && a < 12 && b < 12 && c < 6 && r[[a as usize, b as usize, c as usize]] == 1
                })
            })
        });
        *v = u8::from(near);
    }
    let (mut inter, mut nr, mut np) = (0usize, 0usize, 0usize);
    for (a, b) in d.iter().zip(r.iter()) {
        inter += usize::from(*a == 1 && *b == 1);
        nr += usize::from(*b == 1);
        np += usize::from(*a == 1);
    }
    let expected = 2.0 * inter as f64 / (nr + np) as f64;
    assert!((dice(&d, &r).unwrap() - expected).abs() < 1e-12);
    assert_eq!(dice(&r, &r).unwrap(), 1.0);
}

#[test]
fn binarize_threshold_edges() {
    let p = Array3::from_elem((3, 3, 2), 0.49f32);
    assert!(binarize(&p).iter().all(|&v| v == 0));
    let p = Array3::from_elem((3, 3, 2), 0.51f32);
    assert!(binarize(&p).iter().all(|&v| v == 1));
}

#[test]
fn merging_slices() {
    let slices: Vec<(usize, Array2<f32>)> = (0..64).map(|z| (z, Array2::from_elem((128, 128), z as f32 / 64.0))).collect();
    let vol = merge_slice_predictions(slices.clone(), 64).unwrap();
    assert_eq!(vol.dim(), (128, 128, 64));
    // Binarizing per slice then stacking equals stacking then binarizing.
    for (z, s) in &slices {
        let b = s.mapv(|v| u8::from(v > 0.5));
        assert_eq!(binarize(&vol).index_axis(ndarray::Axis(2), *z), b);
    }
    let mut missing = slices;
    missing.remove(17);
    assert_eq!(merge_slice_predictions(missing, 64), Err(MetricError::MissingSlice(17)));
}

#[test]
fn population_statistics() {
    assert_eq!(mean_std(&[0.42]), (0.42, 0.0));
    let (m, s) = mean_std(&[0.6, 0.8]);
    assert!((m - 0.7).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
}

#[test]
fn inter_reader_symmetry() {
    let a = mask((4, 4, 2), &(0..32).map(|i| i % 3 == 0).collect::<Vec<_>>());
    let b = mask((4, 4, 2), &(0..32).map(|i| i % 2 == 0).collect::<Vec<_>>());
    let ab = inter_reader(&a, &b, "x").unwrap();
    let ba = inter_reader(&b, &a, "x").unwrap();
    assert_eq!(ab.dice, ba.dice);
    assert_ne!(ab.sensitivity, ba.sensitivity);
    assert_eq!(inter_reader(&a, &a, "x").unwrap().dice, Some(1.0));
}

#[test]
fn tversky_extremes() {
    let r: Vec<u8> = (0..16).map(|i| u8::from(i % 3 == 0)).collect();
    let same: Vec<f64> = r.iter().map(|&v| v as f64).collect();
    let comp: Vec<f64> = same.iter().map(|v| 1.0 - v).collect();
    for (alpha, beta) in [(0.5, 0.5), (0.3, 0.7), (0.9, 0.1)] {
        let p = TverskyParams { alpha, beta, ..Default::default() };
        assert!((tversky(&same, &r, &p).unwrap() - 1.0).abs() < 1e-6);
        assert!(tversky(&comp, &r, &p).unwrap().abs() < 1e-6);
        assert!(tversky_loss(&same, &r, &p).unwrap().abs() < 1e-6);
        assert!((tversky_loss(&comp, &r, &p).unwrap() - 1.0).abs() < 1e-6);
    }
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..64).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(0u8..=1, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn confusion_partitions_the_grid(bits in prop::collection::vec(any::<(bool, bool)>(), 4 * 4 * 3)) {
        let p = mask((4, 4, 3), &bits.iter().map(|b| b.0).collect::<Vec<_>>());
        let r = mask((4, 4, 3), &bits.iter().map(|b| b.1).collect::<Vec<_>>());
        let c = confusion_counts(&p, &r).unwrap();
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, 48);
        if let Ok(d) = dice(&p, &r) {
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&r, &p).unwrap());
        }
        if let Ok(s) = specificity(&p, &r) {
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn tversky_index_and_loss_are_bounded((pred, r) in pair(), alpha in 0.0f64..1.0, doubled in any::<bool>()) {
        let variant = if doubled { TverskyVariant::DoubledNumerator } else { TverskyVariant::ClassicIndex };
        let p = TverskyParams { alpha, beta: 1.0 - alpha, variant, ..Default::default() };
        let t = tversky(&pred, &r, &p).unwrap();
        let cap = if doubled { 2.0 } else { 1.0 };
        prop_assert!(t >= 0.0 && t <= cap + 1e-12);
        let (loss, grad) = tversky_loss_grad(&pred, &r, &p).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&loss));
        prop_assert!((loss - tversky_loss(&pred, &r, &p).unwrap()).abs() < 1e-15);
        // Raising a foreground probability never hurts; raising a background one never helps.
        for (g, &ri) in grad.iter().zip(&r) {
            if ri == 1 { prop_assert!(*g <= 1e-15); } else { prop_assert!(*g >= -1e-15); }
        }
    }
}
