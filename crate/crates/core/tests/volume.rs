use ndarray::Array3;
use proptest::prelude::*;
use spineseg::volume::nifti;
use spineseg::volume::{load_volume, save_volume, Volume, VolumeError};

fn ramp(dims: (usize, usize, usize)) -> Array3<f32> {
    Array3::from_shape_fn(dims, |(x, y, z)| (x as f32) * 0.25 - (y as f32) * 1.5 + (z * z) as f32)
}

#[test]
fn save_load_save_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new(ramp((16, 16, 8)), [1.0, 1.0, 4.0], [-3.5, 2.0, 10.0]).unwrap();
    let a = dir.path().join("a.nii.gz");
    let b = dir.path().join("b.nii.gz");
    save_volume(&v, &a).unwrap();
    let loaded = load_volume(&a).unwrap();
    assert_eq!(loaded.dims(), [16, 16, 8]);
    assert_eq!(loaded.spacing, [1.0, 1.0, 4.0]);
    save_volume(&loaded, &b).unwrap();
    let again = load_volume(&b).unwrap();
    assert_eq!(again.data, v.data);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn fine_spacing_survives_the_header() {
    let v = Volume::new(ramp((4, 4, 3)), [0.45, 0.45, 3.3], [0.0; 3]).unwrap();
    let back = nifti::decode(&nifti::encode(&v, false).unwrap()).unwrap();
    for (a, b) in back.spacing.iter().zip([0.45, 0.45, 3.3]) {
        assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn injected_nan_is_located() {
    let v = Volume::new(ramp((5, 4, 3)), [1.0; 3], [0.0; 3]).unwrap();
    let mut bytes = nifti::encode(&v, false).unwrap();
    // Voxel (2, 1, 2) in x-fastest order, float32 payload after the default offset.
    let linear = 2 + 5 * (1 + 4 * 2);
    let at = nifti::DEFAULT_VOX_OFFSET + 4 * linear;
    bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nan.nii");
    std::fs::write(&path, bytes).unwrap();
    match load_volume(&path) {
        Err(VolumeError::NonFiniteVoxel { index }) => assert_eq!(index, [2, 1, 2]),
        other => panic!("expected NonFiniteVoxel, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn world_voxel_round_trip(
        p in prop::array::uniform3(-500.0f64..500.0),
        spacing in prop::array::uniform3(0.1f64..5.0),
        origin in prop::array::uniform3(-100.0f64..100.0),
    ) {
        let v = Volume::new(Array3::zeros((2, 2, 2)), spacing, origin).unwrap();
        let back = v.voxel_to_world(v.world_to_voxel(p));
        for a in 0..3 {
            prop_assert!((back[a] - p[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_decode_preserves_grid(
        dims in prop::array::uniform3(1usize..6),
        spacing in prop::array::uniform3(0.2f64..4.0),
        origin in prop::array::uniform3(-50.0f64..50.0),
        gzip in any::<bool>(),
    ) {
        let v = Volume::new(ramp((dims[0], dims[1], dims[2])), spacing, origin).unwrap();
        let back = nifti::decode(&nifti::encode(&v, gzip).unwrap()).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(&back.data, &v.data);
        for a in 0..3 {
            prop_assert!((back.spacing[a] - spacing[a]).abs() <= 1e-6 * spacing[a]);
            prop_assert!((back.origin[a] - origin[a]).abs() <= 1e-5 * origin[a].abs().max(1.0));
        }
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
        let _ = nifti::decode(&bytes);
    }
}
