use ndarray::Array2;
use num_complex::Complex64;
use phaseforge::data::{
    load_dataset, phantom_dataset, read_array, save_dataset, write_array, ArrayData, PhantomConfig,
};

#[test]
fn dataset_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantom_dataset(5, 16, &PhantomConfig::default(), 11).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.records, ds.records);
}

#[test]
fn array_container_keeps_complex_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.bin");
    let data = Array2::from_shape_fn((3, 4), |(i, j)| Complex64::new(i as f64 - 0.5, -(j as f64) * 1e-300));
    write_array(&path, &ArrayData::C128(data.clone().into_dyn())).unwrap();
    match read_array(&path).unwrap() {
        ArrayData::C128(back) => assert_eq!(back, data.into_dyn()),
        other => panic!("wrong variant {other:?}"),
    }
}

#[test]
fn truncated_container_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.bin");
    write_array(&path, &ArrayData::F64(Array2::<f64>::ones((4, 4)).into_dyn())).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_array(&path).is_err());
}

#[test]
fn missing_dataset_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(&dir.path().join("absent")).is_err());
}

#[cfg(feature = "hdf5")]
mod hdf5 {
    use super::*;
    use phaseforge::data::hdf5::{ingest_hdf5_kspace, read_kspace, write_kspace};
    use phaseforge::fourier::fft2c;
    use phaseforge::Error;

    fn slices(n: usize, h: usize, w: usize) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(n * h * w);
        for s in 0..n {
            let img = Array2::from_shape_fn((h, w), |(i, j)| {
                let r = ((i as f64 - h as f64 / 2.0).powi(2) + (j as f64 - w as f64 / 2.0).powi(2)).sqrt();
                let m = if r < h.min(w) as f64 / 3.0 { 1.0 + s as f64 } else { 0.05 };
                Complex64::from_polar(m, 0.02 * i as f64 - 0.5)
            });
            out.extend(fft2c(&img).iter().copied());
        }
        out
    }

    #[test]
    fn kspace_round_trip_in_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let data = slices(2, 6, 8);
        for single in [false, true] {
            let path = dir.path().join(format!("rt{single}.h5"));
            write_kspace(&path, &[2, 6, 8], &data, single).unwrap();
            let back = read_kspace(&path).unwrap();
            assert_eq!(back.dim(), (2, 6, 8));
            let tol = if single { 1e-5 } else { 0.0 };
            for (a, b) in back.iter().zip(&data) {
                assert!((a - b).norm() <= tol * b.norm().max(1.0));
            }
        }
    }

    #[test]
    fn ingest_builds_one_record_per_slice() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patient_a.h5");
        write_kspace(&path, &[3, 40, 48], &slices(3, 40, 48), true).unwrap();
        let recs = ingest_hdf5_kspace(&path, 32).unwrap();
        assert_eq!(recs.len(), 3);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.patient_id, "patient_a");
            assert_eq!(r.slice_index, i);
            assert_eq!(r.shape(), (32, 32));
            assert!(r.kspace.is_some() && r.phase.is_some());
            assert!(r.magnitude.iter().all(|&m| (0.0..=1.0).contains(&m)));
            assert!(r.magnitude.iter().any(|&m| m == 1.0));
        }
    }

    #[test]
    fn empty_and_foreign_files_are_ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.h5");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(read_kspace(&empty), Err(Error::Ingestion { .. })));
        let text = dir.path().join("text.h5");
        std::fs::write(&text, b"not hdf5 at all").unwrap();
        assert!(matches!(ingest_hdf5_kspace(&text, 16), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn multi_coil_kspace_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mc.h5");
        let n = 2 * 4 * 8 * 8;
        write_kspace(&path, &[2, 4, 8, 8], &vec![Complex64::new(1.0, 0.0); n], false).unwrap();
        match read_kspace(&path) {
            Err(Error::Ingestion { msg, .. }) => assert!(msg.contains("coil"), "{msg}"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
