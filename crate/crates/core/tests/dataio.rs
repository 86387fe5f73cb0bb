mod common;

use anyad::dataio::{ingest, nifti_parse, nifti_read, synth_generate, Dataset, Endian, Label, SliceProtocol};
use anyad::Error;
use common::*;

const DIMS: [usize; 3] = [5, 4, 3];

#[test]
fn every_datatype_parses_identically_in_both_byte_orders() {
    let values = ramp(60);
    for dt in DATATYPES {
        let le = nifti_parse(&nifti_bytes(&DIMS, dt, &values, false)).unwrap();
        let be = nifti_parse(&nifti_bytes(&DIMS, dt, &values, true)).unwrap();
        assert_eq!(le.endian, Endian::Little);
        assert_eq!(be.endian, Endian::Big);
        assert_eq!(le.datatype, dt);
        assert_eq!(le.shape(), vec![5, 4, 3]);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&le.voxels), bits(&be.voxels), "datatype {dt}");
        let want: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        assert_eq!(bits(&le.voxels), bits(&want), "datatype {dt}");
    }
}

#[test]
fn gzip_matches_plain() {
    let values = ramp(60);
    for dt in DATATYPES {
        for big in [false, true] {
            let raw = nifti_bytes(&DIMS, dt, &values, big);
            let a = nifti_parse(&raw).unwrap();
            let b = nifti_parse(&gzip(&raw)).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn files_on_disk_inline_gzip_and_paired() {
    let dir = tempfile::tempdir().unwrap();
    let values = ramp(60);
    let want = nifti_parse(&nifti_bytes(&DIMS, 4, &values, true)).unwrap();

    let p = dir.path().join("v.nii.gz");
    std::fs::write(&p, gzip(&nifti_bytes(&DIMS, 4, &values, true))).unwrap();
    assert_eq!(nifti_read(&p).unwrap().voxels, want.voxels);

    let hdr = dir.path().join("pair.hdr");
    std::fs::write(&hdr, header(&DIMS, 4, true, b"ni1\0", 0.0)).unwrap();
    std::fs::write(dir.path().join("pair.img"), payload(&values, 4, true)).unwrap();
    let v = nifti_read(&hdr).unwrap();
    assert_eq!(v.voxels, want.voxels);
    assert_eq!(v.endian, Endian::Big);
}

#[test]
fn scaling_applies_slope_and_intercept() {
    let mut b = nifti_bytes(&[4], 4, &[0.0, 1.0, 2.0, 3.0], false);
    b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
    b[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
    assert_eq!(nifti_parse(&b).unwrap().voxels, vec![-1.0, 1.0, 3.0, 5.0]);
}

#[test]
fn malformed_inputs_are_typed_errors() {
    let good = nifti_bytes(&DIMS, 16, &ramp(60), false);

    let mut bad_magic = good.clone();
    bad_magic[344..348].copy_from_slice(b"xyz\0");
    assert!(matches!(nifti_parse(&bad_magic), Err(Error::Parse { offset: 344, .. })));

    let mut bad_size = good.clone();
    bad_size[0..4].copy_from_slice(&7i32.to_le_bytes());
    assert!(matches!(nifti_parse(&bad_size), Err(Error::Parse { offset: 0, .. })));

    for cut in [0, 100, 347, 352, 352 + 4 * 59] {
        assert!(
            matches!(nifti_parse(&good[..cut]), Err(Error::Parse { .. })),
            "cut at {cut}"
        );
    }
    let truncated_gz = gzip(&good[..400]);
    assert!(matches!(nifti_parse(&truncated_gz), Err(Error::Parse { .. })));

    let mut odd_type = good.clone();
    odd_type[70..72].copy_from_slice(&512i16.to_le_bytes());
    assert!(matches!(nifti_parse(&odd_type), Err(Error::UnsupportedDatatype(512))));

    let mut zero_dim = good;
    zero_dim[42..44].copy_from_slice(&0i16.to_le_bytes());
    assert!(matches!(nifti_parse(&zero_dim), Err(Error::Parse { offset: 42, .. })));
}

#[test]
fn arbitrary_bytes_never_panic() {
    let good = nifti_bytes(&DIMS, 8, &ramp(60), true);
    let mut state = 0x9e37_79b9_u32;
    for _ in 0..2000 {
        let mut b = good.clone();
        for _ in 0..4 {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            let i = state as usize % b.len();
            b[i] = (state >> 24) as u8;
        }
        let _ = nifti_parse(&b);
    }
}

#[test]
fn ingest_builds_a_loadable_split() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    for (i, name) in ["sub01", "sub02", "sub03"].iter().enumerate() {
        write_subject(src.path(), name, [12, 10, 20], (8 + i, 12 + i));
    }
    let protocol = SliceProtocol {
        axis: 2,
        first: 2,
        last: 18,
        stride: 2,
        size: Some(16),
    };
    let m = ingest(src.path(), out.path(), &protocol, 3).unwrap();
    let ds = Dataset::load(out.path()).unwrap();
    assert_eq!(ds.train.len(), m.counts.train);
    assert_eq!(ds.test.len(), m.counts.test_normal + m.counts.test_abnormal);
    assert!(m.counts.test_abnormal > 0);
    assert!(ds.train.iter().all(|s| s.label == Label::Normal && s.mask.is_none()));
    for s in ds.train.iter().chain(&ds.test) {
        assert_eq!(s.channels.dims(), &[3, 16, 16]);
        assert!(s.channels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.label == Label::Abnormal, s.mask_bool().iter().any(|&b| b));
    }
    let again = tempfile::tempdir().unwrap();
    assert_eq!(ingest(src.path(), again.path(), &protocol, 3).unwrap(), m);
}

#[test]
fn ingest_reports_missing_modality() {
    let src = tempfile::tempdir().unwrap();
    write_subject(src.path(), "sub01", [8, 8, 4], (1, 2));
    std::fs::remove_file(src.path().join("sub01/sub01_t2.nii.gz")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = ingest(src.path(), out.path(), &SliceProtocol::default(), 0).unwrap_err();
    assert!(err.to_string().contains("t2"), "{err}");
}

#[test]
fn synth_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(10, 4, 2, dir.path()).unwrap();
    assert_eq!(
        (m.counts.train, m.counts.test_normal, m.counts.test_abnormal),
        (10, 4, 4)
    );
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.manifest, m);
    assert_eq!(ds.train_images::<f32>().unwrap().dims(), &[10, 3, 64, 64]);
    let abnormal = ds.test.iter().filter(|s| s.label == Label::Abnormal).count();
    assert_eq!(abnormal, 4);
}
