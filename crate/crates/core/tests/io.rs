use std::path::Path;

use acreg_core::io::nifti::{self, Expect};
use acreg_core::io::{read_displacement, read_labels, read_volume, write_volume, write_volume_as, Orientation, Volume};
use acreg_core::transform::DisplacementField;
use acreg_core::{Error, GridMeta, LabelVolume, ScalarVolume};

const DIM_OFFSET: usize = 40;
const DATATYPE_OFFSET: usize = 70;

fn labels() -> LabelVolume {
    let meta = GridMeta::new([5, 4, 3], [1.0, 1.0, 2.0]).unwrap();
    LabelVolume::from_fn(meta, |x, y, z| ((x + 2 * y + z) % 4) as u8).unwrap()
}

fn patch(path: &Path, offset: usize, bytes: &[u8]) {
    let mut data = std::fs::read(path).unwrap();
    data[offset..offset + bytes.len()].copy_from_slice(bytes);
    std::fs::write(path, data).unwrap();
}

#[test]
fn labels_roundtrip_with_orientation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.nii");
    let orient = Orientation {
        qform_code: 1,
        sform_code: 2,
        srow_x: [0.9, 0.1, 0.0, -10.0],
        srow_y: [0.0, 1.0, 0.0, 4.5],
        srow_z: [0.0, 0.0, 2.0, 7.25],
        ..Orientation::default()
    };
    write_volume(&path, &labels(), &orient).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[nifti::MAGIC_OFFSET..nifti::MAGIC_OFFSET + 4], b"n+1\0");
    let (back, orient_back) = read_labels(&path).unwrap();
    assert_eq!(back, labels());
    assert_eq!(orient_back, orient);
}

#[test]
fn displacement_field_roundtrips_in_both_float_widths() {
    let dir = tempfile::tempdir().unwrap();
    let meta = GridMeta::cube(4);
    let field = DisplacementField::from_fn(meta, |x, y, z| [x as f64 * 0.25, -(y as f64), z as f64 + 0.5]).unwrap();
    for dtype in [nifti::DT_FLOAT32, nifti::DT_FLOAT64] {
        let path = dir.path().join(format!("f{dtype}.nii"));
        write_volume_as(&path, &field, &Orientation::default(), dtype).unwrap();
        assert_eq!(nifti::read_header(&path).unwrap().intent_code, nifti::INTENT_VECTOR);
        let (back, _) = read_displacement(&path).unwrap();
        assert_eq!(back, field);
    }
}

#[test]
fn unsupported_datatype_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.nii");
    write_volume(&path, &labels(), &Orientation::default()).unwrap();
    patch(&path, DATATYPE_OFFSET, &8i16.to_le_bytes());
    let err = read_volume(&path, None).unwrap_err();
    assert!(matches!(err, Error::UnsupportedDatatype { code: 8 }));
    assert!(err.to_string().contains("datatype"));
}

#[test]
fn bad_magic_and_truncation_are_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.nii");
    write_volume(&path, &labels(), &Orientation::default()).unwrap();
    let good = std::fs::read(&path).unwrap();

    patch(&path, nifti::MAGIC_OFFSET, b"ni1\0");
    assert!(matches!(read_volume(&path, None), Err(Error::BadMagic { .. })));

    std::fs::write(&path, &good[..good.len() - 7]).unwrap();
    assert!(matches!(read_volume(&path, None), Err(Error::Truncated { .. })));

    assert!(matches!(read_volume(dir.path().join("missing.nii"), None), Err(Error::Io { .. })));
}

#[test]
fn out_of_range_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.nii");
    let meta = GridMeta::cube(3);
    let scalar = ScalarVolume::from_fn(meta, |x, _, _| if x == 2 { 4.0 } else { 1.0 }).unwrap();
    write_volume_as(&path, &scalar, &Orientation::default(), nifti::DT_UINT8).unwrap();
    assert!(matches!(read_labels(&path), Err(Error::LabelOutOfRange { .. })));
    assert!(LabelVolume::new(meta, vec![4; meta.len()]).is_err());
}

#[test]
fn two_component_vectors_are_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.nii");
    write_volume(&path, &DisplacementField::zeros(GridMeta::cube(3)), &Orientation::default()).unwrap();
    patch(&path, DIM_OFFSET + 2 * 5, &2i16.to_le_bytes());
    assert!(matches!(read_volume(&path, Some(Expect::Displacement)), Err(Error::Shape(_))));
}

#[test]
fn expectation_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.nii");
    write_volume(&path, &labels(), &Orientation::default()).unwrap();
    assert!(read_displacement(&path).is_err());
    match read_volume(&path, Some(Expect::Scalar)).unwrap().0 {
        Volume::Scalar(s) => assert_eq!(s.values()[1], labels().labels()[1] as f64),
        other => panic!("expected a scalar volume, got {other:?}"),
    }
}
