//! Single-file NIfTI-1 (`.nii`) subset.
//!
//! Reads unsigned 8-bit, signed 16-bit, 32-bit float and 64-bit float data
//! in either byte order. Writes little-endian with `vox_offset = 352`,
//! labels as uint8, scalars and vector fields as float32. Vector fields use
//! the 5-D layout `dim = [5, nx, ny, nz, 1, 3, 1, 1]` with
//! `intent_code = 1007`, component-major.
//!
//! Orientation fields (qform/sform) are carried through unchanged but never
//! interpreted.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::transform::{DisplacementField, VelocityField};
use crate::volume::{GridMeta, LabelVolume, ScalarVolume, N_TISSUES};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";
pub const MAGIC_OFFSET: usize = 344;
pub const INTENT_VECTOR: i16 = 1007;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    match datatype {
        DT_UINT8 => Ok(1),
        DT_INT16 => Ok(2),
        DT_FLOAT32 => Ok(4),
        DT_FLOAT64 => Ok(8),
        code => Err(Error::UnsupportedDatatype { code }),
    }
}

/// Spatial orientation metadata, preserved verbatim from input to output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub xyzt_units: u8,
}

impl Default for Orientation {
    fn default() -> Self {
        Self {
            qform_code: 0,
            sform_code: 0,
            qfac: 1.0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            // millimeters
            xyzt_units: 2,
        }
    }
}

/// The header fields this subset cares about.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub orientation: Orientation,
    pub big_endian: bool,
}

/// What the caller wants a file to be read as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expect {
    Scalar,
    Labels,
    Displacement,
    Velocity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Labels(LabelVolume),
    Displacement(DisplacementField),
    Velocity(VelocityField),
}

#[derive(Clone, Copy, Debug)]
pub enum VolumeRef<'a> {
    Scalar(&'a ScalarVolume),
    Labels(&'a LabelVolume),
    Displacement(&'a DisplacementField),
    Velocity(&'a VelocityField),
}

impl<'a> From<&'a ScalarVolume> for VolumeRef<'a> {
    fn from(v: &'a ScalarVolume) -> Self {
        VolumeRef::Scalar(v)
    }
}

impl<'a> From<&'a LabelVolume> for VolumeRef<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        VolumeRef::Labels(v)
    }
}

impl<'a> From<&'a DisplacementField> for VolumeRef<'a> {
    fn from(v: &'a DisplacementField) -> Self {
        VolumeRef::Displacement(v)
    }
}

impl<'a> From<&'a VelocityField> for VolumeRef<'a> {
    fn from(v: &'a VelocityField) -> Self {
        VolumeRef::Velocity(v)
    }
}

impl<'a> From<&'a Volume> for VolumeRef<'a> {
    fn from(v: &'a Volume) -> Self {
        match v {
            Volume::Scalar(s) => VolumeRef::Scalar(s),
            Volume::Labels(l) => VolumeRef::Labels(l),
            Volume::Displacement(d) => VolumeRef::Displacement(d),
            Volume::Velocity(v) => VolumeRef::Velocity(v),
        }
    }
}

fn read_header_with<B: ByteOrder>(bytes: &[u8], big_endian: bool) -> Result<NiftiHeader> {
    let mut c = Cursor::new(bytes);
    let mut dim = [0i16; 8];
    c.set_position(40);
    for d in dim.iter_mut() {
        *d = c.read_i16::<B>().unwrap();
    }
    c.set_position(68);
    let intent_code = c.read_i16::<B>().unwrap();
    let datatype = c.read_i16::<B>().unwrap();
    let bitpix = c.read_i16::<B>().unwrap();
    c.set_position(76);
    let mut pixdim = [0f32; 8];
    for p in pixdim.iter_mut() {
        *p = c.read_f32::<B>().unwrap();
    }
    let vox_offset = c.read_f32::<B>().unwrap();
    let scl_slope = c.read_f32::<B>().unwrap();
    let scl_inter = c.read_f32::<B>().unwrap();
    let xyzt_units = bytes[123];
    c.set_position(252);
    let qform_code = c.read_i16::<B>().unwrap();
    let sform_code = c.read_i16::<B>().unwrap();
    let mut f = [0f32; 18];
    for v in f.iter_mut() {
        *v = c.read_f32::<B>().unwrap();
    }
    let orientation = Orientation {
        qform_code,
        sform_code,
        qfac: pixdim[0],
        quatern: [f[0], f[1], f[2]],
        qoffset: [f[3], f[4], f[5]],
        srow_x: [f[6], f[7], f[8], f[9]],
        srow_y: [f[10], f[11], f[12], f[13]],
        srow_z: [f[14], f[15], f[16], f[17]],
        xyzt_units,
    };
    Ok(NiftiHeader {
        dim,
        intent_code,
        datatype,
        bitpix,
        pixdim,
        vox_offset,
        scl_slope,
        scl_inter,
        orientation,
        big_endian,
    })
}

/// Parse and validate the 348-byte header; byte order is detected from `sizeof_hdr`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let header = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        read_header_with::<LittleEndian>(bytes, false)?
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        read_header_with::<BigEndian>(bytes, true)?
    } else {
        return Err(Error::InvalidInput(format!(
            "header field `sizeof_hdr` is not {HEADER_SIZE} in either byte order"
        )));
    };
    let magic: [u8; 4] = bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            field: "magic",
            found: magic,
        });
    }
    let bpv = bytes_per_voxel(header.datatype)?;
    if header.bitpix as usize != 8 * bpv {
        return Err(Error::InvalidInput(format!(
            "header field `bitpix` = {} does not match datatype {}",
            header.bitpix, header.datatype
        )));
    }
    if !(header.vox_offset.is_finite() && header.vox_offset as usize >= HEADER_SIZE) {
        return Err(Error::InvalidInput(format!("header field `vox_offset` = {} is invalid", header.vox_offset)));
    }
    Ok(header)
}

impl NiftiHeader {
    fn grid(&self) -> Result<GridMeta> {
        let dims = [self.dim[1], self.dim[2], self.dim[3]];
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::Shape(format!("header field `dim` has non-positive extent: {:?}", self.dim)));
        }
        let spacing = [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
            .map(|s| if s.is_finite() && s > 0.0 { s as f64 } else { 1.0 });
        GridMeta::new(dims.map(|d| d as usize), spacing)
    }

    fn is_vector(&self) -> bool {
        self.dim[0] == 5
    }

    fn check_scalar_shape(&self) -> Result<()> {
        let trailing_ok = (4..=self.dim[0].clamp(3, 7) as usize).all(|k| self.dim[k] == 1);
        if self.dim[0] == 3 || (self.dim[0] == 4 && trailing_ok) {
            Ok(())
        } else {
            Err(Error::Shape(format!("header field `dim` {:?} is not a 3-D volume", self.dim)))
        }
    }

    fn check_vector_shape(&self) -> Result<()> {
        if self.dim[0] != 5 || self.dim[4] != 1 || self.dim[5] != 3 {
            return Err(Error::Shape(format!(
                "header field `dim` {:?} is not a 3-component vector field (need dim[0]=5, dim[4]=1, dim[5]=3)",
                self.dim
            )));
        }
        Ok(())
    }
}

fn decode_values(header: &NiftiHeader, bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    let bpv = bytes_per_voxel(header.datatype)?;
    let start = header.vox_offset as usize;
    let need = count * bpv;
    let available = bytes.len().saturating_sub(start);
    if available < need {
        return Err(Error::Truncated {
            expected: need,
            found: available,
        });
    }
    let data = &bytes[start..start + need];
    let mut raw = vec![0f64; count];
    macro_rules! fill {
        ($b:ty) => {
            match header.datatype {
                DT_UINT8 => raw.iter_mut().zip(data).for_each(|(r, &v)| *r = v as f64),
                DT_INT16 => raw
                    .iter_mut()
                    .zip(data.chunks_exact(2))
                    .for_each(|(r, c)| *r = <$b>::read_i16(c) as f64),
                DT_FLOAT32 => raw
                    .iter_mut()
                    .zip(data.chunks_exact(4))
                    .for_each(|(r, c)| *r = <$b>::read_f32(c) as f64),
                DT_FLOAT64 => raw
                    .iter_mut()
                    .zip(data.chunks_exact(8))
                    .for_each(|(r, c)| *r = <$b>::read_f64(c)),
                code => return Err(Error::UnsupportedDatatype { code }),
            }
        };
    }
    if header.big_endian {
        fill!(BigEndian);
    } else {
        fill!(LittleEndian);
    }
    let slope = header.scl_slope as f64;
    if slope != 0.0 && slope.is_finite() {
        let inter = header.scl_inter as f64;
        if slope != 1.0 || inter != 0.0 {
            raw.iter_mut().for_each(|v| *v = *v * slope + inter);
        }
    }
    Ok(raw)
}

/// Decode a whole `.nii` image held in memory.
pub fn decode(bytes: &[u8], expect: Option<Expect>) -> Result<(Volume, Orientation)> {
    let header = parse_header(bytes)?;
    let meta = header.grid()?;
    let expect = expect.unwrap_or(if header.is_vector() {
        Expect::Displacement
    } else if header.datatype == DT_UINT8 {
        Expect::Labels
    } else {
        Expect::Scalar
    });
    let volume = match expect {
        Expect::Scalar | Expect::Labels => {
            header.check_scalar_shape()?;
            let values = decode_values(&header, bytes, meta.len())?;
            if expect == Expect::Scalar {
                Volume::Scalar(ScalarVolume::new(meta, values)?)
            } else {
                let mut labels = Vec::with_capacity(values.len());
                for (index, &value) in values.iter().enumerate() {
                    if value.fract() != 0.0 || !(0.0..N_TISSUES as f64).contains(&value) {
                        return Err(Error::LabelOutOfRange { value, index });
                    }
                    labels.push(value as u8);
                }
                Volume::Labels(LabelVolume::new(meta, labels)?)
            }
        }
        Expect::Displacement | Expect::Velocity => {
            header.check_vector_shape()?;
            let n = meta.len();
            let values = decode_values(&header, bytes, 3 * n)?;
            let data: Vec<[f64; 3]> = (0..n).map(|i| [values[i], values[n + i], values[2 * n + i]]).collect();
            if expect == Expect::Displacement {
                Volume::Displacement(DisplacementField::new(meta, data)?)
            } else {
                Volume::Velocity(VelocityField::new(meta, data)?)
            }
        }
    };
    Ok((volume, header.orientation))
}

/// Encode to a little-endian single-file NIfTI-1 image with the default
/// datatype for the volume kind (uint8 labels, float32 otherwise).
pub fn encode<'a>(volume: impl Into<VolumeRef<'a>>, orientation: &Orientation) -> Result<Vec<u8>> {
    let volume = volume.into();
    let datatype = match volume {
        VolumeRef::Labels(_) => DT_UINT8,
        _ => DT_FLOAT32,
    };
    encode_with(volume, orientation, datatype)
}

fn encoded_value(x: f64, datatype: i16, index: usize) -> Result<f64> {
    let fits = match datatype {
        DT_UINT8 => x.fract() == 0.0 && (0.0..=u8::MAX as f64).contains(&x),
        DT_INT16 => x.fract() == 0.0 && (i16::MIN as f64..=i16::MAX as f64).contains(&x),
        _ => true,
    };
    if fits {
        Ok(x)
    } else {
        Err(Error::InvalidInput(format!(
            "value {x} at voxel {index} is not representable as datatype {datatype}"
        )))
    }
}

/// Encode with an explicit datatype code (2, 4, 16 or 64). Integer
/// datatypes require every value to be integral and in range.
pub fn encode_with<'a>(volume: impl Into<VolumeRef<'a>>, orientation: &Orientation, datatype: i16) -> Result<Vec<u8>> {
    let volume = volume.into();
    let (meta, vector) = match volume {
        VolumeRef::Scalar(v) => (*v.meta(), false),
        VolumeRef::Labels(v) => (*v.meta(), false),
        VolumeRef::Displacement(v) => (*v.meta(), true),
        VolumeRef::Velocity(v) => (*v.meta(), true),
    };
    if meta.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Shape(format!("grid {:?} too large for NIfTI-1", meta.dims)));
    }
    let d = meta.dims.map(|v| v as i16);
    let dim: [i16; 8] = if vector {
        [5, d[0], d[1], d[2], 1, 3, 1, 1]
    } else {
        [3, d[0], d[1], d[2], 1, 1, 1, 1]
    };
    let bpv = bytes_per_voxel(datatype)?;
    let count = if vector { 3 * meta.len() } else { meta.len() };
    let mut out = Vec::with_capacity(VOX_OFFSET + count * bpv);
    let w = &mut out;
    w.write_i32::<LittleEndian>(HEADER_SIZE as i32).unwrap();
    w.resize(40, 0);
    for v in dim {
        w.write_i16::<LittleEndian>(v).unwrap();
    }
    // intent_p1..3
    w.resize(68, 0);
    w.write_i16::<LittleEndian>(if vector { INTENT_VECTOR } else { 0 }).unwrap();
    w.write_i16::<LittleEndian>(datatype).unwrap();
    w.write_i16::<LittleEndian>((8 * bpv) as i16).unwrap();
    w.write_i16::<LittleEndian>(0).unwrap();
    let pixdim = [
        orientation.qfac,
        meta.spacing[0] as f32,
        meta.spacing[1] as f32,
        meta.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for p in pixdim {
        w.write_f32::<LittleEndian>(p).unwrap();
    }
    w.write_f32::<LittleEndian>(VOX_OFFSET as f32).unwrap();
    w.write_f32::<LittleEndian>(1.0).unwrap();
    w.write_f32::<LittleEndian>(0.0).unwrap();
    w.resize(123, 0);
    w.push(orientation.xyzt_units);
    w.resize(252, 0);
    w.write_i16::<LittleEndian>(orientation.qform_code).unwrap();
    w.write_i16::<LittleEndian>(orientation.sform_code).unwrap();
    let floats = orientation
        .quatern
        .iter()
        .chain(&orientation.qoffset)
        .chain(&orientation.srow_x)
        .chain(&orientation.srow_y)
        .chain(&orientation.srow_z);
    for &f in floats {
        w.write_f32::<LittleEndian>(f).unwrap();
    }
    w.resize(MAGIC_OFFSET, 0);
    w.extend_from_slice(&MAGIC);
    // no extensions
    w.extend_from_slice(&[0; 4]);
    debug_assert_eq!(w.len(), VOX_OFFSET);

    let values: Vec<f64> = match volume {
        VolumeRef::Labels(v) => v.labels().iter().map(|&l| l as f64).collect(),
        VolumeRef::Scalar(v) => v.values().to_vec(),
        VolumeRef::Displacement(f) => component_major(f.data()),
        VolumeRef::Velocity(f) => component_major(f.data()),
    };
    for (i, &x) in values.iter().enumerate() {
        let x = encoded_value(x, datatype, i)?;
        match datatype {
            DT_UINT8 => w.push(x as u8),
            DT_INT16 => w.write_i16::<LittleEndian>(x as i16).unwrap(),
            DT_FLOAT32 => w.write_f32::<LittleEndian>(x as f32).unwrap(),
            _ => w.write_f64::<LittleEndian>(x).unwrap(),
        }
    }
    Ok(out)
}

fn component_major(data: &[[f64; 3]]) -> Vec<f64> {
    (0..3).flat_map(|c| data.iter().map(move |v| v[c])).collect()
}

/// Read a `.nii` file. `expect = None` infers the kind from the header.
pub fn read_volume(path: impl AsRef<Path>, expect: Option<Expect>) -> Result<(Volume, Orientation)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expect)
}

pub fn write_volume<'a>(path: impl AsRef<Path>, volume: impl Into<VolumeRef<'a>>, orientation: &Orientation) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(volume, orientation)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume_as<'a>(
    path: impl AsRef<Path>,
    volume: impl Into<VolumeRef<'a>>,
    orientation: &Orientation,
    datatype: i16,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_with(volume, orientation, datatype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Header only, without decoding voxel data.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, Orientation)> {
    match read_volume(path, Some(Expect::Labels))? {
        (Volume::Labels(l), o) => Ok((l, o)),
        _ => unreachable!("decode honors the expectation"),
    }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<(ScalarVolume, Orientation)> {
    match read_volume(path, Some(Expect::Scalar))? {
        (Volume::Scalar(s), o) => Ok((s, o)),
        _ => unreachable!("decode honors the expectation"),
    }
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<(DisplacementField, Orientation)> {
    match read_volume(path, Some(Expect::Displacement))? {
        (Volume::Displacement(d), o) => Ok((d, o)),
        _ => unreachable!("decode honors the expectation"),
    }
}

pub fn read_velocity(path: impl AsRef<Path>) -> Result<(VelocityField, Orientation)> {
    match read_volume(path, Some(Expect::Velocity))? {
        (Volume::Velocity(v), o) => Ok((v, o)),
        _ => unreachable!("decode honors the expectation"),
    }
}
