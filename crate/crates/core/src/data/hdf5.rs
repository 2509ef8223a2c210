//! Single-coil k-space ingestion from HDF5 files with a complex `kspace`
//! dataset of shape `(slices, H, W)`, via the system libhdf5.

use std::ffi::{c_char, c_int, c_uint, c_void, CString};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;
use std::sync::Mutex;

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use super::{center_crop_resize, record_from_complex, Provenance, SliceRecord};
use crate::error::{Error, Result};

#[allow(non_camel_case_types)]
type hid_t = i64;
#[allow(non_camel_case_types)]
type herr_t = c_int;
#[allow(non_camel_case_types)]
type hsize_t = u64;

const H5P_DEFAULT: hid_t = 0;
const H5S_ALL: hid_t = 0;
const H5E_DEFAULT: hid_t = 0;
const H5F_ACC_RDONLY: c_uint = 0;
const H5F_ACC_TRUNC: c_uint = 2;
const H5T_COMPOUND: c_int = 6;

#[link(name = "hdf5")]
extern "C" {
    fn H5open() -> herr_t;
    fn H5Eset_auto2(estack: hid_t, func: *const c_void, data: *mut c_void) -> herr_t;
    fn H5Fopen(name: *const c_char, flags: c_uint, fapl: hid_t) -> hid_t;
    fn H5Fcreate(name: *const c_char, flags: c_uint, fcpl: hid_t, fapl: hid_t) -> hid_t;
    fn H5Fclose(id: hid_t) -> herr_t;
    fn H5Lexists(loc: hid_t, name: *const c_char, lapl: hid_t) -> c_int;
    fn H5Dopen2(loc: hid_t, name: *const c_char, dapl: hid_t) -> hid_t;
    fn H5Dcreate2(
        loc: hid_t,
        name: *const c_char,
        dtype: hid_t,
        space: hid_t,
        lcpl: hid_t,
        dcpl: hid_t,
        dapl: hid_t,
    ) -> hid_t;
    fn H5Dclose(id: hid_t) -> herr_t;
    fn H5Dget_space(id: hid_t) -> hid_t;
    fn H5Dget_type(id: hid_t) -> hid_t;
    fn H5Dread(id: hid_t, mem_type: hid_t, mem_space: hid_t, file_space: hid_t, xfer: hid_t, buf: *mut c_void) -> herr_t;
    fn H5Dwrite(id: hid_t, mem_type: hid_t, mem_space: hid_t, file_space: hid_t, xfer: hid_t, buf: *const c_void) -> herr_t;
    fn H5Screate_simple(rank: c_int, dims: *const hsize_t, maxdims: *const hsize_t) -> hid_t;
    fn H5Sget_simple_extent_ndims(id: hid_t) -> c_int;
    fn H5Sget_simple_extent_dims(id: hid_t, dims: *mut hsize_t, maxdims: *mut hsize_t) -> c_int;
    fn H5Sclose(id: hid_t) -> herr_t;
    fn H5Tcreate(class: c_int, size: usize) -> hid_t;
    fn H5Tinsert(parent: hid_t, name: *const c_char, offset: usize, member: hid_t) -> herr_t;
    fn H5Tget_class(id: hid_t) -> c_int;
    fn H5Tclose(id: hid_t) -> herr_t;

    static H5T_NATIVE_DOUBLE_g: hid_t;
    static H5T_NATIVE_FLOAT_g: hid_t;
}

/// libhdf5 is built without thread safety; serialize every call.
static LOCK: Mutex<()> = Mutex::new(());

/// Closes an HDF5 handle on drop.
struct Handle(hid_t, unsafe extern "C" fn(hid_t) -> herr_t);

impl Drop for Handle {
    fn drop(&mut self) {
        if self.0 >= 0 {
            unsafe {
                (self.1)(self.0);
            }
        }
    }
}

fn init() {
    unsafe {
        H5open();
        H5Eset_auto2(H5E_DEFAULT, std::ptr::null(), std::ptr::null_mut());
    }
}

/// The superblock signature sits at offset 0 or a power of two from 512 on.
/// Checking it up front keeps libhdf5 from leaking handles on a failed open.
fn has_hdf5_signature(path: &Path) -> bool {
    const SIG: &[u8; 8] = b"\x89HDF\r\n\x1a\n";
    let Ok(mut file) = File::open(path) else {
        return false;
    };
    let len = file.metadata().map_or(0, |m| m.len());
    let mut buf = [0u8; 8];
    std::iter::once(0u64)
        .chain((9..63).map(|p| 1u64 << p))
        .take_while(|&off| off + 8 <= len)
        .any(|off| {
            file.seek(SeekFrom::Start(off)).is_ok() && file.read_exact(&mut buf).is_ok() && &buf == SIG
        })
}

fn cstr(s: &str) -> CString {
    CString::new(s).expect("no interior NUL")
}

/// Memory type `{ r: T, i: T }` matching the h5py complex layout.
fn complex_type(double: bool) -> Handle {
    unsafe {
        let (base, size) = if double {
            (H5T_NATIVE_DOUBLE_g, 8)
        } else {
            (H5T_NATIVE_FLOAT_g, 4)
        };
        let t = H5Tcreate(H5T_COMPOUND, 2 * size);
        H5Tinsert(t, cstr("r").as_ptr(), 0, base);
        H5Tinsert(t, cstr("i").as_ptr(), size, base);
        Handle(t, H5Tclose)
    }
}

/// Read the `kspace` dataset. Returns `(slices, H, W)`.
pub fn read_kspace(path: &Path) -> Result<Array3<Complex64>> {
    let fail = |msg: &str| Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let name = path
        .to_str()
        .ok_or_else(|| fail("path is not valid UTF-8"))?;
    if !has_hdf5_signature(path) {
        return Err(fail("not a readable HDF5 file"));
    }
    let _guard = LOCK.lock().unwrap_or_else(|p| p.into_inner());
    init();
    unsafe {
        let file = Handle(H5Fopen(cstr(name).as_ptr(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
        if file.0 < 0 {
            return Err(fail("not a readable HDF5 file"));
        }
        let key = cstr("kspace");
        if H5Lexists(file.0, key.as_ptr(), H5P_DEFAULT) <= 0 {
            return Err(fail("no `kspace` dataset"));
        }
        let dset = Handle(H5Dopen2(file.0, key.as_ptr(), H5P_DEFAULT), H5Dclose);
        if dset.0 < 0 {
            return Err(fail("cannot open `kspace` dataset"));
        }
        let space = Handle(H5Dget_space(dset.0), H5Sclose);
        let rank = H5Sget_simple_extent_ndims(space.0);
        if rank == 4 {
            return Err(fail("multi-coil unsupported: kspace has a coil axis"));
        }
        if rank != 3 {
            return Err(fail(&format!("kspace must be (slices, H, W), found rank {rank}")));
        }
        let mut dims = [0 as hsize_t; 3];
        H5Sget_simple_extent_dims(space.0, dims.as_mut_ptr(), std::ptr::null_mut());
        let ftype = Handle(H5Dget_type(dset.0), H5Tclose);
        if H5Tget_class(ftype.0) != H5T_COMPOUND {
            return Err(fail("kspace must be complex"));
        }
        let shape = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        let n = shape.0 * shape.1 * shape.2;
        if n == 0 {
            return Err(fail("kspace is empty"));
        }
        let mem = complex_type(true);
        let mut buf = vec![0.0f64; 2 * n];
        let status = H5Dread(
            dset.0,
            mem.0,
            H5S_ALL,
            H5S_ALL,
            H5P_DEFAULT,
            buf.as_mut_ptr() as *mut c_void,
        );
        if status < 0 {
            return Err(fail("kspace members are not readable as (r, i)"));
        }
        let data = buf.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        Ok(Array3::from_shape_vec(shape, data).expect("dims match"))
    }
}

/// Write a complex `kspace` dataset of any rank (`single` selects float32 members).
pub fn write_kspace(path: &Path, shape: &[usize], data: &[Complex64], single: bool) -> Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let fail = |msg: &str| Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let name = path
        .to_str()
        .ok_or_else(|| fail("path is not valid UTF-8"))?;
    let _guard = LOCK.lock().unwrap_or_else(|p| p.into_inner());
    init();
    unsafe {
        let file = Handle(
            H5Fcreate(cstr(name).as_ptr(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT),
            H5Fclose,
        );
        if file.0 < 0 {
            return Err(fail("cannot create HDF5 file"));
        }
        let dims: Vec<hsize_t> = shape.iter().map(|&d| d as hsize_t).collect();
        let space = Handle(
            H5Screate_simple(dims.len() as c_int, dims.as_ptr(), std::ptr::null()),
            H5Sclose,
        );
        let ftype = complex_type(!single);
        let dset = Handle(
            H5Dcreate2(
                file.0,
                cstr("kspace").as_ptr(),
                ftype.0,
                space.0,
                H5P_DEFAULT,
                H5P_DEFAULT,
                H5P_DEFAULT,
            ),
            H5Dclose,
        );
        if dset.0 < 0 {
            return Err(fail("cannot create kspace dataset"));
        }
        let mem = complex_type(true);
        let buf: Vec<f64> = data.iter().flat_map(|c| [c.re, c.im]).collect();
        if H5Dwrite(dset.0, mem.0, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.as_ptr() as *const c_void) < 0 {
            return Err(fail("cannot write kspace dataset"));
        }
    }
    Ok(())
}

/// One record per slice, cropped/resized to `target`, patient id from the file stem.
pub fn ingest_hdf5_kspace(path: &Path, target: usize) -> Result<Vec<SliceRecord>> {
    let k = read_kspace(path)?;
    let patient = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());
    k.outer_iter()
        .enumerate()
        .map(|(i, slice)| {
            let slice: Array2<Complex64> = slice.to_owned();
            let (_, _, image) = center_crop_resize(&slice, target).map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
            record_from_complex(
                &image,
                patient.clone(),
                i,
                Provenance::Ingested {
                    path: path.display().to_string(),
                },
            )
        })
        .collect()
}
