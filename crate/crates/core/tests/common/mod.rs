//! Dense-matrix reference implementations for small instances.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sparse_ct::tomo::{fbp, radon};
use sparse_ct::{Filter, Geometry, Image, Sinogram};

/// Matrix of the projector restricted to `ids`, one column per pixel.
pub fn dense_radon(geom: &Geometry, ids: &[usize]) -> DMatrix<f64> {
    let (h, w) = (geom.image_height(), geom.image_width());
    let n = h * w;
    let m = ids.len() * geom.n_detectors();
    let mut a = DMatrix::zeros(m, n);
    for j in 0..n {
        let e = Image::from_fn(h, w, |r, c| if r * w + c == j { 1.0 } else { 0.0 });
        let col = radon(&e, geom, ids).unwrap();
        a.column_mut(j).copy_from_slice(col.data());
    }
    a
}

/// Matrix of FBP from the rows `ids`, one column per sinogram bin.
pub fn dense_fbp(geom: &Geometry, ids: &[usize], filter: Filter) -> DMatrix<f64> {
    let nd = geom.n_detectors();
    let m = ids.len() * nd;
    let n = geom.image_height() * geom.image_width();
    let mut b = DMatrix::zeros(n, m);
    for j in 0..m {
        let mut data = vec![0.0; m];
        data[j] = 1.0;
        let s = Sinogram::from_vec(ids.to_vec(), nd, data).unwrap();
        b.column_mut(j).copy_from_slice(fbp(&s, geom, filter).unwrap().data());
    }
    b
}

/// Orthonormal basis of the right singular vectors of `a` whose singular
/// value is at most `rel_tol` times the largest.
pub fn nullspace(a: &DMatrix<f64>, rel_tol: f64) -> Vec<DVector<f64>> {
    let n = a.ncols();
    // pad to square so the SVD returns the full right basis
    let mut sq = DMatrix::zeros(a.nrows().max(n), n);
    sq.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.unwrap();
    let top = svd.singular_values.max();
    (0..n).filter(|&i| svd.singular_values[i] <= rel_tol * top).map(|i| vt.row(i).transpose()).collect()
}

pub fn rows_of(y: &Sinogram, ids: &[usize]) -> DVector<f64> {
    let nd = y.n_detectors();
    let mut out = Vec::with_capacity(ids.len() * nd);
    for id in ids {
        let row = y.angle_ids().iter().position(|a| a == id).unwrap();
        out.extend_from_slice(y.row(row));
    }
    DVector::from_vec(out)
}

pub fn image_vec(img: &Image) -> DVector<f64> {
    DVector::from_column_slice(img.data())
}

pub fn vec_image(v: &DVector<f64>, h: usize, w: usize) -> Image {
    Image::from_vec(h, w, v.iter().cloned().collect()).unwrap()
}
