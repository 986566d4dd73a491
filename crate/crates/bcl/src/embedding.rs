//! Embedding data model: raw parameters, their unit-norm view, class
//! prototypes, and the hypersphere projection every gradient goes through.
//!
//! All matrices are row-major with one instance per row. Labels are stored
//! zero-based: class ids live in `0..K`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row norms below this are treated as genuinely degenerate rather than
/// float noise.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// Unnormalized embedding parameters `w` with labels; the optimization
/// variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfiguration {
    pub w: Array2<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl RawConfiguration {
    pub fn new(w: Array2<f64>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 || k == 0 {
            return Err(Error::DimensionMismatch(format!(
                "need N >= 1, h >= 1, K >= 1 (got N={}, h={}, K={})",
                w.nrows(),
                w.ncols(),
                k
            )));
        }
        if labels.len() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                w.nrows()
            )));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange { row, label, k });
            }
        }
        for (row, r) in w.rows().into_iter().enumerate() {
            let norm = l2_norm(r);
            if norm < ZERO_NORM_THRESHOLD {
                return Err(Error::ZeroVector { row, norm });
            }
        }
        Ok(Self { w, labels, k })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn h(&self) -> usize {
        self.w.ncols()
    }
}

/// The l2-normalized view of a [`RawConfiguration`]; input to every loss.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitConfiguration {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl UnitConfiguration {
    /// Wraps a matrix whose rows are already unit-norm (within 1e-10).
    pub fn new(z: Array2<f64>, labels: Vec<usize>, k: usize) -> Result<Self> {
        for (row, r) in z.rows().into_iter().enumerate() {
            let norm = l2_norm(r);
            if (norm - 1.0).abs() > 1e-10 {
                return Err(Error::DimensionMismatch(format!(
                    "row {row} has norm {norm}, not unit within 1e-10"
                )));
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange { row, label, k });
            }
        }
        Ok(Self { z, labels, k })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn h(&self) -> usize {
        self.z.ncols()
    }
}

/// One unit-norm prototype per class; implements class-complement.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub c: Array2<f64>,
}

impl PrototypeSet {
    pub fn new(c: Array2<f64>) -> Result<Self> {
        for (row, r) in c.rows().into_iter().enumerate() {
            let norm = l2_norm(r);
            if (norm - 1.0).abs() > 1e-10 {
                return Err(Error::DimensionMismatch(format!(
                    "prototype {row} has norm {norm}, not unit within 1e-10"
                )));
            }
        }
        Ok(Self { c })
    }

    /// Normalizes a raw K x h parameter matrix into a prototype set.
    pub fn from_raw(raw: &Array2<f64>) -> Result<Self> {
        Ok(Self {
            c: normalize_rows(raw)?,
        })
    }

    pub fn k(&self) -> usize {
        self.c.nrows()
    }
}

/// Divides every row of `raw.w` by its Euclidean norm.
///
/// Labels pass through unchanged. Errors with [`Error::ZeroVector`] if any
/// row norm is below 1e-12.
pub fn normalize(raw: &RawConfiguration) -> Result<UnitConfiguration> {
    Ok(UnitConfiguration {
        z: normalize_rows(&raw.w)?,
        labels: raw.labels.clone(),
        k: raw.k,
    })
}

pub(crate) fn normalize_rows(w: &Array2<f64>) -> Result<Array2<f64>> {
    let mut z = w.clone();
    for (row, mut r) in z.rows_mut().into_iter().enumerate() {
        let norm = l2_norm(r.view());
        if norm < ZERO_NORM_THRESHOLD {
            return Err(Error::ZeroVector { row, norm });
        }
        // overflowed parameters must not silently normalize to a zero row
        if !norm.is_finite() {
            return Err(Error::NonFinite(row));
        }
        r.mapv_inplace(|x| x / norm);
    }
    Ok(z)
}

/// Pushes a gradient `g_z` (taken with respect to the normalized row `z_i`)
/// back through the normalization to the raw row `w_i`:
///
/// ```text
/// dw = (1/||w||) (I - z z^T) g_z = (1/||w||) (g_z - (z . g_z) z)
/// ```
///
/// The output is orthogonal to `z_i`.
pub fn sphere_project_gradient(
    w_i: ArrayView1<f64>,
    z_i: ArrayView1<f64>,
    g_z: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let norm = l2_norm(w_i);
    if norm < ZERO_NORM_THRESHOLD {
        return Err(Error::ZeroVector { row: 0, norm });
    }
    let radial = z_i.dot(&g_z);
    let mut out = g_z.to_owned();
    out.zip_mut_with(&z_i, |o, &z| *o = (*o - radial * z) / norm);
    Ok(out)
}

pub(crate) fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// JSON document for configurations: `{"h", "K", "labels", "w"}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigurationDocument {
    pub h: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub labels: Vec<usize>,
    pub w: Vec<Vec<f64>>,
}

impl ConfigurationDocument {
    pub fn from_raw(raw: &RawConfiguration) -> Self {
        Self {
            h: raw.h(),
            k: raw.k,
            labels: raw.labels.clone(),
            w: raw.w.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn into_raw(self) -> Result<RawConfiguration> {
        let n = self.w.len();
        let mut mat = Array2::<f64>::zeros((n, self.h));
        for (i, row) in self.w.iter().enumerate() {
            if row.len() != self.h {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected h={}",
                    row.len(),
                    self.h
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                mat[[i, j]] = x;
            }
        }
        RawConfiguration::new(mat, self.labels, self.k)
    }
}

/// Per-class mean directions (normalized class means) of a configuration.
///
/// Errors with [`Error::EmptyClass`] if some class in `0..K` has no instance.
pub fn class_mean_directions(z: &UnitConfiguration) -> Result<Array2<f64>> {
    let h = z.h();
    let mut sums = Array2::<f64>::zeros((z.k, h));
    let mut counts = vec![0usize; z.k];
    for (i, &y) in z.labels.iter().enumerate() {
        let mut row = sums.row_mut(y);
        row += &z.z.row(i);
        counts[y] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(c));
        }
    }
    sums.axis_iter_mut(Axis(0)).for_each(|mut r| {
        let norm = l2_norm(r.view());
        if norm >= ZERO_NORM_THRESHOLD {
            r.mapv_inplace(|x| x / norm);
        }
    });
    Ok(sums)
}
