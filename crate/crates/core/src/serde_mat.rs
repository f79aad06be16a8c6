//! Row-major matrix serialization with explicit shape fields.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct RowMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMajor {
    fn from_mat(m: &DMatrix<f64>) -> RowMajor {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        RowMajor { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn into_mat<E: serde::de::Error>(self) -> Result<DMatrix<f64>, E> {
        if self.rows * self.cols != self.data.len() {
            return Err(E::custom(format!(
                "matrix shape {}x{} does not match {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    RowMajor::from_mat(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    RowMajor::deserialize(d)?.into_mat()
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(RowMajor::from_mat).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<RowMajor>::deserialize(d)?.into_iter().map(RowMajor::into_mat).collect()
    }
}

pub mod nested {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[Vec<DMatrix<f64>>], s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|v| v.iter().map(RowMajor::from_mat).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<DMatrix<f64>>>, D::Error> {
        Vec::<Vec<RowMajor>>::deserialize(d)?
            .into_iter()
            .map(|v| v.into_iter().map(RowMajor::into_mat).collect())
            .collect()
    }
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(RowMajor::from_mat).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<RowMajor>::deserialize(d)?.map(RowMajor::into_mat).transpose()
    }
}

pub mod dvec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
