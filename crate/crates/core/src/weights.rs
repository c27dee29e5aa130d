//! Weight-matrix helpers: definiteness checks and row-major serde.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub fn scaled_identity(n: usize, s: f64) -> DMatrix<f64> {
    DMatrix::identity(n, n) * s
}

fn check_shape(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::InvalidParam(format!(
            "{name} must be {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam(format!("{name} has non-finite entries")));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidParam(format!("{name} must be symmetric")));
    }
    Ok(())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Symmetric positive semidefinite `n x n`.
pub fn require_psd(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    check_shape(name, m, n)?;
    if min_eigenvalue(m) < -1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidParam(format!("{name} must be positive semidefinite")));
    }
    Ok(())
}

/// Symmetric positive definite `n x n`.
pub fn require_pd(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    check_shape(name, m, n)?;
    if min_eigenvalue(m) <= 0.0 {
        return Err(Error::InvalidParam(format!("{name} must be positive definite")));
    }
    Ok(())
}

pub fn require_discount(name: &str, eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidParam(format!("{name} must lie in [0, 1), got {eta}")));
    }
    Ok(())
}

/// Serializes a matrix as nested rows, `[[a, b], [c, d]]`.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows must have equal length"));
        }
        Ok(DMatrix::from_row_iterator(
            nrows,
            ncols,
            rows.into_iter().flatten(),
        ))
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
            match m {
                Some(m) => {
                    let rows: Vec<Vec<f64>> = m
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect();
                    Some(rows).serialize(s)
                }
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<DMatrix<f64>>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] DMatrix<f64>);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Holder {
        #[serde(with = "rows")]
        m: DMatrix<f64>,
        #[serde(with = "rows::option", default)]
        o: Option<DMatrix<f64>>,
    }

    #[test]
    fn matrices_serialize_row_major() {
        let h = Holder {
            m: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            o: None,
        };
        let text = serde_json::to_string(&h).unwrap();
        assert_eq!(text, r#"{"m":[[1.0,2.0],[3.0,4.0]],"o":null}"#);
        let back: Holder = serde_json::from_str(&text).unwrap();
        assert_eq!(back, h);
        let back: Holder = serde_json::from_str(r#"{"m":[[1.0]],"o":[[2.0]]}"#).unwrap();
        assert_eq!(back.o.unwrap()[(0, 0)], 2.0);
        assert!(serde_json::from_str::<Holder>(r#"{"m":[[1.0],[2.0,3.0]]}"#).is_err());
    }

    #[test]
    fn definiteness_checks() {
        assert!(require_pd("a", &scaled_identity(2, 0.1), 2).is_ok());
        assert!(require_pd("a", &DMatrix::zeros(2, 2), 2).is_err());
        assert!(require_psd("a", &DMatrix::zeros(2, 2), 2).is_ok());
        assert!(require_psd("a", &scaled_identity(3, 1.0), 2).is_err());
        assert!(require_psd("a", &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), 2).is_err());
        assert!(require_discount("eta", 1.0).is_err());
    }
}
