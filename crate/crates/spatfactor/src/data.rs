//! Observed outcomes y over (location, type, time) with optional covariates.
//! Rows are r = o·m + i (space fastest), columns are time points.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Location coordinates, one entry per site.
    pub coords: Vec<Vec<f64>>,
    /// Number of observation types O.
    pub o: usize,
    pub timepoints: Vec<f64>,
    /// (m·O) × T.
    pub y: DMatrix<f64>,
    /// Covariates per time point, each (m·O) × p. Empty when p = 0.
    pub x: Vec<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(coords: Vec<Vec<f64>>, o: usize, timepoints: Vec<f64>, y: DMatrix<f64>, x: Vec<DMatrix<f64>>) -> Result<Dataset> {
        let d = Dataset { coords, o, timepoints, y, x };
        d.validate()?;
        Ok(d)
    }

    pub fn m(&self) -> usize {
        self.coords.len()
    }

    pub fn n(&self) -> usize {
        self.m() * self.o
    }

    pub fn t(&self) -> usize {
        self.timepoints.len()
    }

    pub fn p(&self) -> usize {
        self.x.first().map_or(0, |x| x.ncols())
    }

    pub fn row(&self, i: usize, o: usize) -> usize {
        o * self.m() + i
    }

    pub fn validate(&self) -> Result<()> {
        if self.m() == 0 || self.o == 0 || self.t() == 0 {
            return Err(Error::Data("dataset has an empty dimension".into()));
        }
        if self.y.nrows() != self.n() || self.y.ncols() != self.t() {
            return Err(Error::Data(format!(
                "y is {}x{}, expected {}x{}",
                self.y.nrows(),
                self.y.ncols(),
                self.n(),
                self.t()
            )));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("y contains non-finite values".into()));
        }
        if !self.x.is_empty() {
            if self.x.len() != self.t() {
                return Err(Error::Data("covariates must be given for every time point".into()));
            }
            let p = self.p();
            if self.x.iter().any(|x| x.nrows() != self.n() || x.ncols() != p) {
                return Err(Error::Data("covariate blocks have inconsistent shape".into()));
            }
        }
        Ok(())
    }

    /// X_t β per row, or zeros when there are no covariates.
    pub fn xbeta(&self, t: usize, beta: &[f64]) -> Vec<f64> {
        if self.x.is_empty() {
            return vec![0.0; self.n()];
        }
        let x = &self.x[t];
        (0..self.n()).map(|r| (0..self.p()).map(|c| x[(r, c)] * beta[c]).sum()).collect()
    }
}
