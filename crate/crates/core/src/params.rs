//! Model parameters and their flat-vector layouts.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One point source: Gaussian center (nm) and peak amplitude (expected counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeadParams {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
}

impl BeadParams {
    pub fn new(x: f64, y: f64, amplitude: f64) -> Self {
        BeadParams { x, y, amplitude }
    }
}

/// Full parameter vector of the intensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beads: Vec<BeadParams>,
    /// Gaussian width `S` in nm.
    pub psf_width: f64,
    /// Constant background `B` in expected counts per pixel.
    pub background: f64,
    /// Instrumentation-noise variance `theta` in squared counts.
    pub instrument_var: f64,
}

impl ModelParams {
    pub fn new(
        beads: Vec<BeadParams>,
        psf_width: f64,
        background: f64,
        instrument_var: f64,
    ) -> Self {
        ModelParams {
            beads,
            psf_width,
            background,
            instrument_var,
        }
    }

    #[inline]
    pub fn bead_count(&self) -> usize {
        self.beads.len()
    }

    /// Checks the static invariants. The `f_i + theta > 0` invariant depends
    /// on a frame and is checked where the likelihood is evaluated.
    pub fn validate(&self) -> Result<()> {
        if !(self.psf_width.is_finite() && self.psf_width > 0.0) {
            return Err(Error::InvalidParams(format!(
                "psf_width must be positive, got {}",
                self.psf_width
            )));
        }
        if !(self.background.is_finite() && self.background >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "background must be nonnegative, got {}",
                self.background
            )));
        }
        if !(self.instrument_var.is_finite() && self.instrument_var >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "instrument_var must be nonnegative, got {}",
                self.instrument_var
            )));
        }
        for (j, b) in self.beads.iter().enumerate() {
            if !(b.x.is_finite() && b.y.is_finite()) {
                return Err(Error::InvalidParams(format!("bead {j} has a non-finite center")));
            }
            if !(b.amplitude.is_finite() && b.amplitude >= 0.0) {
                return Err(Error::InvalidParams(format!(
                    "bead {j} amplitude must be nonnegative, got {}",
                    b.amplitude
                )));
            }
        }
        Ok(())
    }

    /// Index of the bead with the smallest amplitude.
    pub fn dimmest_bead(&self) -> Option<usize> {
        self.beads
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.amplitude.total_cmp(&b.1.amplitude))
            .map(|(j, _)| j)
    }

    /// Copy with bead `index` removed.
    pub fn without_bead(&self, index: usize) -> ModelParams {
        let mut out = self.clone();
        out.beads.remove(index);
        out
    }
}

/// A named scalar parameter of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    X(usize),
    Y(usize),
    Amplitude(usize),
    PsfWidth,
    Background,
    InstrumentVar,
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::X(j) => write!(f, "x{j}"),
            Param::Y(j) => write!(f, "y{j}"),
            Param::Amplitude(j) => write!(f, "A{j}"),
            Param::PsfWidth => f.write_str("S"),
            Param::Background => f.write_str("B"),
            Param::InstrumentVar => f.write_str("theta"),
        }
    }
}

/// Ordering of the free parameters of a `k`-bead model as a flat vector:
/// `(x_0, y_0, A_0, ..., x_{k-1}, y_{k-1}, A_{k-1}, S, B, theta)`.
///
/// `S` is dropped when there are no beads (it does not enter the model), and
/// `theta` is dropped for least-squares fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub beads: usize,
    pub with_theta: bool,
}

impl ParamLayout {
    pub fn new(beads: usize, with_theta: bool) -> Self {
        ParamLayout { beads, with_theta }
    }

    pub fn len(&self) -> usize {
        3 * self.beads + usize::from(self.beads > 0) + 1 + usize::from(self.with_theta)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn psf_index(&self) -> Option<usize> {
        (self.beads > 0).then_some(3 * self.beads)
    }

    pub fn background_index(&self) -> usize {
        3 * self.beads + usize::from(self.beads > 0)
    }

    pub fn theta_index(&self) -> Option<usize> {
        self.with_theta.then(|| self.background_index() + 1)
    }

    pub fn index_of(&self, param: Param) -> Option<usize> {
        match param {
            Param::X(j) if j < self.beads => Some(3 * j),
            Param::Y(j) if j < self.beads => Some(3 * j + 1),
            Param::Amplitude(j) if j < self.beads => Some(3 * j + 2),
            Param::PsfWidth => self.psf_index(),
            Param::Background => Some(self.background_index()),
            Param::InstrumentVar => self.theta_index(),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.beads {
            out.extend([Param::X(j), Param::Y(j), Param::Amplitude(j)]);
        }
        if self.beads > 0 {
            out.push(Param::PsfWidth);
        }
        out.push(Param::Background);
        if self.with_theta {
            out.push(Param::InstrumentVar);
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.params().iter().map(ToString::to_string).collect()
    }

    pub fn pack(&self, p: &ModelParams) -> Vec<f64> {
        debug_assert_eq!(p.bead_count(), self.beads);
        let mut out = Vec::with_capacity(self.len());
        for b in &p.beads {
            out.extend([b.x, b.y, b.amplitude]);
        }
        if self.beads > 0 {
            out.push(p.psf_width);
        }
        out.push(p.background);
        if self.with_theta {
            out.push(p.instrument_var);
        }
        out
    }

    /// Inverse of [`pack`](Self::pack). Parameters absent from the layout are
    /// copied from `template`.
    pub fn unpack(&self, v: &[f64], template: &ModelParams) -> ModelParams {
        debug_assert_eq!(v.len(), self.len());
        let beads = (0..self.beads)
            .map(|j| BeadParams::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]))
            .collect();
        ModelParams {
            beads,
            psf_width: self.psf_index().map_or(template.psf_width, |i| v[i]),
            background: v[self.background_index()],
            instrument_var: self.theta_index().map_or(template.instrument_var, |i| v[i]),
        }
    }
}
