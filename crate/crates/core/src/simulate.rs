//! Seeded synthetic frames: Poisson photon counts plus additive
//! instrumentation noise.
//!
//! Generator: ChaCha8 (`rand_chacha` 0.9.0, pinned), keyed by
//! `ChaCha8Rng::seed_from_u64(seed)`. Photon counts are drawn from stream 0
//! and instrumentation noise from stream 1, so two designs that differ only
//! in their noise law share identical photon counts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::frame::{Grid, ImageFrame};
use crate::model::{render, render_exact};
use crate::params::{BeadParams, ModelParams};

/// Pixel size used by the preset designs, in nm.
pub const PRESET_PIXEL_SIZE: f64 = 117.0;

const PHOTON_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// Draws an exact Poisson(`mean`) variate.
///
/// Sequential-search inversion for `mean < 10`; above that, Hörmann's
/// transformed rejection with squeeze (PTRS).
pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if !(mean.is_finite() && mean >= 0.0) {
        return Err(Error::Domain(format!(
            "Poisson mean must be finite and nonnegative, got {mean}"
        )));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < 10.0 {
        Ok(poisson_inversion(mean, rng))
    } else {
        Ok(poisson_ptrs(mean, rng))
    }
}

fn poisson_inversion<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        // cdf can stall just below 1 from rounding; the tail mass there is < 1e-15.
        if p < f64::MIN_POSITIVE || k > 1000 {
            break;
        }
    }
    k
}

fn poisson_ptrs<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -mean + k * loglam - ln_gamma(k + 1.0)
        {
            return k as u64;
        }
    }
}

/// Distribution of the additive instrumentation error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    Gaussian,
    StudentT3,
    CenteredExponential,
    None,
}

impl FromStr for NoiseLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "normal" => Ok(NoiseLaw::Gaussian),
            "t3" | "student_t3" => Ok(NoiseLaw::StudentT3),
            "exp" | "centered_exponential" => Ok(NoiseLaw::CenteredExponential),
            "none" => Ok(NoiseLaw::None),
            _ => Err(Error::Unknown {
                kind: "noise law",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for NoiseLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseLaw::Gaussian => "gaussian",
            NoiseLaw::StudentT3 => "student_t3",
            NoiseLaw::CenteredExponential => "centered_exponential",
            NoiseLaw::None => "none",
        })
    }
}

/// Instrumentation noise with mean 0 and variance `instrument_var` (zero for
/// [`NoiseLaw::None`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub law: NoiseLaw,
    pub instrument_var: f64,
}

impl NoiseSpec {
    pub fn new(law: NoiseLaw, instrument_var: f64) -> Result<Self> {
        if !(instrument_var.is_finite() && instrument_var >= 0.0) {
            return Err(Error::Domain(format!(
                "instrument variance must be nonnegative, got {instrument_var}"
            )));
        }
        Ok(NoiseSpec {
            law,
            instrument_var,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let theta = self.instrument_var;
        match self.law {
            NoiseLaw::None => 0.0,
            NoiseLaw::Gaussian => theta.sqrt() * rng.sample::<f64, _>(StandardNormal),
            NoiseLaw::StudentT3 => {
                let z: f64 = rng.sample(StandardNormal);
                let chi2: f64 = (0..3)
                    .map(|_| rng.sample::<f64, _>(StandardNormal).powi(2))
                    .sum();
                (theta / 3.0).sqrt() * z / (chi2 / 3.0).sqrt()
            }
            NoiseLaw::CenteredExponential => {
                let scale = theta.sqrt();
                let u: f64 = rng.random();
                -scale * (1.0 - u).ln() - scale
            }
        }
    }
}

/// Which pixel integral generates the expected counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    Midpoint,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub truth: ModelParams,
    pub grid: Grid,
    pub noise: NoiseSpec,
    pub intensity_mode: IntensityMode,
    pub seed: u64,
}

impl SimulationDesign {
    pub fn with_seed(&self, seed: u64) -> SimulationDesign {
        SimulationDesign {
            seed,
            ..self.clone()
        }
    }

    pub fn with_noise(&self, law: NoiseLaw) -> SimulationDesign {
        SimulationDesign {
            noise: NoiseSpec {
                law,
                ..self.noise
            },
            ..self.clone()
        }
    }

    /// Expected counts of the design, before any sampling.
    pub fn expected_counts(&self) -> Vec<f64> {
        match self.intensity_mode {
            IntensityMode::Midpoint => render(&self.truth, &self.grid),
            IntensityMode::Exact => render_exact(&self.truth, &self.grid),
        }
    }
}

/// Draws one frame: each pixel is Poisson(f_i) plus an independent noise draw.
pub fn simulate_frame(design: &SimulationDesign) -> Result<ImageFrame> {
    design.grid.validate()?;
    design.truth.validate()?;
    let mut photons = ChaCha8Rng::seed_from_u64(design.seed);
    photons.set_stream(PHOTON_STREAM);
    let mut noise = ChaCha8Rng::seed_from_u64(design.seed);
    noise.set_stream(NOISE_STREAM);

    let counts = design
        .expected_counts()
        .into_iter()
        .map(|f| {
            let n = sample_poisson(f, &mut photons)?;
            Ok(n as f64 + design.noise.sample(&mut noise))
        })
        .collect::<Result<Vec<f64>>>()?;
    ImageFrame::from_grid(design.grid, counts)
}

/// Named simulation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignPreset {
    Typical1,
    Typical4,
    Typical15,
    Dim,
    Close,
    Partial,
    HeavyTailed,
    Asymmetric,
}

impl DesignPreset {
    pub const ALL: [DesignPreset; 8] = [
        DesignPreset::Typical1,
        DesignPreset::Typical4,
        DesignPreset::Typical15,
        DesignPreset::Dim,
        DesignPreset::Close,
        DesignPreset::Partial,
        DesignPreset::HeavyTailed,
        DesignPreset::Asymmetric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DesignPreset::Typical1 => "typical1",
            DesignPreset::Typical4 => "typical4",
            DesignPreset::Typical15 => "typical15",
            DesignPreset::Dim => "dim",
            DesignPreset::Close => "close",
            DesignPreset::Partial => "partial",
            DesignPreset::HeavyTailed => "heavy_tailed",
            DesignPreset::Asymmetric => "asymmetric",
        }
    }

    pub fn design(self) -> SimulationDesign {
        const A: f64 = 15000.0;
        let four = |last: (f64, f64, f64)| {
            vec![
                BeadParams::new(4021.0, 5172.0, A),
                BeadParams::new(1497.0, 9241.0, A),
                BeadParams::new(7920.0, 1807.0, A),
                BeadParams::new(last.0, last.1, last.2),
            ]
        };
        let (beads, side, law) = match self {
            DesignPreset::Typical1 => (vec![BeadParams::new(7823.0, 3353.0, A)], 100, NoiseLaw::Gaussian),
            DesignPreset::Typical4 => (four((6000.0, 8722.0, A)), 100, NoiseLaw::Gaussian),
            DesignPreset::Dim => (four((6000.0, 8722.0, 400.0)), 100, NoiseLaw::Gaussian),
            DesignPreset::Close => (four((7920.0, 2207.0, A)), 100, NoiseLaw::Gaussian),
            DesignPreset::Partial => (four((6000.0, 50.0, A)), 100, NoiseLaw::Gaussian),
            DesignPreset::HeavyTailed => (four((6000.0, 8722.0, A)), 100, NoiseLaw::StudentT3),
            DesignPreset::Asymmetric => {
                (four((6000.0, 8722.0, A)), 100, NoiseLaw::CenteredExponential)
            }
            DesignPreset::Typical15 => {
                let centers = [
                    (23566.0, 4852.0),
                    (2522.0, 18672.0),
                    (10475.0, 4858.0),
                    (16643.0, 19505.0),
                    (6842.0, 16060.0),
                    (17753.0, 28518.0),
                    (28956.0, 6771.0),
                    (27512.0, 3454.0),
                    (4165.0, 13466.0),
                    (28960.0, 11712.0),
                    (25394.0, 28468.0),
                    (29112.0, 28770.0),
                    (18028.0, 21796.0),
                    (28318.0, 12251.0),
                    (27757.0, 11937.0),
                ];
                let beads = centers.iter().map(|&(x, y)| BeadParams::new(x, y, A)).collect();
                (beads, 260, NoiseLaw::Gaussian)
            }
        };
        SimulationDesign {
            truth: ModelParams::new(beads, 200.0, 200.0, 100.0),
            grid: Grid {
                rows: side,
                cols: side,
                pixel_size: PRESET_PIXEL_SIZE,
            },
            noise: NoiseSpec {
                law,
                instrument_var: 100.0,
            },
            intensity_mode: IntensityMode::Midpoint,
            seed: 0,
        }
    }
}

impl FromStr for DesignPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DesignPreset::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "design",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for DesignPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Looks up a preset design by name.
pub fn preset_design(name: &str) -> Result<SimulationDesign> {
    Ok(name.parse::<DesignPreset>()?.design())
}
