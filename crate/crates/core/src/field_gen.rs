//! Randomized permeability fields.
//!
//! A field is built in three stages: white Gaussian log-noise is smoothed
//! with an isotropic Gaussian kernel and exponentiated, the two halves are
//! rescaled so the lower half is on average `lower_upper_ratio` times more
//! permeable than the upper half, and finally a number of straight
//! high-permeability racetracks are carved into the result.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, STREAM_LOG_NOISE, STREAM_RACETRACK};

/// Attempts at sampling racetracks that keep the lower half more permeable.
const RACETRACK_ATTEMPTS: u64 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    /// Mean permeability of the upper half.
    pub base_perm: f64,
    /// Mean permeability ratio lower/upper, applied before racetracks.
    pub lower_upper_ratio: f64,
    /// Standard deviation of the smoothing kernel, in cells. Zero disables smoothing.
    pub correlation_length: f64,
    /// Standard deviation of the log-permeability noise.
    pub log_sigma: f64,
    pub racetrack_count: usize,
    pub racetrack_multiplier: f64,
    /// Inclusive `[min, max]` racetrack length in cells.
    pub racetrack_length_range: [usize; 2],
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid_width: 24,
            grid_height: 60,
            base_perm: 1.0,
            lower_upper_ratio: 2.0,
            correlation_length: 4.0,
            log_sigma: 0.3,
            racetrack_count: 3,
            racetrack_multiplier: 8.0,
            racetrack_length_range: [8, 30],
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_width == 0 {
            return Err(Error::config("field.grid_width", "must be positive"));
        }
        if self.grid_height == 0 {
            return Err(Error::config("field.grid_height", "must be positive"));
        }
        if self.grid_height % 2 != 0 {
            return Err(Error::config("field.grid_height", "must be even"));
        }
        if !(self.base_perm.is_finite() && self.base_perm > 0.0) {
            return Err(Error::config("field.base_perm", "must be finite and positive"));
        }
        if !(self.lower_upper_ratio.is_finite() && self.lower_upper_ratio > 1.0) {
            return Err(Error::config("field.lower_upper_ratio", "must be greater than 1"));
        }
        if !(self.correlation_length.is_finite() && self.correlation_length >= 0.0) {
            return Err(Error::config("field.correlation_length", "must be nonnegative"));
        }
        if !(self.log_sigma.is_finite() && self.log_sigma >= 0.0) {
            return Err(Error::config("field.log_sigma", "must be nonnegative"));
        }
        if !(self.racetrack_multiplier.is_finite() && self.racetrack_multiplier > 1.0) {
            return Err(Error::config("field.racetrack_multiplier", "must be greater than 1"));
        }
        let [lo, hi] = self.racetrack_length_range;
        if lo == 0 || lo > hi {
            return Err(Error::config(
                "field.racetrack_length_range",
                format!("needs 1 <= min <= max, got [{lo}, {hi}]"),
            ));
        }
        Ok(())
    }
}

/// Direction of a straight racetrack, as a (row, col) step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Horizontal,
    Vertical,
    /// Down and to the right.
    DiagonalDown,
    /// Up and to the right.
    DiagonalUp,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::Horizontal,
        Orientation::Vertical,
        Orientation::DiagonalDown,
        Orientation::DiagonalUp,
    ];

    fn step(self) -> (isize, isize) {
        match self {
            Orientation::Horizontal => (0, 1),
            Orientation::Vertical => (1, 0),
            Orientation::DiagonalDown => (1, 1),
            Orientation::DiagonalUp => (-1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Racetrack {
    /// (row, col) of the first cell.
    pub start: (usize, usize),
    pub orientation: Orientation,
    /// Length in cells after clipping at the domain boundary.
    pub length: usize,
}

impl Racetrack {
    /// Rasterize a segment of `requested` cells, stopping at the boundary.
    pub fn clipped(
        start: (usize, usize),
        orientation: Orientation,
        requested: usize,
        width: usize,
        height: usize,
    ) -> Self {
        let (dr, dc) = orientation.step();
        let mut length = 0;
        let (mut r, mut c) = (start.0 as isize, start.1 as isize);
        while length < requested.max(1)
            && r >= 0
            && c >= 0
            && (r as usize) < height
            && (c as usize) < width
        {
            length += 1;
            r += dr;
            c += dc;
        }
        Self {
            start,
            orientation,
            length: length.max(1),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (dr, dc) = self.orientation.step();
        (0..self.length as isize).map(move |i| {
            (
                (self.start.0 as isize + dr * i) as usize,
                (self.start.1 as isize + dc * i) as usize,
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    width: usize,
    height: usize,
    /// Row-major, row 0 at the top gate.
    k: Vec<f64>,
    racetracks: Vec<Racetrack>,
    /// Harmonic-mean face permeability towards (up, left, right, down); 0 at walls.
    faces: Vec<[f64; 4]>,
}

impl PermeabilityField {
    pub fn from_values(width: usize, height: usize, k: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || k.len() != width * height {
            return Err(Error::Usage(format!(
                "field of {width}x{height} needs {} values, got {}",
                width * height,
                k.len()
            )));
        }
        if let Some(bad) = k.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Usage(format!("permeability {bad} is not positive")));
        }
        let mut field = Self {
            width,
            height,
            k,
            racetracks: Vec::new(),
            faces: Vec::new(),
        };
        field.compute_faces();
        Ok(field)
    }

    fn compute_faces(&mut self) {
        let (w, h, k) = (self.width, self.height, &self.k);
        let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
        self.faces = (0..w * h)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                [
                    if r > 0 { harmonic(k[i], k[i - w]) } else { 0.0 },
                    if c > 0 { harmonic(k[i], k[i - 1]) } else { 0.0 },
                    if c + 1 < w { harmonic(k[i], k[i + 1]) } else { 0.0 },
                    if r + 1 < h { harmonic(k[i], k[i + w]) } else { 0.0 },
                ]
            })
            .collect();
    }

    /// Face permeabilities of cell `i` towards (up, left, right, down).
    #[inline]
    pub fn faces(&self, i: usize) -> &[f64; 4] {
        &self.faces[i]
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_values(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let k = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self::from_values(width, height, k)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.k
    }

    pub fn racetracks(&self) -> &[Racetrack] {
        &self.racetracks
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.k[row * self.width + col]
    }

    /// Row-major mask of cells covered by at least one racetrack.
    pub fn racetrack_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.k.len()];
        for rt in &self.racetracks {
            for (r, c) in rt.cells() {
                mask[r * self.width + c] = true;
            }
        }
        mask
    }

    fn half_mean(&self, lower: bool, exclude: Option<&[bool]>) -> f64 {
        let half = self.height / 2;
        let rows = if lower { half..self.height } else { 0..half };
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in rows {
            for c in 0..self.width {
                let i = r * self.width + c;
                if exclude.is_some_and(|m| m[i]) {
                    continue;
                }
                sum += self.k[i];
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    pub fn upper_mean(&self) -> f64 {
        self.half_mean(false, None)
    }

    pub fn lower_mean(&self) -> f64 {
        self.half_mean(true, None)
    }

    /// Half means ignoring racetrack cells, as `(upper, lower)`.
    pub fn background_means(&self) -> (f64, f64) {
        let mask = self.racetrack_mask();
        (
            self.half_mean(false, Some(&mask)),
            self.half_mean(true, Some(&mask)),
        )
    }

    /// Multiply every cell covered by `tracks` by `multiplier`, once per cell.
    pub fn apply_racetracks(&self, tracks: Vec<Racetrack>, multiplier: f64) -> Self {
        let mut out = self.clone();
        let mut hit = vec![false; self.k.len()];
        for rt in &tracks {
            for (r, c) in rt.cells() {
                hit[r * self.width + c] = true;
            }
        }
        for (k, h) in out.k.iter_mut().zip(&hit) {
            if *h {
                *k *= multiplier;
            }
        }
        out.racetracks.extend(tracks);
        out.compute_faces();
        out
    }

    /// Write the grid as CSV, one grid row per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_grid_csv(&mut w, self.width, &self.k)
    }
}

pub(crate) fn write_grid_csv<W: Write>(w: &mut W, width: usize, values: &[f64]) -> std::io::Result<()> {
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Generate a fresh field for `seed`. Deterministic in `(seed, cfg)`.
pub fn generate_field(seed: u64, cfg: &FieldConfig) -> Result<PermeabilityField> {
    cfg.validate()?;
    let (w, h) = (cfg.grid_width, cfg.grid_height);

    let mut rng = seeding::rng(seed, STREAM_LOG_NOISE, 0);
    let noise: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    let mut log_k = gaussian_smooth(&noise, w, h, cfg.correlation_length);
    standardize(&mut log_k);

    let mut k: Vec<f64> = log_k.iter().map(|z| (cfg.log_sigma * z).exp()).collect();
    let half = h / 2;
    let upper_mean = k[..half * w].iter().sum::<f64>() / (half * w) as f64;
    let lower_mean = k[half * w..].iter().sum::<f64>() / ((h - half) * w) as f64;
    let upper_scale = cfg.base_perm / upper_mean;
    let lower_scale = cfg.base_perm * cfg.lower_upper_ratio / lower_mean;
    for (i, v) in k.iter_mut().enumerate() {
        *v *= if i < half * w { upper_scale } else { lower_scale };
    }
    let base = PermeabilityField::from_values(w, h, k)?;

    // Racetracks in the upper half could in principle overturn the
    // asymmetry; resample them until the lower half stays ahead.
    let mut carved = base.clone();
    for attempt in 0..RACETRACK_ATTEMPTS {
        carved = carve_racetracks(&base, seeding::derive(seed, STREAM_RACETRACK, attempt), cfg);
        if carved.lower_mean() > carved.upper_mean() {
            return Ok(carved);
        }
    }
    Err(Error::Numeric(format!(
        "could not place racetracks preserving the lower/upper asymmetry (upper {}, lower {})",
        carved.upper_mean(),
        carved.lower_mean()
    )))
}

/// Insert `cfg.racetrack_count` random straight racetracks into `field`.
pub fn carve_racetracks(
    field: &PermeabilityField,
    seed: u64,
    cfg: &FieldConfig,
) -> PermeabilityField {
    let (w, h) = (field.width(), field.height());
    let mut rng = seeding::rng(seed, STREAM_RACETRACK, u64::MAX);
    let [lo, hi] = cfg.racetrack_length_range;
    let tracks = (0..cfg.racetrack_count)
        .map(|_| {
            let start = (rng.random_range(0..h), rng.random_range(0..w));
            let orientation = Orientation::ALL[rng.random_range(0..Orientation::ALL.len())];
            let length = rng.random_range(lo..=hi.max(lo));
            Racetrack::clipped(start, orientation, length, w, h)
        })
        .collect();
    field.apply_racetracks(tracks, cfg.racetrack_multiplier)
}

/// Separable Gaussian blur with boundary renormalization.
fn gaussian_smooth(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let blur = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (kd, weight) in kernel.iter().enumerate() {
                    let d = kd as isize - radius;
                    let (rr, cc) = if along_rows {
                        (r as isize, c as isize + d)
                    } else {
                        (r as isize + d, c as isize)
                    };
                    if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                        continue;
                    }
                    acc += weight * src[rr as usize * w + cc as usize];
                    norm += weight;
                }
                out[r * w + c] = acc / norm;
            }
        }
        out
    };
    let horizontal = blur(values, true);
    blur(&horizontal, false)
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}
