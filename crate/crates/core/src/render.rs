//! Rollout frames as binary PPM images.
//!
//! Each cell is drawn as a `CELL_PX` square: grey level from the log
//! permeability, tinted blue in proportion to its fill. Sensors are small
//! squares (red when active, black otherwise) and the centroid row is a
//! green horizontal line.

use std::io::Write;
use std::path::Path;

use crate::env::{Centroid, Observation, SensorGrid, SENSOR_COLS, SENSOR_ROWS};
use crate::field_gen::PermeabilityField;
use crate::flow_sim::FlowState;
use crate::{Error, Result};

pub const CELL_PX: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, c);
            }
        }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.rgb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_ppm(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn render_frame(
    field: &PermeabilityField,
    state: &FlowState,
    sensors: &SensorGrid,
    obs: &Observation,
    centroid: Option<&Centroid>,
) -> Image {
    let (w, h) = (field.width(), field.height());
    let mut img = Image::new(w * CELL_PX, h * CELL_PX);
    let logs: Vec<f64> = field.values().iter().map(|k| k.ln()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for r in 0..h {
        for c in 0..w {
            let grey = 60.0 + 160.0 * (logs[r * w + c] - lo) / span;
            let f = state.fill[r * w + c];
            let mix = |base: f64, tint: f64| (base * (1.0 - 0.8 * f) + tint * 0.8 * f).round() as u8;
            let color = [mix(grey, 20.0), mix(grey, 90.0), mix(grey, 230.0)];
            img.fill_rect(c * CELL_PX, r * CELL_PX, CELL_PX, CELL_PX, color);
        }
    }

    let row_y = |r: usize| {
        let [a, b] = sensors.grid_rows(r);
        (a + b + 1) as f64 * CELL_PX as f64 / 2.0
    };
    for r in 0..SENSOR_ROWS {
        for c in 0..SENSOR_COLS {
            let color = if obs.active(r, c) {
                [230, 30, 30]
            } else {
                [0, 0, 0]
            };
            let x = sensors.grid_col(c) * CELL_PX + CELL_PX / 2;
            let y = row_y(r) as usize;
            img.fill_rect(x.saturating_sub(2), y.saturating_sub(2), 4, 4, color);
        }
    }

    if let Some(cen) = centroid {
        let lower = (cen.c_y.floor() as usize).min(SENSOR_ROWS - 1);
        let upper = (lower + 1).min(SENSOR_ROWS - 1);
        let t = cen.c_y - lower as f64;
        let y = (row_y(lower) * (1.0 - t) + row_y(upper) * t).round() as usize;
        for x in 0..img.width {
            img.put(x, y.min(img.height - 1), [40, 220, 40]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::compute_centroid;

    #[test]
    fn frame_size_and_header() {
        let field = PermeabilityField::uniform(24, 60, 1.0).unwrap();
        let state = FlowState::for_field(&field);
        let sensors = SensorGrid::new(24, 60);
        let img = render_frame(&field, &state, &sensors, &Observation::default(), None);
        assert_eq!((img.width, img.height), (24 * CELL_PX, 60 * CELL_PX));
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n192 480\n255\n"));
        assert_eq!(buf.len(), 15 + 192 * 480 * 3);
    }

    #[test]
    fn active_sensors_and_centroid_are_drawn() {
        let field = PermeabilityField::uniform(24, 60, 1.0).unwrap();
        let state = FlowState::for_field(&field);
        let sensors = SensorGrid::new(24, 60);
        let mut bits = [0u8; crate::env::SENSOR_COUNT];
        bits[7 * SENSOR_COLS] = 1;
        let obs = Observation::from_bits(bits);
        let cen = compute_centroid(&obs).unwrap();
        let img = render_frame(&field, &state, &sensors, &obs, Some(&cen));
        let x = sensors.grid_col(0) * CELL_PX + CELL_PX / 2;
        assert_eq!(img.get(x, 0), img.get(x + 40, 0));
        // Midline: centroid line at y = 30 cells.
        assert_eq!(img.get(100, 30 * CELL_PX), [40, 220, 40]);
        assert_eq!(img.get(x - 1, 30 * CELL_PX - 2), [230, 30, 30]);
    }
}
