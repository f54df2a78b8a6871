//! Quasi-static Darcy fill simulation.
//!
//! The mould is a grid of control volumes. A cell conducts once it is full;
//! conducting cells carry an unknown pressure that satisfies discrete
//! `div(k grad p) = 0` with harmonic-mean face permeabilities. Dirichlet
//! conditions hold on the rows of open gates (`p_inlet`), on non-full cells
//! next to the saturated region (`p_front`) and on vent-band cells that have
//! been reached (`p_front`, outflux discarded). Side walls and closed gates
//! are no-flux.
//!
//! Face fluxes from conducting cells into non-full cells fill those cells.
//! Between saturation events the pressure field is constant, so each
//! sub-step of length `dt` is integrated exactly by splitting it at every
//! event and re-solving the pressure only when the saturated set changes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::GateAction;
use crate::error::{Error, Result};
use crate::field_gen::{write_grid_csv, PermeabilityField};

/// Remaining capacity below which a cell is treated as full.
const SATURATION_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureSolver {
    /// Banded Cholesky factorization of the saturated-region system.
    Direct,
    /// Warm-started successive over-relaxation.
    Sor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub p_inlet: f64,
    pub p_front: f64,
    pub solver: PressureSolver,
    pub sor_omega: f64,
    /// Stop when the largest cell flux imbalance drops below this.
    pub sor_tol: f64,
    pub sor_max_iters: usize,
    /// Simulated time covered by one sub-step.
    pub dt: f64,
    pub substeps_per_action: usize,
    /// Largest fill increment any cell may receive in one integration step.
    pub cfl: f64,
    /// Hold reached cells of the two central rows at `p_front`.
    pub vent: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            p_inlet: 1.0,
            p_front: 0.0,
            solver: PressureSolver::Direct,
            sor_omega: 1.7,
            sor_tol: 1e-6,
            sor_max_iters: 20_000,
            dt: 0.5,
            substeps_per_action: DEFAULT_SUBSTEPS_PER_ACTION,
            cfl: 0.9,
            vent: true,
        }
    }
}

/// Output of `dualgate calibrate` on the default field and solver settings.
pub const DEFAULT_SUBSTEPS_PER_ACTION: usize = 7;

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_inlet.is_finite() && self.p_front.is_finite() && self.p_inlet > self.p_front) {
            return Err(Error::config("solver.p_inlet", "must be finite and exceed p_front"));
        }
        if self.p_front < 0.0 {
            return Err(Error::config("solver.p_front", "must be nonnegative"));
        }
        if !(self.sor_omega > 0.0 && self.sor_omega < 2.0) {
            return Err(Error::config("solver.sor_omega", "must lie in (0, 2)"));
        }
        if !(self.sor_tol.is_finite() && self.sor_tol > 0.0) {
            return Err(Error::config("solver.sor_tol", "must be positive"));
        }
        if self.sor_max_iters == 0 {
            return Err(Error::config("solver.sor_max_iters", "must be positive"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("solver.dt", "must be positive"));
        }
        if self.substeps_per_action == 0 {
            return Err(Error::config("solver.substeps_per_action", "must be positive"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::config("solver.cfl", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    width: usize,
    height: usize,
    /// Row-major fill fractions in `[0, 1]`.
    pub fill: Vec<f64>,
    /// Row-major pressures; `p_front` on non-conducting cells.
    pub pressure: Vec<f64>,
    pub top_gate_open: bool,
    pub bottom_gate_open: bool,
    /// Sub-steps taken so far.
    pub substeps: u64,
    /// Simulated time so far.
    pub sim_time: f64,
    pressure_stale: bool,
    /// Cells saturated since the last pressure solve.
    newly_saturated: Vec<usize>,
    system: Option<Box<BorderedSystem>>,
}

impl PartialEq for FlowState {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.fill == other.fill
            && self.pressure == other.pressure
            && self.top_gate_open == other.top_gate_open
            && self.bottom_gate_open == other.bottom_gate_open
            && self.substeps == other.substeps
            && self.sim_time == other.sim_time
    }
}

impl FlowState {
    /// Dry mould with both gates closed.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            fill: vec![0.0; width * height],
            pressure: vec![0.0; width * height],
            top_gate_open: false,
            bottom_gate_open: false,
            substeps: 0,
            sim_time: 0.0,
            pressure_stale: true,
            newly_saturated: Vec::new(),
            system: None,
        }
    }

    pub fn for_field(field: &PermeabilityField) -> Self {
        Self::empty(field.width(), field.height())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn fill_at(&self, row: usize, col: usize) -> f64 {
        self.fill[row * self.width + col]
    }

    /// Set the gate flags, flooding the row of every open gate.
    pub fn set_gates(&mut self, top: bool, bottom: bool) {
        if top != self.top_gate_open || bottom != self.bottom_gate_open {
            self.invalidate_pressure();
        }
        self.top_gate_open = top;
        self.bottom_gate_open = bottom;
        let w = self.width;
        let last = (self.height - 1) * w;
        for (open, start) in [(top, 0), (bottom, last)] {
            if open {
                for f in &mut self.fill[start..start + w] {
                    if *f < 1.0 {
                        *f = 1.0;
                        self.pressure_stale = true;
                        self.system = None;
                    }
                }
            }
        }
    }

    /// Force a pressure re-solve before the next fill advance.
    pub fn invalidate_pressure(&mut self) {
        self.pressure_stale = true;
        self.system = None;
        self.newly_saturated.clear();
    }

    pub fn total_fill(&self) -> f64 {
        self.fill.iter().sum()
    }

    pub fn write_fill_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_grid_csv(&mut w, self.width, &self.fill)
    }

    pub fn write_pressure_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_grid_csv(&mut w, self.width, &self.pressure)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    /// Not yet full; Dirichlet `p_front` towards saturated neighbours.
    Dry,
    /// Saturated with unknown pressure; carries its index in the system.
    Free(usize),
    Inlet,
    Vent,
}

fn vent_rows(height: usize, cfg: &SolverConfig) -> Option<(usize, usize)> {
    (cfg.vent && height >= 2).then(|| (height / 2 - 1, height / 2))
}

/// Classify every cell and number the free ones in row-major order.
fn classify(state: &FlowState, cfg: &SolverConfig) -> (Vec<Cell>, usize) {
    let (w, h) = (state.width, state.height);
    let vent = vent_rows(h, cfg);
    let mut n = 0;
    let cells = (0..w * h)
        .map(|i| {
            let r = i / w;
            if (r == 0 && state.top_gate_open) || (r == h - 1 && state.bottom_gate_open) {
                Cell::Inlet
            } else if state.fill[i] < 1.0 {
                Cell::Dry
            } else if vent.is_some_and(|(a, b)| r == a || r == b) {
                Cell::Vent
            } else {
                n += 1;
                Cell::Free(n - 1)
            }
        })
        .collect();
    (cells, n)
}

/// Call `f(neighbour, conductance)` for the in-domain 4-neighbours of `i`.
#[inline]
fn for_neighbours(field: &PermeabilityField, i: usize, mut f: impl FnMut(usize, f64)) {
    let w = field.width();
    let [up, left, right, down] = *field.faces(i);
    if up > 0.0 {
        f(i - w, up);
    }
    if left > 0.0 {
        f(i - 1, left);
    }
    if right > 0.0 {
        f(i + 1, right);
    }
    if down > 0.0 {
        f(i + w, down);
    }
}

fn check_shapes(field: &PermeabilityField, state: &FlowState) -> Result<()> {
    if field.width() != state.width || field.height() != state.height {
        return Err(Error::Usage(format!(
            "state is {}x{} but field is {}x{}",
            state.width,
            state.height,
            field.width(),
            field.height()
        )));
    }
    Ok(())
}

fn dirichlet_value(cell: Cell, cfg: &SolverConfig) -> f64 {
    match cell {
        Cell::Inlet => cfg.p_inlet,
        _ => cfg.p_front,
    }
}

/// Solve for the pressure field of the current saturated region.
///
/// Uses `state.pressure` as the initial guess when the SOR solver is
/// selected. Requires at least one open gate.
pub fn solve_pressure(
    field: &PermeabilityField,
    state: &FlowState,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    check_shapes(field, state)?;
    if !state.top_gate_open && !state.bottom_gate_open {
        return Err(Error::Usage("pressure solve needs at least one open gate".into()));
    }
    let (cells, n) = classify(state, cfg);
    let mut p: Vec<f64> = cells
        .iter()
        .map(|&c| dirichlet_value(c, cfg))
        .collect();
    if n == 0 {
        return Ok(p);
    }
    match cfg.solver {
        PressureSolver::Direct => BorderedSystem::factor(field, state, cfg)?.write_pressure(&mut p)?,
        PressureSolver::Sor => {
            for (i, c) in cells.iter().enumerate() {
                if let Cell::Free(_) = c {
                    p[i] = state.pressure[i];
                }
            }
            solve_sor(field, &cells, cfg, &mut p)?;
        }
    }
    Ok(p)
}

/// Largest absolute flux imbalance over free cells.
pub fn pressure_residual(
    field: &PermeabilityField,
    state: &FlowState,
    cfg: &SolverConfig,
    pressure: &[f64],
) -> f64 {
    let (cells, _) = classify(state, cfg);
    max_residual(field, &cells, pressure)
}

fn max_residual(field: &PermeabilityField, cells: &[Cell], p: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (i, c) in cells.iter().enumerate() {
        if let Cell::Free(_) = c {
            let mut net = 0.0;
            for_neighbours(field, i, |j, g| net += g * (p[j] - p[i]));
            worst = worst.max(net.abs());
        }
    }
    worst
}

fn solve_sor(
    field: &PermeabilityField,
    cells: &[Cell],
    cfg: &SolverConfig,
    p: &mut [f64],
) -> Result<()> {
    let free: Vec<usize> = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| matches!(c, Cell::Free(_)).then_some(i))
        .collect();
    let mut residual = max_residual(field, cells, p);
    let mut iterations = 0;
    while residual >= cfg.sor_tol {
        if iterations == cfg.sor_max_iters {
            return Err(Error::SolverDiverged {
                iterations,
                residual,
            });
        }
        for &i in &free {
            let (mut num, mut den) = (0.0, 0.0);
            for_neighbours(field, i, |j, g| {
                num += g * p[j];
                den += g;
            });
            p[i] += cfg.sor_omega * (num / den - p[i]);
        }
        iterations += 1;
        residual = max_residual(field, cells, p);
    }
    Ok(())
}

/// Symmetric positive definite band matrix holding its lower triangle.
#[derive(Debug, Clone)]
struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    /// Entry `(i, j)` with `i - bw <= j <= i`.
    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * (self.bw + 1) + self.bw + j - i]
    }

    /// Row `i` of the band, columns `i - bw ..= i` (out-of-range columns padded).
    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)]
    }

    /// In-place Cholesky, `A = L L^T`.
    fn factor(&mut self) -> Result<()> {
        let bw = self.bw;
        let stride = bw + 1;
        for i in 0..self.n {
            let first = i.saturating_sub(bw);
            for j in first..=i {
                // Columns shared by rows i and j.
                let lo = first.max(j.saturating_sub(bw));
                let len = j - lo;
                let ri = i * stride + bw + lo - i;
                let rj = j * stride + bw + lo - j;
                let dot: f64 = self.data[ri..ri + len]
                    .iter()
                    .zip(&self.data[rj..rj + len])
                    .map(|(a, b)| a * b)
                    .sum();
                let idx = i * stride + bw + j - i;
                let s = self.data[idx] - dot;
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::SingularSystem(format!(
                            "nonpositive pivot {s:e} at unknown {i}; a saturated region has no pressure boundary"
                        )));
                    }
                    self.data[idx] = s.sqrt();
                } else {
                    self.data[idx] = s / self.data[j * stride + bw];
                }
            }
        }
        Ok(())
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let bw = self.bw;
        for i in 0..self.n {
            let first = i.saturating_sub(bw);
            let row = self.row(i);
            let dot: f64 = row[bw + first - i..bw]
                .iter()
                .zip(&b[first..i])
                .map(|(l, y)| l * y)
                .sum();
            b[i] = (b[i] - dot) / row[bw];
        }
        for i in (0..self.n).rev() {
            let row = self.row(i);
            b[i] /= row[bw];
            let first = i.saturating_sub(bw);
            let xi = b[i];
            for (y, l) in b[first..i].iter_mut().zip(&row[bw + first - i..bw]) {
                *y -= l * xi;
            }
        }
    }
}

/// Largest number of cells bordered onto a factorization before refactoring.
const MAX_BORDER: usize = 48;

/// Bring `state.pressure` up to date with the saturated set.
///
/// With the direct solver, cells saturated since the last factorization
/// are appended as a bordered block and eliminated through a small Schur
/// complement, so most saturation events cost one banded triangular solve.
fn refresh_pressure(
    field: &PermeabilityField,
    state: &mut FlowState,
    cfg: &SolverConfig,
) -> Result<()> {
    let added = std::mem::take(&mut state.newly_saturated);
    match cfg.solver {
        PressureSolver::Sor => state.pressure = solve_pressure(field, state, cfg)?,
        PressureSolver::Direct => {
            let reuse = state.system.as_ref().is_some_and(|sys| {
                sys.matches(cfg) && sys.extra.len() + added.len() <= MAX_BORDER
            });
            if reuse {
                let sys = state.system.as_mut().expect("checked above");
                for &c in &added {
                    sys.border(field, c);
                }
            } else {
                check_shapes(field, state)?;
                if !state.top_gate_open && !state.bottom_gate_open {
                    return Err(Error::Usage("pressure solve needs at least one open gate".into()));
                }
                state.system = Some(Box::new(BorderedSystem::factor(field, state, cfg)?));
            }
            let sys = state.system.as_ref().expect("just built");
            sys.write_pressure(&mut state.pressure)?;
        }
    }
    state.pressure_stale = false;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    None,
    Base(usize),
    Extra(usize),
}

/// Factorized pressure system plus cells bordered onto it since.
///
/// Works in `q = p - p_front`, so a dry cell turning into an unknown never
/// changes the right-hand side of its neighbours.
#[derive(Debug, Clone)]
struct BorderedSystem {
    p_inlet: f64,
    p_front: f64,
    vent: bool,
    /// Classification at factorization time.
    cells: Vec<Cell>,
    slot: Vec<Slot>,
    factor: BandedSpd,
    base_q: Vec<f64>,
    extra: Vec<usize>,
    /// Sparse couplings of each extra cell to base unknowns.
    coupling: Vec<Vec<(usize, f64)>>,
    /// `A^-1 u` for each extra cell's coupling column.
    z: Vec<Vec<f64>>,
    /// Symmetric block among the extra cells.
    d: Vec<Vec<f64>>,
    beta: Vec<f64>,
}

impl BorderedSystem {
    fn factor(field: &PermeabilityField, state: &FlowState, cfg: &SolverConfig) -> Result<Self> {
        let (cells, n) = classify(state, cfg);
        let q_inlet = cfg.p_inlet - cfg.p_front;
        let mut slot = vec![Slot::None; cells.len()];
        let mut base_grid = vec![0; n];
        let mut bandwidth = 0;
        for (i, &c) in cells.iter().enumerate() {
            if let Cell::Free(a) = c {
                slot[i] = Slot::Base(a);
                base_grid[a] = i;
                for_neighbours(field, i, |j, _| {
                    if let Cell::Free(b) = cells[j] {
                        bandwidth = bandwidth.max(a.abs_diff(b));
                    }
                });
            }
        }
        let mut factor = BandedSpd::zeros(n, bandwidth);
        let mut rhs = vec![0.0; n];
        for (a, &i) in base_grid.iter().enumerate() {
            for_neighbours(field, i, |j, g| {
                *factor.at_mut(a, a) += g;
                match cells[j] {
                    Cell::Free(b) if b < a => *factor.at_mut(a, b) -= g,
                    Cell::Free(_) => {}
                    Cell::Inlet => rhs[a] += g * q_inlet,
                    Cell::Dry | Cell::Vent => {}
                }
            });
        }
        factor.factor()?;
        factor.solve_in_place(&mut rhs);
        Ok(Self {
            p_inlet: cfg.p_inlet,
            p_front: cfg.p_front,
            vent: cfg.vent,
            cells,
            slot,
            factor,
            base_q: rhs,
            extra: Vec::new(),
            coupling: Vec::new(),
            z: Vec::new(),
            d: Vec::new(),
            beta: Vec::new(),
        })
    }

    fn matches(&self, cfg: &SolverConfig) -> bool {
        self.p_inlet == cfg.p_inlet && self.p_front == cfg.p_front && self.vent == cfg.vent
    }

    fn is_vent_row(&self, field: &PermeabilityField, i: usize) -> bool {
        let h = field.height();
        let r = i / field.width();
        self.vent && h >= 2 && (r == h / 2 - 1 || r == h / 2)
    }

    /// Turn dry cell `c` into an unknown.
    fn border(&mut self, field: &PermeabilityField, c: usize) {
        // Reached vent cells stay Dirichlet at `p_front`, exactly as when dry.
        if self.is_vent_row(field, c) || self.slot[c] != Slot::None {
            return;
        }
        let e = self.extra.len();
        let q_inlet = self.p_inlet - self.p_front;
        let mut diag = 0.0;
        let mut coupling = Vec::with_capacity(4);
        let mut row = vec![0.0; e + 1];
        let mut beta = 0.0;
        for_neighbours(field, c, |j, g| {
            diag += g;
            match self.slot[j] {
                Slot::Base(b) => coupling.push((b, -g)),
                Slot::Extra(f) => row[f] = -g,
                Slot::None => {
                    if self.cells[j] == Cell::Inlet {
                        beta += g * q_inlet;
                    }
                }
            }
        });
        row[e] = diag;
        for (f, prev) in self.d.iter_mut().enumerate() {
            prev.push(row[f]);
        }
        self.d.push(row);

        let mut z = vec![0.0; self.base_q.len()];
        for &(b, v) in &coupling {
            z[b] += v;
        }
        if !coupling.is_empty() {
            self.factor.solve_in_place(&mut z);
        }
        self.z.push(z);
        self.coupling.push(coupling);
        self.beta.push(beta);
        self.slot[c] = Slot::Extra(e);
        self.extra.push(c);
    }

    fn write_pressure(&self, p: &mut [f64]) -> Result<()> {
        let k = self.extra.len();
        let mut x = self.base_q.clone();
        let mut y = Vec::new();
        if k > 0 {
            let schur = nalgebra::DMatrix::from_fn(k, k, |a, b| {
                self.d[a][b]
                    - self.coupling[a]
                        .iter()
                        .map(|&(i, v)| v * self.z[b][i])
                        .sum::<f64>()
            });
            let r = nalgebra::DVector::from_fn(k, |a, _| {
                self.beta[a]
                    - self.coupling[a]
                        .iter()
                        .map(|&(i, v)| v * self.base_q[i])
                        .sum::<f64>()
            });
            let chol = schur.cholesky().ok_or_else(|| {
                Error::SingularSystem("bordered pressure block is not positive definite".into())
            })?;
            let sol = chol.solve(&r);
            for (b, zb) in self.z.iter().enumerate() {
                let yb = sol[b];
                for (xi, zi) in x.iter_mut().zip(zb) {
                    *xi -= zi * yb;
                }
            }
            y = sol.iter().copied().collect();
        }
        for (i, v) in p.iter_mut().enumerate() {
            *v = match self.slot[i] {
                Slot::Base(a) => self.p_front + x[a],
                Slot::Extra(e) => self.p_front + y[e],
                Slot::None if self.cells[i] == Cell::Inlet => self.p_inlet,
                Slot::None => self.p_front,
            };
        }
        Ok(())
    }
}

/// Volumes moved by one fill advance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FillAdvance {
    pub elapsed: f64,
    /// Volume entering through open gates.
    pub influx: f64,
    /// Volume leaving through vent cells.
    pub vent_outflux: f64,
    /// Sum of fill increments.
    pub fill_increase: f64,
    /// Cells that became full.
    pub saturated: usize,
}

impl FillAdvance {
    fn accumulate(&mut self, other: &FillAdvance) {
        self.elapsed += other.elapsed;
        self.influx += other.influx;
        self.vent_outflux += other.vent_outflux;
        self.fill_increase += other.fill_increase;
        self.saturated += other.saturated;
    }

    /// `|fill increase - (influx - outflux)|` relative to the influx.
    pub fn mass_balance_error(&self) -> f64 {
        let net = self.influx - self.vent_outflux;
        (self.fill_increase - net).abs() / self.influx.abs().max(f64::MIN_POSITIVE)
    }
}

/// Move resin into dry cells using the current pressure field.
///
/// Integrates for at most `max_dt`, stopping early when a cell saturates or
/// when the largest increment reaches `cfg.cfl`. `state.pressure` must be
/// current for the saturated set and gate flags.
pub fn advance_fill(
    field: &PermeabilityField,
    state: &mut FlowState,
    cfg: &SolverConfig,
    max_dt: f64,
) -> Result<FillAdvance> {
    check_shapes(field, state)?;
    let (w, h) = (state.width, state.height);
    let is_inlet = |i: usize| {
        (i < w && state.top_gate_open) || (i >= (h - 1) * w && state.bottom_gate_open)
    };
    let fill = &state.fill;
    let p = &state.pressure;
    let vent = vent_rows(h, cfg);
    let in_vent = |j: usize| vent.is_some_and(|(a, b)| j / w == a || j / w == b);
    let conducts = |j: usize| is_inlet(j) || (fill[j] >= 1.0 && !in_vent(j));

    let mut rate = vec![0.0; fill.len()];
    for (i, r) in rate.iter_mut().enumerate() {
        if fill[i] < 1.0 && !is_inlet(i) {
            for_neighbours(field, i, |j, g| {
                if conducts(j) {
                    *r += g * (p[j] - cfg.p_front);
                }
            });
        }
    }
    let mut influx = 0.0;
    let inlet_rows = [(state.top_gate_open, 0), (state.bottom_gate_open, h - 1)];
    for (open, row) in inlet_rows {
        if open {
            for i in row * w..(row + 1) * w {
                for_neighbours(field, i, |j, g| {
                    if !is_inlet(j) {
                        influx += g * (p[i] - p[j]);
                    }
                });
            }
        }
    }
    let mut outflux = 0.0;
    if let Some((a, b)) = vent {
        for i in (a * w..(b + 1) * w).filter(|&i| fill[i] >= 1.0 && !is_inlet(i)) {
            for_neighbours(field, i, |j, g| {
                if conducts(j) {
                    outflux += g * (p[j] - cfg.p_front);
                }
            });
        }
    }

    let mut dt = max_dt;
    let mut fastest = 0.0f64;
    for (i, &r) in rate.iter().enumerate() {
        if r > 0.0 {
            fastest = fastest.max(r);
            dt = dt.min((1.0 - state.fill[i]) / r);
        }
    }
    if fastest > 0.0 {
        dt = dt.min(cfg.cfl / fastest);
    }

    let mut adv = FillAdvance {
        elapsed: dt,
        influx: influx * dt,
        vent_outflux: outflux * dt,
        ..Default::default()
    };
    for (i, (f, &r)) in state.fill.iter_mut().zip(&rate).enumerate() {
        if r > 0.0 {
            let old = *f;
            let mut new = old + r * dt;
            if new >= 1.0 - SATURATION_SNAP {
                new = 1.0;
                adv.saturated += 1;
                state.newly_saturated.push(i);
            }
            *f = new;
            adv.fill_increase += new - old;
        }
    }
    if adv.saturated > 0 {
        state.pressure_stale = true;
    }
    Ok(adv)
}

/// Advance by one sub-step of `cfg.dt`, re-solving the pressure whenever
/// the saturated region changes.
pub fn substep(
    field: &PermeabilityField,
    state: &mut FlowState,
    cfg: &SolverConfig,
) -> Result<FillAdvance> {
    let mut total = FillAdvance::default();
    let mut remaining = cfg.dt;
    while remaining > 0.0 {
        if state.pressure_stale {
            refresh_pressure(field, state, cfg)?;
        }
        let adv = advance_fill(field, state, cfg, remaining)?;
        total.accumulate(&adv);
        if adv.elapsed >= remaining {
            break;
        }
        remaining -= adv.elapsed;
    }
    state.substeps += 1;
    state.sim_time += cfg.dt;
    Ok(total)
}

/// Apply `action` to the gates and run `cfg.substeps_per_action` sub-steps.
pub fn sim_step(
    field: &PermeabilityField,
    state: &mut FlowState,
    action: GateAction,
    cfg: &SolverConfig,
) -> Result<FillAdvance> {
    check_shapes(field, state)?;
    let (top, bottom) = action.gates();
    state.set_gates(top, bottom);
    let mut total = FillAdvance::default();
    for _ in 0..cfg.substeps_per_action {
        total.accumulate(&substep(field, state, cfg)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(ks: &[f64]) -> PermeabilityField {
        PermeabilityField::from_values(1, ks.len(), ks.to_vec()).unwrap()
    }

    fn no_vent() -> SolverConfig {
        SolverConfig {
            vent: false,
            ..Default::default()
        }
    }

    /// Column of `n` cells: rows 0..n-1 full, last row dry, top gate open.
    fn filled_column_state(n: usize) -> FlowState {
        let mut s = FlowState::empty(1, n);
        for f in &mut s.fill[..n - 1] {
            *f = 1.0;
        }
        s.top_gate_open = true;
        s
    }

    #[test]
    fn linear_profile_in_uniform_column() {
        for solver in [PressureSolver::Direct, PressureSolver::Sor] {
            let cfg = SolverConfig {
                solver,
                sor_tol: 1e-9,
                ..no_vent()
            };
            let field = column(&[1.0; 10]);
            let p = solve_pressure(&field, &filled_column_state(10), &cfg).unwrap();
            for (r, v) in p.iter().enumerate() {
                let want = 1.0 - r as f64 / 9.0;
                assert!((v - want).abs() < 1e-5, "{solver:?} row {r}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn two_layer_column_matches_series_resistors() {
        let ks: Vec<f64> = (0..10).map(|r| if r < 5 { 2.0 } else { 1.0 }).collect();
        let field = column(&ks);
        // Independent resistor network: faces carry resistance 1/k_face.
        let face_r: Vec<f64> = (0..9).map(|i| (ks[i] + ks[i + 1]) / (2.0 * ks[i] * ks[i + 1])).collect();
        let total: f64 = face_r.iter().sum();
        let mut expected = vec![1.0];
        let mut acc = 0.0;
        for r in &face_r {
            acc += r;
            expected.push(1.0 - acc / total);
        }
        for solver in [PressureSolver::Direct, PressureSolver::Sor] {
            let cfg = SolverConfig {
                solver,
                sor_tol: 1e-10,
                ..no_vent()
            };
            let p = solve_pressure(&field, &filled_column_state(10), &cfg).unwrap();
            for (a, b) in p.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-8, "{solver:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn boundary_only_when_nothing_filled() {
        let field = PermeabilityField::uniform(4, 6, 1.0).unwrap();
        let mut s = FlowState::for_field(&field);
        s.top_gate_open = true;
        s.bottom_gate_open = true;
        let p = solve_pressure(&field, &s, &SolverConfig::default()).unwrap();
        for r in 0..6 {
            for c in 0..4 {
                let want = if r == 0 || r == 5 { 1.0 } else { 0.0 };
                assert_eq!(p[r * 4 + c], want);
            }
        }
    }

    #[test]
    fn solve_needs_an_open_gate() {
        let field = PermeabilityField::uniform(2, 4, 1.0).unwrap();
        let s = FlowState::for_field(&field);
        assert!(matches!(
            solve_pressure(&field, &s, &SolverConfig::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn sor_reports_non_convergence() {
        let field = column(&[1.0; 40]);
        let cfg = SolverConfig {
            solver: PressureSolver::Sor,
            sor_max_iters: 3,
            ..no_vent()
        };
        match solve_pressure(&field, &filled_column_state(40), &cfg) {
            Err(Error::SolverDiverged { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > cfg.sor_tol);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn direct_and_sor_agree_on_random_region() {
        let cfg = SolverConfig::default();
        let field = crate::field_gen::generate_field(5, &Default::default()).unwrap();
        let mut s = FlowState::for_field(&field);
        for _ in 0..20 {
            sim_step(&field, &mut s, GateAction::Both, &cfg).unwrap();
        }
        let direct = solve_pressure(&field, &s, &cfg).unwrap();
        assert!(pressure_residual(&field, &s, &cfg, &direct) < 1e-12);
        let sor_cfg = SolverConfig {
            solver: PressureSolver::Sor,
            sor_tol: 1e-11,
            ..cfg
        };
        s.pressure = vec![0.0; s.pressure.len()];
        let sor = solve_pressure(&field, &s, &sor_cfg).unwrap();
        let worst = direct.iter().zip(&sor).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "max difference {worst}");
    }

    #[test]
    fn top_gate_only_fills_from_the_top() {
        let field = PermeabilityField::uniform(6, 20, 1.0).unwrap();
        let cfg = no_vent();
        let mut s = FlowState::for_field(&field);
        for _ in 0..10 {
            sim_step(&field, &mut s, GateAction::TopOnly, &cfg).unwrap();
        }
        assert!(s.fill_at(1, 0) > 0.0);
        for c in 0..6 {
            assert_eq!(s.fill_at(19, c), 0.0);
            assert_eq!(s.fill_at(15, c), 0.0);
        }
    }

    #[test]
    fn closed_gate_region_is_a_fixed_point() {
        let field = PermeabilityField::uniform(3, 12, 1.0).unwrap();
        let cfg = no_vent();
        let mut s = FlowState::for_field(&field);
        for _ in 0..3 {
            sim_step(&field, &mut s, GateAction::BottomOnly, &cfg).unwrap();
        }
        let bottom_before: Vec<f64> = s.fill[6 * 3..].to_vec();
        for _ in 0..3 {
            sim_step(&field, &mut s, GateAction::TopOnly, &cfg).unwrap();
        }
        assert_eq!(&s.fill[6 * 3..], &bottom_before[..]);
    }

    #[test]
    fn fill_monotone_bounded_and_mass_conserving() {
        let field = crate::field_gen::generate_field(11, &Default::default()).unwrap();
        let cfg = SolverConfig::default();
        let mut s = FlowState::for_field(&field);
        let actions = [GateAction::Both, GateAction::TopOnly, GateAction::BottomOnly];
        for step in 0..40 {
            s.set_gates(actions[step % 3].gates().0, actions[step % 3].gates().1);
            for _ in 0..cfg.substeps_per_action {
                let before = s.fill.clone();
                let adv = substep(&field, &mut s, &cfg).unwrap();
                assert!(adv.mass_balance_error() < 1e-9, "step {step}: {adv:?}");
                for (a, b) in before.iter().zip(&s.fill) {
                    assert!(b >= a && (0.0..=1.0).contains(b));
                }
            }
        }
    }

    #[test]
    fn zero_flux_state_does_not_change() {
        // Mould already full: nowhere for resin to go.
        let field = PermeabilityField::uniform(2, 4, 1.0).unwrap();
        let mut s = FlowState::for_field(&field);
        s.fill = vec![1.0; 8];
        s.set_gates(true, false);
        let adv = substep(&field, &mut s, &no_vent()).unwrap();
        assert_eq!(adv.fill_increase, 0.0);
        assert_eq!(s.fill, vec![1.0; 8]);
    }
}
