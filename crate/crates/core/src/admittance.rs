//! Admittance controller for the contact phase.
//!
//! Wrenches and twists are ordered `[τx, τy, τz, fx, fy, fz]` in the tool
//! frame. The sensed wrench is the wrench the tool exerts on its environment.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Wrench = [f64; 6];
pub type Twist = [f64; 6];

pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TZ: usize = 2;
pub const FX: usize = 3;
pub const FY: usize = 4;
pub const FZ: usize = 5;

pub const FILTER_LEN: usize = 51;

/// Euclidean norm of the force part.
pub fn force_magnitude(w: &Wrench) -> f64 {
    (w[FX] * w[FX] + w[FY] * w[FY] + w[FZ] * w[FZ]).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmittanceGains {
    pub m_diag: [f64; 6],
    pub b_diag: [f64; 6],
    pub selection: [f64; 6],
    pub f_des: Wrench,
    /// Deadzone half-width (N, applied to every component).
    pub f_th: f64,
    pub inner_dt: f64,
    pub tau_des_x: f64,
    pub tau_tol: f64,
    /// Maximum y and z travel inside the termination window (m).
    pub motion_tol: f64,
    pub window_s: f64,
}

impl Default for AdmittanceGains {
    fn default() -> Self {
        AdmittanceGains {
            m_diag: [0.0, 0.0, 0.0, 0.0, 100.0, 10.0],
            b_diag: [0.0, 0.0, 0.0, 0.0, 400.0, 250.0],
            selection: [0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
            f_des: [0.0, 0.0, 0.0, 0.0, 0.0, 2.0],
            f_th: 0.2,
            inner_dt: 0.002,
            tau_des_x: 0.0,
            tau_tol: 0.0025,
            motion_tol: 0.0005,
            window_s: 1.0,
        }
    }
}

impl AdmittanceGains {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.inner_dt > 0.0) {
            return bad(format!("gains.inner_dt must be positive, got {}", self.inner_dt));
        }
        if !(self.f_th >= 0.0) {
            return bad(format!("gains.f_th must be non-negative, got {}", self.f_th));
        }
        for i in 0..6 {
            let l = self.selection[i];
            if l != 0.0 && l != 1.0 {
                return bad(format!("gains.selection[{i}] must be 0 or 1, got {l}"));
            }
            if l == 1.0 {
                if !(self.m_diag[i] > 0.0) {
                    return bad(format!("gains.m_diag[{i}] must be positive on a selected axis"));
                }
                if !(self.b_diag[i] >= 0.0 && self.b_diag[i] * self.inner_dt < self.m_diag[i]) {
                    return bad(format!("gains.b_diag[{i}]·inner_dt must be below m_diag[{i}] for stability"));
                }
            }
        }
        if !(self.tau_tol >= 0.0 && self.motion_tol >= 0.0 && self.window_s > 0.0) {
            return bad("gains termination tolerances must be non-negative and the window positive".into());
        }
        Ok(())
    }

    /// Inner steps spanned by the termination window.
    pub fn window_steps(&self) -> usize {
        (self.window_s / self.inner_dt).round() as usize
    }
}

/// Moving average over the last [`FILTER_LEN`] wrenches; before the buffer
/// fills, the average runs over the samples seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    buf: [Wrench; FILTER_LEN],
    head: usize,
    fill: usize,
}

impl Default for FilterState {
    fn default() -> Self {
        FilterState {
            buf: [[0.0; 6]; FILTER_LEN],
            head: 0,
            fill: 0,
        }
    }
}

impl FilterState {
    pub fn capacity(&self) -> usize {
        FILTER_LEN
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn push(&mut self, raw: Wrench) -> Wrench {
        self.buf[self.head] = raw;
        self.head = (self.head + 1) % FILTER_LEN;
        self.fill = (self.fill + 1).min(FILTER_LEN);
        self.mean()
    }

    pub fn mean(&self) -> Wrench {
        let mut out = [0.0; 6];
        if self.fill == 0 {
            return out;
        }
        // Oldest to newest, so the sum order is fixed by the push order.
        let start = (self.head + FILTER_LEN - self.fill) % FILTER_LEN;
        for k in 0..self.fill {
            let w = &self.buf[(start + k) % FILTER_LEN];
            for i in 0..6 {
                out[i] += w[i];
            }
        }
        out.map(|s| s / self.fill as f64)
    }
}

pub fn filter_wrench(state: &mut FilterState, raw: Wrench) -> Wrench {
    state.push(raw)
}

/// `sgn(x)·max(|x| − th, 0)`.
pub fn deadzone(x: f64, th: f64) -> f64 {
    x.signum() * (x.abs() - th).max(0.0) * f64::from(x != 0.0)
}

pub fn select(selection: &[f64; 6], w: &Wrench) -> Wrench {
    std::array::from_fn(|i| selection[i] * w[i])
}

/// One admittance update: returns the commanded acceleration and the new twist.
pub fn admittance_step(g: &AdmittanceGains, filtered: &Wrench, twist: &Twist) -> (Twist, Twist) {
    let sel = select(&g.selection, filtered);
    let mut accel = [0.0; 6];
    let mut next = [0.0; 6];
    for i in 0..6 {
        if g.selection[i] == 1.0 {
            let err = deadzone(g.f_des[i] - sel[i], g.f_th);
            accel[i] = (err - g.b_diag[i] * twist[i]) / g.m_diag[i];
            next[i] = twist[i] + accel[i] * g.inner_dt;
        }
    }
    (accel, next)
}

/// Rolling history of `(τx, tool y, tool z)` at the inner rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminationWindow {
    samples: VecDeque<(f64, f64, f64)>,
    /// Number of inner steps the window must span.
    pub steps: usize,
    pub tau_tol: f64,
    pub motion_tol: f64,
}

impl TerminationWindow {
    pub fn new(steps: usize, tau_tol: f64, motion_tol: f64) -> Self {
        TerminationWindow {
            samples: VecDeque::with_capacity(steps + 1),
            steps,
            tau_tol,
            motion_tol,
        }
    }

    pub fn from_gains(g: &AdmittanceGains) -> Self {
        Self::new(g.window_steps(), g.tau_tol, g.motion_tol)
    }

    pub fn push(&mut self, tau_x: f64, y: f64, z: f64) {
        self.samples.push_back((tau_x, y, z));
        while self.samples.len() > self.steps + 1 {
            self.samples.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    /// A full window holds `steps + 1` samples, spanning `steps` intervals.
    pub fn is_full(&self) -> bool {
        self.samples.len() == self.steps + 1
    }

    /// `(y range, z range)` over the window.
    pub fn displacement(&self) -> (f64, f64) {
        let range = |f: fn(&(f64, f64, f64)) -> f64| {
            let (lo, hi) = self
                .samples
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi >= lo {
                hi - lo
            } else {
                0.0
            }
        };
        (range(|s| s.1), range(|s| s.2))
    }

    pub fn check(&self, tau_des_x: f64) -> bool {
        check_termination(self, tau_des_x)
    }
}

pub fn check_termination(win: &TerminationWindow, tau_des_x: f64) -> bool {
    let Some(&(tau, _, _)) = win.samples.back() else {
        return false;
    };
    if !win.is_full() {
        return false;
    }
    let (dy, dz) = win.displacement();
    (tau - tau_des_x).abs() <= win.tau_tol && dy < win.motion_tol && dz < win.motion_tol
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControllerTraceRow {
    pub time: f64,
    pub raw: Wrench,
    pub filtered: Wrench,
    pub error: Wrench,
    pub accel: Twist,
    pub twist: Twist,
}

const TRACE_HEADER: [&str; 31] = [
    "time", "raw_tx", "raw_ty", "raw_tz", "raw_fx", "raw_fy", "raw_fz", "filt_tx", "filt_ty", "filt_tz", "filt_fx",
    "filt_fy", "filt_fz", "err_tx", "err_ty", "err_tz", "err_fx", "err_fy", "err_fz", "acc_0", "acc_1", "acc_2",
    "acc_3", "acc_4", "acc_5", "vel_0", "vel_1", "vel_2", "vel_3", "vel_4", "vel_5",
];

pub fn write_controller_trace(path: &Path, rows: &[ControllerTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(TRACE_HEADER).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        let mut rec = vec![r.time.to_string()];
        for block in [&r.raw, &r.filtered, &r.error, &r.accel, &r.twist] {
            rec.extend(block.iter().map(f64::to_string));
        }
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Filter, admittance law and termination detector bundled for one episode.
#[derive(Debug, Clone)]
pub struct AdmittanceController {
    pub gains: AdmittanceGains,
    pub filter: FilterState,
    pub twist: Twist,
    pub window: TerminationWindow,
    pub time: f64,
    pub trace: Option<Vec<ControllerTraceRow>>,
}

impl AdmittanceController {
    pub fn new(gains: AdmittanceGains) -> Result<Self> {
        gains.validate()?;
        Ok(AdmittanceController {
            window: TerminationWindow::from_gains(&gains),
            gains,
            filter: FilterState::default(),
            twist: [0.0; 6],
            time: 0.0,
            trace: None,
        })
    }

    /// Continue from a filter that was already running before hand-over.
    pub fn with_filter(mut self, filter: FilterState) -> Self {
        self.filter = filter;
        self
    }

    pub fn record_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Push a raw sample and integrate the twist; returns the filtered wrench.
    pub fn update(&mut self, raw: Wrench) -> Wrench {
        let filtered = self.filter.push(raw);
        let (accel, twist) = admittance_step(&self.gains, &filtered, &self.twist);
        self.twist = twist;
        self.time += self.gains.inner_dt;
        if let Some(trace) = &mut self.trace {
            let sel = select(&self.gains.selection, &filtered);
            let error = std::array::from_fn(|i| {
                self.gains.selection[i] * deadzone(self.gains.f_des[i] - sel[i], self.gains.f_th)
            });
            trace.push(ControllerTraceRow {
                time: self.time,
                raw,
                filtered,
                error,
                accel,
                twist,
            });
        }
        filtered
    }

    /// Record the post-motion tool position and test for completion.
    pub fn observe(&mut self, filtered_tau_x: f64, tool_y: f64, tool_z: f64) -> bool {
        self.window.push(filtered_tau_x, tool_y, tool_z);
        self.window.check(self.gains.tau_des_x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deadzone_examples_and_shape() {
        assert_eq!(deadzone(0.1, 0.2), 0.0);
        assert!((deadzone(0.5, 0.2) - 0.3).abs() < 1e-12);
        assert!((deadzone(-0.5, 0.2) + 0.3).abs() < 1e-12);
        assert_eq!(deadzone(0.0, 0.2), 0.0);
        assert_eq!(deadzone(0.2, 0.2), 0.0);
        for k in -100..=100 {
            let x = k as f64 * 0.013;
            assert_eq!(deadzone(-x, 0.2), -deadzone(x, 0.2));
            assert!((deadzone(x, 0.2).abs() - (x.abs() - 0.2).max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn select_examples() {
        let g = AdmittanceGains::default();
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(select(&g.selection, &w), [0.0, 0.0, 0.0, 0.0, 5.0, 6.0]);
        assert_eq!(select(&g.selection, &select(&g.selection, &w)), select(&g.selection, &w));
        assert_eq!(select(&g.selection, &[0.0; 6]), [0.0; 6]);
    }

    #[test]
    fn filter_examples() {
        let mut f = FilterState::default();
        let c = [0.1, -0.2, 0.3, 1.0, 2.0, 3.0];
        assert_eq!(f.push(c), c);
        for _ in 0..60 {
            f.push(c);
        }
        let m = f.mean();
        for i in 0..6 {
            assert!((m[i] - c[i]).abs() < 1e-12);
        }
        let mut f = FilterState::default();
        for _ in 0..25 {
            f.push([0.0; 6]);
        }
        // Pad so the window holds 25 zeros then 26 ones.
        let mut f2 = FilterState::default();
        for _ in 0..60 {
            f2.push([0.0; 6]);
        }
        let mut out = [0.0; 6];
        for _ in 0..26 {
            out = f2.push([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        }
        assert!((out[FZ] - 26.0 / 51.0).abs() < 1e-12);
        assert_eq!(f.capacity(), 51);
    }

    #[test]
    fn admittance_examples() {
        let g = AdmittanceGains::default();
        let (a, v) = admittance_step(&g, &[0.0; 6], &[0.0; 6]);
        assert!((a[FZ] - 0.18).abs() < 1e-12);
        assert_eq!(a[FY], 0.0);
        assert!((v[FZ] - 0.18 * 0.002).abs() < 1e-12);
        let at_des = [0.0, 0.0, 0.0, 0.0, 0.0, 2.0];
        let (a, _) = admittance_step(&g, &at_des, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.01]);
        assert!((a[FZ] + 0.25).abs() < 1e-12);
        let zero = AdmittanceGains {
            f_des: [0.0; 6],
            ..Default::default()
        };
        assert_eq!(admittance_step(&zero, &[0.0; 6], &[0.0; 6]), ([0.0; 6], [0.0; 6]));
    }

    #[test]
    fn free_decay_factors() {
        let g = AdmittanceGains::default();
        let at_des = g.f_des;
        let mut v = [0.0, 0.0, 0.0, 0.0, 0.01, 0.01];
        for _ in 0..20 {
            let (_, next) = admittance_step(&g, &at_des, &v);
            assert!((next[FY] / v[FY] - 0.992).abs() < 1e-12);
            assert!((next[FZ] / v[FZ] - 0.95).abs() < 1e-12);
            v = next;
        }
    }

    #[test]
    fn unselected_axes_stay_still() {
        let g = AdmittanceGains::default();
        let w = [0.3, -0.2, 0.1, 5.0, 1.0, -1.0];
        let (a, v) = admittance_step(&g, &w, &[1.0; 6]);
        for i in [TX, TY, TZ, FX] {
            assert_eq!((a[i], v[i]), (0.0, 0.0));
        }
    }

    fn window_with(tau: f64, disp: f64) -> TerminationWindow {
        let g = AdmittanceGains::default();
        let mut w = TerminationWindow::from_gains(&g);
        let n = g.window_steps();
        for k in 0..=n {
            let f = k as f64 / n as f64;
            w.push(tau, disp * f, disp * (1.0 - f));
        }
        w
    }

    #[test]
    fn termination_truth_table() {
        assert!(check_termination(&window_with(0.001, 0.0002), 0.0));
        assert!(!check_termination(&window_with(0.01, 0.0002), 0.0));
        assert!(!check_termination(&window_with(0.001, 0.002), 0.0));
    }

    #[test]
    fn termination_needs_full_window_and_is_monotone() {
        let g = AdmittanceGains::default();
        let mut w = TerminationWindow::from_gains(&g);
        for _ in 0..g.window_steps() {
            w.push(0.0, 0.0, 0.0);
            assert!(!w.check(0.0));
        }
        w.push(0.0, 0.0, 0.0);
        assert!(w.check(0.0));
        for (tau, disp) in [(0.002, 0.0004), (0.0024, 0.00049)] {
            assert!(window_with(tau, disp).check(0.0));
            assert!(window_with(tau * 0.5, disp * 0.5).check(0.0));
        }
    }

    #[test]
    fn invalid_gains_rejected() {
        let g = AdmittanceGains {
            m_diag: [0.0; 6],
            ..Default::default()
        };
        assert!(g.validate().unwrap_err().is_config());
        let g = AdmittanceGains {
            b_diag: [0.0, 0.0, 0.0, 0.0, 1e6, 250.0],
            ..Default::default()
        };
        assert!(g.validate().is_err());
    }
}
