//! Deterministic thermal scene simulator.
//!
//! Stands in for the physical sensor: people are isotropic Gaussian warm
//! blobs moving over an 8x8 footprint, plus i.i.d. Gaussian noise, quantized
//! to the sensor's 0.25 °C step. Every frame comes with ground truth.
//!
//! Positions are in source-cell units: cell `(i, j)` is centred at `(i, j)`
//! and the sensor covers `[-0.5, 7.5]` on both axes. Rows are the walking
//! axis; row 0 faces zone A.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Direction;
use crate::thermal::{quantize, to_grid_coord, SensorCells, ThermalFrame, SENSOR_SIZE};

pub const MOUNT_HEIGHT_M: f64 = 2.0;
pub const FIELD_OF_VIEW_DEG: f64 = 60.0;
/// Distance outside the footprint where transits start and end, in cells.
pub const OFF_SENSOR_MARGIN: f64 = 3.0;

const FIRST_ROW: f64 = -OFF_SENSOR_MARGIN;
const LAST_ROW: f64 = (SENSOR_SIZE - 1) as f64 + OFF_SENSOR_MARGIN;
const MIDLINE_ROW: f64 = (SENSOR_SIZE - 1) as f64 / 2.0;

/// Ground footprint of one sensor cell at the mounting height, metres.
pub fn cell_size_m() -> f64 {
    2.0 * MOUNT_HEIGHT_M * (FIELD_OF_VIEW_DEG.to_radians() / 2.0).tan() / SENSOR_SIZE as f64
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PersonPath {
    /// Straight walk across the footprint; entry walks A→B.
    Transit { direction: Direction, col: f64 },
    /// Walk in from `side` to `depth_row`, stand for `dwell_s`, walk back out.
    Loiter {
        side: Side,
        col: f64,
        depth_row: f64,
        dwell_s: f64,
    },
    /// Appear at a fixed spot for `dwell_s`.
    Stationary { row: f64, col: f64, dwell_s: f64 },
}

fn default_speed() -> f64 {
    1.2
}
fn default_excess() -> f64 {
    8.0
}
fn default_sigma() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonScript {
    pub enter_time_s: f64,
    pub path: PersonPath,
    #[serde(default = "default_speed")]
    pub speed_mps: f64,
    #[serde(default = "default_excess")]
    pub body_excess_c: f64,
    #[serde(default = "default_sigma")]
    pub blob_sigma_cells: f64,
}

impl PersonScript {
    pub fn new(enter_time_s: f64, path: PersonPath) -> Self {
        Self {
            enter_time_s,
            path,
            speed_mps: default_speed(),
            body_excess_c: default_excess(),
            blob_sigma_cells: default_sigma(),
        }
    }

    fn cells_per_s(&self) -> f64 {
        self.speed_mps / cell_size_m()
    }

    /// Seconds from entering to leaving the scene.
    pub fn active_s(&self) -> f64 {
        let v = self.cells_per_s();
        match &self.path {
            PersonPath::Transit { .. } => (LAST_ROW - FIRST_ROW) / v,
            PersonPath::Loiter {
                side,
                depth_row,
                dwell_s,
                ..
            } => 2.0 * (depth_row - start_row(*side)).abs() / v + dwell_s,
            PersonPath::Stationary { dwell_s, .. } => *dwell_s,
        }
    }

    /// Centre position at scenario time `t`, if the person is in the scene.
    pub fn position(&self, t: f64) -> Option<(f64, f64)> {
        let dt = t - self.enter_time_s;
        if dt < 0.0 || dt > self.active_s() {
            return None;
        }
        let v = self.cells_per_s();
        Some(match &self.path {
            PersonPath::Transit { direction, col } => match direction {
                Direction::Entry => (FIRST_ROW + v * dt, *col),
                Direction::Exit => (LAST_ROW - v * dt, *col),
            },
            PersonPath::Loiter {
                side,
                col,
                depth_row,
                dwell_s,
            } => {
                let from = start_row(*side);
                let walk = (depth_row - from).abs() / v;
                let step = (depth_row - from).signum() * v;
                let row = if dt < walk {
                    from + step * dt
                } else if dt < walk + dwell_s {
                    *depth_row
                } else {
                    depth_row - step * (dt - walk - dwell_s)
                };
                (row, *col)
            }
            PersonPath::Stationary { row, col, .. } => (*row, *col),
        })
    }

    /// Time the person crosses the midline, for transits.
    pub fn crossing(&self) -> Option<(Direction, f64)> {
        match &self.path {
            PersonPath::Transit { direction, .. } => {
                let dist = match direction {
                    Direction::Entry => MIDLINE_ROW - FIRST_ROW,
                    Direction::Exit => LAST_ROW - MIDLINE_ROW,
                };
                Some((*direction, self.enter_time_s + dist / self.cells_per_s()))
            }
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let finite = [
            self.enter_time_s,
            self.speed_mps,
            self.body_excess_c,
            self.blob_sigma_cells,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err("non-finite person parameter".into());
        }
        if self.speed_mps <= 0.0 || self.blob_sigma_cells <= 0.0 || self.body_excess_c < 0.0 {
            return Err("person speed, blob sigma must be positive and excess non-negative".into());
        }
        match &self.path {
            PersonPath::Loiter { dwell_s, .. } | PersonPath::Stationary { dwell_s, .. }
                if *dwell_s < 0.0 =>
            {
                Err("negative dwell".into())
            }
            _ => Ok(()),
        }
    }
}

fn start_row(side: Side) -> f64 {
    match side {
        Side::A => FIRST_ROW,
        Side::B => LAST_ROW,
    }
}

fn default_ambient() -> f64 {
    20.0
}
fn default_fps() -> f64 {
    10.0
}
fn default_noise() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default = "default_ambient")]
    pub ambient_c: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub duration_s: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma_c: f64,
    /// Timestamp of frame 0.
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default)]
    pub persons: Vec<PersonScript>,
}

impl Scenario {
    pub fn empty(seed: u64, duration_s: f64) -> Self {
        Self {
            seed,
            ambient_c: default_ambient(),
            fps: default_fps(),
            duration_s,
            noise_sigma_c: default_noise(),
            start_ms: 0,
            persons: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_owned()));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s must be positive");
        }
        if !(self.noise_sigma_c >= 0.0 && self.noise_sigma_c.is_finite()) {
            return bad("noise_sigma_c must be non-negative");
        }
        if !self.ambient_c.is_finite() {
            return bad("ambient_c must be finite");
        }
        for (i, p) in self.persons.iter().enumerate() {
            if !(0.0..=self.duration_s).contains(&p.enter_time_s) {
                return Err(ScenarioError::Invalid(format!(
                    "person {i} enters outside the scenario"
                )));
            }
            p.validate()
                .map_err(|m| ScenarioError::Invalid(format!("person {i}: {m}")))?;
        }
        Ok(())
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.fps).floor() as u64
    }

    pub fn frame_time_s(&self, index: u64) -> f64 {
        index as f64 / self.fps
    }

    pub fn frame_timestamp_ms(&self, index: u64) -> u64 {
        self.start_ms + (index as f64 * 1000.0 / self.fps).round() as u64
    }

    /// True crossings in time order.
    pub fn true_events(&self) -> Vec<TrueEvent> {
        let mut events: Vec<TrueEvent> = self
            .persons
            .iter()
            .enumerate()
            .filter_map(|(id, p)| {
                p.crossing().map(|(direction, t)| TrueEvent {
                    person_id: id,
                    direction,
                    time_ms: self.start_ms + (t * 1000.0).round() as u64,
                })
            })
            .collect();
        events.sort_by_key(|e| (e.time_ms, e.person_id));
        events
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Renders the frame stream for `sensor_id`.
    pub fn render(&self, sensor_id: &str) -> Result<Renderer<'_>, ScenarioError> {
        self.validate()?;
        if !crate::thermal::is_valid_id(sensor_id) {
            return Err(ScenarioError::Invalid(format!("sensor id {sensor_id:?}")));
        }
        let noise = (self.noise_sigma_c > 0.0)
            .then(|| Normal::new(0.0, self.noise_sigma_c).expect("validated sigma"));
        Ok(Renderer {
            scenario: self,
            sensor_id: sensor_id.to_owned(),
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            noise,
            index: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrueEvent {
    pub person_id: usize,
    pub direction: Direction,
    pub time_ms: u64,
}

impl std::fmt::Display for TrueEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} {}", self.person_id, self.direction, self.time_ms)
    }
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    /// `(person_id, row, col)` in upscaled-grid coordinates, for every
    /// person whose centre lies over the footprint.
    pub persons: Vec<(usize, f64, f64)>,
}

pub struct Renderer<'a> {
    scenario: &'a Scenario,
    sensor_id: String,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    index: u64,
}

/// Noise-free temperature field for a set of blob centres.
pub fn blob_field(ambient_c: f64, blobs: &[(f64, f64, f64, f64)]) -> SensorCells {
    let mut cells = [[ambient_c; SENSOR_SIZE]; SENSOR_SIZE];
    for &(row, col, excess, sigma) in blobs {
        let two_s2 = 2.0 * sigma * sigma;
        for (i, line) in cells.iter_mut().enumerate() {
            for (j, v) in line.iter_mut().enumerate() {
                let d2 = (i as f64 - row).powi(2) + (j as f64 - col).powi(2);
                *v += excess * (-d2 / two_s2).exp();
            }
        }
    }
    cells
}

impl Iterator for Renderer<'_> {
    type Item = (ThermalFrame, FrameTruth);

    fn next(&mut self) -> Option<Self::Item> {
        if self.index >= self.scenario.frame_count() {
            return None;
        }
        let s = self.scenario;
        let t = s.frame_time_s(self.index);
        let mut blobs = Vec::new();
        let mut truth = Vec::new();
        let extent = -0.5..=(SENSOR_SIZE as f64 - 0.5);
        for (id, p) in s.persons.iter().enumerate() {
            if let Some((row, col)) = p.position(t) {
                blobs.push((row, col, p.body_excess_c, p.blob_sigma_cells));
                if extent.contains(&row) && extent.contains(&col) {
                    truth.push((id, to_grid_coord(row), to_grid_coord(col)));
                }
            }
        }
        let mut cells = blob_field(s.ambient_c, &blobs);
        for v in cells.iter_mut().flatten() {
            if let Some(noise) = &self.noise {
                *v += noise.sample(&mut self.rng);
            }
            *v = quantize(*v);
        }
        let frame = ThermalFrame::new(
            self.sensor_id.clone(),
            self.index + 1,
            s.frame_timestamp_ms(self.index),
            cells,
        )
        .expect("rendered cells are quantized and clamped");
        self.index += 1;
        Some((frame, FrameTruth { persons: truth }))
    }
}

/// Shape of a generated test day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayParams {
    /// Simulated length of the working day after time compression, seconds.
    pub day_length_s: f64,
    /// Quiet period at the start (covers background warm-up).
    pub lead_in_s: f64,
    /// Minimum gap between successive passages through the single door.
    pub min_headway_s: f64,
    pub noise_sigma_c: f64,
    pub ambient_c: f64,
    pub start_ms: u64,
}

impl Default for DayParams {
    fn default() -> Self {
        Self {
            day_length_s: 1200.0,
            lead_in_s: 5.0,
            min_headway_s: 2.0,
            noise_sigma_c: default_noise(),
            ambient_c: default_ambient(),
            start_ms: 0,
        }
    }
}

/// Balanced single-door day with default parameters.
pub fn make_test_day(passes: u32, seed: u64) -> Scenario {
    make_test_day_with(passes, seed, &DayParams::default())
}

/// Balanced single-door day.
///
/// `passes` is rounded up to even; half are entries, half exits. Passage
/// times are uniform order statistics over the day (a Poisson process
/// conditioned on its count), pushed apart to the minimum headway, and the
/// direction sequence never lets true occupancy go negative.
pub fn make_test_day_with(passes: u32, seed: u64, params: &DayParams) -> Scenario {
    let total = passes + passes % 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slowest = PersonScript {
        speed_mps: 0.9,
        ..PersonScript::new(
            0.0,
            PersonPath::Transit {
                direction: Direction::Entry,
                col: 0.0,
            },
        )
    };
    let tail = slowest.active_s() + 2.0;
    let window_end = (params.day_length_s - tail).max(params.lead_in_s);

    let mut times: Vec<f64> = (0..total)
        .map(|_| rng.random_range(params.lead_in_s..=window_end))
        .collect();
    times.sort_by(f64::total_cmp);
    for i in 1..times.len() {
        times[i] = times[i].max(times[i - 1] + params.min_headway_s);
    }

    let mut entries_left = total / 2;
    let mut exits_left = total / 2;
    let mut inside = 0u32;
    let mut persons = Vec::with_capacity(total as usize);
    for &t in &times {
        let entry = if inside == 0 {
            true
        } else if entries_left == 0 {
            false
        } else {
            rng.random_range(0..entries_left + exits_left) < entries_left
        };
        let direction = if entry {
            entries_left -= 1;
            inside += 1;
            Direction::Entry
        } else {
            exits_left -= 1;
            inside -= 1;
            Direction::Exit
        };
        persons.push(PersonScript {
            enter_time_s: t,
            path: PersonPath::Transit {
                direction,
                col: rng.random_range(2.0..=5.0),
            },
            speed_mps: rng.random_range(0.9..=1.5),
            body_excess_c: rng.random_range(7.0..=9.0),
            blob_sigma_cells: default_sigma(),
        });
    }

    let last_end = persons
        .iter()
        .map(|p| p.enter_time_s + p.active_s())
        .fold(0.0, f64::max);
    Scenario {
        seed: rng.random_range(0..=i64::MAX as u64),
        ambient_c: params.ambient_c,
        fps: default_fps(),
        duration_s: params.day_length_s.max(last_end + 2.0),
        noise_sigma_c: params.noise_sigma_c,
        start_ms: params.start_ms,
        persons,
    }
}
